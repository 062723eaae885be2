import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from porox import analysis, hdg
from porox.mesh import build_structured_mesh
from porox.physics import StabilizationPolicy, builtin_case

from _studies import study

GEN = StabilizationPolicy.generalized()


@pytest.fixture(scope="module")
def nondeg_solution():
    case = builtin_case("nondeg2d")
    return hdg.solve(build_structured_mesh(case.domain, "quad", 8), case, 2, GEN)


def _const(c):
    return lambda x: np.full(len(x), c)


# -- l2_error --------------------------------------------------------------------------

def test_exact_against_itself_is_zero(nondeg_solution):
    space = nondeg_solution.space
    case = nondeg_solution.case

    def exact_on_ref(q, e):
        x = space.origin[e][:, None, :] + np.einsum("eij,qj->eqi", space.jac[e], q)
        return case.pressure(x.reshape(-1, 2)).reshape(len(e), -1)
    assert analysis.l2_error(space, exact_on_ref, case.pressure) == 0.0


@pytest.mark.parametrize("c", [0.5, -3.0])
def test_constant_offset_on_unit_region(c):
    case = builtin_case("constcoef")  # domain [0, 1]^2 has unit measure
    sol = hdg.solve(build_structured_mesh(case.domain, "quad", 4), case, 1, GEN)
    space = sol.space
    err = analysis.l2_error(space, lambda q, e: sol.evaluate(q, e)[0] + c, case.pressure)
    assert abs(err - abs(c)) < 1e-12


def test_vector_error_sums_components(nondeg_solution):
    space = nondeg_solution.space
    ones = lambda q, e: np.ones((len(e), len(q), 2))  # noqa: E731
    err = analysis.l2_error(space, ones, lambda x: np.zeros((len(x), 2)))
    area = np.prod([hi - lo for lo, hi in nondeg_solution.case.domain])
    assert abs(err - math.sqrt(2 * area)) < 1e-12


@settings(max_examples=20)
@given(c=st.floats(-1e3, 1e3, allow_nan=False).filter(lambda v: abs(v) > 1e-6))
def test_error_scales_with_deviation(c):
    case = builtin_case("nondeg2d")
    space = hdg.HDGSpace(build_structured_mesh(case.domain, "quad", 2), 1)

    def dev(s):
        def fn(q, e):
            x = space.origin[e][:, None, :] + np.einsum("eij,qj->eqi", space.jac[e], q)
            return s * np.sin(3 * x[..., 0]) * x[..., 1]
        return fn
    zero = lambda x: np.zeros(len(x))  # noqa: E731
    base = analysis.l2_error(space, dev(1.0), zero)
    assert abs(analysis.l2_error(space, dev(c), zero) - abs(c) * base) <= 1e-12 * abs(c) * base


def test_region_restriction(nondeg_solution):
    mesh = nondeg_solution.mesh
    space = nondeg_solution.space
    half = analysis.Region(((0.0, 0.5), (0.0, 1.0))).elements(mesh)
    assert len(half) == mesh.n_elements // 2
    full = analysis.l2_error(space, lambda q, e: np.ones((len(e), len(q))), _const(0.0))
    part = analysis.l2_error(space, lambda q, e: np.ones((len(e), len(q))), _const(0.0), half)
    assert abs(part ** 2 - full ** 2 / 2) < 1e-12


@pytest.mark.parametrize("box", [((0.0, 0.3), (0.0, 1.0)), ((0.05, 1.0), (0.0, 1.0))])
def test_misaligned_region_rejected(nondeg_solution, box):
    with pytest.raises(analysis.RegionError):
        analysis.Region(box).elements(nondeg_solution.mesh)


def test_region_parse():
    assert analysis.Region.parse("all").box is None
    assert analysis.Region.parse([[-0.5, 1], [-0.5, 1]]).label() == "[-0.5,1]x[-0.5,1]"
    with pytest.raises(analysis.RegionError):
        analysis.Region.parse([[1, 0], [0, 1]])
    with pytest.raises(analysis.RegionError):
        analysis.Region(((0.0, 0.5),)).elements(build_structured_mesh(((0, 1), (0, 1)), "quad", 2))


def test_quadrature_boost_insensitive(nondeg_solution):
    a = analysis.compute_errors(nondeg_solution, ("p", "u"), boost=4)
    b = analysis.compute_errors(nondeg_solution, ("p", "u"), boost=8)
    for f in a:
        assert abs(a[f] - b[f]) < 0.005 * b[f]


def test_interface_elements_degrough():
    case = builtin_case("degRough", beta=-0.25)
    mesh = build_structured_mesh(case.domain, "quad", 8)
    flags = analysis.interface_elements(mesh, case.model.one_phase)
    assert flags.sum() > 0
    x = mesh.element_coords()
    lo, hi = x.min(axis=1), x.max(axis=1)
    touches = np.any((lo <= -0.75 + 1e-12) & (hi >= -0.75 - 1e-12), axis=1)
    assert np.all(touches[flags])


@pytest.mark.parametrize("k", [1, 2, 3])
def test_projection_rate_calibration(k):
    case = builtin_case("nondeg2d")
    errs, hs = [], []
    for n in (4, 8, 16):
        space = hdg.HDGSpace(build_structured_mesh(case.domain, "quad", n), k)
        coef = analysis.element_projection(space, case.pressure)
        errs.append(analysis.l2_error(
            space, lambda q, e: np.einsum("qa,ea->eq", space.ref.eval(q), coef[e]), case.pressure))
        hs.append(space.mesh.spacing)
    assert abs(analysis.rates(errs, hs)[-1] - (k + 1)) < 0.1


@pytest.mark.slow
def test_nondeg2d_k4_n128_pressure_error():
    res = study("nondeg2d", [4], [32, 64, 128], policy=("upwind",), m=(2, 3))
    err = res[4]["errors"]["p"][-1]
    assert 3.906e-10 / 2 < err < 3.906e-10 * 2


# -- rates -----------------------------------------------------------------------------

def test_rates_examples():
    assert analysis.rates([1e-2, 2.5e-3], [0.5, 0.25])[1] == pytest.approx(2.0, abs=1e-12)
    assert analysis.rates([7.534e-1, 2.188e-1], [0.5, 0.25])[1] == pytest.approx(1.784, abs=5e-4)
    assert analysis.rates([3e-3, 3e-3], [0.5, 0.25])[1] == 0.0
    assert analysis.rates([1e-3, 0.0], [0.5, 0.25]) == [None, analysis.EXACT]


def test_rates_errors():
    with pytest.raises(ValueError):
        analysis.rates([1.0, 0.5], [0.25, 0.5])
    with pytest.raises(ValueError):
        analysis.rates([1.0], [0.5, 0.25])


@given(e0=st.floats(1e-12, 1e3), r=st.floats(0.1, 8.0), factor=st.sampled_from([1.5, 2.0, 3.0]))
def test_rates_invert_power_law(e0, r, factor):
    e1 = e0 / factor ** r
    assert analysis.rates([e0, e1], [1.0, 1.0 / factor])[1] == pytest.approx(r, rel=1e-9)


# -- tables and studies ----------------------------------------------------------------

def test_table_formatting():
    t = analysis.ConvergenceTable(("p",))
    t.rows = [analysis.TableRow(1, 8, 0.25, {"p": 1e-2}), analysis.TableRow(1, 16, 0.125, {"p": 2.5e-3})]
    t.compute_rates()
    assert t.format() == "k,h,err_p,rate_p\n1,0.25,1.000e-02,\n1,0.125,2.500e-03,2.000\n"


def test_study_records_failed_rows():
    case = builtin_case("degSmooth")
    t = analysis.run_study(case, [1], [8, 10, 16], GEN)
    assert [r.failed is not None for r in t.rows] == [False, True, False]
    assert "AlignmentError" in t.rows[1].failed
    assert t.rows[2].rates["p"] is None  # no consecutive predecessor
    assert "FAILED" in t.format().splitlines()[2]


def test_study_upwind_on_degenerate_case_fails_rows():
    t = analysis.run_study(builtin_case("degSmooth"), [1], [8], StabilizationPolicy.upwind())
    assert "SingularStabilizationError" in t.rows[0].failed


def test_unknown_field_rejected(nondeg_solution):
    with pytest.raises(ValueError, match="unknown field"):
        analysis.compute_errors(nondeg_solution, ("q",))


@pytest.mark.slow
@pytest.mark.parametrize("beta,target", [(-0.25, 1.25), (-0.75, 0.75)])
def test_degrough_rate(beta, target):
    res = study("degRough", [1, 2, 4], [16, 32, 64, 128], fields=("p",), beta=beta)
    for k in (1, 2, 4):
        assert abs(res[k]["rates"]["p"][-1] - target) < 0.2


@pytest.mark.slow
def test_nondeg3d_k2_rate():
    res = study("nondeg3d", [2], [8, 12], policy=("upwind",), shape="hex", fields=("p",), m=(1, 1, 1))
    assert abs(res[2]["rates"]["p"][-1] - 2.417) < 0.3
