"""Command-line front end: ``solve``, ``study`` and ``verify``.

Configuration is a strict JSON object; command-line flags override it.
Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, hdg, linalg
from .mesh import build_structured_mesh
from .physics import (
    CASE_NAMES,
    StabilizationPolicy,
    builtin_case,
    flux_jacobian,
    flux_jacobian_eigen,
    verify_case_residual,
)

log = logging.getLogger("porox")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

CONFIG_KEYS = {"case", "m", "alpha", "beta", "shape", "k", "n", "tau", "gamma", "tau_value",
               "regions", "fields", "boost", "out", "threads", "sampling",
               "one_sided_interface"}
TAU_KINDS = ("upwind", "generalized", "constant", "reciprocal_h")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "solve"
    case: str = "nondeg2d"
    case_params: dict = field(default_factory=dict)
    shape: str | None = None
    k: list = field(default_factory=lambda: [1])
    n: list = field(default_factory=lambda: [8])
    tau: str = "generalized"
    tau_param: float | None = None
    one_sided_interface: bool = False
    regions: dict = field(default_factory=dict)
    fields: list = field(default_factory=lambda: ["p", "u"])
    boost: int = 4
    out: str = "porox-out"
    threads: int = 1
    sampling: int = 2

    def build_case(self):
        return builtin_case(self.case, **self.case_params)

    def policy(self) -> StabilizationPolicy:
        if self.tau == "upwind":
            return StabilizationPolicy.upwind()
        if self.tau == "generalized":
            return StabilizationPolicy.generalized(self.tau_param, self.one_sided_interface)
        if self.tau == "constant":
            return StabilizationPolicy.constant(self.tau_param)
        return StabilizationPolicy.reciprocal_h()

    def mesh_shape(self, dim: int) -> str:
        return self.shape or ("hex" if dim == 3 else "quad")


def _int_list(value, name, minimum):
    vals = value if isinstance(value, list) else [value]
    if not vals or not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
        raise ConfigError(f"{name} must be an integer or a list of integers")
    if any(v < minimum for v in vals):
        raise ConfigError(f"{name} values must be >= {minimum}")
    return list(vals)


def parse_config(path=None, overrides: dict | None = None, command: str = "solve") -> RunConfig:
    """Read and validate a JSON config; entries of ``overrides`` win over the file."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    raw.update({key: v for key, v in (overrides or {}).items() if v is not None})

    cfg = RunConfig(command=command)
    cfg.case = raw.get("case", cfg.case)
    if cfg.case not in CASE_NAMES:
        raise ConfigError(f"unknown case {cfg.case!r}; choose from {', '.join(CASE_NAMES)}")
    for key in ("m", "alpha", "beta"):
        if key in raw:
            cfg.case_params[key] = raw[key]
    try:
        case = cfg.build_case()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    cfg.shape = raw.get("shape")
    valid_shapes = ("hex",) if case.dim == 3 else ("quad", "tri")
    if cfg.shape is not None and cfg.shape not in valid_shapes:
        raise ConfigError(f"shape must be one of {', '.join(valid_shapes)} for case {cfg.case}")
    cfg.k = _int_list(raw.get("k", cfg.k), "k", 1)
    if max(cfg.k) > 10:
        raise ConfigError("k must be at most 10")
    cfg.n = _int_list(raw.get("n", cfg.n), "n", 1)

    cfg.tau = raw.get("tau", cfg.tau)
    if cfg.tau not in TAU_KINDS:
        raise ConfigError(f"tau must be one of {', '.join(TAU_KINDS)}")
    cfg.tau_param = raw.get("gamma") if cfg.tau == "generalized" else raw.get("tau_value")
    cfg.one_sided_interface = raw.get("one_sided_interface", False)
    if not isinstance(cfg.one_sided_interface, bool):
        raise ConfigError("one_sided_interface must be true or false")
    if cfg.one_sided_interface and cfg.tau != "generalized":
        raise ConfigError("one_sided_interface requires tau = generalized")
    try:
        cfg.policy()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    cfg.fields = list(raw.get("fields", cfg.fields))
    bad = [f for f in cfg.fields if f not in analysis.FIELDS]
    if bad or not cfg.fields:
        raise ConfigError(f"fields must be chosen from {', '.join(analysis.FIELDS)}")
    regions = raw.get("regions", "all")
    try:
        if isinstance(regions, dict):
            for name, box in regions.items():
                if name not in analysis.FIELDS:
                    raise ConfigError(f"region given for unknown field {name!r}")
                cfg.regions[name] = analysis.Region.parse(box)
        else:
            reg = analysis.Region.parse(regions)
            cfg.regions = {f: reg for f in analysis.FIELDS}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid region: {exc}") from None
    for reg in cfg.regions.values():
        if reg.box is not None and len(reg.box) != case.dim:
            raise ConfigError("region dimension does not match the case")

    cfg.boost = raw.get("boost", cfg.boost)
    if not isinstance(cfg.boost, int) or cfg.boost < 0:
        raise ConfigError("boost must be a non-negative integer")
    cfg.sampling = raw.get("sampling", cfg.sampling)
    if not isinstance(cfg.sampling, int) or cfg.sampling < 1:
        raise ConfigError("sampling must be a positive integer")
    cfg.out = str(raw.get("out", cfg.out))
    threads = os.environ.get("POROX_THREADS", raw.get("threads", cfg.threads))
    try:
        cfg.threads = int(threads)
    except (TypeError, ValueError):
        raise ConfigError("threads must be an integer") from None
    if cfg.threads < 1:
        raise ConfigError("threads must be positive")
    return cfg


# ---------------------------------------------------------------------------
# output


def emit_table(table: analysis.ConvergenceTable, path) -> None:
    if not table.rows:
        raise ValueError("table is empty")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header())
        w.writerows(table.csv_rows())


def sampling_points(shape: str, density: int) -> np.ndarray:
    """Reference sample points: cell centres of a ``density``-fold subdivision."""
    c = (np.arange(density) + 0.5) / density
    if shape == "tri":
        pts = []
        for j in range(density):
            for i in range(density - j):
                pts.append(((i + 1 / 3) / density, (j + 1 / 3) / density))
                if i + j < density - 1:
                    pts.append(((i + 2 / 3) / density, (j + 2 / 3) / density))
        return np.array(pts)
    dim = 3 if shape == "hex" else 2
    grids = np.meshgrid(*([2 * c - 1] * dim), indexing="ij")
    return np.column_stack([g.transpose().ravel() for g in grids])


def emit_fields(solution: hdg.HDGSolution, density: int, path) -> None:
    """Write ``x,y[,z],p,u1,u2[,u3],ptilde`` at per-element sample points."""
    space = solution.space
    dim = space.dim
    ref = sampling_points(space.mesh.shape, density)
    elems = np.arange(space.n_elements)
    x = space.origin[:, None, :] + np.einsum("eij,qj->eqi", space.jac, ref)
    p, u = solution.evaluate(ref)
    ptil, _ = hdg.recover_unscaled(solution, x, elems)
    names = ["x", "y", "z"][:dim] + ["p"] + [f"u{i + 1}" for i in range(dim)] + ["ptilde"]
    data = np.concatenate([x, p[..., None], u, ptil[..., None]], axis=2).reshape(-1, len(names))
    with open(path, "w", newline="") as fh:
        fh.write(f"# case={solution.case.name} k={space.k} n_elements={space.n_elements} "
                 f"tau={solution.policy.label()} sampling={density} points per axis per element "
                 f"(density 1 = element centroids)\n")
        fh.write(",".join(names) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.12e}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# commands


def solve_command(cfg: RunConfig) -> int:
    case = cfg.build_case()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    table = analysis.ConvergenceTable(tuple(cfg.fields))
    for k in cfg.k:
        for n in sorted(cfg.n):
            mesh = build_structured_mesh(case.domain, cfg.mesh_shape(case.dim), n)
            sol = hdg.solve(hdg.HDGSpace(mesh, k), case, policy=cfg.policy())
            errs = analysis.compute_errors(sol, cfg.fields, cfg.regions, cfg.boost)
            table.rows.append(analysis.TableRow(k, n, mesh.spacing, errs))
            emit_fields(sol, cfg.sampling, out / f"fields_{case.name}_k{k}_n{n}.csv")
            print(f"k={k} n={n} " + " ".join(f"err_{f}={v:.3e}" for f, v in errs.items()))
    table.compute_rates()
    emit_table(table, out / "solve.csv")
    return EXIT_OK


def study_command(cfg: RunConfig) -> int:
    case = cfg.build_case()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    table = analysis.run_study(case, cfg.k, cfg.n, cfg.policy(), cfg.regions, cfg.fields,
                               cfg.mesh_shape(case.dim), cfg.boost,
                               progress=lambda r: print(f"k={r.k} n={r.n} "
                                                        + ("FAILED" if r.failed else "done")))
    path = out / f"study_{case.name}.csv"
    emit_table(table, path)
    print(table.format(), end="")
    failed = [r for r in table.rows if r.failed]
    for r in failed:
        print(f"row k={r.k} n={r.n} failed: {r.failed}", file=sys.stderr)
    return EXIT_NUMERICAL if failed else EXIT_OK


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value < self.threshold


def _energy_gap(case, shape, n, k, samples, rng, tau_sign=1.0):
    mesh = build_structured_mesh(case.domain, shape, n)
    # extra quadrature keeps the non-polynomial coefficients' integration error out of the identity
    space = hdg.HDGSpace(mesh, k, quad_degree=2 * k + 10)
    system = hdg.assemble_monolithic(space, case, policy=StabilizationPolicy.generalized(),
                                     tau_sign=tau_sign)
    worst = 0.0
    for _ in range(samples):
        u = rng.standard_normal((space.n_elements, space.dim, space.nb))
        p = rng.standard_normal((space.n_elements, space.nb))
        ph = rng.standard_normal((mesh.n_faces, space.nfb))
        a, b = hdg.energy_product(system, u, p, ph)
        worst = max(worst, abs(a - b) / abs(b))
    return worst


def run_checks(quick: bool = False, inject_fault: str | None = None) -> list[CheckResult]:
    """Property suite; ``inject_fault="tau_sign"`` flips tau in the energy check."""
    rng = np.random.default_rng(20240601)
    results = []
    results.append(CheckResult("case residual oracle", max(
        verify_case_residual(builtin_case(name), samples=50 if quick else 200) for name in CASE_NAMES), 1e-6))

    configs = [("nondeg2d", "quad", 4, 2), ("degSmooth", "quad", 8, 2)]
    if not quick:
        configs += [("nondeg2d", "tri", 4, 1), ("degSmooth", "quad", 8, 3), ("nondeg3d", "hex", 2, 1)]
    gap = 0.0
    for name, shape, n, k in configs:
        case = builtin_case(name)
        mesh = build_structured_mesh(case.domain, shape, n)
        policy = StabilizationPolicy.generalized()
        a = hdg.solve(mesh, case, k, policy)
        b = hdg.solve_monolithic(hdg.assemble_monolithic(mesh, case, k, policy), case, policy)
        for x, y in ((a.u, b.u), (a.p, b.p), (a.phat, b.phat)):
            gap = max(gap, np.abs(x - y).max() / max(np.abs(y).max(), 1e-300))
    results.append(CheckResult("monolithic equivalence", gap, 1e-10))

    samples = 10 if quick else 100
    tau_sign = -1.0 if inject_fault == "tau_sign" else 1.0
    energy = max(_energy_gap(builtin_case("nondeg2d"), "quad", 4, 2, samples, rng, tau_sign),
                 _energy_gap(builtin_case("degSmooth"), "quad", 8, 2, samples, rng, tau_sign))
    results.append(CheckResult("energy identity", energy, 1e-11))

    uniq = 0.0
    for policy in (StabilizationPolicy.generalized(), StabilizationPolicy.constant(1.0),
                   StabilizationPolicy.reciprocal_h()):
        for name in ("nondeg2d", "degSmooth"):
            case = builtin_case(name).with_zero_data()
            sol = hdg.solve(build_structured_mesh(case.domain, "quad", 8), case, 2, policy)
            uniq = max(uniq, np.linalg.norm(sol.u) + np.linalg.norm(sol.p) + np.linalg.norm(sol.phat))
    results.append(CheckResult("zero-data uniqueness", uniq, 1e-12))

    cons = 0.0
    for name, k in (("nondeg2d", 2), ("degSmooth", 3)):
        case = builtin_case(name)
        sol = hdg.solve(build_structured_mesh(case.domain, "quad", 8), case, k)
        cons = max(cons, hdg.conservation_residual(sol))
    results.append(CheckResult("conservation residual", cons, 1e-9))

    exact = 0.0
    case = builtin_case("constcoef")
    for shape in ("quad", "tri"):
        for k in ((1, 2) if quick else (1, 2, 3)):
            sol = hdg.solve(build_structured_mesh(case.domain, shape, 4), case, k)
            errs = analysis.compute_errors(sol, ("p", "u", "pstar"))
            exact = max(exact, *errs.values())
    results.append(CheckResult("polynomial exactness", exact, 1e-10))

    eig = 0.0
    for _ in range(20):
        n = rng.standard_normal(int(rng.integers(2, 4)))
        n /= np.linalg.norm(n)
        c1 = float(rng.uniform(0.0, 5.0))
        lam, W = flux_jacobian_eigen(c1, n)
        rec = W @ np.diag(lam) @ np.linalg.inv(W)
        eig = max(eig, np.abs(rec - flux_jacobian(c1, n)).max())
    results.append(CheckResult("flux-Jacobian eigen reconstruction", eig, 1e-12))
    return results


def verify_command(cfg: RunConfig | None = None, quick: bool = False,
                   inject_fault: str | None = None) -> int:
    results = run_checks(quick, inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.value:.3e} (threshold {r.threshold:.0e})")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="porox", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("solve", "study"):
        sp = sub.add_parser(name)
        sp.add_argument("--config")
        sp.add_argument("--out")
        sp.add_argument("--case", choices=CASE_NAMES)
        sp.add_argument("--shape", choices=("quad", "tri", "hex"))
        sp.add_argument("--k", type=int, nargs="+")
        sp.add_argument("--n", type=int, nargs="+")
        sp.add_argument("--tau", choices=TAU_KINDS)
        sp.add_argument("--fields", nargs="+")
        sp.add_argument("--boost", type=int)
        sp.add_argument("--threads", type=int)
    vp = sub.add_parser("verify")
    vp.add_argument("--quick", action="store_true")
    vp.add_argument("--config")
    vp.add_argument("--threads", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {key: getattr(args, key, None) for key in
                 ("out", "case", "shape", "k", "n", "tau", "fields", "boost", "threads")}
    try:
        cfg = parse_config(args.config, overrides, args.command)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    with threadpool_limits(limits=cfg.threads):
        try:
            if args.command == "solve":
                return solve_command(cfg)
            if args.command == "study":
                return study_command(cfg)
            return verify_command(cfg, quick=args.quick)
        except analysis.SOLVER_ERRORS as exc:
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        except (analysis.RegionError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
