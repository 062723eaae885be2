import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from porox import linalg


def test_dense_diag():
    assert np.allclose(linalg.dense_lu_solve(np.diag([2.0, 4.0]), np.array([2.0, 4.0])), [1, 1])


def test_dense_random_residual():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((20, 20)) + 20 * np.eye(20)
    b = rng.standard_normal((20, 3))
    x = linalg.dense_lu_solve(a, b)
    assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) < 1e-10


def test_dense_zero_matrix_is_singular():
    with pytest.raises(linalg.SingularMatrixError):
        linalg.dense_lu_solve(np.zeros((3, 3)), np.ones(3))


def test_dense_rank_deficient_is_singular():
    a = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(linalg.SingularMatrixError):
        linalg.dense_lu_solve(a, np.ones(2))


def test_dense_shape_errors():
    with pytest.raises(ValueError):
        linalg.dense_lu_solve(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        linalg.dense_lu_solve(np.eye(2), np.ones(3))


def test_batched_solve_names_entry():
    a = np.stack([np.eye(2), np.zeros((2, 2)), np.eye(2)])
    with pytest.raises(linalg.SingularMatrixError) as info:
        linalg.batched_solve(a, np.ones((3, 2, 1)))
    assert info.value.index == 1


def test_duplicate_triplets_summed():
    m = linalg.sparse_assemble([0, 0], [0, 0], [1.0, 2.0], 2)
    assert m.nnz == 1 and m[0, 0] == 3.0


def test_empty_triplets():
    m = linalg.sparse_assemble([], [], [], 3)
    assert m.shape == (3, 3) and m.nnz == 0
    assert np.array_equal(m.indptr, np.zeros(4))


def test_out_of_range_triplet():
    with pytest.raises(IndexError):
        linalg.sparse_assemble([0, 3], [0, 0], [1.0, 1.0], 3)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12))
def test_assembly_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    k = 3 * n
    rows, cols = rng.integers(0, n, k), rng.integers(0, n, k)
    vals = rng.standard_normal(k)
    a = linalg.sparse_assemble(rows, cols, vals, n)
    perm = rng.permutation(k)
    b = linalg.sparse_assemble(rows[perm], cols[perm], vals[perm], n)
    assert np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
    assert np.abs(a.data - b.data).max(initial=0) < 1e-15
    # CSR invariants: strictly increasing columns per row
    for i in range(n):
        assert np.all(np.diff(a.indices[a.indptr[i]:a.indptr[i + 1]]) > 0)


def test_sparse_identity():
    b = np.arange(5.0)
    assert np.array_equal(linalg.sparse_lu_solve(sp.identity(5, format="csr"), b), b)


def test_sparse_laplacian():
    n = 50
    a = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")
    x = linalg.sparse_lu_solve(a, a @ np.ones(n))
    assert np.abs(x - 1).max() < 1e-10


def test_sparse_singular_has_hint():
    a = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(linalg.SingularMatrixError, match="generalized"):
        linalg.sparse_lu_solve(a, np.ones(2))


def test_sparse_empty_system():
    assert linalg.sparse_lu_solve(sp.csr_matrix((0, 0)), np.zeros(0)).shape == (0,)


def test_random_diagonally_dominant_systems():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        a = sp.random(n, n, density=0.2, random_state=rng, format="csr")
        a = a + sp.diags(np.abs(a).sum(axis=1).A1 + 1.0)
        b = rng.standard_normal(n)
        x = linalg.SparseLU(a).solve(b)
        assert linalg.relative_residual(a, x, b) < 1e-10
        xd = linalg.dense_lu_solve(a.toarray(), b)
        assert linalg.relative_residual(a, xd, b) < 1e-10


def test_factorization_reproduces_identity_columns():
    rng = np.random.default_rng(1)
    a = sp.csr_matrix(rng.standard_normal((8, 8)) + 8 * np.eye(8))
    lu = linalg.SparseLU(a)
    x = np.column_stack([lu.solve(e) for e in np.eye(8)])
    assert np.abs(a @ x - np.eye(8)).max() < 1e-10


def test_trace_matrix_of_small_solve():
    from porox import hdg
    from porox.mesh import build_structured_mesh
    from porox.physics import StabilizationPolicy, builtin_case
    case = builtin_case("nondeg2d")
    space = hdg.HDGSpace(build_structured_mesh(case.domain, "quad", 2), 2)
    fd = hdg.face_data(space, case, StabilizationPolicy.upwind())
    cond = [hdg.condense(hdg.assemble_local(space, case, fd, c)) for c in space.chunks]
    t = hdg.assemble_trace_system(space, cond)
    x = linalg.sparse_lu_solve(t.matrix, t.rhs)
    assert linalg.relative_residual(t.matrix, x, t.rhs) < 1e-10
