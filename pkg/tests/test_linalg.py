import numpy as np
import pytest
import scipy.linalg

from cattraj import linalg
from cattraj.errors import DimensionOverflow

from conftest import SIGMA_X, random_complex_matrix

rng = np.random.default_rng(101)


def naive_matmul(a, b):
    """Triple-loop product, the independent reference for matmul."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=complex)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0 + 0.0j
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = random_complex_matrix(rng, 4)
        assert np.array_equal(linalg.matmul(np.eye(4), a), a)

    def test_pauli_raising_lowering(self):
        sp = np.array([[0, 0], [1, 0]], dtype=complex)
        sm = sp.conj().T
        assert np.allclose(linalg.matmul(sp, sm), np.diag([0.0, 1.0]))

    def test_against_triple_loop(self):
        a = random_complex_matrix(rng, 8)
        b = random_complex_matrix(rng, 8)
        ref = naive_matmul(a, b)
        got = linalg.matmul(a, b)
        assert np.max(np.abs(got - ref)) <= 1e-12 * np.max(np.abs(ref))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            linalg.matmul(np.eye(3), np.eye(4))


class TestKron:
    def test_identity_blocks(self):
        assert np.array_equal(linalg.kron(np.eye(2), np.eye(2)), np.eye(4))

    def test_block_placement(self):
        sp = np.array([[0, 1], [0, 0]], dtype=complex)  # upper-right 1
        l = random_complex_matrix(rng, 2)
        out = linalg.kron(sp, l)
        assert np.allclose(out[:2, 2:], l)
        assert np.allclose(out[:2, :2], 0.0)
        assert np.allclose(out[2:, :], 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_associativity(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = (random_complex_matrix(r, 2) for _ in range(3))
        left = linalg.kron(a, linalg.kron(b, c))
        right = linalg.kron(linalg.kron(a, b), c)
        assert np.max(np.abs(left - right)) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_mixed_product(self, seed):
        r = np.random.default_rng(100 + seed)
        a, c = (random_complex_matrix(r, 2) for _ in range(2))
        b, d = (random_complex_matrix(r, 3) for _ in range(2))
        lhs = linalg.kron(a, b) @ linalg.kron(c, d)
        rhs = linalg.kron(a @ c, b @ d)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))

    def test_trace_multiplicativity(self):
        a = random_complex_matrix(rng, 3)
        b = random_complex_matrix(rng, 4)
        assert abs(linalg.trace(linalg.kron(a, b))
                   - linalg.trace(a) * linalg.trace(b)) <= 1e-12 * abs(linalg.trace(a) * linalg.trace(b))

    def test_overflow_guard(self):
        with pytest.raises(DimensionOverflow):
            linalg.kron(np.eye(2), np.eye(3), max_dim=5)


class TestMatexp:
    def test_zero(self):
        assert np.array_equal(linalg.matexp(np.zeros((3, 3))), np.eye(3))

    def test_pauli_rotation_closed_form(self):
        theta = 0.73
        got = linalg.matexp(SIGMA_X, scale=-1j * theta)
        want = np.cos(theta) * np.eye(2) - 1j * np.sin(theta) * SIGMA_X
        assert np.max(np.abs(got - want)) <= 1e-14

    @pytest.mark.parametrize("seed", range(4))
    def test_unitarity_anti_hermitian(self, seed):
        r = np.random.default_rng(seed)
        m = random_complex_matrix(r, 6)
        a = m - m.conj().T
        u = linalg.matexp(a)
        assert np.linalg.norm(u.conj().T @ u - np.eye(6)) <= 1e-10

    @pytest.mark.parametrize("seed", range(4))
    def test_against_scipy(self, seed):
        r = np.random.default_rng(50 + seed)
        a = random_complex_matrix(r, 5)
        scale = complex(r.normal(), r.normal())
        got = linalg.matexp(a, scale)
        want = scipy.linalg.expm(scale * a)
        assert np.max(np.abs(got - want)) <= 1e-11 * max(1.0, np.max(np.abs(want)))

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            linalg.matexp(np.ones((2, 3)))


class TestScalars:
    def test_trace_distance_self(self):
        rho = random_complex_matrix(rng, 4)
        rho = rho @ rho.conj().T
        assert linalg.trace_distance(rho, rho) == 0.0

    def test_trace_distance_orthogonal_pure(self):
        assert linalg.trace_distance(np.diag([1.0, 0.0]), np.diag([0.0, 1.0])) == pytest.approx(1.0)

    def test_purity_rank_one(self):
        v = rng.normal(size=5) + 1j * rng.normal(size=5)
        proj = np.outer(v, v.conj())
        assert linalg.purity(proj) == pytest.approx(1.0, abs=1e-12)

    def test_purity_rejects_zero_trace(self):
        with pytest.raises(ValueError):
            linalg.purity(np.diag([1.0, -1.0]))

    def test_adjoint(self):
        a = random_complex_matrix(rng, 3)
        assert np.array_equal(linalg.adjoint(linalg.adjoint(a)), a)
