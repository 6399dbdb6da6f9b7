import numpy as np
import pytest

from opinet.errors import ContractViolation, DimensionError, ParameterError
from opinet.tensorcore import Rng, matmul, rand_normal, rand_uniform, sym_eig, tensor


def matmul_oracle(a, b):
    """Naive triple-loop product, independent of the production path."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        assert np.allclose(matmul(np.eye(3), a), a)

    def test_small_product(self):
        a = tensor([[1.0, 2.0], [3.0, 4.0]])
        b = tensor([[0.0], [1.0]])
        assert np.array_equal(matmul(a, b), [[2.0], [4.0]])

    def test_zero_case(self):
        a = np.zeros((2, 3))
        b = np.random.default_rng(1).normal(size=(3, 5))
        assert np.array_equal(matmul(a, b), np.zeros((2, 5)))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(6, 3))
        assert np.allclose(matmul(a, b), matmul_oracle(a, b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_associativity(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4, 5))
            c = rng.normal(size=(5, 2))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.max(np.abs(left - right)) < 1e-10


class TestSymEig:
    def test_diagonal(self):
        vals, vecs = sym_eig(np.diag([3.0, 1.0]))
        assert np.allclose(vals, [3.0, 1.0])
        assert np.allclose(np.abs(vecs), np.eye(2))

    def test_analytic_2x2(self):
        vals, _ = sym_eig(tensor([[2.0, 1.0], [1.0, 2.0]]))
        assert np.allclose(vals, [3.0, 1.0])

    def test_reconstruction_oracle(self):
        rng = np.random.default_rng(42)
        b = rng.normal(size=(6, 6))
        a = (b + b.T) / 2
        vals, vecs = sym_eig(a)
        recon = vecs @ np.diag(vals) @ vecs.T
        assert np.max(np.abs(recon - a)) < 1e-8
        # eigenpairs satisfy A v = lambda v
        scale = np.linalg.norm(a)
        for i in range(6):
            assert np.linalg.norm(a @ vecs[:, i] - vals[i] * vecs[:, i]) < 1e-8 * scale
        assert np.max(np.abs(vecs.T @ vecs - np.eye(6))) < 1e-8

    def test_descending_order(self):
        rng = np.random.default_rng(5)
        b = rng.normal(size=(8, 8))
        vals, _ = sym_eig(b + b.T)
        assert np.all(np.diff(vals) <= 1e-12)

    def test_trace_matches_eigenvalue_sum(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            b = rng.normal(size=(5, 5))
            a = b + b.T
            vals, _ = sym_eig(a)
            assert abs(np.trace(a) - vals.sum()) < 1e-9

    def test_psd_eigenvalues_nonnegative(self):
        rng = np.random.default_rng(12)
        j = rng.normal(size=(7, 4))
        vals, _ = sym_eig(j @ j.T)
        assert vals.min() >= -1e-10

    def test_asymmetric_rejected(self):
        with pytest.raises(ContractViolation):
            sym_eig(tensor([[1.0, 2.0], [0.0, 1.0]]))

    def test_zero_matrix(self):
        vals, vecs = sym_eig(np.zeros((3, 3)))
        assert np.array_equal(vals, np.zeros(3))
        assert np.array_equal(vecs, np.eye(3))


class TestRng:
    def test_determinism_across_instances(self):
        a = [Rng(42).next_u64() for _ in range(1)]
        b = [Rng(42).next_u64() for _ in range(1)]
        assert a == b
        r1, r2 = Rng(42), Rng(42)
        assert [r1.next_u64() for _ in range(100)] == [r2.next_u64() for _ in range(100)]

    def test_known_sequence_frozen(self):
        # frozen so cross-platform drift of the update rule is caught
        r = Rng(0)
        seq = [r.next_u64() for _ in range(3)]
        assert seq == [
            11091344671253066420,
            13793997310169335082,
            1900383378846508768,
        ]

    def test_streams_differ(self):
        base = [Rng(9, stream=0).next_u64() for _ in range(8)]
        other = [Rng(9, stream=1).next_u64() for _ in range(8)]
        assert base != other

    def test_state_roundtrip_resumes_sequence(self):
        r = Rng(123)
        for _ in range(17):
            r.next_u64()
        state = r.get_state()
        tail = [r.next_u64() for _ in range(50)]
        fresh = Rng(0)
        fresh.set_state(state)
        assert [fresh.next_u64() for _ in range(50)] == tail

    def test_uniform_range(self):
        r = Rng(5)
        draws = [r.uniform() for _ in range(1000)]
        assert all(0.0 <= d < 1.0 for d in draws)

    def test_permutation_is_permutation(self):
        r = Rng(6)
        p = r.permutation(40)
        assert sorted(p.tolist()) == list(range(40))


class TestRandNormal:
    def test_zero_std_is_mean(self):
        out = rand_normal(Rng(1), (4, 3), mean=2.5, std=0.0)
        assert np.array_equal(out, np.full((4, 3), 2.5))

    def test_seed_determinism(self):
        a = rand_normal(Rng(42), (10, 10))
        b = rand_normal(Rng(42), (10, 10))
        assert np.array_equal(a, b)

    def test_sample_statistics(self):
        out = rand_normal(Rng(2024), 100_000)
        assert abs(out.mean()) < 0.02
        assert abs(out.std() - 1.0) < 0.02

    def test_negative_std_rejected(self):
        with pytest.raises(ParameterError):
            rand_normal(Rng(1), (2,), std=-1.0)

    def test_uniform_stats(self):
        out = rand_uniform(Rng(7), 50_000, lo=-1.0, hi=3.0)
        assert out.min() >= -1.0 and out.max() < 3.0
        assert abs(out.mean() - 1.0) < 0.03
