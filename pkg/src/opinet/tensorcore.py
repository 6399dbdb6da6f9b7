"""Dense float64 tensor arithmetic, deterministic RNG, and a symmetric eigensolver.

Tensors are C-contiguous float64 numpy arrays throughout the package; this
module owns the conversion/validation helpers, the reproducible random number
generator every pipeline seeds from, and the cyclic Jacobi eigensolver used
for NTK spectra. Gram matrices stay small (a few hundred rows), so an O(n^3)
per-sweep Jacobi is a deliberate choice over LAPACK bindings.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation, DimensionError, NumericError, ParameterError

_MASK64 = (1 << 64) - 1


def tensor(values, shape=None) -> np.ndarray:
    """Materialize values as a C-contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float64)


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise NumericError if arr contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
    return arr


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output word)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator seeded through splitmix64.

    The update rule is fixed so identical seeds give identical sequences on
    every platform. One Rng is single-owner mutable; for parallel work derive
    independent streams with Rng(seed, stream=i) instead of sharing state.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        sm = (self.seed ^ (self.stream * 0xD2B74407B1CE6E93)) & _MASK64
        s = []
        for _ in range(4):
            sm, word = _splitmix64(sm)
            s.append(word)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_open(self) -> float:
        """One double in (0, 1], safe as a log() argument."""
        return ((self.next_u64() >> 11) + 1) * (1.0 / (1 << 53))

    def normal(self) -> float:
        """One standard normal draw (Box-Muller, cosine branch only).

        The sine companion is discarded so the generator state is exactly the
        four xoshiro words: serialization needs no cached spare.
        """
        u1 = self.uniform_open()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection on the top bits."""
        if n <= 0:
            raise ParameterError(f"randint bound must be positive, got {n}")
        # rejection keeps the distribution exactly uniform
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def get_state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "s": list(self._s)}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        self._s = [int(w) & _MASK64 for w in state["s"]]
        if len(self._s) != 4:
            raise ParameterError("Rng state must carry exactly 4 words")


def rand_normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Tensor of independent N(mean, std^2) draws from rng's stream."""
    if std < 0:
        raise ParameterError(f"std must be non-negative, got {std}")
    n = int(np.prod(shape)) if not np.isscalar(shape) else int(shape)
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        out[i] = rng.normal()
    return (out * std + mean).reshape(shape)


def rand_uniform(rng: Rng, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Tensor of independent U[lo, hi) draws."""
    if hi < lo:
        raise ParameterError(f"empty range [{lo}, {hi})")
    n = int(np.prod(shape)) if not np.isscalar(shape) else int(shape)
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        out[i] = rng.uniform()
    return (out * (hi - lo) + lo).reshape(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-major matrix product with an explicit inner-dimension check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def sym_eig(a: np.ndarray, tol_scale: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps row-cyclically, zeroing each off-diagonal pair, until the
    off-diagonal Frobenius norm drops below tol_scale * ||A||_F. Returns
    eigenvalues sorted descending and the matching orthonormal eigenvectors
    as columns.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {a.shape}")
    if a.shape[0] == 0:
        raise DimensionError("sym_eig needs a non-empty matrix")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > 1e-10:
        raise ContractViolation(f"input asymmetric: max |A - A^T| = {asym:.3e}")

    n = a.shape[0]
    m = a.copy()
    v = np.eye(n)
    norm = np.linalg.norm(m)
    if norm == 0.0:
        return np.zeros(n), v
    target = tol_scale * norm

    def _off(mat):
        # summed directly over off-diagonal entries; subtracting the diagonal
        # mass from the total cancels catastrophically for large matrices
        od = mat.copy()
        np.fill_diagonal(od, 0.0)
        return float(np.linalg.norm(od))

    for _ in range(100):  # sweeps; n<=few hundred converges in ~10
        if _off(m) < target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if abs(apq) <= target / (n * n):
                    continue
                tau = (m[q, q] - m[p, p]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                # rotate rows/cols p and q of M, and columns p, q of V
                mp = m[:, p].copy()
                mq = m[:, q].copy()
                m[:, p] = c * mp - s * mq
                m[:, q] = s * mp + c * mq
                mp = m[p, :].copy()
                mq = m[q, :].copy()
                m[p, :] = c * mp - s * mq
                m[q, :] = s * mp + c * mq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    if _off(m) >= target:
        raise ContractViolation("Jacobi sweeps did not reach the off-diagonal target")

    eigvals = np.diag(m).copy()
    order = np.argsort(-eigvals, kind="stable")
    return eigvals[order], v[:, order]
