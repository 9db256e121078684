"""Float64 vector/matrix helpers, a tridiagonal eigensolver and a seeded RNG.

Conventions used throughout the package: vectors are 1-d contiguous
``numpy.float64`` arrays, matrices are row-major 2-d float64 arrays.
Randomness always comes from an explicit :class:`Rng` so that every result
is bit-reproducible from its seed, and the symmetric tridiagonal
eigenproblem is solved in-package (implicit-shift QL) so Ritz values and
weights do not depend on LAPACK build details.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EigenSolveError",
    "Rng",
    "SymTridiag",
    "axpy",
    "dot",
    "gaussian",
    "matvec",
    "norm2",
    "rademacher",
    "sym_tridiag_eigen",
    "sym_tridiag_eigen_full",
]


class EigenSolveError(RuntimeError):
    """Raised when the QL iteration fails to converge for some eigenvalue."""


def as_vec(x) -> np.ndarray:
    """Coerce to a 1-d float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def as_mat(x) -> np.ndarray:
    """Coerce to a 2-d float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def dot(x, y) -> float:
    x, y = as_vec(x), as_vec(y)
    if x.size != y.size:
        raise ValueError(f"dot: length mismatch {x.size} vs {y.size}")
    return float(np.dot(x, y))


def axpy(a: float, x, y) -> np.ndarray:
    """a*x + y."""
    x, y = as_vec(x), as_vec(y)
    if x.size != y.size:
        raise ValueError(f"axpy: length mismatch {x.size} vs {y.size}")
    return a * x + y


def norm2(x) -> float:
    x = as_vec(x)
    return math.sqrt(float(np.dot(x, x)))


def matvec(a, x) -> np.ndarray:
    a, x = as_mat(a), as_vec(x)
    if a.shape[1] != x.size:
        raise ValueError(f"matvec: shape mismatch {a.shape} @ ({x.size},)")
    return a @ x


# ---------------------------------------------------------------------------
# Symmetric tridiagonal eigensolver (implicit-shift QL, EISPACK tql2 lineage)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymTridiag:
    """Symmetric tridiagonal matrix stored as diagonal + off-diagonal."""

    diag: np.ndarray
    offdiag: np.ndarray

    def __post_init__(self):
        d = as_vec(self.diag)
        e = as_vec(self.offdiag) if np.asarray(self.offdiag).size else np.zeros(0)
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "offdiag", e)
        if d.size < 1:
            raise ValueError("SymTridiag needs at least one diagonal entry")
        if e.size != d.size - 1:
            raise ValueError(
                f"offdiag length {e.size} inconsistent with diag length {d.size}"
            )
        if e.size and np.any(e < 0):
            raise ValueError("offdiag entries must be nonnegative")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(e))):
            raise ValueError("SymTridiag entries must be finite")

    @property
    def n(self) -> int:
        return self.diag.size

    def to_dense(self) -> np.ndarray:
        t = np.diag(self.diag)
        if self.offdiag.size:
            idx = np.arange(self.n - 1)
            t[idx, idx + 1] = self.offdiag
            t[idx + 1, idx] = self.offdiag
        return t


def _ql_implicit(d: np.ndarray, e: np.ndarray, rot_rows: np.ndarray, max_sweeps: int):
    """In-place implicit-shift QL sweeps; accumulates Givens rotations into
    the columns of ``rot_rows`` (any number of rows: 1 for first components,
    n for full eigenvectors)."""
    n = d.size
    for l in range(n):
        sweeps = 0
        while True:
            mm = l
            while mm < n - 1:
                dd = abs(d[mm]) + abs(d[mm + 1])
                if abs(e[mm]) + dd == dd:
                    break
                mm += 1
            if mm == l:
                break
            sweeps += 1
            if sweeps > max_sweeps:
                raise EigenSolveError(
                    f"QL iteration failed to converge for eigenvalue index {l} "
                    f"after {max_sweeps} sweeps"
                )
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[mm] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            underflow = False
            for i in range(mm - 1, l - 1, -1):
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    # recover from underflow, restart the sweep
                    d[i + 1] -= p
                    e[mm] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                col = rot_rows[:, i + 1].copy()
                rot_rows[:, i + 1] = s * rot_rows[:, i] + c * col
                rot_rows[:, i] = c * rot_rows[:, i] - s * col
            if underflow:
                continue
            d[l] -= p
            e[l] = g
            e[mm] = 0.0


def sym_tridiag_eigen(t: SymTridiag, max_sweeps: int = 50):
    """Eigenvalues (ascending) and first eigenvector components of ``t``.

    The weights of the Lanczos quadrature rule are the squares of the
    returned first components, so only the first row of the eigenvector
    matrix is accumulated (O(n^2) total work).
    """
    n = t.n
    d = t.diag.copy()
    e = np.zeros(n)
    e[: n - 1] = t.offdiag
    row = np.zeros((1, n))
    row[0, 0] = 1.0
    _ql_implicit(d, e, row, max_sweeps)
    order = np.argsort(d, kind="stable")
    return d[order], row[0, order].copy()


def sym_tridiag_eigen_full(t: SymTridiag, max_sweeps: int = 50):
    """Like :func:`sym_tridiag_eigen` but returns the full eigenvector
    matrix (columns are normalized eigenvectors). O(n^3); used by oracles."""
    n = t.n
    d = t.diag.copy()
    e = np.zeros(n)
    e[: n - 1] = t.offdiag
    z = np.eye(n)
    _ql_implicit(d, e, z, max_sweeps)
    order = np.argsort(d, kind="stable")
    return d[order], z[:, order].copy()


# ---------------------------------------------------------------------------
# Seeded, platform-independent RNG (SplitMix64 counter stream)
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_CHILD_SALT = np.uint64(0x6A09E667F3BCC909)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; pure uint64 arithmetic, wraps mod 2^64."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


@dataclass
class Rng:
    """Counter-based deterministic generator (SplitMix64 output function).

    The stream depends only on ``seed`` and on how many values have been
    drawn, so results are bit-identical across runs and platforms. Never
    touches OS entropy. Single-owner: split work across consumers with
    :meth:`child`, not by sharing one instance.
    """

    seed: int
    _counter: int = field(default=0, repr=False)

    def _raw(self, n: int) -> np.ndarray:
        if n <= 0:
            raise ValueError(f"number of draws must be positive, got {n}")
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        key = np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
        with np.errstate(over="ignore"):
            return _mix64(key + (idx + np.uint64(1)) * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n floats in [0, 1) with 53-bit resolution."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def integers(self, n: int, upper: int) -> np.ndarray:
        """n ints uniform in [0, upper)."""
        if upper <= 0:
            raise ValueError("upper must be positive")
        return np.floor(self.uniform(n) * upper).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        if n <= 1:
            return perm
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def child(self, index: int) -> "Rng":
        """Independent derived stream; deterministic in (seed, index)."""
        key = np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
        with np.errstate(over="ignore"):
            sub = _mix64(key ^ _mix64(np.uint64(index & 0xFFFFFFFFFFFFFFFF) + _CHILD_SALT))
        return Rng(int(sub))


def rademacher(rng: Rng, n: int) -> np.ndarray:
    """n entries drawn from {-1, +1} with equal probability."""
    bits = rng._raw(n) >> np.uint64(63)
    return 1.0 - 2.0 * bits.astype(np.float64)


def gaussian(rng: Rng, n: int) -> np.ndarray:
    """n standard normal draws (Box-Muller on the uniform stream)."""
    if n <= 0:
        raise ValueError(f"number of draws must be positive, got {n}")
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs)
    u1 = 1.0 - u[:pairs]  # (0, 1]: keeps log() finite
    u2 = u[pairs:]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]
