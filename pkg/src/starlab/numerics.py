"""Dense float64 substrate: seeded streams, matrix initializers, Jacobi SVD.

Everything downstream (cells, lattices, simulations, training) draws its
randomness and its spectra from this module, so the two hard requirements
here are bit-reproducibility and accuracy on small (n <= 256) matrices.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _SPLITMIX_GAMMA) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Rng:
    """Counter-based random stream addressed by (seed, stream).

    Backed by Philox-4x64 keyed with the (seed, stream) pair, so the same
    pair replays the exact same sequence on any platform, and distinct
    streams are statistically independent. Normal deviates come from
    Box-Muller applied to the raw uniforms (never the library's ziggurat),
    which keeps the exact draw values stable across library versions.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *parts: int) -> "Rng":
        """Child stream for (seed, mix(stream, parts)); collision odds ~2^-64."""
        s = self.stream
        for p in parts:
            s = _splitmix64(s ^ _splitmix64(int(p) & _MASK64))
        return Rng(self.seed, s)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), 53-bit resolution."""
        return self._gen.random(int(n), dtype=np.float64)

    def uniform_range(self, lo: float, hi: float, n: int) -> np.ndarray:
        return lo + (hi - lo) * self.uniforms(n)

    def normals(self, n: int) -> np.ndarray:
        """n standard-normal doubles via Box-Muller on the uniform stream."""
        n = int(n)
        half = (n + 1) // 2
        u1 = 1.0 - self.uniforms(half)  # (0, 1]: keeps log() finite
        u2 = self.uniforms(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return out[:n]

    def integers_below(self, bound: int, n: int) -> np.ndarray:
        """n integers uniform on [0, bound); bias from the float map is ~bound/2^53."""
        if bound < 1:
            raise ValueError("bound must be >= 1")
        return np.minimum((self.uniforms(n) * bound).astype(np.int64), bound - 1)

    def shuffled(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n) driven by this stream."""
        idx = np.arange(n, dtype=np.int64)
        if n < 2:
            return idx
        draws = self.uniforms(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(draws[n - 1 - i] * (i + 1)), i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx


def gaussian_matrix(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix of i.i.d. standard normals."""
    if rows < 1 or cols < 1:
        raise ValueError("matrix dims must be >= 1")
    return rng.normals(rows * cols).reshape(rows, cols)


def orthogonal_matrix(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """(Semi-)orthogonal rows x cols matrix.

    QR of a square Gaussian of size max(rows, cols), with R's diagonal signs
    absorbed into Q so the square result is Haar-distributed; non-square
    shapes take the leading rows/cols (orthonormal rows if wide, orthonormal
    columns if tall).
    """
    n = max(rows, cols)
    a = gaussian_matrix(rng, n, n)
    q, r = np.linalg.qr(a)
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    q = q * signs
    return np.ascontiguousarray(q[:rows, :cols])


def orthogonal_stack(rng: Rng, n: int, count: int) -> np.ndarray:
    """count independent Haar-orthogonal n x n matrices from one stream,
    factored in a single stacked QR call (cheaper than count separate draws)."""
    a = rng.normals(count * n * n).reshape(count, n, n)
    q, r = np.linalg.qr(a)
    diag = r[:, np.arange(n), np.arange(n)]
    signs = np.where(diag < 0.0, -1.0, 1.0)
    return q * signs[:, None, :]


class JacobiConvergenceError(RuntimeError):
    """One-sided Jacobi failed to reach the off-diagonal tolerance."""


def _round_robin_pairs(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: m-1 rounds (m even) of disjoint column pairs,
    # so each round's rotations commute and can be applied in one shot.
    players = list(range(m))
    if m % 2 == 1:
        players.append(-1)  # bye
    k = len(players)
    rounds = []
    arr = players[:]
    for _ in range(k - 1):
        ps, qs = [], []
        for i in range(k // 2):
            a, b = arr[i], arr[k - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.asarray(ps, dtype=np.intp), np.asarray(qs, dtype=np.intp)))
        arr = [arr[0], arr[-1]] + arr[1:-1]
    return rounds


def singular_values(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60) -> np.ndarray:
    """Descending singular values via one-sided (Hestenes) cyclic Jacobi.

    Column pairs are rotated until every normalized cross product
    |a_p . a_q| / (|a_p| |a_q|) drops below tol; the singular values are then
    the column norms. Parallel round-robin ordering keeps the inner loop
    vectorized. Raises JacobiConvergenceError after max_sweeps.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if not np.isfinite(a).all():
        raise ValueError("matrix has non-finite entries")
    if a.shape[0] < a.shape[1]:
        a = np.ascontiguousarray(a.T)
    cols = a.shape[1]
    if cols == 1:
        return np.array([float(np.linalg.norm(a))])

    rounds = _round_robin_pairs(cols)
    tiny = np.finfo(np.float64).tiny
    off = np.inf
    for _ in range(max_sweeps):
        off = 0.0
        for ps, qs in rounds:
            p_cols = a[:, ps]
            q_cols = a[:, qs]
            app = np.einsum("ij,ij->j", p_cols, p_cols)
            aqq = np.einsum("ij,ij->j", q_cols, q_cols)
            apq = np.einsum("ij,ij->j", p_cols, q_cols)
            denom = np.sqrt(np.maximum(app * aqq, tiny))
            rel = np.abs(apq) / denom
            off = max(off, float(rel.max()))
            active = rel > tol
            if not active.any():
                continue
            apq_a = apq[active]
            tau = (aqq[active] - app[active]) / (2.0 * apq_a)
            t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            pa = p_cols[:, active]
            qa = q_cols[:, active]
            a[:, ps[active]] = c * pa - s * qa
            a[:, qs[active]] = s * pa + c * qa
        if off <= tol:
            sv = np.sqrt(np.einsum("ij,ij->j", a, a))
            sv.sort()
            return sv[::-1]
    raise JacobiConvergenceError(
        f"no convergence after {max_sweeps} sweeps on shape {m.shape}: "
        f"max normalized off-diagonal {off:.3e} (tol {tol:.1e})"
    )


def mean_singular_value(m: np.ndarray) -> float:
    """Arithmetic mean of the singular values."""
    return float(singular_values(m).mean())
