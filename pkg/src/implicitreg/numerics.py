"""Dense linear algebra helpers and a seeded random stream.

Matrices are plain ``float64`` numpy arrays. The random generator draws raw
64-bit words from numpy's PCG64 bit generator (whose output stream is fixed
for a given seed across numpy releases and platforms) and builds uniforms and
Gaussians from those words itself, so the sample streams do not depend on
numpy's distribution code:

* uniform: ``(word >> 11) * 2**-53``, a double in [0, 1)
* gaussian: Box-Muller, ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` from two
  consecutive uniforms
"""

import numpy as np

_TWO_POW_M53 = 1.0 / 9007199254740992.0


def as_matrix(a, rows=None, cols=None, name="matrix"):
    """Validate and return ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"{name}: expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"{name}: expected {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: non-finite entries")
    return m


def matvec(m, v):
    """Row-major matrix-vector product, each row summed left to right."""
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"matvec: shapes {m.shape} and {v.shape} do not align")
    prod = m * v
    out = np.zeros(m.shape[0])
    for j in range(m.shape[1]):
        out = out + prod[:, j]
    return out


def matvec_by_columns(m, v):
    """Matrix-vector product accumulated column by column (``sum_j v[j] m[:, j]``)."""
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"matvec: shapes {m.shape} and {v.shape} do not align")
    out = np.zeros(m.shape[0])
    for j in range(m.shape[1]):
        out += v[j] * m[:, j]
    return out


def relu(z):
    return np.maximum(z, 0.0)


class Rng:
    """Deterministic random stream; same seed, same stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.PCG64(self.seed)

    def child(self, *keys: int) -> "Rng":
        """Independent stream derived from this seed and integer ``keys``."""
        # spawn_key sits after the zero-padded seed, so (1, 0) and (1,) differ
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in keys))
        return Rng(int(ss.generate_state(1, np.uint64)[0]))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n)).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def gaussian(self, n: int, sigma: float = 1.0) -> np.ndarray:
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        n = int(n)
        u = self.uniform(2 * n)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        return sigma * r * np.cos(2.0 * np.pi * u2)

    def gaussian_matrix(self, rows: int, cols: int, sigma: float = 1.0) -> np.ndarray:
        return self.gaussian(rows * cols, sigma).reshape(rows, cols)

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers uniform on ``[0, high)``."""
        if high < 1:
            raise ValueError("high must be >= 1")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def gaussian(rng: Rng, n: int, sigma: float) -> np.ndarray:
    return rng.gaussian(n, sigma)
