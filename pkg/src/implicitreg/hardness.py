"""Intersections of halfspaces compiled into one-hidden-layer ReLU networks.

For normals ``w_i`` in {-1, +1}^D, each halfspace ``<w_i, x> > 0`` gets two
hidden units ``relu(<w_i, x>)`` and ``relu(<w_i, x> - 1)`` with output weights
+1 and -1. On the hypercube every pre-activation is an integer, so each pair
contributes exactly 1 inside its halfspace and 0 outside, and the output
counts the halfspaces containing x.

The network has no bias terms; the shift by -1 comes from an extra input
coordinate that is always 1 (see :func:`augment`).
"""

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import NetParams, forward


@dataclass(frozen=True)
class HalfspaceSet:
    normals: np.ndarray  # (k, D), entries exactly +1 or -1

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))
        if w.size == 0 or not np.all(np.abs(w) == 1):
            raise ValueError("normals must be a nonempty matrix of +1/-1 entries")
        object.__setattr__(self, "normals", w)

    @property
    def D(self) -> int:
        return self.normals.shape[1]

    @property
    def k(self) -> int:
        return self.normals.shape[0]


def parse_normals(text: str) -> HalfspaceSet:
    """Parse ``"+1+1,+1-1"`` (rows separated by commas or newlines, signed 1s)."""
    rows = []
    for chunk in text.replace("\n", ",").split(","):
        chunk = "".join(chunk.split())
        if not chunk:
            continue
        if len(chunk) % 2 or any(chunk[i] not in "+-" or chunk[i + 1] != "1"
                                 for i in range(0, len(chunk), 2)):
            raise ValueError(f"cannot parse normal {chunk!r}; expected tokens like +1-1+1")
        rows.append([1.0 if chunk[i] == "+" else -1.0 for i in range(0, len(chunk), 2)])
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("normals must be nonempty rows of equal length")
    return HalfspaceSet(np.array(rows))


def random_instance(D: int, k: int, rng) -> HalfspaceSet:
    bits = rng.integers(k * D, 2).reshape(k, D)
    return HalfspaceSet(2.0 * bits - 1.0)


def compile(hs: HalfspaceSet) -> NetParams:
    """2k-unit network on augmented inputs ``(x, 1)``."""
    k, D = hs.k, hs.D
    U = np.zeros((2 * k, D + 1))
    U[0::2, :D] = hs.normals
    U[1::2, :D] = hs.normals
    U[1::2, D] = -1.0
    V = np.tile([[1.0], [-1.0]], (k, 1))
    return NetParams(U, V)


def augment(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.hstack([X, np.ones((X.shape[0], 1))])


def closed_form(hs: HalfspaceSet, X) -> np.ndarray:
    z = np.atleast_2d(X) @ hs.normals.T
    return (np.maximum(z, 0) - np.maximum(z - 1, 0)).sum(axis=1)


def hypercube(D: int, start: int = 0, stop: int = None) -> np.ndarray:
    """Vertices ``start..stop-1`` of {-1,+1}^D; bit j of the index sets coordinate j."""
    stop = 2**D if stop is None else stop
    idx = np.arange(start, stop, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(D)) & 1
    return 2.0 * bits - 1.0


@dataclass
class VerifyReport:
    D: int
    k: int
    points: int
    members: int
    violations: list = field(default_factory=list)  # (x, reason) counterexamples

    @property
    def ok(self) -> bool:
        return not self.violations


def _check_chunk(args):
    normals, start, stop, max_examples = args
    hs = HalfspaceSet(normals)
    k = hs.k
    net = compile(hs)
    X = hypercube(hs.D, start, stop)
    z = X @ hs.normals.T
    inside = z > 0
    pre = augment(X) @ net.U.T
    acts = np.maximum(pre, 0)
    terms = acts[:, 0::2] - acts[:, 1::2]
    f = forward(net, augment(X))[:, 0]
    count = inside.sum(axis=1)
    member = count == k
    bad = []

    def flag(mask, reason):
        for i in np.flatnonzero(mask)[: max_examples - len(bad)]:
            bad.append((X[i].astype(int).tolist(), reason))

    flag(~np.all(pre == np.round(pre), axis=1), "non-integer pre-activation")
    flag(~np.all((terms == 0) | (terms == 1), axis=1), "unit pair outside {0,1}")
    flag(~np.all(terms == inside, axis=1), "unit pair differs from halfspace indicator")
    flag(f != count, "output differs from count of containing halfspaces")
    flag(f != closed_form(hs, X), "output differs from closed form")
    flag(member & (f != k), "member without output k")
    flag(~member & (f > k - 1), "non-member with output above k-1")
    return int(member.sum()), bad


def verify_exhaustive(hs: HalfspaceSet, workers: int = 1, max_examples: int = 20) -> VerifyReport:
    """Check the compiled network on every vertex of {-1,+1}^D."""
    if hs.D > 22:
        raise ValueError(f"D={hs.D} exceeds the 2^22 enumeration budget")
    total = 2**hs.D
    chunk = max(1, min(total, 1 << 16))
    jobs = [(hs.normals, s, min(s + chunk, total), max_examples) for s in range(0, total, chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_check_chunk, jobs))
    else:
        results = [_check_chunk(j) for j in jobs]
    members = sum(r[0] for r in results)
    violations = list(itertools.islice(itertools.chain.from_iterable(r[1] for r in results),
                                       max_examples))
    return VerifyReport(hs.D, hs.k, total, members, violations)
