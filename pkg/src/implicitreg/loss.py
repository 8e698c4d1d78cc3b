"""Soft-max cross entropy, its truncated variant, classification error and penalties.

The truncated loss replaces ``exp`` by

    f(x) = exp(x)                          x >= -11
    f(x) = exp(-11) * max(x + 13, 0)**2 / 4  otherwise

inside ``ln sum_i f(s_i - s_c)``. ``f`` agrees with ``exp`` in value and slope
at -11 and vanishes below -13, so an example classified with margin 13 or
more costs exactly zero.
"""

from dataclasses import dataclass

import numpy as np

from .model import NetParams, forward

TRUNC_START = -11.0
TRUNC_ZERO = -13.0
_E11 = np.exp(TRUNC_START)

REG_KINDS = ("none", "l2_weight_decay", "l1_top", "group_lasso_top")


def f_trunc(x):
    x = np.asarray(x, dtype=np.float64)
    tail = _E11 * np.maximum(x - TRUNC_ZERO, 0.0) ** 2 / 4.0
    return np.where(x >= TRUNC_START, np.exp(np.minimum(x, 700.0)), tail)


def f_trunc_prime(x):
    x = np.asarray(x, dtype=np.float64)
    tail = _E11 * np.maximum(x - TRUNC_ZERO, 0.0) / 2.0
    return np.where(x >= TRUNC_START, np.exp(np.minimum(x, 700.0)), tail)


def _margins(scores, labels):
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    c = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if s.shape[1] < 2:
        raise ValueError("need at least two classes")
    if c.shape != (s.shape[0],) or np.any(c < 0) or np.any(c >= s.shape[1]):
        raise ValueError("labels must index a class for every score row")
    z = s - s[np.arange(len(c)), c][:, None]
    return z, c


def _shifted_terms(z, truncated):
    # Terms of the (possibly truncated) sum, all scaled by exp(-m) with m = max_i z_i >= 0.
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    if not truncated:
        return m, e, e
    cut = z < TRUNC_START
    tail = np.exp(TRUNC_START - m) * np.maximum(z - TRUNC_ZERO, 0.0) ** 2 / 4.0
    # f <= exp holds analytically; the clamp stops rounding from inverting it.
    t = np.where(cut, np.minimum(tail, e), e)
    dt = np.where(cut, np.exp(TRUNC_START - m) * np.maximum(z - TRUNC_ZERO, 0.0) / 2.0, e)
    return m, t, dt


def _log_total(z, t):
    # The term at argmax z is exactly 1 after the shift; log1p of the rest keeps small losses exact.
    rest = t.copy()
    rest[np.arange(len(z)), z.argmax(axis=1)] = 0.0
    rest = rest.sum(axis=1)
    return np.log1p(rest), 1.0 + rest


def softmax_ce(scores, labels):
    """Per-example ``ln sum_i exp(s_i - s_c)``, computed with a max shift."""
    z, _ = _margins(scores, labels)
    m, t, _ = _shifted_terms(z, truncated=False)
    return m[:, 0] + _log_total(z, t)[0]


def truncated_ce(scores, labels):
    """Per-example truncated loss and its gradient with respect to the scores.

    Returns ``(loss, grad)`` with shapes ``(n,)`` and ``(n, k)``.
    """
    z, c = _margins(scores, labels)
    m, t, dt = _shifted_terms(z, truncated=True)
    lt, total = _log_total(z, t)
    loss = m[:, 0] + lt
    rows = np.arange(len(c))
    grad = dt / total[:, None]
    grad[rows, c] = 0.0
    grad[rows, c] = -grad.sum(axis=1)
    return loss, grad


def predict(p: NetParams, X) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(forward(p, X), axis=1)


def zero_one_error(p: NetParams, data) -> float:
    if data.X.shape[1] != p.d:
        raise ValueError(f"dataset has d={data.X.shape[1]}, network expects d={p.d}")
    if data.n == 0:
        return 0.0
    return float(np.mean(predict(p, data.X) != data.labels))


@dataclass(frozen=True)
class RegConfig:
    lam: float = 0.0
    kind: str = "none"

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; choose from {REG_KINDS}")
        if not self.lam >= 0:
            raise ValueError(f"penalty weight must be nonnegative, got {self.lam}")


def penalty(p: NetParams, r: RegConfig) -> float:
    if r.kind == "l1_top" and p.k != 1:
        raise ValueError("l1_top penalty needs a single-output network (k=1)")
    if r.kind == "none" or r.lam == 0:
        return 0.0
    if r.kind == "l2_weight_decay":
        return 0.5 * r.lam * (np.sum(p.U**2) + np.sum(p.V**2))
    if r.kind == "l1_top":
        return r.lam * np.sum(np.abs(p.V[:, 0]))
    return r.lam * np.sum(np.linalg.norm(p.V, axis=1))


def penalty_grad(p: NetParams, r: RegConfig):
    """(dU, dV) of the penalty; only the smooth weight-decay penalty has one."""
    if r.kind == "none" or r.lam == 0:
        return np.zeros_like(p.U), np.zeros_like(p.V)
    if r.kind == "l2_weight_decay":
        return r.lam * p.U, r.lam * p.V
    raise ValueError(f"no gradient implemented for {r.kind!r}")
