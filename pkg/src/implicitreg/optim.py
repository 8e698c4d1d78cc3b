"""Mini-batch SGD with classical momentum and a per-epoch schedule.

After every epoch the step size is multiplied by 0.99 and the momentum grows
by 0.02 up to a cap of 0.9. The default start is step 0.1, momentum 0.5 and
batches of 100.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .loss import RegConfig, penalty, penalty_grad, truncated_ce, zero_one_error
from .model import Gradients, NetParams
from .numerics import Rng, relu

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptState:
    step: float = 0.1
    momentum: float = 0.5
    velocity_U: np.ndarray = None
    velocity_V: np.ndarray = None
    epoch: int = 0
    batch_size: int = 100
    step_decay: float = 0.99
    momentum_increment: float = 0.02
    momentum_cap: float = 0.9

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def fresh(cls, p: NetParams, **kw) -> "OptState":
        return cls(velocity_U=np.zeros_like(p.U), velocity_V=np.zeros_like(p.V), **kw)


def sgd_step(p: NetParams, g: Gradients, st: OptState):
    """velocity <- m*velocity - step*g; params <- params + velocity."""
    if g.dU.shape != p.U.shape or g.dV.shape != p.V.shape:
        raise ValueError("gradient shapes do not match parameters")
    vU = st.velocity_U if st.velocity_U is not None else np.zeros_like(p.U)
    vV = st.velocity_V if st.velocity_V is not None else np.zeros_like(p.V)
    if vU.shape != p.U.shape or vV.shape != p.V.shape:
        raise ValueError("velocity shapes do not match parameters")
    vU = st.momentum * vU - st.step * g.dU
    vV = st.momentum * vV - st.step * g.dV
    return NetParams(p.U + vU, p.V + vV), replace(st, velocity_U=vU, velocity_V=vV)


def end_epoch(st: OptState) -> OptState:
    return replace(
        st,
        step=st.step * st.step_decay,
        momentum=min(st.momentum_cap, st.momentum + st.momentum_increment),
        epoch=st.epoch + 1,
    )


@dataclass(frozen=True)
class StoppingRule:
    """Stop once training error is 0 and mean truncated loss is below ``loss_tol``."""

    max_epochs: int = 1000
    loss_tol: float = 1e-5


class DivergenceError(RuntimeError):
    pass


def objective_and_grad(p: NetParams, X, labels, reg: RegConfig):
    """Mean truncated loss over the rows of X plus the penalty, with its gradient."""
    z = X @ p.U.T
    a = relu(z)
    scores = a @ p.V
    losses, dscores = truncated_ce(scores, labels)
    n = X.shape[0]
    dscores /= n
    dV = a.T @ dscores
    dU = ((dscores @ p.V.T) * (z > 0)).T @ X
    pU, pV = penalty_grad(p, reg)
    return losses.mean() + penalty(p, reg), Gradients(dU + pU, dV + pV)


def mean_loss(p: NetParams, X, labels) -> float:
    scores = relu(X @ p.U.T) @ p.V
    return float(truncated_ce(scores, labels)[0].mean())


@dataclass
class TrainResult:
    params: NetParams
    best_params: NetParams  # snapshot with the lowest validation error (earliest on ties)
    best_epoch: int
    epochs_run: int
    converged: bool
    history: list = field(default_factory=list)


def train(p: NetParams, data, reg: RegConfig = RegConfig(), stop: StoppingRule = StoppingRule(),
          rng: Rng = None, validation=None, opt: OptState = None) -> TrainResult:
    """Train with shuffled mini-batches until the stopping rule fires.

    ``history`` holds one dict per epoch with the training loss, objective and
    error plus the validation error when a validation set is given. The last
    mini-batch of an epoch may be smaller than the batch size.
    """
    rng = rng if rng is not None else Rng(0)
    st = opt if opt is not None else OptState.fresh(p)
    if st.velocity_U is None:
        st = replace(st, velocity_U=np.zeros_like(p.U), velocity_V=np.zeros_like(p.V))
    X, y = data.X, data.labels
    n = X.shape[0]
    if st.batch_size > n:
        raise ValueError(f"batch size {st.batch_size} exceeds dataset size {n}")
    history = []
    best, best_epoch, best_val = p, 0, np.inf
    converged = False
    for epoch in range(1, stop.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, st.batch_size):
            idx = order[start:start + st.batch_size]
            obj, g = objective_and_grad(p, X[idx], y[idx], reg)
            if not np.isfinite(obj):
                raise DivergenceError(f"non-finite objective at epoch {epoch}")
            p, st = sgd_step(p, g, st)
        st = end_epoch(st)
        loss = mean_loss(p, X, y)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite training loss after epoch {epoch}")
        rec = {"epoch": epoch, "train_loss": loss, "objective": loss + penalty(p, reg),
               "train_error": zero_one_error(p, data)}
        if validation is not None:
            rec["validation_error"] = zero_one_error(p, validation)
            if rec["validation_error"] < best_val:
                best, best_epoch, best_val = p, epoch, rec["validation_error"]
        history.append(rec)
        if rec["train_error"] == 0 and loss < stop.loss_tol:
            converged = True
            break
    if validation is None:
        best, best_epoch = p, len(history)
    log.debug("trained H=%d for %d epochs (converged=%s)", p.H, len(history), converged)
    return TrainResult(p, best, best_epoch, len(history), converged, history)


def gradient_check(rng: Rng, trials: int = 50, d: int = 5, H: int = 8, k: int = 4,
                   h: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Each trial draws a network, one input whose pre-activations all exceed
    1e-3 in magnitude, and a label; the error is
    ``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)``.
    """
    from .model import init
    worst = 0.0
    for t in range(trials):
        r = rng.child(t)
        p = init(d, H, k, 1.0, r.child(0))
        for j in range(1000):
            x = r.child(1, j).gaussian(d)
            if np.all(np.abs(p.U @ x) > 1e-3):
                break
        X = x[None, :]
        y = r.child(2).integers(1, k)
        _, g = objective_and_grad(p, X, y, RegConfig())
        ga = np.concatenate([g.dU.ravel(), g.dV.ravel()])
        w = p.flat()
        gn = np.empty_like(w)
        for i in range(w.size):
            wp, wm = w.copy(), w.copy()
            wp[i] += h
            wm[i] -= h
            gn[i] = (mean_loss(p.with_flat(wp), X, y) - mean_loss(p.with_flat(wm), X, y)) / (2 * h)
        denom = max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-300)
        worst = max(worst, float(np.linalg.norm(ga - gn) / denom))
    return worst
