"""Two-layer ReLU network without biases: ``y[j] = sum_h V[h, j] * relu(<U[h], x>)``."""

import json
from dataclasses import dataclass

import numpy as np

from .numerics import Rng, as_matrix, relu

CHECKPOINT_FORMAT = "implicitreg-netparams/1"


@dataclass(frozen=True)
class NetParams:
    U: np.ndarray  # (H, d), row h is the incoming weight vector of unit h
    V: np.ndarray  # (H, k), row h holds the outgoing weights of unit h

    def __post_init__(self):
        U = as_matrix(self.U, name="U")
        V = as_matrix(self.V, rows=U.shape[0], name="V")
        if U.shape[0] < 1:
            raise ValueError("need at least one hidden unit")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def H(self) -> int:
        return self.U.shape[0]

    @property
    def k(self) -> int:
        return self.V.shape[1]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.U.ravel(), self.V.ravel()])

    def with_flat(self, w) -> "NetParams":
        nu = self.U.size
        return NetParams(np.reshape(w[:nu], self.U.shape), np.reshape(w[nu:], self.V.shape))


@dataclass(frozen=True)
class Gradients:
    dU: np.ndarray
    dV: np.ndarray


def _inputs(p: NetParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.d or x.ndim not in (1, 2):
        raise ValueError(f"input of shape {x.shape} does not match d={p.d}")
    return x


def forward(p: NetParams, x) -> np.ndarray:
    """Network output for one input (shape ``(d,)``) or a batch (shape ``(n, d)``)."""
    x = _inputs(p, x)
    return relu(x @ p.U.T) @ p.V


def backward(p: NetParams, x, dloss_dy) -> Gradients:
    """Gradient of a loss with respect to (U, V) given its gradient w.r.t. the output.

    For a batch, ``dloss_dy`` has shape ``(n, k)`` and the per-example gradients
    are summed. The ReLU derivative at exactly zero is taken to be 0.
    """
    x = _inputs(p, x)
    g = np.asarray(dloss_dy, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x, g = x[None, :], g[None, :]
    if g.shape != (x.shape[0], p.k):
        raise ValueError(f"output gradient of shape {g.shape} does not match k={p.k}")
    z = x @ p.U.T
    a = relu(z)
    dV = a.T @ g
    dz = (g @ p.V.T) * (z > 0)
    dU = dz.T @ x
    return Gradients(dU, dV)


def init(d: int, H: int, k: int, sigma: float, rng: Rng) -> NetParams:
    U = rng.gaussian_matrix(H, d, sigma)
    V = rng.gaussian_matrix(H, k, sigma)
    return NetParams(U, V)


def _require_single_output(p: NetParams):
    if p.k != 1:
        raise ValueError(f"rescaling transforms are defined for k=1, got k={p.k}")


def balance(p: NetParams) -> NetParams:
    """Rescale every unit so that ``||u_h|| == |v_h|`` without changing the function.

    A unit with a zero incoming or outgoing weight contributes nothing and is
    zeroed entirely.
    """
    _require_single_output(p)
    un = np.linalg.norm(p.U, axis=1)
    vn = np.abs(p.V[:, 0])
    live = (un > 0) & (vn > 0)
    c = np.zeros_like(un)
    c[live] = np.sqrt(vn[live] / un[live])
    U = p.U * c[:, None]
    V = np.zeros_like(p.V)
    V[live] = p.V[live] / c[live, None]
    return NetParams(U, V)


def normalize_to_unit(p: NetParams) -> NetParams:
    """Move each unit's norm into its output weight: ``u/||u||``, ``v*||u||``."""
    _require_single_output(p)
    un = np.linalg.norm(p.U, axis=1)
    live = un > 0
    U = np.zeros_like(p.U)
    U[live] = p.U[live] / un[live, None]
    V = p.V * un[:, None]
    return NetParams(U, V)


def rescale_units(p: NetParams, c) -> NetParams:
    """Scale unit h's incoming weights by ``c[h] > 0`` and outgoing weights by ``1/c[h]``."""
    c = np.asarray(c, dtype=np.float64)
    if np.any(c <= 0):
        raise ValueError("rescaling factors must be positive")
    return NetParams(p.U * c[:, None], p.V / c[:, None])


def save_checkpoint(p: NetParams, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "d": p.d,
        "H": p.H,
        "k": p.k,
        "U": p.U.ravel().tolist(),
        "V": p.V.ravel().tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_checkpoint(path) -> NetParams:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    d, H, k = doc["d"], doc["H"], doc["k"]
    U = np.asarray(doc["U"], dtype=np.float64)
    V = np.asarray(doc["V"], dtype=np.float64)
    if U.size != H * d or V.size != H * k:
        raise ValueError(f"{path}: array lengths do not match shapes")
    return NetParams(U.reshape(H, d), V.reshape(H, k))
