"""Convex neural nets over a finite library of unit-norm hidden units.

With hidden units fixed to a library ``{u_i}``, a single-output net is
``y = sum_i v_i relu(<u_i, x>)`` and training is the lasso

    min_v  1/2 ||Phi v - y||^2 + lam ||v||_1,   Phi[t, i] = relu(<u_i, x_t>).

The solver is monotone FISTA (an accelerated proximal gradient method whose
accepted iterate never increases the objective beyond rounding, 4 ulps) with a restart whenever the
proximal point is rejected, plus an exact polish on the current sign pattern.

This module also holds the weight-decay vs. library comparison and the
trace-norm factorization helpers.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .model import NetParams, backward, balance, forward, normalize_to_unit
from .numerics import Rng, as_matrix, relu

SCHEMES = ("gaussian_normalized", "grid_sphere_2d")
_TIE = 4 * np.finfo(float).eps


@dataclass(frozen=True)
class UnitLibrary:
    units: np.ndarray  # (m, d), unit-norm rows

    def __post_init__(self):
        u = as_matrix(self.units, name="units")
        norms = np.linalg.norm(u, axis=1)
        if np.any(norms > 1) or np.any(norms < 1 - 1e-12):
            raise ValueError("library rows must have unit norm")
        object.__setattr__(self, "units", u)

    @property
    def d(self) -> int:
        return self.units.shape[1]

    @property
    def m(self) -> int:
        return self.units.shape[0]


def _unit_rows(u):
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    # Rounding can leave a norm one ulp above 1; pull those rows back inside the ball.
    while True:
        over = np.linalg.norm(u, axis=1) > 1
        if not over.any():
            return u
        u[over] *= np.nextafter(1.0, 0.0)


def sample_library(d: int, m: int, scheme: str = "gaussian_normalized", rng: Rng = None) -> UnitLibrary:
    if m < 1:
        raise ValueError("library needs at least one unit")
    if scheme == "grid_sphere_2d":
        if d != 2:
            raise ValueError("grid_sphere_2d only exists for d=2")
        # angle 2*pi*(i/m) so the m-grid is bitwise a subset of the 2m-grid
        theta = 2.0 * np.pi * (np.arange(m) / m)
        return UnitLibrary(_unit_rows(np.column_stack([np.cos(theta), np.sin(theta)])))
    if scheme == "gaussian_normalized":
        rng = rng if rng is not None else Rng(0)
        g = rng.gaussian_matrix(m, d)
        while True:
            zero = np.linalg.norm(g, axis=1) == 0
            if not zero.any():
                break
            g[zero] = rng.gaussian_matrix(int(zero.sum()), d)
        return UnitLibrary(_unit_rows(g))
    raise ValueError(f"unknown library scheme {scheme!r}; choose from {SCHEMES}")


def features(lib: UnitLibrary, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != lib.d:
        raise ValueError(f"inputs of shape {X.shape} do not match library dimension {lib.d}")
    return relu(X @ lib.units.T)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def l1_objective(Phi, y, v, lam) -> float:
    r = Phi @ v - y
    return 0.5 * float(r @ r) + lam * float(np.abs(v).sum())


def kkt_residual(Phi, y, v, lam) -> float:
    """Largest violation of the lasso subgradient optimality conditions."""
    g = Phi.T @ (Phi @ v) - Phi.T @ y
    zero = v == 0
    viol = np.where(zero, np.maximum(np.abs(g) - lam, 0.0), np.abs(g + lam * np.sign(v)))
    return float(viol.max()) if viol.size else 0.0


@dataclass
class ConvexNNSolution:
    v: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    objective_history: list = field(default_factory=list, repr=False)


def _polish(Phi, y, v, lam):
    s = np.flatnonzero(v)
    if s.size == 0:
        return v
    A = Phi[:, s]
    w, *_ = np.linalg.lstsq(A.T @ A, A.T @ y - lam * np.sign(v[s]), rcond=None)
    if np.any(np.sign(w) != np.sign(v[s])):
        return v
    out = np.zeros_like(v)
    out[s] = w
    return out


def solve_l1_features(Phi, y, lam: float, tol: float = 1e-9, max_iter: int = 100000,
                      v0=None, polish_every: int = 25) -> ConvexNNSolution:
    """Lasso over a precomputed feature matrix; see :func:`solve_l1`."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    Phi = as_matrix(Phi, name="Phi")
    y = np.asarray(y, dtype=np.float64)
    m = Phi.shape[1]
    Phity = Phi.T @ y
    L = float(np.linalg.norm(Phi, 2)) ** 2 or 1.0

    def grad(v):
        return Phi.T @ (Phi @ v) - Phity

    x = np.zeros(m) if v0 is None else np.array(v0, dtype=np.float64)
    fx = l1_objective(Phi, y, x, lam)
    res = kkt_residual(Phi, y, x, lam)
    hist = [fx]

    def accept(fc, c):
        # Strict decrease, or a tie within rounding that lowers the optimality residual;
        # otherwise steps stall once true progress falls below one ulp of the objective.
        if fc < fx:
            return kkt_residual(Phi, y, c, lam)
        if fc <= fx + _TIE * abs(fx):
            rc = kkt_residual(Phi, y, c, lam)
            if rc < res:
                return rc
        return None

    yk, t = x.copy(), 1.0
    it = 0
    while res > tol and it < max_iter:
        it += 1
        z = soft_threshold(yk - grad(yk) / L, lam / L)
        fz = l1_objective(Phi, y, z, lam)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        rz = accept(fz, z)
        if rz is not None:
            x_old, x, fx, res = x, z, fz, rz
            yk = x + ((t - 1.0) / t_next) * (x - x_old)
            t = t_next
        else:
            # rejected: restart momentum from the kept iterate
            yk, t = x.copy(), 1.0
        if polish_every and it % polish_every == 0:
            xp = _polish(Phi, y, x, lam)
            fp = l1_objective(Phi, y, xp, lam)
            rp = accept(fp, xp)
            if rp is not None:
                x, fx, res, yk, t = xp, fp, rp, xp.copy(), 1.0
        hist.append(fx)
    return ConvexNNSolution(x, fx, res, it, res <= tol, hist)


def solve_l1(lib: UnitLibrary, X, y, lam: float, tol: float = 1e-9, max_iter: int = 100000,
             v0=None) -> ConvexNNSolution:
    """Select library units by l1-regularized squared loss.

    ``converged`` is False when ``max_iter`` runs out before the KKT residual
    drops to ``tol``; the best iterate found is still returned.
    """
    return solve_l1_features(features(lib, X), y, lam, tol, max_iter, v0)


def library_net(lib: UnitLibrary, v) -> NetParams:
    return NetParams(lib.units, np.asarray(v, dtype=np.float64)[:, None])


def weight_decay_objective(p: NetParams, X, y, lam: float) -> float:
    r = forward(p, X)[:, 0] - y
    return 0.5 * float(r @ r) + 0.5 * lam * (float(np.sum(p.U**2)) + float(np.sum(p.V**2)))


def l1_form_objective(p: NetParams, X, y, lam: float) -> float:
    """Squared loss plus ``lam * sum_h ||u_h|| |v_h|`` (the l1 penalty once units have norm <= 1)."""
    r = forward(p, X)[:, 0] - y
    return 0.5 * float(r @ r) + lam * float(np.sum(np.linalg.norm(p.U, axis=1) * np.abs(p.V[:, 0])))


def train_weight_decay(X, y, H: int, lam: float, rng: Rng, sigma: float = 0.5,
                       max_iter: int = 20000, gtol: float = 1e-10) -> NetParams:
    """Local search (L-BFGS) on squared loss + lam/2 (||U||^2 + ||V||^2)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p0 = NetParams(rng.gaussian_matrix(H, X.shape[1], sigma), rng.gaussian_matrix(H, 1, sigma))

    def fun(w):
        p = p0.with_flat(w)
        r = forward(p, X)[:, 0] - y
        g = backward(p, X, r[:, None])
        val = 0.5 * r @ r + 0.5 * lam * (w @ w)
        return val, np.concatenate([g.dU.ravel(), g.dV.ravel()]) + lam * w

    out = minimize(fun, p0.flat(), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15})
    if not np.all(np.isfinite(out.x)):
        raise FloatingPointError("weight-decay local search diverged")
    return p0.with_flat(out.x)


@dataclass
class EquivalenceReport:
    H: int
    n: int
    lam: float
    objective_trained: float  # weight-decay objective of the trained net
    objective_balanced: float  # same after balancing every unit
    objective_l1_form: float  # l1-form objective after moving norms into v
    identity_rel_error: float
    library_sizes: list
    library_objectives: list
    library_gaps: list  # J_m - J_local
    library_converged: list


def equivalence_check(X, y, H: int, lam: float, library_sizes, rng: Rng, sigma: float = 0.5,
                      tol: float = 1e-9, restarts: int = 10) -> EquivalenceReport:
    """Compare a weight-decay-trained net with lasso solutions over grid libraries (d=2).

    The local search keeps the best of ``restarts`` seeded runs. Library sizes
    must nest (each a multiple of the previous); every solve is warm-started
    from the previous solution embedded in the finer grid.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if H <= n:
        raise ValueError(f"need H > n for the comparison, got H={H}, n={n}")
    runs = [train_weight_decay(X, y, H, lam, rng.child(i), sigma) for i in range(restarts)]
    p = min(runs, key=lambda q: weight_decay_objective(q, X, y, lam))
    pb = balance(p)
    pn = normalize_to_unit(pb)
    j_trained = weight_decay_objective(p, X, y, lam)
    j_bal = weight_decay_objective(pb, X, y, lam)
    j_l1 = l1_objective(relu(X @ pn.U.T), y, pn.V[:, 0], lam)
    ident = abs(j_bal - j_l1) / max(abs(j_l1), 1e-300)

    objs, gaps, conv = [], [], []
    prev_v, prev_m = None, None
    for m in library_sizes:
        lib = sample_library(X.shape[1], m, "grid_sphere_2d")
        v0 = None
        if prev_v is not None:
            if m % prev_m:
                raise ValueError("library sizes must nest (each a multiple of the previous)")
            v0 = np.zeros(m)
            v0[:: m // prev_m] = prev_v
        sol = solve_l1(lib, X, y, lam, tol=tol, v0=v0)
        objs.append(sol.objective)
        gaps.append(sol.objective - j_l1)
        conv.append(sol.converged)
        prev_v, prev_m = sol.v, m
    return EquivalenceReport(H, n, lam, j_trained, j_bal, j_l1, ident, list(library_sizes),
                             objs, gaps, conv)


def trace_norm(W) -> float:
    return float(np.linalg.svd(as_matrix(W, name="W"), compute_uv=False).sum())


def factorization_penalty(U, V) -> float:
    """1/2 (||U||_F^2 + ||V||_F^2) for a factorization W = V U^T."""
    return 0.5 * (float(np.sum(np.square(U))) + float(np.sum(np.square(V))))


def balanced_factorization(W):
    """(U, V) with W = V U^T and 1/2(||U||^2 + ||V||^2) equal to the trace norm."""
    P, s, Qt = np.linalg.svd(as_matrix(W, name="W"), full_matrices=False)
    r = np.sqrt(s)
    return Qt.T * r, P * r
