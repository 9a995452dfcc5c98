"""Alternating minimisation for the group-structured latent multi-task model.

``fit`` initialises ``L`` from the top-``k`` left singular vectors of the
stacked single-task weights, then alternates

* an ``S``-step: proximal gradient on the data loss with the row-wise prox of
  ``mu * ||.||_G`` and a backtracking step size, and
* an ``L``-step: an exact ridge-type solve for squared loss, gradient descent
  with backtracking for logistic loss,

until the relative change of both blocks falls below ``outer_tol``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy.optimize import minimize
from scipy.sparse.linalg import LinearOperator, cg

from .core import (
    ConfigError, ConvergenceError, DataError, DimensionError, FitReport,
    GroupStructure, HyperParams, LatentModel, MultiTaskDataset, ProblemKind,
    Timer, loss_derivative, losses, objective, predictions,
)
from .groupnorm import prox_rows

logger = logging.getLogger(__name__)

DIRECT_SOLVE_LIMIT = 2000


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings around a :class:`HyperParams`.

    ``l_method`` is ``auto`` (direct solve up to ``d*k = 2000`` unknowns, CG
    beyond), ``direct`` or ``cg``. ``acceleration`` is ``none`` or
    ``momentum`` (monotone variant). ``projection`` selects the overlapping
    projector used inside the prox (``newton``, ``dykstra`` or ``averaged``);
    Dykstra needs hundreds of sweeps per call on typical rows, so the exact
    Newton projector is the default here.
    """

    hp: HyperParams = field(default_factory=HyperParams)
    backtracking_factor: float = 0.5
    initial_step: float = 1.0
    l_method: str = "auto"
    cg_tol: float = 1e-10
    acceleration: str = "none"
    projection: str = "newton"
    proj_tol: float = 1e-13
    proj_max_sweeps: int = 100_000
    stl_reg: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.backtracking_factor < 1:
            raise ConfigError("backtracking_factor must lie in (0, 1)")
        if not self.initial_step > 0:
            raise ConfigError("initial_step must be positive")
        if self.l_method not in ("auto", "direct", "cg"):
            raise ConfigError(f"unknown l_method {self.l_method!r}")
        if self.acceleration not in ("none", "momentum"):
            raise ConfigError(f"unknown acceleration {self.acceleration!r}")
        if self.projection not in ("newton", "dykstra", "averaged"):
            raise ConfigError(f"unknown projection {self.projection!r}")

    def with_hp(self, **changes) -> "SolverConfig":
        return replace(self, hp=replace(self.hp, **changes))


def _rel_change(new, old) -> float:
    return float(np.linalg.norm(new - old) / (1.0 + np.linalg.norm(old)))


# --------------------------------------------------------------------------
# single-task fits used for initialisation and as the STL baseline


def ridge_weights(data: MultiTaskDataset, reg: float) -> np.ndarray:
    """Per-task ridge solutions of ``sum (x'w - y)^2 + reg ||w||^2`` as columns."""
    d = data.n_features
    W = np.empty((d, data.n_tasks))
    for t, (G, c) in enumerate(data.grams()):
        W[:, t] = scipy.linalg.solve(G + reg * np.eye(d), c, assume_a="pos")
    return W


def _logistic_task(X, y, reg, w0=None):
    def fun(w):
        z = X @ w
        val = np.sum(losses(ProblemKind.CLASSIFICATION, z, y)) + reg * w @ w
        grad = X.T @ loss_derivative(ProblemKind.CLASSIFICATION, z, y) + 2 * reg * w
        return val, grad

    w0 = np.zeros(X.shape[1]) if w0 is None else w0
    res = minimize(fun, w0, jac=True, method="L-BFGS-B",
                   options={"maxiter": 5000, "gtol": 1e-9, "ftol": 1e-14})
    return res.x


def logistic_weights(data: MultiTaskDataset, reg: float) -> np.ndarray:
    """Per-task l2-regularised logistic regression weights as columns."""
    return np.column_stack([_logistic_task(X, y, reg) for X, y in data.tasks])


def stl_weights(data: MultiTaskDataset, reg: float) -> np.ndarray:
    if data.kind is ProblemKind.REGRESSION:
        return ridge_weights(data, reg)
    return logistic_weights(data, reg)


def init_L(data: MultiTaskDataset, hp: HyperParams, stl_reg: float = 1e-3) -> LatentModel:
    """Initial model from the truncated SVD of independently fitted task weights.

    Returns ``L = U_k`` and ``S = Sigma_k V_k'`` so that ``L @ S`` is the best
    rank-``k`` approximation of the stacked weights.
    """
    d, T = data.n_features, data.n_tasks
    if hp.k > min(d, T):
        raise ConfigError(f"k={hp.k} exceeds min(d, T)={min(d, T)}")
    if not np.any(data.X_all):
        raise DataError("all features are zero; cannot initialise")
    W = stl_weights(data, stl_reg)
    U, sv, Vt = np.linalg.svd(W, full_matrices=False)
    return LatentModel(U[:, :hp.k], sv[:hp.k, None] * Vt[:hp.k])


# --------------------------------------------------------------------------
# S-step


class _SmoothS:
    """Data loss as a function of ``S`` with ``L`` held fixed."""

    def __init__(self, L, data: MultiTaskDataset):
        self.data = data
        self.kind = data.kind
        self.Z = data.X_all @ L
        self.ti = data.task_index
        self.T = data.n_tasks
        if self.kind is ProblemKind.REGRESSION:
            # quadratic in each column: s'A_t s - 2 b_t's + c
            k = L.shape[1]
            self.A = np.zeros((self.T, k, k))
            self.b = np.zeros((k, self.T))
            for t in range(self.T):
                Zt = self.Z[self.ti == t]
                yt = data.y_all[self.ti == t]
                self.A[t] = Zt.T @ Zt
                self.b[:, t] = Zt.T @ yt
            self.c = float(data.y_all @ data.y_all)

    def _check(self, z):
        if not np.all(np.isfinite(z)):
            bad = int(np.flatnonzero(~np.isfinite(z))[0])
            t = int(self.ti[bad])
            i = bad - int(np.sum(self.data.sizes[:t]))
            raise ConvergenceError(f"non-finite gradient at task {t}, sample {i}")

    def value(self, S) -> float:
        if self.kind is ProblemKind.REGRESSION:
            AS = np.einsum("tij,jt->it", self.A, S)
            return float(np.sum(S * AS) - 2 * np.sum(self.b * S) + self.c)
        z = np.einsum("nk,kn->n", self.Z, S[:, self.ti])
        return float(np.sum(losses(self.kind, z, self.data.y_all)))

    def grad(self, S) -> np.ndarray:
        if self.kind is ProblemKind.REGRESSION:
            G = 2.0 * (np.einsum("tij,jt->it", self.A, S) - self.b)
            if not np.all(np.isfinite(G)):
                t = int(np.flatnonzero(~np.all(np.isfinite(G), axis=0))[0])
                raise ConvergenceError(f"non-finite gradient at task {t}")
            return G
        z = np.einsum("nk,kn->n", self.Z, S[:, self.ti])
        self._check(z)
        r = loss_derivative(self.kind, z, self.data.y_all)
        Zr = self.Z * r[:, None]
        return np.stack([np.bincount(self.ti, weights=Zr[:, j], minlength=self.T)
                         for j in range(Zr.shape[1])])


def _s_step(L, S_init, data, groups, config: SolverConfig):
    """Proximal gradient on ``S``; returns ``(S, iterations, converged)``."""
    hp = config.hp
    if S_init.shape != (L.shape[1], data.n_tasks):
        raise DimensionError(f"S has shape {S_init.shape}, expected ({L.shape[1]}, {data.n_tasks})")
    f = _SmoothS(L, data)
    mu = hp.mu
    beta = config.backtracking_factor
    step = config.initial_step

    warm = {}

    def prox(V, step):
        if mu == 0:
            return V, 0.0
        U, P = prox_rows(V, groups, mu * step, tol=config.proj_tol,
                         max_sweeps=config.proj_max_sweeps, method=config.projection,
                         state=warm)
        # P/(mu*step) is a subgradient of the norm at U
        return U, float(np.sum(P * U)) / step

    def prox_grad(Y, fY, gY, step):
        for _ in range(200):
            U, pen = prox(Y - step * gY, step)
            D = U - Y
            fU = f.value(U)
            bound = fY + np.sum(gY * D) + np.sum(D * D) / (2 * step)
            if fU <= bound + 1e-13 * (1.0 + abs(fY)):
                return U, fU, pen, step
            step *= beta
        raise ConvergenceError("backtracking failed to find a step size")

    S = np.array(S_init, dtype=float)
    fS = f.value(S)
    gS = f.grad(S)
    if config.acceleration == "none":
        for it in range(1, hp.inner_max_iter + 1):
            S_new, fS_new, _, step = prox_grad(S, fS, gS, step)
            change = _rel_change(S_new, S)
            S, fS = S_new, fS_new
            if change <= hp.inner_tol:
                return S, it, True
            gS = f.grad(S)
        return S, hp.inner_max_iter, False

    # monotone accelerated variant: keep the better of the prox point and the
    # current iterate, extrapolate from both
    from .groupnorm import group_norm_rows

    FS = fS + (mu * group_norm_rows(S, groups) if mu > 0 else 0.0)
    Y, theta = S.copy(), 1.0
    for it in range(1, hp.inner_max_iter + 1):
        fY, gY = f.value(Y), f.grad(Y)
        U, fU, pen, step = prox_grad(Y, fY, gY, step)
        FU = fU + pen
        S_prev = S
        if FU <= FS:
            S, FS = U, FU
        theta_new = (1 + np.sqrt(1 + 4 * theta * theta)) / 2
        Y = S + (theta / theta_new) * (U - S) + ((theta - 1) / theta_new) * (S - S_prev)
        theta = theta_new
        if _rel_change(U, S_prev) <= hp.inner_tol and _rel_change(S, S_prev) <= hp.inner_tol:
            return S, it, True
    return S, hp.inner_max_iter, False


def solve_S_step(L, S_init, data: MultiTaskDataset, groups: GroupStructure,
                 config: SolverConfig) -> np.ndarray:
    """Minimise ``f(S) + mu * sum_r ||S[r, :]||_G`` over ``S`` with ``L`` fixed."""
    L = np.asarray(L, dtype=float)
    if groups.n_tasks != data.n_tasks:
        raise DimensionError(f"groups cover {groups.n_tasks} tasks, data has {data.n_tasks}")
    return _s_step(L, np.asarray(S_init, dtype=float), data, groups, config)[0]


# --------------------------------------------------------------------------
# L-step


def _normal_operator(S, data, lam):
    Gs = np.stack([G for G, _ in data.grams()])
    b = np.einsum("at,ti->ai", S, np.stack([c for _, c in data.grams()])).reshape(-1)
    return Gs, b


def _l_step_regression(L_init, S, data, lam, config: SolverConfig):
    d, k = data.n_features, S.shape[0]
    Gs, b = _normal_operator(S, data, lam)
    n = d * k
    method = config.l_method
    if method == "auto":
        method = "direct" if n <= DIRECT_SOLVE_LIMIT else "cg"
    # unknowns ordered column by column of L: index a*d + i <-> L[i, a]
    if method == "direct":
        A = np.einsum("at,bt,tij->aibj", S, S, Gs).reshape(n, n)
        A[np.diag_indices(n)] += lam
        if lam == 0 and np.linalg.cond(A) > 1e12:
            raise ConvergenceError(
                "L-step system is rank deficient with lam = 0; use lam > 0")
        try:
            v = scipy.linalg.solve(A, b, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as err:
            raise ConvergenceError(f"L-step solve failed ({err}); use lam > 0") from None
    else:
        def matvec(v):
            M = v.reshape(k, d).T
            Y = np.einsum("tij,jt->it", Gs, M @ S)
            return (Y @ S.T + lam * M).T.reshape(-1)

        op = LinearOperator((n, n), matvec=matvec, dtype=float)
        v, info = cg(op, b, x0=np.asarray(L_init).T.reshape(-1), rtol=config.cg_tol,
                     atol=0.0, maxiter=10 * n)
        if info != 0:
            hint = "; use lam > 0" if lam == 0 else ""
            raise ConvergenceError(f"conjugate gradient L-step did not converge{hint}")
    return v.reshape(k, d).T.copy()


def l_step_residual(L, S, data: MultiTaskDataset, lam: float) -> float:
    """Relative residual ``||A vec(L) - b|| / ||b||`` of the squared-loss L-step."""
    d, k = L.shape
    Gs, b = _normal_operator(S, data, lam)
    Y = np.einsum("tij,jt->it", Gs, L @ S)
    Av = (Y @ S.T + lam * L).T.reshape(-1)
    return float(np.linalg.norm(Av - b) / max(np.linalg.norm(b), 1e-300))


def _l_step_gradient(L_init, S, data, lam, config: SolverConfig):
    hp = config.hp
    St = S[:, data.task_index].T
    X = data.X_all

    def value(L):
        z = np.einsum("nk,nk->n", X @ L, St)
        return float(np.sum(losses(data.kind, z, data.y_all)) + lam * np.sum(L * L))

    def grad(L):
        z = np.einsum("nk,nk->n", X @ L, St)
        r = loss_derivative(data.kind, z, data.y_all)
        return X.T @ (r[:, None] * St) + 2.0 * lam * L

    L = np.array(L_init, dtype=float)
    fL = value(L)
    step = config.initial_step
    beta = config.backtracking_factor
    for _ in range(hp.inner_max_iter):
        g = grad(L)
        gnorm2 = float(np.sum(g * g))
        if np.sqrt(gnorm2) <= hp.inner_tol:
            break
        step = step / beta  # let the step grow back before backtracking
        for _ in range(200):
            L_new = L - step * g
            f_new = value(L_new)
            if f_new <= fL - 0.5 * step * gnorm2:
                break
            step *= beta
        else:
            break
        if _rel_change(L_new, L) <= 1e-15:
            L, fL = L_new, f_new
            break
        L, fL = L_new, f_new
    return L


def solve_L_step(L_init, S, data: MultiTaskDataset, config: SolverConfig) -> np.ndarray:
    """Minimise ``data loss + lam * ||L||_F^2`` over ``L`` with ``S`` fixed."""
    L_init = np.asarray(L_init, dtype=float)
    S = np.asarray(S, dtype=float)
    if L_init.shape != (data.n_features, S.shape[0]) or S.shape[1] != data.n_tasks:
        raise DimensionError(
            f"shapes L{L_init.shape}, S{S.shape} inconsistent with "
            f"d={data.n_features}, T={data.n_tasks}")
    lam = config.hp.lam
    if data.kind is ProblemKind.REGRESSION:
        return _l_step_regression(L_init, S, data, lam, config)
    return _l_step_gradient(L_init, S, data, lam, config)


# --------------------------------------------------------------------------
# outer loop


def train_metrics(model: LatentModel, data: MultiTaskDataset) -> list:
    """Per-task training RMSE (regression) or 0/1 error (classification)."""
    z = predictions(model.L, model.S, data)
    out = []
    for t in range(data.n_tasks):
        m = data.task_index == t
        if data.kind is ProblemKind.REGRESSION:
            out.append(float(np.sqrt(np.mean((z[m] - data.y_all[m]) ** 2))))
        else:
            out.append(float(np.mean(np.where(z[m] >= 0, 1.0, -1.0) != data.y_all[m])))
    return out


def fit(data: MultiTaskDataset, groups: GroupStructure, config: SolverConfig = SolverConfig(),
        init: LatentModel | None = None):
    """Fit ``L`` and ``S`` by alternating minimisation.

    Parameters
    ----------
    data : MultiTaskDataset
    groups : GroupStructure
        Task groups used by the row group norm of ``S``.
    config : SolverConfig
    init : LatentModel, optional
        Starting point; defaults to :func:`init_L`.

    Returns
    -------
    model : LatentModel
    report : FitReport

    Raises
    ------
    ConvergenceError
        If the objective increases by more than ``1e-9`` relative between
        outer iterations, or an inner solver fails.
    """
    hp = config.hp
    if groups.n_tasks != data.n_tasks:
        raise DimensionError(f"groups cover {groups.n_tasks} tasks, data has {data.n_tasks}")
    notes = []
    if hp.k == data.n_tasks:
        warnings.warn("k equals T; the latent space is not low-dimensional", stacklevel=2)
        notes.append("k equals T")
    with Timer() as timer:
        model = init if init is not None else init_L(data, hp, config.stl_reg)
        L, S = np.array(model.L), np.array(model.S)
        trace = [objective(model, data, groups, hp)]
        converged = False
        iters = 0
        for iters in range(1, hp.outer_max_iter + 1):
            S_new, n_inner, inner_ok = _s_step(L, S, data, groups, config)
            if not inner_ok:
                notes.append(f"outer {iters}: S-step hit the iteration cap")
            L_new = solve_L_step(L, S_new, data, config)
            value = objective(LatentModel(L_new, S_new), data, groups, hp)
            prev = trace[-1]
            if value > prev + 1e-9 * abs(prev) + 1e-12:
                raise ConvergenceError(
                    f"objective increased at outer iteration {iters}: {prev!r} -> {value!r}",
                    best=LatentModel(L, S), residual=value - prev)
            delta = max(_rel_change(L_new, L), _rel_change(S_new, S))
            L, S = L_new, S_new
            trace.append(value)
            logger.debug("outer %d: objective %.10g, change %.3e, inner %d",
                         iters, value, delta, n_inner)
            if delta <= hp.outer_tol:
                converged = True
                break
    model = LatentModel(L, S)
    report = FitReport(objective_trace=trace, converged=converged, outer_iterations=iters,
                       wall_time=timer.elapsed, notes=notes,
                       train_metrics=train_metrics(model, data))
    return model, report
