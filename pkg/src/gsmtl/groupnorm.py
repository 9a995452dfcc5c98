"""Latent group norm, projections onto intersections of group balls, and its prox.

For groups ``G_1..G_g`` covering ``0..n-1`` the latent group norm is::

    ||x||_G = min { sum_j ||w_j||_2 : x = sum_j w_j,  supp(w_j) in G_j }

Its dual ball is ``B = {a : ||a_Gj||_2 <= 1 for all j}``, so by the Moreau
decomposition ``prox_{t ||.||_G}(x) = x - proj_{tB}(x)``.

All routines accept either a single vector or a 2-D array whose rows are
processed independently.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, ConvergenceError, DimensionError, GroupStructure

__all__ = [
    "GroupBallSpec", "GroupNormDecomposition", "group_norm", "group_norm_rows",
    "project_disjoint", "project_intersection", "prox_group_norm", "prox_rows",
    "soft_threshold", "block_soft_threshold", "maximal_groups",
]


@dataclass(frozen=True)
class GroupBallSpec:
    """The scaled dual ball ``{v : ||v_G||_2 <= radius for every group G}``."""

    groups: GroupStructure
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError(f"radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class GroupNormDecomposition:
    parts: tuple
    value: float

    def reconstruct(self) -> np.ndarray:
        return np.sum(self.parts, axis=0)


def soft_threshold(x, t):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def block_soft_threshold(x, t):
    """``prox`` of ``t * ||.||_2`` applied to a vector or to each row of a matrix."""
    x = np.asarray(x, dtype=float)
    nrm = np.linalg.norm(x, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(nrm > t, 1.0 - t / nrm, 0.0)
    return scale * x


def _as_rows(x, n):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.ndim != 2 or X.shape[1] != n:
        raise DimensionError(f"vector length {X.shape[-1]} does not match the {n} grouped indices")
    return X, single


def maximal_groups(groups: GroupStructure) -> GroupStructure:
    """Drop every group contained in another (and repeated copies).

    ``||v_G|| <= ||v_H||`` whenever ``G`` is a subset of ``H``, so the dropped
    balls are implied by the kept ones: the dual ball, the projection and the
    latent norm are unchanged. Nested groups otherwise slow the cyclic
    projections down badly.
    """
    cached = groups.__dict__.get("_maximal")
    if cached is not None:
        return cached
    sets = [frozenset(G.tolist()) for G in groups.groups]
    keep = []
    for j, A in enumerate(sets):
        dominated = any((A < B) or (A == B and i < j) for i, B in enumerate(sets) if i != j)
        if not dominated:
            keep.append(groups.groups[j])
    reduced = groups if len(keep) == len(sets) else GroupStructure(tuple(keep), groups.n_tasks)
    object.__setattr__(groups, "_maximal", reduced)
    return reduced


def _ball_scale(nrm, t):
    # zero blocks are already inside the ball
    with np.errstate(divide="ignore"):
        return np.where(nrm > t, t / np.where(nrm > 0, nrm, 1.0), 1.0)


def _scale_blocks(X, groups, t):
    # X restricted to the concatenated group layout, each block clamped into the t-ball
    idx, starts, sizes = groups.layout
    B = X[:, idx]
    nrm = np.sqrt(np.add.reduceat(B * B, starts, axis=1))
    return idx, B * np.repeat(_ball_scale(nrm, t), sizes, axis=1)


def project_disjoint(x, spec: GroupBallSpec) -> np.ndarray:
    """Euclidean projection onto ``{v : ||v_G|| <= t}`` for pairwise disjoint groups.

    Each block outside the ball is rescaled onto its sphere; blocks already
    inside are left untouched.
    """
    groups = spec.groups
    if groups.overlapping:
        raise ConfigError("groups overlap; use project_intersection instead")
    X, single = _as_rows(x, groups.n_tasks)
    idx, blocks = _scale_blocks(X, groups, spec.radius)
    out = np.empty_like(X)
    out[:, idx] = blocks
    return out[0] if single else out


def _project_dykstra(X, groups, t, tol, max_sweeps, P0=None):
    """Dykstra's algorithm; ``P0`` optionally warm-starts the correction terms.

    The corrections are the dual block variables of the projection problem,
    so any starting value converges to the same projection.
    """
    idx, starts, sizes = groups.layout
    ends = starts + sizes
    P = np.zeros((X.shape[0], idx.size)) if P0 is None else P0.copy()
    Y = X.copy()
    if P0 is not None:
        for s, e in zip(starts, ends):
            Y[:, idx[s:e]] -= P[:, s:e]
    scale_ref = max(1.0, float(np.max(np.abs(X)))) if X.size else 1.0
    change = np.inf
    blocks = list(zip(groups.groups, starts, ends))
    for _ in range(max_sweeps):
        # largest move of any single block projection; a sweep can return to
        # its starting point while the corrections still change
        change = 0.0
        for G, s, e in blocks:
            Z = Y[:, G] + P[:, s:e]
            nrm = np.sqrt(np.einsum("ij,ij->i", Z, Z))
            block = Z * _ball_scale(nrm, t)[:, None]
            P[:, s:e] = Z - block
            change = max(change, float(np.max(np.abs(block - Y[:, G]))))
            Y[:, G] = block
        if change <= tol * scale_ref:
            return Y, P
    raise ConvergenceError(
        f"Dykstra projection did not converge in {max_sweeps} sweeps "
        f"(last sweep change {change:.3e})", best=Y, residual=change)


def _arc_search(ascent, lam, grad, step):
    alpha = 1.0
    for _ in range(60):
        lam_new = np.maximum(lam + alpha * step, 0.0)
        if ascent(lam, lam_new) >= 1e-4 * float(grad @ (lam_new - lam)):
            return lam_new
        alpha *= 0.5
    return None


def _project_newton_row(x, M, tol, max_iter):
    """Projection of ``x`` onto the unit-radius intersection via its multiplier dual.

    With multipliers ``lam_G >= 0`` the minimiser is ``v = x / (1 + M' lam)``
    and the dual ``D(lam) = 1/2 sum x^2 c/(1+c) - 1/2 sum lam`` (``c = M' lam``)
    is smooth and concave in ``g`` variables; it is maximised by projected
    Newton. A full step is taken when it halves the projected gradient,
    otherwise an Armijo search runs along the projection arc.
    """
    x2 = x * x
    if np.all(M @ x2 <= 1.0):
        return x.copy()
    tol = max(tol, 1e-12)  # gradient entries are O(1) at the solution

    def ascent(lam, lam_new):
        # D(lam_new) - D(lam) without cancellation between large dual values
        c, c_new = M.T @ lam, M.T @ lam_new
        return (0.5 * float(np.sum(x2 * (c_new - c) / ((1.0 + c) * (1.0 + c_new))))
                - 0.5 * float(np.sum(lam_new - lam)))

    def gradient(lam):
        c = M.T @ lam
        grad = 0.5 * (M @ (x2 / (1.0 + c) ** 2) - 1.0)
        pg = np.where(lam > 0, grad, np.maximum(grad, 0.0))
        return c, grad, float(np.max(np.abs(pg)))

    # exact for disjoint groups; a reasonable start otherwise
    depth = np.max(M * (M.sum(axis=0)), axis=1)
    lam = np.maximum(np.sqrt(M @ x2) - 1.0, 0.0) / depth
    c, grad, pg_norm = gradient(lam)
    for _ in range(max_iter):
        if pg_norm <= tol:
            break
        free = (lam > 0) | (grad > 0)
        H = (M[free] * (x2 / (1.0 + c) ** 3)) @ M[free].T
        step = np.zeros_like(lam)
        # duplicate or nested groups make H singular; take the minimum-norm step
        step[free] = np.linalg.lstsq(H, grad[free], rcond=None)[0]
        lam_new = np.maximum(lam + step, 0.0)
        c_new, grad_new, pg_new = gradient(lam_new)
        if pg_new > 0.5 * pg_norm:
            lam_new = _arc_search(ascent, lam, grad, step)
            if lam_new is None:
                # diagonally scaled gradient: always an ascent arc
                diag = (M * M) @ (x2 / (1.0 + c) ** 3)
                lam_new = _arc_search(ascent, lam, grad, grad / np.maximum(diag, 1e-300))
            if lam_new is None:
                break
            c_new, grad_new, pg_new = gradient(lam_new)
        lam = lam_new
        c, grad, pg_norm = c_new, grad_new, pg_new
    if pg_norm > tol:
        raise ConvergenceError(
            f"Newton projection stopped with projected gradient {pg_norm:.3e}",
            best=x / (1.0 + c), residual=pg_norm)
    return x / (1.0 + c)


def _project_newton(X, groups, t, tol, max_iter):
    groups = maximal_groups(groups)
    M = np.zeros((groups.n_groups, groups.n_tasks))
    for j, G in enumerate(groups.groups):
        M[j, G] = 1.0
    out = np.empty_like(X)
    for r, row in enumerate(X):
        try:
            # solve at unit radius and rescale
            out[r] = t * _project_newton_row(row / t, M, tol, max_iter)
        except ConvergenceError:
            # degenerate multiplier geometry; fall back to the cyclic scheme
            out[r] = _project_dykstra(row[None, :], groups, t, 1e-13, 1_000_000)[0][0]
    return out


def _project_averaged(X, groups, t, tol, max_sweeps):
    # anchored cyclic scheme: z <- x/(j+1) + j/(j+1) * P_{j mod g}(z), z0 = 0;
    # the block projection acts as the identity outside its group
    g = groups.n_groups
    Z = np.zeros_like(X)
    scale_ref = max(1.0, float(np.max(np.abs(X)))) if X.size else 1.0
    change = np.inf
    j = 0
    for _ in range(max_sweeps):
        Z_prev = Z.copy()
        for _ in range(g):
            G = groups.groups[j % g]
            PZ = Z.copy()
            nrm = np.linalg.norm(Z[:, G], axis=1)
            PZ[:, G] = Z[:, G] * _ball_scale(nrm, t)[:, None]
            Z = X / (j + 1) + (j / (j + 1)) * PZ
            j += 1
        change = float(np.max(np.abs(Z - Z_prev)))
        if j > g and change <= tol * scale_ref:
            return Z
    raise ConvergenceError(
        f"averaged cyclic projection did not converge in {max_sweeps} sweeps "
        f"(last sweep change {change:.3e})", best=Z, residual=change)


def project_intersection(x, spec: GroupBallSpec, tol: float = 1e-13,
                         max_sweeps: int = 100_000, method: str = "newton") -> np.ndarray:
    """Euclidean projection onto the intersection of the group balls.

    Parameters
    ----------
    x : ndarray
        Vector of length ``T`` or an array of such rows.
    spec : GroupBallSpec
    tol : float
        Stop once no block projection within a full sweep moves any
        coordinate by more than ``tol * max(1, max|x|)``.
    max_sweeps : int
    method : {"dykstra", "newton", "averaged"}
        ``newton`` (default) solves the ``g``-dimensional multiplier dual by
        projected Newton and falls back to Dykstra if that stalls. For it
        ``tol`` bounds the group-norm constraint violation and ``max_sweeps``
        caps Newton iterations.
        ``dykstra`` converges to the exact projection but may need very many
        sweeps on badly scaled input.
        ``averaged`` is the anchored cyclic scheme with weights ``1/(j+1)``;
        it converges much more slowly.

    Raises
    ------
    ConvergenceError
        When ``max_sweeps`` is exhausted; ``best`` holds the last iterate.
    """
    groups = spec.groups
    X, single = _as_rows(x, groups.n_tasks)
    if method in ("dykstra", "newton"):
        groups = maximal_groups(groups)
        spec = GroupBallSpec(groups, spec.radius)
    if method == "dykstra":
        if groups.n_groups == 1 or not groups.overlapping:
            Y = project_disjoint(X, spec)
        else:
            Y, _ = _project_dykstra(X, groups, spec.radius, tol, max_sweeps)
    elif method == "newton":
        if groups.n_groups == 1 or not groups.overlapping:
            Y = project_disjoint(X, spec)
        else:
            Y = _project_newton(X, groups, spec.radius, tol, max_sweeps)
    elif method == "averaged":
        Y = _project_averaged(X, groups, spec.radius, tol, max_sweeps)
    else:
        raise ConfigError(f"unknown projection method {method!r}")
    return Y[0] if single else Y


def prox_rows(X, groups: GroupStructure, t: float, tol: float = 1e-13,
              max_sweeps: int = 100_000, method: str = "newton", state: dict | None = None):
    """Row-wise prox of ``t * ||.||_G`` together with the projection part.

    Returns ``(U, P)`` with ``U = X - P`` and ``P`` the projection of each row
    onto ``tB``. Since ``P / t`` is a subgradient of the norm at ``U``, the
    norm of each row of ``U`` equals ``<P_row, U_row> / t``.

    ``state`` is a dict reused across calls on same-shaped input to warm-start
    Dykstra's correction terms.
    """
    if not t > 0:
        raise ConfigError(f"prox parameter must be positive, got {t}")
    X = np.asarray(X, dtype=float)
    if not groups.overlapping:
        # closed-form shrinkage; U is computed directly so that singletons
        # reproduce soft-thresholding bit for bit
        X2, single = _as_rows(X, groups.n_tasks)
        if all(G.size == 1 for G in groups.groups):
            U = soft_threshold(X2, t)
        else:
            U = np.empty_like(X2)
            for G in groups.groups:
                U[:, G] = block_soft_threshold(X2[:, G], t)
        if single:
            X2, U = X2[0], U[0]
        return U, X2 - U
    elif method == "dykstra" and state is not None:
        groups = maximal_groups(groups)
        X2, single = _as_rows(X, groups.n_tasks)
        P0 = state.get("corrections")
        if P0 is not None and P0.shape[0] != X2.shape[0]:
            P0 = None
        P, state["corrections"] = _project_dykstra(X2, groups, t, tol, max_sweeps, P0)
        P = P[0] if single else P
    else:
        P = project_intersection(X, GroupBallSpec(groups, t), tol=tol,
                                 max_sweeps=max_sweeps, method=method)
    return X - P, P


def prox_group_norm(x, groups: GroupStructure, t: float, tol: float = 1e-13,
                    max_sweeps: int = 100_000, method: str = "newton") -> np.ndarray:
    """``argmin_u ||u||_G + ||u - x||^2 / (2t)`` computed as ``x - proj_{tB}(x)``."""
    x = np.asarray(x, dtype=float)
    U, _ = prox_rows(x, groups, t, tol=tol, max_sweeps=max_sweeps, method=method)
    return U


def _group_norm_newton(x, groups, tol, max_iter=200):
    """Latent decomposition from the multiplier dual, solved by projected Newton.

    ``||x||_G = min_{lam >= 0} 1/2 sum x^2 / c + 1/2 sum lam`` with
    ``c = M' lam``. Any ``lam`` gives the feasible split
    ``w_G = lam_G * a_G`` (``a = x / c``), an upper bound, and ``a`` shrunk
    coordinate-wise into the dual ball gives a lower bound.

    Groups are first restricted to the support of ``x``, which leaves the
    norm unchanged, and coordinates whose total magnitude is below
    ``tol / 4`` are set aside. Their l1 mass bounds their contribution.

    Returns ``(value, blocks)`` with one block per group of ``groups``.
    """
    n = x.size
    order = np.argsort(np.abs(x))
    drop = order[np.cumsum(np.abs(x[order])) <= 0.25 * tol]
    kept = x.copy()
    kept[drop] = 0.0
    supp = np.flatnonzero(kept)
    # restricted groups; duplicates and subsets carry no weight at the optimum
    restricted = [np.intersect1d(G, supp) for G in groups.groups]
    keys = [frozenset(R.tolist()) for R in restricted]
    owners = {}
    for j, key in enumerate(keys):
        if key and key not in owners and not any(key < other for other in keys):
            owners[key] = j
    active = list(owners.values())
    pos = np.full(n, -1)
    pos[supp] = np.arange(supp.size)
    M = np.zeros((len(active), supp.size))
    for r, j in enumerate(active):
        M[r, pos[restricted[j]]] = 1.0
    xs = kept[supp]
    x2 = xs * xs

    def state(lam):
        c = M.T @ lam
        with np.errstate(divide="ignore", invalid="ignore"):
            a = xs / c
        if not np.all(np.isfinite(a)):
            return None
        sq = M @ (a * a)
        na = np.sqrt(sq)
        shrink = np.min(np.where(M > 0, np.minimum(1.0, 1.0 / np.maximum(na, 1e-300))[:, None],
                                 1.0), axis=0)
        gap = float(lam @ na) - float((a * shrink) @ xs)
        return c, a, 0.5 * (sq - 1.0), gap

    def ascent(lam, lam_new):
        # decrease of the dual objective, written to avoid cancellation
        c, c_new = M.T @ lam, M.T @ lam_new
        with np.errstate(divide="ignore", invalid="ignore"):
            v = (0.5 * float(np.sum(x2 * (c_new - c) / (c * c_new)))
                 - 0.5 * float(np.sum(lam_new - lam)))
        return v if np.isfinite(v) else -np.inf

    def proj_grad(lam, grad):
        return float(np.max(np.abs(np.where(lam > 0, grad, np.maximum(grad, 0.0)))))

    extra = float(np.abs(x[drop]).sum())
    depth = np.max(M * M.sum(axis=0), axis=1)
    lam = np.sqrt(M @ x2) / depth
    c, a, grad, gap = state(lam)
    for _ in range(max_iter):
        if gap + extra <= tol:
            break
        free = (lam > 0) | (grad > 0)
        curv = x2 / c ** 3
        H = (M[free] * curv) @ M[free].T
        # Jacobi scaling keeps multipliers of very different size resolvable
        dg = np.sqrt(np.maximum(np.diag(H), 1e-300))
        step = np.zeros_like(lam)
        step[free] = np.linalg.lstsq(H / np.outer(dg, dg), grad[free] / dg, rcond=None)[0] / dg
        lam_new = np.maximum(lam + step, 0.0)
        trial = state(lam_new)
        # the full step is judged on the gradient, which stays accurate when
        # objective changes fall below rounding
        if (trial is None or not proj_grad(lam_new, trial[2]) <= 0.5 * proj_grad(lam, grad)
                or ascent(lam, lam_new) < -1e-13):
            lam_new = _arc_search(ascent, lam, grad, step)
            if lam_new is None:
                diag = (M * M) @ curv
                lam_new = _arc_search(ascent, lam, grad, grad / np.maximum(diag, 1e-300))
            if lam_new is None:
                break
            trial = state(lam_new)
            if trial is None:
                break
        lam = lam_new
        c, a, grad, gap = trial
    if not gap + extra <= tol:
        raise ConvergenceError(f"Newton group norm stopped with gap {gap + extra:.3e}",
                               residual=gap + extra)
    blocks = [np.zeros(G.size) for G in groups.groups]
    full = np.zeros(n)
    for r, j in enumerate(active):
        full[:] = 0.0
        full[supp] = lam[r] * a * M[r]
        blocks[j] = full[groups.groups[j]].copy()
    for i in drop:
        j = next(j for j, G in enumerate(groups.groups) if i in G)
        blocks[j][np.searchsorted(groups.groups[j], i)] += x[i]
    return float(sum(np.linalg.norm(b) for b in blocks)), blocks


def _group_norm_admm(x, groups, tol, max_iter, rho=1.0):
    """Latent decomposition by ADMM on per-group copies of the coordinates.

    ``w`` (group blocks) takes the block soft-threshold step, ``v`` the
    projection onto ``{sum of copies of coordinate i = x_i}``. ``v`` is
    feasible at every step, giving an upper bound; ``-rho * u`` rescaled into
    the dual ball gives a lower bound ``<a, x>``. Stops on a certified gap.
    ``rho`` is rebalanced every 10 iterations from the residual ratio.
    """
    idx, starts, sizes = groups.layout
    counts = groups.counts[idx].astype(float)
    n = x.size

    def block_norms(v):
        return np.sqrt(np.add.reduceat(v * v, starts))

    v = x[idx] / counts
    u = np.zeros_like(v)
    best_upper, best_v = float(np.sum(block_norms(v))), v.copy()
    best_lower = 0.0
    gap = np.inf
    for it in range(max_iter):
        q = v - u
        nq = np.repeat(block_norms(q), sizes)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(nq > 1.0 / rho, 1.0 - 1.0 / (rho * nq), 0.0) * q
        z = w + u
        resid = x - np.bincount(idx, weights=z, minlength=n)
        v_prev = v
        v = z + resid[idx] / counts
        u = u + w - v

        upper = float(np.sum(block_norms(v)))
        if upper < best_upper:
            best_upper, best_v = upper, v.copy()
        a = np.bincount(idx, weights=-rho * u, minlength=n) / groups.counts
        amax = float(np.max(block_norms(a[idx])))
        if amax > 0:
            lower = float(a @ x) / max(1.0, amax)
            best_lower = max(best_lower, lower)
        gap = best_upper - best_lower
        if gap <= tol:
            return best_upper, best_v, idx, starts
        if it % 10 == 9:
            primal = np.linalg.norm(w - v)
            dual = rho * np.linalg.norm(v - v_prev)
            if primal > 10 * dual:
                rho, u = 2 * rho, u / 2
            elif dual > 10 * primal:
                rho, u = rho / 2, u * 2
    raise ConvergenceError(
        f"group norm decomposition did not reach gap {tol:.1e} in {max_iter} "
        f"iterations (gap {gap:.3e})", best=best_upper, residual=gap)


def group_norm(x, groups: GroupStructure, tol: float = 1e-10,
               max_iter: int = 200_000):
    """Latent group norm of ``x`` and an optimal decomposition.

    Disjoint groups use the closed form ``sum_G ||x_G||_2``. Overlapping
    groups are solved iteratively until the primal-dual gap is below
    ``tol * ||x||_2``.

    Returns
    -------
    value : float
    decomposition : GroupNormDecomposition
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    n = groups.n_tasks
    if x.size != n:
        raise DimensionError(f"vector length {x.size} does not match the {n} grouped indices")
    # groups contained in another never need a share of x
    reduced = maximal_groups(groups)
    slot = {tuple(G.tolist()): j for j, G in enumerate(groups.groups)}

    def expand(blocks):
        parts = [np.zeros(n) for _ in groups.groups]
        for G, block in zip(reduced.groups, blocks):
            parts[slot[tuple(G.tolist())]][G] = block
        return tuple(parts)

    if not reduced.overlapping:
        value = float(sum(np.linalg.norm(x[G]) for G in reduced.groups))
        return value, GroupNormDecomposition(expand([x[G] for G in reduced.groups]), value)
    scale = float(np.linalg.norm(x))
    if scale == 0.0:
        return 0.0, GroupNormDecomposition(expand([np.zeros(G.size) for G in reduced.groups]), 0.0)
    try:
        value, blocks = _group_norm_newton(x / scale, reduced, tol, min(200, max_iter))
    except ConvergenceError:
        # rare degenerate multiplier geometry; the splitting method is slower but steady
        try:
            value, v, idx, starts = _group_norm_admm(x / scale, reduced, tol, max_iter)
        except ConvergenceError as err:
            raise ConvergenceError(str(err), best=err.best * scale, residual=err.residual) from None
        blocks = [v[s:s + G.size] for G, s in zip(reduced.groups, starts)]
    value *= scale
    blocks = [b * scale for b in blocks]
    return value, GroupNormDecomposition(expand(blocks), value)


def group_norm_rows(S, groups: GroupStructure, tol: float = 1e-10) -> float:
    """Sum of the latent group norms of the rows of ``S``."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[1] != groups.n_tasks:
        raise DimensionError(f"S has shape {S.shape}, expected (k, {groups.n_tasks})")
    groups = maximal_groups(groups)
    if not groups.overlapping:
        idx, starts, _ = groups.layout
        B = S[:, idx]
        return float(np.sqrt(np.add.reduceat(B * B, starts, axis=1)).sum())
    return float(sum(group_norm(row, groups, tol=tol)[0] for row in S))
