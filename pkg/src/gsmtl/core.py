"""Domain types, losses, gradients and the full multi-task objective.

Conventions
-----------
Tasks and groups are 0-based internally. Files on disk use 1-based task ids
and are converted at the I/O boundary (see :mod:`gsmtl.datagen`).

The model is ``W = L @ S`` with ``L`` of shape ``(d, k)`` and ``S`` of shape
``(k, T)``. The objective is::

    sum_t sum_i loss(y_i^t, x_i^t' L s^t) + mu * sum_r ||S[r, :]||_G + lam * ||L||_F^2

where the row sum runs over the ``k`` rows of ``S``.
"""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class GSMTLError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GSMTLError, ValueError):
    """Inconsistent array shapes."""


class DataError(GSMTLError, ValueError):
    """Invalid dataset contents (labels, empty tasks, non-finite values)."""


class ConfigError(GSMTLError, ValueError):
    """Invalid hyperparameters, groups or run configuration."""


class ConvergenceError(GSMTLError, RuntimeError):
    """An iterative routine hit its cap or broke a descent invariant.

    ``best`` carries the best value or last iterate found, ``residual`` the
    last measured residual.
    """

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class ProblemKind(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"

    @classmethod
    def parse(cls, value) -> "ProblemKind":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower()
        if v in ("regression", "reg"):
            return cls.REGRESSION
        if v in ("classification", "binary", "binaryclassification", "clf"):
            return cls.CLASSIFICATION
        raise ConfigError(f"unknown problem kind {value!r}")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultiTaskDataset:
    """A collection of ``T`` tasks sharing ``d`` features.

    Parameters
    ----------
    tasks : sequence of (X, y)
        ``X`` has shape ``(n_t, d)`` and ``y`` shape ``(n_t,)``.
    kind : ProblemKind or str
        ``regression`` or ``classification`` (labels in {-1, +1}).
    """

    tasks: tuple
    kind: ProblemKind = ProblemKind.REGRESSION

    def __post_init__(self):
        kind = ProblemKind.parse(self.kind)
        if len(self.tasks) == 0:
            raise DataError("dataset has no tasks")
        tasks = []
        d = None
        for t, (X, y) in enumerate(self.tasks):
            X = _frozen(X)
            y = _frozen(y).reshape(-1)
            if X.ndim != 2:
                raise DimensionError(f"task {t}: X must be 2-D, got ndim={X.ndim}")
            if X.shape[0] < 1:
                raise DataError(f"task {t}: no samples")
            if X.shape[0] != y.shape[0]:
                raise DimensionError(
                    f"task {t}: X has {X.shape[0]} rows but y has {y.shape[0]} entries")
            if d is None:
                d = X.shape[1]
            elif X.shape[1] != d:
                raise DimensionError(
                    f"task {t}: feature count d={X.shape[1]} differs from d={d}")
            if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
                raise DataError(f"task {t}: non-finite values")
            if kind is ProblemKind.CLASSIFICATION and not np.all(np.abs(y) == 1.0):
                bad = int(np.flatnonzero(np.abs(y) != 1.0)[0])
                raise DataError(
                    f"task {t}, sample {bad}: label {y[bad]!r} not in {{-1, +1}}")
            tasks.append((X, y))
        object.__setattr__(self, "tasks", tuple(tasks))
        object.__setattr__(self, "kind", kind)
        # stacked views used by the vectorised loss/gradient code
        sizes = np.array([X.shape[0] for X, _ in tasks])
        task_index = np.repeat(np.arange(len(tasks)), sizes)
        task_index.setflags(write=False)
        object.__setattr__(self, "_X", _frozen(np.vstack([X for X, _ in tasks])))
        object.__setattr__(self, "_y", _frozen(np.concatenate([y for _, y in tasks])))
        object.__setattr__(self, "_task_index", task_index)
        object.__setattr__(self, "_sizes", sizes)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_features(self) -> int:
        return self.tasks[0][0].shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return self._sizes

    @property
    def X_all(self) -> np.ndarray:
        return self._X

    @property
    def y_all(self) -> np.ndarray:
        return self._y

    @property
    def task_index(self) -> np.ndarray:
        return self._task_index

    def grams(self):
        """Per-task ``(X'X, X'y)`` pairs, computed once and cached."""
        cached = self.__dict__.get("_grams")
        if cached is None:
            cached = tuple((X.T @ X, X.T @ y) for X, y in self.tasks)
            object.__setattr__(self, "_grams", cached)
        return cached

    def subset(self, indices: Sequence[np.ndarray]) -> "MultiTaskDataset":
        """Row subset of every task; ``indices[t]`` selects rows of task ``t``."""
        return MultiTaskDataset(
            tuple((X[idx], y[idx]) for (X, y), idx in zip(self.tasks, indices)),
            self.kind)

    def map_features(self, fn: Callable[[np.ndarray], np.ndarray]) -> "MultiTaskDataset":
        return MultiTaskDataset(tuple((fn(X), y) for X, y in self.tasks), self.kind)


@dataclass(frozen=True, eq=False)
class GroupStructure:
    """Possibly overlapping groups of task indices covering ``0..T-1``."""

    groups: tuple
    n_tasks: int

    def __post_init__(self):
        T = int(self.n_tasks)
        if T < 1:
            raise ConfigError("n_tasks must be >= 1")
        if len(self.groups) < 1:
            raise ConfigError("at least one group is required")
        groups = []
        for j, G in enumerate(self.groups):
            G = np.unique(np.asarray(list(G), dtype=int))
            if G.size == 0:
                raise ConfigError(f"group {j} is empty")
            if G.min() < 0 or G.max() >= T:
                raise ConfigError(f"group {j} has an index outside 0..{T - 1}")
            G.setflags(write=False)
            groups.append(G)
        counts = np.zeros(T, dtype=int)
        for G in groups:
            counts[G] += 1
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0).tolist()
            raise ConfigError(f"groups do not cover tasks {missing}")
        counts.setflags(write=False)
        object.__setattr__(self, "groups", tuple(groups))
        object.__setattr__(self, "n_tasks", T)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "_overlapping", bool(np.any(counts > 1)))

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def layout(self):
        """``(idx, starts, sizes)`` of the concatenated group index arrays."""
        cached = self.__dict__.get("_layout")
        if cached is None:
            sizes = np.array([G.size for G in self.groups])
            starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
            cached = (np.concatenate(self.groups), starts, sizes)
            object.__setattr__(self, "_layout", cached)
        return cached

    @property
    def overlapping(self) -> bool:
        return self._overlapping

    @classmethod
    def singletons(cls, T: int) -> "GroupStructure":
        return cls(tuple([t] for t in range(T)), T)

    @classmethod
    def single(cls, T: int) -> "GroupStructure":
        return cls((list(range(T)),), T)

    @classmethod
    def from_labels(cls, labels) -> "GroupStructure":
        """Disjoint groups from a per-task cluster label vector."""
        labels = np.asarray(labels)
        uniq = np.unique(labels)
        return cls(tuple(np.flatnonzero(labels == u) for u in uniq), labels.size)

    def permuted(self, perm) -> "GroupStructure":
        """Groups after reordering tasks so that new task ``i`` is old ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return GroupStructure(tuple(inv[G] for G in self.groups), self.n_tasks)

    def as_lists(self) -> list:
        return [G.tolist() for G in self.groups]


@dataclass(frozen=True, eq=False)
class LatentModel:
    """Factored task weights ``W = L @ S``."""

    L: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        L = _frozen(self.L)
        S = _frozen(self.S)
        if L.ndim != 2 or S.ndim != 2:
            raise DimensionError("L and S must be 2-D")
        if L.shape[1] != S.shape[0]:
            raise DimensionError(
                f"latent dimension mismatch: L has k={L.shape[1]} columns, "
                f"S has k={S.shape[0]} rows")
        if L.shape[1] < 1:
            raise DimensionError("latent dimension k must be >= 1")
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(S))):
            raise DataError("model has non-finite entries")
        if L.shape[1] > S.shape[1]:
            raise DimensionError(f"k={L.shape[1]} exceeds T={S.shape[1]}")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "S", S)

    @property
    def k(self) -> int:
        return self.L.shape[1]

    @property
    def n_tasks(self) -> int:
        return self.S.shape[1]

    @property
    def n_features(self) -> int:
        return self.L.shape[0]

    @property
    def W(self) -> np.ndarray:
        return self.L @ self.S


@dataclass(frozen=True)
class HyperParams:
    """Regularisation weights, latent dimension and stopping rules.

    ``mu`` weights the row group norm of ``S`` and ``lam`` the squared
    Frobenius norm of ``L``.
    """

    mu: float = 0.1
    lam: float = 0.1
    k: int = 2
    outer_tol: float = 1e-4
    outer_max_iter: int = 100
    inner_tol: float = 1e-8
    inner_max_iter: int = 1000

    def __post_init__(self):
        if not (self.mu >= 0 and self.lam >= 0):
            raise ConfigError("mu and lam must be non-negative")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError("k must be a positive integer")
        if not (self.outer_tol > 0 and self.inner_tol > 0):
            raise ConfigError("tolerances must be positive")
        if self.outer_max_iter < 1 or self.inner_max_iter < 1:
            raise ConfigError("iteration caps must be >= 1")


@dataclass
class FitReport:
    objective_trace: list
    converged: bool
    outer_iterations: int
    wall_time: float
    notes: list = field(default_factory=list)
    train_metrics: list = field(default_factory=list)

    def to_dict(self, timing: bool = True) -> dict:
        """Plain-data view; ``timing=False`` drops the wall time for reproducible files."""
        out = {
            "objective_trace": [float(v) for v in self.objective_trace],
            "converged": bool(self.converged),
            "outer_iterations": int(self.outer_iterations),
            "notes": list(self.notes),
            "train_metrics": [float(v) for v in self.train_metrics],
        }
        if timing:
            out["wall_time"] = float(self.wall_time)
        return out


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def check_model_data(model: LatentModel, data: MultiTaskDataset):
    if model.n_features != data.n_features:
        raise DimensionError(
            f"feature dimension mismatch: model d={model.n_features}, "
            f"data d={data.n_features}")
    if model.n_tasks != data.n_tasks:
        raise DimensionError(
            f"task count mismatch: model T={model.n_tasks}, data T={data.n_tasks}")


# --------------------------------------------------------------------------
# losses


def predict(model: LatentModel, task: int, x) -> float:
    """Prediction ``s_t' L' x`` of ``task`` (0-based) at feature vector ``x``.

    For classification the sign is the class decision and
    ``1 / (1 + exp(-z))`` the probability of the positive class.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if not 0 <= task < model.n_tasks:
        raise DimensionError(f"task index {task} outside 0..{model.n_tasks - 1}")
    if x.shape[0] != model.n_features:
        raise DimensionError(
            f"x has length {x.shape[0]}, expected d={model.n_features}")
    return float(model.S[:, task] @ (model.L.T @ x))


def _check_labels(kind: ProblemKind, y):
    if kind is ProblemKind.CLASSIFICATION and not np.all(np.abs(y) == 1.0):
        raise DataError("classification labels must be -1 or +1")


def losses(kind, z, y) -> np.ndarray:
    """Elementwise loss; the logistic branch is overflow-safe."""
    kind = ProblemKind.parse(kind)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if kind is ProblemKind.REGRESSION:
        return (z - y) ** 2
    _check_labels(kind, y)
    m = y * z
    return np.log1p(np.exp(-np.abs(m))) + np.maximum(0.0, -m)


def loss_value(kind, z: float, y: float) -> float:
    """Loss of a single prediction ``z`` against label ``y``."""
    return float(losses(kind, z, y))


def loss_derivative(kind, z, y) -> np.ndarray:
    """Derivative of the loss in the prediction argument."""
    kind = ProblemKind.parse(kind)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if kind is ProblemKind.REGRESSION:
        return 2.0 * (z - y)
    # -y / (1 + exp(y z)) written via a stable sigmoid of -m
    m = y * z
    e = np.exp(-np.abs(m))
    sig_neg = np.where(m >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return -y * sig_neg


def predictions(L: np.ndarray, S: np.ndarray, data: MultiTaskDataset) -> np.ndarray:
    """Stacked predictions for every sample of every task."""
    Z = data.X_all @ L
    return np.einsum("nk,kn->n", Z, S[:, data.task_index])


def data_loss(L, S, data: MultiTaskDataset) -> float:
    return float(np.sum(losses(data.kind, predictions(L, S, data), data.y_all)))


def _check_arrays(L, S, data):
    if L.shape[0] != data.n_features or S.shape[1] != data.n_tasks or L.shape[1] != S.shape[0]:
        raise DimensionError(
            f"shapes L{L.shape}, S{S.shape} inconsistent with "
            f"d={data.n_features}, T={data.n_tasks}")


def grad_S_arrays(L, S, data: MultiTaskDataset) -> np.ndarray:
    _check_arrays(L, S, data)
    Z = data.X_all @ L
    z = np.einsum("nk,kn->n", Z, S[:, data.task_index])
    r = loss_derivative(data.kind, z, data.y_all)
    G = np.zeros_like(S, dtype=float)
    np.add.at(G.T, data.task_index, Z * r[:, None])
    return G


def grad_L_arrays(L, S, data: MultiTaskDataset, lam: float = 0.0) -> np.ndarray:
    _check_arrays(L, S, data)
    St = S[:, data.task_index].T
    z = np.einsum("nk,nk->n", data.X_all @ L, St)
    r = loss_derivative(data.kind, z, data.y_all)
    return data.X_all.T @ (r[:, None] * St) + 2.0 * lam * L


def grad_S(model: LatentModel, data: MultiTaskDataset) -> np.ndarray:
    """Gradient of the data loss with respect to ``S`` (shape ``(k, T)``).

    Column ``t`` depends on task ``t``'s samples only.
    """
    check_model_data(model, data)
    return grad_S_arrays(model.L, model.S, data)


def grad_L(model: LatentModel, data: MultiTaskDataset, hp: HyperParams) -> np.ndarray:
    """Gradient of data loss plus ``lam * ||L||_F^2`` with respect to ``L``."""
    check_model_data(model, data)
    return grad_L_arrays(model.L, model.S, data, hp.lam)


def objective(model: LatentModel, data: MultiTaskDataset, groups: GroupStructure,
              hp: HyperParams, tol: float = 1e-11) -> float:
    """Full objective: data loss + mu * row group norm of S + lam * ||L||_F^2."""
    from .groupnorm import group_norm_rows

    check_model_data(model, data)
    if groups.n_tasks != data.n_tasks:
        raise DimensionError(
            f"groups cover T={groups.n_tasks} tasks, data has T={data.n_tasks}")
    value = data_loss(model.L, model.S, data)
    if hp.mu > 0:
        value += hp.mu * group_norm_rows(model.S, groups, tol=tol)
    if hp.lam > 0:
        value += hp.lam * float(np.sum(model.L ** 2))
    return value


# --------------------------------------------------------------------------
# basis expansion


@dataclass(frozen=True)
class BasisSpec:
    """Feature map applied to every task's design before fitting.

    ``kind`` is ``identity``, ``poly2`` (features followed by all products
    ``x_i x_j`` with ``i <= j``) or ``maps`` (one callable per column).
    """

    kind: str = "identity"
    maps: tuple = ()


def basis_expand(X, basis: BasisSpec) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DimensionError("X must be 2-D")
    n, d = X.shape
    if basis.kind == "identity":
        out = X.copy()
    elif basis.kind == "poly2":
        iu, ju = np.triu_indices(d)
        out = np.hstack([X, X[:, iu] * X[:, ju]])
    elif basis.kind == "maps":
        if len(basis.maps) != d:
            raise DimensionError(f"{len(basis.maps)} maps given for d={d} columns")
        # invalid values are reported below with their position
        with np.errstate(all="ignore"):
            out = np.column_stack([np.asarray(f(X[:, j]), dtype=float).reshape(n)
                                   for j, f in enumerate(basis.maps)]) if d else X.copy()
    else:
        raise ConfigError(f"unknown basis kind {basis.kind!r}")
    bad = np.argwhere(~np.isfinite(out))
    if bad.size:
        i, j = bad[0]
        raise DataError(f"basis expansion produced a non-finite value at row {i}, column {j}")
    return out


def rmse(residuals) -> float:
    residuals = np.asarray(residuals, dtype=float)
    return math.sqrt(float(np.mean(residuals ** 2)))
