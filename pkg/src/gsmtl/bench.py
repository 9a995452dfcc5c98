"""Baselines as group-structure specialisations, grid search and benchmark tables.

The three multi-task methods fit the same objective and differ only in the
task groups used by the row norm of ``S``:

* ``GO_MTL``: singleton groups, so the row norm is the l1 norm;
* ``MTL_FEAT``: one group holding every task, so the penalty is the l2,1 row norm;
* ``GS_MTL``: user-supplied (possibly overlapping) groups.

``STL`` fits an independent ridge or logistic model per task.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    ConfigError, DataError, FitReport, GroupStructure, GSMTLError, LatentModel,
    MultiTaskDataset, ProblemKind, predictions,
)
from .datagen import split_dataset
from .solver import SolverConfig, fit, stl_weights

logger = logging.getLogger(__name__)

POWERS_OF_TEN = tuple(10.0 ** p for p in range(-5, 2))


class MethodKind(str, enum.Enum):
    STL = "STL"
    MTL_FEAT = "MTL_FEAT"
    GO_MTL = "GO_MTL"
    GS_MTL = "GS_MTL"

    @classmethod
    def parse(cls, value) -> "MethodKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown method {value!r}; expected one of "
                              f"{', '.join(m.value for m in cls)}") from None


@dataclass(frozen=True)
class MethodSpec:
    """A method and, for ``GS_MTL``, its task groups."""

    kind: MethodKind
    groups: GroupStructure | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MethodKind.parse(self.kind))
        if self.kind is MethodKind.GS_MTL and self.groups is None:
            raise ConfigError("GS_MTL requires an explicit GroupStructure")

    def groups_for(self, T: int) -> GroupStructure | None:
        if self.kind is MethodKind.GO_MTL:
            return GroupStructure.singletons(T)
        if self.kind is MethodKind.MTL_FEAT:
            return GroupStructure.single(T)
        if self.kind is MethodKind.GS_MTL:
            if self.groups.n_tasks != T:
                raise ConfigError(f"groups cover {self.groups.n_tasks} tasks, data has {T}")
            return self.groups
        return None


@dataclass(frozen=True)
class Predictor:
    """Per-task linear predictors ``W[:, t]`` with the fitted model, if any."""

    kind: MethodKind
    W: np.ndarray
    model: LatentModel | None = None
    report: FitReport | None = None

    def predict(self, data: MultiTaskDataset) -> np.ndarray:
        if data.n_tasks != self.W.shape[1] or data.n_features != self.W.shape[0]:
            raise ConfigError(f"predictor is {self.W.shape}, data has d={data.n_features}, "
                              f"T={data.n_tasks}")
        return np.einsum("nd,dn->n", data.X_all, self.W[:, data.task_index])


class _InitCache:
    """Single-task weights of one training set, reused for every ``k``."""

    def __init__(self, data: MultiTaskDataset, reg: float):
        self.data, self.reg = data, reg
        self._svd = None

    def model(self, k: int) -> LatentModel:
        if self._svd is None:
            self._svd = np.linalg.svd(stl_weights(self.data, self.reg), full_matrices=False)
        U, sv, Vt = self._svd
        if k > min(self.data.n_features, self.data.n_tasks):
            raise ConfigError(f"k={k} exceeds min(d, T)")
        return LatentModel(U[:, :k], sv[:k, None] * Vt[:k])


def fit_method(spec: MethodSpec, data: MultiTaskDataset, config: SolverConfig = SolverConfig(),
               init: LatentModel | None = None) -> Predictor:
    """Fit one method; ``STL`` uses ``config.hp.lam`` as its l2 strength."""
    if spec.kind is MethodKind.STL:
        return Predictor(spec.kind, stl_weights(data, config.hp.lam))
    groups = spec.groups_for(data.n_tasks)
    model, report = fit(data, groups, config, init=init)
    return Predictor(spec.kind, model.W, model, report)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count one half)."""
    from scipy.stats import rankdata

    scores, labels = np.asarray(scores, float), np.asarray(labels)
    pos = labels > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate(predictor, split: MultiTaskDataset, kind=None) -> float:
    """Pooled test error over all samples of all tasks.

    RMSE for regression; mean 0/1 error for classification with ``sign(0)``
    counted as ``+1``. ``predictor`` may be a :class:`Predictor` or a ``d x T``
    weight matrix.
    """
    if split.X_all.shape[0] == 0:
        raise DataError("cannot evaluate on an empty split")
    kind = split.kind if kind is None else ProblemKind.parse(kind)
    if isinstance(predictor, Predictor):
        z = predictor.predict(split)
    else:
        W = np.asarray(predictor, dtype=float)
        z = np.einsum("nd,dn->n", split.X_all, W[:, split.task_index])
    y = split.y_all
    if kind is ProblemKind.REGRESSION:
        return float(np.sqrt(np.mean((z - y) ** 2)))
    return float(np.mean(np.where(z >= 0, 1.0, -1.0) != y))


# --------------------------------------------------------------------------
# grid search


def default_k_grid(T: int, d: int) -> tuple:
    ks = {2, math.ceil(T / 3), math.ceil(T / 2)}
    return tuple(sorted(k for k in ks if 1 <= k <= min(T, d))) or (1,)


@dataclass(frozen=True)
class GridSearchSpec:
    """Candidate values of ``mu``, ``lam`` and ``k``.

    ``k_grid=None`` means ``{2, ceil(T/3), ceil(T/2)}`` restricted to
    ``k <= min(d, T)``.
    """

    mu_grid: tuple = POWERS_OF_TEN
    lambda_grid: tuple = POWERS_OF_TEN
    k_grid: tuple | None = None

    def __post_init__(self):
        for name in ("mu_grid", "lambda_grid"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals or min(vals) < 0 or not all(math.isfinite(v) for v in vals):
                raise ConfigError(f"{name} must be a non-empty list of finite values >= 0")
            object.__setattr__(self, name, tuple(sorted(set(vals))))
        if self.k_grid is not None:
            ks = tuple(int(k) for k in self.k_grid)
            if not ks or min(ks) < 1:
                raise ConfigError("k_grid must be a non-empty list of positive integers")
            object.__setattr__(self, "k_grid", tuple(sorted(set(ks))))

    def ks(self, T: int, d: int) -> tuple:
        return default_k_grid(T, d) if self.k_grid is None else self.k_grid


@dataclass
class GridSearchResult:
    """Outcome of one grid search.

    ``cells`` lists ``(mu, lam, k, validation_error)``; STL cells carry
    ``mu = k = None``. Failed fits score ``inf``.
    """

    method: MethodKind
    best: dict
    val_error: float
    test_error: float
    cells: list
    seed: int
    report: FitReport | None = None
    auc: float | None = None
    notes: list = field(default_factory=list)

    def to_dict(self, timing: bool = True) -> dict:
        return {
            "method": self.method.value, "best": self.best, "val_error": self.val_error,
            "test_error": self.test_error, "seed": self.seed, "auc": self.auc,
            "cells": [list(c) for c in self.cells], "notes": list(self.notes),
            "report": None if self.report is None else self.report.to_dict(timing),
        }


def grid_search(spec: MethodSpec, data, grid: GridSearchSpec = GridSearchSpec(), seed: int = 0,
                config: SolverConfig = SolverConfig(), splits=None) -> GridSearchResult:
    """Select hyperparameters on the validation split, refit on train, score test.

    Parameters
    ----------
    spec : MethodSpec
    data : MultiTaskDataset
        Full dataset; split 60/20/20 per task with ``seed`` unless ``splits``
        gives ``(train, val, test)``.
    grid : GridSearchSpec
    seed : int
    config : SolverConfig
        Solver settings; its ``mu``, ``lam`` and ``k`` are overridden per cell.

    Notes
    -----
    Ties in validation error go to the smallest ``mu``, then ``lam``, then ``k``.
    A cell whose fit raises scores ``inf`` and the search continues.
    """
    train, val, test = splits if splits is not None else split_dataset(data, seed=seed)
    T, d = train.n_tasks, train.n_features
    notes = []
    if spec.kind is MethodKind.STL:
        combos = [(None, lam, None) for lam in grid.lambda_grid]
    else:
        combos = [(mu, lam, k) for mu in grid.mu_grid for lam in grid.lambda_grid
                  for k in grid.ks(T, d)]
    cache = _InitCache(train, config.stl_reg)
    cells, fitted = [], {}
    for mu, lam, k in combos:
        try:
            cfg = config.with_hp(lam=lam) if mu is None else config.with_hp(mu=mu, lam=lam, k=k)
            init = None if k is None else cache.model(k)
            pred = fit_method(spec, train, cfg, init=init)
            err = evaluate(pred, val)
            fitted[(mu, lam, k)] = pred
        except GSMTLError as exc:
            notes.append(f"cell mu={mu} lam={lam} k={k} failed: {exc}")
            logger.info("%s: %s", spec.kind.value, notes[-1])
            err = math.inf
        cells.append((mu, lam, k, err))
    # combos are generated in (mu, lam, k) ascending order, so the first
    # minimiser already respects the tie-break rule
    best_i = min(range(len(cells)), key=lambda i: (cells[i][3], i))
    mu, lam, k, val_err = cells[best_i]
    best = {"mu": mu, "lam": lam, "k": k}
    pred = fitted.get((mu, lam, k))
    if pred is None:
        notes.append("every cell failed")
        return GridSearchResult(spec.kind, best, math.inf, math.inf, cells, seed, notes=notes)
    test_err = evaluate(pred, test)
    area = auc(pred.predict(test), test.y_all) if test.kind is ProblemKind.CLASSIFICATION else None
    return GridSearchResult(spec.kind, best, val_err, test_err, cells, seed, pred.report, area, notes)


# --------------------------------------------------------------------------
# benchmark


@dataclass(frozen=True)
class DatasetSource:
    """A named dataset; ``make(seed)`` returns ``(data, groups)``.

    ``groups`` are the task groups handed to ``GS_MTL``.
    """

    name: str
    make: Callable[[int], tuple]

    @classmethod
    def fixed(cls, name: str, data: MultiTaskDataset, groups: GroupStructure) -> "DatasetSource":
        return cls(name, lambda seed: (data, groups))


@dataclass
class ExperimentResult:
    """Mean and standard deviation of test error per (dataset, method)."""

    methods: list
    datasets: list
    seeds: list
    runs: dict
    notes: list = field(default_factory=list)

    def errors(self, dataset: str, method) -> np.ndarray:
        method = MethodKind.parse(method).value
        return np.array([r.test_error for r in self.runs[dataset][method]], dtype=float)

    def mean(self, dataset: str, method) -> float:
        return float(np.mean(self.errors(dataset, method)))

    def std(self, dataset: str, method) -> float:
        errs = self.errors(dataset, method)
        if not np.all(np.isfinite(errs)):
            return float("nan")
        return float(np.std(errs))

    def to_dict(self) -> dict:
        table = {ds: {m: {"mean": self.mean(ds, m), "std": self.std(ds, m)} for m in self.methods}
                 for ds in self.datasets}
        return {
            "methods": list(self.methods), "datasets": list(self.datasets),
            "seeds": list(self.seeds), "table": table,
            # wall times are left out so that reruns serialise identically
            "runs": {ds: {m: [r.to_dict(timing=False) for r in rs] for m, rs in per.items()}
                     for ds, per in self.runs.items()},
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        def clean(obj):
            if isinstance(obj, float) and not math.isfinite(obj):
                return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [clean(v) for v in obj]
            return obj

        return json.dumps(clean(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        """Aligned table: one row per dataset, one ``mean +/- std`` column per method."""
        head = ["dataset"] + list(self.methods)
        rows = [head]
        for ds in self.datasets:
            row = [ds]
            for m in self.methods:
                mean, std = self.mean(ds, m), self.std(ds, m)
                row.append("inf" if not math.isfinite(mean) else f"{mean:.4f} +/- {std:.4f}")
            rows.append(row)
        widths = [max(len(r[j]) for r in rows) for j in range(len(head))]
        lines = ["  ".join(c.ljust(w) if j == 0 else c.rjust(w)
                           for j, (c, w) in enumerate(zip(r, widths))).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.notes:
            lines += ["", "notes:"] + [f"  {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def run_benchmark(datasets: Sequence[DatasetSource], methods: Sequence, grid: GridSearchSpec,
                  seeds: Sequence[int], config: SolverConfig = SolverConfig()) -> ExperimentResult:
    """Grid-searched test error for every dataset, method and seed.

    Each seed regenerates the dataset through ``make(seed)`` and draws its
    own split; every method sees the same split.
    """
    if not datasets or not methods or not seeds:
        raise ConfigError("run_benchmark needs at least one dataset, method and seed")
    kinds = [MethodKind.parse(m) for m in methods]
    result = ExperimentResult([k.value for k in kinds], [d.name for d in datasets],
                              list(seeds), {})
    for source in datasets:
        per = {k.value: [] for k in kinds}
        for seed in seeds:
            data, groups = source.make(seed)
            splits = split_dataset(data, seed=seed)
            for kind in kinds:
                spec = MethodSpec(kind, groups if kind is MethodKind.GS_MTL else None)
                try:
                    res = grid_search(spec, data, grid, seed, config, splits=splits)
                except GSMTLError as exc:
                    res = GridSearchResult(kind, {}, math.inf, math.inf, [], seed,
                                           notes=[f"failed: {exc}"])
                for note in res.notes:
                    result.notes.append(f"{source.name}/{kind.value}/seed {seed}: {note}")
                per[kind.value].append(res)
                logger.info("%s %s seed %d: test error %.4g", source.name, kind.value, seed,
                            res.test_error)
        result.runs[source.name] = per
    return result


# --------------------------------------------------------------------------
# support statistics


def support_similarity(S, groups: GroupStructure) -> tuple:
    """Mean Jaccard similarity of column supports within and across groups.

    Entries with ``|S| > 1e-6 * max|S|`` are in the support. Pairs of empty
    columns count as similarity 1.

    Returns
    -------
    within, across : float
        ``nan`` when no pair of that type exists.
    """
    S = np.asarray(S, dtype=float)
    if not np.all(np.isfinite(S)):
        raise DataError("S contains non-finite values")
    if groups.overlapping:
        raise ConfigError("support_similarity needs disjoint groups")
    if S.ndim != 2 or S.shape[1] != groups.n_tasks:
        raise ConfigError(f"S has shape {S.shape}, groups cover {groups.n_tasks} tasks")
    top = np.max(np.abs(S)) if S.size else 0.0
    if top == 0:
        raise DataError("S is identically zero; support is degenerate")
    B = np.abs(S) > 1e-6 * top
    inter = (B.T.astype(int) @ B.astype(int)).astype(float)
    size = B.sum(axis=0)
    union = size[:, None] + size[None, :] - inter
    jac = np.where(union > 0, inter / np.where(union > 0, union, 1), 1.0)
    label = np.empty(groups.n_tasks, dtype=int)
    for j, g in enumerate(groups.groups):
        label[g] = j
    iu = np.triu_indices(groups.n_tasks, 1)
    same = label[iu[0]] == label[iu[1]]
    vals = jac[iu]
    within = float(vals[same].mean()) if same.any() else float("nan")
    across = float(vals[~same].mean()) if (~same).any() else float("nan")
    return within, across
