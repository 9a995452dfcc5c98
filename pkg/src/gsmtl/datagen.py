"""Synthetic generators, CSV and groups-file I/O, task clustering and splits.

Every generator is a pure function of its configuration: the same seed gives
bit-identical arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .core import (
    ConfigError, DataError, GroupStructure, LatentModel, MultiTaskDataset, ProblemKind,
)

__all__ = [
    "Synthetic1Config", "gen_synthetic1", "gen_two_group_classification",
    "load_csv", "export_csv", "read_groups", "write_groups", "format_groups",
    "KMeansConfig", "kmeans_groups", "split_dataset", "split_indices",
]


def _check_count(name, value, minimum=1):
    if int(value) != value or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")


@dataclass(frozen=True)
class Synthetic1Config:
    """Feature-cluster regression benchmark with planted task groups.

    Attributes
    ----------
    m, g, T, n_per_task : int
        Features, groups, tasks and samples per task.
    sigma : float
        Standard deviation of each feature around its cluster center.
    label_noise : float
        Standard deviation of the additive label noise.
    k_true : int, optional
        Planted latent dimension; defaults to ``g`` (one latent row per task
        group). Latent row ``r`` is owned by task group ``r % g``.
    feature_overlap : int
        Number of features shared by neighbouring feature groups (0 gives a
        partition of the features into ``g`` contiguous blocks).
    seed : int
    """

    m: int = 20
    g: int = 3
    T: int = 10
    n_per_task: int = 20
    sigma: float = 1.0
    label_noise: float = 0.5
    k_true: int | None = None
    feature_overlap: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("m", "g", "T", "n_per_task"):
            _check_count(name, getattr(self, name))
        if self.g > self.T:
            raise ConfigError(f"g={self.g} exceeds the number of tasks T={self.T}")
        if self.g > self.m:
            raise ConfigError(f"g={self.g} exceeds the number of features m={self.m}")
        if not (self.sigma >= 0 and self.label_noise >= 0):
            raise ConfigError("sigma and label_noise must be non-negative")
        if self.k_true is not None:
            _check_count("k_true", self.k_true)
            if self.k_true > min(self.m, self.T):
                raise ConfigError(f"k_true={self.k_true} exceeds min(m, T)={min(self.m, self.T)}")
        _check_count("feature_overlap", self.feature_overlap, 0)

    @property
    def k(self) -> int:
        return self.k_true if self.k_true is not None else self.g


def feature_groups(m: int, g: int, overlap: int = 0) -> list:
    """Contiguous feature blocks, each widened by ``overlap`` into its right neighbour."""
    bounds = np.linspace(0, m, g + 1).round().astype(int)
    return [np.arange(bounds[j], min(m, bounds[j + 1] + (overlap if j < g - 1 else 0)))
            for j in range(g)]


def task_partition(T: int, g: int) -> GroupStructure:
    """Balanced contiguous partition of ``T`` tasks into ``g`` groups."""
    return GroupStructure(tuple(np.array_split(np.arange(T), g)), T)


def gen_synthetic1(cfg: Synthetic1Config = Synthetic1Config()):
    """Generate the feature-cluster regression benchmark.

    Features: centers ``mu_1..mu_g ~ U(0, 1)^m``; feature ``i`` of every
    sample is drawn from ``N(mu_k[i], sigma)`` for a group ``k`` containing
    ``i`` (chosen uniformly afresh per sample and feature when groups
    overlap). Labels: ``y = (L* S*[:, t])' x + N(0, label_noise)`` where
    ``S*`` is nonzero only on rows owned by the task's planted group.

    Returns
    -------
    data : MultiTaskDataset
    groups : GroupStructure
        The planted task partition.
    truth : LatentModel
        ``(L*, S*)``.
    """
    rng = np.random.default_rng(cfg.seed)
    m, g, T, n = cfg.m, cfg.g, cfg.T, cfg.n_per_task
    centers = rng.uniform(0.0, 1.0, size=(g, m))
    fgroups = feature_groups(m, g, cfg.feature_overlap)
    owners = [[j for j, fg in enumerate(fgroups) if i in fg] for i in range(m)]

    groups = task_partition(T, g)
    k = cfg.k
    L = rng.normal(size=(m, k))
    S = np.zeros((k, T))
    for r in range(k):
        members = groups.groups[r % g]
        S[r, members] = rng.normal(size=members.size)

    tasks = []
    for t in range(T):
        choice = np.empty((n, m), dtype=int)
        for i, own in enumerate(owners):
            choice[:, i] = own[0] if len(own) == 1 else rng.choice(own, size=n)
        mean = centers[choice, np.arange(m)]
        X = mean + cfg.sigma * rng.normal(size=(n, m))
        y = X @ (L @ S[:, t]) + cfg.label_noise * rng.normal(size=n)
        tasks.append((X, y))
    return MultiTaskDataset(tuple(tasks)), groups, LatentModel(L, S)


def gen_two_group_classification(T: int = 29, d: int = 9, n_per_task: int = 40,
                                 margin: float = 1.0, seed: int = 0, noise: float = 0.1):
    """Two task groups with orthogonal ground-truth weights and +/-1 labels.

    The first ``ceil(T / 2)`` tasks use ``w_a`` and the rest ``w_b`` (both
    unit vectors). Features are standard normal, pushed along the relevant
    weight so that ``|w'x| >= margin``; labels are ``sign(w'x + noise * e)``.

    Returns
    -------
    data : MultiTaskDataset
    groups : GroupStructure
    """
    _check_count("T", T, 2)
    _check_count("d", d, 2)
    _check_count("n_per_task", n_per_task)
    if margin < 0 or noise < 0:
        raise ConfigError("margin and noise must be non-negative")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(d, 2)))
    weights = (Q[:, 0], Q[:, 1])
    first = math.ceil(T / 2)
    groups = GroupStructure((np.arange(first), np.arange(first, T)), T)
    tasks = []
    for t in range(T):
        w = weights[0 if t < first else 1]
        X = rng.normal(size=(n_per_task, d))
        z = X @ w
        side = np.where(z >= 0, 1.0, -1.0)
        X = X + np.outer(side * np.maximum(margin - np.abs(z), 0.0), w)
        e = rng.normal(size=n_per_task)
        y = np.where(X @ w + noise * e >= 0, 1.0, -1.0)
        tasks.append((X, y))
    return MultiTaskDataset(tuple(tasks), ProblemKind.CLASSIFICATION), groups


# --------------------------------------------------------------------------
# files


def load_csv(path, kind="regression") -> MultiTaskDataset:
    """Read a dataset with header ``task_id,y,x1,...,xd``.

    Task ids are positive integers; the sorted distinct ids are mapped to
    tasks ``0..T-1``. Errors name the offending line (the header is line 1).
    """
    kind = ProblemKind.parse(kind)
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err.strerror or err}") from None
    if not lines:
        raise DataError(f"{path}: empty file, expected header 'task_id,y,x1,...,xd'")
    header = [h.strip() for h in lines[0].split(",")]
    d = len(header) - 2
    expected = ["task_id", "y"] + [f"x{i}" for i in range(1, d + 1)]
    if d < 1 or header != expected:
        raise DataError(f"{path}, line 1: header must be 'task_id,y,x1,...,xd', got {lines[0]!r}")
    rows: dict = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != d + 2:
            raise DataError(f"{path}, line {lineno}: expected {d + 2} fields, found {len(fields)}")
        try:
            tid = int(fields[0])
        except ValueError:
            raise DataError(f"{path}, line {lineno}: task_id {fields[0]!r} is not an integer") from None
        if tid < 1:
            raise DataError(f"{path}, line {lineno}: task_id must be positive, got {tid}")
        try:
            vals = [float(f) for f in fields[1:]]
        except ValueError:
            raise DataError(f"{path}, line {lineno}: non-numeric field") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"{path}, line {lineno}: non-finite value")
        if kind is ProblemKind.CLASSIFICATION and vals[0] not in (-1.0, 1.0):
            raise DataError(f"{path}, line {lineno}: classification label must be -1 or +1, "
                            f"got {fields[1]!r}")
        rows.setdefault(tid, []).append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows, every task is empty")
    tasks = []
    for tid in sorted(rows):
        arr = np.array(rows[tid], dtype=float)
        tasks.append((arr[:, 1:], arr[:, 0]))
    return MultiTaskDataset(tuple(tasks), kind)


def export_csv(data: MultiTaskDataset, path):
    """Write ``data`` in the ``task_id,y,x1,...,xd`` layout (1-based task ids).

    Floats use ``repr`` so that :func:`load_csv` reads back identical values.
    """
    d = data.n_features
    out = [",".join(["task_id", "y"] + [f"x{i}" for i in range(1, d + 1)])]
    for t, (X, y) in enumerate(data.tasks, start=1):
        for xi, yi in zip(X, y):
            out.append(",".join([str(t), repr(float(yi))] + [repr(float(v)) for v in xi]))
    atomic_write_text(path, "\n".join(out) + "\n")


def format_groups(groups: GroupStructure) -> str:
    return "".join(",".join(str(int(t) + 1) for t in g) + "\n" for g in groups.groups)


def write_groups(groups: GroupStructure, path):
    """One group per line, comma-separated 1-based task ids."""
    atomic_write_text(path, format_groups(groups))


def read_groups(path, n_tasks: int) -> GroupStructure:
    """Parse a groups file; ``#`` starts a comment and blank lines are skipped."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise ConfigError(f"cannot read groups file {path}: {err.strerror or err}") from None
    groups = []
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        try:
            ids = [int(f) for f in body.split(",")]
        except ValueError:
            raise ConfigError(f"{path}, line {lineno}: task ids must be integers") from None
        bad = [i for i in ids if not 1 <= i <= n_tasks]
        if bad:
            raise ConfigError(f"{path}, line {lineno}: task id {bad[0]} outside 1..{n_tasks}")
        groups.append(np.array(ids) - 1)
    if not groups:
        raise ConfigError(f"{path}: no groups defined")
    try:
        return GroupStructure(tuple(groups), n_tasks)
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from None


# --------------------------------------------------------------------------
# task clustering


@dataclass(frozen=True)
class KMeansConfig:
    g: int
    max_iter: int = 100
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        _check_count("g", self.g)
        _check_count("max_iter", self.max_iter)
        _check_count("restarts", self.restarts)


def kmeans_groups(data: MultiTaskDataset, cfg: KMeansConfig) -> GroupStructure:
    """Cluster tasks by their mean feature vector.

    Lloyd iterations with k-means++ seeding, ``restarts`` runs, lowest
    within-cluster sum of squares kept. Groups are numbered by the first task
    they contain.
    """
    from sklearn.cluster import KMeans

    T = data.n_tasks
    if cfg.g > T:
        raise ConfigError(f"cannot form g={cfg.g} groups from T={T} tasks")
    if cfg.g == 1:
        return GroupStructure.single(T)
    reps = np.stack([X.mean(axis=0) for X, _ in data.tasks])
    if np.unique(reps, axis=0).shape[0] < cfg.g:
        raise ConfigError(f"fewer than g={cfg.g} distinct task representatives")
    km = KMeans(n_clusters=cfg.g, init="k-means++", n_init=cfg.restarts,
                max_iter=cfg.max_iter, algorithm="lloyd", random_state=cfg.seed)
    labels = km.fit_predict(reps)
    _, first = np.unique(labels, return_index=True)
    order = {lab: rank for rank, lab in enumerate(labels[np.sort(first)])}
    return GroupStructure.from_labels(np.array([order[lab] for lab in labels]))


# --------------------------------------------------------------------------
# splits


def split_indices(n: int, ratios, rng) -> tuple:
    counts = [math.floor(r * n + 1e-9) for r in ratios[:-1]]
    perm = rng.permutation(n)
    cuts = np.cumsum(counts)
    return tuple(np.sort(p) for p in np.split(perm, cuts))


def split_dataset(data: MultiTaskDataset, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Per-task shuffled train/validation/test split.

    Train receives ``floor(0.6 n_t)`` samples, validation ``floor(0.2 n_t)``
    and test the remainder.

    Returns
    -------
    train, val, test : MultiTaskDataset
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    for t, size in enumerate(data.sizes):
        if size < 5:
            raise DataError(f"task {t + 1} has {size} samples; at least 5 are needed to split")
    rng = np.random.default_rng(seed)
    parts = [split_indices(int(n), ratios, rng) for n in data.sizes]
    return tuple(data.subset([p[j] for p in parts]) for j in range(3))
