# This file is part of the UrbanVerse tool

# src/urban_models/retrieval.py
"""
Information repository of training regions and the retrieved prior.

For a query embedding h and task u, the prior is the softmax(cosine)
weighted average of the normalised task-u targets of the K most similar
repository regions that have a value for u.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax
from sklearn.preprocessing import StandardScaler, normalize

from common.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

RETRIEVAL_MODES = ("topk", "random")


@dataclass
class Prior:
    region_id: object
    task_id: str
    value: float  # normalised scale
    neighbors: list = field(default_factory=list)
    weights: np.ndarray = None

    def to_row(self):
        return {"region_id": self.region_id, "task_id": self.task_id, "prior": self.value,
                "neighbors": " ".join(str(n) for n in self.neighbors),
                "weights": " ".join(f"{w:.6g}" for w in self.weights)}


class InfoRepository:
    """
    Class to store (region key, embedding, normalised targets) of the training split
    """

    def __init__(self, region_ids, embeddings, targets, task_ids, scaler):
        self.region_ids = list(region_ids)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.targets = np.asarray(targets, dtype=np.float64)  # normalised, NaN where missing
        self.task_ids = list(task_ids)
        self.scaler = scaler
        self.unit = normalize(self.embeddings)
        self._row = {rid: i for i, rid in enumerate(self.region_ids)}

    @property
    def mean(self):
        return self.scaler.mean_

    @property
    def std(self):
        return self.scaler.scale_

    def __len__(self):
        return len(self.region_ids)

    def task_index(self, task_id):
        try:
            return self.task_ids.index(str(task_id))
        except ValueError:
            raise DataError(f"unknown task {task_id!r}, repository has {self.task_ids}") from None

    def row_of(self, region_id):
        return self._row.get(region_id)

    def normalize(self, y, task):
        u = self.task_index(task) if isinstance(task, str) else task
        return (np.asarray(y, dtype=float) - self.mean[u]) / self.std[u]

    def denormalize(self, y, task):
        u = self.task_index(task) if isinstance(task, str) else task
        return np.asarray(y, dtype=float) * self.std[u] + self.mean[u]

    def add_task(self, task_id, raw_values, allow_degenerate=False):
        """Append a task column (raw values aligned with region_ids, NaN where missing)"""
        raw = np.asarray(raw_values, dtype=float).reshape(-1, 1)
        col_scaler = _fit_scaler(raw, [str(task_id)], allow_degenerate)
        scaler = StandardScaler()
        scaler.mean_ = np.append(self.scaler.mean_, col_scaler.mean_)
        scaler.var_ = np.append(self.scaler.var_, col_scaler.var_)
        scaler.scale_ = np.append(self.scaler.scale_, col_scaler.scale_)
        scaler.n_features_in_ = len(scaler.mean_)
        scaler.n_samples_seen_ = np.append(np.broadcast_to(self.scaler.n_samples_seen_, len(self.task_ids)),
                                           col_scaler.n_samples_seen_)
        self.scaler = scaler
        self.targets = np.hstack([self.targets, col_scaler.transform(raw)])
        self.task_ids.append(str(task_id))
        return len(self.task_ids) - 1

    def __str__(self):
        return f"InfoRepository with {len(self)} regions, tasks {self.task_ids}, d={self.embeddings.shape[1]}"


def _fit_scaler(Y, task_ids, allow_degenerate):
    scaler = StandardScaler().fit(Y)  # NaNs are ignored when fitting
    for u, task_id in enumerate(task_ids):
        observed = int(np.sum(~np.isnan(Y[:, u])))
        if observed == 0:
            raise DataError(f"task {task_id!r} has no training targets")
        if not scaler.var_[u] > 0.0:
            if not allow_degenerate:
                raise DataError(f"task {task_id!r} has zero variance over {observed} training regions "
                                f"(use --allow-degenerate to keep it with std 1)")
            logger.warning(f"Task {task_id!r} has zero variance, keeping it with std 1")
            scaler.scale_[u] = 1.0
    return scaler


def build_repository(region_ids, embeddings, targets, task_ids, allow_degenerate=False):
    """z-score targets per task (population std) and store them with the embeddings"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64).reshape(len(embeddings), -1)
    if len(embeddings) == 0:
        raise DataError("information repository needs at least one training region")
    if not np.all(np.isfinite(embeddings)):
        raise DataError("training region embeddings contain NaN or Inf")
    if Y.shape[1] != len(task_ids):
        raise DataError(f"targets have {Y.shape[1]} columns for {len(task_ids)} tasks")
    scaler = _fit_scaler(Y, [str(t) for t in task_ids], allow_degenerate)
    repo = InfoRepository(region_ids, embeddings, scaler.transform(Y), [str(t) for t in task_ids], scaler)
    logger.info(f"Built {repo}")
    return repo


def _check_query(h):
    h = np.asarray(h, dtype=np.float64)
    norm = np.linalg.norm(h, axis=-1)
    if not np.all(np.isfinite(h)):
        raise DataError("query embedding is not finite")
    if np.any(norm == 0.0):
        raise DataError("query embedding has zero norm, cosine similarity is undefined")
    return h / norm[..., None]


def _pool(repo, u, exclude_row=None):
    pool = np.where(~np.isnan(repo.targets[:, u]))[0]
    if exclude_row is not None:
        pool = pool[pool != exclude_row]
    if len(pool) == 0:
        raise DataError(f"no repository region has a value for task {repo.task_ids[u]!r}")
    return pool


def _clamp(K, pool_size):
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if K > pool_size:
        logger.warning(f"K={K} exceeds the {pool_size} available repository regions, clamped")
        return pool_size
    return K


def retrieve_prior(h, task, repo, K=5, mode="topk", exclude=None, rng=None):
    """Retrieved prior of one (region, task); exclude is a repository region key to skip"""
    if mode not in RETRIEVAL_MODES:
        raise ConfigError(f"unknown retrieval mode {mode!r}, expected one of {RETRIEVAL_MODES}")
    u = repo.task_index(task) if isinstance(task, str) else int(task)
    query = _check_query(h)
    pool = _pool(repo, u, None if exclude is None else repo.row_of(exclude))
    K = _clamp(K, len(pool))
    sims = repo.unit[pool] @ query
    if mode == "topk":
        chosen = np.argsort(-sims, kind="stable")[:K]
    else:
        if rng is None:
            raise ConfigError("random retrieval needs a random stream")
        chosen = np.sort(rng.choice(len(pool), size=K, replace=False))
    weights = softmax(sims[chosen])
    rows = pool[chosen]
    value = float(weights @ repo.targets[rows, u])
    return Prior(region_id=None, task_id=repo.task_ids[u], value=value,
                 neighbors=[repo.region_ids[r] for r in rows], weights=weights)


def prior_matrix(H, repo, K=5, mode="topk", rng=None, exclude_rows=None, tasks=None):
    """
    Priors for every query row of H and every task (or the given task indices).

    exclude_rows[i] is the repository row of query i to leave out (self
    exclusion for training queries), or -1. Returns (values, neighbor_rows,
    weights) with shapes (n, U), (n, U, K_u) lists and (n, U, K_u) lists.
    """
    if mode not in RETRIEVAL_MODES:
        raise ConfigError(f"unknown retrieval mode {mode!r}, expected one of {RETRIEVAL_MODES}")
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if mode == "random" and rng is None:
        raise ConfigError("random retrieval needs a random stream")
    Q = _check_query(np.atleast_2d(H))
    n = len(Q)
    tasks = range(len(repo.task_ids)) if tasks is None else tasks
    exclude_rows = np.full(n, -1) if exclude_rows is None else np.asarray(exclude_rows)
    sims_all = Q @ repo.unit.T
    values = np.full((n, len(repo.task_ids)), np.nan)
    neighbors = [[None] * len(repo.task_ids) for _ in range(n)]
    weights = [[None] * len(repo.task_ids) for _ in range(n)]
    for u in tasks:
        available = ~np.isnan(repo.targets[:, u])
        clamped = False
        for i in range(n):
            mask = available.copy()
            if exclude_rows[i] >= 0:
                mask[exclude_rows[i]] = False
            pool = np.where(mask)[0]
            if len(pool) == 0:
                raise DataError(f"no repository region has a value for task {repo.task_ids[u]!r}")
            k = min(K, len(pool))
            clamped |= k < K
            sims = sims_all[i, pool]
            if mode == "topk":
                chosen = np.argsort(-sims, kind="stable")[:k]
            else:
                chosen = np.sort(rng.choice(len(pool), size=k, replace=False))
            w = softmax(sims[chosen])
            rows = pool[chosen]
            values[i, u] = w @ repo.targets[rows, u]
            neighbors[i][u] = rows
            weights[i][u] = w
        if clamped:
            logger.warning(f"K={K} exceeds the available repository regions for task {repo.task_ids[u]!r}, clamped")
    return values, neighbors, weights
