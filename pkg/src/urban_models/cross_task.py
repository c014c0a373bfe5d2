# This file is part of the UrbanVerse tool

# src/urban_models/cross_task.py
"""
Joint multi-task regression head on region embeddings.

CrossTaskDiffusion trains one task-conditioned denoiser for all tasks,
with the retrieved prior shifting both diffusion directions; PointBaseline
is the diffusion-free MLP used as the w/o-DiffM ablation.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from sklearn.preprocessing import StandardScaler

from common.errors import ConfigError, DataError
from data_processing.checkpoint import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from urban_models.denoiser import CONDITIONING_MODES, TaskConditionedDenoiser
from urban_models.diffusion import forward_sample_batch, make_schedule, reverse_diffusion
from urban_models.numerics import (
    OptimizerState, Rng, check_loss, ensure_finite, softplus, train_step, trainable_parameters,
)
from urban_models.retrieval import RETRIEVAL_MODES, InfoRepository, Prior, build_repository, prior_matrix

logger = logging.getLogger(__name__)

PRIOR_KINDS = ("retrieved", "gaussian")
POINT_ESTIMATES = ("mean", "median")


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_1: float = 1e-4
    beta_T: float = 0.02
    hidden: int = 128
    conditioning: str = "em"
    prior: str = "retrieved"
    retrieval: str = "topk"
    K: int = 5
    learning_rate: float = 5e-3
    weight_decay: float = 0.01
    epochs: int = 1500
    batch: int = 256
    sr: int = 10
    point_estimate: str = "mean"
    divergence_threshold: float = 1e6
    allow_degenerate: bool = False
    finetune_epochs: int = 300

    def validate(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigError(f"conditioning must be one of {CONDITIONING_MODES}, got {self.conditioning!r}")
        if self.prior not in PRIOR_KINDS:
            raise ConfigError(f"prior must be one of {PRIOR_KINDS}, got {self.prior!r}")
        if self.retrieval not in RETRIEVAL_MODES:
            raise ConfigError(f"retrieval must be one of {RETRIEVAL_MODES}, got {self.retrieval!r}")
        if self.point_estimate not in POINT_ESTIMATES:
            raise ConfigError(f"point estimate must be one of {POINT_ESTIMATES}, got {self.point_estimate!r}")
        if self.K < 1 or self.sr < 1 or self.batch < 1 or self.epochs < 0:
            raise ConfigError("K, #SR and batch must be >= 1 and epochs >= 0")
        make_schedule(self.T, self.beta_1, self.beta_T)
        return self

    @classmethod
    def from_run_config(cls, cfg):
        return cls(T=cfg.T, beta_1=cfg.beta_1, beta_T=cfg.beta_T, hidden=cfg.d_dn, conditioning=cfg.conditioning,
                   prior=cfg.prior, retrieval=cfg.retrieval, K=cfg.K, learning_rate=cfg.lr_diff,
                   weight_decay=cfg.weight_decay, epochs=cfg.diff_epochs, batch=cfg.diff_batch, sr=cfg.sr,
                   point_estimate=cfg.point_estimate, divergence_threshold=cfg.divergence_threshold,
                   allow_degenerate=cfg.allow_degenerate, finetune_epochs=cfg.finetune_epochs).validate()

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class PredictionSet:
    region_id: object
    task_id: str
    samples: np.ndarray  # denormalised, length #SR
    point: float

    def to_row(self):
        row = {"region_id": self.region_id, "task_id": self.task_id, "point": self.point}
        row.update({f"sample_{i}": float(s) for i, s in enumerate(self.samples)})
        return row


def _sample_available_tasks(available, rng):
    """One task per row, uniform over the tasks the row has a target for"""
    scores = rng.np.random(available.shape)
    scores[~available] = -1.0
    return scores.argmax(axis=1)


class CrossTaskDiffusion:
    """
    Class to store the trained denoiser, its information repository and schedule
    """

    def __init__(self, config, seed=0):
        self.config = config.validate()
        self.seed = seed
        self.schedule = make_schedule(config.T, config.beta_1, config.beta_T)
        self.repository = None
        self.model = None
        self.train_priors = None
        self.history = []

    @property
    def task_ids(self):
        return self.repository.task_ids

    def _priors(self, H, exclude_rows=None, tag="query"):
        """Normalised priors (n, U) plus neighbour rows and weights for auditing"""
        n, U = len(H), len(self.repository.task_ids)
        if self.config.prior == "gaussian":
            return np.zeros((n, U)), None, None
        rng = Rng(self.seed, ("retrieval", tag))
        return prior_matrix(H, self.repository, K=self.config.K, mode=self.config.retrieval, rng=rng,
                            exclude_rows=exclude_rows)

    def fit(self, region_ids, H, Y, task_ids):
        """Joint training over all tasks; Y holds raw targets with NaN for missing values"""
        H = np.asarray(H, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64).reshape(len(H), -1)
        keep = ~np.all(np.isnan(Y), axis=1)
        region_ids = [rid for rid, k in zip(region_ids, keep) if k]
        H, Y = H[keep], Y[keep]
        for u, task_id in enumerate(task_ids):
            if np.sum(~np.isnan(Y[:, u])) < 2:
                raise DataError(f"task {task_id!r} needs at least 2 training regions")
        self.repository = build_repository(region_ids, H, Y, task_ids, allow_degenerate=self.config.allow_degenerate)
        self.train_priors = self._priors(H, exclude_rows=np.arange(len(H)), tag="train")[0]
        self.model = TaskConditionedDenoiser(H.shape[1], len(task_ids), self.config.T, hidden=self.config.hidden,
                                             mode=self.config.conditioning, seed=self.seed)
        self.history = self._train_loop(self.config.epochs, "train")
        return self

    def _train_loop(self, epochs, tag, only_task=None):
        repo = self.repository
        dtype = torch.get_default_dtype()
        H = torch.as_tensor(repo.embeddings, dtype=dtype)
        targets = np.nan_to_num(repo.targets, nan=0.0)
        available = ~np.isnan(repo.targets)
        if only_task is not None:
            available = np.zeros_like(available)
            available[:, only_task] = ~np.isnan(repo.targets[:, only_task])
        rows = np.where(available.any(axis=1))[0]
        state = OptimizerState(trainable_parameters(self.model), kind="adamw",
                               learning_rate=self.config.learning_rate, weight_decay=self.config.weight_decay)
        self.model.train()
        history = []
        for epoch in range(epochs):
            rng = Rng(self.seed, ("diffusion", tag, epoch))
            order = rows[rng.permutation(len(rows))]
            losses = []
            for start in range(0, len(order), self.config.batch):
                idx = order[start:start + self.config.batch]
                u = _sample_available_tasks(available[idx], rng)
                t = torch.as_tensor(rng.integers(1, self.config.T + 1, size=len(idx)), dtype=torch.long)
                eps = rng.normal((len(idx),), dtype=dtype)
                y0 = torch.as_tensor(targets[idx, u], dtype=dtype)
                prior = torch.as_tensor(self.train_priors[idx, u], dtype=dtype)
                y_t = forward_sample_batch(y0, prior, t, eps, self.schedule)
                eps_hat = self.model(H[idx], y_t, t, torch.as_tensor(u, dtype=torch.long))
                loss = ((eps_hat - eps) ** 2).mean()
                value = train_step(loss, state)
                check_loss(value, self.config.divergence_threshold, f"diffusion {tag} epoch {epoch}")
                losses.append(value)
            epoch_loss = float(np.mean(losses))
            history.append({"epoch": epoch, "loss": epoch_loss})
            if epoch % 100 == 0 or epoch == epochs - 1:
                logger.info(f"Diffusion {tag} epoch {epoch + 1}/{epochs}: loss {epoch_loss:.6f}")
        self.model.eval()
        return history

    def sample_once(self, H, task, priors, generator):
        """One reverse-diffusion draw per row of H for one task, normalised scale"""
        H = torch.as_tensor(np.atleast_2d(H), dtype=self.model.input_layer.weight.dtype)
        u = self.repository.task_index(task) if isinstance(task, str) else int(task)
        u_vec = torch.full((H.shape[0],), u, dtype=torch.long)

        def eps_model(y_t, t):
            return self.model(H, y_t, t, u_vec)

        with torch.no_grad():
            y0 = reverse_diffusion(eps_model, torch.as_tensor(priors, dtype=H.dtype).reshape(-1), self.schedule,
                                   generator)
        return ensure_finite(y0, "reverse diffusion sample").cpu().numpy().astype(np.float64)

    def predict(self, region_ids, H, sr=None, tasks=None, return_priors=False):
        """#SR denormalised samples and a point estimate for every (region, task)"""
        sr = self.config.sr if sr is None else sr
        if sr < 1:
            raise ConfigError(f"#SR must be >= 1, got {sr}")
        H = np.asarray(H, dtype=np.float64)
        tasks = self.task_ids if tasks is None else [str(t) for t in tasks]
        priors, neighbors, weights = self._priors(H, tag="predict")
        predictions, audit = [], []
        for task in tasks:
            u = self.repository.task_index(task)
            samples = np.stack([
                self.sample_once(H, u, priors[:, u], Rng(self.seed, ("predict", task, r)).torch)
                for r in range(sr)], axis=1)
            samples = self.repository.denormalize(samples, u)
            points = samples.mean(axis=1) if self.config.point_estimate == "mean" else np.median(samples, axis=1)
            for i, rid in enumerate(region_ids):
                predictions.append(PredictionSet(region_id=rid, task_id=task, samples=samples[i], point=float(points[i])))
                if neighbors is not None:
                    audit.append(Prior(region_id=rid, task_id=task, value=float(priors[i, u]),
                                       neighbors=[self.repository.region_ids[r] for r in neighbors[i][u]],
                                       weights=weights[i][u]))
        logger.info(f"Predicted {len(region_ids)} regions x {len(tasks)} tasks with #SR={sr}")
        return (predictions, audit) if return_priors else predictions

    def finetune(self, task_id, raw_values, epochs=None, only_new_task=False):
        """
        Add a task to a trained model and continue training with all other
        parameters warm-started. raw_values align with repository.region_ids.
        """
        if self.model is None:
            raise DataError("finetune needs a trained model")
        if str(task_id) in self.repository.task_ids:
            raise ConfigError(f"task {task_id!r} is already known to the model")
        u = self.repository.add_task(task_id, raw_values, allow_degenerate=self.config.allow_degenerate)
        self.model.add_task()
        self.train_priors = self._priors(self.repository.embeddings,
                                         exclude_rows=np.arange(len(self.repository)), tag="train")[0]
        epochs = self.config.finetune_epochs if epochs is None else epochs
        self.history += self._train_loop(epochs, f"finetune-{task_id}", only_task=u if only_new_task else None)
        return self

    # Persistence

    def save(self, stem):
        repo = self.repository
        arrays = module_arrays(self.model, prefix="denoiser.")
        arrays.update({"repository.embeddings": repo.embeddings, "repository.targets": repo.targets,
                       "repository.mean": repo.mean, "repository.std": repo.std,
                       "repository.var": repo.scaler.var_, "train_priors": self.train_priors})
        extra = {"config": self.config.to_dict(), "seed": self.seed, "model": self.model.config_dict(),
                 "region_ids": [str(r) for r in repo.region_ids], "task_ids": repo.task_ids}
        return save_checkpoint(stem, "diffusion", arrays, extra=extra)

    @classmethod
    def load(cls, stem):
        arrays, manifest = load_checkpoint(stem, component="diffusion", producer="train")
        extra = manifest["extra"]
        head = cls(DiffusionConfig(**extra["config"]), seed=extra["seed"])
        scaler = _restore_scaler(arrays["repository.mean"], arrays["repository.std"], arrays["repository.var"],
                                 arrays["repository.targets"])
        head.repository = InfoRepository(extra["region_ids"], arrays["repository.embeddings"],
                                         arrays["repository.targets"], extra["task_ids"], scaler)
        head.train_priors = arrays["train_priors"].astype(np.float64)
        head.model = TaskConditionedDenoiser.from_config_dict(extra["model"])
        load_module_arrays(head.model, arrays, prefix="denoiser.", path=f"{stem}.json")
        head.model.eval()
        return head


def _restore_scaler(mean, std, var, targets):
    scaler = StandardScaler()
    scaler.mean_ = np.asarray(mean, dtype=np.float64)
    scaler.scale_ = np.asarray(std, dtype=np.float64)
    scaler.var_ = np.asarray(var, dtype=np.float64)
    scaler.n_features_in_ = len(scaler.mean_)
    scaler.n_samples_seen_ = (~np.isnan(np.asarray(targets, dtype=np.float64))).sum(axis=0)
    return scaler


class PointMLP(nn.Module):
    def __init__(self, embed_dim, num_tasks, hidden):
        super().__init__()
        self.task_embedding = nn.Embedding(num_tasks, hidden)
        self.layer_in = nn.Linear(embed_dim + hidden, hidden)
        self.layer_mid = nn.Linear(hidden, hidden)
        self.layer_out = nn.Linear(hidden, 1)

    def forward(self, h, u):
        x = softplus(self.layer_in(torch.cat([h, self.task_embedding(u)], dim=-1)))
        return self.layer_out(softplus(self.layer_mid(x))).squeeze(-1)


class PointBaseline:
    """
    Class to store the diffusion-free regression head (MSE on normalised targets)
    """

    def __init__(self, config, seed=0):
        self.config = config.validate()
        self.seed = seed
        self.repository = None
        self.model = None
        self.history = []

    @property
    def task_ids(self):
        return self.repository.task_ids

    def fit(self, region_ids, H, Y, task_ids):
        H = np.asarray(H, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64).reshape(len(H), -1)
        self.repository = build_repository(region_ids, H, Y, task_ids, allow_degenerate=self.config.allow_degenerate)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(Rng(self.seed, ("point-init",)).integers(0, 2 ** 31 - 1)))
            self.model = PointMLP(H.shape[1], len(task_ids), self.config.hidden)
        dtype = torch.get_default_dtype()
        Ht = torch.as_tensor(H, dtype=dtype)
        available = ~np.isnan(self.repository.targets)
        rows, cols = np.where(available)
        targets = torch.as_tensor(self.repository.targets[rows, cols], dtype=dtype)
        state = OptimizerState(trainable_parameters(self.model), kind="adamw",
                               learning_rate=self.config.learning_rate, weight_decay=self.config.weight_decay)
        self.model.train()
        for epoch in range(self.config.epochs):
            rng = Rng(self.seed, ("point", epoch))
            order = rng.permutation(len(rows))
            losses = []
            for start in range(0, len(order), self.config.batch):
                idx = order[start:start + self.config.batch]
                pred = self.model(Ht[rows[idx]], torch.as_tensor(cols[idx], dtype=torch.long))
                loss = ((pred - targets[idx]) ** 2).mean()
                value = train_step(loss, state)
                check_loss(value, self.config.divergence_threshold, f"point baseline epoch {epoch}")
                losses.append(value)
            self.history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        self.model.eval()
        logger.info(f"Point baseline trained, final loss {self.history[-1]['loss'] if self.history else float('nan'):.6f}")
        return self

    def predict(self, region_ids, H, tasks=None):
        """One denormalised value per (region, task), as PredictionSet with a single sample"""
        H = torch.as_tensor(np.asarray(H, dtype=np.float64), dtype=self.model.layer_in.weight.dtype)
        tasks = self.task_ids if tasks is None else [str(t) for t in tasks]
        out = []
        with torch.no_grad():
            for task in tasks:
                u = self.repository.task_index(task)
                pred = self.model(H, torch.full((H.shape[0],), u, dtype=torch.long)).cpu().numpy()
                pred = self.repository.denormalize(pred.astype(np.float64), u)
                out += [PredictionSet(region_id=rid, task_id=task, samples=np.array([p]), point=float(p))
                        for rid, p in zip(region_ids, pred)]
        return out

    def save(self, stem):
        repo = self.repository
        arrays = module_arrays(self.model, prefix="point.")
        arrays.update({"repository.embeddings": repo.embeddings, "repository.targets": repo.targets,
                       "repository.mean": repo.mean, "repository.std": repo.std,
                       "repository.var": repo.scaler.var_})
        extra = {"config": self.config.to_dict(), "seed": self.seed,
                 "model": {"embed_dim": repo.embeddings.shape[1], "num_tasks": len(repo.task_ids)},
                 "region_ids": [str(r) for r in repo.region_ids], "task_ids": repo.task_ids}
        return save_checkpoint(stem, "point", arrays, extra=extra)

    @classmethod
    def load(cls, stem):
        arrays, manifest = load_checkpoint(stem, component="point", producer="train")
        extra = manifest["extra"]
        head = cls(DiffusionConfig(**extra["config"]), seed=extra["seed"])
        scaler = _restore_scaler(arrays["repository.mean"], arrays["repository.std"], arrays["repository.var"],
                                 arrays["repository.targets"])
        head.repository = InfoRepository(extra["region_ids"], arrays["repository.embeddings"],
                                         arrays["repository.targets"], extra["task_ids"], scaler)
        head.model = PointMLP(extra["model"]["embed_dim"], extra["model"]["num_tasks"], head.config.hidden)
        load_module_arrays(head.model, arrays, prefix="point.", path=f"{stem}.json")
        head.model.eval()
        return head


def load_head(stem):
    """Whichever regression head the train stage wrote at stem"""
    arrays, manifest = load_checkpoint(stem, producer="train")
    if manifest["component"] == "point":
        return PointBaseline.load(stem)
    return CrossTaskDiffusion.load(stem)
