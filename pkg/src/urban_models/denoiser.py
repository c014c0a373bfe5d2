# This file is part of the UrbanVerse tool

# src/urban_models/denoiser.py
"""
Task-conditioned noise predictor eps_hat(h, y_t, t, u).

[h || y_t] -> linear -> three conditional layers -> MLP -> scalar.
Conditioning modes:
    em      h' = softplus(gamma_tu * W h), gamma_tu = Fusion([gamma_t || gamma_u])
    concat  h' = softplus(W [h || gamma_tu])
    xattn   h' = softplus(W h + CrossAttn(W h, [gamma_t, gamma_u]))
"""
import logging
import math

import torch
import torch.nn as nn

from common.errors import ConfigError, DataError
from urban_models.numerics import Rng, matmul, mul, softmax, softplus

logger = logging.getLogger(__name__)

CONDITIONING_MODES = ("em", "concat", "xattn")
NUM_CONDITIONAL_LAYERS = 3


class TokenCrossAttention(nn.Module):
    """Single-head attention from one query vector to a short token list"""

    def __init__(self, dim):
        super().__init__()
        self.scale = 1.0 / math.sqrt(dim)
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, query, tokens):
        # query (B, D), tokens (B, n, D)
        q = self.wq(query).unsqueeze(1)
        scores = matmul(q, self.wk(tokens).transpose(1, 2)) * self.scale
        attn = softmax(scores, dim=-1)
        return self.wo(matmul(attn, self.wv(tokens)).squeeze(1)), attn.squeeze(1)


class TaskConditionedDenoiser(nn.Module):
    """
    Class to store the denoiser parameters and the task/timestep tables
    """

    def __init__(self, embed_dim, num_tasks, num_steps, hidden=128, mode="em", seed=0):
        super().__init__()
        if mode not in CONDITIONING_MODES:
            raise ConfigError(f"unknown conditioning mode {mode!r}, expected one of {CONDITIONING_MODES}")
        if num_tasks < 1 or embed_dim < 1 or hidden < 1:
            raise ConfigError("denoiser needs embed_dim, hidden and num_tasks >= 1")
        self._mode = mode
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.num_steps = num_steps
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(Rng(seed, ("denoiser-init", mode)).integers(0, 2 ** 31 - 1)))
            self.input_layer = nn.Linear(embed_dim + 1, hidden)
            self.time_embedding = nn.Embedding(num_steps + 1, hidden)
            self.task_embedding = nn.Embedding(num_tasks, hidden)
            self.time_embedding.weight.data.uniform_()
            self.task_embedding.weight.data.uniform_()
            width_in = 2 * hidden if mode == "concat" else hidden
            self.cond_layers = nn.ModuleList([nn.Linear(width_in, hidden) for _ in range(NUM_CONDITIONAL_LAYERS)])
            if mode == "xattn":
                self.cross_attention = nn.ModuleList(
                    [TokenCrossAttention(hidden) for _ in range(NUM_CONDITIONAL_LAYERS)])
            else:
                self.fusion_in = nn.Linear(2 * hidden, hidden)
                self.fusion_out = nn.Linear(hidden, hidden)
            self.head_hidden = nn.Linear(hidden, hidden)
            self.head_out = nn.Linear(hidden, 1)
            nn.init.zeros_(self.head_out.weight)
            nn.init.zeros_(self.head_out.bias)

    @property
    def mode(self):
        return self._mode

    @property
    def num_tasks(self):
        return self.task_embedding.num_embeddings

    def _check_ids(self, t, u):
        if int(u.min()) < 0 or int(u.max()) >= self.num_tasks:
            raise DataError(f"unknown task index in {u.unique().tolist()}, model has {self.num_tasks} tasks")
        if int(t.min()) < 0 or int(t.max()) > self.num_steps:
            raise ConfigError(f"timestep outside [0, {self.num_steps}]")

    def fused_condition(self, t, u):
        """gamma_tu = Fusion([gamma_t || gamma_u])"""
        if self._mode == "xattn":
            raise ConfigError("the cross-attention mode has no fused condition")
        cat = torch.cat([self.time_embedding(t), self.task_embedding(u)], dim=-1)
        return self.fusion_out(softplus(self.fusion_in(cat)))

    def features(self, h, y_t, gamma=None, tokens=None):
        """Trunk output h'_3; gamma=None (em/concat) runs the layers unmodulated"""
        x = self.input_layer(torch.cat([h, y_t.unsqueeze(-1)], dim=-1))
        for i, layer in enumerate(self.cond_layers):
            if self._mode == "em":
                z = layer(x)
                x = softplus(z if gamma is None else mul(gamma, z))
            elif self._mode == "concat":
                cond = torch.zeros_like(x) if gamma is None else gamma
                x = softplus(layer(torch.cat([x, cond], dim=-1)))
            else:
                z = layer(x)
                if tokens is not None:
                    z = z + self.cross_attention[i](z, tokens)[0]
                x = softplus(z)
        return x

    def forward(self, h, y_t, t, u, gamma=None):
        """Predicted noise, one scalar per batch row"""
        h = torch.as_tensor(h, dtype=self.input_layer.weight.dtype)
        y_t = torch.as_tensor(y_t, dtype=h.dtype)
        batch = h.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(batch)
        u = torch.as_tensor(u, dtype=torch.long).reshape(-1).expand(batch)
        self._check_ids(t, u)
        if self._mode == "xattn":
            tokens = torch.stack([self.time_embedding(t), self.task_embedding(u)], dim=1)
            x = self.features(h, y_t, tokens=tokens)
        else:
            x = self.features(h, y_t, gamma=self.fused_condition(t, u) if gamma is None else gamma)
        return self.head_out(softplus(self.head_hidden(x))).squeeze(-1)

    def add_task(self, seed=None):
        """Grow the task table by one row; existing rows are kept. Returns the new index."""
        old = self.task_embedding
        new = nn.Embedding(old.num_embeddings + 1, self.hidden)
        with torch.no_grad():
            new.weight[:-1] = old.weight
            row = Rng(self.seed if seed is None else seed, ("task-row", old.num_embeddings)).uniform((self.hidden,))
            new.weight[-1] = row.to(new.weight.dtype)
        self.task_embedding = new
        logger.info(f"Denoiser task table grown to {new.num_embeddings} tasks")
        return new.num_embeddings - 1

    def config_dict(self):
        return {"embed_dim": self.embed_dim, "num_tasks": self.num_tasks, "num_steps": self.num_steps,
                "hidden": self.hidden, "mode": self._mode, "seed": self.seed}

    @classmethod
    def from_config_dict(cls, cfg):
        return cls(cfg["embed_dim"], cfg["num_tasks"], cfg["num_steps"], hidden=cfg["hidden"], mode=cfg["mode"],
                   seed=cfg.get("seed", 0))
