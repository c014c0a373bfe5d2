# This file is part of the UrbanVerse tool

# src/urban_models/cell_encoder.py
"""
Masked-reconstruction transformer over walk feature sequences.

The encoder sees a (k*l+1) x 15 POI sequence with a random subset of the
non-root rows replaced by a learnable mask token; the decoder reconstructs
the POI vectors and only masked rows are scored. Row 0 of the encoder
output is the cell embedding.
"""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from common.errors import ConfigError, DataError
from data_processing.checkpoint import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from data_processing.grid import NUM_POI_CATEGORIES
from data_processing.walks import feature_batch, sample_corpus_walks
from urban_models.numerics import (
    OptimizerState, Rng, check_loss, count_parameters, dropout, ensure_finite, layer_norm, matmul, softmax,
    train_step, trainable_parameters,
)

logger = logging.getLogger(__name__)


def masked_count(rho, payload):
    """round-half-up of rho * payload"""
    return int(math.floor(rho * payload + 0.5))


@dataclass
class MaskSet:
    positions: np.ndarray  # sorted, subset of 1..payload
    payload: int

    def as_bool(self):
        mask = np.zeros(self.payload + 1, dtype=bool)
        mask[self.positions] = True
        return mask

    def __len__(self):
        return len(self.positions)


def sample_mask(payload, rho, rng):
    """Uniform sample without replacement of round(rho * payload) positions from 1..payload"""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"masking ratio must be in [0, 1], got {rho}")
    m = masked_count(rho, payload)
    positions = rng.choice(np.arange(1, payload + 1), size=m, replace=False) if m else np.zeros(0, dtype=np.int64)
    return MaskSet(positions=np.sort(np.asarray(positions, dtype=np.int64)), payload=payload)


@dataclass
class EncoderConfig:
    d: int = 144
    heads: int = 4
    enc_layers: int = 3
    dec_layers: int = 1
    dropout: float = 0.1
    k: int = 8
    l: int = 4
    p: float = 1.0
    q: float = 0.1
    rho: float = 0.3
    use_positions: bool = True
    learning_rate: float = 1e-7
    epochs: int = 100
    batch: int = 64
    frozen_walks: bool = False
    divergence_threshold: float = 1e6
    threads: int = 1

    @property
    def seq_len(self):
        return self.k * self.l + 1

    def validate(self):
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"embedding dim {self.d} must be a positive multiple of the head count {self.heads}")
        if self.enc_layers < 1 or self.dec_layers < 0:
            raise ConfigError("need at least one encoder layer and a non-negative decoder depth")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"masking ratio must be in [0, 1], got {self.rho}")
        if self.batch < 1 or self.epochs < 0:
            raise ConfigError("batch size must be >= 1 and epochs >= 0")
        return self

    @classmethod
    def from_run_config(cls, cfg):
        return cls(d=cfg.d, heads=cfg.heads, enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers,
                   dropout=cfg.dropout, k=cfg.k, l=cfg.l, p=cfg.p, q=cfg.q, rho=cfg.rho,
                   use_positions=cfg.use_positions, learning_rate=cfg.lr_pre, epochs=cfg.pretrain_epochs,
                   batch=cfg.pretrain_batch, frozen_walks=cfg.frozen_walks,
                   divergence_threshold=cfg.divergence_threshold, threads=cfg.threads).validate()


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d, heads, rate):
        super().__init__()
        if d % heads:
            raise ConfigError(f"d={d} is not divisible by heads={heads}")
        self.heads = heads
        self.head_dim = d // heads
        self.rate = rate
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)

    def forward(self, x, generator=None):
        """Softmax(Q K^T / sqrt(d_head)) V per head; returns (output, attention weights)"""
        B, L, d = x.shape

        def split(t):
            return t.view(B, L, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        attn = softmax(matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim), dim=-1)
        out = matmul(dropout(attn, self.rate, self.training, generator), v)
        out = out.transpose(1, 2).reshape(B, L, d)
        return self.wo(out), attn


class TransformerBlock(nn.Module):
    """Post-norm block: Z' = LN(S + Drop(Attn(S))), Z = LN(Z' + Drop(FFN(Z')))"""

    def __init__(self, d, heads, rate):
        super().__init__()
        self.rate = rate
        self.attention = MultiHeadSelfAttention(d, heads, rate)
        self.ffn_in = nn.Linear(d, 4 * d)
        self.ffn_out = nn.Linear(4 * d, d)
        self.ln1_weight = nn.Parameter(torch.ones(d))
        self.ln1_bias = nn.Parameter(torch.zeros(d))
        self.ln2_weight = nn.Parameter(torch.ones(d))
        self.ln2_bias = nn.Parameter(torch.zeros(d))

    def forward(self, x, generator=None):
        att, weights = self.attention(x, generator)
        x = layer_norm(x + dropout(att, self.rate, self.training, generator), self.ln1_weight, self.ln1_bias)
        ffn = self.ffn_out(F.gelu(self.ffn_in(x)))
        x = layer_norm(x + dropout(ffn, self.rate, self.training, generator), self.ln2_weight, self.ln2_bias)
        return x, weights


class CellEncoder(nn.Module):
    """
    Class to store the encoder/decoder parameters of the cell embedding model
    """

    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config.validate()
        d = config.d
        # parameter init draws from its own torch stream
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(Rng(seed, ("encoder-init",)).integers(0, 2 ** 31 - 1)))
            self.mask_token = nn.Parameter(0.02 * torch.randn(NUM_POI_CATEGORIES))
            self.input_proj = nn.Linear(NUM_POI_CATEGORIES, d)
            if config.use_positions:
                self.positions = nn.Parameter(0.02 * torch.randn(config.seq_len, d))
            else:
                self.register_buffer("positions", torch.zeros(config.seq_len, d))
            self.encoder_blocks = nn.ModuleList(
                [TransformerBlock(d, config.heads, config.dropout) for _ in range(config.enc_layers)])
            self.decoder_blocks = nn.ModuleList(
                [TransformerBlock(d, config.heads, config.dropout) for _ in range(config.dec_layers)])
            self.out_hidden = nn.Linear(d, d)
            self.out_proj = nn.Linear(d, NUM_POI_CATEGORIES)
        logger.info(f"Cell encoder with {count_parameters(self)} trainable parameters "
                    f"(d={d}, heads={config.heads}, L_e={config.enc_layers}, L_d={config.dec_layers})")

    def apply_mask(self, S, mask):
        """Replace masked rows of S by the mask token"""
        if mask is None:
            return S
        mask = torch.as_tensor(mask, dtype=torch.bool)
        return torch.where(mask.unsqueeze(-1), self.mask_token.expand_as(S), S)

    def encode(self, S, mask=None, generator=None, return_attention=False):
        """Z^e of shape (batch, k*l+1, d); accepts unbatched (k*l+1, 15) input too"""
        S = torch.as_tensor(S, dtype=self.input_proj.weight.dtype)
        unbatched = S.dim() == 2
        if unbatched:
            S = S.unsqueeze(0)
            mask = None if mask is None else torch.as_tensor(mask).unsqueeze(0)
        if S.shape[1] != self.config.seq_len or S.shape[2] != NUM_POI_CATEGORIES:
            raise DataError(f"feature sequence has shape {tuple(S.shape[1:])}, "
                            f"expected ({self.config.seq_len}, {NUM_POI_CATEGORIES})")
        x = self.input_proj(self.apply_mask(S, mask)) + self.positions
        attention = []
        for block in self.encoder_blocks:
            x, weights = block(x, generator)
            attention.append(weights)
        ensure_finite(x, "encoder activations")
        if unbatched:
            x = x.squeeze(0)
            attention = [a.squeeze(0) for a in attention]
        return (x, attention) if return_attention else x

    def decode_and_project(self, Ze, generator=None):
        """L_d decoder blocks over Z^e, then the output MLP back to POI space"""
        unbatched = Ze.dim() == 2
        x = Ze.unsqueeze(0) if unbatched else Ze
        for block in self.decoder_blocks:
            x, _ = block(x, generator)
        Zp = self.out_proj(F.gelu(self.out_hidden(x)))
        ensure_finite(Zp, "decoder activations")
        return Zp.squeeze(0) if unbatched else Zp

    def forward(self, S, mask=None, generator=None):
        return self.decode_and_project(self.encode(S, mask, generator), generator)


def reconstruction_loss(Zp, S, mask):
    """
    Squared error summed over the 15 POI dims of each masked row, averaged
    over all masked rows of the batch. None when nothing is masked.
    """
    S = torch.as_tensor(S, dtype=Zp.dtype)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    n_masked = int(mask.sum())
    if n_masked == 0:
        logger.warning("Reconstruction loss requested with an empty mask, step skipped")
        return None
    row_error = ((Zp - S) ** 2).sum(dim=-1)
    return row_error[mask].sum() / n_masked


@dataclass
class CellEmbeddingSet:
    city: str
    vectors: np.ndarray  # (n_cells, d)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __getitem__(self, cell_id):
        if not 0 <= cell_id < len(self.vectors):
            raise DataError(f"{self.city}: no embedding for cell {cell_id}")
        return self.vectors[cell_id]

    def __len__(self):
        return len(self.vectors)


def _batch_masks(n, config, rng):
    payload = config.k * config.l
    return np.stack([sample_mask(payload, config.rho, rng).as_bool() for _ in range(n)])


def pretrain(model, corpus, seed=0, log_every=1):
    """
    Adam loop over the walk feature sequences of every city in the corpus.

    corpus: list of (CellGraph, poi_matrix). Walks are redrawn each epoch
    unless config.frozen_walks. Returns the per-epoch history as a list of
    {"epoch", "loss"} dicts.
    """
    config = model.config
    if not corpus:
        raise DataError("pretraining corpus is empty")
    state = OptimizerState(trainable_parameters(model), kind="adam", learning_rate=config.learning_rate)
    history = []
    frozen = None
    for epoch in range(config.epochs):
        walk_epoch = 0 if config.frozen_walks else epoch
        if frozen is None or not config.frozen_walks:
            features = [feature_batch(sample_corpus_walks(graph, config.k, config.l, config.p, config.q, seed,
                                                          epoch=walk_epoch, threads=config.threads), poi)
                        for graph, poi in corpus]
            frozen = np.concatenate(features, axis=0)
        data = frozen
        if len(data) == 0:
            raise DataError("pretraining corpus has no cells")

        epoch_rng = Rng(seed, ("pretrain", epoch))
        order = epoch_rng.permutation(len(data))
        model.train()
        losses = []
        for b, start in enumerate(range(0, len(data), config.batch)):
            idx = order[start:start + config.batch]
            S = torch.as_tensor(data[idx], dtype=torch.get_default_dtype())
            batch_rng = epoch_rng.substream("batch", b)
            mask = torch.as_tensor(_batch_masks(len(idx), config, batch_rng))
            Zp = model(S, mask, generator=batch_rng.torch)
            loss = reconstruction_loss(Zp, S, mask)
            if loss is None:
                continue
            value = train_step(loss, state)
            check_loss(value, config.divergence_threshold, f"pretrain epoch {epoch} batch {b}")
            logger.debug(f"pretrain epoch {epoch} batch {b}: loss {value:.6f}")
            losses.append(value)
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        history.append({"epoch": epoch, "loss": epoch_loss})
        if log_every and epoch % log_every == 0:
            logger.info(f"Pretrain epoch {epoch + 1}/{config.epochs}: loss {epoch_loss:.6f}")
    model.eval()
    return history


def extract_embeddings(model, graph, poi_matrix, seed=0, batch=256):
    """Row 0 of the encoder output for every cell, no masking, dropout off"""
    config = model.config
    walks = sample_corpus_walks(graph, config.k, config.l, config.p, config.q, seed, epoch="extract",
                                threads=config.threads)
    data = feature_batch(walks, poi_matrix)
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(data), batch):
            S = torch.as_tensor(data[start:start + batch], dtype=model.input_proj.weight.dtype)
            out.append(model.encode(S)[:, 0, :].detach().cpu().numpy().astype(np.float64))
    vectors = np.concatenate(out, axis=0) if out else np.zeros((0, config.d))
    logger.info(f"Extracted {len(vectors)} cell embeddings of dimension {config.d} for {graph.name}")
    return CellEmbeddingSet(city=graph.name, vectors=vectors)


def save_encoder(model, stem, seed=0, history=None):
    extra = {"config": asdict(model.config), "seed": seed, "history": history or []}
    return save_checkpoint(stem, "encoder", module_arrays(model), extra=extra)


def load_encoder(stem):
    """CellEncoder restored from a pretrain checkpoint, in eval mode"""
    arrays, manifest = load_checkpoint(stem, component="encoder", producer="pretrain")
    extra = manifest["extra"]
    model = CellEncoder(EncoderConfig(**extra["config"]).validate(), seed=extra.get("seed", 0))
    load_module_arrays(model, arrays, path=f"{stem}.json")
    model.eval()
    return model
