# This file is part of the UrbanVerse tool

# src/urban_models/numerics.py
"""
Dense-array substrate shared by the cell encoder and the denoiser.

Tensors are torch tensors; gradients come from torch's reverse-mode tape.
This module owns the pieces the models treat as a contract: shape-checked
ops, seeded random streams, gradient maps, Adam/AdamW state and the
finite-difference oracle used by the tests.
"""
import hashlib
import logging

import numpy as np
import torch
import torch.nn.functional as F

from common.errors import ConfigError, NumericDivergenceError, ShapeError, UrbanVerseError

logger = logging.getLogger(__name__)


def set_precision(bits):
    """Switch the default float width (32 for training, 64 for gradient checks)"""
    if bits == 64:
        torch.set_default_dtype(torch.float64)
    elif bits == 32:
        torch.set_default_dtype(torch.float32)
    else:
        raise ConfigError(f"precision must be 32 or 64, got {bits}")
    return torch.get_default_dtype()


def _label_key(label):
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """
    Seeded random stream with independent substreams per label path.

    Rng(seed).substream("walks", root, epoch) always yields the same numbers
    for the same (seed, labels), whatever else was drawn before.
    """

    def __init__(self, seed, labels=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.labels = tuple(str(label) for label in labels)
        seq = np.random.SeedSequence([self.seed] + [_label_key(label) for label in self.labels])
        # Philox is counter based, so substreams never overlap
        self.np = np.random.Generator(np.random.Philox(seq))
        hi, lo = seq.generate_state(2, dtype=np.uint32)
        self.torch = torch.Generator().manual_seed((int(hi) << 31) ^ int(lo))

    def substream(self, *labels):
        return Rng(self.seed, self.labels + tuple(labels))

    def normal(self, shape, dtype=None):
        return torch.randn(tuple(shape), generator=self.torch, dtype=dtype or torch.get_default_dtype())

    def uniform(self, shape, dtype=None):
        return torch.rand(tuple(shape), generator=self.torch, dtype=dtype or torch.get_default_dtype())

    def integers(self, low, high, size=None):
        return self.np.integers(low, high, size=size)

    def permutation(self, n):
        return self.np.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.np.choice(a, size=size, replace=replace, p=p)

    def __str__(self):
        return f"Rng(seed={self.seed}, labels={'/'.join(self.labels) or '-'})"


# Shape-checked ops

def _check_broadcast(op, a, b):
    try:
        torch.broadcast_shapes(tuple(a.shape), tuple(b.shape))
    except RuntimeError:
        raise ShapeError(op, a.shape, b.shape) from None


def matmul(a, b):
    inner_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if a.dim() == 0 or b.dim() == 0 or a.shape[-1] != inner_b:
        raise ShapeError("matmul", a.shape, b.shape)
    return torch.matmul(a, b)


def add(a, b):
    _check_broadcast("add", a, b)
    return a + b


def mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b


def softmax(x, dim=-1):
    # torch subtracts the row max internally, so finite inputs stay finite
    return torch.softmax(x, dim=dim)


def layer_norm(x, weight, bias, eps=1e-5):
    """LayerNorm over the last dim with learnable scale/shift"""
    if tuple(weight.shape) != tuple(x.shape[-1:]) or tuple(bias.shape) != tuple(x.shape[-1:]):
        raise ShapeError("layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def dropout(x, rate, training, generator=None):
    """Inverted dropout; identity in eval mode"""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(tuple(x.shape), generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def softplus(x):
    return F.softplus(x)


# Gradients and optimizers

def trainable_parameters(module):
    """Named map of the parameters that require gradients"""
    return {name: p for name, p in module.named_parameters() if p.requires_grad}


def count_parameters(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def backward(loss, params, retain_graph=False):
    """Reverse-mode gradients of a scalar loss as a name -> tensor map"""
    if loss.numel() != 1:
        raise ShapeError("backward", loss.shape)
    names = list(params.keys())
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names],
                                retain_graph=retain_graph, allow_unused=True)
    return {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}


class OptimizerState:
    """
    Adam/AdamW state over a named parameter map.

    Moment accumulators live in the wrapped torch optimizer; step_count only
    ever increases.
    """

    KINDS = ("adam", "adamw")

    def __init__(self, params, kind="adam", learning_rate=1e-3, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        kind = kind.lower()
        if kind not in self.KINDS:
            raise ConfigError(f"unknown optimizer kind {kind!r}, expected one of {self.KINDS}")
        if learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        self.kind = kind
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.params = dict(params)
        optimizer_cls = torch.optim.AdamW if kind == "adamw" else torch.optim.Adam
        self.optimizer = optimizer_cls(list(self.params.values()), lr=learning_rate, betas=betas,
                                       eps=eps, weight_decay=weight_decay)
        self.step_count = 0

    def moments(self, name):
        """First and second moment accumulators of one parameter (None before the first step)"""
        state = self.optimizer.state.get(self.params[name], {})
        return state.get("exp_avg"), state.get("exp_avg_sq")

    def __str__(self):
        return f"{self.kind} optimizer over {len(self.params)} tensors, lr={self.learning_rate}, step={self.step_count}"


def optimizer_step(state, grads):
    """Apply one bias-corrected Adam/AdamW update in place"""
    for name, p in state.params.items():
        if name not in grads:
            raise UrbanVerseError(f"optimizer_step: no gradient for parameter {name}")
        g = grads[name]
        if tuple(g.shape) != tuple(p.shape):
            raise ShapeError(f"optimizer_step[{name}]", p.shape, g.shape)
        p.grad = g.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step_count += 1
    return state


def train_step(loss, state):
    """backward + optimizer_step, returning the loss value"""
    grads = backward(loss, state.params)
    optimizer_step(state, grads)
    return float(loss.detach())


# Guards

def ensure_finite(tensor, what):
    if torch.isfinite(tensor).all():
        return tensor
    n_nan = int(torch.isnan(tensor).sum())
    n_inf = int(torch.isinf(tensor).sum())
    raise NumericDivergenceError(
        f"{what}: {n_nan} NaN and {n_inf} Inf values in a tensor of shape {tuple(tensor.shape)}; "
        f"the learning rate is probably too large")


def check_loss(loss_value, threshold, where):
    if not np.isfinite(loss_value) or loss_value > threshold:
        raise NumericDivergenceError(f"{where}: loss {loss_value:.6g} diverged (threshold {threshold:g})")
    return loss_value


# Finite-difference oracle

def finite_difference_error(loss_fn, params, h=1e-5, max_entries_per_tensor=None, rng=None):
    """
    Relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||)
    between autograd and central differences.

    loss_fn() must rebuild the loss from the current parameter values.
    Run in 64-bit mode with dropout off.
    """
    params = dict(params)
    loss = loss_fn()
    analytic_grads = backward(loss, params)
    analytic, numeric = [], []
    with torch.no_grad():
        for name, p in params.items():
            flat = p.data.view(-1)
            entries = np.arange(flat.numel())
            if max_entries_per_tensor is not None and flat.numel() > max_entries_per_tensor:
                picker = rng if rng is not None else Rng(0, ("fd", name))
                entries = np.sort(picker.choice(entries, size=max_entries_per_tensor, replace=False))
            g = analytic_grads[name].reshape(-1)
            for i in entries:
                orig = flat[i].item()
                flat[i] = orig + h
                loss_plus = float(loss_fn())
                flat[i] = orig - h
                loss_minus = float(loss_fn())
                flat[i] = orig
                numeric.append((loss_plus - loss_minus) / (2.0 * h))
                analytic.append(float(g[i]))
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
