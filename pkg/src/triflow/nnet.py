"""Differentiable building blocks: attention, timestep embeddings, AdaLN,
a gradient-evaluation contract over named parameter groups, and AdamW.

Runs on torch CPU tensors. Forward passes are deterministic for fixed inputs;
reductions use torch's fixed CPU kernels, and training code never uses
nondeterministic ops.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import NumericalError, ShapeError

LAYERNORM_EPS = 1e-5


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              scale: float | None = None,
              mask: torch.Tensor | None = None) -> torch.Tensor:
    """Bidirectional scaled-dot-product attention over [..., heads, S, hd] blocks.

    Softmax is stabilized by subtracting the rowwise max. ``mask`` is an
    optional boolean [S_q, S_k] tensor, True where attending is allowed.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise ShapeError(f"head dims differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k/v sequence lengths differ: {k.shape} vs {v.shape}")
    if q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"batch/head dims differ: q {q.shape}, k {k.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    logits = (q @ k.transpose(-1, -2)) * scale
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    logits = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.softmax(logits, dim=-1)
    return weights @ v


def timestep_embed(tau: torch.Tensor | float, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of a [0,1] timestep.

    dim/2 frequencies geometric from 1 to 1e4; output interleaves
    (sin(tau*w_i), cos(tau*w_i)) pairs so each pair has unit squared norm.
    """
    if dim % 2:
        raise ShapeError(f"timestep embedding dim must be even, got {dim}")
    scalar_in = not torch.is_tensor(tau)
    if scalar_in:
        tau = torch.tensor([tau], dtype=torch.get_default_dtype())
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=tau.dtype)
    else:
        freqs = torch.pow(10_000.0, torch.arange(half, dtype=tau.dtype) / (half - 1))
    arg = tau[..., None] * freqs
    out = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1)
    out = out.reshape(*tau.shape, dim)
    return out[0] if scalar_in else out


class AdaLN(nn.Module):
    """LayerNorm modulated by a conditioning embedding.

    x is normalized per token (eps 1e-5, no affine), then scaled by
    (1 + gamma(cond)) and shifted by beta(cond). gamma/beta come from a
    one-hidden-layer map whose output layer is zero-initialized, so a fresh
    module is exactly LayerNorm.
    """

    def __init__(self, width: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, eps=LAYERNORM_EPS, elementwise_affine=False)
        self.hidden = nn.Linear(cond_dim, cond_dim)
        self.act = nn.SiLU()
        self.out = nn.Linear(cond_dim, 2 * width)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def modulation(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        gamma, beta = self.out(self.act(self.hidden(cond))).chunk(2, dim=-1)
        return gamma, beta

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.modulation(cond)
        return self.norm(x) * (1.0 + gamma) + beta


class ParamGroups:
    """Named, freezable views over a model's parameters.

    Group names are assigned once; toggling trainability flips requires_grad
    without touching values.
    """

    def __init__(self, groups: dict[str, list[tuple[str, nn.Parameter]]]):
        seen = set()
        for name, params in groups.items():
            for pname, _ in params:
                if pname in seen:
                    raise ShapeError(f"parameter {pname} assigned to two groups")
                seen.add(pname)
        self.groups = groups

    def names(self) -> list[str]:
        return list(self.groups)

    def parameters(self, group: str) -> list[nn.Parameter]:
        return [p for _, p in self.groups[group]]

    def set_trainable(self, trainable_names: list[str]) -> None:
        unknown = set(trainable_names) - set(self.groups)
        if unknown:
            raise ShapeError(f"unknown parameter groups {sorted(unknown)}")
        for name, params in self.groups.items():
            flag = name in trainable_names
            for _, p in params:
                p.requires_grad_(flag)

    def trainable(self) -> list[str]:
        return [name for name, params in self.groups.items()
                if params and params[0][1].requires_grad]


def grad_eval(param_groups: ParamGroups, loss_fn, batch):
    """Evaluate loss_fn(batch) and reverse-mode gradients per trainable group.

    Returns (loss detached scalar, {group: [grad tensors]}). Loss terms
    independent of a parameter yield exact zeros; frozen groups are absent.
    """
    loss = loss_fn(batch)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss from {getattr(loss_fn, '__name__', 'loss_fn')}: {loss.item()}")
    trainable = param_groups.trainable()
    flat = [p for g in trainable for p in param_groups.parameters(g)]
    grads = torch.autograd.grad(loss, flat, allow_unused=True)
    out, i = {}, 0
    for g in trainable:
        n = len(param_groups.parameters(g))
        out[g] = [gr if gr is not None else torch.zeros_like(p)
                  for gr, p in zip(grads[i:i + n], param_groups.parameters(g))]
        i += n
    return loss.detach(), out


def adamw_step(params: list[torch.Tensor], grads: list[torch.Tensor],
               moments: dict, lr: float, weight_decay: float = 0.01,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam step with bias correction, in place.

    ``moments`` holds 'm' and 'v' lists matching params plus a step counter;
    an empty dict is initialized on first use.
    """
    if not moments:
        moments["m"] = [torch.zeros_like(p) for p in params]
        moments["v"] = [torch.zeros_like(p) for p in params]
        moments["step"] = 0
    moments["step"] += 1
    t = moments["step"]
    b1, b2 = betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, moments["m"], moments["v"]):
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for one parameter list."""

    def __init__(self, params: list[torch.Tensor], lr: float, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.moments: dict = {}

    def step(self, grads: list[torch.Tensor]) -> None:
        adamw_step(self.params, grads, self.moments, self.lr, self.weight_decay)


def finite_difference_grad(param: torch.Tensor, loss_fn, h: float = 1e-5,
                           indices: list[tuple] | None = None) -> torch.Tensor:
    """Central finite differences of loss_fn() w.r.t. ``param`` (test oracle)."""
    grad = torch.zeros_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            dn = loss_fn().item()
            flat[i] = orig
            gflat[i] = (up - dn) / (2.0 * h)
    return grad
