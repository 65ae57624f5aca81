"""Functional layers over a :class:`~caps.core.ParameterStore`.

Weights are stored ``(in, out)`` so ``uniform_fan_in`` reads fan-in from
``shape[0]``. Layer-norm gains are stored as offsets from one so every
parameter can be zero- or fan-in-initialised.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .core import ParameterStore


def linear_spec(prefix: str, d_in: int, d_out: int, zero: bool = False) -> list[tuple]:
    return [(f"{prefix}.weight", (d_in, d_out), "zeros" if zero else "uniform_fan_in"),
            (f"{prefix}.bias", (d_out,), "zeros")]


def mlp2_spec(prefix: str, d_in: int, d_hidden: int, d_out: int,
              zero_last: bool = False) -> list[tuple]:
    return (linear_spec(f"{prefix}.fc1", d_in, d_hidden)
            + linear_spec(f"{prefix}.fc2", d_hidden, d_out, zero=zero_last))


def layer_norm_spec(prefix: str, d: int) -> list[tuple]:
    return [(f"{prefix}.gain", (d,), "zeros"), (f"{prefix}.shift", (d,), "zeros")]


def linear(x: torch.Tensor, p: ParameterStore, prefix: str) -> torch.Tensor:
    return x @ p[f"{prefix}.weight"] + p[f"{prefix}.bias"]


def mlp2(x: torch.Tensor, p: ParameterStore, prefix: str) -> torch.Tensor:
    return linear(torch.relu(linear(x, p, f"{prefix}.fc1")), p, f"{prefix}.fc2")


def layer_norm(x: torch.Tensor, p: ParameterStore, prefix: str, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * (1.0 + p[f"{prefix}.gain"]) + p[f"{prefix}.shift"]


def attention_spec(prefix: str, d: int) -> list[tuple]:
    out = []
    for name in ("q", "k", "v", "o"):
        out += linear_spec(f"{prefix}.{name}", d, d)
    return out


def multi_head_attention(x: torch.Tensor, valid: torch.Tensor, p: ParameterStore,
                         prefix: str, n_heads: int) -> torch.Tensor:
    """Scaled dot-product self-attention over tokens; invalid keys are ignored.

    x: [..., N, d]; valid: [..., N] bool.
    """
    *lead, n, d = x.shape
    dh = d // n_heads

    def heads(t):
        return t.reshape(*lead, n, n_heads, dh).transpose(-2, -3)  # [..., H, N, dh]

    q = heads(linear(x, p, f"{prefix}.q"))
    k = heads(linear(x, p, f"{prefix}.k"))
    v = heads(linear(x, p, f"{prefix}.v"))
    logits = q @ k.transpose(-1, -2) / dh ** 0.5  # [..., H, N, N]
    key_mask = valid[..., None, None, :]
    logits = logits.masked_fill(~key_mask, float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    out = (attn @ v).transpose(-2, -3).reshape(*lead, n, d)
    return linear(out, p, f"{prefix}.o")


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """Elementwise Huber loss with unit threshold."""
    return F.smooth_l1_loss(x, torch.zeros_like(x), reduction="none", beta=1.0)


def cross_entropy(logits: torch.Tensor, target_probs: torch.Tensor) -> torch.Tensor:
    """-sum(p * log_softmax(logits)) over the last axis."""
    return -(target_probs * torch.log_softmax(logits, dim=-1)).sum(-1)
