"""Vector quantization of the ego feature: codebook, losses and health metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .core import RngState, straight_through, stop_gradient
from .ops import mlp2, mlp2_spec

log = logging.getLogger(__name__)

DEFAULT_K = 64
DEFAULT_BETA = 0.25


@dataclass
class Codebook:
    vectors: torch.Tensor                 # [K, d_e]
    usage_counts: np.ndarray = None       # assignments in the current epoch
    idle_epochs: np.ndarray = None        # consecutive epochs without assignments

    def __post_init__(self):
        K = self.vectors.shape[0]
        if K < 2:
            raise ValueError("codebook needs K >= 2")
        if self.usage_counts is None:
            self.usage_counts = np.zeros(K, dtype=np.int64)
        if self.idle_epochs is None:
            self.idle_epochs = np.zeros(K, dtype=np.int64)

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def record(self, indices) -> None:
        np.add.at(self.usage_counts, np.asarray(indices, dtype=np.int64), 1)

    def close_epoch(self) -> None:
        """Roll the per-epoch usage into idle counters and reset usage."""
        used = self.usage_counts > 0
        self.idle_epochs = np.where(used, 0, self.idle_epochs + 1)
        self.usage_counts = np.zeros_like(self.usage_counts)


@dataclass
class QuantizationResult:
    index: int
    z_q: np.ndarray
    distance2: float


@dataclass
class VQLossTerms:
    reconstruction: torch.Tensor
    codebook: torch.Tensor
    commitment: torch.Tensor
    beta: float
    indices: torch.Tensor = field(repr=False, default=None)

    @property
    def total(self) -> torch.Tensor:
        return self.reconstruction + self.codebook + self.beta * self.commitment


def decoder_param_spec(d_e: int, prefix: str = "vq.decoder") -> list[tuple]:
    return mlp2_spec(prefix, d_e, d_e, d_e)


def mlp_decoder(params, prefix: str = "vq.decoder") -> Callable[[torch.Tensor], torch.Tensor]:
    return lambda z: mlp2(z, params, prefix)


def nearest_codes(z: torch.Tensor, vectors: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """argmin_j ||z - e_j||^2 per row; torch.argmin returns the first minimum on ties."""
    d2 = ((z[..., None, :] - vectors) ** 2).sum(-1)
    idx = torch.argmin(d2, dim=-1)
    return idx, d2.gather(-1, idx[..., None])[..., 0]


def quantize(z, cb: Codebook, training: bool = False) -> QuantizationResult:
    zt = torch.as_tensor(np.asarray(z, dtype=np.float64) if not isinstance(z, torch.Tensor) else z)
    if zt.shape[-1] != cb.dim or zt.dim() != 1:
        raise ValueError(f"expected a vector of dim {cb.dim}, got shape {tuple(zt.shape)}")
    if not torch.isfinite(zt).all():
        raise ValueError("z must be finite")
    vec = cb.vectors.detach().to(zt.dtype)
    idx, d2 = nearest_codes(zt, vec)
    k = int(idx)
    if training:
        cb.record([k])
    return QuantizationResult(k, vec[k].numpy().copy(), float(d2))


def vq_forward(z_e: torch.Tensor, vectors: torch.Tensor,
               decoder: Callable[[torch.Tensor], torch.Tensor]):
    """Returns (z_q with straight-through gradient, reconstruction, indices, e_k).

    ``e_k`` carries gradient to the codebook; ``z_q`` carries it only to ``z_e``.
    """
    if z_e.shape[-1] != vectors.shape[-1]:
        raise ValueError(f"dim mismatch: z {z_e.shape[-1]} vs codebook {vectors.shape[-1]}")
    idx, _ = nearest_codes(stop_gradient(z_e), stop_gradient(vectors))
    e_k = vectors[idx]
    z_q = straight_through(z_e, e_k)
    return z_q, decoder(z_q), idx, e_k


def vq_loss(z_e: torch.Tensor, vectors: torch.Tensor,
            decoder: Callable[[torch.Tensor], torch.Tensor], beta: float = DEFAULT_BETA,
            reduce: bool = True) -> tuple[VQLossTerms, torch.Tensor]:
    """Reconstruction, codebook and commitment terms; returns (terms, z_q).

    reconstruction = ||dec(z_q) - sg[z_e]||^2 / d_e
    codebook       = ||sg[z_e] - e_k||^2
    commitment     = ||z_e - sg[e_k]||^2
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    z_q, recon, idx, e_k = vq_forward(z_e, vectors, decoder)
    d = z_e.shape[-1]
    rec = ((recon - stop_gradient(z_e)) ** 2).sum(-1) / d
    cbk = ((stop_gradient(z_e) - e_k) ** 2).sum(-1)
    com = ((z_e - stop_gradient(e_k)) ** 2).sum(-1)
    if reduce and rec.dim() > 0:
        rec, cbk, com = rec.mean(), cbk.mean(), com.mean()
    return VQLossTerms(rec, cbk, com, beta, idx), z_q


@dataclass
class CodebookMetrics:
    perplexity: float
    histogram: np.ndarray
    n_dead: int


def codebook_metrics(assignments: Sequence[int], K: int) -> CodebookMetrics:
    a = np.asarray(assignments, dtype=np.int64)
    if a.size == 0:
        raise ValueError("empty assignment list")
    if a.min() < 0 or a.max() >= K:
        raise ValueError(f"assignment outside [0, {K})")
    hist = np.bincount(a, minlength=K)
    p = hist[hist > 0] / a.size
    return CodebookMetrics(float(math.exp(-(p * np.log(p)).sum())), hist, int((hist == 0).sum()))


def reinit_dead_codes(cb: Codebook, batch_embeddings, rng: RngState, patience: int = 2,
                      sigma: float = 0.01) -> list[int]:
    """Reset codes idle for >= ``patience`` epochs to a random batch embedding plus noise.

    Mutates ``cb`` in place and returns the reset indices.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    emb = np.asarray(batch_embeddings.detach() if isinstance(batch_embeddings, torch.Tensor)
                     else batch_embeddings, dtype=np.float64)
    dead = np.flatnonzero(cb.idle_epochs >= patience)
    if dead.size == 0:
        return []
    if emb.size == 0:
        log.warning("reinit_dead_codes: empty batch, %d dead codes left as is", dead.size)
        return []
    emb = emb.reshape(-1, cb.dim)
    gen = rng.generator()
    picks = gen.integers(0, len(emb), size=dead.size)
    new = emb[picks] + gen.normal(0.0, sigma, size=(dead.size, cb.dim))
    with torch.no_grad():
        cb.vectors[torch.as_tensor(dead)] = torch.as_tensor(new, dtype=cb.vectors.dtype)
    cb.idle_epochs[dead] = 0
    cb.usage_counts[dead] = 0
    return dead.tolist()
