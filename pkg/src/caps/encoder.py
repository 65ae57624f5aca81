"""Vector-set scene encoder.

Each entity (ego, object track, map polyline) becomes one token: a
two-layer perceptron over its per-step features followed by a max-pool over
steps. Tokens then go through pre-norm multi-head self-attention blocks
with no positional encodings, so the encoder treats entities as a set.
Row 0 of the output is always the ego.

Two modes exist. ``full_horizon`` reads past and future states (clustering
encoder). ``causal`` reads only the past (deployable planner encoder).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .core import ParameterStore
from .ops import (attention_spec, layer_norm, layer_norm_spec, mlp2, mlp2_spec,
                  multi_head_attention)
from .scenegen import T_FUTURE, T_PAST, Scene

log = logging.getLogger(__name__)

MAX_OBJECTS = 7          # non-ego tracks; N_obj <= 8 including the ego
MAX_MAP = 8
MAP_POINTS = 10
KINDS = ("ego", "vehicle", "obstacle", "route_centerline", "lane_boundary")
N_FEATURES = 6 + len(KINDS)
N_TOKENS = 1 + MAX_OBJECTS + MAX_MAP


class InputValidationError(ValueError):
    pass


@dataclass
class EncoderConfig:
    d_e: int = 64
    n_heads: int = 4
    n_layers: int = 2
    mode: str = "full_horizon"

    def __post_init__(self):
        if self.d_e % self.n_heads:
            raise ValueError("d_e must be divisible by n_heads")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.mode not in ("full_horizon", "causal"):
            raise ValueError(f"unknown encoder mode {self.mode!r}")


@dataclass
class Embedding:
    tokens: np.ndarray          # [N_tok, d_e]
    token_kinds: list[str]
    valid_mask: np.ndarray      # [N_tok] bool


def encoder_param_spec(prefix: str, cfg: EncoderConfig) -> list[tuple]:
    d = cfg.d_e
    spec = mlp2_spec(f"{prefix}.embed", N_FEATURES, d, d)
    for i in range(cfg.n_layers):
        b = f"{prefix}.block{i}"
        spec += layer_norm_spec(f"{b}.ln1", d) + attention_spec(f"{b}.attn", d)
        spec += layer_norm_spec(f"{b}.ln2", d) + mlp2_spec(f"{b}.ffn", d, 2 * d, d)
    spec += layer_norm_spec(f"{prefix}.ln_out", d)
    return spec


# ---------------------------------------------------------------------------
# featurization


def _one_hot(kind: str) -> np.ndarray:
    v = np.zeros(len(KINDS))
    v[KINDS.index(kind)] = 1.0
    return v


def track_features(states: np.ndarray, kind: str) -> np.ndarray:
    """Per-step rows (x/10, y/10, heading, speed/10, dx, dy, kind one-hot)."""
    states = np.asarray(states, dtype=np.float64)
    if not np.all(np.isfinite(states)):
        raise InputValidationError(f"non-finite state in {kind} track")
    d = np.zeros((len(states), 2))
    d[1:] = np.diff(states[:, :2], axis=0)
    heading = np.arctan2(np.sin(states[:, 2]), np.cos(states[:, 2]))
    base = np.stack([states[:, 0] / 10, states[:, 1] / 10, heading, states[:, 3] / 10,
                     d[:, 0], d[:, 1]], axis=1)
    return np.concatenate([base, np.tile(_one_hot(kind), (len(states), 1))], axis=1)


def resample_polyline(points: np.ndarray, n: int = MAP_POINTS) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0.0, arc[-1], n)
    return np.stack([np.interp(s, arc, pts[:, 0]), np.interp(s, arc, pts[:, 1])], axis=1)


def polyline_features(points: np.ndarray, role: str) -> np.ndarray:
    pts = resample_polyline(points)
    d = np.zeros_like(pts)
    d[1:] = np.diff(pts, axis=0)
    seg = np.vstack([d[1:2], d[1:]])
    heading = np.arctan2(seg[:, 1], seg[:, 0])
    base = np.stack([pts[:, 0] / 10, pts[:, 1] / 10, heading, np.zeros(len(pts)),
                     d[:, 0] / 10, d[:, 1] / 10], axis=1)
    return np.concatenate([base, np.tile(_one_hot(role), (len(pts), 1))], axis=1)


@dataclass
class SceneTensors:
    tracks: torch.Tensor        # [B, 1+MAX_OBJECTS, T, F]
    track_valid: torch.Tensor   # [B, 1+MAX_OBJECTS]
    maps: torch.Tensor          # [B, MAX_MAP, MAP_POINTS, F]
    map_valid: torch.Tensor     # [B, MAX_MAP]
    truncated: int = 0

    def index(self, idx) -> "SceneTensors":
        return SceneTensors(self.tracks[idx], self.track_valid[idx], self.maps[idx],
                            self.map_valid[idx], self.truncated)

    def to(self, dtype) -> "SceneTensors":
        return SceneTensors(self.tracks.to(dtype), self.track_valid, self.maps.to(dtype),
                            self.map_valid, self.truncated)


def select_objects(scene: Scene, limit: int = MAX_OBJECTS):
    """Objects kept for encoding; beyond ``limit`` the nearest to the ego win."""
    objs = list(scene.objects)
    if len(objs) <= limit:
        return objs, 0
    ego_xy = scene.ego.past[-1, :2]
    dist = [float(np.hypot(*(o.past[-1, :2] - ego_xy))) for o in objs]
    order = sorted(range(len(objs)), key=lambda i: (dist[i], i))
    log.warning("scene %s: %d objects exceed capacity %d, keeping nearest",
                scene.scene_id, len(objs), limit)
    return [objs[i] for i in sorted(order[:limit])], len(objs) - limit


def featurize(scenes: list[Scene], mode: str, dtype=torch.float32) -> SceneTensors:
    T = T_PAST if mode == "causal" else T_PAST + T_FUTURE
    B = len(scenes)
    tracks = np.zeros((B, 1 + MAX_OBJECTS, T, N_FEATURES))
    tvalid = np.zeros((B, 1 + MAX_OBJECTS), dtype=bool)
    maps = np.zeros((B, MAX_MAP, MAP_POINTS, N_FEATURES))
    mvalid = np.zeros((B, MAX_MAP), dtype=bool)
    truncated = 0
    for b, sc in enumerate(scenes):
        objs, cut = select_objects(sc)
        truncated += cut
        for j, tr in enumerate([sc.ego, *objs]):
            states = tr.past if mode == "causal" else tr.states()
            tracks[b, j] = track_features(states[:T], "ego" if j == 0 else tr.kind)
            tvalid[b, j] = True
        for j, pl in enumerate(sc.map[:MAX_MAP]):
            maps[b, j] = polyline_features(pl.points, pl.role)
            mvalid[b, j] = True
    return SceneTensors(torch.from_numpy(tracks).to(dtype), torch.from_numpy(tvalid),
                        torch.from_numpy(maps).to(dtype), torch.from_numpy(mvalid), truncated)


# ---------------------------------------------------------------------------
# network


def embed_entity(features: torch.Tensor, params: ParameterStore, prefix: str) -> torch.Tensor:
    """[..., T, F] per-step features -> [..., d_e] token (max over steps)."""
    return mlp2(features, params, f"{prefix}.embed").amax(dim=-2)


def attend(tokens: torch.Tensor, valid: torch.Tensor, params: ParameterStore,
           prefix: str, cfg: EncoderConfig) -> torch.Tensor:
    x = tokens
    for i in range(cfg.n_layers):
        b = f"{prefix}.block{i}"
        x = x + multi_head_attention(layer_norm(x, params, f"{b}.ln1"), valid, params,
                                     f"{b}.attn", cfg.n_heads)
        x = x + mlp2(layer_norm(x, params, f"{b}.ln2"), params, f"{b}.ffn")
    x = layer_norm(x, params, f"{prefix}.ln_out")
    return x * valid[..., None].to(x.dtype)


def encode_tensors(st: SceneTensors, params: ParameterStore, prefix: str,
                   cfg: EncoderConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched encoder: returns tokens [B, N_tok, d_e] and the valid mask."""
    tok = torch.cat([embed_entity(st.tracks, params, prefix),
                     embed_entity(st.maps, params, prefix)], dim=1)
    valid = torch.cat([st.track_valid, st.map_valid], dim=1)
    return attend(tok, valid, params, prefix, cfg), valid


def encode_scene(scene: Scene, cfg: EncoderConfig, params: ParameterStore,
                 prefix: str | None = None) -> Embedding:
    prefix = prefix or ("encoder.causal" if cfg.mode == "causal" else "encoder.cluster")
    st = featurize([scene], cfg.mode, dtype=params.dtype)
    with torch.no_grad():
        tokens, valid = encode_tensors(st, params, prefix, cfg)
    n_obj = min(len(scene.objects), MAX_OBJECTS)
    kinds = ["ego"] + ["object"] * MAX_OBJECTS + ["map"] * MAX_MAP
    valid_np = valid[0].numpy()
    # compact layout: ego, real objects, real map tokens
    keep = [0] + list(range(1, 1 + n_obj)) + [1 + MAX_OBJECTS + j for j in range(MAX_MAP)
                                              if valid_np[1 + MAX_OBJECTS + j]]
    return Embedding(tokens[0, keep].numpy().copy(), [kinds[k] for k in keep],
                     valid_np[keep].copy())


def ego_feature(emb: Embedding) -> np.ndarray:
    return emb.tokens[0].copy()
