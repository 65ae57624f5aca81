"""Two-stage training: joint planner + VQ clustering, then cluster-weighted retraining."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .core import (AdamState, ConfigurationError, NonFiniteGradientError, ParameterStore,
                   RngState, adam_step, init_parameters)
from .encoder import EncoderConfig, SceneTensors, encode_tensors, encoder_param_spec, featurize
from .planner import PlannerConfig, imitation_loss, planner_forward, planner_param_spec
from .scenegen import Scene
from .vq import Codebook, codebook_metrics, decoder_param_spec, mlp_decoder, nearest_codes, \
    reinit_dead_codes, vq_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class ModelConfig:
    d_e: int = 64
    n_heads: int = 4
    n_layers: int = 2
    K: int = 64
    hidden: int = 128

    def encoder(self, mode: str) -> EncoderConfig:
        return EncoderConfig(self.d_e, self.n_heads, self.n_layers, mode)

    def planner(self, **kw) -> PlannerConfig:
        return PlannerConfig(d_e=self.d_e, hidden=self.hidden, **kw)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    lambda_vq: float = 1.0
    beta: float = 0.25
    clamp_w_max: float = 10.0
    weight_mode: str = "resample"
    stage2_init: str = "fresh"
    reinit_dead: bool = True
    patience: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.clamp_w_max < 1:
            raise ConfigurationError("clamp_w_max must be >= 1")
        if self.weight_mode not in ("resample", "loss_scale"):
            raise ConfigurationError(f"unknown weight_mode {self.weight_mode!r}")
        if self.stage2_init not in ("fresh", "finetune"):
            raise ConfigurationError(f"unknown stage2_init {self.stage2_init!r}")


# ---------------------------------------------------------------------------
# data and checkpoints


@dataclass
class PreparedData:
    scene_ids: list[int]
    full: SceneTensors
    causal: SceneTensors
    gt_future: torch.Tensor      # [N, T_f, 2]

    def __len__(self) -> int:
        return len(self.scene_ids)


def prepare(scenes: list[Scene]) -> PreparedData:
    """Model inputs only; family labels are deliberately left behind."""
    if not scenes:
        raise ValueError("empty dataset")
    gt = torch.as_tensor(np.stack([s.ego.future[:, :2] for s in scenes]), dtype=torch.float32)
    return PreparedData([s.scene_id for s in scenes], featurize(scenes, "full_horizon"),
                        featurize(scenes, "causal"), gt)


def model_param_spec(model: ModelConfig) -> list[tuple]:
    enc = model.encoder("full_horizon")
    return (encoder_param_spec("encoder.cluster", enc)
            + encoder_param_spec("encoder.causal", enc)
            + [("vq.codebook", (model.K, model.d_e), "uniform_fan_in")]
            + decoder_param_spec(model.d_e)
            + planner_param_spec(model.planner()))


@dataclass
class Checkpoint:
    params: ParameterStore
    model: ModelConfig
    meta: dict = field(default_factory=dict)

    @property
    def codebook(self) -> Codebook:
        state = self.meta.get("codebook", {})
        usage = np.asarray(state["usage_counts"], dtype=np.int64) if "usage_counts" in state else None
        idle = np.asarray(state["idle_epochs"], dtype=np.int64) if "idle_epochs" in state else None
        return Codebook(self.params["vq.codebook"], usage, idle)

    @property
    def log(self) -> list[dict]:
        return self.meta.get("log", [])

    def full_meta(self) -> dict:
        return {**self.meta, "model": asdict(self.model)}

    def to_bytes(self) -> bytes:
        return ckpt_io.encode_checkpoint(self.params.to_numpy(), self.full_meta())

    def payload_crc(self) -> int:
        return ckpt_io.payload_crc(self.to_bytes())

    def save(self, path) -> int:
        return ckpt_io.save(path, self.params.to_numpy(), self.full_meta())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = ckpt_io.load(path)
        model = ModelConfig(**meta.pop("model"))
        params = ParameterStore({n: torch.from_numpy(a) for n, a in arrays.items()})
        return cls(params, model, meta)


def _snapshot(params: ParameterStore, model: ModelConfig, meta: dict) -> Checkpoint:
    return Checkpoint(params.clone(), model, dict(meta))


# ---------------------------------------------------------------------------
# stage 1


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def _grad_step(loss: torch.Tensor, trainable: ParameterStore, opt: AdamState,
               last_good: Checkpoint, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at {where}", last_good)
    trainable.zero_grad()
    loss.backward()
    try:
        adam_step(trainable, opt)
    except NonFiniteGradientError as exc:
        raise TrainingError(f"{exc} at {where}", last_good) from None


def stage1_loss(data: PreparedData, idx, params: ParameterStore, model: ModelConfig,
                cfg: TrainConfig, pcfg: PlannerConfig):
    st = data.full.index(idx)
    tokens, _ = encode_tensors(st, params, "encoder.cluster", model.encoder("full_horizon"))
    z = tokens[:, 0]
    vqt, z_q = vq_loss(z, params["vq.codebook"], mlp_decoder(params), cfg.beta)
    gt = data.gt_future[idx].to(z.dtype)
    out = planner_forward(z_q, params, gt[:, -1])
    pl = imitation_loss(gt, out, pcfg)
    return pl.total + cfg.lambda_vq * vqt.total, pl, vqt, z


def train_stage1(data: PreparedData | list[Scene], cfg: TrainConfig | None = None,
                 model: ModelConfig | None = None, planner_cfg: PlannerConfig | None = None,
                 max_steps: int | None = None) -> Checkpoint:
    """Jointly train the clustering encoder, VQ codebook/decoder and the generative planner.

    The planner decodes from the quantized ego feature (straight-through), so the
    codes have to carry the ego's future behaviour.
    """
    cfg = cfg or TrainConfig()
    model = model or ModelConfig()
    pcfg = planner_cfg or model.planner()
    if not isinstance(data, PreparedData):
        data = prepare(data)
    root = RngState(cfg.seed)
    params = init_parameters(model_param_spec(model), root.split(0))
    trainable = params.subset("encoder.cluster").merge(params.subset("vq.")).merge(
        params.subset("planner."))
    cb = Codebook(params["vq.codebook"])
    opt = AdamState(lr=cfg.lr)
    gen = root.split(1).generator()
    reinit_rng = root.split(2)
    meta = {"stage": 1, "train": asdict(cfg), "planner": _planner_meta(pcfg), "log": [],
            "step_losses": []}
    step = 0
    for epoch in range(cfg.epochs):
        last_good = _snapshot(params, model, meta)
        sums = np.zeros(3)
        n_batches = 0
        pool, assigned = [], []
        for idx in _batches(gen.permutation(len(data)), cfg.batch_size):
            loss, pl, vqt, z = stage1_loss(data, idx, params, model, cfg, pcfg)
            _grad_step(loss, trainable, opt, last_good, f"stage1 epoch {epoch} step {step}")
            cb.record(vqt.indices.numpy())
            assigned.append(vqt.indices.numpy())
            pool.append(z.detach())
            sums += [loss.item(), pl.total.item(), vqt.total.item()]
            meta["step_losses"].append(loss.item())
            n_batches += 1
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        metrics = codebook_metrics(np.concatenate(assigned), model.K)
        cb.close_epoch()
        reset = []
        if cfg.reinit_dead and cfg.lambda_vq > 0:
            reset = reinit_dead_codes(cb, torch.cat(pool), reinit_rng.split(epoch), cfg.patience)
            if reset and "vq.codebook" in opt.m:
                opt.m["vq.codebook"][reset] = 0
                opt.v["vq.codebook"][reset] = 0
        means = sums / max(n_batches, 1)
        entry = {"stage": 1, "epoch": epoch, "loss": means[0], "imitation": means[1],
                 "vq": means[2], "perplexity": metrics.perplexity, "n_dead": metrics.n_dead,
                 "reinit": len(reset)}
        meta["log"].append(entry)
        log.info("stage1 epoch %d loss %.4f imit %.4f vq %.4f ppl %.2f dead %d", epoch,
                 *means, metrics.perplexity, metrics.n_dead)
        if max_steps is not None and step >= max_steps:
            break
    meta["codebook"] = {"usage_counts": cb.usage_counts.tolist(),
                        "idle_epochs": cb.idle_epochs.tolist()}
    return Checkpoint(params, model, meta)


def _planner_meta(p: PlannerConfig) -> dict:
    d = asdict(p)
    return d


# ---------------------------------------------------------------------------
# clustering and weights


def assign_clusters(data: PreparedData | list[Scene], ckpt: Checkpoint,
                    batch_size: int = 256) -> dict[int, int]:
    """scene_id -> nearest code of the full-horizon ego feature."""
    if not isinstance(data, PreparedData):
        data = prepare(data)
    vectors = ckpt.params["vq.codebook"].detach()
    if vectors.shape[1] != ckpt.model.d_e:
        raise ValueError(f"codebook dim {vectors.shape[1]} != encoder dim {ckpt.model.d_e}")
    out: dict[int, int] = {}
    enc = ckpt.model.encoder("full_horizon")
    with torch.no_grad():
        for idx in _batches(np.arange(len(data)), batch_size):
            tokens, _ = encode_tensors(data.full.index(idx), ckpt.params, "encoder.cluster", enc)
            k, _ = nearest_codes(tokens[:, 0], vectors)
            for i, kk in zip(idx, k.tolist()):
                out[data.scene_ids[i]] = int(kk)
    return out


@dataclass
class WeightTable:
    cluster_weights: dict[int, float]
    sample_weights: np.ndarray
    scene_ids: list[int]
    N: int
    C_active: int
    clamped: dict[int, bool]
    counts: dict[int, int]

    def to_dict(self) -> dict:
        return {"cluster_weights": {str(k): v for k, v in self.cluster_weights.items()},
                "counts": {str(k): v for k, v in self.counts.items()},
                "clamped": {str(k): v for k, v in self.clamped.items()},
                "N": self.N, "C_active": self.C_active,
                "assignments": {str(s): self.cluster_of(s) for s in self.scene_ids}}

    def cluster_of(self, scene_id: int) -> int:
        return self._cluster[scene_id]

    @classmethod
    def from_dict(cls, d: dict) -> "WeightTable":
        assignments = {int(s): int(k) for s, k in d["assignments"].items()}
        cw = {int(k): float(v) for k, v in d["cluster_weights"].items()}
        return _table(assignments, cw, {int(k): bool(v) for k, v in d["clamped"].items()},
                      {int(k): int(v) for k, v in d["counts"].items()}, int(d["C_active"]))


def _table(assignments, cw, clamped, counts, c_active) -> WeightTable:
    ids = sorted(assignments)
    t = WeightTable(cw, np.array([cw[assignments[s]] for s in ids]), ids, len(ids), c_active,
                    clamped, counts)
    t._cluster = dict(assignments)
    return t


def compute_weights(assignments: dict[int, int], K: int | None = None,
                    clamp_w_max: float = 10.0) -> WeightTable:
    """w(c) = min(N / (C_active * n_c), clamp_w_max) for each non-empty cluster."""
    if not assignments:
        raise ValueError("empty assignments")
    counts: dict[int, int] = {}
    for k in assignments.values():
        if K is not None and not 0 <= k < K:
            raise ValueError(f"cluster {k} outside [0, {K})")
        counts[k] = counts.get(k, 0) + 1
    N, C = len(assignments), len(counts)
    cw, clamped = {}, {}
    for k in sorted(counts):
        raw = N / (C * counts[k])
        cw[k] = min(raw, clamp_w_max)
        clamped[k] = raw > clamp_w_max
    return _table(assignments, cw, clamped, dict(sorted(counts.items())), C)


def _as_generator(rng) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngState) else rng


def priority_sampler(weights, n_draws: int, rng) -> np.ndarray:
    """Indices drawn with replacement, P(i) = w_i / sum(w), by inverse CDF."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    w = np.asarray(weights.sample_weights if isinstance(weights, WeightTable) else weights,
                   dtype=np.float64)
    cdf = np.cumsum(w)
    total = cdf[-1]
    if not total > 0:
        raise ValueError("all weights are zero")
    u = _as_generator(rng).random(n_draws)
    return np.minimum(np.searchsorted(cdf, u * total, side="right"), len(w) - 1)


def uniform_sampler(n: int, n_draws: int, rng) -> np.ndarray:
    """Uniform draws with replacement; consumes the RNG exactly like priority_sampler."""
    u = _as_generator(rng).random(n_draws)
    return np.minimum(np.floor(u * n).astype(np.int64), n - 1)


# ---------------------------------------------------------------------------
# stage 2


def stage2_sample_losses(data: PreparedData, idx, params: ParameterStore, model: ModelConfig,
                         pcfg: PlannerConfig) -> torch.Tensor:
    st = data.causal.index(idx)
    tokens, _ = encode_tensors(st, params, "encoder.causal", model.encoder("causal"))
    gt = data.gt_future[idx]
    out = planner_forward(tokens[:, 0], params, gt[:, -1])
    return imitation_loss(gt, out, pcfg, reduce=False).total


def train_stage2(data: PreparedData | list[Scene], weights: WeightTable | None,
                 cfg: TrainConfig | None, stage1: Checkpoint,
                 planner_cfg: PlannerConfig | None = None) -> Checkpoint:
    """Train the causal planner; ``weights=None`` gives the uniform baseline.

    resample: each epoch draws N indices with replacement (priority or uniform).
    loss_scale: each epoch is a uniform permutation and per-sample losses are
    multiplied by w_i / mean(w_batch).
    """
    cfg = cfg or TrainConfig(epochs=30)
    model = stage1.model
    pcfg = planner_cfg or model.planner()
    if not isinstance(data, PreparedData):
        data = prepare(data)
    if weights is not None:
        ids = set(weights.scene_ids)
        missing = [s for s in data.scene_ids if s not in ids]
        if missing:
            raise ValueError(f"weights do not cover scenes {missing[:5]}")
        pos = {s: i for i, s in enumerate(weights.scene_ids)}
        sample_w = np.array([weights.sample_weights[pos[s]] for s in data.scene_ids])
    root = RngState(cfg.seed)
    params = stage1.params.clone()
    if cfg.stage2_init == "fresh":
        fresh = init_parameters(encoder_param_spec("encoder.causal", model.encoder("causal"))
                                + planner_param_spec(model.planner()), root.split(10))
        for n, t in fresh.items():
            params.assign(n, t.detach())
    else:
        for n in params.names("encoder.causal."):
            params.assign(n, params[n.replace("encoder.causal.", "encoder.cluster.", 1)].detach())
    trainable = params.subset("encoder.causal.").merge(params.subset("planner."))
    opt = AdamState(lr=cfg.lr)
    gen = root.split(11).generator()
    meta = dict(stage1.meta)
    meta.update({"stage": 2, "train2": asdict(cfg), "planner": _planner_meta(pcfg),
                 "weighted": weights is not None, "log": list(stage1.meta.get("log", []))})
    meta.pop("step_losses", None)
    N = len(data)
    step = 0
    for epoch in range(cfg.epochs):
        last_good = _snapshot(params, model, meta)
        if cfg.weight_mode == "resample":
            order = (priority_sampler(sample_w, N, gen) if weights is not None
                     else uniform_sampler(N, N, gen))
        else:
            order = gen.permutation(N)
        total, n_batches = 0.0, 0
        for idx in _batches(order, cfg.batch_size):
            per_sample = stage2_sample_losses(data, idx, params, model, pcfg)
            if cfg.weight_mode == "loss_scale" and weights is not None:
                w = torch.as_tensor(sample_w[idx], dtype=per_sample.dtype)
                per_sample = per_sample * (w / w.mean())
            loss = per_sample.mean()
            _grad_step(loss, trainable, opt, last_good, f"stage2 epoch {epoch} step {step}")
            total += loss.item()
            n_batches += 1
            step += 1
        meta["log"].append({"stage": 2, "epoch": epoch, "loss": total / max(n_batches, 1)})
        log.info("stage2 epoch %d loss %.4f", epoch, total / max(n_batches, 1))
    return Checkpoint(params, model, meta)
