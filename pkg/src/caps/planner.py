"""Target-conditioned trajectory decoder with contingency masking.

Pipeline per scene: score a fixed grid of target anchors and regress an
offset for each, generate one trajectory per (refined) target, mask
candidates that collide or break kinematic limits, and pick the best
admissible candidate by a learned score. When every candidate is masked a
maximum-deceleration stop is returned.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.interpolate import BSpline

from .core import ParameterStore, stop_gradient
from .ops import cross_entropy, mlp2, mlp2_spec, smooth_l1
from .scenegen import DT, EGO_RADIUS, T_FUTURE, Scene

log = logging.getLogger(__name__)

N_LON, N_LAT = 8, 8
LON_RANGE = (0.0, 40.0)
LAT_RANGE = (-8.0, 8.0)
N_BASIS = 8
POS_SCALE = 10.0
LATERAL_LIMIT = 3.5
MIN_SEGMENT = 0.5      # m; shorter segments carry no heading for the curvature test


def anchor_grid() -> np.ndarray:
    """[64, 2] anchors, longitudinal-major order."""
    lon = np.linspace(*LON_RANGE, N_LON)
    lat = np.linspace(*LAT_RANGE, N_LAT)
    return np.array([(x, y) for x in lon for y in lat])


ANCHORS = anchor_grid()
N_CANDIDATES = len(ANCHORS)


def _basis(T: int = T_FUTURE) -> np.ndarray:
    """[T, N_BASIS] clamped cubic B-spline basis at t = 1..T steps.

    The control point at t=0 is pinned to zero and dropped, so every
    residual starts at the current pose; locality lets a stop hold still.
    """
    k, n = 3, N_BASIS + 1
    inner = np.linspace(0.0, 1.0, n - k + 1)
    knots = np.concatenate([[0.0] * k, inner, [1.0] * k])
    tau = np.arange(1, T + 1) / T
    full = BSpline.design_matrix(tau, knots, k).toarray()
    return full[:, 1:]


@dataclass
class KinematicLimits:
    max_curvature: float = 0.3
    max_accel: float = 4.0
    max_speed: float = 18.0

    def __post_init__(self):
        if min(self.max_curvature, self.max_accel, self.max_speed) <= 0:
            raise ValueError("kinematic limits must be positive")


@dataclass
class PlannerConfig:
    d_e: int = 64
    hidden: int = 128
    lambda_offset: float = 1.0
    lambda_traj: float = 1.0
    lambda_score: float = 1.0
    tau: float = 1.0
    limits: KinematicLimits = field(default_factory=KinematicLimits)


def planner_param_spec(cfg: PlannerConfig, prefix: str = "planner") -> list[tuple]:
    d, h = cfg.d_e, cfg.hidden
    return (mlp2_spec(f"{prefix}.target", d + 2, h, 3, zero_last=True)
            + mlp2_spec(f"{prefix}.traj", d + 2, h, 2 * N_BASIS)
            + mlp2_spec(f"{prefix}.score", d + 2 * T_FUTURE, h, 1))


# ---------------------------------------------------------------------------
# differentiable heads


def propose_targets(ego_feat: torch.Tensor, params: ParameterStore, prefix: str = "planner"):
    """ego_feat [..., d] -> (offsets [..., M, 2], logits [..., M])."""
    anchors = torch.as_tensor(ANCHORS, dtype=ego_feat.dtype)
    e = ego_feat[..., None, :].expand(*ego_feat.shape[:-1], N_CANDIDATES, ego_feat.shape[-1])
    a = anchors.expand(*ego_feat.shape[:-1], N_CANDIDATES, 2)
    out = mlp2(torch.cat([e, a / POS_SCALE], dim=-1), params, f"{prefix}.target")
    return out[..., :2], out[..., 2]


def generate_trajectory(ego_feat: torch.Tensor, target: torch.Tensor, params: ParameterStore,
                        prefix: str = "planner") -> torch.Tensor:
    """(ego_feat [..., d], target [..., 2]) -> points [..., T_f, 2] in the ego frame.

    A straight line to the target plus a learned cubic B-spline residual; the
    residual basis vanishes at t=0 so the path starts at the current pose.
    """
    coeffs = mlp2(torch.cat([ego_feat, target / POS_SCALE], dim=-1), params, f"{prefix}.traj")
    coeffs = coeffs.reshape(*coeffs.shape[:-1], N_BASIS, 2)
    basis = torch.as_tensor(_basis(), dtype=ego_feat.dtype)
    tau = torch.arange(1, T_FUTURE + 1, dtype=ego_feat.dtype) / T_FUTURE
    line = tau[:, None] * target[..., None, :]
    return line + POS_SCALE * torch.einsum("tb,...bc->...tc", basis, coeffs)


def score_trajectories(ego_feat: torch.Tensor, trajs: torch.Tensor, params: ParameterStore,
                       prefix: str = "planner") -> torch.Tensor:
    """ego_feat [..., d], trajs [..., M, T, 2] -> logits [..., M]."""
    M = trajs.shape[-3]
    e = ego_feat[..., None, :].expand(*ego_feat.shape[:-1], M, ego_feat.shape[-1])
    flat = trajs.reshape(*trajs.shape[:-2], -1) / POS_SCALE
    return mlp2(torch.cat([e, flat], dim=-1), params, f"{prefix}.score")[..., 0]


@dataclass
class PlannerOutputs:
    offsets: torch.Tensor        # [B, M, 2]
    target_logits: torch.Tensor  # [B, M]
    candidates: torch.Tensor     # [B, M, T, 2]
    scores: torch.Tensor         # [B, M]
    gt_traj: torch.Tensor | None = None  # trajectory conditioned on the GT endpoint

    @property
    def targets(self) -> torch.Tensor:
        return torch.as_tensor(ANCHORS, dtype=self.offsets.dtype) + self.offsets


def planner_forward(ego_feat: torch.Tensor, params: ParameterStore,
                    gt_endpoint: torch.Tensor | None = None,
                    prefix: str = "planner") -> PlannerOutputs:
    offsets, logits = propose_targets(ego_feat, params, prefix)
    targets = stop_gradient(torch.as_tensor(ANCHORS, dtype=ego_feat.dtype) + offsets)
    e = ego_feat[..., None, :].expand(*targets.shape[:-1], ego_feat.shape[-1])
    cands = generate_trajectory(e, targets, params, prefix)
    scores = score_trajectories(ego_feat, stop_gradient(cands), params, prefix)
    gt_traj = None
    if gt_endpoint is not None:
        gt_traj = generate_trajectory(ego_feat, gt_endpoint, params, prefix)
    return PlannerOutputs(offsets, logits, cands, scores, gt_traj)


@dataclass
class PlannerLossTerms:
    target_cls: torch.Tensor
    target_offset: torch.Tensor
    traj_reg: torch.Tensor
    score: torch.Tensor
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_clamped: int = 0

    @property
    def total(self) -> torch.Tensor:
        l1, l2, l3 = self.lambdas
        return self.target_cls + l1 * self.target_offset + l2 * self.traj_reg + l3 * self.score


def clamp_to_hull(points: torch.Tensor) -> tuple[torch.Tensor, int]:
    lo = torch.as_tensor([LON_RANGE[0], LAT_RANGE[0]], dtype=points.dtype)
    hi = torch.as_tensor([LON_RANGE[1], LAT_RANGE[1]], dtype=points.dtype)
    clamped = torch.maximum(torch.minimum(points, hi), lo)
    n = int((clamped != points).any(-1).sum())
    return clamped, n


def imitation_loss(gt_future: torch.Tensor, out: PlannerOutputs, cfg: PlannerConfig | None = None,
                   reduce: bool = True) -> PlannerLossTerms:
    """Per-sample or batch-mean imitation terms.

    gt_future: [B, T_f, 2] ground-truth ego positions; ``out`` must have been
    produced with ``gt_endpoint = gt_future[:, -1]``.
    """
    cfg = cfg or PlannerConfig()
    dtype = out.offsets.dtype
    anchors = torch.as_tensor(ANCHORS, dtype=dtype)
    gt_end = gt_future[:, -1]
    gt_c, n_clamped = clamp_to_hull(gt_end)
    if n_clamped:
        log.debug("%d GT endpoints clamped to the anchor hull", n_clamped)
    label = torch.argmin(((gt_c[:, None, :] - anchors) ** 2).sum(-1), dim=-1)
    one_hot = torch.nn.functional.one_hot(label, N_CANDIDATES).to(dtype)
    target_cls = cross_entropy(out.target_logits, one_hot)

    off = out.offsets.gather(1, label[:, None, None].expand(-1, 1, 2))[:, 0]
    target_offset = smooth_l1(off - (gt_c - anchors[label])).mean(-1)

    traj_reg = smooth_l1(out.gt_traj - gt_future).mean((-1, -2))

    end_dist = torch.linalg.vector_norm(stop_gradient(out.candidates)[:, :, -1] - gt_end[:, None], dim=-1)
    teacher = torch.softmax(-end_dist / cfg.tau, dim=-1)
    entropy = -(teacher * torch.log(teacher.clamp_min(1e-30))).sum(-1)
    score = cross_entropy(out.scores, teacher) - entropy

    terms = PlannerLossTerms(target_cls, target_offset, traj_reg, score,
                             (cfg.lambda_offset, cfg.lambda_traj, cfg.lambda_score), n_clamped)
    if reduce:
        terms.target_cls, terms.target_offset = target_cls.mean(), target_offset.mean()
        terms.traj_reg, terms.score = traj_reg.mean(), score.mean()
    return terms


# ---------------------------------------------------------------------------
# masking and selection (numpy, one scene at a time)


@dataclass
class TrajectoryBundle:
    candidates: np.ndarray   # [M, T, 2]
    targets: np.ndarray      # [M, 2]
    target_logits: np.ndarray
    scores: np.ndarray       # [M]
    mask: np.ndarray | None = None   # True = admissible


def object_futures(scene: Scene, mode: str = "constant_velocity", horizon: int = T_FUTURE):
    """[(positions [T, 2], radius)] for each object.

    ``scripted`` reads the stored futures; ``constant_velocity`` extrapolates
    the last observed state, which is all a deployed planner may use.
    """
    out = []
    t = np.arange(1, horizon + 1) * DT
    for o in scene.objects:
        if mode == "scripted":
            pos = o.future[:horizon, :2]
        else:
            x, y, h, v = o.past[-1]
            pos = np.stack([x + v * math.cos(h) * t, y + v * math.sin(h) * t], axis=1)
        out.append((pos, o.radius))
    return out


def lateral_distance(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest segment of ``polyline``."""
    p = np.asarray(points, dtype=np.float64)[..., None, :]
    a, b = polyline[:-1], polyline[1:]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(p - proj, axis=-1).min(-1)


def curvature_ok(traj: np.ndarray, max_curvature: float, heading0: float = 0.0) -> bool:
    """Discrete curvature |dheading| / darclength between segment midpoints."""
    pts = np.vstack([[0.0, 0.0], traj])
    seg = np.diff(pts, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    last_h, gap = heading0, 0.0
    for (dx, dy), ell in zip(seg, lengths):
        if ell < MIN_SEGMENT:
            gap += ell
            continue
        h = math.atan2(dy, dx)
        dh = abs(math.atan2(math.sin(h - last_h), math.cos(h - last_h)))
        if dh / (gap + ell / 2) > max_curvature + 1e-9:
            return False
        last_h, gap = h, ell / 2
    return True


def dynamics_ok(traj: np.ndarray, speed0: float, limits: KinematicLimits) -> bool:
    pts = np.vstack([[0.0, 0.0], traj])
    v = np.hypot(*np.diff(pts, axis=0).T) / DT
    if np.any(v > limits.max_speed + 1e-6):
        return False
    acc = np.diff(np.concatenate([[speed0], v])) / DT
    return bool(np.all(np.abs(acc) <= limits.max_accel + 1e-6))


def contingency_mask(candidates: np.ndarray, scene: Scene, limits: KinematicLimits | None = None,
                     futures=None, speed0: float | None = None) -> np.ndarray:
    """True where a candidate is admissible.

    A candidate is rejected if it overlaps an object disc at a shared step,
    exceeds the curvature or acceleration/speed limits, or strays more than
    3.5 m from the route centerline.
    """
    limits = limits or KinematicLimits()
    futures = object_futures(scene) if futures is None else futures
    speed0 = float(scene.ego.past[-1, 3]) if speed0 is None else speed0
    route = scene.route.points
    cands = np.asarray(candidates, dtype=np.float64)
    ok = np.isfinite(cands).all(axis=(1, 2))
    for pos, r in futures:
        n = min(len(pos), cands.shape[1])
        d = np.linalg.norm(cands[:, :n] - pos[None, :n], axis=-1)
        ok &= ~(d < EGO_RADIUS + r).any(-1)
    ok &= ~(lateral_distance(cands, route) > LATERAL_LIMIT).any(-1)
    for m in np.flatnonzero(ok):
        if not (curvature_ok(cands[m], limits.max_curvature)
                and dynamics_ok(cands[m], speed0, limits)):
            ok[m] = False
    return ok


def braking_trajectory(speed0: float, max_accel: float, T: int = T_FUTURE) -> np.ndarray:
    """Straight stop along the current heading at maximum deceleration.

    ``speed0`` is the mean speed over the last step, so step k covers
    ``max(speed0 - k * max_accel * DT, 0) * DT`` metres.
    """
    k = np.arange(1, T + 1)
    v = np.maximum(speed0 - k * max_accel * DT, 0.0)
    s = np.cumsum(v) * DT
    return np.stack([s, np.zeros_like(s)], axis=1)


def score_and_select(bundle: TrajectoryBundle, speed0: float = 0.0,
                     limits: KinematicLimits | None = None) -> tuple[int, np.ndarray]:
    """Highest-scoring admissible candidate (lowest index on ties).

    Returns index -1 and the braking fallback when nothing is admissible.
    """
    limits = limits or KinematicLimits()
    mask = bundle.mask if bundle.mask is not None else np.ones(len(bundle.scores), dtype=bool)
    if not mask.any():
        return -1, braking_trajectory(speed0, limits.max_accel, bundle.candidates.shape[1])
    masked = np.where(mask, bundle.scores, -np.inf)
    k = int(np.argmax(masked))
    return k, bundle.candidates[k]


def build_bundle(ego_feat: torch.Tensor, params: ParameterStore,
                 prefix: str = "planner") -> TrajectoryBundle:
    with torch.no_grad():
        out = planner_forward(ego_feat[None], params, prefix=prefix)
    return TrajectoryBundle(out.candidates[0].double().numpy(), out.targets[0].double().numpy(),
                            out.target_logits[0].double().numpy(), out.scores[0].double().numpy())
