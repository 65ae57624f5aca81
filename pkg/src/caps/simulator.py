"""Closed-loop evaluation against scripted agents.

The world frame is the scene's ego frame at the last observed step. Every
``replan_interval`` steps the planner receives an observation re-expressed
in the current ego frame (past states only, objects extrapolated at
constant velocity) and the ego then tracks the returned waypoints exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np
import torch

from .encoder import encode_tensors, featurize
from .planner import (KinematicLimits, braking_trajectory, build_bundle, contingency_mask,
                      lateral_distance, object_futures, score_and_select)
from .scenegen import DT, T_FUTURE, T_PAST, AgentTrack, MapPolyline, Scene

GOAL_RADIUS = 2.0
OFF_ROUTE = 3.5
MIN_SPEED = 1.0
MIN_SPEED_STEPS = 20
AHEAD_RANGE = 15.0
COLLISION_GRACE = 3
COLLISION_PENALTY = 0.5
OFF_ROUTE_PENALTY = 0.7


@dataclass
class ScenarioSpec:
    scene: Scene
    max_steps: int = T_FUTURE + 10
    replan_interval: int = 2

    def object_timeline(self) -> np.ndarray:
        """[n_obj, T_p + max_steps, 4]; stored futures continued at constant velocity."""
        T = T_PAST + self.max_steps
        out = np.zeros((len(self.scene.objects), T, 4))
        for i, o in enumerate(self.scene.objects):
            st = o.states()
            n = min(len(st), T)
            out[i, :n] = st[:n]
            x, y, h, v = st[-1]
            for j in range(n, T):
                dt = (j - len(st) + 1) * DT
                out[i, j] = (x + v * math.cos(h) * dt, y + v * math.sin(h) * dt, h, v)
        return out


@dataclass
class Observation:
    scene: Scene               # local frame, futures of objects extrapolated
    pose: tuple[float, float, float]
    step: int


@dataclass
class PlanResult:
    trajectory: np.ndarray     # [T, 2] local frame
    index: int = -1
    n_masked: int = 0


class Planner(Protocol):
    def plan(self, obs: Observation) -> PlanResult: ...


@dataclass
class EpisodeResult:
    scene_id: int
    family: str
    route_completion: float
    collisions: int
    off_route: bool
    timeout: bool
    min_speed_infraction: bool
    driving_score: float
    success: bool
    failed: bool = False
    trace: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("trace")
        return d


def driving_score(route_completion: float, collisions: int, off_route: bool) -> float:
    return route_completion * COLLISION_PENALTY ** collisions * (OFF_ROUTE_PENALTY if off_route else 1.0)


# ---------------------------------------------------------------------------
# geometry


def to_local(xy: np.ndarray, pose) -> np.ndarray:
    x0, y0, h = pose
    c, s = math.cos(h), math.sin(h)
    d = np.asarray(xy, dtype=np.float64)[..., :2] - (x0, y0)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def to_world(xy: np.ndarray, pose) -> np.ndarray:
    x0, y0, h = pose
    c, s = math.cos(h), math.sin(h)
    p = np.asarray(xy, dtype=np.float64)
    return np.stack([c * p[..., 0] - s * p[..., 1] + x0, s * p[..., 0] + c * p[..., 1] + y0], axis=-1)


def states_to_local(states: np.ndarray, pose) -> np.ndarray:
    out = np.array(states, dtype=np.float64, copy=True)
    out[..., :2] = to_local(states[..., :2], pose)
    h = states[..., 2] - pose[2]
    out[..., 2] = np.arctan2(np.sin(h), np.cos(h))
    return out


def route_progress(xy, route: np.ndarray) -> float:
    """Arc length of the projection of ``xy`` onto the route polyline."""
    p = np.asarray(xy, dtype=np.float64)
    a, b = route[:-1], route[1:]
    ab = b - a
    seg_len = np.linalg.norm(ab, axis=1)
    t = np.clip(((p - a) * ab).sum(-1) / (seg_len ** 2), 0.0, 1.0)
    d = np.linalg.norm(a + t[:, None] * ab - p, axis=1)
    i = int(np.argmin(d))
    return float(np.concatenate([[0.0], np.cumsum(seg_len)])[i] + t[i] * seg_len[i])


def _segment_point_distance(a, b, p) -> float:
    a, b, p = (np.asarray(v, dtype=np.float64) for v in (a, b, p))
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(a + t * ab - p))


# ---------------------------------------------------------------------------
# infractions


def object_ahead(ego_state, objects, within: float = AHEAD_RANGE) -> bool:
    x, y, h = ego_state[0], ego_state[1], ego_state[2]
    for ox, oy, _ in objects:
        dx, dy = ox - x, oy - y
        if dx * math.cos(h) + dy * math.sin(h) > 0 and math.hypot(dx, dy) <= within:
            return True
    return False


def infraction_check(ego_state, objects, route: np.ndarray, slow_steps: int = 0,
                     ego_radius: float = 1.0) -> set[str]:
    """Events at one step.

    ``objects`` holds (x, y, radius) triples. ``slow_steps`` is the caller's
    count of consecutive unblocked steps below the minimum speed.
    """
    events = set()
    x, y = ego_state[0], ego_state[1]
    for ox, oy, r in objects:
        if math.hypot(ox - x, oy - y) < ego_radius + r:
            events.add("collision")
            break
    if float(lateral_distance(np.array([x, y]), route)) > OFF_ROUTE:
        events.add("off_route")
    if ego_state[3] < MIN_SPEED and slow_steps > MIN_SPEED_STEPS and not object_ahead(ego_state, objects):
        events.add("min_speed")
    return events


# ---------------------------------------------------------------------------
# episodes


def observe(scene: Scene, ego_hist: np.ndarray, timeline: np.ndarray, step: int) -> Observation:
    pose = tuple(float(v) for v in ego_hist[-1, :3])
    ego_past = states_to_local(ego_hist[-T_PAST:], pose)
    tau = T_PAST - 1 + step
    t = np.arange(1, T_FUTURE + 1) * DT
    objects = []
    for i, o in enumerate(scene.objects):
        past = states_to_local(timeline[i, tau - T_PAST + 1:tau + 1], pose)
        x, y, h, v = past[-1]
        fut = np.stack([x + v * np.cos(h) * t, y + v * np.sin(h) * t, np.full_like(t, h),
                        np.full_like(t, v)], axis=1)
        objects.append(AgentTrack(o.kind, o.radius, past, fut, i + 1))
    ego = AgentTrack("ego", scene.ego.radius, ego_past, np.zeros((0, 4)), 0)
    maps = [MapPolyline(to_local(m.points, pose), m.role) for m in scene.map]
    goal = tuple(to_local(np.array(scene.goal), pose).tolist())
    local = Scene(scene.scene_id, scene.family, ego, objects, maps, goal, scene.seed)
    return Observation(local, pose, step)


def run_episode(spec: ScenarioSpec, planner, record_trace: bool = False) -> EpisodeResult:
    if not hasattr(planner, "plan"):
        planner = CheckpointPlanner(planner)
    scene = spec.scene
    route = scene.route.points
    timeline = spec.object_timeline()
    radii = [o.radius for o in scene.objects]
    hist = np.array(scene.ego.past, dtype=np.float64)
    s0 = route_progress(hist[-1, :2], route)
    s_goal = route_progress(np.array(scene.goal), route)
    best_s = s0
    collisions, in_contact = 0, set()
    off_route = reached = failed = False
    min_speed_flag = False
    slow_steps = 0
    grace = None
    trace = []
    plan_world, j, last = None, 0, PlanResult(np.zeros((0, 2)))

    for k in range(spec.max_steps):
        if k % spec.replan_interval == 0 or plan_world is None or j >= len(plan_world):
            obs = observe(scene, hist, timeline, k)
            last = planner.plan(obs)
            traj = np.asarray(last.trajectory, dtype=np.float64)
            if traj.ndim != 2 or len(traj) == 0 or not np.all(np.isfinite(traj)):
                failed = True
                break
            plan_world, j = to_world(traj, obs.pose), 0
        prev = hist[-1]
        nxt = plan_world[j]
        j += 1
        d = nxt - prev[:2]
        dist = float(np.hypot(*d))
        heading = math.atan2(d[1], d[0]) if dist > 1e-6 else float(prev[2])
        state = np.array([nxt[0], nxt[1], heading, dist / DT])
        hist = np.vstack([hist, state])

        tau = T_PAST + k
        objs = [(timeline[i, tau, 0], timeline[i, tau, 1], radii[i]) for i in range(len(radii))]
        slow_steps = slow_steps + 1 if (state[3] < MIN_SPEED and not object_ahead(state, objs)) else 0
        events = infraction_check(state, objs, route, slow_steps, scene.ego.radius)
        touching = {i for i, (ox, oy, r) in enumerate(objs)
                    if math.hypot(ox - state[0], oy - state[1]) < scene.ego.radius + r}
        collisions += len(touching - in_contact)
        in_contact = touching
        min_speed_flag |= "min_speed" in events
        best_s = max(best_s, route_progress(state[:2], route))
        if record_trace:
            trace.append({"step": k + 1, "ego": state.tolist(), "chosen": last.index,
                          "n_masked": last.n_masked, "events": sorted(events)})
        if "off_route" in events:
            off_route = True
            break
        if _segment_point_distance(prev[:2], nxt, scene.goal) <= GOAL_RADIUS:
            reached = True
            break
        if collisions and grace is None:
            grace = COLLISION_GRACE
        elif grace is not None:
            grace -= 1
            if grace <= 0:
                break

    span = s_goal - s0
    if reached:
        rc = 1.0
    elif span <= 1e-9:
        rc = 0.0
    else:
        rc = float(np.clip((best_s - s0) / span, 0.0, 1.0))
    timeout = not (reached or off_route or failed or grace is not None)
    ds = 0.0 if failed else driving_score(rc, collisions, off_route)
    success = reached and collisions == 0 and not off_route and not timeout and not failed
    return EpisodeResult(scene.scene_id, scene.family, rc, collisions, off_route, timeout,
                         min_speed_flag, ds, success, failed, trace)


@dataclass
class MetricsReport:
    driving_score: float
    success_rate: float
    n_episodes: int
    per_family: dict
    per_cluster: dict | None = None
    episodes: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"driving_score": self.driving_score, "success_rate": self.success_rate,
                "n_episodes": self.n_episodes, "per_family": self.per_family,
                "per_cluster": self.per_cluster,
                "episodes": [e.summary() for e in self.episodes]}

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _aggregate(eps: list[EpisodeResult]) -> dict:
    return {"n": len(eps),
            "driving_score": float(np.mean([e.driving_score for e in eps])),
            "success_rate": 100.0 * sum(e.success for e in eps) / len(eps)}


def evaluate(suite: list[ScenarioSpec], planner, clusters: dict[int, int] | None = None,
             record_trace: bool = False) -> MetricsReport:
    if not suite:
        raise ValueError("empty suite")
    if not hasattr(planner, "plan"):
        planner = CheckpointPlanner(planner)
    eps = [run_episode(s, planner, record_trace) for s in suite]
    overall = _aggregate(eps)
    fams: dict[str, list] = {}
    for e in eps:
        fams.setdefault(e.family, []).append(e)
    per_cluster = None
    if clusters is not None:
        groups: dict[int, list] = {}
        for e in eps:
            if e.scene_id in clusters:
                groups.setdefault(clusters[e.scene_id], []).append(e)
        per_cluster = {str(k): _aggregate(v) for k, v in sorted(groups.items())}
    return MetricsReport(overall["driving_score"], overall["success_rate"], len(eps),
                         {f: _aggregate(v) for f, v in sorted(fams.items())}, per_cluster, eps)


# ---------------------------------------------------------------------------
# planners


class CheckpointPlanner:
    """Causal encoder + decoder + contingency mask from a trained checkpoint."""

    def __init__(self, ckpt, limits: KinematicLimits | None = None):
        self.ckpt = ckpt
        self.limits = limits or KinematicLimits()
        self.enc = ckpt.model.encoder("causal")

    def plan(self, obs: Observation) -> PlanResult:
        st = featurize([obs.scene], "causal", dtype=self.ckpt.params.dtype)
        with torch.no_grad():
            tokens, _ = encode_tensors(st, self.ckpt.params, "encoder.causal", self.enc)
        bundle = build_bundle(tokens[0, 0], self.ckpt.params)
        speed0 = float(obs.scene.ego.past[-1, 3])
        bundle.mask = contingency_mask(bundle.candidates, obs.scene, self.limits,
                                       object_futures(obs.scene, "constant_velocity"), speed0)
        k, traj = score_and_select(bundle, speed0, self.limits)
        return PlanResult(traj, k, int((~bundle.mask).sum()))


class OraclePlanner:
    """Replays the generator's ground-truth future (test fixture)."""

    def __init__(self, scene: Scene):
        self.gt = scene.ego.future[:, :2]

    def plan(self, obs: Observation) -> PlanResult:
        rest = self.gt[obs.step:]
        if len(rest) == 0:
            rest = self.gt[-1:]
        pad = np.vstack([rest, np.repeat(rest[-1:], T_FUTURE - len(rest), axis=0)])
        return PlanResult(to_local(pad, obs.pose))


class BrakePlanner:
    def __init__(self, max_accel: float = 4.0):
        self.max_accel = max_accel

    def plan(self, obs: Observation) -> PlanResult:
        return PlanResult(braking_trajectory(float(obs.scene.ego.past[-1, 3]), self.max_accel))


class StraightPlanner:
    """Holds the current speed along the current heading, ignoring everything."""

    def plan(self, obs: Observation) -> PlanResult:
        v = max(float(obs.scene.ego.past[-1, 3]), 1.0)
        t = np.arange(1, T_FUTURE + 1) * DT
        return PlanResult(np.stack([v * t, np.zeros_like(t)], axis=1))
