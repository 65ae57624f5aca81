"""Synthetic vectorized driving scenes and their on-disk dataset format.

Every scene is a straight road expressed in the ego frame at the last
observed timestep: the ego sits at the origin heading +x. Three scripted
families are generated:

* ``lane_follow`` -- ego cruises behind a moving lead vehicle.
* ``stop_behind`` -- a stationary vehicle or obstacle forces a full stop.
* ``cut_in`` -- a parked vehicle pulls out of the parking lane into the ego
  lane. It starts moving just before the last observed step, so the past
  carries the cue.

Ground-truth ego futures are collision-free against the scripted object
futures and respect ``|accel| <= A_MAX``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import RngState

DT = 0.2
T_PAST = 10
T_FUTURE = 20
A_MAX = 4.0
LANE_WIDTH = 3.5
EGO_RADIUS = 1.0
VEHICLE_RADIUS = 1.0
FORMAT_VERSION = 1

FAMILIES = ("lane_follow", "stop_behind", "cut_in")
TRACK_KINDS = ("ego", "vehicle", "obstacle")
MAP_ROLES = ("route_centerline", "lane_boundary")


class SceneValidationError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def _round9(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.array([float(f"{v:.9g}") for v in a.ravel()]).reshape(a.shape)


@dataclass(eq=False)
class AgentTrack:
    kind: str
    radius: float
    past: np.ndarray      # [T_p, 4] x, y, heading, speed
    future: np.ndarray    # [T_f, 4]
    id: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "radius": float(self.radius),
                "past": self.past.tolist(), "future": self.future.tolist()}

    @classmethod
    def from_dict(cls, d: dict, id: int = 0) -> "AgentTrack":
        past = np.asarray(d["past"], dtype=np.float64).reshape(-1, 4)
        future = np.asarray(d["future"], dtype=np.float64).reshape(-1, 4)
        if d["kind"] not in TRACK_KINDS:
            raise ValueError(f"unknown track kind {d['kind']!r}")
        return cls(d["kind"], float(d["radius"]), past, future, id)

    def states(self) -> np.ndarray:
        return np.concatenate([self.past, self.future], axis=0)


@dataclass(eq=False)
class MapPolyline:
    points: np.ndarray    # [n, 2]
    role: str

    def to_dict(self) -> dict:
        return {"role": self.role, "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MapPolyline":
        pts = np.asarray(d["points"], dtype=np.float64).reshape(-1, 2)
        if d["role"] not in MAP_ROLES:
            raise ValueError(f"unknown polyline role {d['role']!r}")
        if len(pts) < 2:
            raise ValueError("polyline needs at least two points")
        return cls(pts, d["role"])


@dataclass(eq=False)
class Scene:
    scene_id: int
    family: str
    ego: AgentTrack
    objects: list[AgentTrack]
    map: list[MapPolyline]
    goal: tuple[float, float]
    seed: int

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "family": self.family, "seed": self.seed,
                "goal": [float(self.goal[0]), float(self.goal[1])],
                "ego": self.ego.to_dict(),
                "objects": [o.to_dict() for o in self.objects],
                "map": [m.to_dict() for m in self.map]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(scene_id=int(d["scene_id"]), family=str(d["family"]),
                   ego=AgentTrack.from_dict(d["ego"], 0),
                   objects=[AgentTrack.from_dict(o, i + 1) for i, o in enumerate(d["objects"])],
                   map=[MapPolyline.from_dict(m) for m in d["map"]],
                   goal=(float(d["goal"][0]), float(d["goal"][1])), seed=int(d["seed"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    def __eq__(self, other) -> bool:
        return isinstance(other, Scene) and self.to_dict() == other.to_dict()

    @property
    def route(self) -> MapPolyline:
        return next(m for m in self.map if m.role == "route_centerline")


@dataclass
class SceneParams:
    """Optional overrides; ``None`` means drawn from the family's default range."""

    ego_speed: float | None = None     # m/s, 0..15
    lead_speed: float | None = None    # m/s, 0..15 (lane_follow)
    lead_gap: float | None = None      # m centre distance, 8..60 (stop_behind)
    cut_in_gap: float | None = None    # m, 5..20 (cut_in)

    RANGES = {"ego_speed": (0.0, 15.0), "lead_speed": (0.0, 15.0),
              "lead_gap": (8.0, 60.0), "cut_in_gap": (5.0, 20.0)}

    def validate(self) -> None:
        for name, (lo, hi) in self.RANGES.items():
            v = getattr(self, name)
            if v is not None and not (lo <= v <= hi):
                raise SceneValidationError(f"{name}={v} outside [{lo}, {hi}]")


@dataclass
class DatasetManifest:
    counts: dict[str, int]
    n: int
    seed: int
    mixture: dict[str, float] = field(default_factory=dict)
    dt: float = DT
    T_p: int = T_PAST
    T_f: int = T_FUTURE
    version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# kinematics helpers


def _integrate(speeds: np.ndarray, i0: int) -> np.ndarray:
    """Arc length from a per-step speed profile (trapezoid), zero at index i0."""
    s = np.concatenate([[0.0], np.cumsum(0.5 * (speeds[1:] + speeds[:-1]) * DT)])
    return s - s[i0]


def _profile(v0: float, accels: np.ndarray) -> np.ndarray:
    """Speeds for t = 0..len(accels) from per-step accelerations, floored at 0."""
    v = [v0]
    for a in accels:
        v.append(max(0.0, v[-1] + a * DT))
    return np.array(v)


def _straight_track(kind, x0, y, heading, speeds, radius=VEHICLE_RADIUS) -> AgentTrack:
    """Track along a straight lane; speeds cover t = -(T_p-1)..T_f, x0 is the t=0 position."""
    s = _integrate(speeds, T_PAST - 1)
    d = math.cos(heading)
    xs = x0 + d * s
    ys = np.full_like(xs, y)
    states = np.stack([xs, ys, np.full_like(xs, heading), speeds], axis=1)
    return AgentTrack(kind, radius, states[:T_PAST], states[T_PAST:])


def _ego_track(lane_y: float, past_accel: float, future_speeds: np.ndarray) -> AgentTrack:
    v0 = future_speeds[0]
    t_past = np.arange(-(T_PAST - 1), 1) * DT
    past_v = np.maximum(0.0, v0 + past_accel * t_past)
    speeds = np.concatenate([past_v, future_speeds[1:]])
    return _straight_track("ego", 0.0, 0.0, 0.0, speeds, radius=EGO_RADIUS)


def _lane_change_path(y_from: float, y_to: float, length: float):
    u = np.linspace(0.0, length, 801)
    r = u / length
    y = y_from + (y_to - y_from) * (3 * r ** 2 - 2 * r ** 3)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(u), np.diff(y)))])

    def at(s: np.ndarray):
        s = np.asarray(s, dtype=np.float64)
        inside = s <= arc[-1]
        uu = np.where(inside, np.interp(s, arc, u), length + (s - arc[-1]))
        rr = np.clip(uu / length, 0.0, 1.0)
        yy = y_from + (y_to - y_from) * (3 * rr ** 2 - 2 * rr ** 3)
        dy = (y_to - y_from) * (6 * rr - 6 * rr ** 2) / length
        return uu, yy, np.arctan2(dy, 1.0)

    return at


def _map(lane_y: float) -> list[MapPolyline]:
    xs = np.arange(-40.0, 150.0 + 1e-9, 10.0)

    def line(y, role):
        return MapPolyline(np.stack([xs, np.full_like(xs, y)], axis=1), role)

    return [line(lane_y, "route_centerline"),
            line(lane_y + LANE_WIDTH / 2, "lane_boundary"),
            line(lane_y - LANE_WIDTH / 2, "lane_boundary"),
            line(lane_y + 1.5 * LANE_WIDTH, "lane_boundary"),
            line(lane_y - 1.5 * LANE_WIDTH, "lane_boundary")]


def min_clearance(ego: AgentTrack, objects: Iterable[AgentTrack], future_only: bool = True) -> float:
    """Smallest centre distance minus radii over shared timesteps."""
    e = ego.future if future_only else ego.states()
    best = math.inf
    for o in objects:
        s = o.future if future_only else o.states()
        n = min(len(e), len(s))
        d = np.hypot(e[:n, 0] - s[:n, 0], e[:n, 1] - s[:n, 1]) - ego.radius - o.radius
        best = min(best, float(d.min()))
    return best


def kinematics_ok(track: AgentTrack, a_max: float = A_MAX) -> bool:
    st = track.states()
    step = np.hypot(np.diff(st[:, 0]), np.diff(st[:, 1]))
    bound = (st[:-1, 3] + a_max * DT) * DT + 1e-6
    return bool(np.all(step <= bound))


# ---------------------------------------------------------------------------
# families


def _uniform(gen, given, lo, hi):
    return float(given) if given is not None else float(gen.uniform(lo, hi))


def _distractors(gen, lane_y, objects, parked_ok=True):
    if gen.random() < 0.5:
        v = gen.uniform(5.0, 10.0)
        x0 = gen.uniform(20.0, 80.0)
        objects.append(_straight_track("vehicle", x0, lane_y - LANE_WIDTH, math.pi,
                                       np.full(T_PAST + T_FUTURE, v)))
    if parked_ok and gen.random() < 0.3:
        x0 = gen.uniform(5.0, 40.0)
        objects.append(_straight_track("vehicle", x0, lane_y + LANE_WIDTH, 0.0,
                                       np.zeros(T_PAST + T_FUTURE)))


def _lane_follow(gen, p: SceneParams, lane_y):
    v0 = _uniform(gen, p.ego_speed, 4.0, 10.0)
    v_lead = (float(p.lead_speed) if p.lead_speed is not None
              else float(np.clip(v0 + gen.uniform(-1.5, 1.5), 0.0, 15.0)))
    gap = gen.uniform(15.0, 35.0)
    accels = []
    v = v0
    for _ in range(T_FUTURE):
        a = float(np.clip((v_lead - v) / 2.0, -1.0, 1.0))
        accels.append(a)
        v = max(0.0, v + a * DT)
    ego = _ego_track(lane_y, gen.uniform(-0.3, 0.3), _profile(v0, np.array(accels)))
    objects = [_straight_track("vehicle", gap, lane_y, 0.0, np.full(T_PAST + T_FUTURE, v_lead))]
    _distractors(gen, lane_y, objects)
    return ego, objects


def _stop_behind(gen, p: SceneParams, lane_y):
    horizon = T_FUTURE * DT - 0.4
    if p.lead_gap is None:
        v0 = _uniform(gen, p.ego_speed, 3.0, 8.0)
        a = gen.uniform(max(1.5, v0 / horizon), 3.5)
        cruise = gen.uniform(0.0, max(0.0, horizon - v0 / a))
    else:
        v0 = _uniform(gen, p.ego_speed, 6.0, 15.0)
        a = gen.uniform(2.5, A_MAX)
    final_gap = gen.uniform(2.0, 4.0)
    radius = VEHICLE_RADIUS
    if p.lead_gap is not None:
        x_stop = p.lead_gap - final_gap - EGO_RADIUS - radius
        cruise = (x_stop - v0 ** 2 / (2 * a)) / v0 if v0 > 0 else 0.0
        if cruise < 0 or cruise + v0 / a > horizon:
            return None
    n_cruise = int(round(cruise / DT))
    accels = np.array([0.0] * n_cruise + [-a] * (T_FUTURE - n_cruise))[:T_FUTURE]
    speeds = _profile(v0, accels)
    if speeds[-1] > 0:
        return None
    ego = _ego_track(lane_y, gen.uniform(-0.3, 0.3), speeds)
    x_stop = ego.future[-1, 0]
    lead_x = (p.lead_gap if p.lead_gap is not None
              else x_stop + final_gap + EGO_RADIUS + radius)
    if lead_x - x_stop - EGO_RADIUS - radius < 2.0:
        return None
    kind = "obstacle" if gen.random() < 0.5 else "vehicle"
    objects = [_straight_track(kind, lead_x, lane_y, 0.0, np.zeros(T_PAST + T_FUTURE), radius)]
    _distractors(gen, lane_y, objects, parked_ok=False)
    return ego, objects


def _cut_in(gen, p: SceneParams, lane_y):
    v0 = _uniform(gen, p.ego_speed, 5.0, 9.0)
    gap = _uniform(gen, p.cut_in_gap, 5.0, 20.0)
    t_start = gen.uniform(0.2, 0.6)          # seconds before t=0 the merge begins
    a_m = gen.uniform(1.5, 2.5)
    v_m = gen.uniform(2.0, 4.0)
    t = np.arange(-(T_PAST - 1), T_FUTURE + 1) * DT
    v_obj = np.clip((t + t_start) * a_m, 0.0, v_m)
    s = _integrate(v_obj, 0)
    s0 = s[T_PAST - 1]
    path = _lane_change_path(lane_y + LANE_WIDTH, lane_y, gen.uniform(9.0, 13.0))
    u, y, heading = path(s)
    x = (gap - path(np.array([s0]))[0][0]) + u
    states = np.stack([x, y, heading, v_obj], axis=1)
    merger = AgentTrack("vehicle", VEHICLE_RADIUS, states[:T_PAST], states[T_PAST:])

    rho = gen.uniform(0.5, 0.9)
    reaction = int(gen.integers(0, 2))
    past_accel = gen.uniform(-0.3, 0.3)
    for decel in np.arange(1.0, A_MAX + 1e-9, 0.25):
        v_target = min(v0, rho * v_m)
        accels, v = [], v0
        for k in range(T_FUTURE):
            a = 0.0 if k < reaction else -min(decel, max(0.0, (v - v_target) / DT))
            accels.append(a)
            v = max(0.0, v + a * DT)
        ego = _ego_track(lane_y, past_accel, _profile(v0, np.array(accels)))
        if min_clearance(ego, [merger]) > 1.0:
            break
    else:
        return None
    objects = [merger]
    _distractors(gen, lane_y, objects, parked_ok=False)
    return ego, objects


_BUILDERS = {"lane_follow": _lane_follow, "stop_behind": _stop_behind, "cut_in": _cut_in}


def _rounded(track: AgentTrack) -> AgentTrack:
    return AgentTrack(track.kind, track.radius, _round9(track.past), _round9(track.future), track.id)


def generate_scene(family: str, rng: RngState, params: SceneParams | dict | None = None,
                   scene_id: int = 0, max_attempts: int = 200) -> Scene:
    """Deterministic scene for ``(family, rng)``; rejection-samples until valid."""
    if family not in _BUILDERS:
        raise SceneValidationError(f"unknown family {family!r}")
    if isinstance(params, dict):
        params = SceneParams(**params)
    params = params or SceneParams()
    params.validate()
    gen = rng.generator()
    for _ in range(max_attempts):
        lane_y = float(gen.uniform(-0.3, 0.3))
        built = _BUILDERS[family](gen, params, lane_y)
        if built is None:
            continue
        ego, objects = built
        ego = _rounded(ego)
        objects = [_rounded(o) for o in objects]
        for i, o in enumerate(objects):
            o.id = i + 1
        if min_clearance(ego, objects) <= 0.0:
            continue
        if not all(kinematics_ok(t) for t in [ego, *objects]):
            continue
        goal = (float(ego.future[-1, 0]), float(ego.future[-1, 1]))
        maps = [MapPolyline(_round9(m.points), m.role) for m in _map(lane_y)]
        return Scene(scene_id, family, ego, objects, maps, goal, int(rng.derive_seed()))
    raise SceneValidationError(f"could not satisfy {family} constraints with {params}")


def scene_from_seed(family: str, seed: int, scene_id: int = 0) -> Scene:
    return generate_scene(family, RngState(seed, 0), scene_id=scene_id)


# ---------------------------------------------------------------------------
# datasets


def mixture_counts(mixture: dict[str, float], n: int) -> dict[str, int]:
    """Largest-remainder apportionment; ties go to the earlier family."""
    if not mixture:
        raise DatasetError("empty mixture")
    if n < 1:
        raise DatasetError("n must be >= 1")
    for fam, f in mixture.items():
        if fam not in FAMILIES:
            raise DatasetError(f"unknown family {fam!r}")
        if f < 0:
            raise DatasetError(f"negative fraction for {fam!r}")
    total = sum(mixture.values())
    if abs(total - 1.0) > 1e-9:
        raise DatasetError(f"fractions sum to {total}, expected 1")
    quotas = {fam: f * n for fam, f in mixture.items()}
    counts = {fam: int(math.floor(q + 1e-9)) for fam, q in quotas.items()}
    short = n - sum(counts.values())
    order = sorted(mixture, key=lambda f: -round(quotas[f] - counts[f], 9))  # stable on ties
    for fam in order[:short]:
        counts[fam] += 1
    return counts


def generate_dataset(mixture: dict[str, float], n: int, seed: int,
                     out: str | Path | None = None) -> tuple[list[Scene], DatasetManifest]:
    counts = mixture_counts(mixture, n)
    labels = [fam for fam in mixture for _ in range(counts[fam])]
    order = RngState(seed).split(0).generator().permutation(len(labels))
    labels = [labels[i] for i in order]
    root = RngState(seed).split(1)
    scenes = [generate_scene(fam, RngState(root.split(i).derive_seed()), scene_id=i)
              for i, fam in enumerate(labels)]
    manifest = DatasetManifest(counts=counts, n=n, seed=seed, mixture=dict(mixture))
    if out is not None:
        write_dataset(out, scenes, manifest)
    return scenes, manifest


def write_dataset(path, scenes: list[Scene], manifest: DatasetManifest) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(path / "scenes.jsonl", "w") as fh:
        for s in sorted(scenes, key=lambda s: s.scene_id):
            fh.write(s.to_json() + "\n")


def read_dataset(path) -> tuple[list[Scene], DatasetManifest]:
    path = Path(path)
    try:
        m = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{path / 'manifest.json'}: missing") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path / 'manifest.json'}: malformed ({exc})") from None
    if m.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{path / 'manifest.json'}: version {m.get('version')!r} != {FORMAT_VERSION}")
    manifest = DatasetManifest(**m)
    scenes = []
    lines = (path / "scenes.jsonl").read_text().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for i, line in enumerate(lines, start=1):
        try:
            scenes.append(Scene.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"scenes.jsonl line {i}: {exc}") from None
    if len(scenes) != manifest.n:
        raise DatasetError(f"scenes.jsonl has {len(scenes)} lines, manifest says n={manifest.n}")
    found: dict[str, int] = {}
    for s in scenes:
        found[s.family] = found.get(s.family, 0) + 1
    if {k: v for k, v in manifest.counts.items() if v} != found:
        raise DatasetError(f"family counts {found} disagree with manifest {manifest.counts}")
    return scenes, manifest
