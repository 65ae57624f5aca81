"""Command-line front end: data generation, both training stages, evaluation, inspection.

Every command writes into an output directory and echoes the resolved
configuration there as ``config.yaml``. Exit codes: 0 ok, 1 invalid input,
2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .checkpoint import CheckpointError
from .core import ConfigurationError
from .encoder import InputValidationError
from .planner import KinematicLimits, PlannerConfig
from .scenegen import DatasetError, SceneValidationError, Scene, generate_dataset, read_dataset
from .simulator import CheckpointPlanner, ScenarioSpec, evaluate
from .training import (Checkpoint, ModelConfig, TrainConfig, TrainingError, WeightTable,
                       assign_clusters, compute_weights, prepare, train_stage1, train_stage2)
from .vq import codebook_metrics

log = logging.getLogger("caps")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(ValueError):
    """Bad user input: missing file, malformed config, inconsistent artifacts."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataSection:
    n: int = 2000
    mixture: dict = field(default_factory=lambda: {"lane_follow": 0.85, "stop_behind": 0.10,
                                                   "cut_in": 0.05})


@dataclass
class EncoderSection:
    d_e: int = 64
    n_heads: int = 4
    n_layers: int = 2


@dataclass
class VQSection:
    K: int = 64
    beta: float = 0.25
    lambda_vq: float = 1.0
    reinit_dead: bool = True
    patience: int = 2


@dataclass
class PlannerSection:
    hidden: int = 128
    lambda_offset: float = 1.0
    lambda_traj: float = 1.0
    lambda_score: float = 1.0
    tau: float = 1.0
    max_curvature: float = 0.3
    max_accel: float = 4.0
    max_speed: float = 18.0


@dataclass
class Stage1Section:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class Stage2Section:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    clamp_w_max: float = 10.0
    weight_mode: str = "resample"
    stage2_init: str = "fresh"


@dataclass
class SimulatorSection:
    max_steps: int = 30
    replan_interval: int = 2
    record_trace: bool = False


@dataclass
class SeedsSection:
    data: int = 0
    train: int = 0


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    vq: VQSection = field(default_factory=VQSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    simulator: SimulatorSection = field(default_factory=SimulatorSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    @classmethod
    def from_dict(cls, raw: dict | None, source: str = "<config>") -> "RunConfig":
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ValidationError(f"{source}: top level must be a mapping")
        sections = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(sections))
        if unknown:
            raise ValidationError(f"{source}: unknown section(s) {unknown}")
        built = {}
        for name, f in sections.items():
            section_cls = f.default_factory().__class__
            body = raw.get(name) or {}
            if not isinstance(body, dict):
                raise ValidationError(f"{source}: section '{name}' must be a mapping")
            known = {g.name for g in fields(section_cls)}
            bad = sorted(set(body) - known)
            if bad:
                raise ValidationError(f"{source}: unknown key(s) {[f'{name}.{b}' for b in bad]}")
            try:
                built[name] = section_cls(**body)
            except TypeError as exc:
                raise ValidationError(f"{source}: section '{name}': {exc}") from None
        return cls(**built)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"{p}: config file not found")
        try:
            raw = yaml.safe_load(p.read_text())
        except yaml.YAMLError as exc:
            raise ValidationError(f"{p}: malformed YAML ({exc})") from None
        return cls.from_dict(raw, str(p))

    def to_dict(self) -> dict:
        return asdict(self)

    def model(self) -> ModelConfig:
        return ModelConfig(d_e=self.encoder.d_e, n_heads=self.encoder.n_heads,
                           n_layers=self.encoder.n_layers, K=self.vq.K, hidden=self.planner.hidden)

    def limits(self) -> KinematicLimits:
        p = self.planner
        return KinematicLimits(p.max_curvature, p.max_accel, p.max_speed)

    def planner_config(self) -> PlannerConfig:
        p = self.planner
        return PlannerConfig(d_e=self.encoder.d_e, hidden=p.hidden, lambda_offset=p.lambda_offset,
                             lambda_traj=p.lambda_traj, lambda_score=p.lambda_score, tau=p.tau,
                             limits=self.limits())

    def train1(self) -> TrainConfig:
        s, v = self.stage1, self.vq
        return TrainConfig(epochs=s.epochs, batch_size=s.batch_size, lr=s.lr, lambda_vq=v.lambda_vq,
                           beta=v.beta, reinit_dead=v.reinit_dead, patience=v.patience,
                           seed=self.seeds.train)

    def train2(self) -> TrainConfig:
        s = self.stage2
        return TrainConfig(epochs=s.epochs, batch_size=s.batch_size, lr=s.lr,
                           clamp_w_max=s.clamp_w_max, weight_mode=s.weight_mode,
                           stage2_init=s.stage2_init, seed=self.seeds.train)


def echo_config(cfg: RunConfig, out: Path, extra: dict | None = None) -> None:
    body = cfg.to_dict()
    if extra:
        body["inputs"] = extra
    (out / "config.yaml").write_text(yaml.safe_dump(body, sort_keys=True))


# ---------------------------------------------------------------------------
# helpers


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{p}: {what} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: malformed JSON ({exc})") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_ckpt(path) -> Checkpoint:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.ckpt"
    if not p.is_file():
        raise ValidationError(f"{p}: checkpoint not found")
    return Checkpoint.load(p)


def _load_data(path) -> list[Scene]:
    if not Path(path).is_dir():
        raise ValidationError(f"{path}: dataset directory not found")
    scenes, _ = read_dataset(path)
    return scenes


def _assignments_file(path) -> Path:
    p = Path(path)
    return p / "assignments.json" if p.is_dir() else p


def print_table(title: str, rows: list[tuple], header: tuple | None = None) -> None:
    cells = ([tuple(map(str, header))] if header else []) + [
        tuple(f"{c:.4f}" if isinstance(c, float) else str(c) for c in r) for r in rows]
    if not cells:
        return
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    print(title)
    for j, r in enumerate(cells):
        print("  " + "  ".join(c.ljust(w) for c, w in zip(r, widths)))
        if header and j == 0:
            print("  " + "  ".join("-" * w for w in widths))


def _save_log(out: Path, ckpt: Checkpoint) -> None:
    _write_json(out / "log.json", ckpt.log)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    t0 = time.time()
    scenes, manifest = generate_dataset(cfg.data.mixture, cfg.data.n, cfg.seeds.data, out)
    echo_config(cfg, out)
    print_table(f"dataset {out} ({time.time() - t0:.1f}s)",
                [(fam, n) for fam, n in manifest.counts.items()] + [("total", len(scenes))],
                ("family", "count"))
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = _config(args)
    scenes = _load_data(args.data)
    out = _out_dir(args.out)
    ckpt = _guarded(lambda: train_stage1(prepare(scenes), cfg.train1(), cfg.model(),
                                         cfg.planner_config()), out)
    ckpt.save(out / "checkpoint.ckpt")
    _save_log(out, ckpt)
    echo_config(cfg, out, {"data": str(args.data)})
    last = ckpt.log[-1]
    print_table("stage 1", [("epochs", len(ckpt.log)), ("loss", last["loss"]),
                            ("imitation", last["imitation"]), ("vq", last["vq"]),
                            ("perplexity", last["perplexity"]), ("dead codes", last["n_dead"]),
                            ("crc32", f"{ckpt.payload_crc():08x}")])
    return EXIT_OK


def cmd_assign(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    scenes = _load_data(args.data)
    out = _out_dir(args.out)
    a = assign_clusters(scenes, ckpt)
    K = ckpt.model.K
    _write_json(out / "assignments.json",
                {"K": K, "assignments": {str(s): k for s, k in sorted(a.items())}})
    echo_config(_config(args), out, {"ckpt": str(args.ckpt), "data": str(args.data)})
    m = codebook_metrics(list(a.values()), K)
    counts = Counter(a.values())
    print_table("assignments", [(k, counts[k]) for k in sorted(counts)], ("cluster", "n"))
    print_table("codebook", [("perplexity", m.perplexity), ("dead codes", m.n_dead)])
    return EXIT_OK


def _read_assignments(path) -> tuple[dict[int, int], int | None]:
    raw = _read_json(_assignments_file(path), "assignments file")
    if "assignments" not in raw:
        raise ValidationError(f"{path}: missing key 'assignments'")
    try:
        a = {int(s): int(k) for s, k in raw["assignments"].items()}
    except (TypeError, ValueError, AttributeError) as exc:
        raise ValidationError(f"{path}: bad 'assignments' entry ({exc})") from None
    return a, raw.get("K")


def cmd_weights(args) -> int:
    cfg = _config(args)
    a, K = _read_assignments(args.assignments)
    out = _out_dir(args.out)
    table = compute_weights(a, K, cfg.stage2.clamp_w_max)
    _write_json(out / "weights.json", table.to_dict())
    echo_config(cfg, out, {"assignments": str(args.assignments)})
    print_table(f"weights (N={table.N}, active clusters={table.C_active})",
                [(k, table.counts[k], w, "yes" if table.clamped[k] else "")
                 for k, w in table.cluster_weights.items()],
                ("cluster", "n", "weight", "clamped"))
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = _config(args)
    scenes = _load_data(args.data)
    stage1 = _load_ckpt(args.ckpt)
    weights = None
    if args.weights is not None:
        p = Path(args.weights)
        p = p / "weights.json" if p.is_dir() else p
        raw = _read_json(p, "weights file")
        try:
            weights = WeightTable.from_dict(raw)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{p}: malformed weight table ({exc})") from None
    out = _out_dir(args.out)
    ckpt = _guarded(lambda: train_stage2(prepare(scenes), weights, cfg.train2(), stage1,
                                         cfg.planner_config()), out)
    ckpt.save(out / "checkpoint.ckpt")
    _save_log(out, ckpt)
    echo_config(cfg, out, {"data": str(args.data), "ckpt": str(args.ckpt),
                           "weights": None if args.weights is None else str(args.weights)})
    s2 = [e for e in ckpt.log if e.get("stage") == 2]
    print_table("stage 2", [("sampling", "uniform" if weights is None else cfg.stage2.weight_mode),
                            ("epochs", len(s2)), ("loss", s2[-1]["loss"]),
                            ("crc32", f"{ckpt.payload_crc():08x}")])
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = _load_ckpt(args.ckpt)
    scenes = _load_data(args.suite)
    clusters = None
    if args.assignments is not None:
        clusters, _ = _read_assignments(args.assignments)
    out = _out_dir(args.out)
    sim = cfg.simulator
    suite = [ScenarioSpec(s, max_steps=sim.max_steps, replan_interval=sim.replan_interval)
             for s in scenes]
    trace = sim.record_trace or args.traces
    report = evaluate(suite, CheckpointPlanner(ckpt, cfg.limits()), clusters, trace)
    report.write(out / "report.json")
    if trace:
        with open(out / "traces.jsonl", "w") as fh:
            for e in report.episodes:
                fh.write(json.dumps({"scene_id": e.scene_id, "trace": e.trace}) + "\n")
    echo_config(cfg, out, {"ckpt": str(args.ckpt), "suite": str(args.suite)})
    rows = [(f, v["n"], v["driving_score"], v["success_rate"]) for f, v in report.per_family.items()]
    rows.append(("all", report.n_episodes, report.driving_score, report.success_rate))
    print_table("closed-loop evaluation", rows, ("family", "n", "driving score", "success %"))
    return EXIT_OK


# -- cluster inspection -------------------------------------------------------

PANEL_W, PANEL_H = 220, 90
VIEW_X = (-25.0, 65.0)
VIEW_Y = (-12.0, 12.0)


def _svg_xy(x, y, ox, oy):
    sx = PANEL_W / (VIEW_X[1] - VIEW_X[0])
    sy = PANEL_H / (VIEW_Y[1] - VIEW_Y[0])
    return ox + (x - VIEW_X[0]) * sx, oy + (VIEW_Y[1] - y) * sy


def _polyline(points, ox, oy, style: str) -> str:
    pts = " ".join("%.1f,%.1f" % _svg_xy(x, y, ox, oy) for x, y in points)
    return f'<polyline points="{pts}" fill="none" {style}/>'


def render_scene(scene: Scene, ox: float, oy: float) -> list[str]:
    """Top-down drawing clipped to the panel: map, object discs, ego past solid, future dashed."""
    x0, y0 = scene.ego.past[-1, :2]
    shift = lambda pts: np.asarray(pts)[:, :2] - [x0, y0]
    el = [f'<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="white" '
          f'stroke="#bbb"/>']
    for pl in scene.map:
        style = ('stroke="#8fb3d9" stroke-width="1.5"' if pl.role == "route_centerline"
                 else 'stroke="#ccc" stroke-width="1"')
        el.append(_polyline(shift(pl.points), ox, oy, style))
    sx = PANEL_W / (VIEW_X[1] - VIEW_X[0])
    for ob in scene.objects:
        color = "#d95f02" if ob.kind == "vehicle" else "#7570b3"
        el.append(_polyline(shift(ob.future), ox, oy, f'stroke="{color}" stroke-dasharray="2,2"'))
        cx, cy = _svg_xy(*shift(ob.past[-1:])[0], ox, oy)
        el.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{ob.radius * sx:.1f}" fill="{color}"/>')
    el.append(_polyline(shift(scene.ego.past), ox, oy, 'stroke="#1b9e77" stroke-width="2"'))
    el.append(_polyline(shift(np.vstack([scene.ego.past[-1:], scene.ego.future])), ox, oy,
                        'stroke="#1b9e77" stroke-width="2" stroke-dasharray="4,2"'))
    cx, cy = _svg_xy(0.0, 0.0, ox, oy)
    el.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{scene.ego.radius * sx:.1f}" '
              f'fill="#1b9e77"/>')
    el.append(f'<text x="{ox + 3}" y="{oy + PANEL_H - 4}" font-size="9" fill="#555">'
              f'#{scene.scene_id} {scene.family}</text>')
    return el


def render_montage(rows: list[tuple[int, list[Scene]]], per_row: int) -> str:
    """One row per cluster id; every panel in a row shares that id."""
    label_w, gap = 70, 6
    width = label_w + per_row * (PANEL_W + gap)
    height = len(rows) * (PANEL_H + gap) + gap
    body = []
    for r, (k, scenes) in enumerate(rows):
        oy = gap + r * (PANEL_H + gap)
        body.append(f'<text x="6" y="{oy + PANEL_H / 2:.0f}" font-size="12">code {k}</text>')
        for c, sc in enumerate(scenes[:per_row]):
            ox = label_w + c * (PANEL_W + gap)
            body += render_scene(sc, ox, oy)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n' + "\n".join(body) + "\n</svg>\n")


def purity_table(assignments: dict[int, int], families: dict[int, str]) -> dict:
    groups: dict[int, Counter] = {}
    for sid, k in assignments.items():
        groups.setdefault(k, Counter())[families[sid]] += 1
    rows = {}
    for k in sorted(groups):
        c = groups[k]
        fam, n = max(sorted(c.items()), key=lambda kv: kv[1])
        rows[str(k)] = {"n": sum(c.values()), "majority": fam, "purity": n / sum(c.values()),
                        "families": dict(sorted(c.items()))}
    total = sum(r["n"] for r in rows.values())
    overall = sum(r["n"] * r["purity"] for r in rows.values()) / total
    return {"clusters": rows, "purity": overall}


def cmd_inspect_clusters(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    scenes = _load_data(args.data)
    out = _out_dir(args.out)
    a = assign_clusters(scenes, ckpt)
    by_id = {s.scene_id: s for s in scenes}
    members: dict[int, list[Scene]] = {}
    for sid in sorted(a):
        members.setdefault(a[sid], []).append(by_id[sid])
    if args.cluster is not None:
        if args.cluster not in members:
            raise ValidationError(f"--cluster {args.cluster}: no scene assigned "
                                  f"(non-empty clusters: {sorted(members)})")
        chosen = [args.cluster]
    else:
        chosen = sorted(members, key=lambda k: (-len(members[k]), k))[:args.top]
    rows = [(k, members[k]) for k in chosen]
    for k, sc in rows:
        (out / f"cluster_{k:03d}.svg").write_text(render_montage([(k, sc)], args.per_row))
    (out / "montage.svg").write_text(render_montage(rows, args.per_row))
    table = purity_table(a, {s.scene_id: s.family for s in scenes})
    _write_json(out / "purity.json", table)
    echo_config(_config(args), out, {"ckpt": str(args.ckpt), "data": str(args.data)})
    print_table("clusters", [(k, v["n"], v["majority"], v["purity"])
                             for k, v in table["clusters"].items()],
                ("code", "n", "majority family", "purity"))
    print(f"overall purity {table['purity']:.4f}; rendered codes {chosen}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plumbing


def _config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seeds.data = cfg.seeds.train = args.seed
    return cfg


def _guarded(fn, out: Path):
    try:
        return fn()
    except TrainingError as exc:
        if exc.checkpoint is not None:
            exc.checkpoint.save(out / "last_good.ckpt")
            log.error("last good checkpoint written to %s", out / "last_good.ckpt")
        raise


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="caps", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None, help="cap torch intra-op threads")
    ap.add_argument("--seed", type=int, default=None, help="override seeds.data and seeds.train")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, *opts, config=True):
        p = sub.add_parser(name)
        if config:
            p.add_argument("--config", default=None, help="YAML run config")
        for flag, kw in opts:
            p.add_argument(flag, **kw)
        p.set_defaults(fn=fn)
        return p

    req = {"required": True}
    add("gen-data", cmd_gen_data, ("--out", req))
    add("train-stage1", cmd_train_stage1, ("--data", req), ("--out", req))
    add("assign", cmd_assign, ("--ckpt", req), ("--data", req), ("--out", req))
    add("weights", cmd_weights, ("--assignments", req), ("--out", req))
    add("train-stage2", cmd_train_stage2, ("--data", req), ("--ckpt", req), ("--out", req),
        ("--weights", {"default": None, "help": "omit for the uniform baseline"}))
    add("eval", cmd_eval, ("--ckpt", req), ("--suite", req), ("--out", req),
        ("--assignments", {"default": None, "help": "per-cluster breakdown"}),
        ("--traces", {"action": "store_true"}))
    p = add("inspect-clusters", cmd_inspect_clusters, ("--ckpt", req), ("--data", req),
            ("--out", req), ("--per-row", {"type": int, "default": 6}))
    g = p.add_mutually_exclusive_group()
    g.add_argument("--cluster", type=int, default=None)
    g.add_argument("--top", type=int, default=8)
    return ap


INVALID = (ValidationError, ConfigurationError, DatasetError, SceneValidationError,
           CheckpointError, InputValidationError, FileNotFoundError, ValueError, KeyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_INVALID
        torch.set_num_threads(args.threads)
    try:
        return args.fn(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything else is a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
