"""Evaluation tasks, metrics, reports and rendered episode frames.

Metrics are computed from episode logs only (JSON lines, one action per
line) so a report can always be regenerated from the logs.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .equinets.checkpoint import load_checkpoint
from .equinets.nets import grasp_forward
from .geometry2d import GridSpec, OrientationScheme, Pose2, dilate_mask, draw_gripper_footprint, pose_from_index
from .policy import (
    Action,
    EpisodeRecord,
    EpisodeStep,
    Nets,
    Observation,
    PolicyConfig,
    apply_action,
    random_push_selector,
    run_retrieval_episode,
)
from .simworld import (
    Scene,
    deserialize_scene,
    render_depth,
    render_masks,
    restore,
    serialize_scene,
    snapshot,
    spawn_constrained_case,
    spawn_random_scene,
)
from .training import derive_seed

POLICIES = ("learned", "random_push", "grasp_only", "random_bin")


class LogParseError(ValueError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


# ---------------------------------------------------------------------------
# metrics


def percent(frac: Optional[Fraction]) -> Optional[float]:
    """Exact percentage rounded half-up to one decimal."""
    if frac is None:
        return None
    tenths = math.floor(frac * 1000 + Fraction(1, 2))
    return tenths / 10


@dataclass
class MetricsReport:
    grasp_successes: int = 0
    grasp_attempts: int = 0
    objects_grasped: int = 0
    total_objects: int = 0
    grasp_actions: int = 0
    total_actions: int = 0
    per_seed: Dict[str, dict] = field(default_factory=dict)

    @staticmethod
    def _ratio(a, b) -> Optional[Fraction]:
        return Fraction(a, b) if b > 0 else None

    @property
    def gsr(self) -> Optional[Fraction]:
        return self._ratio(self.grasp_successes, self.grasp_attempts)

    @property
    def dr(self) -> Optional[Fraction]:
        return self._ratio(self.objects_grasped, self.total_objects)

    @property
    def me(self) -> Optional[Fraction]:
        return self._ratio(self.grasp_actions, self.total_actions)

    @property
    def flags(self) -> List[str]:
        out = []
        for name in ("gsr", "dr", "me"):
            if getattr(self, name) is None:
                out.append(f"{name}_omitted_zero_denominator")
        return out

    def summary(self) -> dict:
        return {"gsr": percent(self.gsr), "dr": percent(self.dr), "me": percent(self.me),
                "counts": {"grasp_successes": self.grasp_successes, "grasp_attempts": self.grasp_attempts,
                           "objects_grasped": self.objects_grasped, "total_objects": self.total_objects,
                           "grasp_actions": self.grasp_actions, "total_actions": self.total_actions},
                "flags": self.flags}


def episode_log_lines(record: EpisodeRecord, run: str, seed: int, episode: int) -> List[str]:
    """One JSON line per action; ``n_objects`` is the object count of the run's initial scene."""
    lines = []
    for k, s in enumerate(record.steps):
        d = {"run": run, "seed": seed, "episode": episode, "step": k, "target_id": record.target_id,
             "n_objects": record.n_objects, "kind": s.kind, "bins": list(s.bins), "pose": list(s.pose),
             "critic": s.critic, "success": s.success, "removed": s.removed, "blocked": s.blocked}
        lines.append(json.dumps(d, sort_keys=True))
    return lines


_REQUIRED = ("run", "seed", "kind", "n_objects")


def compute_metrics(lines: Iterable[str]) -> MetricsReport:
    rep = MetricsReport()
    run_objects: Dict[str, int] = {}
    grasped: Dict[str, set] = {}
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogParseError(f"invalid JSON ({exc.msg})", no) from exc
        if not isinstance(d, dict) or any(k not in d for k in _REQUIRED):
            raise LogParseError("missing required fields", no)
        if d["kind"] not in ("push", "grasp"):
            raise LogParseError(f"unknown action kind {d['kind']!r}", no)
        run = str(d["run"])
        run_objects.setdefault(run, int(d["n_objects"]))
        seed_key = str(d["seed"])
        ps = rep.per_seed.setdefault(seed_key, {"grasp_successes": 0, "grasp_attempts": 0, "actions": 0})
        rep.total_actions += 1
        ps["actions"] += 1
        if d["kind"] == "grasp":
            rep.grasp_actions += 1
            rep.grasp_attempts += 1
            ps["grasp_attempts"] += 1
            if d.get("success"):
                rep.grasp_successes += 1
                ps["grasp_successes"] += 1
            # any lifted object leaves the workspace, target or not
            if d.get("removed") is not None:
                grasped.setdefault(run, set()).add(d["removed"])
    rep.total_objects = sum(run_objects.values())
    rep.objects_grasped = sum(len(v) for v in grasped.values())
    return rep


def counts_report(successes: int, attempts: int, grasp_actions: int | None = None,
                  total_actions: int | None = None) -> MetricsReport:
    """Report built directly from counts (used for externally tallied trials)."""
    rep = MetricsReport(grasp_successes=successes, grasp_attempts=attempts)
    if grasp_actions is not None:
        rep.grasp_actions, rep.total_actions = grasp_actions, total_actions
    return rep


# ---------------------------------------------------------------------------
# task specification and checkpoints


@dataclass
class TaskSpec:
    task: str = "retrieval"  # retrieval | clearing | constrained
    object_counts: Tuple[int, ...] = (5, 8)
    seeds: Tuple[int, ...] = (0, 1, 2, 3)
    target_total: int = 60
    push_budget: int = 5
    ckpt_dir: Optional[str] = None
    policy: str = "learned"
    tau: float = 0.5
    iterations: int = 10
    cases: Tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)

    def __post_init__(self):
        if self.task not in ("retrieval", "clearing", "constrained"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.push_budget < 0:
            raise ValueError("push budget must be >= 0")

    def rounds(self, n_objects: int) -> int:
        return max(1, self.target_total // n_objects)

    def policy_config(self, budget: int | None = None) -> PolicyConfig:
        b = self.push_budget if budget is None else budget
        if self.policy in ("grasp_only", "random_bin"):
            b = 0
        return PolicyConfig(tau=self.tau, max_push_attempts=b)


def load_nets(ckpt_dir, grid: GridSpec | None = None, need_push: bool = True) -> Nets:
    root = Path(ckpt_dir)
    paths = {k: root / f"{k}.ckpt" for k in ("grasp", "critic", "push")}
    for k, p in paths.items():
        if (k != "push" or need_push) and not p.is_file():
            raise FileNotFoundError(f"missing checkpoint {p}")
    grasp = load_checkpoint(paths["grasp"])
    critic = load_checkpoint(paths["critic"])
    push = load_checkpoint(paths["push"]) if paths["push"].is_file() else None
    if grid is None:
        span = 0.40
        size = int(round(span / grasp.config.meters_per_pixel))
        grid = GridSpec.centered(size, span)
    return Nets(grasp, critic, push, grid)


# ---------------------------------------------------------------------------
# episodes per policy


def random_bin_episode(scene: Scene, target_id: int, nets: Nets, rng: np.random.Generator,
                       dilation_px: int = 1) -> EpisodeRecord:
    """Baseline: one grasp at a uniform pixel of the dilated target mask, uniform bin."""
    record = EpisodeRecord(target_id, [], [serialize_scene(scene)], n_objects=len(scene.bodies))
    obs = Observation.of(scene, nets.grid)
    k = obs.target_mask(target_id)
    if not k.any():
        record.reason = "target_not_visible"
        return record
    ii, jj = np.nonzero(dilate_mask(k, dilation_px))
    scheme = nets.grasp.config.scheme
    p = int(rng.integers(len(ii)))
    c = int(rng.integers(scheme.n_orient))
    pose = pose_from_index(c, int(ii[p]), int(jj[p]), nets.grid, scheme)
    after, outcome, _ = apply_action(scene, "grasp", pose, nets, PolicyConfig())
    # no networks are consulted, so both scores are recorded as 0
    step = EpisodeStep("grasp", (c, int(ii[p]), int(jj[p])), pose.as_tuple(), 0.0, 0.0,
                       success=bool(outcome.success and outcome.removed_body == target_id),
                       removed=outcome.removed_body)
    record.steps.append(step)
    record.scenes.append(serialize_scene(after))
    record.success = bool(step.success)
    if not record.success:
        record.reason = outcome.reason or "wrong_object"
    return record


def run_episode(scene: Scene, target_id: int, nets: Nets, policy: str, config: PolicyConfig,
                rng: np.random.Generator) -> EpisodeRecord:
    if policy == "random_bin":
        return random_bin_episode(scene, target_id, nets, rng, config.mask_dilation_px)
    if policy == "grasp_only":
        config = PolicyConfig(config.tau, 0, config.mask_dilation_px, config.push_distance, config.push_radius)
        return run_retrieval_episode(scene, target_id, nets, config)
    selector = None
    if policy == "random_push":
        n_orient = nets.push.config.n_orient if nets.push is not None else \
            OrientationScheme.push_default(nets.grasp.config.group_order).n_orient
        selector = random_push_selector(rng, n_orient)
    elif nets.push is None and config.max_push_attempts > 0:
        raise ValueError("learned push policy needs a push checkpoint")
    return run_retrieval_episode(scene, target_id, nets, config, selector)


@dataclass
class TaskResult:
    report: MetricsReport
    lines: List[str]
    records: List[EpisodeRecord]
    extra: dict = field(default_factory=dict)


def run_clutter_retrieval(spec: TaskSpec, nets: Nets | None = None) -> TaskResult:
    """Every object of every round's scene is the target once, from the same start."""
    nets = nets or load_nets(spec.ckpt_dir, need_push=spec.policy == "learned" and spec.push_budget > 0)
    cfg = spec.policy_config()
    lines, records = [], []
    for seed in spec.seeds:
        rng = np.random.default_rng(derive_seed(seed, 31))
        for n in spec.object_counts:
            for rnd in range(spec.rounds(n)):
                scene = spawn_random_scene(n, derive_seed(seed, n, rnd, 32))
                snap = snapshot(scene)
                run = f"retrieval-s{seed}-n{n}-r{rnd}"
                for ep, target in enumerate(scene.ids):
                    rec = run_episode(restore(snap), target, nets, spec.policy, cfg, rng)
                    records.append(rec)
                    lines += episode_log_lines(rec, run, seed, ep)
    return TaskResult(compute_metrics(lines), lines, records)


def highest_score_target(nets: Nets, obs: Observation) -> Optional[int]:
    """Object whose dilated mask holds the largest grasp-map score."""
    if not obs.masks.ids:
        return None
    q = grasp_forward(nets.grasp, obs.depth, nets.grid).scores.max(axis=0)
    best, best_id = -np.inf, None
    for bid, m in zip(obs.masks.ids, obs.masks.masks):
        if not m.any():
            continue
        v = float(q[dilate_mask(m, 1)].max())
        if v > best:
            best, best_id = v, bid
    return best_id


def clear_scene(scene: Scene, nets: Nets, policy: str, config: PolicyConfig, rng, run: str,
                seed: int, max_failures: int):
    lines, records = [], []
    n_objects = len(scene.bodies)
    failures, ep = 0, 0
    while scene.bodies and failures < max_failures:
        obs = Observation.of(scene, nets.grid)
        target = highest_score_target(nets, obs)
        if target is None:
            break
        rec = run_episode(scene, target, nets, policy, config, rng)
        rec.n_objects = n_objects
        records.append(rec)
        lines += episode_log_lines(rec, run, seed, ep)
        ep += 1
        scene = deserialize_scene(rec.scenes[-1])
        failures = 0 if rec.success else failures + 1
    return lines, records


def run_clutter_clearing(spec: TaskSpec, nets: Nets | None = None) -> Dict[str, TaskResult]:
    """Clear each scene with and without pushes on identical seeds.

    A variant stops when the workspace is empty or after ``2 n`` consecutive
    failed episodes.
    """
    nets = nets or load_nets(spec.ckpt_dir, need_push=spec.policy == "learned" and spec.push_budget > 0)
    out = {}
    for variant, budget in (("without", 0), ("with", spec.push_budget)):
        cfg = spec.policy_config(budget)
        lines, records = [], []
        for seed in spec.seeds:
            rng = np.random.default_rng(derive_seed(seed, 33))
            for n in spec.object_counts:
                scene = spawn_random_scene(n, derive_seed(seed, n, 34))
                l, r = clear_scene(scene, nets, spec.policy, cfg, rng, f"clearing-s{seed}-n{n}", seed, 2 * n)
                lines += l
                records += r
        out[variant] = TaskResult(compute_metrics(lines), lines, records)
    return out


def run_constrained(spec: TaskSpec, nets: Nets | None = None, rotation: float | None = None) -> TaskResult:
    """Per-case success table over ``spec.iterations`` seeded layouts per case."""
    nets = nets or load_nets(spec.ckpt_dir, need_push=spec.policy == "learned" and spec.push_budget > 0)
    cfg = spec.policy_config()
    lines, records, table = [], [], {}
    for seed in spec.seeds:
        rng = np.random.default_rng(derive_seed(seed, 35))
        for case in spec.cases:
            wins = 0
            for it in range(spec.iterations):
                scene, target = spawn_constrained_case(case, derive_seed(seed, case, it, 36), rotation)
                rec = run_episode(scene, target, nets, spec.policy, cfg, rng)
                records.append(rec)
                lines += episode_log_lines(rec, f"constrained-s{seed}-c{case}-i{it}", seed, 0)
                wins += rec.success
            prev = table.get(case, (0, 0))
            table[case] = (prev[0] + wins, prev[1] + spec.iterations)
    return TaskResult(compute_metrics(lines), lines, records, {"table": table})


def run_constrained_suite(nets: Nets, n_episodes: int, seed: int, policy: str, budget: int,
                          tau: float = 0.5) -> TaskResult:
    """``n_episodes`` consecutive constrained layouts cycling through the eight cases."""
    cfg = PolicyConfig(tau=tau, max_push_attempts=budget)
    rng = np.random.default_rng(derive_seed(seed, 37))
    lines, records = [], []
    for k in range(n_episodes):
        case = 1 + k % 8
        scene, target = spawn_constrained_case(case, derive_seed(seed, k, 38))
        rec = run_episode(scene, target, nets, policy, cfg, rng)
        records.append(rec)
        lines += episode_log_lines(rec, f"suite-{seed}-{k}", seed, 0)
    return TaskResult(compute_metrics(lines), lines, records)


def run_heldout_grasping(nets: Nets, n_scenes: int, seed: int, policy: str = "grasp_only",
                         objects_range: Tuple[int, int] = (2, 5)) -> TaskResult:
    """Single-grasp retrieval of every object of ``n_scenes`` held-out random scenes.

    Each target starts from the scene's initial snapshot and no pushes are
    allowed, so the GSR isolates the grasp network (or the random-bin baseline).
    """
    lo, hi = objects_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad objects_range {objects_range}")
    counts = np.random.default_rng(derive_seed(seed, 39)).integers(lo, hi + 1, size=n_scenes)
    rng = np.random.default_rng(derive_seed(seed, 40))
    cfg = PolicyConfig(tau=0.5, max_push_attempts=0)
    lines, records = [], []
    for k, n in enumerate(counts):
        scene = spawn_random_scene(int(n), derive_seed(seed, k, 41))
        snap = snapshot(scene)
        for ep, target in enumerate(scene.ids):
            rec = run_episode(restore(snap), target, nets, policy, cfg, rng)
            records.append(rec)
            lines += episode_log_lines(rec, f"heldout-{seed}-{k}", seed, ep)
    return TaskResult(compute_metrics(lines), lines, records)


def run_task(spec: TaskSpec, nets: Nets | None = None):
    if spec.task == "retrieval":
        return {"main": run_clutter_retrieval(spec, nets)}
    if spec.task == "clearing":
        return run_clutter_clearing(spec, nets)
    return {"main": run_constrained(spec, nets)}


# ---------------------------------------------------------------------------
# reports


def _fmt(v: Optional[float]) -> str:
    return "n/a" if v is None else f"{v:.1f}"


def write_report(results: Dict[str, TaskResult], path, title: str = "") -> None:
    """``<path>.csv`` metric table, ``<path>.txt`` summary, ``<path>.episodes.jsonl`` raw logs."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "gsr", "dr", "me", "grasp_successes", "grasp_attempts", "objects_grasped",
                "total_objects", "grasp_actions", "total_actions"])
    text = [title or "evaluation report", ""]
    logs = []
    for name in sorted(results):
        res = results[name]
        s = res.report.summary()
        c = s["counts"]
        w.writerow([name, _fmt(s["gsr"]), _fmt(s["dr"]), _fmt(s["me"]), c["grasp_successes"], c["grasp_attempts"],
                    c["objects_grasped"], c["total_objects"], c["grasp_actions"], c["total_actions"]])
        text.append(f"[{name}]")
        text.append(f"  GSR {_fmt(s['gsr'])}%  ({c['grasp_successes']}/{c['grasp_attempts']})")
        text.append(f"  DR  {_fmt(s['dr'])}%  ({c['objects_grasped']}/{c['total_objects']})")
        text.append(f"  ME  {_fmt(s['me'])}%  ({c['grasp_actions']}/{c['total_actions']})")
        for flag in s["flags"]:
            text.append(f"  note: {flag}")
        table = res.extra.get("table")
        if table:
            text.append("  case  successes/total")
            for case in sorted(table):
                text.append(f"  {case:>4}  {table[case][0]}/{table[case][1]}")
        text.append("")
        logs += [json.dumps({"variant": name, **json.loads(l)}, sort_keys=True) for l in res.lines]
    Path(f"{base}.csv").write_text(buf.getvalue())
    Path(f"{base}.txt").write_text("\n".join(text))
    Path(f"{base}.episodes.jsonl").write_text("\n".join(logs) + ("\n" if logs else ""))


def report_from_logs(path, variant: str | None = None) -> MetricsReport:
    lines = Path(path).read_text().splitlines()
    if variant is not None:
        lines = [l for l in lines if l.strip() and json.loads(l).get("variant") == variant]
    return compute_metrics(lines)


# ---------------------------------------------------------------------------
# frames


def _line(img, p0, p1, color):
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 1
    for t in np.linspace(0.0, 1.0, n * 2):
        r = int(round(p0[0] + t * (p1[0] - p0[0])))
        c = int(round(p0[1] + t * (p1[1] - p0[1])))
        if 0 <= r < img.shape[0] and 0 <= c < img.shape[1]:
            img[r, c] = color


def _frame(scene: Scene, grid: GridSpec, target_id: int, step: Optional[EpisodeStep],
           push_distance: float, gripper, scale: int) -> np.ndarray:
    depth = render_depth(scene, grid)
    masks = render_masks(scene, grid)
    gray = np.clip(depth / 0.04, 0.0, 1.0) * 160 + 60 * (depth > 0)
    img = np.repeat(gray[..., None], 3, axis=2)
    if target_id in masks.ids:
        k = masks.mask_of(target_id)
        img[k] = 0.5 * img[k] + 0.5 * np.array([255.0, 40.0, 40.0])
    if step is not None and step.kind == "grasp":
        foot = draw_gripper_footprint(Pose2(*step.pose), grid, gripper).astype(bool)
        img[foot] = np.array([40.0, 220.0, 60.0])
    img = np.kron(img, np.ones((scale, scale, 1)))
    if step is not None and step.kind == "push":
        x, y, th = step.pose
        i0, j0 = grid.world_to_pixel(x, y)
        L = push_distance / grid.meters_per_pixel
        p0 = ((i0 + 0.5) * scale, (j0 + 0.5) * scale)
        p1 = (p0[0] + math.sin(th) * L * scale, p0[1] + math.cos(th) * L * scale)
        color = np.array([60.0, 120.0, 255.0])
        _line(img, p0, p1, color)
        for side in (-1.0, 1.0):
            a = th + math.pi + side * 0.5
            tip = (p1[0] + math.sin(a) * 2.5 * scale, p1[1] + math.cos(a) * 2.5 * scale)
            _line(img, p1, tip, color)
    # row 0 is the lowest y; flip so +y points up in the image
    return np.clip(np.round(img[::-1]), 0, 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def render_frames(record: EpisodeRecord, out_dir, grid: GridSpec | None = None, gripper=None,
                  push_distance: float = 0.10, scale: int = 4) -> List[Path]:
    """One PPM per stored scene; frame k overlays the action taken from it."""
    from .simworld import GripperSpec

    grid = grid or GridSpec.centered(64)
    gripper = gripper or GripperSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, blob in enumerate(record.scenes):
        step = record.steps[k] if k < len(record.steps) else None
        rgb = _frame(deserialize_scene(blob), grid, record.target_id, step, push_distance, gripper, scale)
        p = out / f"frame_{k:03d}.ppm"
        write_ppm(p, rgb)
        paths.append(p)
    return paths
