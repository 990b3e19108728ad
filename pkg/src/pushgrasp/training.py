"""Two-step training: supervised grasp/critic learning, then push learning as a bandit.

Step 1 collects oracle-labelled grasps on random scenes and fits GraspNet
(sparse BCE at the labelled entries) and CriticNet (MSE on one footprint
image per sample).  Step 2 trains PushNet online: every push is scored by
imagining the best grasp in the post-push world on a snapshot, and the
critic is fine-tuned on those imagined grasps.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .equinets.nets import build_net, default_config
from .geometry2d import (
    ActionMap,
    GridSpec,
    OrientationScheme,
    Pose2,
    dilate_mask,
    draw_gripper_footprint,
    pose_from_index,
)
from .policy import (
    Nets,
    Observation,
    PolicyConfig,
    apply_action,
    critic_score,
    propose_grasp,
    push_valid_mask,
)
from .simworld import (
    GripperSpec,
    Scene,
    SimConfig,
    deserialize_scene,
    execute_grasp,
    restore,
    serialize_scene,
    snapshot,
    spawn_constrained_case,
    spawn_random_scene,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, curve: Sequence[float]):
        super().__init__(msg)
        self.curve = list(curve)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# losses and optimizer


def bce_loss(q: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Summed binary cross entropy, predictions clamped to [1e-7, 1 - 1e-7]."""
    q = q.clamp(1e-7, 1.0 - 1e-7)
    y = y.to(q.dtype)
    return -(y * torch.log(q) + (1.0 - y) * torch.log(1.0 - q)).sum()


def mse_loss(pred: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if pred.numel() == 0:
        raise ValueError("mse_loss of an empty batch")
    if pred.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(y.shape)}")
    return ((y.to(pred.dtype) - pred) ** 2).mean()


def huber_loss(r: torch.Tensor, q: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Mean of ``0.5 d^2`` for ``|d| <= 1`` and ``delta (|d| - 0.5)`` otherwise."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    d = torch.as_tensor(r, dtype=q.dtype) - q
    a = d.abs()
    return torch.where(a <= 1.0, 0.5 * d * d, delta * (a - 0.5)).mean()


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float,
             momentum: float, velocity: Optional[List[torch.Tensor]] = None):
    """Classical momentum: ``v <- mu v - lr g``, ``p <- p + v``; returns (params, velocity)."""
    if velocity is None:
        velocity = [torch.zeros_like(p) for p in params]
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        v = momentum * v - lr * (torch.zeros_like(p) if g is None else g)
        new_v.append(v)
        new_p.append(p + v)
    return new_p, new_v


class MomentumSGD:
    """In-place ``sgd_step`` over a module's parameters."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = [p for p in params]
        self.lr, self.momentum = lr, momentum
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        grads = [p.grad for p in self.params]
        new_p, self.velocity = sgd_step([p.detach() for p in self.params], grads, self.lr,
                                        self.momentum, self.velocity)
        for p, q in zip(self.params, new_p):
            p.copy_(q)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    critic_lr: float = 0.05
    critic_epochs: int = 2
    bandit_steps: int = 500
    epsilon_start: float = 0.5
    epsilon_end: float = 0.1
    delta: float = 1.0
    tau: float = 0.5
    max_push_attempts: int = 5
    buffer_size: int = 500
    push_lr: float = 0.01
    push_batch: int = 8
    critic_finetune_every: int = 10
    critic_finetune_batch: int = 16
    critic_finetune_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("epsilon_start", "epsilon_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")

    def epsilon(self, step: int) -> float:
        """Linear decay over the first half of the bandit steps, then constant."""
        half = max(1, self.bandit_steps // 2)
        t = min(1.0, step / half)
        return self.epsilon_start + t * (self.epsilon_end - self.epsilon_start)


def write_curve(path, values: Sequence[float], header: str = "value") -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", header])
    for k, v in enumerate(values):
        w.writerow([k, repr(float(v))])
    Path(path).write_text(buf.getvalue())


def read_curve(path) -> List[float]:
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    return [float(r[1]) for r in rows[1:]]


# ---------------------------------------------------------------------------
# grasp dataset
#
# Directory layout:
#   manifest.json   counts, grid, scheme, gripper, seeds, record layout
#   scenes.bin      per scene: u32 byte length, serialized scene
#   records.bin     fixed 15-byte records, little-endian:
#                   u32 scene index, u32 target body id, u16 c, u16 i, u16 j, u8 label

RECORD_DTYPE = np.dtype([("scene", "<u4"), ("target", "<u4"), ("c", "<u2"), ("i", "<u2"),
                         ("j", "<u2"), ("label", "u1")])


@dataclass
class GraspSample:
    depth: np.ndarray
    target_mask: np.ndarray
    union_mask: np.ndarray
    masks: np.ndarray
    bins: Tuple[int, int, int]
    label: int


class GraspDataset:
    def __init__(self, manifest: dict, scenes: List[bytes], records: np.ndarray):
        self.manifest = manifest
        self.scene_bytes = scenes
        self.records = records
        self.grid = GridSpec.centered(manifest["grid_size"], manifest["span"])
        self.scheme = OrientationScheme(**manifest["scheme"])
        self.gripper = GripperSpec(**manifest["gripper"])
        self._obs: Dict[int, Observation] = {}
        self._feet: Dict[Tuple[int, int, int], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_scenes(self) -> int:
        return len(self.scene_bytes)

    def scene(self, k: int) -> Scene:
        return deserialize_scene(self.scene_bytes[k])

    def observation(self, k: int) -> Observation:
        if k not in self._obs:
            self._obs[k] = Observation.of(self.scene(k), self.grid)
        return self._obs[k]

    def pose(self, rec) -> Pose2:
        return pose_from_index(int(rec["c"]), int(rec["i"]), int(rec["j"]), self.grid, self.scheme)

    def footprint(self, c: int, i: int, j: int) -> np.ndarray:
        key = (c, i, j)
        if key not in self._feet:
            pose = pose_from_index(c, i, j, self.grid, self.scheme)
            self._feet[key] = draw_gripper_footprint(pose, self.grid, self.gripper)
        return self._feet[key]

    def sample(self, n: int) -> GraspSample:
        rec = self.records[n]
        obs = self.observation(int(rec["scene"]))
        return GraspSample(obs.depth, obs.target_mask(int(rec["target"])), obs.masks.union,
                           obs.masks.masks, (int(rec["c"]), int(rec["i"]), int(rec["j"])), int(rec["label"]))

    def critic_input(self, n: int) -> np.ndarray:
        rec = self.records[n]
        obs = self.observation(int(rec["scene"]))
        foot = self.footprint(int(rec["c"]), int(rec["i"]), int(rec["j"]))
        return np.stack([obs.depth, obs.target_mask(int(rec["target"])), obs.masks.union, foot]).astype(np.float32)

    def subset_scenes(self, scene_ids: Sequence[int]) -> np.ndarray:
        """Record indices belonging to the given scenes."""
        return np.nonzero(np.isin(self.records["scene"], np.asarray(scene_ids)))[0]

    # persistence

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "manifest.json").write_text(json.dumps(self.manifest, sort_keys=True, indent=1) + "\n")
        with open(root / "scenes.bin", "wb") as fh:
            for blob in self.scene_bytes:
                fh.write(struct.pack("<I", len(blob)))
                fh.write(blob)
        (root / "records.bin").write_bytes(self.records.astype(RECORD_DTYPE).tobytes())

    @classmethod
    def load(cls, root) -> "GraspDataset":
        root = Path(root)
        if not (root / "manifest.json").is_file():
            raise FileNotFoundError(f"no dataset manifest in {root}")
        manifest = json.loads((root / "manifest.json").read_text())
        raw = (root / "scenes.bin").read_bytes()
        scenes, pos = [], 0
        while pos < len(raw):
            if pos + 4 > len(raw):
                raise ValueError(f"scenes.bin truncated at offset {pos}")
            (n,) = struct.unpack_from("<I", raw, pos)
            if pos + 4 + n > len(raw):
                raise ValueError(f"scenes.bin truncated at offset {pos}")
            scenes.append(raw[pos + 4:pos + 4 + n])
            pos += 4 + n
        rec_raw = (root / "records.bin").read_bytes()
        if len(rec_raw) % RECORD_DTYPE.itemsize:
            raise ValueError("records.bin size is not a multiple of the record size")
        records = np.frombuffer(rec_raw, dtype=RECORD_DTYPE).copy()
        if len(scenes) != manifest["num_scenes"] or len(records) != manifest["counts"]["total"]:
            raise ValueError("dataset files disagree with the manifest")
        return cls(manifest, scenes, records)


def _label(scene: Scene, pose: Pose2, target: int, gripper: GripperSpec, sim: SimConfig) -> int:
    outcome, _ = execute_grasp(scene, pose, gripper, sim)
    return int(outcome.success and outcome.removed_body == target)


def _oracle_positives(scene, mask, target, grid, scheme, gripper, sim, rng, max_pixels=24):
    ii, jj = np.nonzero(mask)
    if len(ii) > max_pixels:
        pick = np.sort(rng.choice(len(ii), size=max_pixels, replace=False))
        ii, jj = ii[pick], jj[pick]
    found = []
    for i, j in zip(ii, jj):
        for c in range(scheme.n_orient):
            if _label(scene, pose_from_index(c, int(i), int(j), grid, scheme), target, gripper, sim):
                found.append((c, int(i), int(j)))
    return found


def collect_grasp_dataset(num_scenes: int = 300, objects_range: Tuple[int, int] = (2, 5),
                          grasps_per_mask: int = 64, seed: int = 0,
                          grid: GridSpec | None = None, gripper: GripperSpec = GripperSpec(),
                          sim: SimConfig = SimConfig(), sample_dilation_px: int = 2,
                          out_dir=None) -> GraspDataset:
    """Oracle-labelled grasps: half uniform over each dilated mask, half near oracle positives.

    A label is 1 when the grasp succeeds and lifts the body whose mask it was
    sampled from.
    """
    if grasps_per_mask < 1:
        raise ValueError("grasps_per_mask must be >= 1")
    grid = grid or GridSpec.centered(64)
    scheme = OrientationScheme.grasp_default(4)
    lo, hi = objects_range
    scenes, rows, seeds = [], [], []
    for s in range(num_scenes):
        rng = np.random.default_rng(derive_seed(seed, s, 1))
        n = int(rng.integers(lo, hi + 1))
        scene_seed = derive_seed(seed, s, 2)
        scene = spawn_random_scene(n, scene_seed)
        seeds.append(scene_seed)
        snap = snapshot(scene)
        masks = Observation.of(scene, grid).masks
        for bid, mask in zip(masks.ids, masks.masks):
            if not mask.any():
                continue
            region = dilate_mask(mask, sample_dilation_px)
            ri, rj = np.nonzero(region)
            n_uniform = grasps_per_mask - grasps_per_mask // 2
            positives = _oracle_positives(scene, mask, bid, grid, scheme, gripper, sim, rng)
            picks = []
            for _ in range(n_uniform):
                k = int(rng.integers(len(ri)))
                picks.append((int(rng.integers(scheme.n_orient)), int(ri[k]), int(rj[k])))
            for _ in range(grasps_per_mask - n_uniform):
                if positives:
                    c, i, j = positives[int(rng.integers(len(positives)))]
                    c = (c + int(rng.integers(-1, 2))) % scheme.n_orient
                    i = int(np.clip(i + int(rng.integers(-1, 2)), 0, grid.h - 1))
                    j = int(np.clip(j + int(rng.integers(-1, 2)), 0, grid.w - 1))
                else:
                    k = int(rng.integers(len(ri)))
                    c, i, j = int(rng.integers(scheme.n_orient)), int(ri[k]), int(rj[k])
                picks.append((c, i, j))
            for c, i, j in picks:
                y = _label(scene, pose_from_index(c, i, j, grid, scheme), bid, gripper, sim)
                rows.append((s, bid, c, i, j, y))
            scene = restore(snap)
        scenes.append(snap.data)
    records = np.array(rows, dtype=RECORD_DTYPE)
    pos = int(records["label"].sum()) if len(records) else 0
    manifest = {
        "format": 1,
        "num_scenes": num_scenes,
        "objects_range": [lo, hi],
        "grasps_per_mask": grasps_per_mask,
        "seed": seed,
        "scene_seeds": seeds,
        "grid_size": grid.h,
        "span": grid.span,
        "scheme": {"group_order": scheme.group_order, "n_orient": scheme.n_orient, "range": scheme.range},
        "gripper": asdict(gripper),
        "sample_dilation_px": sample_dilation_px,
        "record_layout": "u32 scene, u32 target, u16 c, u16 i, u16 j, u8 label (little-endian)",
        "counts": {"total": len(records), "positive": pos, "negative": len(records) - pos},
    }
    ds = GraspDataset(manifest, scenes, records)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


def replay_labels(ds: GraspDataset, sim: SimConfig = SimConfig()) -> float:
    """Fraction of stored labels reproduced by re-running the oracle."""
    if len(ds) == 0:
        return 1.0
    agree = 0
    cache: Dict[int, Scene] = {}
    for rec in ds.records:
        k = int(rec["scene"])
        if k not in cache:
            cache = {k: ds.scene(k)}
        agree += _label(cache[k], ds.pose(rec), int(rec["target"]), ds.gripper, sim) == int(rec["label"])
    return agree / len(ds)


# ---------------------------------------------------------------------------
# step 1: supervised training


def _check_divergence(curve, initial, what):
    if not math.isfinite(curve[-1]) or (initial > 0 and curve[-1] > 10.0 * initial):
        raise TrainingDiverged(
            f"{what} diverged at update {len(curve)}: loss {curve[-1]:.4g} vs initial {initial:.4g}", curve)


def _scene_batches(ds: GraspDataset, scene_ids: Sequence[int]):
    by_scene: Dict[int, np.ndarray] = {}
    order = np.argsort(ds.records["scene"], kind="stable")
    sc = ds.records["scene"][order]
    starts = np.searchsorted(sc, scene_ids, side="left")
    ends = np.searchsorted(sc, scene_ids, side="right")
    for s, a, b in zip(scene_ids, starts, ends):
        by_scene[int(s)] = order[a:b]
    return by_scene


def train_grasp_net(ds: GraspDataset, config: TrainConfig = TrainConfig(), net=None,
                    scenes_per_batch: int = 1, scene_ids: Sequence[int] | None = None,
                    curve_path=None, max_updates: int | None = None):
    """Sparse BCE at each sample's (c, i, j); returns (net, per-update loss curve).

    The summed loss of a batch is divided by its sample count so the step
    size does not depend on how many grasps a scene contributes.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if net is None:
        net = build_net(default_config("grasp", ds.grid, init_seed=config.seed))
    scene_ids = np.arange(ds.num_scenes) if scene_ids is None else np.asarray(scene_ids)
    groups = _scene_batches(ds, scene_ids)
    scene_ids = [s for s in scene_ids if len(groups[int(s)])]
    opt = MomentumSGD(net.parameters(), config.lr, config.momentum)
    rng = np.random.default_rng(derive_seed(config.seed, 11))
    dt = next(net.parameters()).dtype
    curve: List[float] = []
    initial = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(scene_ids))
        for b0 in range(0, len(order), scenes_per_batch):
            batch = [int(scene_ids[k]) for k in order[b0:b0 + scenes_per_batch]]
            depth = torch.as_tensor(np.stack([ds.observation(s).depth for s in batch]), dtype=dt)[:, None]
            q = net(depth)
            picked, labels = [], []
            for bi, s in enumerate(batch):
                rec = ds.records[groups[s]]
                idx = (torch.full((len(rec),), bi, dtype=torch.long), torch.as_tensor(rec["c"].astype(np.int64)),
                       torch.as_tensor(rec["i"].astype(np.int64)), torch.as_tensor(rec["j"].astype(np.int64)))
                picked.append(q[idx])
                labels.append(torch.as_tensor(rec["label"].astype(np.float64)))
            qs, ys = torch.cat(picked), torch.cat(labels)
            loss = bce_loss(qs, ys) / len(qs)
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(loss.item())
            if initial is None:
                initial = curve[0]
            _check_divergence(curve, initial, "grasp training")
            if max_updates is not None and len(curve) >= max_updates:
                break
        if max_updates is not None and len(curve) >= max_updates:
            break
    if curve_path is not None:
        write_curve(curve_path, curve, "bce")
    return net, curve


def critic_batch(ds: GraspDataset, idx: Sequence[int], dtype=torch.float32):
    x = torch.as_tensor(np.stack([ds.critic_input(int(n)) for n in idx]), dtype=dtype)
    y = torch.as_tensor(ds.records["label"][np.asarray(idx)].astype(np.float64), dtype=dtype)
    return x, y


def train_critic_net(ds: GraspDataset, config: TrainConfig = TrainConfig(), net=None,
                     record_ids: Sequence[int] | None = None, curve_path=None,
                     max_updates: int | None = None):
    """MSE between the critic score and the binary label; returns (net, curve)."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if net is None:
        net = build_net(default_config("critic", ds.grid, init_seed=config.seed + 1))
    ids = np.arange(len(ds)) if record_ids is None else np.asarray(record_ids)
    opt = MomentumSGD(net.parameters(), config.critic_lr, config.momentum)
    rng = np.random.default_rng(derive_seed(config.seed, 12))
    dt = next(net.parameters()).dtype
    curve: List[float] = []
    initial = None
    for epoch in range(config.critic_epochs):
        order = ids[rng.permutation(len(ids))]
        for b0 in range(0, len(order), config.batch_size):
            x, y = critic_batch(ds, order[b0:b0 + config.batch_size], dt)
            loss = mse_loss(net(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(loss.item())
            if initial is None:
                # the first loss is tiny for a lucky init; guard against it
                initial = max(curve[0], 0.05)
            _check_divergence(curve, initial, "critic training")
            if max_updates is not None and len(curve) >= max_updates:
                break
        if max_updates is not None and len(curve) >= max_updates:
            break
    if curve_path is not None:
        write_curve(curve_path, curve, "mse")
    return net, curve


@torch.no_grad()
def critic_separation(net, ds: GraspDataset, record_ids: Sequence[int] | None = None,
                      batch: int = 256) -> Tuple[float, float]:
    """Mean critic score on positive and on negative samples."""
    ids = np.arange(len(ds)) if record_ids is None else np.asarray(record_ids)
    dt = next(net.parameters()).dtype
    scores = []
    for b0 in range(0, len(ids), batch):
        x, _ = critic_batch(ds, ids[b0:b0 + batch], dt)
        scores.append(net(x).double().numpy())
    s = np.concatenate(scores)
    y = ds.records["label"][ids].astype(bool)
    return float(s[y].mean()), float(s[~y].mean())


# ---------------------------------------------------------------------------
# step 2: grasp imagination and the push bandit


@dataclass
class Imagination:
    success: bool
    score: float
    action_bins: Tuple[int, int, int]
    critic_input: np.ndarray
    scene: Scene  # the restored world


def grasp_imagination(scene: Scene, target_id: int, nets: Nets, dilation_px: int = 1,
                      obs: Observation | None = None) -> Imagination:
    """Try pi's best target grasp on a snapshot, score it with sigma, restore."""
    obs = obs or Observation.of(scene, nets.grid)
    k = obs.target_mask(target_id)
    if not k.any():
        raise ValueError(f"target {target_id} has an empty mask")
    snap = snapshot(scene)
    grasp, _ = propose_grasp(nets.grasp, obs.depth, k, nets.grid, dilation_px)
    foot = draw_gripper_footprint(grasp.pose, nets.grid, nets.gripper)
    x = np.stack([obs.depth, k, obs.masks.union, foot]).astype(np.float32)
    score = critic_score(nets.critic, obs, k, grasp.pose, nets.grid, nets.gripper)
    outcome, _ = execute_grasp(restore(snap), grasp.pose, nets.gripper, nets.sim)
    success = bool(outcome.success and outcome.removed_body == target_id)
    return Imagination(success, score, grasp.bins, x, restore(snap))


def push_reward(success: bool, s_before: float, s_after: float) -> float:
    return 1.0 if success else float(s_after - s_before)


def select_push(amap: ActionMap, valid: np.ndarray, epsilon: float, rng: np.random.Generator):
    """Epsilon-greedy over valid entries; ``valid`` is ``(h, w)`` or ``(n, h, w)``."""
    v = np.broadcast_to(np.asarray(valid, dtype=bool), amap.scores.shape)
    flat = np.flatnonzero(v)
    if len(flat) == 0:
        raise ValueError("no valid push actions")
    if rng.random() < epsilon:
        k = int(flat[int(rng.integers(len(flat)))])
        return tuple(int(t) for t in np.unravel_index(k, amap.scores.shape))
    return amap.masked(v).argmax()


@dataclass
class BanditTransition:
    step: int
    scene: bytes  # pre-push world; network inputs are its rendering
    target_id: int
    action: Tuple[int, int, int]
    reward: float
    success: bool
    s_before: float
    s_after: float


def write_transitions(path, transitions: Sequence[BanditTransition]) -> None:
    """JSON lines plus a side file of pre-push scene blobs."""
    path = Path(path)
    blob_path = path.with_suffix(".scenes")
    lines, pos = [], 0
    with open(blob_path, "wb") as fh:
        for t in transitions:
            fh.write(t.scene)
            lines.append(json.dumps({
                "step": t.step, "target_id": t.target_id, "action": list(t.action), "reward": t.reward,
                "success": t.success, "s_before": t.s_before, "s_after": t.s_after,
                "scene_offset": pos, "scene_len": len(t.scene)}, sort_keys=True))
            pos += len(t.scene)
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def read_transitions(path) -> List[BanditTransition]:
    path = Path(path)
    raw = path.with_suffix(".scenes").read_bytes()
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        blob = raw[d["scene_offset"]:d["scene_offset"] + d["scene_len"]]
        out.append(BanditTransition(d["step"], blob, d["target_id"], tuple(d["action"]), d["reward"],
                                    d["success"], d["s_before"], d["s_after"]))
    return out


def audit_transitions(transitions: Sequence[BanditTransition]) -> float:
    """Fraction satisfying r = 1 on imagined success, else r = s_after - s_before exactly."""
    if not transitions:
        return 1.0
    ok = 0
    for t in transitions:
        expected = 1.0 if t.success else t.s_after - t.s_before
        ok += t.reward == expected
    return ok / len(transitions)


def _push_tensors(obs: Observation, target_id: int, dtype):
    k = obs.target_mask(target_id)
    x = np.stack([obs.depth, k, obs.masks.union])
    t = obs.masks.ids.index(target_id)
    return torch.as_tensor(x, dtype=dtype), torch.as_tensor(obs.masks.masks, dtype=dtype), t


class _SceneSource:
    """Endless stream of constrained-case scenes, deterministic in the seed."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(derive_seed(seed, 21))

    def next(self) -> Scene:
        case = int(self.rng.integers(1, 9))
        scene, _ = spawn_constrained_case(case, int(self.rng.integers(2 ** 31)))
        return scene


@dataclass
class PushTrainResult:
    push: object
    critic: object
    rewards: List[float]
    losses: List[float]
    transitions: List[BanditTransition]
    imagination_audit: bool


def train_push_net(nets: Nets, config: TrainConfig = TrainConfig(), out_dir=None,
                   scene_source=None) -> PushTrainResult:
    """Contextual-bandit push training against grasp imagination.

    For each scene, targets are taken mask by mask; targets whose imagined
    grasp already succeeds are skipped.  On the first failure a push episode
    of up to ``max_push_attempts`` pushes begins.  The grasp net is never
    updated.
    """
    dt = next(nets.grasp.parameters()).dtype
    if nets.push is None:
        nets.push = build_net(default_config("push", nets.grid, init_seed=config.seed + 2)).to(dt)
    push_net, critic = nets.push, nets.critic
    for p in nets.grasp.parameters():
        p.requires_grad_(False)
    opt = MomentumSGD(push_net.parameters(), config.push_lr, config.momentum)
    copt = MomentumSGD(critic.parameters(), config.critic_finetune_lr, config.momentum)
    rng = np.random.default_rng(derive_seed(config.seed, 22))
    source = scene_source or _SceneSource(config.seed)
    buffer: List[Tuple[torch.Tensor, torch.Tensor, int, Tuple[int, int, int], float]] = []
    critic_pairs: List[Tuple[np.ndarray, float]] = []
    transitions: List[BanditTransition] = []
    rewards: List[float] = []
    losses: List[float] = []
    audit_ok = True
    pconf = PolicyConfig(tau=config.tau, max_push_attempts=config.max_push_attempts)

    def imagine(scene, target):
        nonlocal audit_ok
        before = serialize_scene(scene)
        im = grasp_imagination(scene, target, nets)
        audit_ok &= serialize_scene(im.scene) == before
        critic_pairs.append((im.critic_input, float(im.success)))
        del critic_pairs[:-config.buffer_size]
        return im

    step = 0
    while step < config.bandit_steps:
        initial = source.next()
        snap = snapshot(initial)
        for target in initial.ids:
            if step >= config.bandit_steps:
                break
            scene = restore(snap)
            if not Observation.of(scene, nets.grid).target_mask(target).any():
                continue
            im = imagine(scene, target)
            if im.success:
                continue
            for _ in range(config.max_push_attempts):
                if step >= config.bandit_steps:
                    break
                obs = Observation.of(scene, nets.grid)
                k = obs.target_mask(target)
                valid = push_valid_mask(obs.masks.union, k, nets.grid, nets.gripper, pconf.push_radius)
                if not valid.any():
                    break
                x, masks, t = _push_tensors(obs, target, dt)
                with torch.no_grad():
                    q = push_net(x[None], [masks], [t])[0].double().numpy()
                amap = ActionMap(push_net.config.scheme, nets.grid, q)
                c, i, j = select_push(amap, valid, config.epsilon(step), rng)
                pose = pose_from_index(c, i, j, nets.grid, amap.scheme)
                pre = serialize_scene(scene)
                scene, _, _ = apply_action(scene, "push", pose, nets, pconf)
                after_obs = Observation.of(scene, nets.grid)
                if after_obs.target_mask(target).any():
                    im_after = imagine(scene, target)
                    success, s_after = im_after.success, im_after.score
                else:
                    success, s_after = False, 0.0
                r = push_reward(success, im.score, s_after)
                transitions.append(BanditTransition(step, pre, target, (c, i, j), r, success, im.score, s_after))
                rewards.append(r)
                buffer.append((x, masks, t, (c, i, j), r))
                del buffer[:-config.buffer_size]
                losses.append(_push_update(push_net, opt, buffer, config, rng))
                step += 1
                if step % config.critic_finetune_every == 0 and critic_pairs:
                    _critic_update(critic, copt, critic_pairs, config, rng, dt)
                if success or not after_obs.target_mask(target).any():
                    break
                im = im_after
    for p in nets.grasp.parameters():
        p.requires_grad_(True)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_curve(out / "push_rewards.csv", rewards, "reward")
        write_curve(out / "push_losses.csv", losses, "huber")
        write_transitions(out / "transitions.jsonl", transitions)
    return PushTrainResult(push_net, critic, rewards, losses, transitions, audit_ok)


def _push_update(net, opt, buffer, config: TrainConfig, rng) -> float:
    n = min(config.push_batch, len(buffer))
    # the newest transition is always in the batch
    pick = [len(buffer) - 1] + ([int(v) for v in rng.choice(len(buffer) - 1, size=n - 1, replace=False)]
                                if n > 1 else [])
    xs = torch.stack([buffer[k][0] for k in pick])
    q = net(xs, [buffer[k][1] for k in pick], [buffer[k][2] for k in pick])
    qa = torch.stack([q[b, buffer[k][3][0], buffer[k][3][1], buffer[k][3][2]] for b, k in enumerate(pick)])
    r = torch.tensor([buffer[k][4] for k in pick], dtype=qa.dtype)
    loss = huber_loss(r, qa, config.delta)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def _critic_update(critic, opt, pairs, config: TrainConfig, rng, dt) -> float:
    n = min(config.critic_finetune_batch, len(pairs))
    pick = rng.choice(len(pairs), size=n, replace=False)
    x = torch.as_tensor(np.stack([pairs[k][0] for k in pick]), dtype=dt)
    y = torch.tensor([pairs[k][1] for k in pick], dtype=dt)
    loss = mse_loss(critic(x), y)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()
