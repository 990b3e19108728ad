"""Inference-time push/grasp decision loop.

A target-filtered grasp is proposed from the grasp map, the critic scores it,
and the policy grasps when the score clears the threshold (or the push budget
is spent); otherwise it pushes at the best valid push-map entry.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from .equinets.nets import critic_forward, grasp_forward, push_forward
from .geometry2d import ActionMap, GridSpec, Pose2, dilate_mask, draw_gripper_footprint, pose_from_index
from .simworld import (
    GripperSpec,
    InvalidAction,
    MaskSet,
    Scene,
    SimConfig,
    deserialize_scene,
    execute_grasp,
    execute_push,
    render_depth,
    render_masks,
    serialize_scene,
)


@dataclass(frozen=True)
class Action:
    kind: str  # "push" | "grasp"
    pose: Pose2
    bins: Tuple[int, int, int]

    def __post_init__(self):
        if self.kind not in ("push", "grasp"):
            raise ValueError(f"unknown action kind {self.kind!r}")


@dataclass
class PolicyConfig:
    tau: float = 0.5
    max_push_attempts: int = 5
    mask_dilation_px: int = 1
    push_distance: float = 0.10
    push_radius: float = 0.15  # pushes must start this close to the target centroid

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.max_push_attempts < 0:
            raise ValueError("max_push_attempts must be >= 0")


@dataclass
class Nets:
    """Trained networks plus the shared world geometry."""

    grasp: object
    critic: object
    push: object = None
    grid: GridSpec = field(default_factory=lambda: GridSpec.centered(64))
    gripper: GripperSpec = field(default_factory=GripperSpec)
    sim: SimConfig = field(default_factory=SimConfig)


@dataclass
class Observation:
    depth: np.ndarray
    masks: MaskSet

    @classmethod
    def of(cls, scene: Scene, grid: GridSpec) -> "Observation":
        return cls(render_depth(scene, grid), render_masks(scene, grid))

    def target_mask(self, target_id: int) -> np.ndarray:
        if target_id not in self.masks.ids:
            return np.zeros_like(self.masks.union)
        return self.masks.mask_of(target_id)


# ---------------------------------------------------------------------------
# grasp proposal and critique


def propose_grasp(grasp_net, depth: np.ndarray, target_mask: np.ndarray, grid: GridSpec,
                  dilation_px: int = 1, grasp_map: ActionMap | None = None) -> Tuple[Action, float]:
    """Best grasp-map entry over the dilated target mask, all orientation bins."""
    region = dilate_mask(target_mask, dilation_px)
    if not region.any():
        raise ValueError("target mask is empty")
    amap = grasp_map if grasp_map is not None else grasp_forward(grasp_net, depth, grid)
    c, i, j = amap.masked(region).argmax()
    pose = pose_from_index(c, i, j, grid, amap.scheme)
    return Action("grasp", pose, (c, i, j)), float(amap.scores[c, i, j])


def critic_score(critic_net, obs: Observation, target_mask: np.ndarray, pose: Pose2,
                 grid: GridSpec, gripper: GripperSpec) -> float:
    foot = draw_gripper_footprint(pose, grid, gripper)
    return critic_forward(critic_net, obs.depth, target_mask, obs.masks.union, foot)


# ---------------------------------------------------------------------------
# push validity


def pusher_clearance_px(grid: GridSpec, gripper: GripperSpec) -> int:
    # pixel centers within the pusher radius of any occupied pixel, plus half a diagonal
    return int(math.ceil(gripper.pusher_radius / grid.meters_per_pixel + 0.75))


def push_valid_mask(union: np.ndarray, target_mask: np.ndarray, grid: GridSpec, gripper: GripperSpec,
                    push_radius: float = 0.15) -> np.ndarray:
    """``(h, w)`` start positions free of the pusher footprint and near the target."""
    free = ~dilate_mask(union, pusher_clearance_px(grid, gripper))
    ii, jj = np.nonzero(target_mask)
    if len(ii) == 0:
        return np.zeros_like(free)
    X, Y = grid.pixel_centers()
    cx, cy = X[ii, jj].mean(), Y[ii, jj].mean()
    near = (X - cx) ** 2 + (Y - cy) ** 2 <= push_radius ** 2
    # keep the whole pusher disc inside the workspace
    xmin, ymin, xmax, ymax = grid.bounds
    r = gripper.pusher_radius
    inside = (X >= xmin + r) & (X <= xmax - r) & (Y >= ymin + r) & (Y <= ymax - r)
    return free & near & inside


# a push selector maps (push map or None, valid (h, w) mask, observation) -> (c, i, j)
PushSelector = Callable[[Optional[ActionMap], np.ndarray, Observation], Tuple[int, int, int]]


def greedy_push(amap: ActionMap, valid: np.ndarray) -> Tuple[int, int, int]:
    if not valid.any():
        raise ValueError("no valid push actions")
    return amap.masked(valid).argmax()


def random_push_selector(rng: np.random.Generator, n_orient: int) -> PushSelector:
    """Uniform valid start pixel and uniform heading bin."""

    def select(amap, valid, obs):
        ii, jj = np.nonzero(valid)
        if len(ii) == 0:
            raise ValueError("no valid push actions")
        k = int(rng.integers(len(ii)))
        return int(rng.integers(n_orient)), int(ii[k]), int(jj[k])

    return select


@dataclass
class Decision:
    action: Action
    critic: float
    grasp_score: float
    push_score: Optional[float] = None


def decide_action(nets: Nets, obs: Observation, target_mask: np.ndarray, pushes_used: int,
                  config: PolicyConfig, push_selector: PushSelector | None = None) -> Decision:
    if pushes_used > config.max_push_attempts:
        raise ValueError("push budget exceeded")
    grasp, gscore = propose_grasp(nets.grasp, obs.depth, target_mask, nets.grid, config.mask_dilation_px)
    sigma = critic_score(nets.critic, obs, target_mask, grasp.pose, nets.grid, nets.gripper)
    if sigma >= config.tau or pushes_used >= config.max_push_attempts:
        return Decision(grasp, sigma, gscore)
    valid = push_valid_mask(obs.masks.union, target_mask, nets.grid, nets.gripper, config.push_radius)
    if not valid.any():
        return Decision(grasp, sigma, gscore)
    amap = None
    if push_selector is None:
        amap = push_forward(nets.push, obs.depth, target_mask, obs.masks.union, obs.masks.masks, nets.grid)
        c, i, j = greedy_push(amap, valid)
    else:
        c, i, j = push_selector(amap, valid, obs)
    scheme = nets.push.config.scheme if nets.push is not None else _push_scheme_for(nets)
    pose = pose_from_index(c, i, j, nets.grid, scheme)
    pscore = float(amap.scores[c, i, j]) if amap is not None else None
    return Decision(Action("push", pose, (c, i, j)), sigma, gscore, pscore)


def _push_scheme_for(nets: Nets):
    from .geometry2d import OrientationScheme

    return OrientationScheme.push_default(nets.grasp.config.group_order)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeStep:
    kind: str
    bins: Tuple[int, int, int]
    pose: Tuple[float, float, float]
    critic: float
    grasp_score: float
    push_score: Optional[float] = None
    success: Optional[bool] = None
    removed: Optional[int] = None
    blocked: bool = False  # push start rejected by the simulator

    def to_json(self) -> dict:
        d = asdict(self)
        d["bins"] = list(self.bins)
        d["pose"] = list(self.pose)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeStep":
        d = dict(d)
        d["bins"] = tuple(d["bins"])
        d["pose"] = tuple(d["pose"])
        return cls(**d)


@dataclass
class EpisodeRecord:
    target_id: int
    steps: List[EpisodeStep]
    scenes: List[bytes]  # scene before the first action, then after every action
    success: bool = False
    reason: str = ""
    n_objects: int = 0

    @property
    def pushes(self) -> int:
        return sum(s.kind == "push" for s in self.steps)

    def header(self) -> dict:
        return {"target_id": self.target_id, "success": self.success, "reason": self.reason,
                "n_objects": self.n_objects, "n_steps": len(self.steps)}

    def write(self, path, blob_path=None) -> None:
        """JSON lines (header, then one step per line) plus a scene blob file."""
        path = Path(path)
        blob_path = Path(blob_path) if blob_path else path.with_suffix(".scenes")
        offsets, pos = [], 0
        with open(blob_path, "wb") as fh:
            for blob in self.scenes:
                fh.write(blob)
                offsets.append([pos, len(blob)])
                pos += len(blob)
        head = self.header()
        head["blobs"] = blob_path.name
        head["offsets"] = offsets
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(s.to_json(), sort_keys=True) for s in self.steps]
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "EpisodeRecord":
        path = Path(path)
        lines = path.read_text().splitlines()
        head = json.loads(lines[0])
        raw = (path.parent / head["blobs"]).read_bytes()
        scenes = [raw[o:o + n] for o, n in head["offsets"]]
        steps = [EpisodeStep.from_json(json.loads(l)) for l in lines[1:] if l.strip()]
        return cls(head["target_id"], steps, scenes, head["success"], head["reason"], head["n_objects"])


def apply_action(scene: Scene, kind: str, pose: Pose2, nets: Nets, config: PolicyConfig):
    """Execute one action; returns (scene, grasp outcome or None, blocked flag)."""
    if kind == "grasp":
        outcome, after = execute_grasp(scene, pose, nets.gripper, nets.sim)
        return after, outcome, False
    try:
        return execute_push(scene, pose, config.push_distance, nets.gripper, nets.sim), None, False
    except InvalidAction:
        # the observation-level mask can miss sub-pixel slivers; treat as a no-op
        return scene, None, True


def run_retrieval_episode(scene: Scene, target_id: int, nets: Nets, config: PolicyConfig,
                          push_selector: PushSelector | None = None) -> EpisodeRecord:
    if target_id not in scene.ids:
        raise ValueError(f"target {target_id} not in scene")
    record = EpisodeRecord(target_id, [], [serialize_scene(scene)], n_objects=len(scene.bodies))
    pushes = 0
    while True:
        obs = Observation.of(scene, nets.grid)
        k = obs.target_mask(target_id)
        if not k.any():
            record.reason = "target_not_visible"
            return record
        dec = decide_action(nets, obs, k, pushes, config, push_selector)
        act = dec.action
        scene, outcome, blocked = apply_action(scene, act.kind, act.pose, nets, config)
        step = EpisodeStep(act.kind, act.bins, act.pose.as_tuple(), dec.critic, dec.grasp_score,
                           dec.push_score, blocked=blocked)
        if outcome is not None:
            step.success = bool(outcome.success and outcome.removed_body == target_id)
            step.removed = outcome.removed_body
        record.steps.append(step)
        record.scenes.append(serialize_scene(scene))
        if act.kind == "grasp":
            record.success = bool(step.success)
            if not record.success:
                record.reason = outcome.reason or "wrong_object"
            return record
        pushes += 1


def replay_episode(record: EpisodeRecord, nets: Nets, config: PolicyConfig) -> bytes:
    """Re-execute the recorded actions on the stored initial scene."""
    scene = deserialize_scene(record.scenes[0])
    for step in record.steps:
        scene, _, _ = apply_action(scene, step.kind, Pose2(*step.pose), nets, config)
    return serialize_scene(scene)
