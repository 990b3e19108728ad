"""Desk-scale acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The Step 1 and Step 2 fixtures build the full pipeline at a 64x64 grid, which
takes on the order of an hour on one CPU core.  Deselect with
``-m "not acceptance"`` for a quick run.
"""
from __future__ import annotations

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from pushgrasp.equinets import (
    GroupConv,
    LiftConv,
    OrientationHead,
    build_net,
    checkpoint_bytes,
    critic_forward,
    default_config,
    gradient_check_details,
    grasp_forward,
    group_max_pool2d,
    group_pool,
    group_upsample2d,
    net_from_bytes,
    push_forward,
    smooth_leaky,
)
from pushgrasp.equinets.layers import init_params
from pushgrasp.equinets.nets import GraphAttention, ResBlock
from pushgrasp.evalharness import counts_report, percent, run_constrained_suite, run_heldout_grasping
from pushgrasp.geometry2d import (
    GridSpec,
    GroupElement,
    OrientationScheme,
    Pose2,
    act_on_map,
    draw_gripper_footprint,
    pose_from_index,
    rotate_image,
)
from pushgrasp.policy import Nets, Observation, PolicyConfig, apply_action
from pushgrasp.simworld import (
    GripperSpec,
    deserialize_scene,
    execute_grasp,
    execute_push,
    push_start_valid,
    render_depth,
    render_masks,
    restore,
    serialize_scene,
    snapshot,
    spawn_random_scene,
)
from pushgrasp.training import (
    GraspDataset,
    TrainConfig,
    audit_transitions,
    bce_loss,
    collect_grasp_dataset,
    critic_separation,
    grasp_imagination,
    huber_loss,
    mse_loss,
    read_transitions,
    replay_labels,
    train_critic_net,
    train_grasp_net,
    train_push_net,
)

pytestmark = pytest.mark.acceptance

G64 = GridSpec.centered(64)
G32 = GridSpec.centered(32)
N = 4


def _scene_channels(seed: int, grid: GridSpec):
    scene = spawn_random_scene(int(np.random.default_rng(seed).integers(2, 6)), seed)
    return scene, render_depth(scene, grid), render_masks(scene, grid)


# ---------------------------------------------------------------------------
# 1. equivariance


def test_criterion_1_equivariance(verdict):
    t0 = time.perf_counter()
    grasp = build_net(default_config("grasp", G64, init_seed=11))
    push = build_net(default_config("push", G64, init_seed=12))
    critic = build_net(default_config("critic", G64, init_seed=13))
    gripper = GripperSpec()
    worst = {"pi": 0.0, "phi": 0.0, "sigma": 0.0}
    rng = np.random.default_rng(100)
    for k in range(20):
        scene, depth, masks = _scene_channels(200 + k, G64)
        target = int(rng.integers(len(masks.ids)))
        tmask = masks.masks[target]
        pose = Pose2(*rng.uniform(-0.1, 0.1, 2), float(rng.uniform(0, math.pi)))
        foot = draw_gripper_footprint(pose, G64, gripper).astype(np.float64)
        a_pi = grasp_forward(grasp, depth, G64)
        a_phi = push_forward(push, depth, tmask, masks.union, masks.masks, G64)
        s = critic_forward(critic, depth, tmask, masks.union, foot)
        for g in GroupElement.all(N):
            r = lambda a: rotate_image(np.asarray(a), g.angle)  # noqa: E731
            pi_rot = grasp_forward(grasp, r(depth), G64).scores
            phi_rot = push_forward(push, r(depth), r(tmask), r(masks.union), r(masks.masks), G64).scores
            s_rot = critic_forward(critic, r(depth), r(tmask), r(masks.union), r(foot))
            worst["pi"] = max(worst["pi"], float(np.abs(pi_rot - act_on_map(g, a_pi).scores).max()))
            worst["phi"] = max(worst["phi"], float(np.abs(phi_rot - act_on_map(g, a_phi).scores).max()))
            worst["sigma"] = max(worst["sigma"], abs(s_rot - s))
    elapsed = time.perf_counter() - t0
    ok = worst["pi"] <= 1e-4 and worst["phi"] <= 1e-4 and worst["sigma"] <= 1e-5 and elapsed < 120
    verdict(1, "equivariance of pi, phi and invariance of sigma", ok,
            f"pi {worst['pi']:.2e}, phi {worst['phi']:.2e}, sigma {worst['sigma']:.2e}, {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 2. gradient checks


def _layer_cases():
    gen = np.random.default_rng(0)

    def rand(*shape):
        return torch.from_numpy(gen.standard_normal(shape))

    mods = {
        "lift": LiftConv(2, 3, N).double(),
        "group": GroupConv(2, 3, N).double(),
        "head": OrientationHead(2, OrientationScheme.grasp_default()).double(),
        "resblock": ResBlock(2, N).double(),
        "graph": GraphAttention(3).double(),
    }
    for k, m in enumerate(mods.values()):
        init_params(m, k)
        for p in m.parameters():
            # non-trivial biases and gains so no gradient is identically zero
            with torch.no_grad():
                p.add_(0.1 * rand(*p.shape))
    img, feat, nodes = rand(1, 2, 32, 32), rand(1, N, 2, 32, 32), rand(5, N, 3)
    adj = torch.tensor([[0, 1, 1, 0, 1]] + [[1, 0, 0, 0, 0]] * 4, dtype=torch.bool)
    x_act = rand(2, 50).requires_grad_()
    x_pool = rand(1, N, 2, 32, 32).requires_grad_()
    return {
        "lift": (lambda: mods["lift"](img), list(mods["lift"].parameters())),
        "group": (lambda: mods["group"](feat), list(mods["group"].parameters())),
        "head": (lambda: mods["head"](feat), list(mods["head"].parameters())),
        "resblock": (lambda: mods["resblock"](feat), list(mods["resblock"].parameters())),
        "graph": (lambda: mods["graph"](nodes, adj)[0], list(mods["graph"].parameters())),
        "smooth_leaky": (lambda: smooth_leaky(x_act), [x_act]),
        "max_pool": (lambda: group_max_pool2d(x_pool), [x_pool]),
        "upsample": (lambda: group_upsample2d(x_pool), [x_pool]),
        "group_pool": (lambda: group_pool(x_pool), [x_pool]),
    }


def _net_cases():
    scene, depth, masks = _scene_channels(5, G32)
    tmask = masks.masks[0]
    foot = draw_gripper_footprint(Pose2(0.0, 0.0, 0.3), G32, GripperSpec()).astype(np.float64)
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))  # noqa: E731
    grasp = build_net(default_config("grasp", G32, init_seed=0)).double()
    critic = build_net(default_config("critic", G32, init_seed=0)).double()
    push = build_net(default_config("push", G32, init_seed=0)).double()
    xg = t(depth)[None, None]
    xc = torch.stack([t(depth), t(tmask), t(masks.union), t(foot)])[None]
    xp = torch.stack([t(depth), t(tmask), t(masks.union)])[None]
    mp = t(masks.masks)
    return {
        "GraspNet": (lambda: grasp(xg), list(grasp.parameters())),
        "CriticNet": (lambda: critic(xc), list(critic.parameters())),
        "PushNet": (lambda: push(xp, [mp], [0]), list(push.parameters())),
    }


def test_criterion_2_gradient_checks(verdict):
    t0 = time.perf_counter()
    errors = {}
    for name, (fwd, params) in {**_layer_cases(), **_net_cases()}.items():
        res = gradient_check_details(fwd, params, fraction=0.05, step=1e-5, seed=0)
        assert res.checked >= len(params)
        errors[name] = res.max_rel_error
        print(f"  gradcheck {name}: max rel err {res.max_rel_error:.2e} over {res.checked} entries"
              f" ({res.skipped_kinks} kinks skipped)")
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4 and elapsed < 600
    verdict(2, "finite-difference gradient checks, 32x32, float64", ok,
            f"worst {worst} {errors[worst]:.2e}, {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 3. loss values


def test_criterion_3_loss_values(verdict):
    d = torch.float64
    bce = float(bce_loss(torch.tensor([0.5], dtype=d), torch.tensor([1.0], dtype=d)))
    mse = float(mse_loss(torch.tensor([0.2], dtype=d), torch.tensor([0.7], dtype=d)))
    hub = float(huber_loss(torch.tensor([3.0], dtype=d), torch.tensor([0.5], dtype=d), delta=1.0))
    ok = abs(bce - math.log(2)) <= 1e-9 and abs(mse - 0.25) <= 1e-12 and abs(hub - 2.0) <= 1e-12
    verdict(3, "loss values", ok, f"bce {bce!r}, mse {mse!r}, huber {hub!r}")


# ---------------------------------------------------------------------------
# Step 1 pipeline shared by criteria 4 (label replay) and 5


@pytest.fixture(scope="module")
def step1(tmp_path_factory):
    root = tmp_path_factory.mktemp("step1")
    t0 = time.perf_counter()
    ds = collect_grasp_dataset(300, (2, 5), 64, seed=0, grid=G64, out_dir=root / "data")
    cfg = TrainConfig()
    grasp, grasp_curve = train_grasp_net(ds, cfg)
    critic, _ = train_critic_net(ds, cfg)
    held = collect_grasp_dataset(50, (2, 5), 64, seed=12345, grid=G64)
    pos, neg = critic_separation(critic, held)
    nets = Nets(grasp, critic, None, G64)
    learned = run_heldout_grasping(nets, 50, 10 ** 6, "grasp_only")
    random_bin = run_heldout_grasping(nets, 50, 10 ** 6, "random_bin")
    elapsed = time.perf_counter() - t0
    return {"root": root, "grasp": grasp, "critic": critic, "separation": pos - neg, "pos_neg": (pos, neg),
            "learned": learned.report, "random": random_bin.report, "elapsed": elapsed,
            "counts": ds.manifest["counts"], "grasp_curve": grasp_curve}


# ---------------------------------------------------------------------------
# 4. simulator contracts


def _random_valid_push(scene, rng, gripper):
    for _ in range(1000):
        x, y = rng.uniform(-0.18, 0.18, 2)
        if push_start_valid(scene, x, y, gripper):
            return Pose2(float(x), float(y), float(rng.uniform(-math.pi, math.pi)))
    raise RuntimeError("no free push start")


def test_criterion_4_simulator_contracts(verdict, step1):
    gripper = GripperSpec()
    rng = np.random.default_rng(4)
    # snapshot -> 5 random pushes -> restore is byte identical
    restore_ok = 0
    for seed in range(100):
        scene = spawn_random_scene(int(rng.integers(2, 9)), 4000 + seed)
        before = serialize_scene(scene)
        snap = snapshot(scene)
        cur = scene
        for _ in range(5):
            cur = execute_push(cur, _random_valid_push(cur, rng, gripper))
        restore_ok += serialize_scene(restore(snap)) == before and serialize_scene(scene) == before
    # 90 degree equivariance of render, push and grasp
    rot = math.pi / 2
    drift, render_ok, grasp_ok = 0.0, 0, 0
    for k in range(20):
        scene = spawn_random_scene(int(rng.integers(3, 8)), 5000 + k)
        turned = scene.rotated(rot)
        render_ok += bool(np.array_equal(render_depth(turned, G64), rotate_image(render_depth(scene, G64), rot)))
        pose = _random_valid_push(scene, rng, gripper)
        a = execute_push(scene, pose).rotated(rot)
        b = execute_push(turned, pose.rotated(rot))
        for ba, bb in zip(a.bodies, b.bodies):
            drift = max(drift, math.hypot(ba.pose.x - bb.pose.x, ba.pose.y - bb.pose.y))
        body = scene.bodies[int(rng.integers(len(scene.bodies)))]
        gpose = Pose2(body.pose.x, body.pose.y, float(rng.uniform(0, math.pi)))
        oa, _ = execute_grasp(scene, gpose)
        ob, _ = execute_grasp(turned, gpose.rotated(rot))
        grasp_ok += (oa.success, oa.removed_body) == (ob.success, ob.removed_body)
    # label replay on the stored Step 1 dataset
    stored = GraspDataset.load(step1["root"] / "data")
    replay = replay_labels(stored)
    ok = restore_ok == 100 and render_ok == 20 and grasp_ok == 20 and drift <= 1e-9 and replay == 1.0
    verdict(4, "simulator snapshot, 90 degree equivariance and label replay", ok,
            f"restore {restore_ok}/100, render {render_ok}/20, grasp {grasp_ok}/20, push drift {drift:.1e} m,"
            f" replay {replay:.4%} of {len(stored)} samples")


# ---------------------------------------------------------------------------
# 5. Step 1


def test_criterion_5_step1(verdict, step1):
    gsr = float(step1["learned"].gsr)
    rnd = float(step1["random"].gsr)
    sep = step1["separation"]
    pos, neg = step1["pos_neg"]
    minutes = step1["elapsed"] / 60
    ok = gsr >= 0.60 and gsr >= 2 * rnd and sep >= 0.2 and minutes <= 60
    verdict(5, "Step 1 held-out grasping and critic separation", ok,
            f"GSR {100 * gsr:.1f}% vs random-bin {100 * rnd:.1f}% over {step1['learned'].grasp_attempts} grasps,"
            f" separation {sep:.3f} (pos {pos:.3f}, neg {neg:.3f}), {minutes:.1f} min, samples {step1['counts']}")


# ---------------------------------------------------------------------------
# Step 2 pipeline shared by criteria 6 and 7


@pytest.fixture(scope="module")
def step2(step1):
    root = step1["root"] / "push"
    grasp = net_from_bytes(checkpoint_bytes(step1["grasp"]))
    critic = net_from_bytes(checkpoint_bytes(step1["critic"]))
    t0 = time.perf_counter()
    nets = Nets(grasp, critic, None, G64)
    res = train_push_net(nets, TrainConfig(bandit_steps=500), out_dir=root)
    nets = Nets(grasp, res.critic, res.push, G64)
    gsr = {}
    for name, policy, budget in (("push5", "learned", 5), ("random5", "random_push", 5), ("push0", "grasp_only", 0)):
        gsr[name] = float(run_constrained_suite(nets, 50, 777, policy, budget).report.gsr)
    elapsed = time.perf_counter() - t0
    return {"root": root, "nets": nets, "result": res, "gsr": gsr, "elapsed": elapsed}


def test_criterion_6_step2(verdict, step2):
    g = step2["gsr"]
    minutes = step2["elapsed"] / 60
    gain0 = 100 * (g["push5"] - g["push0"])
    gain_r = 100 * (g["push5"] - g["random5"])
    ok = gain0 >= 20 and gain_r >= 10 and minutes <= 90
    verdict(6, "Step 2 pushing improves constrained-case GSR", ok,
            f"5-push {100 * g['push5']:.1f}%, 0-push {100 * g['push0']:.1f}%, random-push {100 * g['random5']:.1f}%,"
            f" {minutes:.1f} min")


# ---------------------------------------------------------------------------
# 7. reward audit


def test_criterion_7_reward_audit(verdict, step2):
    stored = read_transitions(step2["root"] / "transitions.jsonl")
    nets, res = step2["nets"], step2["result"]
    consistent = audit_transitions(stored)
    # the grasp net is frozen during Step 2, so imagined success can be re-derived
    # from each stored pre-push scene and action
    cfg = PolicyConfig()
    scheme = nets.push.config.scheme
    rederived = 0
    for t in stored:
        pose = pose_from_index(*t.action, G64, scheme)
        after, _, _ = apply_action(deserialize_scene(t.scene), "push", pose, nets, cfg)
        visible = Observation.of(after, G64).target_mask(t.target_id).any()
        success = visible and grasp_imagination(after, t.target_id, nets).success
        rederived += success == t.success and (t.reward == 1.0) == (t.success or t.s_after - t.s_before == 1.0)
    ok = len(stored) == 500 and consistent == 1.0 and rederived == len(stored) and res.imagination_audit
    verdict(7, "reward audit of persisted transitions", ok,
            f"{len(stored)} transitions, formula {consistent:.2%}, re-derived success {rederived}/{len(stored)},"
            f" imagination left scenes untouched: {res.imagination_audit}")


# ---------------------------------------------------------------------------
# 8. metric arithmetic


def test_criterion_8_metric_arithmetic(verdict):
    gsr = percent(counts_report(86, 100).gsr)
    me = percent(counts_report(0, 0, 100, 259).me)
    verdict(8, "metric arithmetic", gsr == 86.0 and me == 38.6, f"GSR {gsr}%, ME {me}%")


# ---------------------------------------------------------------------------
# 9. determinism


_PIPELINE = [
    ["gen-data", "--scenes", "3", "--objects-min", "2", "--objects-max", "3", "--grasps-per-mask", "8",
     "--grid", "16", "--out", "data"],
    ["train-grasp", "--data", "data", "--epochs", "2", "--out", "ck/grasp.ckpt"],
    ["train-critic", "--data", "data", "--epochs", "2", "--out", "ck/critic.ckpt"],
    ["train-push", "--grasp-ckpt", "ck/grasp.ckpt", "--critic-ckpt", "ck/critic.ckpt", "--steps", "8",
     "--out", "ck"],
    ["eval", "--task", "constrained", "--ckpt-dir", "ck", "--seeds", "0", "--iterations", "1",
     "--push-budget", "2", "--report", "report", "--episodes-dir", "episodes"],
]


def _run_pipeline(root: Path) -> dict:
    root.mkdir()
    for argv in _PIPELINE:
        subprocess.run([sys.executable, "-m", "pushgrasp", *argv], cwd=root, check=True,
                       stdout=subprocess.DEVNULL)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(verdict, tmp_path):
    a = _run_pipeline(tmp_path / "a")
    b = _run_pipeline(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    kinds = {Path(k).suffix for k in a}
    ok = not differing and {".ckpt", ".csv", ".jsonl", ".txt"} <= kinds
    verdict(9, "two end-to-end runs are byte identical", ok,
            f"{len(a)} files compared, differing: {differing or 'none'}")
