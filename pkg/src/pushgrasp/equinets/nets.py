"""GraspNet, CriticNet and PushNet built from the equivariant layers."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from ..geometry2d import ActionMap, GridSpec, OrientationScheme
from .layers import (
    GroupConv,
    LiftConv,
    OrientationHead,
    group_max_pool2d,
    group_pool,
    group_upsample2d,
    init_params,
    smooth_leaky,
    traced_max,
)

DEPTH_SCALE = 25.0  # 4 cm of height -> 1.0


class UNet(nn.Module):
    """Equivariant encoder-decoder: three pooling stages, three upsampling stages."""

    def __init__(self, in_c: int, N: int, widths: Sequence[int] = (8, 16, 16, 16), lifted_input: bool = False):
        super().__init__()
        c1, c2, c3, c4 = widths
        self.N = N
        first = GroupConv(in_c, c1, N) if lifted_input else LiftConv(in_c, c1, N)
        self.enc1 = nn.ModuleList([first, GroupConv(c1, c1, N)])
        self.enc2 = nn.ModuleList([GroupConv(c1, c2, N), GroupConv(c2, c2, N)])
        self.enc3 = nn.ModuleList([GroupConv(c2, c3, N), GroupConv(c3, c3, N)])
        self.mid = nn.ModuleList([GroupConv(c3, c4, N), GroupConv(c4, c4, N)])
        self.dec3 = GroupConv(c4 + c3, c3, N)
        self.dec2 = GroupConv(c3 + c2, c2, N)
        self.dec1 = GroupConv(c2 + c1, c1, N)
        self.out_c = c1

    @staticmethod
    def _stage(convs, x):
        for conv in convs:
            x = smooth_leaky(conv(x))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ValueError("spatial size must be divisible by 8")
        e1 = self._stage(self.enc1, x)
        e2 = self._stage(self.enc2, group_max_pool2d(e1))
        e3 = self._stage(self.enc3, group_max_pool2d(e2))
        m = self._stage(self.mid, group_max_pool2d(e3))
        d3 = smooth_leaky(self.dec3(torch.cat([group_upsample2d(m), e3], dim=2)))
        d2 = smooth_leaky(self.dec2(torch.cat([group_upsample2d(d3), e2], dim=2)))
        d1 = smooth_leaky(self.dec1(torch.cat([group_upsample2d(d2), e1], dim=2)))
        return d1


@dataclass
class NetConfig:
    kind: str
    group_order: int = 4
    n_orient: int = 18
    orient_range: str = "half"
    widths: Tuple[int, ...] = (8, 16, 16, 16)
    init_seed: int = 0
    meters_per_pixel: float = 0.40 / 64
    graph_radius: float = 0.12
    blocks: int = 4

    @property
    def scheme(self) -> OrientationScheme:
        return OrientationScheme(self.group_order, self.n_orient, self.orient_range)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class GraspNet(nn.Module):
    """Depth ``(B, 1, H, W)`` -> grasp probabilities ``(B, n_orient, H, W)``."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.unet = UNet(1, config.group_order, config.widths)
        self.head = OrientationHead(self.unet.out_c, config.scheme)
        init_params(self, config.init_seed)

    def logits(self, depth: torch.Tensor) -> torch.Tensor:
        return self.head(self.unet(depth * DEPTH_SCALE))

    def forward(self, depth: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(depth))


class ResBlock(nn.Module):
    def __init__(self, c: int, N: int):
        super().__init__()
        self.conv1 = GroupConv(c, c, N)
        self.conv2 = GroupConv(c, c, N)

    def forward(self, x):
        return smooth_leaky(x + self.conv2(smooth_leaky(self.conv1(x))))


class CriticNet(nn.Module):
    """``(B, 4, H, W)`` of depth, target mask, union mask, grasp footprint -> score in (0, 1)."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        c0, c = config.widths[0], config.widths[1]
        N = config.group_order
        # narrow full-resolution lift; the trunk runs at quarter resolution
        self.lift = LiftConv(4, c0, N)
        self.down = GroupConv(c0, c, N)
        self.blocks = nn.ModuleList([ResBlock(c, N) for _ in range(config.blocks)])
        self.fc = nn.Linear(2 * c, 1)
        init_params(self, config.init_seed)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 4:
            raise ValueError(f"CriticNet expects (B, 4, H, W), got {tuple(x.shape)}")
        foot = x[:, 3:4]
        x = torch.cat([x[:, :1] * DEPTH_SCALE, x[:, 1:]], dim=1)
        h = group_max_pool2d(smooth_leaky(self.lift(x)))
        h = group_max_pool2d(smooth_leaky(self.down(h)))
        for blk in self.blocks:
            h = blk(h)
        p = group_pool(h)
        # a global mean drowns the few pixels that decide one grasp, so features
        # are also averaged under the gripper footprint (rotates with the input)
        w = nn.functional.max_pool2d(foot, 4)[..., :p.shape[-2], :p.shape[-1]]
        local = (p * w).sum(dim=(-1, -2)) / w.sum(dim=(-1, -2)).clamp_min(1.0)
        feat = torch.cat([local, p.mean(dim=(-1, -2))], dim=1)
        return self.fc(feat).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


class GraphAttention(nn.Module):
    """Attention over object nodes whose features are ``(N, C)`` group vectors.

    Scores come from group-pooled (invariant) embeddings; messages use one
    channel-mixing matrix shared by all group slots.
    """

    def __init__(self, c: int, hidden: int = 16):
        super().__init__()
        self.score1 = nn.Linear(2 * c, hidden)
        self.score2 = nn.Linear(hidden, 1)
        self.msg = nn.Linear(c, c, bias=False)
        self.self_map = nn.Linear(c, c)

    def forward(self, nodes: torch.Tensor, adjacency: torch.Tensor):
        n = nodes.shape[0]
        z = traced_max(nodes, 1)
        pair = torch.cat([z[:, None, :].expand(n, n, -1), z[None, :, :].expand(n, n, -1)], dim=-1)
        e = self.score2(smooth_leaky(self.score1(pair))).squeeze(-1)
        e = e.masked_fill(~adjacency, float("-inf"))
        has_nbr = adjacency.any(dim=1, keepdim=True)
        alpha = torch.softmax(torch.where(has_nbr, e, torch.zeros_like(e)), dim=1)
        alpha = torch.where(adjacency, alpha, torch.zeros_like(alpha))
        messages = torch.einsum("ij,jnc->inc", alpha, self.msg(nodes))
        return smooth_leaky(self.self_map(nodes) + messages), alpha


class PushNet(nn.Module):
    """Depth/target/union ``(B, 3, H, W)`` plus per-object masks -> push Q-map.

    Scores are unbounded (regression onto the bandit reward).
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        N = config.group_order
        self.unet1 = UNet(3, N, config.widths)
        c = self.unet1.out_c
        self.graph = GraphAttention(c)
        self.unet2 = UNet(2 * c, N, config.widths, lifted_input=True)
        self.head = OrientationHead(self.unet2.out_c, config.scheme)
        init_params(self, config.init_seed)

    def adjacency(self, masks: torch.Tensor, target: int) -> torch.Tensor:
        n, H, W = masks.shape
        ii = torch.arange(H, dtype=masks.dtype)[:, None].expand(H, W)
        jj = torch.arange(W, dtype=masks.dtype)[None, :].expand(H, W)
        area = masks.sum(dim=(1, 2)).clamp(min=1.0)
        ci = (masks * ii).sum(dim=(1, 2)) / area
        cj = (masks * jj).sum(dim=(1, 2)) / area
        dist = torch.sqrt((ci - ci[target]) ** 2 + (cj - cj[target]) ** 2) * self.config.meters_per_pixel
        near = dist <= self.config.graph_radius
        adj = torch.zeros(n, n, dtype=torch.bool)
        adj[target] = near
        adj[:, target] = near
        adj[target, target] = False
        return adj

    def fuse(self, feat: torch.Tensor, masks: torch.Tensor, target: int):
        """Graph fusion for one sample; ``feat`` is ``(N, C, H, W)``."""
        area = masks.sum(dim=(1, 2)).clamp(min=1.0)
        nodes = torch.einsum("nchw,ohw->onc", feat, masks) / area[:, None, None]
        updated, alpha = self.graph(nodes, self.adjacency(masks, target))
        fused = feat + torch.einsum("onc,ohw->nchw", updated, masks)
        return torch.cat([feat, fused], dim=1), alpha

    def forward(self, x: torch.Tensor, masks: Sequence[torch.Tensor], targets: Sequence[int],
                return_attention: bool = False):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"PushNet expects (B, 3, H, W), got {tuple(x.shape)}")
        x = torch.cat([x[:, :1] * DEPTH_SCALE, x[:, 1:]], dim=1)
        feat = self.unet1(x)
        fused, alphas = [], []
        for b in range(feat.shape[0]):
            f, a = self.fuse(feat[b], masks[b].to(feat.dtype), int(targets[b]))
            fused.append(f)
            alphas.append(a)
        out = self.head(self.unet2(torch.stack(fused)))
        return (out, alphas) if return_attention else out


def build_net(config: NetConfig) -> nn.Module:
    cls = {"grasp": GraspNet, "critic": CriticNet, "push": PushNet}[config.kind]
    return cls(config)


def default_config(kind: str, grid: GridSpec, group_order: int = 4, init_seed: int = 0) -> NetConfig:
    if kind == "grasp":
        s = OrientationScheme.grasp_default(group_order)
        widths = (8, 16, 16, 16)
    elif kind == "critic":
        s = OrientationScheme.grasp_default(group_order)
        widths = (4, 8)
    elif kind == "push":
        s = OrientationScheme.push_default(group_order)
        widths = (8, 12, 16, 16)
    else:
        raise ValueError(kind)
    return NetConfig(kind, group_order, s.n_orient, s.range, widths, init_seed, grid.meters_per_pixel)


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# ---------------------------------------------------------------------------
# numpy-facing forwards


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("network input contains NaN or inf")


def _dtype(net: nn.Module):
    return next(net.parameters()).dtype


def grasp_forward(net: GraspNet, depth: np.ndarray, grid: GridSpec) -> ActionMap:
    _check_finite(depth)
    with torch.no_grad():
        t = torch.as_tensor(np.asarray(depth), dtype=_dtype(net))[None, None]
        q = net(t)[0].double().numpy()
    return ActionMap(net.config.scheme, grid, q)


def critic_input(depth, target_mask, union_mask, pose_image) -> np.ndarray:
    chans = [np.asarray(c, dtype=np.float64) for c in (depth, target_mask, union_mask, pose_image)]
    shapes = {c.shape for c in chans}
    if len(shapes) != 1 or len(chans[0].shape) != 2:
        raise ValueError(f"critic channels misaligned: {[c.shape for c in chans]}")
    _check_finite(*chans)
    return np.stack(chans)


def critic_forward(net: CriticNet, depth, target_mask, union_mask, pose_image) -> float:
    x = critic_input(depth, target_mask, union_mask, pose_image)
    with torch.no_grad():
        return float(net(torch.as_tensor(x, dtype=_dtype(net))[None])[0])


def push_input(depth, target_mask, union_mask, per_object_masks) -> Tuple[np.ndarray, np.ndarray, int]:
    depth = np.asarray(depth, dtype=np.float64)
    k = np.asarray(target_mask, dtype=bool)
    masks = np.asarray(per_object_masks, dtype=bool)
    _check_finite(depth)
    if masks.ndim != 3 or masks.shape[1:] != depth.shape or k.shape != depth.shape:
        raise ValueError("push inputs misaligned")
    hits = [i for i in range(len(masks)) if np.array_equal(masks[i], k)]
    if not hits:
        raise ValueError("target mask is not among the per-object masks")
    x = np.stack([depth, k.astype(np.float64), np.asarray(union_mask, dtype=np.float64)])
    return x, masks, hits[0]


def push_forward(net: PushNet, depth, target_mask, union_mask, per_object_masks, grid: GridSpec) -> ActionMap:
    x, masks, t = push_input(depth, target_mask, union_mask, per_object_masks)
    dt = _dtype(net)
    with torch.no_grad():
        q = net(torch.as_tensor(x, dtype=dt)[None], [torch.as_tensor(masks, dtype=dt)], [t])[0]
    return ActionMap(net.config.scheme, grid, q.double().numpy())
