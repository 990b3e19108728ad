"""Cyclic-group equivariant layers on regular-representation feature maps.

A group feature map is a tensor of shape ``(B, N, C, H, W)``: N group slots
of C base channels.  The generator acts by rotating every slot spatially
(counterclockwise world rotation by ``2*pi/N``) and moving slot ``m`` to
slot ``m + 1``.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..geometry2d import OrientationScheme, quarter_turns, rotation_matrix_for_grid

LEAK = 0.01
_BETA = 4.0
_LN2 = math.log(2.0)


class _SmoothLeaky(torch.autograd.Function):
    # fused in-place form; the composed version is dominated by temporaries
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        out = F.softplus(x, beta=_BETA)
        return out.mul_(1.0 - LEAK).add_(x, alpha=LEAK).sub_((1.0 - LEAK) * _LN2 / _BETA)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * torch.sigmoid(_BETA * x).mul_(1.0 - LEAK).add_(LEAK)


def smooth_leaky(x: torch.Tensor) -> torch.Tensor:
    """Smooth leaky rectifier, zero at the origin, slope 0.01 for large negative x.

    ``f(x) = 0.01 x + 0.99 (softplus(4x) - ln 2) / 4``
    """
    return _SmoothLeaky.apply(x)


_ROT_CACHE: dict = {}


def rotate_kernel(w: torch.Tensor, angle: float) -> torch.Tensor:
    """Rotate the trailing ``k x k`` axes; exact on quarter turns."""
    k = quarter_turns(angle)
    if k is not None:
        return w if k == 0 else torch.rot90(w, k=k, dims=(-1, -2))
    size = w.shape[-1]
    key = (size, round(angle, 12))
    if key not in _ROT_CACHE:
        _ROT_CACHE[key] = torch.from_numpy(rotation_matrix_for_grid(size, angle))
    M = _ROT_CACHE[key].to(w.dtype)
    flat = w.reshape(w.shape[:-2] + (size * size,))
    return (flat @ M.T).reshape(w.shape)


def rotate_feature(x: torch.Tensor, m: int, N: int) -> torch.Tensor:
    """Act with ``g_m`` on a group feature map ``(B, N, C, H, W)``."""
    from ..geometry2d import rotate_image

    return torch.roll(rotate_image(x, 2 * math.pi * m / N), shifts=m, dims=1)


def rotate_plain(x: torch.Tensor, m: int, N: int) -> torch.Tensor:
    from ..geometry2d import rotate_image

    return rotate_image(x, 2 * math.pi * m / N)


def conv2d(x: torch.Tensor, kernel: torch.Tensor, stride: int = 1, padding: int = 0,
           bias: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-correlation ``(B, Cin, H, W) * (Cout, Cin, k, k)`` with shape checks."""
    if x.dim() != 4 or kernel.dim() != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {tuple(x.shape)}, {tuple(kernel.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {kernel.shape[1]}")
    if x.shape[2] + 2 * padding < kernel.shape[2] or x.shape[3] + 2 * padding < kernel.shape[3]:
        raise ValueError("kernel larger than padded input")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def lift_kernel(base: torch.Tensor, N: int) -> torch.Tensor:
    """``(Cout, Cin, k, k)`` -> ``(N * Cout, Cin, k, k)``, slot m rotated by ``g_m``."""
    if base.shape[-1] != base.shape[-2] or base.shape[-1] % 2 == 0:
        raise ValueError("lift kernels must be square with odd size")
    return torch.cat([rotate_kernel(base, 2 * math.pi * m / N) for m in range(N)])


def group_kernel(base: torch.Tensor, N: int) -> torch.Tensor:
    """``(Cout, N, Cin, k, k)`` -> ``(N * Cout, N * Cin, k, k)``.

    Output slot m reads input slot m' through ``base[:, m' - m]`` rotated by ``g_m``.
    """
    if base.dim() != 5 or base.shape[1] != N:
        raise ValueError(f"group kernel must be (Cout, {N}, Cin, k, k), got {tuple(base.shape)}")
    if base.shape[-1] != base.shape[-2] or base.shape[-1] % 2 == 0:
        raise ValueError("group kernels must be square with odd size")
    out_c, _, in_c, k, _ = base.shape
    blocks = []
    for m in range(N):
        km = rotate_kernel(torch.roll(base, shifts=m, dims=1), 2 * math.pi * m / N)
        blocks.append(km.reshape(out_c, N * in_c, k, k))
    return torch.cat(blocks)


def lift_conv(image: torch.Tensor, base: torch.Tensor, N: int, bias: torch.Tensor | None = None,
              expanded=None) -> torch.Tensor:
    """Plain ``(B, Cin, H, W)`` -> group map ``(B, N, Cout, H, W)`` (same padding)."""
    w, b = expanded or (lift_kernel(base, N), None if bias is None else bias.repeat(N))
    y = conv2d(image, w, padding=base.shape[-1] // 2, bias=b)
    B, _, H, W = y.shape
    return y.reshape(B, N, base.shape[0], H, W)


def group_conv(x: torch.Tensor, base: torch.Tensor, N: int, bias: torch.Tensor | None = None,
               expanded=None) -> torch.Tensor:
    """Group map -> group map with ``base`` of shape ``(Cout, N, Cin, k, k)``."""
    if x.dim() != 5 or x.shape[1] != N:
        raise ValueError(f"group_conv expects (B, {N}, C, H, W), got {tuple(x.shape)}")
    if x.shape[2] != base.shape[2]:
        raise ValueError(f"channel mismatch: input {x.shape[2]}, kernel {base.shape[2]}")
    B, _, C, H, W = x.shape
    w, b = expanded or (group_kernel(base, N), None if bias is None else bias.repeat(N))
    y = conv2d(x.reshape(B, N * C, H, W), w, padding=base.shape[-1] // 2, bias=b)
    return y.reshape(B, N, base.shape[0], H, W)


_CONV_MEMO = False


class memoize_convs:
    """Within the context, no-grad convolutions reuse their last output on equal input.

    Finite-difference checks perturb one layer at a time; every layer before
    it then sees the same input and need not be recomputed.
    """

    def __enter__(self):
        global _CONV_MEMO
        self._prev = _CONV_MEMO
        _CONV_MEMO = True
        return self

    def __exit__(self, *exc):
        global _CONV_MEMO
        _CONV_MEMO = self._prev
        return False


class _CachedExpansion(nn.Module):
    """Reuses the expanded kernel across no-grad calls while the weights are unchanged.

    The key is the tensors' version counters, which every in-place update bumps.
    """

    _expand = staticmethod(lift_kernel)

    def _expanded(self):
        if torch.is_grad_enabled():
            self._cache = None
            return None
        key = tuple((t.data_ptr(), t._version, t.dtype) for t in (self.weight, self.bias) if t is not None)
        cache = getattr(self, "_cache", None)
        if cache is None or cache[0] != key:
            b = None if self.bias is None else self.bias.repeat(self.N)
            cache = (key, (self._expand(self.weight, self.N), b))
            self._cache = cache
        return cache[1]

    def _memoized(self, x: torch.Tensor, compute) -> torch.Tensor:
        if not _CONV_MEMO or torch.is_grad_enabled():
            self._memo = None
            return compute()
        key = self._cache[0] if getattr(self, "_cache", None) else None
        memo = getattr(self, "_memo", None)
        if memo is not None and memo[0] == key and memo[1].shape == x.shape and torch.equal(memo[1], x):
            return memo[2]
        out = compute()
        self._memo = (key, x.clone(), out)
        return out


class LiftConv(_CachedExpansion):
    """Plain image ``(B, Cin, H, W)`` -> group map, one rotated kernel copy per slot."""

    def __init__(self, in_c: int, out_c: int, N: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.N, self.in_c, self.out_c, self.k = N, in_c, out_c, kernel_size
        self.weight = nn.Parameter(torch.empty(out_c, in_c, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_c))
        self.fan_in = in_c * kernel_size * kernel_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_c:
            raise ValueError(f"LiftConv expects (B, {self.in_c}, H, W), got {tuple(x.shape)}")
        expanded = self._expanded()
        return self._memoized(x, lambda: lift_conv(x, self.weight, self.N, self.bias, expanded))


class GroupConv(_CachedExpansion):
    """Group map -> group map; kernel slot offsets are shared across output slots."""

    def __init__(self, in_c: int, out_c: int, N: int, kernel_size: int = 3, bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.N, self.in_c, self.out_c, self.k = N, in_c, out_c, kernel_size
        self.weight = nn.Parameter(torch.empty(out_c, N, in_c, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_c)) if bias else None
        self.fan_in = N * in_c * kernel_size * kernel_size

    _expand = staticmethod(group_kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != self.N or x.shape[2] != self.in_c:
            raise ValueError(
                f"GroupConv expects (B, {self.N}, {self.in_c}, H, W), got {tuple(x.shape)}"
            )
        expanded = self._expanded()
        return self._memoized(x, lambda: group_conv(x, self.weight, self.N, self.bias, expanded))


_MAX_TRACE: list | None = None


class record_max_choices:
    """Context manager collecting the argmax indices of every max-type layer.

    Finite-difference checks use the trace to tell when a perturbation moves
    a pooling decision (a kink of the piecewise-smooth network).
    """

    def __enter__(self) -> list:
        global _MAX_TRACE
        self._prev = _MAX_TRACE
        _MAX_TRACE = []
        return _MAX_TRACE

    def __exit__(self, *exc):
        global _MAX_TRACE
        _MAX_TRACE = self._prev
        return False


def traced_max(x: torch.Tensor, dim: int) -> torch.Tensor:
    values, idx = x.max(dim=dim)
    if _MAX_TRACE is not None:
        _MAX_TRACE.append(idx.detach().clone())
    return values


def group_max_pool2d(x: torch.Tensor) -> torch.Tensor:
    B, N, C, H, W = x.shape
    flat = x.reshape(B, N * C, H, W)
    if _MAX_TRACE is not None:
        y, idx = F.max_pool2d(flat, 2, return_indices=True)
        _MAX_TRACE.append(idx.detach().clone())
    else:
        y = F.max_pool2d(flat, 2)
    return y.reshape(B, N, C, H // 2, W // 2)


def group_upsample2d(x: torch.Tensor) -> torch.Tensor:
    B, N, C, H, W = x.shape
    y = F.interpolate(x.reshape(B, N * C, H, W), scale_factor=2, mode="nearest")
    return y.reshape(B, N, C, 2 * H, 2 * W)


def group_pool(x: torch.Tensor) -> torch.Tensor:
    """Max over the group axis: ``(B, N, C, H, W) -> (B, C, H, W)``."""
    return traced_max(x, 1)


class OrientationHead(nn.Module):
    """Group map -> orientation-binned score map.

    Each slot emits ``full_circle_bins / N`` sub-channels so that bin ``b``
    covers angle ``b * bin_width`` and the generator shifts bins by
    ``shift_per_generator``.  Half-range schemes average bins ``b`` and
    ``b + n_orient`` (orientations 180 degrees apart).
    """

    def __init__(self, in_c: int, scheme: OrientationScheme, kernel_size: int = 1):
        super().__init__()
        N = scheme.group_order
        full = scheme.full_circle_bins
        if full % N:
            raise ValueError(f"{full} bins cannot be split over C_{N}")
        self.scheme = scheme
        self.sub = full // N
        self.conv = GroupConv(in_c, self.sub, N, kernel_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(x)
        B, N, S, H, W = y.shape
        y = y.reshape(B, N * S, H, W)
        if self.scheme.range == "half":
            n = self.scheme.n_orient
            y = 0.5 * (y[:, :n] + y[:, n:])
        return y


def init_params(module: nn.Module, seed: int) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every parameter, in module order."""
    gen = torch.Generator().manual_seed(int(seed))
    for sub in module.modules():
        fan_in = getattr(sub, "fan_in", None)
        if fan_in is None and isinstance(sub, nn.Linear):
            fan_in = sub.in_features
        if fan_in is None:
            continue
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            for p in sub.parameters(recurse=False):
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul_(2 * bound).sub_(bound))
