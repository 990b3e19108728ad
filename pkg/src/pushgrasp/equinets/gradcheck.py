"""Finite-difference verification of reverse-mode parameter gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch

from .layers import memoize_convs, record_max_choices

# Central differences carry round-off of roughly eps * ||R * out|| / step, so
# gradients below FLOOR_SCALE * ||R * out|| are compared in absolute terms.
FLOOR_SCALE = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: Optional[Tuple[int, int, float, float]] = None  # (tensor, entry, analytic, numeric)


def _same_choices(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def gradient_check_details(
    forward: Callable[..., torch.Tensor],
    params: Sequence[torch.Tensor],
    inputs: Sequence = (),
    fraction: float = 0.05,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd against central differences on a random parameter subsample.

    The scalar readout is ``sum(R * forward(*inputs))`` for a fixed random
    tensor R.  From every parameter tensor a ``fraction`` of its entries (at
    least one) is perturbed by ``+-step`` one at a time.  When the stencil
    moves a max-pool or group-pool decision the readout is not differentiable
    inside it; that entry is replaced by the next random draw and counted in
    ``skipped_kinks``.  The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)`` with ``floor`` proportional to the
    readout's round-off scale.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("gradient_check requires 64-bit parameters")
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        out = forward(*inputs)
    weights = torch.from_numpy(rng.standard_normal(tuple(out.shape)))
    floor = max(FLOOR_SCALE * float(torch.linalg.vector_norm(weights * out)), 1e-300)

    def readout() -> torch.Tensor:
        return (forward(*inputs) * weights).sum()

    def traced() -> Tuple[float, list]:
        with record_max_choices() as trace:
            value = float(readout())
        return value, trace

    for p in params:
        p.grad = None
    grads = torch.autograd.grad(readout(), params, allow_unused=True)

    worst, where = 0.0, None
    checked = skipped = 0
    with torch.no_grad(), memoize_convs():
        _, base = traced()
        for t, (p, g) in enumerate(zip(params, grads)):
            flat = p.view(-1)
            want = max(1, int(round(fraction * flat.numel())))
            g_flat = torch.zeros_like(flat) if g is None else g.reshape(-1)
            done = 0
            for idx in rng.permutation(flat.numel()):
                if done >= want:
                    break
                old = float(flat[idx])
                flat[idx] = old + step
                up, tr_up = traced()
                flat[idx] = old - step
                down, tr_down = traced()
                flat[idx] = old
                if not (_same_choices(tr_up, base) and _same_choices(tr_down, base)):
                    skipped += 1
                    continue
                fd = (up - down) / (2.0 * step)
                an = float(g_flat[idx])
                err = abs(an - fd) / max(abs(an), abs(fd), floor)
                if err > worst:
                    worst, where = err, (t, int(idx), an, fd)
                done += 1
            checked += done
    return GradCheckResult(worst, checked, skipped, where)


def gradient_check(forward, params, inputs=(), fraction: float = 0.05, step: float = 1e-5,
                   seed: int = 0) -> float:
    """Max relative error of :func:`gradient_check_details`."""
    return gradient_check_details(forward, params, inputs, fraction, step, seed).max_rel_error
