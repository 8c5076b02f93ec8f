"""Central finite-difference checks of autograd gradients on sampled parameter entries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


@dataclass
class GradCheckResult:
    max_rel_error: float
    entries: list[tuple[str, int, float, float, float]]  # (name, flat index, analytic, numeric, rel error)

    def worst(self, n: int = 5):
        return sorted(self.entries, key=lambda e: -e[4])[:n]


def relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(fn: Callable[[], torch.Tensor], named: Sequence[tuple[str, torch.Tensor]], samples: int = 200,
                    seed: int = 0, step: float = 1e-6, floor: float = 1e-7, order: int = 2) -> GradCheckResult:
    """Compare d fn / d theta for ``samples`` random entries of the given tensors.

    ``fn`` must be deterministic (fix any sampling noise) and return a scalar.
    Entries are drawn uniformly over all elements of all tensors. ``order=4``
    uses the five-point stencil, whose O(h^4) truncation allows a larger step
    when ``fn`` carries accumulated rounding noise.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    tensors = [t for _, t in named]
    for t in tensors:
        t.grad = None
    value = fn()
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    sizes = np.array([t.numel() for t in tensors])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    entries = []
    with torch.no_grad():
        for g in flat:
            k = int(np.searchsorted(offsets, g, side="right") - 1)
            idx = int(g - offsets[k])
            t = tensors[k]
            view = t.view(-1)
            orig = view[idx].item()

            def at(delta):
                view[idx] = orig + delta
                return fn().item()

            num = (at(step) - at(-step)) / (2 * step)
            if order == 4:
                num = (4 * num - (at(2 * step) - at(-2 * step)) / (4 * step)) / 3
            view[idx] = orig
            ana = 0.0 if grads[k] is None else grads[k].reshape(-1)[idx].item()
            entries.append((named[k][0], idx, ana, num, relative_error(ana, num, floor)))
    return GradCheckResult(max(e[4] for e in entries), entries)
