"""Per-step state, pairwise relation and local-context embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.2


def leaky(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


class MLP(nn.Module):
    """Linear layers with leaky-ReLU between them, no activation on the output."""

    def __init__(self, sizes: Sequence[int]):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        for layer in self.layers:
            bound = layer.in_features ** -0.5
            nn.init.uniform_(layer.weight, -bound, bound)
            nn.init.uniform_(layer.bias, -bound, bound)

    def forward(self, x):
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = leaky(x)
        return x


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"non-finite {what} input")


def state_inputs(pos: torch.Tensor, vel: torch.Tensor, heading: torch.Tensor | None) -> torch.Tensor:
    """Stack (x, y, vx, vy, cos psi, sin psi, has_heading).

    ``heading`` may contain NaN where absent; those entries are zero-filled
    and flagged 0.
    """
    if heading is None:
        heading = torch.full(pos.shape[:-1], float("nan"), dtype=pos.dtype)
    has = ~torch.isnan(heading)
    h = torch.where(has, heading, torch.zeros_like(heading))
    flag = has.to(pos.dtype)
    return torch.cat([pos, vel, (torch.cos(h) * flag)[..., None], (torch.sin(h) * flag)[..., None], flag[..., None]], -1)


def relation_inputs(pos: torch.Tensor) -> torch.Tensor:
    """(dx, dy, |d|, atan2(dy, dx)) of agent j relative to agent i.

    pos: (..., N, 2) -> (..., N, N, 4) indexed [i, j]. Coincident positions give
    zero distance and angle (with zero gradient through the norm).
    """
    d = pos[..., None, :, :] - pos[..., :, None, :]
    dx, dy = d[..., 0], d[..., 1]
    sq = dx * dx + dy * dy
    nz = sq > 0
    safe_sq = torch.where(nz, sq, torch.ones_like(sq))
    dist = torch.where(nz, torch.sqrt(safe_sq), torch.zeros_like(sq))
    safe_dx = torch.where(nz, dx, torch.ones_like(dx))
    ang = torch.where(nz, torch.atan2(dy, safe_dx), torch.zeros_like(dx))
    return torch.stack([dx, dy, dist, ang], -1)


class StateEncoder(nn.Module):
    def __init__(self, hidden: int = 64, layers: int = 3):
        super().__init__()
        self.out_dim = hidden
        self.mlp = MLP([7] + [hidden] * layers)

    def forward(self, pos, vel, heading=None):
        x = state_inputs(pos, vel, heading)
        _check_finite(x, "state")
        return self.mlp(x)


class RelationEncoder(nn.Module):
    def __init__(self, hidden: int = 64, out_dim: int = 16, layers: int = 3):
        super().__init__()
        self.out_dim = out_dim
        self.mlp = MLP([4] + [hidden] * (layers - 1) + [out_dim])

    def forward(self, pos):
        x = relation_inputs(pos)
        _check_finite(x, "relation")
        return self.mlp(x)


class ContextEncoder(nn.Module):
    """Five same-padding 5x5 convolutions over [density, v_fwd, v_left], then global mean."""

    def __init__(self, channels: int = 16, layers: int = 5, kernel: int = 5):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("kernel must be odd to preserve the patch size")
        self.out_dim = channels
        self.convs = nn.ModuleList(
            nn.Conv2d(3 if k == 0 else channels, channels, kernel, padding=kernel // 2) for k in range(layers)
        )

    def feature_maps(self, patches: torch.Tensor) -> torch.Tensor:
        """patches (M, 3, H, W) -> pre-pooling maps (M, C, H, W)."""
        x = patches
        for k, conv in enumerate(self.convs):
            x = conv(x)
            if k < len(self.convs) - 1:
                x = leaky(x)
        return x

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.dim() != 4 or patches.shape[1] != 3:
            raise ValueError(f"expected (M, 3, H, W) patches, got {tuple(patches.shape)}")
        _check_finite(patches, "context")
        return self.feature_maps(patches).mean(dim=(-2, -1))


def stack_patches(density_patch, velocity_patch) -> torch.Tensor:
    """Combine (.., H, W, 1) density and (.., H, W, 2) velocity patches into (.., 3, H, W)."""
    density_patch = torch.as_tensor(density_patch)
    velocity_patch = torch.as_tensor(velocity_patch)
    if density_patch.shape[:-1] != velocity_patch.shape[:-1]:
        raise ValueError("density and velocity patches differ in shape")
    x = torch.cat([density_patch, velocity_patch], -1)
    return x.movedim(-1, -3)


@dataclass
class FeatureBundle:
    state: torch.Tensor  # (B, T, N, Ds)
    relation: torch.Tensor  # (B, T, N, N, De), [i, j] = relation of j seen from i
    context: torch.Tensor  # (B, T, N, Dc)

    def window(self, sl: slice) -> "FeatureBundle":
        return FeatureBundle(self.state[:, sl], self.relation[:, sl], self.context[:, sl])


class FeatureExtractor(nn.Module):
    def __init__(self, state_hidden=64, relation_hidden=64, relation_dim=16, context_channels=16,
                 context_layers=5, context_kernel=5, use_context=True):
        super().__init__()
        self.use_context = use_context
        self.state = StateEncoder(state_hidden)
        self.relation = RelationEncoder(relation_hidden, relation_dim)
        self.context = ContextEncoder(context_channels, context_layers, context_kernel)

    def forward(self, pos, vel, heading, patches, mask) -> FeatureBundle:
        """pos/vel (B, T, N, 2); heading (B, T, N) NaN-padded; patches (B, T, N, 3, H, W) or None; mask (B, N)."""
        valid = mask[:, None, :].expand(pos.shape[:3])
        state = self.state(pos, vel, heading) * valid[..., None].to(pos.dtype)
        relation = self.relation(pos)
        pair = (valid[..., :, None] & valid[..., None, :]).to(pos.dtype)
        relation = relation * pair[..., None]
        ctx = pos.new_zeros(pos.shape[:3] + (self.context.out_dim,))
        if self.use_context and patches is not None:
            ctx = ctx.index_put((valid,), self.context(patches[valid]))
        return FeatureBundle(state, relation, ctx)
