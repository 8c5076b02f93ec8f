"""History / future spatio-temporal graphs with distance-pruned directed edges."""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch
import torch.nn as nn

from .features import FeatureBundle


@dataclass
class SpatioTemporalGraph:
    nodes: torch.Tensor  # (B, T, N, Dn)
    edges: torch.Tensor  # (B, T, N, N, De); edges[..., i, j, :] is e_ij
    adjacency: torch.Tensor  # (B, T, N, N) bool, no self loops
    mask: torch.Tensor  # (B, N) bool
    window: str
    threshold: float

    @property
    def num_steps(self) -> int:
        return self.nodes.shape[1]

    def permuted(self, order) -> "SpatioTemporalGraph":
        """Relabel agents: new agent k is old agent order[k]."""
        idx = torch.as_tensor(order, dtype=torch.long)
        return SpatioTemporalGraph(
            nodes=self.nodes[:, :, idx],
            edges=self.edges[:, :, idx][:, :, :, idx],
            adjacency=self.adjacency[:, :, idx][:, :, :, idx],
            mask=self.mask[:, idx],
            window=self.window,
            threshold=self.threshold,
        )

    def adjacency_lists(self, b: int = 0) -> list[dict[int, list[int]]]:
        out = []
        n_valid = [k for k in range(self.mask.shape[1]) if bool(self.mask[b, k])]
        for t in range(self.num_steps):
            adj = self.adjacency[b, t]
            out.append({i: [j for j in n_valid if bool(adj[i, j])] for i in n_valid})
        return out

    def dump(self, b: int = 0) -> str:
        """Per-timestep adjacency lists as JSON."""
        payload = {
            "window": self.window,
            "threshold": self.threshold,
            "steps": [{str(i): js for i, js in step.items()} for step in self.adjacency_lists(b)],
        }
        return json.dumps(payload, sort_keys=True)


def distance_adjacency(pos: torch.Tensor, mask: torch.Tensor, threshold: float) -> torch.Tensor:
    """Edge (i, j) at t iff i != j, both valid and |p_i - p_j| <= threshold."""
    if threshold <= 0:
        raise ValueError("distance threshold must be positive")
    d = pos[..., None, :, :] - pos[..., :, None, :]
    close = (d * d).sum(-1) <= threshold * threshold
    n = pos.shape[-2]
    eye = torch.eye(n, dtype=torch.bool)
    valid = mask[:, None, :, None] & mask[:, None, None, :]
    return close & valid & ~eye


class GraphBuilder(nn.Module):
    """Projects [state || context] to node attributes and attaches relation edges."""

    def __init__(self, state_dim=64, context_dim=16, node_dim=64):
        super().__init__()
        self.node_dim = node_dim
        self.project = nn.Linear(state_dim + context_dim, node_dim)

    def forward(self, features: FeatureBundle, pos: torch.Tensor, mask: torch.Tensor,
                window: str, threshold: float) -> SpatioTemporalGraph:
        if window not in ("history", "future", "history+future"):
            raise ValueError(f"unknown window {window!r}")
        adjacency = distance_adjacency(pos, mask, threshold)
        nodes = self.project(torch.cat([features.state, features.context], -1))
        nodes = nodes * mask[:, None, :, None].to(nodes.dtype)
        return SpatioTemporalGraph(nodes, features.relation, adjacency, mask, window, threshold)

