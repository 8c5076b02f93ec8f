"""Graph double-attention: kernel topological attention, temporal attention, latent encoder.

Reductions over neighbours go through :func:`sorted_sum`, which makes them
independent of agent order bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import MLP, leaky
from .graph import SpatioTemporalGraph


def sorted_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    return torch.sort(x, dim=dim).values.sum(dim)


def masked_softmax(score: torch.Tensor, keep: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over ``dim`` restricted to ``keep``; rows with nothing kept are all-zero."""
    neg = torch.finfo(score.dtype).min
    s = torch.where(keep, score, torch.full_like(score, neg))
    m = s.amax(dim, keepdim=True).detach()
    e = torch.exp(s - m) * keep.to(score.dtype)
    denom = sorted_sum(e, dim).unsqueeze(dim)
    return torch.where(denom > 0, e / denom.clamp_min(torch.finfo(score.dtype).tiny), torch.zeros_like(e))


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class TopologicalLayer(nn.Module):
    """One round of multi-head kernel attention message passing.

    Head h scores neighbour j of node i by
    ``-(lam_h * |v_i - v_j|^2 + mu_h * |e_ij|^2)`` (prior coefficient fixed to 1),
    normalises over N(i) and aggregates ``sum_j leaky(alpha_ij * W_h v_j)``.
    Per-head outputs are concatenated.
    """

    def __init__(self, in_dim: int = 64, out_dim: int = 64, heads: int = 4,
                 init_lambda: float = 1.0, init_mu: float = 1.0):
        super().__init__()
        if out_dim % heads:
            raise ValueError(f"{heads} heads cannot split output width {out_dim}")
        self.heads = heads
        self.head_dim = out_dim // heads
        bound = in_dim ** -0.5
        self.weight = nn.Parameter(torch.empty(heads, in_dim, self.head_dim).uniform_(-bound, bound))
        self.raw_lambda = nn.Parameter(torch.full((heads,), _inv_softplus(init_lambda)))
        self.raw_mu = nn.Parameter(torch.full((heads,), _inv_softplus(init_mu)))

    @property
    def lam(self) -> torch.Tensor:
        return F.softplus(self.raw_lambda)

    @property
    def mu(self) -> torch.Tensor:
        return F.softplus(self.raw_mu)

    def attention(self, nodes, edges, adjacency, mask, uniform=False, self_loops=True):
        """Coefficients (B, T, H, N, N); row i spans N(i) (plus i itself with e_ii = 0)."""
        n = nodes.shape[2]
        diff = nodes[:, :, :, None, :] - nodes[:, :, None, :, :]
        node_term = (diff * diff).sum(-1)
        edge_term = (edges * edges).sum(-1)
        if self_loops:
            eye = torch.eye(n, dtype=torch.bool)
            edge_term = torch.where(eye, torch.zeros_like(edge_term), edge_term)
            keep = adjacency | (eye & mask[:, None, :, None])
        else:
            keep = adjacency
        if uniform:
            score = torch.zeros(node_term.shape[:2] + (self.heads,) + node_term.shape[2:], dtype=nodes.dtype)
        else:
            lam = self.lam.view(1, 1, -1, 1, 1)
            mu = self.mu.view(1, 1, -1, 1, 1)
            score = -(lam * node_term[:, :, None] + mu * edge_term[:, :, None])
        return masked_softmax(score, keep[:, :, None].expand_as(score))

    def forward(self, nodes, edges, adjacency, mask, uniform=False, self_loops=True):
        alpha = self.attention(nodes, edges, adjacency, mask, uniform, self_loops)
        b, t, n, _ = nodes.shape
        proj = torch.matmul(nodes[:, :, None], self.weight)  # (B, T, H, N, d)
        msg = leaky(alpha[..., None] * proj[:, :, :, None, :, :])  # (B, T, H, i, j, d)
        out = sorted_sum(msg, dim=4)
        return out.permute(0, 1, 3, 2, 4).reshape(b, t, n, self.heads * self.head_dim), alpha


class TemporalAttention(nn.Module):
    """Softmax over steps of ``leaky(v_t . w)``; summary = beta-weighted mean of v_t, averaged over heads."""

    def __init__(self, dim: int = 64, heads: int = 2):
        super().__init__()
        bound = dim ** -0.5
        self.w = nn.Parameter(torch.empty(heads, dim).uniform_(-bound, bound))

    def forward(self, vbar: torch.Tensor, uniform: bool = False):
        """vbar (B, T, N, D) -> beta (B, H, N, T), summary (B, N, D)."""
        if vbar.shape[1] == 0:
            raise ValueError("temporal attention needs a nonempty segment")
        scores = leaky(torch.einsum("btnd,hd->bhnt", vbar, self.w))
        if uniform:
            scores = torch.zeros_like(scores)
        beta = torch.softmax(scores, dim=-1)
        summary = torch.einsum("bhnt,btnd->bnd", beta, vbar) / self.w.shape[0]
        return beta, summary


@dataclass
class AbstractNodeAttrs:
    history: torch.Tensor | None  # (B, N, D)
    future: torch.Tensor | None
    vbar: torch.Tensor  # (B, T, N, D) after the last round
    alphas: list[torch.Tensor] = field(default_factory=list)  # per round (B, T, H, N, N)
    betas: dict[str, torch.Tensor] = field(default_factory=dict)  # segment -> (B, H, N, T)


class GDAT(nn.Module):
    def __init__(self, node_dim: int = 64, heads: int = 4, rounds: int = 2, temporal_heads: int = 2,
                 uniform: bool = False, init_lambda: float = 1.0, init_mu: float = 1.0):
        super().__init__()
        if rounds < 1:
            raise ValueError("need at least one round of message passing")
        self.uniform = uniform
        self.rounds = nn.ModuleList(
            TopologicalLayer(node_dim, node_dim, heads, init_lambda, init_mu) for _ in range(rounds)
        )
        self.temporal = nn.ModuleDict({
            "history": TemporalAttention(node_dim, temporal_heads),
            "future": TemporalAttention(node_dim, temporal_heads),
        })

    def topological(self, graph: SpatioTemporalGraph, rounds: int | None = None, self_loops: bool = True):
        v = graph.nodes
        alphas = []
        for layer in self.rounds[: rounds or len(self.rounds)]:
            v, alpha = layer(v, graph.edges, graph.adjacency, graph.mask, self.uniform, self_loops)
            alphas.append(alpha)
        return v, alphas

    def forward(self, graph: SpatioTemporalGraph, history_len: int | None = None) -> AbstractNodeAttrs:
        vbar, alphas = self.topological(graph)
        if graph.window == "history+future":
            segments = {"history": vbar[:, :history_len], "future": vbar[:, history_len:]}
        else:
            segments = {graph.window: vbar}
        out = AbstractNodeAttrs(None, None, vbar, alphas)
        for name, seg in segments.items():
            beta, summary = self.temporal[name](seg, self.uniform)
            out.betas[name] = beta
            setattr(out, name, summary)
        return out


class LatentEncoder(nn.Module):
    """Posterior mean of z from [history summary || future summary]; covariance is identity."""

    def __init__(self, node_dim: int = 64, hidden: int = 128, latent_dim: int = 32):
        super().__init__()
        self.latent_dim = latent_dim
        self.mlp = MLP([2 * node_dim, hidden, hidden, latent_dim])

    def forward(self, history: torch.Tensor, future: torch.Tensor | None) -> torch.Tensor:
        if future is None:
            raise ValueError("posterior encoding needs the future summary; sample the prior at test time")
        return self.mlp(torch.cat([history, future], -1))


def attention_dump(attrs: AbstractNodeAttrs, mask: torch.Tensor, b: int = 0) -> str:
    """Alpha tables per round/step/head and beta per segment for batch entry ``b``, as JSON."""
    valid = [k for k in range(mask.shape[1]) if bool(mask[b, k])]
    idx = torch.as_tensor(valid, dtype=torch.long)
    payload = {
        "alpha": [a[b][:, :, idx][:, :, :, idx].tolist() for a in attrs.alphas],
        "beta": {k: v[b][:, idx].tolist() for k, v in attrs.betas.items()},
        "agents": valid,
    }
    return json.dumps(payload)
