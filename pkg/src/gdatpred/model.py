"""Batching of prediction cases and the assembled encoder/decoder model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .data import AgentType, PredictionCase
from .decoder import ControlBounds, TrajectoryDecoder, integrate_kinematic
from .features import FeatureExtractor
from .gdat import GDAT, AbstractNodeAttrs, LatentEncoder
from .graph import GraphBuilder, SpatioTemporalGraph
from .raster import ContextRasters, agent_orientation, crop_many

KINEMATIC_TYPES = (AgentType.VEHICLE,)


@dataclass
class PreparedCase:
    case: PredictionCase
    patches: np.ndarray | None  # (N, T, 3, H, W) float32

    @property
    def num_agents(self) -> int:
        return self.case.num_agents


def case_patches(case: PredictionCase, rasters: ContextRasters, size: int, interpolation: str = "nearest") -> np.ndarray:
    """Local crops for every agent and step of a case, as (N, T, 3, H, W)."""
    n, t, _ = case.positions.shape
    theta = agent_orientation(case.velocities, case.headings)
    crops = crop_many(rasters, case.positions.reshape(-1, 2), theta.reshape(-1), size, size, interpolation)
    return crops.reshape(n, t, size, size, 3).transpose(0, 1, 4, 2, 3).astype(np.float32)


def prepare_cases(cases: Sequence[PredictionCase], rasters: ContextRasters | None, cfg: ModelConfig) -> list[PreparedCase]:
    if cfg.use_context and rasters is None:
        raise ValueError(f"mode {cfg.mode} needs context rasters")
    return [
        PreparedCase(c, case_patches(c, rasters, cfg.patch_size, cfg.interpolation) if cfg.use_context else None)
        for c in cases
    ]


@dataclass
class Batch:
    pos: torch.Tensor  # (B, T, N, 2), translated so each case's origin is 0
    vel: torch.Tensor
    heading: torch.Tensor  # (B, T, N), NaN where absent
    patches: torch.Tensor | None  # (B, T, N, 3, H, W)
    mask: torch.Tensor  # (B, N)
    kinematic: torch.Tensor  # (B, N) agents decoded through the bicycle cell in kinematic mode
    origin: torch.Tensor  # (B, 2) world offset removed from positions
    history_len: int
    dt: float
    cases: list[PredictionCase]

    @property
    def future_len(self) -> int:
        return self.pos.shape[1] - self.history_len

    def history(self, name: str) -> torch.Tensor:
        return getattr(self, name)[:, : self.history_len]

    def future(self, name: str) -> torch.Tensor:
        return getattr(self, name)[:, self.history_len:]

    def init_state(self) -> torch.Tensor:
        """Last observed (x, y, psi, v, slip=0) per agent, (B, N, 5)."""
        p = self.pos[:, self.history_len - 1]
        v = self.vel[:, self.history_len - 1]
        h = self.heading[:, self.history_len - 1]
        speed = torch.sqrt((v * v).sum(-1))
        moving = speed > 0
        fallback = torch.where(torch.isnan(h), torch.zeros_like(h), h)
        psi = torch.where(moving, torch.atan2(v[..., 1], v[..., 0]), fallback)
        return torch.stack([p[..., 0], p[..., 1], psi, speed, torch.zeros_like(speed)], -1)


def make_batch(items: Sequence[PreparedCase], dtype=torch.float32) -> Batch:
    if not items:
        raise ValueError("empty batch")
    cases = [it.case for it in items]
    th = cases[0].history_len
    t = cases[0].positions.shape[1]
    dt = cases[0].dt
    if any(c.history_len != th or c.positions.shape[1] != t or c.dt != dt for c in cases):
        raise ValueError("cases in a batch must share window lengths and dt")
    b, n = len(cases), max(c.num_agents for c in cases)
    pos = np.zeros((b, t, n, 2))
    vel = np.zeros((b, t, n, 2))
    head = np.full((b, t, n), np.nan)
    mask = np.zeros((b, n), dtype=bool)
    kin = np.zeros((b, n), dtype=bool)
    origin = np.zeros((b, 2))
    with_patches = items[0].patches is not None
    patches = None
    if with_patches:
        patches = np.zeros((b, t, n) + items[0].patches.shape[2:], dtype=np.float32)
    for k, (it, c) in enumerate(zip(items, cases)):
        m = c.num_agents
        origin[k] = c.positions[:, th - 1].mean(axis=0)
        pos[k, :, :m] = (c.positions - origin[k]).transpose(1, 0, 2)
        vel[k, :, :m] = c.velocities.transpose(1, 0, 2)
        head[k, :, :m] = c.headings.T
        mask[k, :m] = True
        kin[k, :m] = [a in KINEMATIC_TYPES for a in c.agent_types]
        if with_patches:
            patches[k, :, :m] = it.patches.transpose(1, 0, 2, 3, 4)
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return Batch(
        pos=as_t(pos), vel=as_t(vel), heading=as_t(head),
        patches=None if patches is None else as_t(patches),
        mask=torch.as_tensor(mask), kinematic=torch.as_tensor(kin), origin=as_t(origin),
        history_len=th, dt=dt, cases=cases,
    )


@dataclass
class Decoded:
    positions: torch.Tensor  # (B, N, Tf, 2) in batch (translated) coordinates
    states: torch.Tensor | None  # (B, N, Tf, 5) kinematic states, when kinematic decoding is active
    controls: torch.Tensor | None  # (B, N, Tf, 2)


@dataclass
class ForwardOutput:
    decoded: Decoded
    mu: torch.Tensor  # (B, N, Dz)
    z: torch.Tensor
    attrs: AbstractNodeAttrs
    graph: SpatioTemporalGraph


class TrajectoryPredictor(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.features = FeatureExtractor(cfg.state_hidden, cfg.relation_hidden, cfg.relation_dim, cfg.context_channels,
                                         cfg.context_layers, cfg.context_kernel, cfg.use_context)
        self.graph = GraphBuilder(cfg.state_hidden, cfg.context_channels, cfg.node_dim)
        self.gdat = GDAT(cfg.node_dim, cfg.topo_heads, cfg.rounds, cfg.temporal_heads, cfg.uniform_attention,
                         cfg.init_lambda, cfg.init_mu)
        self.encoder = LatentEncoder(cfg.node_dim, cfg.encoder_hidden, cfg.latent_dim)
        self.decoder = TrajectoryDecoder(cfg.node_dim, cfg.latent_dim, cfg.decoder_hidden)
        self.bounds = ControlBounds(cfg.accel_bound, cfg.slip_rate_bound)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    def encode(self, batch: Batch, with_future: bool) -> tuple[AbstractNodeAttrs, SpatioTemporalGraph]:
        sl = slice(None) if with_future else slice(0, batch.history_len)
        patches = None if batch.patches is None else batch.patches[:, sl]
        feats = self.features(batch.pos[:, sl], batch.vel[:, sl], batch.heading[:, sl], patches, batch.mask)
        window = "history+future" if with_future else "history"
        graph = self.graph(feats, batch.pos[:, sl], batch.mask, window, self.cfg.distance_threshold)
        return self.gdat(graph, batch.history_len), graph

    def decode(self, batch: Batch, summary: torch.Tensor, z: torch.Tensor, kinematic: bool | None = None,
               steps: int | None = None) -> Decoded:
        """summary (B, N, D), z (B, N, Dz) -> trajectories for every agent."""
        kinematic = self.cfg.kinematic if kinematic is None else kinematic
        b, n, _ = summary.shape
        tf = batch.future_len if steps is None else steps
        raw = self.decoder(summary.reshape(b * n, -1), z.reshape(b * n, -1), tf)
        init = batch.init_state().reshape(b * n, 5)
        disp = init[:, None, :2] + torch.cumsum(raw, 1)
        if not kinematic:
            return Decoded(disp.reshape(b, n, tf, 2), None, None)
        controls = self.bounds.saturate(raw)
        states = integrate_kinematic(init, controls, batch.dt, self.cfg.rear_length, self.cfg.substeps)
        use_kin = batch.kinematic.reshape(b * n, 1, 1)
        positions = torch.where(use_kin, states[..., :2], disp)
        return Decoded(positions.reshape(b, n, tf, 2), states.reshape(b, n, tf, 5), controls.reshape(b, n, tf, 2))

    def forward(self, batch: Batch, eps: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> ForwardOutput:
        """Training pass: posterior z = mu + eps from history and future graphs."""
        attrs, graph = self.encode(batch, with_future=True)
        mu = self.encoder(attrs.history, attrs.future)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + eps
        return ForwardOutput(self.decode(batch, attrs.history, z), mu, z, attrs, graph)

    @torch.no_grad()
    def sample(self, batch: Batch, k: int, phase: str = "test", generator: torch.Generator | None = None,
               kinematic: bool | None = None, steps: int | None = None) -> Decoded:
        """K trajectories per agent: (B, K, N, Tf, ...). Test phase draws z from the prior."""
        if k < 1:
            raise ValueError("K must be >= 1")
        if phase not in ("train", "test"):
            raise ValueError("phase must be 'train' or 'test'")
        if phase == "train":
            attrs, _ = self.encode(batch, with_future=True)
            mu = self.encoder(attrs.history, attrs.future)
        else:
            attrs, _ = self.encode(batch, with_future=False)
            mu = torch.zeros(attrs.history.shape[:2] + (self.latent_dim,), dtype=attrs.history.dtype)
        b, n = mu.shape[:2]
        if steps is None:
            steps = batch.future_len
        if steps < 1:
            raise ValueError("need at least one prediction step; pass steps for history-only batches")
        eps = torch.randn((k,) + mu.shape, generator=generator, dtype=mu.dtype)
        z = (mu[None] + eps).transpose(0, 1).reshape(b * k, n, -1)
        summary = attrs.history[:, None].expand(b, k, n, -1).reshape(b * k, n, -1)
        tiled = _tile_batch(batch, k)
        out = self.decode(tiled, summary, z, kinematic, steps)

        def untile(x):
            return None if x is None else x.reshape((b, k) + x.shape[1:])

        return Decoded(untile(out.positions), untile(out.states), untile(out.controls))


def _tile_batch(batch: Batch, k: int) -> Batch:
    rep = lambda x: None if x is None else x.repeat_interleave(k, dim=0)  # noqa: E731
    return Batch(
        pos=rep(batch.pos), vel=rep(batch.vel), heading=rep(batch.heading), patches=None,
        mask=rep(batch.mask), kinematic=rep(batch.kinematic), origin=rep(batch.origin),
        history_len=batch.history_len, dt=batch.dt, cases=[c for c in batch.cases for _ in range(k)],
    )


@dataclass
class PredictionSet:
    """K sampled futures per agent of one case, in world coordinates."""

    agent_ids: tuple[str, ...]
    positions: np.ndarray  # (N, K, Tf, 2)
    headings: np.ndarray  # (N, K, Tf); NaN for displacement-decoded agents
    states: np.ndarray | None  # (N, K, Tf, 5) kinematic states (world frame)
    controls: np.ndarray | None  # (N, K, Tf, 2)
    init_states: np.ndarray  # (N, 5) world frame
    kinematic_agents: np.ndarray  # (N,) bool
    mode: str
    phase: str
    seed: int
    dt: float
    case: PredictionCase | None = None

    @property
    def k(self) -> int:
        return self.positions.shape[1]

    def dump_rows(self) -> list[tuple]:
        """(agent_id, sample, t, x, y, psi) rows."""
        rows = []
        n, k, tf, _ = self.positions.shape
        for i in range(n):
            for s in range(k):
                for t in range(tf):
                    rows.append((self.agent_ids[i], s, t + 1, float(self.positions[i, s, t, 0]),
                                 float(self.positions[i, s, t, 1]), float(self.headings[i, s, t])))
        return rows


def sample_predictions(cases: Sequence[PreparedCase], model: TrajectoryPredictor, k: int,
                       mode: str | None = None, phase: str = "test", seed: int = 0,
                       steps: int | None = None, batch_size: int = 64) -> list[PredictionSet]:
    """Draw K futures per agent for each case; deterministic for a fixed seed.

    ``mode`` is 'kinematic' or 'displacement' (default: the model's decoder).
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    if mode not in (None, "kinematic", "displacement"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    kinematic = None if mode is None else mode == "kinematic"
    use_kin = model.cfg.kinematic if kinematic is None else kinematic
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(cases), batch_size):
        chunk = cases[start:start + batch_size]
        batch = make_batch(chunk, dtype)
        dec = model.sample(batch, k, phase, gen, kinematic, steps)
        init = batch.init_state()
        for bi, c in enumerate(batch.cases):
            m = c.num_agents
            o = batch.origin[bi].numpy().astype(float)
            pos = dec.positions[bi, :, :m].permute(1, 0, 2, 3).numpy().astype(float) + o
            kin_agents = batch.kinematic[bi, :m].numpy() & use_kin
            heads = np.full(pos.shape[:3], np.nan)
            states = controls = None
            if dec.states is not None:
                states = dec.states[bi, :, :m].permute(1, 0, 2, 3).numpy().astype(float).copy()
                states[..., :2] += o
                controls = dec.controls[bi, :, :m].permute(1, 0, 2, 3).numpy().astype(float)
                heads[kin_agents] = states[kin_agents][..., 2]
            init_w = init[bi, :m].numpy().astype(float).copy()
            init_w[:, :2] += o
            out.append(PredictionSet(
                agent_ids=c.agent_ids, positions=pos, headings=heads, states=states, controls=controls,
                init_states=init_w, kinematic_agents=kin_agents, mode=model.cfg.mode, phase=phase,
                seed=seed, dt=c.dt, case=c,
            ))
    model.train(was_training)
    return out
