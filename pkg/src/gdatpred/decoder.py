"""GRU trajectory decoder with a saturated kinematic bicycle cell or a displacement head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .features import MLP

# state layout used throughout: x, y, psi, v, slip
X, Y, PSI, V, SLIP = range(5)


def wrap(a: torch.Tensor) -> torch.Tensor:
    """Wrap to (-pi, pi] with unit gradient; in-range values pass through untouched (no rounding)."""
    inside = (a > -math.pi) & (a <= math.pi)
    return torch.where(inside, a, math.pi - torch.remainder(math.pi - a, 2 * math.pi))


@dataclass(frozen=True)
class ControlBounds:
    accel: float = 4.0  # |dv/dt| limit, m/s^2
    slip_rate: float = 0.6  # |d slip/dt| limit, rad/s

    def __post_init__(self):
        if self.accel <= 0 or self.slip_rate <= 0:
            raise ValueError("control bounds must be positive")

    def saturate(self, raw: torch.Tensor) -> torch.Tensor:
        """Smooth elementwise clamp: bound * tanh(raw / bound)."""
        b = raw.new_tensor([self.accel, self.slip_rate])
        return b * torch.tanh(raw / b)

    def contains(self, controls: torch.Tensor, tol: float = 1e-9) -> torch.Tensor:
        b = controls.new_tensor([self.accel, self.slip_rate])
        return (controls.abs() <= b + tol).all(-1)


def bicycle_rates(state: torch.Tensor, rear_length: float) -> torch.Tensor:
    """(x', y', psi') of the kinematic bicycle at the given state (..., 5)."""
    psi, v, slip = state[..., PSI], state[..., V], state[..., SLIP]
    return torch.stack([
        v * torch.cos(psi + slip),
        v * torch.sin(psi + slip),
        v / rear_length * torch.sin(slip),
    ], -1)


def kinematic_increment(state: torch.Tensor, control: torch.Tensor, dt: float, rear_length: float) -> torch.Tensor:
    """Explicit Euler increment of (x, y, psi, v, slip) over ``dt``: rates at the current state, controls held."""
    return torch.cat([bicycle_rates(state, rear_length) * dt, control * dt], -1)


def _wrap_angles(state: torch.Tensor) -> torch.Tensor:
    return torch.stack([state[..., X], state[..., Y], wrap(state[..., PSI]), state[..., V], wrap(state[..., SLIP])], -1)


def kinematic_step(state: torch.Tensor, control: torch.Tensor, dt: float, rear_length: float) -> torch.Tensor:
    """One explicit update: pose += rates(u_t, pose_t) dt, then u += u' dt; angles wrapped."""
    return _wrap_angles(state + kinematic_increment(state, control, dt, rear_length))


def integrate_kinematic(init: torch.Tensor, controls: torch.Tensor, dt: float, rear_length: float = 1.5,
                        substeps: int = 1) -> torch.Tensor:
    """Roll the bicycle forward holding each control for ``dt`` split into ``substeps`` updates.

    init (M, 5); controls (M, T, 2) -> states (M, T, 5) at the end of each step.
    The running sums are compensated (Kahan), so hundreds of substeps do not pile up
    rounding error; the scheme is still the plain Euler update of ``kinematic_step``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = dt / substeps
    state = init
    comp = torch.zeros_like(init)
    out = []
    for t in range(controls.shape[1]):
        u = controls[:, t]
        for _ in range(substeps):
            inc = kinematic_increment(state, u, h, rear_length) - comp
            total = state + inc
            comp = (total - state) - inc
            wrapped = _wrap_angles(total)
            # a wrapped angle restarts its compensation
            comp = torch.where(wrapped == total, comp, torch.zeros_like(comp))
            state = wrapped
        out.append(state)
    if not out:
        return init.new_zeros(init.shape[0], 0, 5)
    return torch.stack(out, 1)


def reconstruct_controls(init: torch.Tensor, states: torch.Tensor, dt: float) -> torch.Tensor:
    """Recover (v', slip') per step from consecutive states (M, T, 5)."""
    seq = torch.cat([init[:, None], states], 1)
    dv = (seq[:, 1:, V] - seq[:, :-1, V]) / dt
    dslip = wrap(seq[:, 1:, SLIP] - seq[:, :-1, SLIP]) / dt
    return torch.stack([dv, dslip], -1)


class TrajectoryDecoder(nn.Module):
    """GRU fed the agent summary at step one and zeros afterwards.

    The initial hidden state is an MLP of [summary || z]. Each step emits two raw
    numbers: control rates in kinematic mode, (dx, dy) in displacement mode.
    """

    def __init__(self, node_dim: int = 64, latent_dim: int = 32, hidden: int = 128):
        super().__init__()
        self.hidden = hidden
        self.init_net = MLP([node_dim + latent_dim, hidden, hidden, hidden])
        self.gru = nn.GRUCell(node_dim, hidden)
        self.head = nn.Linear(hidden, 2)

    def forward(self, summary: torch.Tensor, z: torch.Tensor, steps: int) -> torch.Tensor:
        h = torch.tanh(self.init_net(torch.cat([summary, z], -1)))
        x = summary
        zeros = torch.zeros_like(summary)
        out = []
        for t in range(steps):
            h = self.gru(x if t == 0 else zeros, h)
            out.append(self.head(h))
        if not out:
            return summary.new_zeros(summary.shape[0], 0, 2)
        return torch.stack(out, 1)


def rollout_kinematic(decoder: TrajectoryDecoder, summary, z, init: torch.Tensor, steps: int, dt: float,
                      bounds: ControlBounds = ControlBounds(), rear_length: float = 1.5, substeps: int = 100):
    """Returns (states (M, T, 5), saturated controls (M, T, 2))."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    controls = bounds.saturate(decoder(summary, z, steps))
    return integrate_kinematic(init, controls, dt, rear_length, substeps), controls


def rollout_displacement(decoder: TrajectoryDecoder, summary, z, last_position: torch.Tensor, steps: int):
    """Cumulative sum of emitted (dx, dy) from the last observed position -> (M, T, 2)."""
    deltas = decoder(summary, z, steps)
    return last_position[:, None, :] + torch.cumsum(deltas, 1)
