"""Rule-based interactive driving scenes: straight corridor, roundabout, crossing.

Agents are kinematic bicycles tracking a reference path with pure pursuit.
Speed comes from a curvature-limited profile, car following, and first-come
first-served yielding at conflict points. Controls are clipped to the
decoder's default bounds, so every trajectory is feasible by construction.
The generator also checks this before returning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import AgentType, Scene, scene_from_tracks

SCENARIOS = ("straight-corridor", "roundabout", "crossing")

ROUNDABOUT_CENTER = (0.0, 0.0)
ROUNDABOUT_RADIUS = 12.0
CROSSING_CENTER = (400.0, 0.0)
CORRIDOR_Y = 400.0

REAR_LENGTH = 1.5
ACCEL_LIMIT = 4.0
SLIP_RATE_LIMIT = 0.6
# controller limits sit inside the feasibility bounds
MAX_ACCEL, MAX_BRAKE, MAX_SLIP_RATE = 2.5, 3.5, 0.55
LAT_ACCEL = 2.0
COMFORT_BRAKE = 2.0
YIELD_RADIUS = 25.0
STOP_GAP = 4.0
CLEARANCE = 5.0
FOLLOW_GAP = 7.0
LANE = 1.75


@dataclass(frozen=True)
class SyntheticScenarioSpec:
    scenario: str | Sequence[str] = ("roundabout", "crossing")  # one name, or a list to draw from per scene
    agents: tuple[int, int] = (2, 6)
    noise_std: float = 0.05
    count: int = 50
    frames: int = 40
    dt: float = 0.5
    substeps: int = 10

    def __post_init__(self):
        names = (self.scenario,) if isinstance(self.scenario, str) else tuple(self.scenario)
        bad = [s for s in names if s not in SCENARIOS]
        if bad or not names:
            raise ValueError(f"unknown scenario(s) {bad}; choose from {SCENARIOS}")
        object.__setattr__(self, "scenario", names if len(names) > 1 else names[0])
        lo, hi = self.agents
        if not 1 <= lo <= hi:
            raise ValueError("agent count range must satisfy 1 <= low <= high")
        if self.noise_std < 0 or self.count < 0 or self.frames < 2 or self.dt <= 0 or self.substeps < 1:
            raise ValueError("invalid synthetic scenario settings")

    @property
    def scenarios(self) -> tuple[str, ...]:
        return (self.scenario,) if isinstance(self.scenario, str) else tuple(self.scenario)


# ---------------------------------------------------------------------------
# reference paths


class Path:
    """Polyline resampled at ``step`` metres with arc length, curvature and speed profile."""

    def __init__(self, points: np.ndarray, name: str = "", step: float = 0.25):
        pts = np.asarray(points, dtype=float)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        keep = np.concatenate([[True], seg > 1e-9])
        pts = pts[keep]
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        self.length = float(s[-1])
        grid = np.arange(0.0, self.length, step)
        self.s = grid
        self.points = np.stack([np.interp(grid, s, pts[:, 0]), np.interp(grid, s, pts[:, 1])], -1)
        self.step = step
        self.name = name
        tang = np.gradient(self.points, step, axis=0)
        ang = np.unwrap(np.arctan2(tang[:, 1], tang[:, 0]))
        self.curvature = np.abs(np.gradient(ang, step))

    def at(self, s: float) -> np.ndarray:
        k = min(max(int(round(s / self.step)), 0), len(self.s) - 1)
        return self.points[k]

    def project(self, p: np.ndarray, hint: float, window: float = 8.0) -> float:
        lo = max(int((hint - window) / self.step), 0)
        hi = min(int((hint + window) / self.step) + 1, len(self.s))
        d = self.points[lo:hi] - p
        return float(self.s[lo + int(np.argmin((d * d).sum(-1)))])

    def speed_profile(self, v_des: float) -> np.ndarray:
        """Largest speed at each point that respects lateral-acceleration limits ahead under comfort braking."""
        vlim = np.minimum(v_des, np.sqrt(LAT_ACCEL / np.maximum(self.curvature, 1e-6)))
        prof = vlim.copy()
        for k in range(len(prof) - 2, -1, -1):
            prof[k] = min(prof[k], math.sqrt(prof[k + 1] ** 2 + 2 * COMFORT_BRAKE * self.step))
        return prof


def _line(a, b, step=0.5):
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(int(np.linalg.norm(b - a) / step), 1)
    return a + (b - a) * np.linspace(0, 1, n + 1)[:, None]


def _arc(center, radius, a0, a1, step=0.25):
    n = max(int(abs(a1 - a0) * radius / step), 2)
    a = np.linspace(a0, a1, n + 1)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], -1)


def _bezier(p0, c, p1, step=0.25):
    p0, c, p1 = (np.asarray(x, float) for x in (p0, c, p1))
    n = max(int((np.linalg.norm(c - p0) + np.linalg.norm(p1 - c)) / step), 2)
    t = np.linspace(0, 1, n + 1)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * c + t * t * p1


def _unit(a):
    return np.array([math.cos(a), math.sin(a)])


def roundabout_path(entry: int, quarters: int, approach: float = 70.0, out: float = 200.0) -> Path:
    """Counter-clockwise ring; entry arm ``entry`` (0=east, 1=north, ...), leaving after ``quarters`` quarter turns."""
    c = np.array(ROUNDABOUT_CENTER)
    r = ROUNDABOUT_RADIUS
    phi_in = entry * math.pi / 2
    phi_out = phi_in + quarters * math.pi / 2
    u_in, u_out = _unit(phi_in), _unit(phi_out)
    right_in = np.array([-u_in[1], u_in[0]])  # right of the inbound direction -u_in
    right_out = np.array([u_out[1], -u_out[0]])  # right of the outbound direction u_out
    join, leave = phi_in + 0.35, phi_out - 0.35
    pts = [
        _line(c + (r + approach) * u_in + LANE * right_in, c + (r + 4) * u_in + LANE * right_in),
        _bezier(c + (r + 4) * u_in + LANE * right_in, c + (r + 0.5) * _unit(phi_in + 0.15), c + r * _unit(join)),
        _arc(c, r, join, leave),
        _bezier(c + r * _unit(leave), c + (r + 0.5) * _unit(phi_out - 0.15), c + (r + 4) * u_out + LANE * right_out),
        _line(c + (r + 4) * u_out + LANE * right_out, c + (r + out) * u_out + LANE * right_out),
    ]
    return Path(np.concatenate(pts), f"roundabout:{entry}:{quarters}")


def crossing_path(entry: int, turn: str, approach: float = 70.0, out: float = 200.0, stop: float = 9.0) -> Path:
    """Four-arm crossing; turn in {straight, left, right}."""
    c = np.array(CROSSING_CENTER)
    phi_in = entry * math.pi / 2
    phi_out = phi_in + {"straight": math.pi, "left": -math.pi / 2, "right": math.pi / 2}[turn]
    u_in, u_out = _unit(phi_in), _unit(phi_out)
    right_in = np.array([-u_in[1], u_in[0]])
    right_out = np.array([u_out[1], -u_out[0]])
    a = c + stop * u_in + LANE * right_in
    b = c + stop * u_out + LANE * right_out
    if turn == "straight":
        mid = _line(a, b)
    else:
        # control point where the two lane centre lines meet
        d_in = -u_in
        m = np.array([d_in, -u_out]).T
        t = np.linalg.solve(m, b - a)
        mid = _bezier(a, a + t[0] * d_in, b)
    pts = [_line(c + approach * u_in + LANE * right_in, a), mid, _line(b, c + out * u_out + LANE * right_out)]
    return Path(np.concatenate(pts), f"crossing:{entry}:{turn}")


def corridor_path(lane: int, length: float = 600.0) -> Path:
    """Lanes 0, 1 head east; lanes 2, 3 head west."""
    y = CORRIDOR_Y + (-2 * LANE - lane * 2 * LANE if lane < 2 else 2 * LANE + (lane - 2) * 2 * LANE)
    xs = (-length / 2, length / 2) if lane < 2 else (length / 2, -length / 2)
    return Path(_line((xs[0], y), (xs[1], y)), f"corridor:{lane}")


# ---------------------------------------------------------------------------
# simulation


@dataclass
class AgentPlan:
    path: Path
    s0: float
    v_des: float
    v0: float
    agent_type: AgentType = AgentType.VEHICLE
    yields: bool = True


@dataclass
class Simulation:
    """Ground-truth states at every observed frame plus the controls applied at every substep."""

    states: np.ndarray  # (A, F, 5) x, y, psi, v, slip
    controls: np.ndarray  # (A, F - 1, substeps, 2)
    dt: float
    substeps: int
    plans: list[AgentPlan] = field(repr=False, default_factory=list)

    @property
    def speeds(self) -> np.ndarray:
        return self.states[..., 3]

    def feasible(self, tol: float = 1e-9) -> bool:
        """Controls within bounds, and observed-frame rates (averages of them) too."""
        if self.controls.size == 0:
            return True
        ok = (np.abs(self.controls[..., 0]) <= ACCEL_LIMIT + tol).all()
        ok &= (np.abs(self.controls[..., 1]) <= SLIP_RATE_LIMIT + tol).all()
        dv = np.diff(self.states[..., 3], axis=1) / self.dt
        dslip = np.diff(self.states[..., 4], axis=1) / self.dt
        ok &= (np.abs(dv) <= ACCEL_LIMIT + tol).all() and (np.abs(dslip) <= SLIP_RATE_LIMIT + tol).all()
        return bool(ok)


def _conflicts(paths: Sequence[Path], width: float = 1.5) -> dict[tuple[int, int], tuple[float, float]]:
    """First point where path i comes within ``width`` of path j, with the matching arc length on j."""
    out = {}
    for i, pi in enumerate(paths):
        for j, pj in enumerate(paths):
            if i == j:
                continue
            d = pi.points[:, None, :] - pj.points[None, ::4, :]
            dist = np.sqrt((d * d).sum(-1))
            near = dist.min(axis=1) < width
            if not near.any():
                continue
            k = int(np.argmax(near))
            if k == 0:
                continue  # shared lane from the start: handled by car following
            kj = int(np.argmin(dist[k])) * 4
            out[(i, j)] = (float(pi.s[k]), float(pj.s[kj]))
    return out


def _wrap(a):
    return math.pi - (math.pi - a) % (2 * math.pi)


def simulate(plans: Sequence[AgentPlan], frames: int, dt: float, substeps: int = 10) -> Simulation:
    plans = list(plans)
    n = len(plans)
    h = dt / substeps
    paths = [p.path for p in plans]
    profiles = [p.path.speed_profile(p.v_des) for p in plans]
    conflicts = _conflicts(paths)
    state = np.zeros((n, 5))
    s = np.array([p.s0 for p in plans], dtype=float)
    for i, p in enumerate(plans):
        a, b = p.path.at(p.s0), p.path.at(p.s0 + 1.0)
        state[i] = (a[0], a[1], math.atan2(b[1] - a[1], b[0] - a[0]), p.v0, 0.0)
    states = [state.copy()]
    controls = np.zeros((n, max(frames - 1, 0), substeps, 2))
    for f in range(frames - 1):
        for sub in range(substeps):
            u = _control(plans, paths, profiles, conflicts, state, s, h)
            controls[:, f, sub] = u
            # same update order as the decoder's kinematic cell
            psi, v, slip = state[:, 2], state[:, 3], state[:, 4]
            state[:, 0] += v * np.cos(psi + slip) * h
            state[:, 1] += v * np.sin(psi + slip) * h
            state[:, 2] = [_wrap(a) for a in psi + v / REAR_LENGTH * np.sin(slip) * h]
            state[:, 3] = v + u[:, 0] * h
            state[:, 4] = slip + u[:, 1] * h
            for i in range(n):
                s[i] = paths[i].project(state[i, :2], s[i])
        states.append(state.copy())
    return Simulation(np.stack(states, 1), controls, dt, substeps, plans)


def _control(plans, paths, profiles, conflicts, state, s, h) -> np.ndarray:
    n = len(plans)
    u = np.zeros((n, 2))
    v = state[:, 3]
    ttc = {}
    for (i, j), (si, sj) in conflicts.items():
        ttc[(i, j)] = ((si - s[i]) / max(v[i], 0.5), (sj - s[j]) / max(v[j], 0.5))
    for i in range(n):
        path = paths[i]
        k = min(int(round(s[i] / path.step)), len(profiles[i]) - 1)
        target = profiles[i][k]
        if plans[i].yields:
            for j in range(n):
                if (i, j) not in conflicts:
                    continue
                ci, cj = conflicts[(i, j)]
                di, dj = ci - s[i], cj - s[j]
                if di <= 0 or di > YIELD_RADIUS or dj > YIELD_RADIUS or dj < -CLEARANCE:
                    continue
                ti, tj = ttc[(i, j)]
                j_first = dj <= 0 or (tj, j) < (ti, i)
                if j_first:
                    target = min(target, math.sqrt(2 * COMFORT_BRAKE * max(di - STOP_GAP, 0.0)))
        # car following inside a narrow front cone
        theta = state[i, 2] + state[i, 4]
        fwd = np.array([math.cos(theta), math.sin(theta)])
        for j in range(n):
            if j == i:
                continue
            r = state[j, :2] - state[i, :2]
            along = float(r @ fwd)
            lateral = abs(float(r[0] * fwd[1] - r[1] * fwd[0]))
            if 0 < along < 25.0 and lateral < 2.0:
                target = min(target, math.sqrt(2 * COMFORT_BRAKE * max(along - FOLLOW_GAP, 0.0)))
        acc = float(np.clip(2.0 * (target - v[i]), -MAX_BRAKE, MAX_ACCEL))
        acc = max(acc, -v[i] / h, -MAX_BRAKE)  # never reverse
        # pure pursuit on the direction of travel
        look = max(4.0, 1.2 * v[i])
        p = path.at(s[i] + look)
        d = p - state[i, :2]
        alpha = math.atan2(d[1], d[0]) - theta
        alpha = _wrap(alpha)
        dist = max(math.hypot(d[0], d[1]), 1e-6)
        kappa = 2.0 * math.sin(alpha) / dist
        slip_des = math.asin(max(-0.5, min(0.5, REAR_LENGTH * kappa)))
        slip_rate = float(np.clip(3.0 * (slip_des - state[i, 4]), -MAX_SLIP_RATE, MAX_SLIP_RATE))
        u[i] = (acc, slip_rate)
    return u


# ---------------------------------------------------------------------------
# scene sampling


def _roundabout_plans(rng: np.random.Generator, n: int) -> list[AgentPlan]:
    plans = []
    used: dict[int, float] = {}
    for _ in range(n):
        entry = int(rng.integers(4))
        quarters = int(rng.integers(1, 4))
        path = roundabout_path(entry, quarters)
        # distance to the ring at the start, staggered behind agents already on this arm
        gap = used.get(entry)
        to_ring = float(rng.uniform(15.0, 45.0)) if gap is None else gap + float(rng.uniform(14.0, 20.0))
        used[entry] = to_ring
        s0 = max(70.0 - to_ring, 0.0)
        v_des = float(rng.uniform(5.0, 8.0))
        plans.append(AgentPlan(path, s0, v_des, v_des * float(rng.uniform(0.7, 1.0))))
    return plans


def _crossing_plans(rng: np.random.Generator, n: int) -> list[AgentPlan]:
    plans = []
    used: dict[int, float] = {}
    for _ in range(n):
        entry = int(rng.integers(4))
        turn = ("straight", "left", "right")[int(rng.choice(3, p=[0.5, 0.25, 0.25]))]
        path = crossing_path(entry, turn)
        gap = used.get(entry)
        to_stop = float(rng.uniform(12.0, 45.0)) if gap is None else gap + float(rng.uniform(14.0, 20.0))
        used[entry] = to_stop
        s0 = max(61.0 - to_stop, 0.0)
        v_des = float(rng.uniform(5.0, 8.0))
        plans.append(AgentPlan(path, s0, v_des, v_des * float(rng.uniform(0.7, 1.0))))
    return plans


def _corridor_plans(rng: np.random.Generator, n: int) -> list[AgentPlan]:
    lane_speed = rng.uniform(4.0, 8.0, size=4)
    plans = []
    used: dict[int, float] = {}
    for _ in range(n):
        lane = int(rng.integers(4))
        pos = used.get(lane, float(rng.uniform(0.0, 20.0)))
        used[lane] = pos + float(rng.uniform(26.0, 40.0))  # beyond the car-following cone
        v = float(lane_speed[lane])
        plans.append(AgentPlan(corridor_path(lane), pos, v, v, yields=False))
    return plans


PLANNERS = {"roundabout": _roundabout_plans, "crossing": _crossing_plans, "straight-corridor": _corridor_plans}


def sample_plans(scenario: str, rng: np.random.Generator, n: int) -> list[AgentPlan]:
    return PLANNERS[scenario](rng, n)


def simulation_to_scene(sim: Simulation, name: str, tag: str, noise_std: float, rng: np.random.Generator) -> Scene:
    tracks = {}
    for i, plan in enumerate(sim.plans):
        pos = sim.states[i, :, :2]
        if noise_std > 0:
            pos = pos + rng.normal(0.0, noise_std, size=pos.shape)
        tracks[f"a{i}"] = (plan.agent_type, pos)
    return scene_from_tracks(tracks, sim.dt, name=name, tag=tag)


def generate_synthetic(spec: SyntheticScenarioSpec, seed: int = 0, return_simulations: bool = False):
    """Scenes drawn from the scenario settings; identical for equal seeds."""
    rng = np.random.default_rng(seed)
    scenes, sims = [], []
    lo, hi = spec.agents
    for k in range(spec.count):
        scenario = spec.scenarios[int(rng.integers(len(spec.scenarios)))]
        n = int(rng.integers(lo, hi + 1))
        plans = sample_plans(scenario, rng, n)
        sim = simulate(plans, spec.frames, spec.dt, spec.substeps)
        if not sim.feasible():
            raise RuntimeError(f"scene {k}: generated trajectory violates the control bounds")
        scenes.append(simulation_to_scene(sim, f"{scenario}-{seed}-{k:04d}", scenario, spec.noise_std, rng))
        sims.append(sim)
    return (scenes, sims) if return_simulations else scenes
