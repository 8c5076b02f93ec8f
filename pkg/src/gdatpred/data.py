"""Scene data model, trajectory file IO and windowing into prediction cases."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml


class DatasetFormatError(ValueError):
    """Raised when a trajectory file does not follow the documented layout."""


class AgentType(str, Enum):
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"
    VEHICLE = "vehicle"


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return a - 2.0 * math.pi * math.ceil((a - math.pi) / (2.0 * math.pi))


@dataclass(frozen=True)
class AgentState:
    agent_id: str
    agent_type: AgentType
    position: tuple[float, float]
    velocity: tuple[float, float]
    heading: float | None = None

    def __post_init__(self):
        if self.heading is not None and not (-math.pi < self.heading <= math.pi):
            raise ValueError(f"heading {self.heading} outside (-pi, pi]")


@dataclass(frozen=True)
class Frame:
    index: int
    timestamp: float
    states: Mapping[str, AgentState]


@dataclass(frozen=True)
class Scene:
    frames: tuple[Frame, ...]
    dt: float
    unit: str = "meters"
    name: str = ""
    tag: str = ""
    raster_bundle: object | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        ts = [f.timestamp for f in self.frames]
        for a, b in zip(ts, ts[1:]):
            if not b > a:
                raise ValueError("frame timestamps must strictly increase")

    @property
    def agent_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for f in self.frames:
            for aid in f.states:
                seen.setdefault(aid, None)
        return list(seen)

    def observations(self) -> Iterable[AgentState]:
        for f in self.frames:
            yield from f.states.values()


@dataclass(frozen=True)
class PredictionCase:
    """A fixed agent set co-present over history + future frames.

    Arrays are indexed (agent, step, ...). Headings are NaN for agents without
    a heading (pedestrians).
    """

    agent_ids: tuple[str, ...]
    agent_types: tuple[AgentType, ...]
    positions: np.ndarray
    velocities: np.ndarray
    headings: np.ndarray
    history_len: int
    dt: float
    scene_name: str = ""
    start_frame: int = 0
    tag: str = ""

    def __post_init__(self):
        n, t, _ = self.positions.shape
        if self.history_len < 2:
            raise ValueError("history must hold at least 2 steps")
        if len(self.agent_ids) != n or len(self.agent_types) != n:
            raise ValueError("agent metadata does not match position table")
        if self.velocities.shape != (n, t, 2) or self.headings.shape != (n, t):
            raise ValueError("state tables disagree in shape")

    @property
    def num_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def future_len(self) -> int:
        return self.positions.shape[1] - self.history_len

    @property
    def history_positions(self) -> np.ndarray:
        return self.positions[:, : self.history_len]

    @property
    def future_positions(self) -> np.ndarray:
        return self.positions[:, self.history_len :]

    def permuted(self, order: Sequence[int]) -> "PredictionCase":
        order = list(order)
        return PredictionCase(
            agent_ids=tuple(self.agent_ids[i] for i in order),
            agent_types=tuple(self.agent_types[i] for i in order),
            positions=self.positions[order],
            velocities=self.velocities[order],
            headings=self.headings[order],
            history_len=self.history_len,
            dt=self.dt,
            scene_name=self.scene_name,
            start_frame=self.start_frame,
            tag=self.tag,
        )


# ---------------------------------------------------------------------------
# file format

CANONICAL_COLUMNS = ("frame_index", "timestamp_s", "agent_id", "agent_type", "x", "y")
OPTIONAL_COLUMNS = ("psi", "scene_id", "scenario")


@dataclass
class DatasetDescriptor:
    """Key-value description of a trajectory file: dt, unit, column mapping."""

    dt: float | None = None
    unit: str = "meters"
    columns: dict[str, str] = field(default_factory=dict)
    delimiter: str = ","
    time_tolerance: float = 1e-6

    def column(self, canonical: str) -> str:
        return self.columns.get(canonical, canonical)

    @classmethod
    def from_mapping(cls, m: Mapping) -> "DatasetDescriptor":
        m = dict(m or {})
        unknown = set(m) - {"dt", "unit", "columns", "delimiter", "time_tolerance"}
        if unknown:
            raise ValueError(f"unknown descriptor keys: {sorted(unknown)}")
        if m.get("unit", "meters") not in ("meters", "pixels"):
            raise ValueError("unit must be 'meters' or 'pixels'")
        return cls(**m)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetDescriptor":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(yaml.safe_load(fh))


def _parse_float(raw: str, what: str, lineno: int) -> float:
    try:
        val = float(raw)
    except (TypeError, ValueError):
        raise DatasetFormatError(f"line {lineno}: cannot parse {what}={raw!r}") from None
    if not math.isfinite(val):
        raise DatasetFormatError(f"line {lineno}: non-finite {what}")
    return val


def _read_rows(path: Path, desc: DatasetDescriptor) -> dict[str, list[tuple]]:
    """Group raw rows by scene id. Each row: (lineno, frame, t, aid, type, x, y, psi, scenario)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=desc.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file (header row required)") from None
        index = {name: i for i, name in enumerate(header)}
        missing = [c for c in CANONICAL_COLUMNS if desc.column(c) not in index]
        if missing:
            raise DatasetFormatError(f"{path}: header lacks columns {missing}")
        col = {c: index.get(desc.column(c)) for c in CANONICAL_COLUMNS + OPTIONAL_COLUMNS}

        scenes: dict[str, list[tuple]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                frame = int(row[col["frame_index"]])
            except ValueError:
                raise DatasetFormatError(
                    f"line {lineno}: bad frame_index {row[col['frame_index']]!r}"
                ) from None
            t = _parse_float(row[col["timestamp_s"]], "timestamp_s", lineno)
            aid = row[col["agent_id"]].strip()
            if not aid:
                raise DatasetFormatError(f"line {lineno}: empty agent_id")
            try:
                atype = AgentType(row[col["agent_type"]].strip().lower())
            except ValueError:
                raise DatasetFormatError(
                    f"line {lineno}: unknown agent_type {row[col['agent_type']]!r}"
                ) from None
            x = _parse_float(row[col["x"]], "x", lineno)
            y = _parse_float(row[col["y"]], "y", lineno)
            psi = None
            if col["psi"] is not None and row[col["psi"]].strip():
                psi = wrap_angle(_parse_float(row[col["psi"]], "psi", lineno))
            sid = row[col["scene_id"]].strip() if col["scene_id"] is not None else path.stem
            scenario = row[col["scenario"]].strip() if col["scenario"] is not None else ""
            scenes.setdefault(sid, []).append((lineno, frame, t, aid, atype, x, y, psi, scenario))
    return scenes


def _build_scene(name: str, rows: list[tuple], desc: DatasetDescriptor) -> Scene:
    frame_time: dict[int, float] = {}
    for lineno, frame, t, *_ in rows:
        if frame in frame_time and frame_time[frame] != t:
            raise DatasetFormatError(f"line {lineno}: frame {frame} has two timestamps")
        frame_time[frame] = t
    frames = sorted(frame_time)
    times = [frame_time[f] for f in frames]

    dt = desc.dt
    if dt is None:
        if len(times) < 2:
            raise DatasetFormatError(f"scene {name}: cannot infer dt from a single frame")
        dt = times[1] - times[0]
    tol = desc.time_tolerance * max(1.0, dt)
    for (fa, ta), (fb, tb) in zip(zip(frames, times), zip(frames[1:], times[1:])):
        if abs((tb - ta) - dt) > tol:
            raise DatasetFormatError(
                f"scene {name}: non-uniform timestep: gap {tb - ta:.6g} s between "
                f"frames {fa} and {fb} (expected {dt:.6g} s)"
            )
    pos_of = {f: k for k, f in enumerate(frames)}

    # per-agent observations in frame order
    per_agent: dict[str, list[tuple]] = {}
    seen: set[tuple[int, str]] = set()
    for lineno, frame, t, aid, atype, x, y, psi, _ in rows:
        if (frame, aid) in seen:
            raise DatasetFormatError(f"line {lineno}: agent {aid} appears twice in frame {frame}")
        seen.add((frame, aid))
        per_agent.setdefault(aid, []).append((pos_of[frame], atype, x, y, psi))

    # split on frame gaps
    tracks: dict[str, list[tuple]] = {}
    for aid, obs in per_agent.items():
        obs.sort(key=lambda o: o[0])
        segments = [[obs[0]]]
        for prev, cur in zip(obs, obs[1:]):
            if cur[0] != prev[0] + 1:
                segments.append([])
            segments[-1].append(cur)
        if len(segments) == 1:
            tracks[aid] = segments[0]
        else:
            for k, seg in enumerate(segments):
                tracks[f"{aid}#{k}"] = seg

    states: list[dict[str, AgentState]] = [dict() for _ in frames]
    for tid, seg in tracks.items():
        for state, obs in zip(_derive_states(tid, seg, dt), seg):
            states[obs[0]][tid] = state

    scenario = next((r[8] for r in rows if r[8]), "")
    return Scene(
        frames=tuple(Frame(f, frame_time[f], states[k]) for k, f in enumerate(frames)),
        dt=dt,
        unit=desc.unit,
        name=name,
        tag=scenario,
    )


def _derive_states(tid: str, seg: list[tuple], dt: float) -> list[AgentState]:
    """Finite-difference velocities; headings for non-pedestrians without psi."""
    out = []
    heading_prev = 0.0
    for k, (_, atype, x, y, psi) in enumerate(seg):
        if k > 0:
            px, py = seg[k - 1][2], seg[k - 1][3]
            vel = ((x - px) / dt, (y - py) / dt)
        elif len(seg) > 1:
            nx, ny = seg[1][2], seg[1][3]
            vel = ((nx - x) / dt, (ny - y) / dt)
        else:
            vel = (0.0, 0.0)
        heading = psi
        if heading is None and atype is not AgentType.PEDESTRIAN:
            if vel[0] != 0.0 or vel[1] != 0.0:
                heading = wrap_angle(math.atan2(vel[1], vel[0]))
            else:
                heading = heading_prev
        if heading is not None:
            heading_prev = heading
        out.append(AgentState(tid, atype, (x, y), vel, heading))
    return out


def scene_from_tracks(
    tracks: Mapping[str, tuple[AgentType, np.ndarray]],
    dt: float,
    name: str = "",
    tag: str = "",
    headings: Mapping[str, np.ndarray] | None = None,
    unit: str = "meters",
) -> Scene:
    """Scene from per-agent (type, positions (F, 2)) arrays sharing frames 0..F-1.

    Velocities and missing headings are derived exactly as for loaded files.
    """
    if not tracks:
        raise ValueError("need at least one track")
    n_frames = {len(p) for _, p in tracks.values()}
    if len(n_frames) != 1:
        raise ValueError("all tracks must span the same frames")
    (f,) = n_frames
    states: list[dict[str, AgentState]] = [dict() for _ in range(f)]
    for aid, (atype, pos) in tracks.items():
        psi = None if headings is None or aid not in headings else headings[aid]
        seg = [(k, atype, float(pos[k, 0]), float(pos[k, 1]), None if psi is None else wrap_angle(float(psi[k])))
               for k in range(f)]
        for k, st in enumerate(_derive_states(aid, seg, dt)):
            states[k][aid] = st
    frames = tuple(Frame(k, k * dt, states[k]) for k in range(f))
    return Scene(frames=frames, dt=dt, unit=unit, name=name, tag=tag)


def load_dataset(path: str | Path, descriptor: DatasetDescriptor | Mapping | None = None) -> list[Scene]:
    """Load one trajectory file, or every ``*.csv`` in a directory, into scenes."""
    if descriptor is None:
        descriptor = DatasetDescriptor()
    elif not isinstance(descriptor, DatasetDescriptor):
        descriptor = DatasetDescriptor.from_mapping(descriptor)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    scenes = []
    for f in files:
        for name, rows in _read_rows(f, descriptor).items():
            scenes.append(_build_scene(name, rows, descriptor))
    return scenes


def write_dataset(scenes: Sequence[Scene], path: str | Path) -> None:
    """Write scenes in the trajectory format (scene_id/scenario/psi columns included)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(CANONICAL_COLUMNS) + ["psi", "scene_id", "scenario"])
        for i, scene in enumerate(scenes):
            sid = scene.name or f"scene{i}"
            for fr in scene.frames:
                for s in fr.states.values():
                    w.writerow([
                        fr.index, repr(fr.timestamp), s.agent_id, s.agent_type.value,
                        repr(s.position[0]), repr(s.position[1]),
                        "" if s.heading is None else repr(s.heading), sid, scene.tag,
                    ])


def scenes_close(a: Scene, b: Scene, tol: float = 1e-9) -> bool:
    """Field-wise equality up to a float tolerance."""
    if len(a.frames) != len(b.frames) or a.unit != b.unit or abs(a.dt - b.dt) > tol:
        return False
    for fa, fb in zip(a.frames, b.frames):
        if fa.index != fb.index or abs(fa.timestamp - fb.timestamp) > tol:
            return False
        if set(fa.states) != set(fb.states):
            return False
        for aid, sa in fa.states.items():
            sb = fb.states[aid]
            if sa.agent_type != sb.agent_type:
                return False
            if max(abs(p - q) for p, q in zip(sa.position + sa.velocity, sb.position + sb.velocity)) > tol:
                return False
            if (sa.heading is None) != (sb.heading is None):
                return False
            if sa.heading is not None and abs(sa.heading - sb.heading) > tol:
                return False
    return True


# ---------------------------------------------------------------------------
# windowing

def window_cases(scene: Scene, history_len: int, future_len: int, stride: int = 1) -> list[PredictionCase]:
    """Slide a (history + future) window over a scene.

    Only agents present in every frame of a window are kept; windows left with
    no agents are skipped.
    """
    if history_len < 2 or future_len < 1 or stride < 1:
        raise ValueError("need history_len >= 2, future_len >= 1, stride >= 1")
    total = history_len + future_len
    n_frames = len(scene.frames)
    cases = []
    order = scene.agent_ids
    for start in range(0, n_frames - total + 1, stride):
        window = scene.frames[start : start + total]
        present = [a for a in order if all(a in f.states for f in window)]
        if not present:
            continue
        pos = np.array([[f.states[a].position for f in window] for a in present], dtype=float)
        vel = np.array([[f.states[a].velocity for f in window] for a in present], dtype=float)
        head = np.array(
            [[np.nan if f.states[a].heading is None else f.states[a].heading for f in window] for a in present],
            dtype=float,
        )
        cases.append(
            PredictionCase(
                agent_ids=tuple(present),
                agent_types=tuple(window[0].states[a].agent_type for a in present),
                positions=pos,
                velocities=vel,
                headings=head,
                history_len=history_len,
                dt=scene.dt,
                scene_name=scene.name,
                start_frame=window[0].index,
                tag=scene.tag,
            )
        )
    return cases
