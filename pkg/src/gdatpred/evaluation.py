"""Displacement metrics, best-of-K scoring, constant-velocity and least-squares baselines."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import PredictionCase


def default_horizons(future_len: int) -> list[int]:
    hs = list(range(2, future_len + 1, 2))
    if not hs or hs[-1] != future_len:
        hs.append(future_len)
    return hs


def _as_samples(pred: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    return pred[:, None] if pred.ndim == 3 else pred


def displacement_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Euclidean error per agent, sample and step: pred (N, [K,] T, 2), truth (N, T, 2) -> (N, K, T)."""
    pred = _as_samples(pred)
    truth = np.asarray(truth, dtype=float)
    if pred.shape[0] != truth.shape[0] or pred.shape[2:] != truth.shape[1:]:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} are not aligned")
    return np.sqrt(((pred - truth[:, None]) ** 2).sum(-1))


def _check_horizons(horizons: Sequence[int], future_len: int) -> list[int]:
    hs = [int(h) for h in horizons]
    for h in hs:
        if h < 1 or h > future_len:
            raise ValueError(f"horizon {h} outside 1..{future_len}")
    return hs


def agent_metrics(err: np.ndarray, horizons: Sequence[int]) -> dict[str, np.ndarray]:
    """Per-agent scores from errors (N, K, T), one column per horizon.

    Best-of-K picks, per agent and horizon, the sample with the lowest ADE up to
    that horizon and scores both ADE and FDE on it. The ``*_mean`` entries
    average over samples instead.
    """
    hs = _check_horizons(horizons, err.shape[2])
    ade_k = np.stack([err[:, :, :h].mean(-1) for h in hs], -1)  # (N, K, H)
    fde_k = np.stack([err[:, :, h - 1] for h in hs], -1)
    best = ade_k.argmin(1)[:, None]  # (N, 1, H)
    return {
        "ade": np.take_along_axis(ade_k, best, 1)[:, 0], "fde": np.take_along_axis(fde_k, best, 1)[:, 0],
        "ade_mean": ade_k.mean(1), "fde_mean": fde_k.mean(1),
    }


@dataclass
class MetricsReport:
    horizons: list[int]
    ade: list[float]  # best-of-K, per horizon
    fde: list[float]
    ade_mean: list[float]  # sample-averaged
    fde_mean: list[float]
    k: int
    mode: str
    dt: float = 1.0
    num_agents: int = 0
    per_scenario: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def at(self, horizon: int, metric: str = "ade") -> float:
        return getattr(self, metric)[self.horizons.index(horizon)]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(**dict(d))


def _aggregate(per_agent: dict[str, np.ndarray]) -> dict[str, list[float]]:
    return {k: [float(x) for x in v.mean(0)] for k, v in per_agent.items()}


def ade_fde(pred, truth, horizons: Sequence[int] | None = None, mode: str = "", dt: float = 1.0,
            tags: Sequence[str] | None = None) -> MetricsReport:
    """Metrics over agents. ``pred``/``truth`` may be arrays or per-case lists of arrays."""
    if isinstance(pred, np.ndarray) or not isinstance(pred, (list, tuple)):
        pred, truth = [pred], [truth]
    if len(pred) != len(truth):
        raise ValueError("need one truth array per prediction array")
    if not pred:
        raise ValueError("no predictions to score")
    errs = [displacement_errors(p, t) for p, t in zip(pred, truth)]
    ks = {e.shape[1] for e in errs}
    ts = {e.shape[2] for e in errs}
    if len(ks) != 1 or len(ts) != 1:
        raise ValueError("all cases need the same K and future length")
    future_len = ts.pop()
    hs = _check_horizons(horizons if horizons is not None else default_horizons(future_len), future_len)
    per_case = [agent_metrics(e, hs) for e in errs]
    merged = {k: np.concatenate([m[k] for m in per_case]) for k in per_case[0]}
    agg = _aggregate(merged)
    by_tag: dict[str, dict[str, list[float]]] = {}
    if tags is not None:
        for tag in sorted(set(tags)):
            sel = [m for m, t in zip(per_case, tags) if t == tag]
            by_tag[tag] = _aggregate({k: np.concatenate([m[k] for m in sel]) for k in sel[0]})
    return MetricsReport(hs, agg["ade"], agg["fde"], agg["ade_mean"], agg["fde_mean"], ks.pop(), mode, dt,
                         int(merged["ade"].shape[0]), by_tag)


# ---------------------------------------------------------------------------
# baselines


def baseline_cvm(case: PredictionCase, future_len: int | None = None) -> np.ndarray:
    """Extrapolate the last finite-difference velocity: (N, T_f, 2)."""
    tf = case.future_len if future_len is None else future_len
    hist = case.history_positions
    if hist.shape[1] < 2:
        raise ValueError("constant velocity needs two history steps")
    step = hist[:, -1] - hist[:, -2]
    k = np.arange(1, tf + 1, dtype=float)
    return hist[:, -1, None, :] + k[None, :, None] * step[:, None, :]


def baseline_lr(case: PredictionCase, future_len: int | None = None) -> np.ndarray:
    """Per-axis least-squares line over the history, evaluated at the future steps: (N, T_f, 2)."""
    tf = case.future_len if future_len is None else future_len
    hist = case.history_positions
    th = hist.shape[1]
    if th < 2:
        raise ValueError("least squares needs at least two history steps")
    t = np.arange(th, dtype=float) * case.dt
    design = np.stack([np.ones_like(t), t], -1)
    coef, *_ = np.linalg.lstsq(design, hist.transpose(1, 0, 2).reshape(th, -1), rcond=None)
    tq = (th - 1 + np.arange(1, tf + 1, dtype=float)) * case.dt
    out = np.stack([np.ones_like(tq), tq], -1) @ coef  # (T_f, N*2)
    return out.reshape(tf, -1, 2).transpose(1, 0, 2)


BASELINES: dict[str, Callable[[PredictionCase, int | None], np.ndarray]] = {"CVM": baseline_cvm, "LR": baseline_lr}


def evaluate_baseline(cases: Sequence[PredictionCase], name: str, horizons: Sequence[int] | None = None) -> MetricsReport:
    fn = BASELINES[name]
    preds = [fn(c) for c in cases]
    return ade_fde(preds, [c.future_positions for c in cases], horizons, name, cases[0].dt, [c.tag for c in cases])


def evaluate_prediction_sets(pred_sets, horizons: Sequence[int] | None = None, mode: str = "") -> MetricsReport:
    cases = [p.case for p in pred_sets]
    return ade_fde([p.positions for p in pred_sets], [c.future_positions for c in cases], horizons,
                   mode or pred_sets[0].mode, cases[0].dt, [c.tag for c in cases])


# ---------------------------------------------------------------------------
# report files


def format_table(reports: Mapping[str, MetricsReport], delimiter: str = "\t") -> str:
    """Rows = horizon (seconds), columns = method; cells hold "ADE/FDE"."""
    names = list(reports)
    first = reports[names[0]]
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["horizon_s"] + names)
    for idx, h in enumerate(first.horizons):
        row = [f"{h * first.dt:.1f}"]
        for n in names:
            r = reports[n]
            row.append(f"{r.ade[idx]:.4f}/{r.fde[idx]:.4f}")
        w.writerow(row)
    return buf.getvalue()


def write_report(path_stem, reports: Mapping[str, MetricsReport]) -> tuple[str, str]:
    """Writes ``<stem>.tsv`` and ``<stem>.json``; returns both paths."""
    tsv, js = f"{path_stem}.tsv", f"{path_stem}.json"
    with open(tsv, "w", encoding="utf-8") as fh:
        fh.write(format_table(reports))
    with open(js, "w", encoding="utf-8") as fh:
        json.dump({k: v.to_dict() for k, v in reports.items()}, fh, sort_keys=True, indent=1)
    return tsv, js


def load_report(path) -> dict[str, MetricsReport]:
    with open(path, encoding="utf-8") as fh:
        return {k: MetricsReport.from_dict(v) for k, v in json.load(fh).items()}
