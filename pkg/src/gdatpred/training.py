"""Data preparation, the optimisation loop, checkpoints and loss logs."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import Config
from .data import DatasetDescriptor, PredictionCase, Scene, load_dataset, window_cases
from .evaluation import MetricsReport, evaluate_prediction_sets
from .losses import LossParts, LossWeights, MMDConfig, total_loss
from .model import Batch, PreparedCase, TrajectoryPredictor, make_batch, prepare_cases, sample_predictions
from .raster import ContextRasters, GridSpec, build_rasters
from .synthetic import SyntheticScenarioSpec, generate_synthetic

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "recon", "kl", "mmd", "total", "val_ade")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch} (step {step})")
        self.epoch = epoch
        self.step = step


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# data


@dataclass
class DataSplits:
    train: list[PredictionCase]
    val: list[PredictionCase]
    test: list[PredictionCase]
    rasters: ContextRasters | None
    scene_split: dict[str, list[str]] = field(default_factory=dict)


def load_scenes(cfg: Config) -> list[Scene]:
    if cfg.data.path is not None:
        return load_dataset(cfg.data.path, DatasetDescriptor.from_mapping(cfg.data.descriptor))
    spec = SyntheticScenarioSpec(**_synthetic_kwargs(cfg.data.synthetic or {}))
    return generate_synthetic(spec, seed=cfg.train.seed)


def _synthetic_kwargs(d: dict) -> dict:
    d = dict(d)
    if "agents" in d:
        d["agents"] = tuple(d["agents"])
    if isinstance(d.get("scenario"), list):
        d["scenario"] = tuple(d["scenario"])
    return d


def split_items(items: Sequence, fractions: Sequence[float], seed: int) -> tuple[list, list, list]:
    """Seeded shuffle, then consecutive 70/10/20-style slices (rounded down, remainder to train)."""
    order = list(range(len(items)))
    random.Random(seed).shuffle(order)
    n = len(items)
    n_val = int(math.floor(fractions[1] * n))
    n_test = int(math.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    pick = lambda idx: [items[i] for i in idx]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


def prepare_data(cfg: Config, scenes: Sequence[Scene] | None = None) -> DataSplits:
    """Split by scene, window every split, and rasterise the training scenes only."""
    scenes = list(load_scenes(cfg) if scenes is None else scenes)
    d = cfg.data
    if len(scenes) >= 10:
        tr, va, te = split_items(scenes, d.split, cfg.train.seed)
        win = lambda ss: [c for s in ss for c in window_cases(s, d.history_len, d.future_len, d.stride)]  # noqa
        train, val, test = win(tr), win(va), win(te)
        names = {"train": [s.name for s in tr], "val": [s.name for s in va], "test": [s.name for s in te]}
        raster_scenes = tr
    else:
        # too few scenes for a scene-level split: split windows instead
        cases = [c for s in scenes for c in window_cases(s, d.history_len, d.future_len, d.stride)]
        train, val, test = split_items(cases, d.split, cfg.train.seed)
        names = {"train": [s.name for s in scenes], "val": [], "test": []}
        raster_scenes = scenes
    rasters = None
    if cfg.model.use_context:
        spec = GridSpec.covering(raster_scenes, d.cell_size, d.grid_margin)
        rasters = build_rasters(raster_scenes, spec)
    return DataSplits(train, val, test, rasters, names)


def rasters_for(cfg: Config, scenes: Sequence[Scene]) -> ContextRasters:
    spec = GridSpec.covering(scenes, cfg.data.cell_size, cfg.data.grid_margin)
    return build_rasters(scenes, spec)


# ---------------------------------------------------------------------------
# optimisation


def loss_weights(cfg: Config, enforce: bool = True) -> LossWeights:
    return LossWeights(cfg.loss.gamma, cfg.loss.alpha, cfg.loss.beta, enforce)


def batch_loss(model: TrajectoryPredictor, batch: Batch, weights: LossWeights, mmd_cfg: MMDConfig,
               squared: bool = True, generator: torch.Generator | None = None,
               eps: torch.Tensor | None = None, prior: torch.Tensor | None = None) -> LossParts:
    out = model(batch, eps=eps, generator=generator)
    truth = batch.future("pos").permute(0, 2, 1, 3)
    z = out.z[batch.mask]
    if prior is None:
        prior = torch.randn(z.shape, generator=generator, dtype=z.dtype)
    return total_loss(out.decoded.positions, truth, out.mu, z, prior, batch.mask, weights, mmd_cfg, squared)


def make_model(cfg: Config, dtype=torch.float32) -> TrajectoryPredictor:
    torch.manual_seed(cfg.train.seed)
    return TrajectoryPredictor(cfg.model).to(dtype)


def validation_report(model: TrajectoryPredictor, cases: Sequence[PreparedCase], k: int, seed: int,
                      horizons: Sequence[int] | None = None, batch_size: int = 64) -> MetricsReport:
    preds = sample_predictions(cases, model, k, phase="test", seed=seed, batch_size=batch_size)
    return evaluate_prediction_sets(preds, horizons, model.cfg.mode)


@dataclass
class TrainResult:
    model: TrajectoryPredictor
    history: list[dict]
    best_epoch: int
    best_val_ade: float
    checkpoint: Path | None = None
    log_path: Path | None = None


def train(cfg: Config, data: DataSplits, out_dir: str | Path | None = None,
          prepared: tuple[list[PreparedCase], list[PreparedCase]] | None = None,
          dtype=torch.float32) -> TrainResult:
    """Adam on the full objective; keeps the parameters with the best validation ADE."""
    tc = cfg.train
    seed_everything(tc.seed)
    weights = loss_weights(cfg)
    mmd_cfg = MMDConfig(cfg.loss.kernel, cfg.loss.scale)
    model = make_model(cfg, dtype)
    if prepared is None:
        prepared = (prepare_cases(data.train, data.rasters, cfg.model), prepare_cases(data.val, data.rasters, cfg.model))
    train_items, val_items = prepared
    if not train_items:
        raise ValueError("no training cases")
    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate)
    gen = torch.Generator().manual_seed(tc.seed)
    history: list[dict] = []
    best = (math.inf, -1, None)
    step = 0
    for epoch in range(1, tc.epochs + 1):
        model.train()
        order = torch.randperm(len(train_items), generator=gen).tolist()
        sums = {"recon": 0.0, "kl": 0.0, "mmd": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(order), tc.batch_size):
            batch = make_batch([train_items[i] for i in order[start:start + tc.batch_size]], dtype)
            parts = batch_loss(model, batch, weights, mmd_cfg, cfg.loss.squared, gen)
            value = float(parts.total.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, step, value)
            opt.zero_grad()
            parts.total.backward()
            if tc.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            step += 1
            n_batches += 1
            for k, v in parts.as_floats().items():
                sums[k] += v
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        if val_items:
            rep = validation_report(model, val_items, tc.val_k, tc.seed, batch_size=tc.batch_size)
            row["val_ade"] = rep.ade[-1]
        else:
            row["val_ade"] = row["recon"]
        history.append(row)
        log.info("epoch %d recon %.4f kl %.4f mmd %.4f total %.4f val_ade %.4f", epoch, row["recon"], row["kl"],
                 row["mmd"], row["total"], row["val_ade"])
        if row["val_ade"] < best[0]:
            best = (row["val_ade"], epoch, {k: v.detach().clone() for k, v in model.state_dict().items()})
    model.load_state_dict(best[2])
    result = TrainResult(model, history, best[1], best[0])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out / "checkpoint.pt"
        result.log_path = out / "loss_log.csv"
        save_checkpoint(result.checkpoint, model, cfg, best[1], best[0])
        write_loss_log(result.log_path, history)
    return result


def overfit(case: PreparedCase, cfg: Config, steps: int = 500, repeats: int = 8,
            learning_rate: float | None = None, target: float | None = None) -> list[float]:
    """Fit one case repeated as a batch; returns the reconstruction loss per step."""
    seed_everything(cfg.train.seed)
    model = make_model(cfg)
    weights = loss_weights(cfg)
    mmd_cfg = MMDConfig(cfg.loss.kernel, cfg.loss.scale)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate or cfg.train.learning_rate)
    gen = torch.Generator().manual_seed(cfg.train.seed)
    batch = make_batch([case] * repeats)
    recon = []
    for _ in range(steps):
        parts = batch_loss(model, batch, weights, mmd_cfg, cfg.loss.squared, gen)
        opt.zero_grad()
        parts.total.backward()
        opt.step()
        recon.append(float(parts.recon.detach()))
        if target is not None and recon[-1] < target:
            break
    return recon


# ---------------------------------------------------------------------------
# artifacts


def save_checkpoint(path: str | Path, model: TrajectoryPredictor, cfg: Config, epoch: int, val_ade: float) -> None:
    """Named parameter tensors plus config snapshot, seed and validation score."""
    torch.save({
        "format": "gdatpred-checkpoint/1",
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "epoch": epoch,
        "val_ade": val_ade,
    }, path)


def load_checkpoint(path: str | Path) -> tuple[TrajectoryPredictor, Config, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    cfg = Config.from_dict(blob["config"])
    model = TrajectoryPredictor(cfg.model)
    sd = blob["state_dict"]
    model = model.to(next(iter(sd.values())).dtype)
    model.load_state_dict(sd)
    model.eval()
    return model, cfg, blob


def write_loss_log(path: str | Path, history: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])


def read_loss_log(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
