"""Command-line entry point: preprocess, train, eval, predict, plot.

Config values come from ``--config`` (YAML, or a run manifest), then from
``GDATPRED_<SECTION>__<KEY>`` environment variables, then from flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import MODES, Config
from .data import load_dataset, window_cases, write_dataset
from .evaluation import default_horizons, evaluate_baseline, evaluate_prediction_sets, write_report
from .model import make_batch, prepare_cases, sample_predictions
from .raster import load_rasters, save_rasters
from .training import DataSplits, load_checkpoint, load_scenes, prepare_data, train

log = logging.getLogger("gdatpred")

SCENES_FILE = "scenes.csv"
SPLIT_FILE = "split.json"
RASTER_FILE = "rasters.zip"
CASES_FILE = "cases.json"
CHECKPOINT_FILE = "checkpoint.pt"


class MissingArtifactError(FileNotFoundError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing upstream artifact: {path}")
    return path


def write_manifest(out: Path, command: str, argv: list[str], cfg: Config, artifacts: list[Path],
                   inputs: list[Path] = ()) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "seed": cfg.train.seed,
        "config": cfg.to_dict(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "artifacts": {p.name: _sha256(p) for p in artifacts},
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_config(path: str | None) -> Config:
    if path is not None and path.endswith(".json"):
        blob = json.loads(Path(path).read_text())
        return Config.from_dict(blob.get("config", blob))
    return Config.load(path)


def _apply_flags(cfg: Config, args) -> Config:
    if getattr(args, "mode", None):
        cfg = cfg.replace(model={"mode": args.mode})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(train={"seed": args.seed})
    if getattr(args, "k", None) is not None:
        cfg = cfg.replace(eval={"k": args.k})
    return cfg


def load_prepared(data_dir: Path, cfg: Config) -> DataSplits:
    """Rebuild the splits and rasters written by ``preprocess``."""
    scenes = load_dataset(_require(data_dir / SCENES_FILE))
    split = json.loads(_require(data_dir / SPLIT_FILE).read_text())
    rasters = load_rasters(_require(data_dir / RASTER_FILE))
    by_name = {s.name: s for s in scenes}
    d = cfg.data
    if split.get("level") == "case":
        full = prepare_data(cfg.replace(model={"mode": "T"}), scenes)  # windows only; rasters come from disk
        train_c, val_c, test_c = full.train, full.val, full.test
    else:
        def win(names):
            return [c for n in names for c in window_cases(by_name[n], d.history_len, d.future_len, d.stride)]
        train_c, val_c, test_c = win(split["train"]), win(split["val"]), win(split["test"])
    return DataSplits(train_c, val_c, test_c, rasters, {k: split[k] for k in ("train", "val", "test")})


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args, cfg: Config, out: Path, argv) -> int:
    scenes = load_scenes(cfg)
    splits = prepare_data(cfg.replace(model={"mode": "T+C"}), scenes)
    write_dataset(scenes, out / SCENES_FILE)
    save_rasters(out / RASTER_FILE, splits.rasters)
    level = "scene" if len(scenes) >= 10 else "case"
    (out / SPLIT_FILE).write_text(json.dumps({"level": level, **splits.scene_split}, indent=1, sort_keys=True))
    index = {
        name: [{"scene": c.scene_name, "start_frame": c.start_frame, "agents": list(c.agent_ids)} for c in cases]
        for name, cases in (("train", splits.train), ("val", splits.val), ("test", splits.test))
    }
    (out / CASES_FILE).write_text(json.dumps(index, sort_keys=True))
    arts = [out / f for f in (SCENES_FILE, RASTER_FILE, SPLIT_FILE, CASES_FILE)]
    inputs = [Path(cfg.data.path)] if cfg.data.path and Path(cfg.data.path).is_file() else []
    write_manifest(out, "preprocess", argv, cfg, arts, inputs)
    print(f"preprocess: {len(scenes)} scenes, {len(splits.train)}/{len(splits.val)}/{len(splits.test)} cases -> {out}")
    return 0


def _data_inputs(data_dir: Path) -> list[Path]:
    return [_require(data_dir / f) for f in (SCENES_FILE, SPLIT_FILE, RASTER_FILE)]


def cmd_train(args, cfg: Config, out: Path, argv) -> int:
    data_dir = Path(args.data)
    inputs = _data_inputs(data_dir)
    data = load_prepared(data_dir, cfg)
    if not cfg.model.use_context:
        data.rasters = None
    result = train(cfg, data, out)
    write_manifest(out, "train", argv, cfg, [result.checkpoint, result.log_path], inputs)
    print(f"train: best epoch {result.best_epoch}, val ADE {result.best_val_ade:.4f} -> {result.checkpoint}")
    return 0


def _model_and_data(args):
    ckpt = _require(Path(args.checkpoint))
    data_dir = Path(args.data)
    inputs = _data_inputs(data_dir) + [ckpt]
    model, cfg, _ = load_checkpoint(ckpt)
    if args.k is not None:
        cfg = cfg.replace(eval={"k": args.k})
    if args.seed is not None:
        cfg = cfg.replace(train={"seed": args.seed})
    data = load_prepared(data_dir, cfg)
    cases = getattr(data, args.split)
    if not cases:
        raise ValueError(f"split {args.split!r} holds no cases")
    return model, cfg, data, cases, inputs


def evaluate_checkpoint(model, cfg: Config, data: DataSplits, cases) -> dict:
    prepared = prepare_cases(cases, data.rasters if cfg.model.use_context else None, cfg.model)
    horizons = cfg.eval.horizons or default_horizons(cfg.data.future_len)
    preds = sample_predictions(prepared, model, cfg.eval.k, phase="test", seed=cfg.train.seed)
    return {
        cfg.model.mode: evaluate_prediction_sets(preds, horizons, cfg.model.mode),
        "CVM": evaluate_baseline(cases, "CVM", horizons),
        "LR": evaluate_baseline(cases, "LR", horizons),
    }


def cmd_eval(args, cfg_unused, out: Path, argv) -> int:
    model, cfg, data, cases, inputs = _model_and_data(args)
    reports = evaluate_checkpoint(model, cfg, data, cases)
    tsv, js = write_report(out / "report", reports)
    write_manifest(out, "eval", argv, cfg, [Path(tsv), Path(js)], inputs)
    print(Path(tsv).read_text(), end="")
    return 0


def _predictions(model, cfg, data, cases):
    prepared = prepare_cases(cases, data.rasters if cfg.model.use_context else None, cfg.model)
    return sample_predictions(prepared, model, cfg.eval.k, phase="test", seed=cfg.train.seed)


def write_prediction_dump(path: Path, pred_sets) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "scene", "start_frame", "agent_id", "sample", "t", "x", "y", "psi"])
        for ci, ps in enumerate(pred_sets):
            for aid, s, t, x, y, psi in ps.dump_rows():
                w.writerow([ci, ps.case.scene_name, ps.case.start_frame, aid, s, t, repr(x), repr(y),
                            "" if np.isnan(psi) else repr(psi)])


def cmd_predict(args, cfg_unused, out: Path, argv) -> int:
    model, cfg, data, cases, inputs = _model_and_data(args)
    preds = _predictions(model, cfg, data, cases)
    path = out / "predictions.csv"
    write_prediction_dump(path, preds)
    write_manifest(out, "predict", argv, cfg, [path], inputs)
    print(f"predict: {len(preds)} cases x K={cfg.eval.k} -> {path}")
    return 0


def cmd_plot(args, cfg_unused, out: Path, argv) -> int:
    from .plotting import plot_attention, plot_prediction

    model, cfg, data, cases, inputs = _model_and_data(args)
    if not 0 <= args.case < len(cases):
        raise ValueError(f"case index {args.case} outside 0..{len(cases) - 1}")
    case = cases[args.case]
    pred = _predictions(model, cfg, data, [case])[0]
    fan = plot_prediction(case, pred.positions, out / f"case{args.case}_prediction.png", data.rasters,
                          f"{cfg.model.mode}  K={cfg.eval.k}")
    dump = out / f"case{args.case}_predictions.csv"
    write_prediction_dump(dump, [pred])
    # attention of the history graph at the last observed step, last round, averaged over heads
    prepared = prepare_cases([case], data.rasters if cfg.model.use_context else None, cfg.model)
    with torch.no_grad():
        attrs, _ = model.encode(make_batch(prepared, next(model.parameters()).dtype), with_future=False)
    n = case.num_agents
    alpha = attrs.alphas[-1][0, case.history_len - 1].mean(0)[:n, :n].numpy()
    beta = attrs.betas["history"][0].mean(0)[:n].numpy()
    att = plot_attention(case, alpha, beta, out / f"case{args.case}_attention.png")
    arts = [fan, Path(str(fan) + ".json"), dump, att, Path(str(att) + ".json")]
    write_manifest(out, "plot", argv, cfg, arts, inputs)
    print(f"plot: {fan} {att}")
    return 0


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdatpred", description="Multi-agent trajectory prediction with graph double attention.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_model=False, needs_data=False):
        sp.add_argument("--config", help="YAML config or a run manifest (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--k", type=int, help="samples per agent")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if needs_data:
            sp.add_argument("--data", required=True, help="directory written by preprocess")
        if needs_model:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--split", choices=("train", "val", "test"), default="test")

    common(sub.add_parser("preprocess", help="load or generate scenes, split, rasterise"))
    common(sub.add_parser("train", help="fit a model"), needs_data=True)
    common(sub.add_parser("eval", help="ADE/FDE report against CVM and LR"), needs_model=True, needs_data=True)
    common(sub.add_parser("predict", help="dump sampled futures"), needs_model=True, needs_data=True)
    sp = sub.add_parser("plot", help="prediction fan and attention figures for one case")
    common(sp, needs_model=True, needs_data=True)
    sp.add_argument("--case", type=int, default=0, help="index within the split")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _apply_flags(load_config(args.config), args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out, argv)
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
