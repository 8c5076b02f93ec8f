import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from gdatpred.cli import load_prepared, main
from gdatpred.evaluation import ade_fde, load_report
from gdatpred.model import prepare_cases, sample_predictions
from gdatpred.training import load_checkpoint

SMALL = {"model": {"patch_size": 7, "context_channels": 4, "substeps": 5},
         "train": {"epochs": 1, "batch_size": 16}, "eval": {"k": 3}}


def write_config(path, extra):
    cfg = json.loads(json.dumps(SMALL))
    for section, values in extra.items():
        cfg.setdefault(section, {}).update(values)
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = write_config(root / "c.yaml", {"data": {"synthetic": {"count": 12, "frames": 24}, "stride": 6,
                                                   "cell_size": 2.0}})
    assert main(["preprocess", "--config", conf, "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", conf, "--seed", "1", "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root, conf


def test_preprocess_artifacts_and_manifest(pipeline):
    root, _ = pipeline
    data = root / "data"
    for name in ("scenes.csv", "rasters.zip", "split.json", "cases.json", "manifest_preprocess.json"):
        assert (data / name).exists(), name
    man = json.loads((data / "manifest_preprocess.json").read_text())
    assert man["seed"] == 1 and set(man["artifacts"]) == {"scenes.csv", "rasters.zip", "split.json", "cases.json"}
    assert json.loads((data / "split.json").read_text())["level"] == "scene"


def test_preprocess_twice_byte_identical(pipeline, tmp_path):
    root, conf = pipeline
    assert main(["preprocess", "--config", conf, "--seed", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "rasters.zip").read_bytes() == (root / "data" / "rasters.zip").read_bytes()
    assert (tmp_path / "scenes.csv").read_bytes() == (root / "data" / "scenes.csv").read_bytes()


def test_eval_matches_library_bit_for_bit(pipeline, tmp_path):
    root, _ = pipeline
    ckpt = root / "run" / "checkpoint.pt"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
    reports = load_report(tmp_path / "report.json")
    assert set(reports) == {"T+C-kin", "CVM", "LR"}
    model, cfg, _ = load_checkpoint(ckpt)
    data = load_prepared(root / "data", cfg)
    prepared = prepare_cases(data.test, data.rasters, cfg.model)
    preds = sample_predictions(prepared, model, cfg.eval.k, seed=cfg.train.seed)
    direct = ade_fde([p.positions for p in preds], [c.future_positions for c in data.test])
    assert reports["T+C-kin"].ade == direct.ade and reports["T+C-kin"].fde == direct.fde
    assert (tmp_path / "report.tsv").read_text().startswith("horizon_s\tT+C-kin\tCVM\tLR")
    man = json.loads((tmp_path / "manifest_eval.json").read_text())
    assert str(ckpt) in man["inputs"]


def test_manifest_reproduces_train(pipeline, tmp_path):
    root, _ = pipeline
    man = root / "run" / "manifest_train.json"
    assert main(["train", "--config", str(man), "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "loss_log.csv").read_bytes() == (root / "run" / "loss_log.csv").read_bytes()


def test_predict_dump(pipeline, tmp_path):
    root, _ = pipeline
    assert main(["predict", "--checkpoint", str(root / "run" / "checkpoint.pt"), "--data", str(root / "data"),
                 "--k", "2", "--split", "val", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "predictions.csv")))
    assert rows and {r["sample"] for r in rows} == {"0", "1"}
    assert all(r["psi"] != "" for r in rows)  # synthetic agents are vehicles decoded kinematically


def test_plot_single_straight_agent(tmp_path):
    lines = ["frame_index,timestamp_s,agent_id,agent_type,x,y"]
    lines += [f"{f},{f * 0.5!r},car,vehicle,{2.0 * f!r},5.0" for f in range(30)]
    (tmp_path / "line.csv").write_text("\n".join(lines) + "\n")
    conf = write_config(tmp_path / "c.yaml", {"data": {"path": str(tmp_path / "line.csv"), "cell_size": 2.0}})
    d, r, p = (str(tmp_path / x) for x in ("data", "run", "plot"))
    assert main(["preprocess", "--config", conf, "--out", d]) == 0
    assert json.loads((tmp_path / "data" / "split.json").read_text())["level"] == "case"
    assert main(["train", "--config", conf, "--data", d, "--out", r]) == 0
    assert main(["plot", "--checkpoint", f"{r}/checkpoint.pt", "--data", d, "--out", p]) == 0
    png = tmp_path / "plot" / "case0_prediction.png"
    assert png.exists() and png.stat().st_size > 0
    side = json.loads(Path(str(png) + ".json").read_text())
    assert side["agents"] == ["car"]
    dumped = np.zeros_like(np.asarray(side["samples"]))
    for row in csv.DictReader(open(tmp_path / "plot" / "case0_predictions.csv")):
        dumped[0, int(row["sample"]), int(row["t"]) - 1] = (float(row["x"]), float(row["y"]))
    assert np.array_equal(np.asarray(side["samples"]), dumped)
    att = json.loads((tmp_path / "plot" / "case0_attention.png.json").read_text())
    assert att["alpha"] == [[1.0]]


def test_missing_artifact_named(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")])
    assert code != 0
    assert "scenes.csv" in capsys.readouterr().err


def test_unknown_flag_usage(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--bogus", "--out", str(tmp_path)])
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--mode", "fancy", "--data", ".", "--out", str(tmp_path)])
