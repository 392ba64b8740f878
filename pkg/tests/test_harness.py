import csv
import json
import math

import numpy as np
import pytest

from beamsense import channel, cli, harness, predictor
from beamsense.config import ExperimentConfig
from beamsense.errors import ConfigurationError, ParameterError

TINY = ExperimentConfig(
    seed=7, n_source_envs=3, paths_per_env=1, target_paths=3, resolution=(36, 54),
    tx_upa=(4, 2), rx_upa=(2, 2), voxel_dims=(6, 4, 2), hidden=8, sample_stride=16,
    pretrain_epochs=2, transfer_epochs=2, lr=0.05, batch=16)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    n_src = harness.generate_dataset(TINY, "multi", root / "source")
    n_tgt = harness.generate_dataset(TINY, "single", root / "target")
    return root, n_src, n_tgt


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- config -----------------------------------------------------------------

def test_config_text_roundtrip():
    cfg = TINY.with_overrides(p_flip=0.125, voxel_dims=(3, 2, 1))
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_config_comments_and_partial():
    cfg = ExperimentConfig.from_text("# desk\nseed = 5   ; inline\nresolution = 90, 135\n")
    assert cfg.seed == 5 and cfg.resolution == (90, 135)
    assert cfg.horizon == ExperimentConfig().horizon


@pytest.mark.parametrize("text", ["bogus = 1\n", "seed = abc\n", "train_split = 0.7\n",
                                  "finetune_fraction = 0\n", "lb_window = 5\n"])
def test_config_rejects(text):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_text(text)


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.conf"))
    assert files
    for f in files:
        ExperimentConfig.from_file(f)


# -- generation -------------------------------------------------------------

def test_dataset_tree(data):
    root, n_src, n_tgt = data
    info = json.loads((root / "source" / "dataset.json").read_text())
    assert info["mode"] == "multi" and info["n_envs"] == 3 and info["total_frames"] == n_src
    tinfo = json.loads((root / "target" / "dataset.json").read_text())
    assert tinfo["n_envs"] == 1 and len(tinfo["paths"]) == 3
    for e, p in harness.list_paths(root / "target"):
        d = root / "target" / f"env_{e:03d}" / f"path_{p:03d}"
        meta = json.loads((d / "meta.json").read_text())
        F, H, W = meta["dims"]
        assert TINY.frame_min <= F <= TINY.frame_max
        assert (d / "frames.bin").stat().st_size == 2 * F * H * W
        assert (d / "dynamic_maps.bin").stat().st_size == 2 * F * H * W
        frames = np.fromfile(d / "frames.bin", dtype="<u2")
        assert frames.max() < meta["Q"]
        assert ExperimentConfig.from_text((root / "target" / "config.txt").read_text()) == TINY


def test_single_mode_shares_layout(data):
    root, _, _ = data
    a = (root / "target" / "env_000" / "layout.json").read_text()
    b = (root / "source" / "env_000" / "layout.json").read_text()
    c = (root / "source" / "env_001" / "layout.json").read_text()
    assert a != b or a != c
    assert b != c


def test_labels_reproducible_from_paths(data):
    root, _, _ = data
    d = root / "target" / "env_000" / "path_000"
    upa_t, upa_r, ofdm, cb_t, cb_r = harness.channel_models(TINY)
    stored = harness.read_paths_csv(d / "paths.csv")
    with open(d / "labels.csv") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows[::37]:
        key = (int(row["frame"]), int(row["bs_index"]))
        H = channel.assemble_channel(stored[key], upa_t, upa_r, ofdm)
        r, t, rate = channel.optimal_beam_pair(H, cb_r, cb_t, ofdm)
        assert (t, r) == (int(row["t_idx"]), int(row["r_idx"]))
        assert rate == pytest.approx(float(row["rate_bps_hz"]), rel=1e-12)


def test_generation_deterministic(data, tmp_path):
    root, _, _ = data
    harness.generate_dataset(TINY, "single", tmp_path / "again")
    assert tree_bytes(tmp_path / "again") == tree_bytes(root / "target")


def test_generate_bad_mode(tmp_path):
    with pytest.raises(ParameterError):
        harness.generate_dataset(TINY, "both", tmp_path)


def test_sense_report(data, tmp_path):
    root, _, _ = data
    d = root / "target" / "env_000" / "path_001"
    maps, records = harness.sense_path(d, TINY, tmp_path)
    assert (tmp_path / "dynamic_maps.bin").read_bytes() == (d / "dynamic_maps.bin").read_bytes()
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == harness.REPORT_FIELDS
    assert len(rows) == len(records)
    for r in rows:
        assert (r["verdict"] == "dynamic") == (float(r["q_stat"]) > float(r["threshold"]))


# -- datasets and splits ----------------------------------------------------

def test_beam_dataset_windows(data):
    root, _, _ = data
    paths = harness.list_paths(root / "target")
    ds = harness.build_beam_dataset(root / "target", paths, TINY)
    assert ds.labels.shape[1] == 2
    n_beams = TINY.tx_upa[0] * TINY.tx_upa[1] * TINY.rx_upa[0] * TINY.rx_upa[1]
    assert ds.labels.max() < n_beams
    # label of a window is the beam class `horizon` frames after its last frame
    d = root / "target" / "env_000" / "path_000"
    lab = harness.read_labels(d / "labels.csv")
    s = 16
    row = lab[(lab[:, 0] == s + TINY.lb_window - 1 + TINY.horizon) & (lab[:, 1] == 1)][0]
    i = int(np.flatnonzero(ds.sample_id == (0 * 1000 + 0) * 100000 + s)[0])
    assert ds.labels[i, 1] == row[2] * 4 + row[3]
    assert len(set(ds.sample_id.tolist())) == len(ds)


def test_split_paths_disjoint():
    paths = [(e, p) for e in range(3) for p in range(5)]
    a, b = harness.split_paths(paths, 0.3, 11, "x")
    assert len(a) == round(0.3 * 15) and not set(a) & set(b)
    assert sorted(a + b) == paths
    assert harness.split_paths(paths, 0.3, 11, "x") == (a, b)
    assert harness.split_paths(paths, 1.0, 11, "x") == (paths, [])


# -- experiments --------------------------------------------------------------

@pytest.fixture(scope="module")
def runs(data, tmp_path_factory):
    root, _, _ = data
    out = tmp_path_factory.mktemp("runs")
    best, pre = harness.run_pretrain(TINY, root / "source", out / "pretrain")
    report, tuned, scratch = harness.run_transfer(TINY, best, root / "target", out / "transfer")
    return out, best, pre, report, tuned, scratch


def test_pretrain_checkpoint(runs, data):
    out, best, pre, _, _, _ = runs
    root, _, _ = data
    loaded = predictor.load_model(out / "pretrain" / "model")
    assert loaded.checksum() == best.checksum()
    val = harness.build_beam_dataset(root / "source", [tuple(p) for p in pre.info["val_paths"]], TINY)
    assert predictor.evaluate(loaded, val)["top1"] == pre.info["best_top1"]
    assert best.config.loc_center is not None


def test_transfer_report(runs):
    _, best, _, report, tuned, _ = runs
    assert set(report.arms) == {"finetune", "scratch"}
    assert report.info["split_overlap"] == 0
    assert report.info["frozen_checksum_before"] == report.info["frozen_checksum_after"]
    assert tuned.checksum(predictor.DEFAULT_FREEZE) == best.checksum(predictor.DEFAULT_FREEZE)
    for rows in report.arms.values():
        for split in {r["split"] for r in rows}:
            epochs = [r["epoch"] for r in rows if r["split"] == split]
            assert epochs == sorted(epochs) == list(range(1, len(epochs) + 1))
        for r in rows:
            for k in ("top1", "top5", "top10"):
                assert math.isnan(r[k]) or 0 <= r[k] <= 1
            if not math.isnan(r["top1"]):
                assert r["top10"] >= r["top5"] >= r["top1"]
    assert report.threshold == report.final["scratch"]["top1"]


def test_report_roundtrip(runs):
    out, _, pre, report, _, _ = runs
    back = harness.parse_report(out / "transfer")
    assert back.arms == report.arms
    assert back.final == report.final
    assert back.epochs_to_threshold == report.epochs_to_threshold
    assert back.threshold == report.threshold
    assert back.info == json.loads(json.dumps(report.info))
    # the summary speedup is recomputable from the emitted histories
    ett = {arm: harness.epochs_to_threshold(rows, report.info["eval_split"], back.threshold)
           for arm, rows in back.arms.items()}
    assert ett == back.epochs_to_threshold
    if ett["finetune"]:
        assert back.speedup == pytest.approx(ett["scratch"] / ett["finetune"])


def test_empty_history_report(tmp_path):
    harness.emit_report(harness.RunReport(arms={"a": []}), tmp_path)
    assert (tmp_path / "a" / "history.csv").read_text() == ",".join(harness.HISTORY_FIELDS) + "\n"
    assert harness.parse_report(tmp_path).arms == {"a": []}


def test_epochs_to_threshold():
    rows = [{"epoch": e, "split": "test", "top1": v} for e, v in enumerate([0.1, 0.4, 0.3, 0.5], 1)]
    assert harness.epochs_to_threshold(rows, "test", 0.4) == 2
    assert harness.epochs_to_threshold(rows, "test", 0.6) is None


def test_full_fraction_freeze_nothing_matches_scratch(data):
    root, _, _ = data
    tune_ds = harness.build_beam_dataset(root / "target", harness.list_paths(root / "target"), TINY)
    init = harness.scratch_model(TINY, TINY.predictor_config(), tune_ds)
    report, tuned, scratch = harness.run_transfer(TINY, init, root / "target", fraction=1.0,
                                                  freeze_spec=())
    assert report.info["eval_split"] == "tune"
    assert tuned.checksum() == scratch.checksum()
    assert report.arms["finetune"] == report.arms["scratch"]


# -- command line -------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    conf = tmp_path / "tiny.conf"
    conf.write_text(TINY.with_overrides(n_source_envs=1, target_paths=2).to_text())
    out = tmp_path / "run"
    assert cli.main(["generate", "--config", str(conf), "--out", str(out)]) == 0
    assert (out / "source" / "dataset.json").exists() and (out / "target" / "dataset.json").exists()
    assert cli.main(["pretrain", "--config", str(conf), "--data", str(out / "source"),
                     "--out", str(out / "pre")]) == 0
    assert cli.main(["finetune", "--config", str(conf), "--data", str(out / "target"),
                     "--model", str(out / "pre" / "model"), "--out", str(out / "ft")]) == 0
    assert json.loads((out / "ft" / "summary.json").read_text())["arms"] == ["finetune", "scratch"]
    capsys.readouterr()
    assert cli.main(["evaluate", "--config", str(conf), "--data", str(out / "target"),
                     "--model", str(out / "ft" / "model")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) == {"loss", "top1", "top5", "top10"}
    path = out / "target" / "env_000" / "path_000"
    assert cli.main(["sense", "--config", str(conf), "--data", str(path),
                     "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "report.csv").exists()


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["evaluate", "--data", str(tmp_path), "--model", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("beamsense evaluate: error:")
    bad = tmp_path / "bad.conf"
    bad.write_text("nope = 3\n")
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
