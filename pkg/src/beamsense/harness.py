"""Dataset generation, pre-training, transfer runs and report files.

Dataset tree written by :func:`generate_dataset`::

    <out>/dataset.json
    <out>/config.txt
    <out>/env_000/layout.json
    <out>/env_000/pointcloud/points.bin   little-endian f64 (x, y, z) triples
    <out>/env_000/pointcloud/meta.json
    <out>/env_000/path_000/frames.bin     little-endian u16 class grids, frame-major
    <out>/env_000/path_000/truth.bin      same layout, instance ids
    <out>/env_000/path_000/trajectory.csv frame,x,y,z
    <out>/env_000/path_000/meta.json
    <out>/env_000/path_000/labels.csv     frame,bs_index,t_idx,r_idx,rate_bps_hz
    <out>/env_000/path_000/paths.csv      traced paths after delay alignment
    <out>/env_000/path_000/dynamic_maps.bin
    <out>/env_000/path_000/report.csv
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import channel, predictor, scene, sensing
from .config import ExperimentConfig
from .errors import ParameterError
from .rng import derive_seed, substream

HISTORY_FIELDS = ("epoch", "split", "loss", "top1", "top5", "top10")
PATH_FIELDS = ("frame", "bs_index", "path_index", "power_dbm", "phase_deg", "delay_s",
               "aoa_az_deg", "aoa_el_deg", "aod_az_deg", "aod_el_deg", "bounce_count")
REPORT_FIELDS = ("window_start", "class_id", "instance_key", "q_stat", "threshold",
                 "verdict", "truth_verdict")


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer, np.bool_)):
        return str(x.item())
    return str(x)


# --------------------------------------------------------------------------
# generation

def channel_models(cfg):
    upa_t = channel.UPAConfig(*cfg.tx_upa)
    upa_r = channel.UPAConfig(*cfg.rx_upa)
    return (upa_t, upa_r, channel.OFDMConfig(),
            channel.build_dft_codebook(upa_t), channel.build_dft_codebook(upa_r))


def label_frame(layout, states, rx, cfg, models, exclude=()):
    """Traced paths and optimal beam pair of every BS for one frame."""
    upa_t, upa_r, ofdm, cb_t, cb_r = models
    geom = channel.layout_geometry(layout, states, exclude)
    out = []
    for bs in layout.bs_positions:
        ps = channel.trace_paths(geom, bs, rx, cfg.max_bounce, cfg.r_max,
                                 carrier_hz=ofdm.carrier_hz)
        ps = channel.align_to_first_arrival(ps, ofdm)
        H = channel.assemble_channel(ps, upa_t, upa_r, ofdm)
        r_idx, t_idx, rate = channel.optimal_beam_pair(H, cb_r, cb_t, ofdm)
        out.append((ps, t_idx, r_idx, rate))
    return out


def read_paths_csv(path):
    """Stored path sets keyed by ``(frame, bs_index)``."""
    groups = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            groups.setdefault((int(row["frame"]), int(row["bs_index"])), []).append(row)
    out = {}
    for key, rows in groups.items():
        cols = {f: [float(r[f]) for r in rows] for f in PATH_FIELDS[3:-1]}
        out[key] = channel.PathSet(**cols, bounce_count=[int(r["bounce_count"]) for r in rows],
                                   length_m=np.asarray(cols["delay_s"]) * channel.C_LIGHT)
    return out


def sense_path(path_dir, cfg=None, out=None):
    """Run dynamic-scatterer detection on a stored path.

    Writes ``dynamic_maps.bin`` and ``report.csv`` to ``out`` (default the
    path directory itself).
    """
    cfg = cfg or ExperimentConfig()
    d = Path(path_dir)
    o = Path(out) if out is not None else d
    o.mkdir(parents=True, exist_ok=True)
    meta = json.loads((d / "meta.json").read_text())
    F, H, W = meta["dims"]
    frames = np.fromfile(d / "frames.bin", dtype="<u2").reshape(F, H, W)
    truth = np.fromfile(d / "truth.bin", dtype="<u2").reshape(F, H, W)
    maps, records = sensing.detect_path(
        frames, cfg.lb_window, cfg.refine_mu, cfg.lb_lags, cfg.lb_alpha,
        truth=truth, dynamic_ids=meta["dynamic_ids"], min_size=cfg.report_min_size)
    maps.astype("<u2").tofile(o / "dynamic_maps.bin")
    rows = [(s, r.class_id, r.instance_key, _fmt(r.q_stat), _fmt(r.threshold),
             "dynamic" if r.is_dynamic else "static",
             "dynamic" if r.truth_dynamic else "static") for s, r in records]
    _write_csv(o / "report.csv", REPORT_FIELDS, rows)
    return maps, records


def _write_path(d, layout, sim, cfg, path_seed, noise_rng, models, res):
    d.mkdir(parents=True, exist_ok=True)
    F = len(sim.states)
    uid = layout.user.instance_id
    with open(d / "frames.bin", "wb") as fc, open(d / "truth.bin", "wb") as ft:
        for frame in sim.frames:
            noisy = scene.inject_label_noise(frame, cfg.p_flip, noise_rng)
            fc.write(noisy.class_grid.astype("<u2").tobytes())
            ft.write(frame.truth_instance_grid.astype("<u2").tobytes())
    pos = sim.trajectory.positions
    _write_csv(d / "trajectory.csv", ("frame", "x", "y", "z"),
               [(f, *map(_fmt, pos[f])) for f in range(F)])
    label_rows, path_rows = [], []
    for f in range(F):
        for b, (ps, t_idx, r_idx, rate) in enumerate(
                label_frame(layout, sim.states[f], pos[f], cfg, models, exclude={uid})):
            label_rows.append((f, b, t_idx, r_idx, _fmt(rate)))
            for i, p in enumerate(ps.paths):
                path_rows.append((f, b, i, *(_fmt(getattr(p, k)) for k in PATH_FIELDS[3:])))
    _write_csv(d / "labels.csv", ("frame", "bs_index", "t_idx", "r_idx", "rate_bps_hz"), label_rows)
    _write_csv(d / "paths.csv", PATH_FIELDS, path_rows)
    _dump_json(d / "meta.json", {
        "dims": [F, *res], "Q": scene.N_CLASSES, "seed": int(path_seed),
        "frame_interval_ms": scene.FRAME_INTERVAL_MS, "p_flip": cfg.p_flip,
        "user_instance": int(uid),
        "dynamic_ids": sorted(int(o.instance_id) for o in layout.dynamic_objects),
        "tx_upa": list(cfg.tx_upa), "rx_upa": list(cfg.rx_upa),
        "bs_positions": [list(p) for p in layout.bs_positions],
        "attempts": int(sim.attempts),
    })
    sense_path(d, cfg)
    return F


def generate_dataset(cfg, mode, out):
    """Write a ``single`` (one layout) or ``multi`` (several layouts) dataset.

    Returns the total number of frames.
    """
    if mode not in ("single", "multi"):
        raise ParameterError("mode must be 'single' or 'multi'")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    scfg = cfg.scene_config()
    models = channel_models(cfg)
    n_envs, n_paths = (cfg.n_source_envs, cfg.paths_per_env) if mode == "multi" else (1, cfg.target_paths)
    res = tuple(cfg.resolution)
    total = 0
    index = []
    for e in range(n_envs):
        env_dir = out / f"env_{e:03d}"
        layout = scene.sample_environment(scfg, substream(cfg.seed, mode, "layout", e))
        (env_dir / "pointcloud").mkdir(parents=True, exist_ok=True)
        _dump_json(env_dir / "layout.json", layout.to_dict())
        cloud_rng = substream(cfg.seed, mode, "cloud", e)
        cloud = scene.sample_point_cloud(layout, cfg.point_density, cloud_rng)
        cloud.points.astype("<f8").tofile(env_dir / "pointcloud" / "points.bin")
        _dump_json(env_dir / "pointcloud" / "meta.json", {
            "n_points": len(cloud), "density_pts_per_m2": cfg.point_density,
            "cube": [[0.0, 0.0, 0.0], [layout.length_m, layout.width_m, layout.height_m]],
            "crossbeam_mode": layout.crossbeam_mode})
        for p in range(n_paths):
            path_rng = substream(cfg.seed, mode, "path", e, p)
            path_seed = derive_seed(substream(cfg.seed, mode, "path-seed", e, p))
            sim = scene.simulate_path(layout, scfg, path_rng, res)
            noise_rng = substream(cfg.seed, mode, "noise", e, p)
            F = _write_path(env_dir / f"path_{p:03d}", layout, sim, cfg, path_seed,
                            noise_rng, models, res)
            index.append({"env": e, "path": p, "frames": F})
            total += F
    (out / "config.txt").write_text(cfg.to_text())
    _dump_json(out / "dataset.json", {"mode": mode, "n_envs": n_envs, "paths": index,
                                      "total_frames": total, "resolution": list(res)})
    return total


# --------------------------------------------------------------------------
# loading

def list_paths(data_dir):
    info = json.loads((Path(data_dir) / "dataset.json").read_text())
    return [(p["env"], p["path"]) for p in info["paths"]]


def env_pseudo_image(data_dir, env, dims):
    d = Path(data_dir) / f"env_{env:03d}" / "pointcloud"
    meta = json.loads((d / "meta.json").read_text())
    pts = np.fromfile(d / "points.bin", dtype="<f8").reshape(-1, 3)
    return sensing.voxelize(pts, meta["cube"], dims)


def read_labels(path):
    """Beam classes per frame, shape ``(F, B)``; class = t_idx * N_r + r_idx."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows


def build_beam_dataset(data_dir, paths, cfg):
    """Windows of every listed path as a :class:`predictor.BeamDataset`."""
    pcfg = cfg.predictor_config()
    data_dir = Path(data_dir)
    envs = sorted({e for e, _ in paths})
    env_index = {e: i for i, e in enumerate(envs)}
    statics = np.stack([predictor.static_input(env_pseudo_image(data_dir, e, pcfg.voxel_dims))
                        for e in envs])
    us, ds, starts, env_ids, labels, sids = [], [], [], [], [], []
    offset = 0
    l, hz = pcfg.window, pcfg.horizon
    n_r = pcfg.n_r
    for e, p in paths:
        d = data_dir / f"env_{e:03d}" / f"path_{p:03d}"
        meta = json.loads((d / "meta.json").read_text())
        F, H, W = meta["dims"]
        dyn = np.fromfile(d / "dynamic_maps.bin", dtype="<u2").reshape(F, H, W)
        traj = np.loadtxt(d / "trajectory.csv", delimiter=",", skiprows=1, ndmin=2)
        lab = read_labels(d / "labels.csv")
        n_bs = int(lab[:, 1].max()) + 1
        cls = np.zeros((F, n_bs), dtype=np.int64)
        cls[lab[:, 0].astype(int), lab[:, 1].astype(int)] = (lab[:, 2] * n_r + lab[:, 3]).astype(np.int64)
        us.append(traj[:, 1:4])
        ds.append(predictor.pool_map(dyn, pcfg.pool))
        s = np.arange(0, F - l - hz + 1, cfg.sample_stride)
        starts.append(offset + s)
        env_ids.append(np.full(len(s), env_index[e]))
        labels.append(cls[s + l - 1 + hz])
        sids.append((e * 1000 + p) * 100000 + s)
        offset += F
    return predictor.BeamDataset(
        np.concatenate(us), np.concatenate(ds), statics, np.concatenate(starts),
        np.concatenate(env_ids), np.concatenate(labels), l, np.concatenate(sids))


def split_paths(paths, fraction, seed, key):
    """Shuffle paths and cut off ``round(fraction * n)`` of them (at least one)."""
    order = substream(seed, "split", key).permutation(len(paths))
    n_first = min(len(paths), max(1, int(round(fraction * len(paths)))))
    first = sorted(paths[i] for i in order[:n_first])
    rest = sorted(paths[i] for i in order[n_first:])
    return first, rest


# --------------------------------------------------------------------------
# experiments

@dataclass
class RunReport:
    arms: dict = field(default_factory=dict)           # arm -> list of history rows
    final: dict = field(default_factory=dict)          # arm -> {top1, top5, top10, loss}
    epochs_to_threshold: dict = field(default_factory=dict)
    threshold: float = float("nan")
    speedup: float = float("nan")
    info: dict = field(default_factory=dict)


def epochs_to_threshold(rows, split, threshold):
    """First epoch whose ``split`` Top-1 reaches ``threshold`` (None if never)."""
    for r in rows:
        if r["split"] == split and r["top1"] >= threshold - 1e-12:
            return int(r["epoch"])
    return None


def run_pretrain(cfg, data_dir, out=None):
    """Pre-train on a multi-environment dataset; keeps the best-validation model."""
    paths = list_paths(data_dir)
    train_p, val_p = split_paths(paths, cfg.train_split, cfg.seed, "pretrain")
    train_ds = build_beam_dataset(data_dir, train_p, cfg)
    val_ds = build_beam_dataset(data_dir, val_p, cfg) if val_p else None
    pcfg = predictor.fit_location(cfg.predictor_config(), train_ds.frame_user)
    init = predictor.init_params(pcfg, derive_seed(substream(cfg.seed, "pretrain-init")))
    tcfg = cfg.train_config(cfg.pretrain_epochs, derive_seed(substream(cfg.seed, "pretrain-sgd")))
    _, hist = predictor.train(init, train_ds, tcfg, val_ds)
    best = hist.best_params
    split = "val" if val_ds is not None else "train"
    final = predictor.evaluate(best, val_ds if val_ds is not None else train_ds)
    report = RunReport(
        arms={"pretrain": hist.rows}, final={"pretrain": final},
        info={"best_epoch": hist.best_epoch, "best_top1": hist.best_top1, "eval_split": split,
              "train_paths": [list(p) for p in train_p], "val_paths": [list(p) for p in val_p],
              "n_train": len(train_ds), "n_val": 0 if val_ds is None else len(val_ds)})
    if out is not None:
        predictor.save_model(best, Path(out) / "model")
        emit_report(report, out)
    return best, report


def scratch_model(cfg, pcfg, tune_ds):
    """Freshly initialized model for the from-scratch arm.

    It sees only target data, so its location statistics come from there.
    """
    return predictor.init_params(predictor.fit_location(pcfg, tune_ds.frame_user),
                                 derive_seed(substream(cfg.seed, "scratch-init")))


def run_transfer(cfg, pretrained, data_dir, out=None, freeze_spec=predictor.DEFAULT_FREEZE,
                 fraction=None):
    """Fine-tune ``pretrained`` and train from scratch on the same target data.

    A ``fraction`` of the target paths is used for tuning and the rest for
    testing; with nothing left over both arms are scored on the tuning set.
    """
    fraction = cfg.finetune_fraction if fraction is None else fraction
    paths = list_paths(data_dir)
    tune_p, test_p = split_paths(paths, fraction, cfg.seed, "transfer")
    tune_ds = build_beam_dataset(data_dir, tune_p, cfg)
    test_ds = build_beam_dataset(data_dir, test_p, cfg) if test_p else tune_ds
    split = "test" if test_p else "tune"
    tcfg = cfg.train_config(cfg.transfer_epochs, derive_seed(substream(cfg.seed, "transfer-sgd")))
    scratch_init = scratch_model(cfg, pretrained.config, tune_ds)

    tuned, h_ft = predictor.fine_tune(pretrained, tune_ds, freeze_spec, tcfg, test_ds)
    scratch, h_sc = predictor.train(scratch_init, tune_ds, tcfg, test_ds)
    rows = {"finetune": _rename(h_ft.rows, split), "scratch": _rename(h_sc.rows, split)}
    final = {"finetune": predictor.evaluate(tuned, test_ds),
             "scratch": predictor.evaluate(scratch, test_ds)}
    threshold = final["scratch"]["top1"]
    ett = {arm: epochs_to_threshold(rows[arm], split, threshold) for arm in rows}
    speedup = (ett["scratch"] / ett["finetune"]) if ett["finetune"] else float("nan")
    sid_tune = set(tune_ds.sample_id.tolist())
    sid_test = set(test_ds.sample_id.tolist()) if test_p else set()
    report = RunReport(rows, final, ett, threshold, speedup, info={
        "eval_split": split, "tune_paths": [list(p) for p in tune_p],
        "test_paths": [list(p) for p in test_p], "n_tune": len(tune_ds),
        "n_test": len(test_ds) if test_p else 0,
        "split_overlap": len(sid_tune & sid_test),
        "frozen": sorted(freeze_spec),
        "frozen_checksum_before": pretrained.checksum(freeze_spec),
        "frozen_checksum_after": tuned.checksum(freeze_spec)})
    if out is not None:
        predictor.save_model(tuned, Path(out) / "model")
        emit_report(report, out)
    return report, tuned, scratch


def _rename(rows, split):
    return [dict(r, split=split) if r["split"] == "val" else dict(r) for r in rows]


def run_pipeline(cfg, out):
    """Generate both datasets, pre-train, run the transfer comparison."""
    out = Path(out)
    generate_dataset(cfg, "multi", out / "source")
    generate_dataset(cfg, "single", out / "target")
    best, pre = run_pretrain(cfg, out / "source", out / "pretrain")
    report, _, _ = run_transfer(cfg, best, out / "target", out / "transfer")
    return pre, report


# --------------------------------------------------------------------------
# report files

def emit_report(report, out):
    """Write ``<arm>/history.csv`` for every arm and ``summary.json``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for arm, rows in report.arms.items():
        (out / arm).mkdir(exist_ok=True)
        _write_csv(out / arm / "history.csv", HISTORY_FIELDS,
                   [[_fmt(r[k]) for k in HISTORY_FIELDS] for r in rows])
    _dump_json(out / "summary.json", {
        "final": report.final, "epochs_to_threshold": report.epochs_to_threshold,
        "threshold": _json_float(report.threshold), "speedup": _json_float(report.speedup),
        "arms": sorted(report.arms), "info": report.info})


def _json_float(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def parse_report(out):
    out = Path(out)
    s = json.loads((out / "summary.json").read_text())
    arms = {}
    for arm in s["arms"]:
        with open(out / arm / "history.csv") as fh:
            arms[arm] = [{"epoch": int(r["epoch"]), "split": r["split"],
                          **{k: float(r[k]) for k in HISTORY_FIELDS[2:]}}
                         for r in csv.DictReader(fh)]
    nan = float("nan")
    return RunReport(arms, s["final"], s["epochs_to_threshold"],
                     nan if s["threshold"] is None else s["threshold"],
                     nan if s["speedup"] is None else s["speedup"], s["info"])
