"""Experiment configuration read from plain ``key = value`` files.

Lines starting with ``#`` or ``;`` are comments.  Tuples are written as
comma-separated values, e.g. ``resolution = 180, 270``.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigurationError

_SECTION = "experiment"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 20240611
    n_source_envs: int = 4
    paths_per_env: int = 4
    target_paths: int = 10
    frame_min: int = 350
    frame_max: int = 400
    train_split: float = 0.8
    val_split: float = 0.2
    finetune_fraction: float = 0.3
    resolution: tuple = (180, 270)
    p_flip: float = 0.04
    point_density: float = 2.0
    lb_window: int = 16
    lb_lags: int = 4
    lb_alpha: float = 0.15
    refine_mu: float = 0.1
    report_min_size: int = 8
    tx_upa: tuple = (8, 4)
    rx_upa: tuple = (4, 2)
    max_bounce: int = 1
    r_max: int = 25
    horizon: int = 8
    sample_stride: int = 4
    pool: tuple = (18, 27)
    voxel_dims: tuple = (31, 21, 11)
    hidden: int = 128
    lr: float = 0.05
    batch: int = 32
    pretrain_epochs: int = 30
    transfer_epochs: int = 40

    def __post_init__(self):
        if abs(self.train_split + self.val_split - 1.0) > 1e-9:
            raise ConfigurationError("train_split + val_split must equal 1")
        if not 0.0 < self.finetune_fraction <= 1.0:
            raise ConfigurationError("finetune_fraction must lie in (0, 1]")
        if self.frame_min > self.frame_max:
            raise ConfigurationError("frame_min exceeds frame_max")
        if self.lb_window < self.lb_lags + 2:
            raise ConfigurationError("lb_window must be at least lb_lags + 2")

    # -- conversions -------------------------------------------------------

    def scene_config(self):
        from .scene import SceneConfig
        return SceneConfig(frame_band=(self.frame_min, self.frame_max))

    def predictor_config(self):
        from .predictor import PredictorConfig
        return PredictorConfig(
            n_t=self.tx_upa[0] * self.tx_upa[1], n_r=self.rx_upa[0] * self.rx_upa[1],
            window=self.lb_window, horizon=self.horizon, pool=tuple(self.pool),
            voxel_dims=tuple(self.voxel_dims), hidden=self.hidden)

    def train_config(self, epochs, seed):
        from .predictor import TrainConfig
        return TrainConfig(lr=self.lr, epochs=epochs, batch=self.batch, seed=seed)

    def with_overrides(self, **kw):
        return replace(self, **kw)

    # -- text format -------------------------------------------------------

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            else:
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(f"[{_SECTION}]\n" + text)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse config: {exc}") from exc
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        kw = {}
        for key, raw in parser[_SECTION].items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            kw[key] = _parse_value(raw, getattr(defaults, key), key)
        return cls(**kw)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text())


def _parse_value(raw, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.strip("()[]").split(",") if x.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in items)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
    return raw
