"""Run configuration: one flat key=value namespace covering world synthesis,
model shape, training schedule and evaluation, with the full-scale defaults
baked in. Any key can be overridden from a plain-text config file or
command-line ``--set key=value`` pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import gscm
from .htransformer import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # world
    n_scatterers: int = 26
    fc_ghz: float = 2.4
    delta2d: float = 1.0
    h_rx: float = 1.5
    tx_x: float = 0.0
    tx_y: float = 0.0
    tx_z: float = 25.0
    bound_x_min: float = -550.0
    bound_x_max: float = 500.0
    bound_y_min: float = -550.0
    bound_y_max: float = 500.0
    bound_z_min: float = 0.0
    bound_z_max: float = 30.0
    start_x: float = 100.0
    start_y: float = 100.0
    heading_count: int = 50
    hold_min: int = 100
    hold_max: int = 500
    max_d2d: float = 600.0
    steps: int = 125000
    trajectories: int = 1
    # model
    d_model: int = 512
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 512
    rank: int = 64
    bilstm_hidden: int = 128
    bilstm_layers: int = 2
    dropout: float = 0.1
    lag: int = 100
    window: int = 200
    # training
    mode: str = "gen"
    epochs: int = 250
    batch_size: int = 256
    lr: float = 5e-5
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    weight_decay: float = 0.01
    beta: float = 1.0
    stride: int = 1
    train_frac: float = 0.8
    checkpoint_every: int = 0
    alpha_max: float = 1e12
    # evaluation
    cdf_grid_size: int = 512
    cdf_floor_db: float = -120.0
    eval_stride: int = 0  # 0: reuse the training stride
    seed: int = 0

    def tx(self):
        return (self.tx_x, self.tx_y, self.tx_z)

    def rx_start(self):
        return (self.start_x, self.start_y, self.h_rx)

    def bounds(self):
        return ((self.bound_x_min, self.bound_x_max),
                (self.bound_y_min, self.bound_y_max),
                (self.bound_z_min, self.bound_z_max))

    def feature_dim(self):
        return gscm.feature_dim(self.n_scatterers)

    def model_config(self):
        return ModelConfig(feature_dim=self.feature_dim(), lag=self.lag,
                           window=self.window, d_model=self.d_model,
                           heads=self.heads, enc_layers=self.enc_layers,
                           dec_layers=self.dec_layers, ffn_dim=self.ffn_dim,
                           rank=self.rank, bilstm_hidden=self.bilstm_hidden,
                           bilstm_layers=self.bilstm_layers,
                           dropout=self.dropout)

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def validate(self):
        if self.n_scatterers < 1:
            raise ConfigError("n_scatterers must be >= 1")
        if self.fc_ghz <= 0 or self.delta2d <= 0:
            raise ConfigError("fc_ghz and delta2d must be positive")
        for lo, hi in self.bounds():
            if lo > hi:
                raise ConfigError("invalid bound range [%g, %g]" % (lo, hi))
        if self.heading_count < 2:
            raise ConfigError("heading_count must be >= 2")
        if not (1 <= self.hold_min <= self.hold_max):
            raise ConfigError("hold range must satisfy 1 <= min <= max")
        if self.steps < 1 or self.trajectories < 1:
            raise ConfigError("steps and trajectories must be >= 1")
        if self.mode not in ("gen", "pred"):
            raise ConfigError("mode must be gen or pred")
        if not (0.0 < self.train_frac < 1.0):
            raise ConfigError("train_frac must lie in (0, 1)")
        if self.stride < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("stride, epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.beta <= 0:
            raise ConfigError("lr and beta must be positive")
        if self.cdf_grid_size < 2:
            raise ConfigError("cdf_grid_size must be >= 2")
        try:
            self.model_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _convert(key, raw, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError("key %r: cannot parse %r as %s"
                          % (key, raw, kind.__name__)) from exc


def apply_overrides(cfg, pairs):
    """Apply ``key=value`` strings onto a RunConfig in place."""
    fields = cfg.__dataclass_fields__
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError("override %r is not key=value" % pair)
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in fields:
            raise ConfigError("unknown config key %r" % key)
        setattr(cfg, key, _convert(key, raw.strip(), type(getattr(cfg, key))))
    return cfg


def load_config(path, base=None):
    """Read a key=value config file ('#' starts a comment)."""
    cfg = base if base is not None else RunConfig()
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("%s:%d: expected key=value" % (path, lineno))
            pairs.append(line)
    return apply_overrides(cfg, pairs)


def write_config(cfg, path):
    with open(path, "w") as f:
        for key in cfg.__dataclass_fields__:
            f.write("%s=%s\n" % (key, getattr(cfg, key)))


def desk_preset():
    """Small-world preset for CPU-scale smoke training.

    2000 samples as 10 independent trajectories so the held-out trajectories
    are distributionally representative; step and heading-hold scales are
    shrunk together, keeping the 50-250 m heading segments of the full-scale
    walk while each generation window spans several random turns.
    """
    cfg = RunConfig()
    cfg.n_scatterers = 5
    cfg.steps = 200
    cfg.trajectories = 10
    cfg.delta2d = 5.0
    cfg.hold_min = 10
    cfg.hold_max = 50
    cfg.d_model = 32
    cfg.heads = 2
    cfg.enc_layers = 1
    cfg.dec_layers = 1
    cfg.ffn_dim = 32
    cfg.rank = 8
    cfg.bilstm_hidden = 16
    cfg.bilstm_layers = 1
    cfg.dropout = 0.0
    cfg.lag = 20
    cfg.window = 10
    cfg.epochs = 30
    cfg.batch_size = 64
    cfg.lr = 1.5e-3
    cfg.stride = 2
    return cfg
