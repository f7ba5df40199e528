"""Feature scaling, window extraction, the statistics-aided loss, and the
optimization loop.

The loss compares per-step channel statistics (delay spread, four angular
spreads, per-path gains) between the true and generated window. Statistics
are computed on original scales: the scaled feature rows are mapped back
through the fitted scaler inside the autodiff graph, delays converted to
seconds and angles to radians, so gradients reach the model through the
statistic definitions themselves. The predictive counterpart is a plain
elementwise smooth-L1 on the scaled features.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import adtensor as ad
from . import chanstats, gscm
from .htransformer import ModelConfig, hybrid_forward, init_params

# Smoothing floors inside the loss-side spread computations: sqrt(S^2 + eps)
# bounds the 1/S gradient blow-up when a generated window degenerates toward
# zero spread. 50 ns / 1e-3 floors are far below on-distribution spreads and
# apply identically to the true and generated side of every comparison.
DELAY_SPREAD_EPS = (5e-8) ** 2
ANGULAR_SPREAD_EPS = 1e-6


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# ---------------------------------------------------------------------------
# customized min-max scaler

@dataclass
class ScalerSpec:
    """Per-feature min/max scaling, except fixed features divided by N.

    Fixed features (RX height and the path-id columns) are constant by
    construction; dividing them by the path count keeps them nonzero so the
    model can tell the per-path feature blocks apart.
    """

    mins: np.ndarray
    maxs: np.ndarray
    fixed_mask: np.ndarray
    n_paths: int

    @property
    def span(self):
        out = np.where(self.fixed_mask, float(self.n_paths),
                       self.maxs - self.mins)
        return out

    @property
    def offset(self):
        return np.where(self.fixed_mask, 0.0, self.mins)

    def scale(self, rows):
        return (np.asarray(rows, dtype=np.float64) - self.offset) / self.span

    def unscale(self, rows):
        return np.asarray(rows, dtype=np.float64) * self.span + self.offset


def fit_scaler(train_rows, n_paths, fixed_cols=None):
    """Record per-feature extrema over the training rows.

    Non-fixed features that are constant cannot be min-max scaled and are
    rejected with their column index.
    """
    rows = np.asarray(train_rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("training set must be a nonempty row matrix")
    n_feat = rows.shape[1]
    if fixed_cols is None:
        fixed_cols = gscm.fixed_feature_cols(n_paths)
    fixed_mask = np.zeros(n_feat, dtype=bool)
    fixed_mask[np.asarray(fixed_cols, dtype=int)] = True
    mins = rows.min(axis=0)
    maxs = rows.max(axis=0)
    bad = np.where(~fixed_mask & (maxs <= mins))[0]
    if bad.size:
        raise ValueError("constant non-fixed feature at column %d" % bad[0])
    return ScalerSpec(mins=mins, maxs=maxs, fixed_mask=fixed_mask,
                      n_paths=n_paths)


# ---------------------------------------------------------------------------
# windowing

@dataclass(frozen=True)
class WindowedExample:
    traj_id: int
    start: int  # absolute row index of the first history row


def make_windows(segments, lag, window, stride=1):
    """Sliding (history, target) windows inside each row segment.

    Windows never straddle segment boundaries; segments shorter than
    lag + window contribute nothing.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    for traj_id, (lo, hi) in enumerate(segments):
        last_start = hi - (lag + window)
        for s in range(lo, last_start + 1, stride):
            out.append(WindowedExample(traj_id=traj_id, start=s))
    return out


def split_ranges(dataset, train_frac):
    """Train/eval split along trajectory boundaries when possible.

    Multiple trajectories are assigned whole; a single trajectory is split
    at the fractional row index (windows still never straddle the cut).
    """
    ranges = dataset.traj_ranges()
    total = dataset.rows.shape[0]
    if len(ranges) > 1:
        cut_rows = train_frac * total
        acc, k = 0, 0
        for i, (lo, hi) in enumerate(ranges):
            if acc + (hi - lo) / 2.0 <= cut_rows:
                acc += hi - lo
                k = i + 1
        k = max(1, min(k, len(ranges) - 1))
        return ranges[:k], ranges[k:]
    lo, hi = ranges[0]
    cut = lo + int(round((hi - lo) * train_frac))
    cut = max(lo, min(cut, hi))
    return [(lo, cut)], [(cut, hi)]


def window_batches(windows, batch_size):
    for i in range(0, len(windows), batch_size):
        yield windows[i:i + batch_size]


def gather_window_arrays(rows_scaled, batch, lag, window):
    hist = np.stack([rows_scaled[w.start:w.start + lag] for w in batch])
    targ = np.stack([rows_scaled[w.start + lag:w.start + lag + window]
                     for w in batch])
    return hist, targ


# ---------------------------------------------------------------------------
# losses

def smooth_l1(y, yhat, beta):
    """Scalar/array smooth-L1: quadratic inside |y - yhat| < beta."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = np.asarray(y, dtype=np.float64) - np.asarray(yhat, dtype=np.float64)
    absd = np.abs(d)
    out = np.where(absd < beta, 0.5 * d * d / beta, absd - 0.5 * beta)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LossWeights:
    alpha_tau: float
    alpha_az: float
    alpha_zn: float
    alpha_g: float

    def to_dict(self):
        return {"alpha_tau": self.alpha_tau, "alpha_az": self.alpha_az,
                "alpha_zn": self.alpha_zn, "alpha_g": self.alpha_g}

    @classmethod
    def from_dict(cls, d):
        return cls(alpha_tau=d["alpha_tau"], alpha_az=d["alpha_az"],
                   alpha_zn=d["alpha_zn"], alpha_g=d["alpha_g"])


def _reciprocal_mean(values, alpha_max):
    m = float(np.mean(np.abs(values)))
    if m <= 0.0:
        return alpha_max
    return min(1.0 / m, alpha_max)


def calibrate_weights(bundles, alpha_max=1e12):
    """Reciprocal-of-mean weights so alpha * (typical statistic) is near 1."""
    if not bundles:
        raise ValueError("need at least one statistics bundle")
    delay = [b.delay_spread for b in bundles]
    az = [b.az_dod_spread for b in bundles] + [b.az_doa_spread for b in bundles]
    zn = [b.zn_dod_spread for b in bundles] + [b.zn_doa_spread for b in bundles]
    gains = np.concatenate([b.gains_db for b in bundles])
    return LossWeights(alpha_tau=_reciprocal_mean(delay, alpha_max),
                       alpha_az=_reciprocal_mean(az, alpha_max),
                       alpha_zn=_reciprocal_mean(zn, alpha_max),
                       alpha_g=_reciprocal_mean(gains, alpha_max))


class NonFiniteStat(RuntimeError):
    def __init__(self, stat_name):
        super().__init__("non-finite intermediate in statistic %r" % stat_name)
        self.stat_name = stat_name


def _angular_spread_tensor(raw, cols, weights_t):
    ang = ad.scale(ad.gather_last(raw, cols), math.pi / 180.0)
    c, s = ad.cos(ang), ad.sin(ang)
    mu_c = ad.sum_axis(ad.mul(weights_t, c), -1, keepdims=True)
    mu_s = ad.sum_axis(ad.mul(weights_t, s), -1, keepdims=True)
    dev2 = ad.add(ad.square(ad.sub(c, mu_c)), ad.square(ad.sub(s, mu_s)))
    return ad.sqrt(ad.shift(ad.sum_axis(ad.mul(weights_t, dev2), -1,
                                        keepdims=False), ANGULAR_SPREAD_EPS))


def window_stat_tensors(x_scaled, scaler):
    """Differentiable per-step statistics of a scaled (b,P,F) window.

    Returns tensors: the five spreads shaped (b,P) and per-path gains in dB
    shaped (b,P,N). Unscaling and unit conversion happen inside the graph.
    """
    n = scaler.n_paths
    span = ad.const(scaler.span[None, None, :])
    off = ad.const(scaler.offset[None, None, :])
    raw = ad.add(ad.mul(x_scaled, span), off)
    gains = ad.gather_last(raw, gscm.gain_cols(n))
    powers = ad.db_to_linear(gains)
    total = ad.sum_axis(powers, -1, keepdims=True)
    w = ad.div(powers, total)
    tau = ad.scale(ad.gather_last(raw, gscm.delay_cols(n)), 1e-9)
    tau_bar = ad.sum_axis(ad.mul(w, tau), -1, keepdims=True)
    dev = ad.sub(tau, tau_bar)
    out = {
        "delay_spread": ad.sqrt(ad.shift(
            ad.sum_axis(ad.mul(w, ad.square(dev)), -1, keepdims=False),
            DELAY_SPREAD_EPS)),
        "az_dod_spread": _angular_spread_tensor(raw, gscm.az_dod_cols(n), w),
        "zn_dod_spread": _angular_spread_tensor(raw, gscm.zn_dod_cols(n), w),
        "az_doa_spread": _angular_spread_tensor(raw, gscm.az_doa_cols(n), w),
        "zn_doa_spread": _angular_spread_tensor(raw, gscm.zn_doa_cols(n), w),
        "gains_db": gains,
    }
    return out


def combine_stat_losses(gen_stats, true_stats, weights, beta):
    """Weighted smooth-L1 between statistic tensors and their true values.

    ``gen_stats`` holds tensors, ``true_stats`` plain arrays of matching
    shape; each term is averaged over its entries (steps, batch, paths).
    The weights normalize the statistic values entering the smooth-L1, so a
    typical statistic maps to about 1 and the beta threshold separates the
    quadratic and linear branches at a comparable scale for every group.
    """
    def term(name, alpha):
        t = gen_stats[name]
        if not np.isfinite(t.data).all():
            raise NonFiniteStat(name)
        return ad.mean_all(ad.smooth_l1(
            ad.scale(t, alpha), ad.const(alpha * true_stats[name]), beta))

    loss = term("delay_spread", weights.alpha_tau)
    loss = ad.add(loss, ad.add(term("az_dod_spread", weights.alpha_az),
                               term("az_doa_spread", weights.alpha_az)))
    loss = ad.add(loss, ad.add(term("zn_dod_spread", weights.alpha_zn),
                               term("zn_doa_spread", weights.alpha_zn)))
    loss = ad.add(loss, term("gains_db", weights.alpha_g))
    return loss


def stats_loss(true_scaled, gen_window, scaler, weights, beta):
    """Statistics-aided loss between a true window and a generated tensor.

    True-side statistics are evaluated through the identical computation and
    detached, so identical windows give exactly zero loss.
    """
    gen_stats = window_stat_tensors(gen_window, scaler)
    true_stats_t = window_stat_tensors(ad.const(np.asarray(true_scaled)), scaler)
    true_stats = {k: t.data for k, t in true_stats_t.items()}
    return combine_stat_losses(gen_stats, true_stats, weights, beta)


def predictive_loss(true_scaled, gen_window, beta):
    """Mean elementwise smooth-L1 over every scaled feature entry."""
    target = ad.const(np.asarray(true_scaled, dtype=np.float64))
    if target.data.shape != gen_window.data.shape:
        raise ValueError("window shapes differ: %s vs %s"
                         % (target.data.shape, gen_window.data.shape))
    return ad.mean_all(ad.smooth_l1(gen_window, target, beta))


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def clip_grad_norm(self, max_norm):
        """Rescale all gradients so their global L2 norm is at most max_norm."""
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        norm = math.sqrt(total)
        if norm > max_norm > 0:
            factor = max_norm / norm
            for t in self.params.values():
                if t.grad is not None:
                    t.grad = t.grad * factor
        return norm

    def step(self, lr):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            # decay applied as a multiplicative factor so a zero-gradient step
            # shrinks parameters by exactly (1 - lr * weight_decay)
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * update

    def state_arrays(self):
        out = {}
        for k in self.params:
            out["opt.m." + k] = self.m[k]
            out["opt.v." + k] = self.v[k]
        return out

    def load_state(self, arrays, t):
        for k in self.params:
            self.m[k] = arrays["opt.m." + k].copy()
            self.v[k] = arrays["opt.v." + k].copy()
        self.t = t


def learning_rate(lr0, epoch, decay=0.9, every=10):
    """Schedule: the rate shrinks by the decay factor every ``every`` epochs."""
    return lr0 * decay ** (epoch // every)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainSettings:
    mode: str = "gen"  # "gen": statistics-aided loss; "pred": plain smooth-L1
    epochs: int = 250
    batch_size: int = 256
    lr: float = 5e-5
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    weight_decay: float = 0.01
    beta: float = 1.0
    stride: int = 1
    train_frac: float = 0.8
    seed: int = 0
    checkpoint_every: int = 0  # epochs between periodic saves; 0 = final only
    alpha_max: float = 1e12
    dropout: float = 0.1
    grad_clip: float = 0.0  # global grad-norm cap; 0 disables clipping

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class TrainResult:
    params: dict
    scaler: ScalerSpec
    weights: LossWeights
    trace: list  # (epoch, mean_loss, lr)
    checkpoint_path: str
    model_cfg: ModelConfig


def _checkpoint_tensors(params, scaler, opt):
    tensors = dict(params)
    tensors["scaler.mins"] = scaler.mins
    tensors["scaler.maxs"] = scaler.maxs
    tensors["scaler.fixed"] = scaler.fixed_mask.astype(np.float64)
    tensors.update(opt.state_arrays())
    return tensors


def save_train_checkpoint(path, params, scaler, opt, model_cfg, settings,
                          weights, epoch, rng):
    meta = {
        "kind": "ddgen-train",
        "model": model_cfg.to_dict(),
        "settings": settings.to_dict(),
        "weights": weights.to_dict() if weights is not None else None,
        "epoch": epoch,
        "adam_t": opt.t,
        "rng_state": rng.bit_generator.state,
        "n_paths": scaler.n_paths,
    }
    ad.save_checkpoint(path, _checkpoint_tensors(params, scaler, opt), meta)


def load_train_checkpoint(path):
    """Returns (params dict of Tensors, ScalerSpec, opt arrays, meta)."""
    arrays, meta = ad.load_checkpoint(path)
    params = {}
    opt_arrays = {}
    scaler_fields = {}
    for name, arr in arrays.items():
        if name.startswith("opt."):
            opt_arrays[name] = arr
        elif name.startswith("scaler."):
            scaler_fields[name.split(".", 1)[1]] = arr
        else:
            params[name] = ad.tensor(arr)
    scaler = ScalerSpec(mins=scaler_fields["mins"], maxs=scaler_fields["maxs"],
                        fixed_mask=scaler_fields["fixed"].astype(bool),
                        n_paths=int(meta["n_paths"]))
    return params, scaler, opt_arrays, meta


def train(dataset, model_cfg, settings, checkpoint_path, resume_from=None):
    """Run the optimization loop and write the final checkpoint.

    Deterministic for a fixed (dataset, settings) pair: initialization,
    batch shuffling and dropout all derive from settings.seed. A non-finite
    batch loss aborts with the last periodic checkpoint, if any.
    """
    if settings.mode not in ("gen", "pred"):
        raise ValueError("mode must be 'gen' or 'pred'")
    model_cfg.validate()
    train_ranges, _ = split_ranges(dataset, settings.train_frac)
    train_rows = np.vstack([dataset.rows[lo:hi] for lo, hi in train_ranges])
    if resume_from is not None:
        params, scaler, opt_arrays, meta = load_train_checkpoint(resume_from)
        weights = (LossWeights.from_dict(meta["weights"])
                   if meta["weights"] else None)
        opt = AdamW(params, weight_decay=settings.weight_decay)
        opt.load_state(opt_arrays, meta["adam_t"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        start_epoch = meta["epoch"]
    else:
        ss = np.random.SeedSequence(settings.seed)
        init_seed, loop_seed = [int(s) for s in
                                ss.generate_state(2, dtype=np.uint64)]
        params = init_params(model_cfg, seed=init_seed)
        scaler = fit_scaler(train_rows, dataset.n_paths)
        weights = None
        if settings.mode == "gen":
            bundles = [chanstats.stats_from_row(r, dataset.n_paths)
                       for r in train_rows]
            weights = calibrate_weights(bundles, settings.alpha_max)
        opt = AdamW(params, weight_decay=settings.weight_decay)
        rng = np.random.default_rng(loop_seed)
        start_epoch = 0

    rows_scaled = scaler.scale(dataset.rows)
    windows = make_windows(train_ranges, model_cfg.lag, model_cfg.window,
                           settings.stride)
    if not windows:
        raise ValueError("training split too short for lag=%d window=%d"
                         % (model_cfg.lag, model_cfg.window))
    model_cfg = ModelConfig(**{**model_cfg.to_dict(),
                               "dropout": settings.dropout})
    trace = []
    last_good = None
    for epoch in range(start_epoch, settings.epochs):
        lr = learning_rate(settings.lr, epoch, settings.lr_decay,
                           settings.lr_decay_every)
        order = rng.permutation(len(windows))
        total_loss = 0.0
        for batch_idx in window_batches(order, settings.batch_size):
            batch = [windows[i] for i in batch_idx]
            hist, targ = gather_window_arrays(rows_scaled, batch,
                                              model_cfg.lag, model_cfg.window)
            out = hybrid_forward(hist, model_cfg, params, training=True,
                                 dropout_rng=rng)
            try:
                if settings.mode == "gen":
                    loss = stats_loss(targ, out, scaler, weights,
                                      settings.beta)
                else:
                    loss = predictive_loss(targ, out, settings.beta)
            except NonFiniteStat as exc:
                raise TrainingDiverged(
                    "%s at epoch %d" % (exc, epoch + 1), last_good) from exc
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    "non-finite loss at epoch %d" % (epoch + 1), last_good)
            opt.zero_grad()
            loss.backward()
            if settings.grad_clip > 0:
                opt.clip_grad_norm(settings.grad_clip)
            opt.step(lr)
            total_loss += loss_val * len(batch)
        mean_loss = total_loss / len(windows)
        trace.append((epoch + 1, mean_loss, lr))
        if (settings.checkpoint_every and
                (epoch + 1) % settings.checkpoint_every == 0):
            save_train_checkpoint(checkpoint_path, params, scaler, opt,
                                  model_cfg, settings, weights, epoch + 1, rng)
            last_good = checkpoint_path
    save_train_checkpoint(checkpoint_path, params, scaler, opt, model_cfg,
                          settings, weights, settings.epochs, rng)
    return TrainResult(params=params, scaler=scaler, weights=weights,
                       trace=trace, checkpoint_path=checkpoint_path,
                       model_cfg=model_cfg)


def write_trace(path, trace, config_snapshot=None):
    """Loss trace as numeric text rows; identical runs give identical bytes."""
    import json
    lines = ["# ddgen loss trace v1"]
    if config_snapshot is not None:
        lines.append("# config: %s" % json.dumps(config_snapshot,
                                                 sort_keys=True))
    lines.append("# columns: epoch mean_loss lr")
    for epoch, loss, lr in trace:
        lines.append("%d %.17g %.17g" % (epoch, loss, lr))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# evaluation support

EVAL_STATS = chanstats.STAT_NAMES + ("mpc_power",)


def collect_window_stats(rows, n_paths):
    """Pool per-row spread statistics and per-path gains from raw rows."""
    pools = {name: [] for name in EVAL_STATS}
    for row in rows:
        b = chanstats.stats_from_row(row, n_paths)
        pools["delay_spread"].append(b.delay_spread)
        pools["az_dod_spread"].append(b.az_dod_spread)
        pools["zn_dod_spread"].append(b.zn_dod_spread)
        pools["az_doa_spread"].append(b.az_doa_spread)
        pools["zn_doa_spread"].append(b.zn_doa_spread)
        pools["mpc_power"].extend(b.gains_db)
    return {k: np.asarray(v) for k, v in pools.items()}


def evaluate_model(dataset, model_cfg, params, scaler, ranges, stride=1,
                   batch_size=64):
    """Generate windows over the eval ranges and pool statistics.

    Returns (true_pools, gen_pools): per-statistic sample arrays pooled over
    every evaluated window and step. Ranges too short for one window are
    skipped with a warning.
    """
    usable = []
    for rng_pair in ranges:
        lo, hi = rng_pair
        if hi - lo < model_cfg.lag + model_cfg.window:
            warnings.warn("range [%d,%d) shorter than lag+window; skipped"
                          % (lo, hi))
            continue
        usable.append(rng_pair)
    windows = make_windows(usable, model_cfg.lag, model_cfg.window, stride)
    if not windows:
        raise ValueError("no evaluable windows in the given ranges")
    rows_scaled = scaler.scale(dataset.rows)
    true_rows = []
    gen_rows = []
    for batch in window_batches(windows, batch_size):
        hist, _ = gather_window_arrays(rows_scaled, batch, model_cfg.lag,
                                       model_cfg.window)
        out = hybrid_forward(hist, model_cfg, params, training=False)
        gen_raw = scaler.unscale(out.data)
        for bi, w in enumerate(batch):
            t0 = w.start + model_cfg.lag
            true_rows.append(dataset.rows[t0:t0 + model_cfg.window])
            gen_rows.append(gen_raw[bi])
    true_pool = collect_window_stats(np.vstack(true_rows), dataset.n_paths)
    gen_pool = collect_window_stats(np.vstack(gen_rows), dataset.n_paths)
    return true_pool, gen_pool


def cdf_distance_report(true_pools, gen_pools, grid_size=512,
                        floor_db=chanstats.CDF_FLOOR_DB):
    """Per-statistic CDF MSE (dB) plus the shared-grid CDFs themselves."""
    report = {}
    for name in EVAL_STATS:
        true_cdf, gen_cdf = chanstats.cdf_pair(true_pools[name],
                                               gen_pools[name], grid_size)
        report[name] = {
            "cdf_mse_db": chanstats.cdf_mse_db(true_cdf, gen_cdf, floor_db),
            "grid": true_cdf.grid,
            "true_values": true_cdf.values,
            "gen_values": gen_cdf.values,
        }
    return report
