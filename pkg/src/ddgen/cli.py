"""Command-line orchestration: dataset generation, training, evaluation,
CDF export and distance tables.

Every command is a pure function of (config, seed, input files); numeric
output files are byte-identical across reruns. Exit codes: 0 success,
1 config error, 2 runtime/divergence, 3 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import chanstats, gscm, trainer
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .htransformer import ModelConfig, init_params, model_summary

OUT_ROOT_ENV = "DDGEN_OUT_ROOT"

# Reference CDF distances (dB) from full-scale statistics-aided training
# runs (lag 100, 125K samples, 250 episodes, 3-run averages). Desk-scale
# runs are not expected to reach these; they are recorded for comparison.
FULL_SCALE_REFERENCE_DB = {
    "delay_spread": {
        (100, 0.5): -52.8885, (100, 1.0): -55.2699, (100, 1.5): -54.5774,
        (200, 0.5): -49.5570, (200, 1.0): -53.9503, (200, 1.5): -52.1240,
        (300, 0.5): -47.0285, (300, 1.0): -48.6410, (300, 1.5): -49.2194,
        (400, 0.5): -41.5335, (400, 1.0): -44.3583, (400, 1.5): -44.3706,
        (500, 0.5): -42.3484, (500, 1.0): -33.5980, (500, 1.5): -41.4754,
        (600, 0.5): -38.7279, (600, 1.0): -40.1955, (600, 1.5): -39.7902,
    },
    "azimuth_spread": {
        (100, 0.5): -42.0474, (100, 1.0): -38.7102, (100, 1.5): -38.5716,
        (200, 0.5): -42.7066, (200, 1.0): -39.2833, (200, 1.5): -37.2502,
        (300, 0.5): -40.1472, (300, 1.0): -36.3108, (300, 1.5): -31.2296,
        (400, 0.5): -37.8697, (400, 1.0): -30.0874, (400, 1.5): -28.2045,
        (500, 0.5): -33.4387, (500, 1.0): -27.7246, (500, 1.5): -26.1974,
        (600, 0.5): -30.4956, (600, 1.0): -27.5395, (600, 1.5): -24.9633,
    },
    "zenith_spread": {
        (100, 0.5): -35.6576, (100, 1.0): -34.4315, (100, 1.5): -32.2137,
        (200, 0.5): -33.8098, (200, 1.0): -34.5514, (200, 1.5): -34.0743,
        (300, 0.5): -33.1182, (300, 1.0): -30.6249, (300, 1.5): -28.1075,
        (400, 0.5): -32.1355, (400, 1.0): -28.8586, (400, 1.5): -25.9413,
        (500, 0.5): -33.0336, (500, 1.0): -18.5252, (500, 1.5): -23.8947,
        (600, 0.5): -27.7930, (600, 1.0): -21.6128, (600, 1.5): -19.9344,
    },
    "mpc_power": {
        (100, 0.5): -56.3837, (100, 1.0): -57.5637, (100, 1.5): -58.1858,
        (200, 0.5): -53.9518, (200, 1.0): -53.3001, (200, 1.5): -54.2991,
        (300, 0.5): -53.2143, (300, 1.0): -53.1760, (300, 1.5): -51.0421,
        (400, 0.5): -51.4039, (400, 1.0): -48.2488, (400, 1.5): -47.1207,
        (500, 0.5): -48.9298, (500, 1.0): -40.6194, (500, 1.5): -42.5530,
        (600, 0.5): -46.3882, (600, 1.0): -44.8855, (600, 1.5): -41.4754,
    },
}


def _out_path(path):
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _resolve_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    overrides = []
    for flag in ("seed", "steps", "delta2d", "trajectories", "lag", "window",
                 "mode"):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append("%s=%s" % (flag, val))
    overrides.extend(getattr(args, "set", None) or [])
    apply_overrides(cfg, overrides)
    return cfg.validate()


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path, command, cfg, inputs, outputs):
    manifest = {
        "command": command,
        "config": cfg.to_dict() if isinstance(cfg, RunConfig) else cfg,
        "inputs": inputs,
        "outputs": outputs,
    }
    path = out_path + ".manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args):
    cfg = _resolve_config(args)
    out = _out_path(args.out)
    ds = gscm.synthesize_dataset(
        n_paths=cfg.n_scatterers, steps=cfg.steps, seed=cfg.seed,
        fc_ghz=cfg.fc_ghz, delta2d=cfg.delta2d, bounds=cfg.bounds(),
        tx=cfg.tx(), rx_start=cfg.rx_start(), heading_count=cfg.heading_count,
        trajectories=cfg.trajectories, max_d2d=cfg.max_d2d,
        hold_range=(cfg.hold_min, cfg.hold_max))
    gscm.write_dataset(ds, out)
    manifest = _write_manifest(out, "gen", cfg, {},
                               {"dataset": out, "sha256": _file_sha256(out)})
    g = ds.rows[:, 3]
    print("wrote %s: %d rows x %d features (%d trajectories)"
          % (out, ds.rows.shape[0], ds.rows.shape[1], len(ds.traj_steps)))
    print("total gain dBm: min %.2f  mean %.2f  max %.2f"
          % (g.min(), g.mean(), g.max()))
    print("manifest: %s" % manifest)
    return 0


def _train_settings(cfg):
    return trainer.TrainSettings(
        mode=cfg.mode, epochs=cfg.epochs, batch_size=cfg.batch_size,
        lr=cfg.lr, lr_decay=cfg.lr_decay, lr_decay_every=cfg.lr_decay_every,
        weight_decay=cfg.weight_decay, beta=cfg.beta, stride=cfg.stride,
        train_frac=cfg.train_frac, seed=cfg.seed,
        checkpoint_every=cfg.checkpoint_every, alpha_max=cfg.alpha_max,
        dropout=cfg.dropout)


def cmd_train(args):
    cfg = _resolve_config(args)
    ds = gscm.read_dataset(args.dataset)
    model_cfg = cfg.model_config()
    if ds.n_paths != cfg.n_scatterers:
        model_cfg = ModelConfig(**{**model_cfg.to_dict(),
                                   "feature_dim": gscm.feature_dim(ds.n_paths)})
    out = _out_path(args.out)
    settings = _train_settings(cfg)
    result = trainer.train(ds, model_cfg, settings, out,
                           resume_from=args.resume)
    trace_path = _out_path(args.trace) if args.trace else out + ".trace.txt"
    trainer.write_trace(trace_path, result.trace, cfg.to_dict())
    manifest = _write_manifest(out, "train", cfg,
                               {"dataset": args.dataset,
                                "sha256": _file_sha256(args.dataset)},
                               {"checkpoint": out, "trace": trace_path})
    for epoch, loss, lr in result.trace:
        print("epoch %3d  loss %.6g  lr %.3g" % (epoch, loss, lr))
    print("checkpoint: %s" % out)
    print("manifest: %s" % manifest)
    return 0


def _eval_pools_to_cells(report, model_label, lag, window, delta2d):
    cells = []
    for name in trainer.EVAL_STATS:
        cells.append({"statistic": name, "model": model_label, "L": lag,
                      "P": window, "delta2d": delta2d,
                      "cdf_mse_db": report[name]["cdf_mse_db"]})
    return cells


def cmd_evaluate(args):
    params, scaler, _, meta = trainer.load_train_checkpoint(args.checkpoint)
    model_cfg = ModelConfig.from_dict(meta["model"])
    if args.lag is not None and args.lag != model_cfg.lag:
        raise ConfigError("checkpoint was trained with lag=%d" % model_cfg.lag)
    if args.window is not None and args.window != model_cfg.window:
        raise ConfigError("checkpoint was trained with window=%d"
                          % model_cfg.window)
    ds = gscm.read_dataset(args.dataset)
    settings = meta["settings"]
    train_ranges, eval_ranges = trainer.split_ranges(ds,
                                                     settings["train_frac"])
    stride = args.stride or settings["stride"]
    grid_size = args.cdf_grid
    true_pools, gen_pools = trainer.evaluate_model(
        ds, model_cfg, params, scaler, eval_ranges, stride=stride)
    report = trainer.cdf_distance_report(true_pools, gen_pools, grid_size)
    label = "gen" if settings["mode"] == "gen" else "pred"
    cells = _eval_pools_to_cells(report, label, model_cfg.lag,
                                 model_cfg.window, ds.delta2d)

    if args.with_untrained:
        ss = np.random.SeedSequence(settings["seed"])
        init_seed = int(ss.generate_state(2, dtype=np.uint64)[0])
        fresh = init_params(model_cfg, seed=init_seed)
        _, fresh_pools = trainer.evaluate_model(
            ds, model_cfg, fresh, scaler, eval_ranges, stride=stride)
        fresh_report = trainer.cdf_distance_report(true_pools, fresh_pools,
                                                   grid_size)
        cells += _eval_pools_to_cells(fresh_report, "untrained",
                                      model_cfg.lag, model_cfg.window,
                                      ds.delta2d)
    else:
        fresh_report = None

    out_dir = _out_path(args.out)
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.json")
    payload = {
        "cells": cells,
        "row_ranges": {"train": train_ranges, "eval": eval_ranges},
        "cdfs": {label: {
            name: {"grid": report[name]["grid"].tolist(),
                   "true": report[name]["true_values"].tolist(),
                   "gen": report[name]["gen_values"].tolist()}
            for name in trainer.EVAL_STATS}},
    }
    if fresh_report is not None:
        payload["cdfs"]["untrained"] = {
            name: {"grid": fresh_report[name]["grid"].tolist(),
                   "true": fresh_report[name]["true_values"].tolist(),
                   "gen": fresh_report[name]["gen_values"].tolist()}
            for name in trainer.EVAL_STATS}
    with open(report_path, "w") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")
    cells_path = os.path.join(out_dir, "cells.csv")
    _write_cells_csv(cells_path, cells)
    table_path = os.path.join(out_dir, "table.txt")
    with open(table_path, "w") as f:
        f.write(format_table(cells))
    _write_cdf_files(payload["cdfs"], out_dir)
    _write_manifest(report_path, "evaluate", meta["settings"],
                    {"checkpoint": args.checkpoint, "dataset": args.dataset,
                     "dataset_sha256": _file_sha256(args.dataset)},
                    {"report": report_path, "cells": cells_path,
                     "table": table_path})
    for cell in cells:
        print("%-16s %-10s P=%-4d delta2d=%-4g %10.4f dB"
              % (cell["statistic"], cell["model"], cell["P"],
                 cell["delta2d"], cell["cdf_mse_db"]))
    return 0


def _write_cells_csv(path, cells):
    with open(path, "w") as f:
        f.write("statistic,model,L,P,delta2d,cdf_mse_db\n")
        for c in cells:
            f.write("%s,%s,%d,%d,%.17g,%.17g\n"
                    % (c["statistic"], c["model"], c["L"], c["P"],
                       c["delta2d"], c["cdf_mse_db"]))


def _read_cells_csv(path):
    cells = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        for line in f:
            vals = line.strip().split(",")
            if len(vals) != len(header):
                continue
            row = dict(zip(header, vals))
            cells.append({"statistic": row["statistic"], "model": row["model"],
                          "L": int(row["L"]), "P": int(row["P"]),
                          "delta2d": float(row["delta2d"]),
                          "cdf_mse_db": float(row["cdf_mse_db"])})
    return cells


def format_table(cells):
    """Aligned text: one block per (statistic, model), P rows x delta2d cols.

    Duplicate (statistic, model, P, delta2d) cells are averaged, which is
    how multiple independent training runs get combined.
    """
    groups = {}
    for c in cells:
        key = (c["statistic"], c["model"])
        groups.setdefault(key, {}).setdefault(
            (c["P"], c["delta2d"]), []).append(c["cdf_mse_db"])
    lines = []
    for (stat, model), vals in sorted(groups.items()):
        ps = sorted({p for p, _ in vals})
        deltas = sorted({d for _, d in vals})
        lines.append("%s / %s (CDF MSE, dB)" % (stat, model))
        lines.append("  %-8s" % "P" + "".join("%14s" % ("d2d=%g m" % d)
                                              for d in deltas))
        for p in ps:
            row = "  %-8d" % p
            for d in deltas:
                entry = vals.get((p, d))
                row += "%14s" % ("%.4f" % float(np.mean(entry))
                                 if entry else "-")
            lines.append(row)
        lines.append("")
    return "\n".join(lines) + ("\n" if lines else "")


def cmd_table(args):
    cells = []
    for path in args.cells:
        cells.extend(_read_cells_csv(path))
    text = format_table(cells)
    if args.out:
        with open(_out_path(args.out), "w") as f:
            f.write(text)
    print(text, end="")
    return 0


def _write_cdf_files(cdfs, out_dir):
    """Two-column (grid, value) text files per statistic per model label."""
    written = []
    for model, stats in sorted(cdfs.items()):
        for name, cdf in sorted(stats.items()):
            grid = np.asarray(cdf["grid"])
            for which in ("true", "gen"):
                path = os.path.join(out_dir,
                                    "%s_%s_%s.csv" % (name, model, which))
                vals = np.asarray(cdf[which])
                with open(path, "w") as f:
                    for g, v in zip(grid, vals):
                        f.write("%.17g %.17g\n" % (g, v))
                written.append(path)
    return written


def cmd_export_cdfs(args):
    with open(args.report) as f:
        payload = json.load(f)
    out_dir = _out_path(args.out)
    os.makedirs(out_dir, exist_ok=True)
    written = _write_cdf_files(payload["cdfs"], out_dir)
    if args.svg:
        written += _render_svgs(payload, out_dir)
    for path in written:
        print("wrote %s" % path)
    return 0


def _render_svgs(payload, out_dir):
    try:
        import matplotlib
        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping SVG plots", file=sys.stderr)
        return []
    matplotlib.rcParams["svg.hashsalt"] = "ddgen"
    written = []
    stat_names = sorted({n for stats in payload["cdfs"].values()
                         for n in stats})
    for name in stat_names:
        fig, ax = plt.subplots(figsize=(5, 4))
        drew_truth = False
        for model, stats in sorted(payload["cdfs"].items()):
            if name not in stats:
                continue
            cdf = stats[name]
            if not drew_truth:
                ax.plot(cdf["grid"], cdf["true"], label="ground truth",
                        color="black")
                drew_truth = True
            ax.plot(cdf["grid"], cdf["gen"], label=model)
        ax.set_xlabel(name)
        ax.set_ylabel("CDF")
        ax.legend()
        path = os.path.join(out_dir, name + ".svg")
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def cmd_reference(args):
    lines = []
    for stat, table in FULL_SCALE_REFERENCE_DB.items():
        ps = sorted({p for p, _ in table})
        deltas = sorted({d for _, d in table})
        lines.append("%s (full-scale reference, lag 100, dB)" % stat)
        lines.append("  %-8s" % "P" + "".join("%14s" % ("d2d=%g m" % d)
                                              for d in deltas))
        for p in ps:
            lines.append("  %-8d" % p + "".join(
                "%14.4f" % table[(p, d)] for d in deltas))
        lines.append("")
    print("\n".join(lines), end="")
    return 0


def cmd_summary(args):
    params, _, _, meta = trainer.load_train_checkpoint(args.checkpoint)
    cfg = ModelConfig.from_dict(meta["model"])
    print(model_summary(cfg, params))
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = argparse.ArgumentParser(
        prog="ddgen",
        description="Double-directional channel dataset synthesis, "
                    "statistics-aided sequence model training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen", help="synthesize a channel dataset")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--delta2d", type=float)
    p.add_argument("--trajectories", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the sequence generator")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("gen", "pred"))
    p.add_argument("--lag", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--trace")
    p.add_argument("--resume")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="CDF-distance evaluation on the "
                                        "held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--lag", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--cdf-grid", type=int, default=chanstats.CDF_GRID_SIZE)
    p.add_argument("--with-untrained", action="store_true",
                   help="also score a freshly initialized model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-cdfs", help="write per-statistic CDF files "
                                           "from an evaluation report")
    p.add_argument("--report", required=True)
    p.add_argument("--svg", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_cdfs)

    p = sub.add_parser("table", help="merge evaluation cells into aligned "
                                     "distance tables")
    p.add_argument("cells", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("reference", help="print full-scale reference "
                                         "distances")
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("summary", help="print a checkpoint's layer summary")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 1
    except trainer.TrainingDiverged as exc:
        print("training diverged: %s (last checkpoint: %s)"
              % (exc, exc.last_checkpoint), file=sys.stderr)
        return 2
    except OSError as exc:
        print("i/o error: %s" % exc, file=sys.stderr)
        return 3
    except ValueError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
