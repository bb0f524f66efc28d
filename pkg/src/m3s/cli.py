"""Command-line entry point: dataset generation, training, evaluation,
prediction, gradient verification, and SVG plotting.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric failure.  The M3S_SEED environment variable overrides the seed
from both the config file and the flags.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, load_config
from .data import (COLUMNS, Normalizer, load_dataset, make_windows,
                   split_731)
from .errors import ConfigError, ContractError, DataError, NumericError
from .fusion import CrossModalFusionBlock, ScanFusion, SelectiveSSMBlock
from .model import build_model
from .synth import SynthSpec, generate
from .temporal import (RetractableStack, TemporalBranch, build_pyramid,
                       extract_periods)
from .tensor import Tensor, finite_difference_check
from .training import (TrainLog, collate, evaluate, load_run, train)
from .visual import SCSMBlock, SCSMConfig, VisualBranch

_TYPES = {"str": str, "int": int, "float": float, str: str, int: int,
          float: float}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per config key, defaulting to 'not given'."""
    group = parser.add_argument_group("config keys")
    defaults = ExperimentConfig()
    for f in fields(ExperimentConfig):
        group.add_argument(f"--{f.name}", type=_TYPES[f.type], default=None,
                           help=f"default: {getattr(defaults, f.name)}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="m3s",
        description="multimodal ultra-short-term irradiance forecasting")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic dataset")
    ps.add_argument("--out", required=True, help="output directory")
    ps.add_argument("--days", type=int, default=3)
    ps.add_argument("--size", type=int, default=64, help="image side length")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--max-clouds", type=int, default=3)
    ps.add_argument("--noise-std", type=float, default=0.0)

    pt = sub.add_parser("train", help="train a scheme on a dataset")
    pt.add_argument("--data", required=True, help="dataset directory")
    pt.add_argument("--out", required=True, help="run output directory")
    pt.add_argument("--config", default=None, help="key=value config file")
    _add_config_flags(pt)

    pe = sub.add_parser("eval", help="per-horizon metrics of a saved run")
    pe.add_argument("--checkpoint", required=True, help="run directory")
    pe.add_argument("--data", required=True)
    pe.add_argument("--split", choices=("train", "val", "test", "all"),
                    default="test")
    pe.add_argument("--horizons", default=None,
                    help="comma-separated steps, e.g. 1,3,6 (default: all)")
    pe.add_argument("--out", default=None,
                    help="CSV path (default: <checkpoint>/metrics.csv)")

    pp = sub.add_parser("predict", help="forecast one window")
    pp.add_argument("--checkpoint", required=True, help="run directory")
    pp.add_argument("--data", required=True)
    pp.add_argument("--window", type=int, default=0, help="window index")

    pg = sub.add_parser("gradcheck",
                        help="finite-difference gradient verification")
    pg.add_argument("--seed", type=int, default=0)

    pl = sub.add_parser("plot", help="render SVG charts from a run")
    pl.add_argument("--log", required=True, help="training log file")
    pl.add_argument("--out", required=True, help="output directory")
    pl.add_argument("--checkpoint", default=None,
                    help="also plot forecast vs truth from this run")
    pl.add_argument("--data", default=None, help="dataset for the forecast plot")
    pl.add_argument("--window", type=int, default=0)
    return p


def resolve_config(args) -> ExperimentConfig:
    """defaults < config file < explicit flags < M3S_SEED."""
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for f in fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return cfg.replace(**overrides).apply_env().validate()


def cmd_synth(args) -> int:
    spec = SynthSpec(days=args.days, size=args.size, seed=args.seed,
                     max_clouds=args.max_clouds,
                     noise_std=args.noise_std).validate()
    counts = generate(args.out, spec)
    print(f"wrote {counts['rows']} rows, {counts['images']} image/mask pairs "
          f"({counts['days']} days) to {args.out}")
    return 0


def _windows_for(cfg: ExperimentConfig, data_dir: str):
    ds = load_dataset(data_dir)
    windows = make_windows(ds, cfg.lookback, cfg.tau, cfg.n_frames,
                           stride=cfg.stride)
    return ds, windows, split_731(len(windows), cfg.seed)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _ds, windows, split = _windows_for(cfg, args.data)
    normalizer = Normalizer.fit(windows.dataset, windows, split.train)
    log, model = train(cfg, windows, split, normalizer, args.out,
                       log_fn=print)
    try:
        report = evaluate(model, windows, split.test, normalizer,
                          batch=cfg.batch)
        print(report.summary())
    except NumericError as exc:
        # tiny held-out splits can have constant truth; the run is still saved
        print(f"test report unavailable: {exc}", file=sys.stderr)
    print(f"saved run to {args.out} (best epoch {log.best_epoch}, "
          f"{log.wall_seconds:.1f}s)")
    return 0


def _parse_horizons(raw: str | None, tau: int):
    if raw is None:
        return None
    try:
        steps = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise ContractError(f"horizons must be integers, got {raw!r}")
    if not steps:
        raise ContractError("empty horizon list")
    bad = [h for h in steps if not 1 <= h <= tau]
    if bad:
        raise ContractError(f"horizon step(s) {bad} outside 1..{tau}")
    return steps


def cmd_eval(args) -> int:
    cfg, model, normalizer = load_run(args.checkpoint)
    _ds, windows, split = _windows_for(cfg, args.data)
    idx = {"train": split.train, "val": split.val, "test": split.test,
           "all": np.arange(len(windows))}[args.split]
    horizons = _parse_horizons(args.horizons, windows.tau)
    report = evaluate(model, windows, idx, normalizer, horizons=horizons,
                      batch=cfg.batch)
    csv = report.to_csv()
    print(csv, end="")
    out = args.out or os.path.join(args.checkpoint, "metrics.csv")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(csv)
    print(f"wrote {out}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    cfg, model, normalizer = load_run(args.checkpoint)
    _ds, windows, _split = _windows_for(cfg, args.data)
    if not 0 <= args.window < len(windows):
        raise ContractError(
            f"window {args.window} outside 0..{len(windows) - 1}")
    series, frames, _t, _m = collate(
        windows, normalizer, np.array([args.window]),
        getattr(model, "_has_visual", False), False)
    forecast, _ = model(series, frames)
    values = normalizer.inverse_target(forecast.numpy())[0]
    print("step,ghi")
    for j, v in enumerate(values, start=1):
        print(f"{j},{float(v)!r}")
    return 0


def _gradcheck_cases(seed: int):
    """Small seeded instances of every differentiable building block."""
    rng = lambda k: np.random.default_rng([seed, k])  # noqa: E731

    def scsm_block():
        block = SCSMBlock(8, SCSMConfig(), rng(1), attention_front=False)
        x = Tensor(rng(2).normal(size=(1, 8, 8, 8)))
        return (lambda _p: T.sum_(T.mul(block(x), block(x)))), block, 8, 1e-4

    def visual_branch():
        branch = VisualBranch(rng(3), base=4, n_stages=2, d_model=4,
                              n_state=2)
        frames = Tensor(rng(4).uniform(size=(1, 3, 8, 8)))

        def loss(_p):
            rows, seg = branch(frames, want_seg=True)
            return T.add(T.sum_(T.mul(rows, rows)), T.mean(T.mul(seg, seg)))
        return loss, branch, 6, 1e-3

    def retractable():
        stack = RetractableStack(4, 2, 2, 1, rng(5))
        x = Tensor(rng(6).normal(size=(1, 4, 3, 4)))
        return (lambda _p: T.mean(T.mul(stack(x), stack(x)))), stack, 10, 1e-4

    def temporal_branch():
        branch = TemporalBranch(3, 16, 2, rng(7), d_model=8, m_scales=1,
                                k_periods=2, window=2, interval=2, depth=1)
        x = Tensor(rng(8).normal(size=(1, 16, 3)))
        pset = extract_periods(
            T.add(branch.embed(build_pyramid(x, 1)[1]),
                  Tensor(branch._pe[1])), branch.k_periods)

        def loss(_p):
            y = branch(x, period_set=pset)
            return T.mean(T.mul(y, y))
        return loss, branch, 6, 1e-3

    def ssm_block():
        block = SelectiveSSMBlock(4, 3, rng(9))
        x = Tensor(rng(10).normal(size=(1, 5, 4)))
        return (lambda _p: T.sum_(T.mul(block(x), block(x)))), block, 12, 1e-4

    def cross_modal():
        block = CrossModalFusionBlock(4, 3, rng(11))
        xs = Tensor(rng(12).normal(size=(1, 4, 4)))
        xi = Tensor(rng(13).normal(size=(1, 4, 4)))

        def loss(_p):
            ys, yi = block(xs, xi)
            return T.add(T.sum_(T.mul(ys, ys)), T.sum_(T.mul(yi, yi)))
        return loss, block, 10, 1e-4

    def scan_fusion():
        fusion = ScanFusion(4, 2, 2, rng(14))
        xs = Tensor(rng(15).normal(size=(1, 3, 4)))
        xi = Tensor(rng(16).normal(size=(1, 5, 4)))
        return (lambda _p: T.sum_(T.mul(fusion(xs, xi), fusion(xs, xi)))), \
            fusion, 10, 1e-4

    def forecaster():
        cfg = ExperimentConfig(
            scheme="full", seed=seed, lookback=16, tau=2, image_size=16,
            n_frames=2, d_model=8, m_scales=1, k_periods=2, window=2,
            interval=2, depth=1, base_channels=4, n_stages=2,
            n_state=2).validate()
        model = build_model(cfg, n_vars=len(COLUMNS))
        x = Tensor(rng(17).normal(size=(1, 16, len(COLUMNS))))
        frames = Tensor(rng(18).uniform(size=(1, 2, 3, 16, 16)))
        branch = model.temporal
        pset = extract_periods(
            T.add(branch.embed(build_pyramid(x, 1)[1]),
                  Tensor(branch._pe[1])), branch.k_periods)

        def loss(_p):
            forecast, _ = model(x, frames, period_set=pset)
            return T.sum_(T.mul(forecast, forecast))
        return loss, model, 4, 1e-3

    return [("scsm_block", scsm_block), ("visual_branch", visual_branch),
            ("retractable_stack", retractable),
            ("temporal_branch", temporal_branch), ("ssm_block", ssm_block),
            ("cross_modal_fusion", cross_modal), ("scan_fusion", scan_fusion),
            ("forecaster", forecaster)]


def cmd_gradcheck(args) -> int:
    failures = 0
    print(f"{'block':<20} {'result':<6} {'max rel err':>12}  params")
    for name, make in _gradcheck_cases(args.seed):
        loss, module, coords, tol = make()
        report = finite_difference_check(loss, module.parameters(), tol=tol,
                                         max_coords_per_param=coords,
                                         seed=args.seed)
        verdict = "PASS" if report.passed else "FAIL"
        print(f"{name:<20} {verdict:<6} {report.max_rel_err:>12.3e}  "
              f"{len(report.per_param)}")
        failures += 0 if report.passed else 1
    if failures:
        raise NumericError(f"{failures} gradient check(s) failed")
    return 0


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def line_chart_svg(title: str, x_label: str, y_label: str,
                   x, series, width: int = 640, height: int = 400) -> str:
    """Minimal line chart; series is a list of (name, values) pairs."""
    left, right, top, bottom = 64.0, 16.0, 34.0, 46.0
    pw, ph = width - left - right, height - top - bottom
    x = [float(v) for v in x]
    flat = [float(v) for _name, vals in series for v in vals]
    if not flat or not x:
        raise ContractError("chart needs at least one point")
    x_lo, x_hi = min(x), max(x)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = min(flat), max(flat)
    pad = 0.05 * (y_hi - y_lo) or max(abs(y_hi), 1.0) * 0.05
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v):
        return left + (v - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return top + (y_hi - v) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
           f'font-family="sans-serif" font-size="14">{title}</text>']
    for i in range(5):
        yv = y_lo + (y_hi - y_lo) * i / 4
        yy = sy(yv)
        out.append(f'<line x1="{left}" y1="{yy:.1f}" x2="{left + pw}" '
                   f'y2="{yy:.1f}" stroke="#dddddd"/>')
        out.append(f'<text x="{left - 6}" y="{yy + 4:.1f}" '
                   f'text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{yv:.4g}</text>')
    for i in range(5):
        xv = x_lo + (x_hi - x_lo) * i / 4
        xx = sx(xv)
        out.append(f'<text x="{xx:.1f}" y="{top + ph + 16:.1f}" '
                   f'text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{xv:.4g}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" '
               f'fill="none" stroke="black"/>')
    for k, (name, vals) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{sx(xv):.1f},{sy(float(v)):.1f}"
                       for xv, v in zip(x, vals))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        ly = top + 14 + 14 * k
        out.append(f'<line x1="{left + pw - 110}" y1="{ly - 4}" '
                   f'x2="{left + pw - 90}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 84}" y="{ly}" '
                   f'font-family="sans-serif" font-size="11">{name}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" '
               f'text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{x_label}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12" transform="rotate(-90 '
               f'16 {top + ph / 2:.1f})">{y_label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> int:
    try:
        with open(args.log, "r", encoding="utf-8") as fh:
            log = TrainLog.from_text(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read log {args.log}: {exc}")
    if not log.entries:
        raise DataError(f"training log {args.log} has no epochs")
    os.makedirs(args.out, exist_ok=True)
    epochs = [e.epoch for e in log.entries]
    written = []
    for metric in ("train_loss", "val_loss"):
        vals = [getattr(e, metric) for e in log.entries]
        svg = line_chart_svg(f"{log.scheme}: {metric}", "epoch", metric,
                             epochs, [(metric, vals)])
        path = os.path.join(args.out, f"{metric}.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(svg)
        written.append(path)
    if args.checkpoint and args.data:
        cfg, model, normalizer = load_run(args.checkpoint)
        _ds, windows, _split = _windows_for(cfg, args.data)
        if not 0 <= args.window < len(windows):
            raise ContractError(
                f"window {args.window} outside 0..{len(windows) - 1}")
        series, frames, _t, _m = collate(
            windows, normalizer, np.array([args.window]),
            getattr(model, "_has_visual", False), False)
        forecast, _ = model(series, frames)
        y_hat = normalizer.inverse_target(forecast.numpy())[0]
        y = windows.sample(args.window)[2]
        steps = list(range(1, windows.tau + 1))
        svg = line_chart_svg(f"window {args.window}: forecast vs truth",
                             "horizon step", "ghi", steps,
                             [("truth", y), ("forecast", y_hat)])
        path = os.path.join(args.out, "forecast_vs_truth.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(svg)
        written.append(path)
    for path in written:
        print(f"wrote {path}")
    return 0


_DISPATCH = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
             "predict": cmd_predict, "gradcheck": cmd_gradcheck,
             "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 on --help
        return 0 if exc.code == 0 else 1
    try:
        return _DISPATCH[args.command](args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
