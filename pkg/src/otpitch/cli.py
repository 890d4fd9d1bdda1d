"""Command-line entry point: ``otpitch <subcommand> [flags]``.

Exit codes: 0 success, 1 failed self-test, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import harness
from .harness import ConfigError
from .io import DataError, write_csv, write_json

log = logging.getLogger("otpitch")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

_SWEEP_COMMANDS = {
    "simulate": "single_run",
    "sweep-snr": "snr_sweep",
    "sweep-inharm": "inharmonicity_sweep",
    "sweep-grid": "gridpoint_sweep",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment configuration")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--method", choices=("stoch", "det", "both"), help="estimator(s) to run")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    p.add_argument("--trials", type=int, help="trials per sweep point")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--trial-budget", type=float, help="wall-clock budget per estimate in seconds")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otpitch",
                                     description="Optimal-transport multi-pitch estimation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, scenario in _SWEEP_COMMANDS.items():
        p = sub.add_parser(name, help=f"run the {scenario} scenario")
        _common(p)
        p.add_argument("--values", type=float, nargs="+", help="override the swept values")
        p.add_argument("--snr", type=float, help="SNR in dB where it is not swept")
    p = sub.add_parser("estimate-audio", help="frame-wise pitch track of a WAV/CSV recording")
    _common(p)
    p.add_argument("path", type=Path)
    p.add_argument("--sample-rate", type=float, help="sample rate of CSV input")
    p.add_argument("--frame-ms", type=float, help="frame length in ms (default 30)")
    p = sub.add_parser("emit-plots", help="figure tables from a results.csv")
    p.add_argument("--results", type=Path, help="results file (default: OUT/results.csv)")
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("selftest", help="fast numerical self-checks")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _methods(arg):
    if arg is None:
        return None
    return list(harness.METHODS) if arg == "both" else [arg]


def _config(args, scenario: str) -> harness.ExperimentConfig:
    over = {"seed": args.seed, "trials": args.trials, "jobs": args.jobs,
            "trial_budget_s": args.trial_budget, "methods": _methods(args.method)}
    cfg = harness.load_config(args.config, **over)
    kw = {"scenario": scenario}
    if getattr(args, "values", None):
        kw["sweep_values"] = tuple(args.values)
    if getattr(args, "snr", None) is not None:
        kw["snr_db"] = args.snr
    if getattr(args, "frame_ms", None) is not None:
        kw["frame_ms"] = args.frame_ms
    if getattr(args, "sample_rate", None) is not None:
        kw["audio_sample_rate"] = args.sample_rate
    return cfg.with_(**kw)


def _progress(done, total):
    log.info("trial %d/%d", done, total)


def cmd_sweep(args) -> int:
    cfg = _config(args, _SWEEP_COMMANDS[args.command])
    t0 = time.monotonic()
    rows = harness.run_sweep(cfg, progress=_progress)
    paths = harness.save_results(rows, cfg, args.out)
    if cfg.scenario in ("snr_sweep", "inharmonicity_sweep", "gridpoint_sweep", "single_run", "w2_cdf"):
        paths += harness.emit_plot_data(rows, cfg.scenario, args.out)
    failed = sum(r["status"].startswith("error") for r in rows)
    for m in cfg.methods:
        sel = [r for r in rows if r["method"] == m and not r["status"].startswith("error")]
        if sel:
            print(f"{m}: mean GER {np.mean([r['ger'] for r in sel]):.4f} over {len(sel)} trials")
    print(f"{len(rows)} rows ({failed} failed) in {time.monotonic() - t0:.1f} s")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_audio(args) -> int:
    cfg = _config(args, "audio_frames")
    track = harness.run_audio_frames(args.path, cfg)
    out = Path(args.out)
    rows = []
    for fr in track:
        for m in cfg.methods:
            rows.append({"frame": fr["frame"], "start_s": fr["start_s"], "method": m,
                         "pitches_hz": fr["pitches_hz"].get(m, []), "masses": fr["masses"].get(m, [])})
    paths = [write_json(out / "track.json", {"source": str(args.path), "config": cfg.to_dict(),
                                              "frames": track}),
             write_csv(out / "track.csv", rows, ["frame", "start_s", "method", "pitches_hz", "masses"])]
    print(f"{len(track)} frames")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_emit(args) -> int:
    path = args.results or Path(args.out) / "results.csv"
    rows = harness.load_results(path)
    if not rows:
        raise DataError(f"{path} holds no result rows")
    paths = []
    for scenario in sorted({r["scenario"] for r in rows}):
        paths += harness.emit_plot_data([r for r in rows if r["scenario"] == scenario], scenario, args.out)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .evaluation import match_and_ger, wasserstein2_1d
    from .grids import uniform_frequency_grid, uniform_pitch_grid
    from .ot_core import psi_column_update, wright_omega
    from .signal_model import SignalConfig, add_noise, generate_multipitch, normalize_unit_variance
    from .estimators import estimate_deterministic

    checks = []
    x = np.linspace(-30, 30, 10001)
    w = wright_omega(x)
    checks.append(("wright omega residual",
                   float(np.max(np.abs(w + np.log(w) - x) / np.maximum(1, np.abs(x)))) <= 1e-12))
    rng = np.random.default_rng(0)
    a = rng.uniform(0.1, 2.0, 20)
    psi = psi_column_update(a, 0.05, 0.01)
    checks.append(("water-filling budget", abs(np.abs(psi).sum() - 0.05) <= 1e-12))
    checks.append(("W2 of two diracs", abs(wasserstein2_1d([0.1], [1.0], [0.4], [1.0]) - 0.3) <= 1e-12))
    checks.append(("GER with one miss", match_and_ger([100, 200, 300, 400], [100, 200, 301])[1] == 0.25))
    cfg = SignalConfig(nominal_f0s=(197.0, 272.0), order_range=(4, 6))
    sig = generate_multipitch(cfg, np.random.default_rng(1))
    y, _ = normalize_unit_variance(add_noise(sig.samples, 20.0, rng, sig.signal_power))
    fg = uniform_frequency_grid(800, 0.0, 2 * np.pi * 2000 / cfg.sample_rate)
    pg = uniform_pitch_grid(150, 350, 101, cfg.sample_rate)
    res = estimate_deterministic(y, fg, pg)
    checks.append(("two-pitch recovery", match_and_ger(sig.true_f0s, res.f0s)[1] == 0.0))
    ok = True
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= bool(passed)
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"estimate-audio": cmd_audio, "emit-plots": cmd_emit, "selftest": cmd_selftest}
    try:
        return handler.get(args.command, cmd_sweep)(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
