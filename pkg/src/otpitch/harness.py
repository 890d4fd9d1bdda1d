"""
Monte-Carlo sweeps, frame-wise audio estimation and plot-data emission.

Every trial draws its signal and noise from a generator seeded by
``SeedSequence(master_seed, spawn_key=(trial,))``. All points of a sweep thus
see the same fundamentals, orders, phases and noise shape (common random
numbers); only the swept quantity changes. Runs are reproducible from the
configuration plus the master seed, whatever the number of worker processes.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import estimators as est
from .evaluation import ecdf, match_and_ger, summarize, wasserstein2_1d
from .grids import FrequencyGrid, PitchGrid, uniform_frequency_grid, uniform_pitch_grid
from .io import DataError, read_samples, write_csv, write_json
from .signal_model import (
    SignalConfig,
    add_noise,
    analytic_signal,
    default_n_lags,
    generate_multipitch,
    normalize_unit_variance,
    sample_autocovariance,
)

__all__ = [
    "ConfigError",
    "GridConfig",
    "ExperimentConfig",
    "SCENARIOS",
    "METHODS",
    "RESULT_COLUMNS",
    "load_config",
    "trial_rng",
    "lines_w2",
    "rescore_w2",
    "run_trial",
    "run_sweep",
    "run_snr_sweep",
    "run_inharmonicity_sweep",
    "run_gridpoint_sweep",
    "run_audio_frames",
    "emit_plot_data",
    "amplitude_spectrum",
    "rescore",
    "save_results",
    "load_results",
]

log = logging.getLogger(__name__)

METHODS = ("stoch", "det")
SCENARIOS = ("snr_sweep", "inharmonicity_sweep", "gridpoint_sweep", "single_run", "w2_cdf",
             "audio_frames")
# swept quantity and its default values per scenario
_SWEEPS = {
    "snr_sweep": ("snr_db", [0.0, 5.0, 10.0, 15.0, 20.0]),
    "inharmonicity_sweep": ("kappa", [0.0, 0.005, 0.01, 0.02, 0.03]),
    "gridpoint_sweep": ("n_freqs", [200, 400, 800, 1500, 2260]),
    "single_run": ("snr_db", [20.0]),
    "w2_cdf": ("kappa", [0.02]),
}
_SWEEP_SNR = {"snr_sweep": None, "inharmonicity_sweep": 5.0, "gridpoint_sweep": 5.0,
              "single_run": None, "w2_cdf": 5.0}

AUDIO_BAND_HZ = 4000.0

RESULT_COLUMNS = [
    "scenario", "parameter", "value", "trial", "method", "status", "ger", "w2",
    "n_true", "n_est", "true_f0s", "est_f0s", "true_lines", "est_lines", "outer_iterations", "stop_reason",
    "final_objective", "inner_violations", "objective_increases", "runtime",
]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class GridConfig:
    n_freqs: int = 2260
    freq_max_hz: float | None = None   # None: the full band [0, fs/2)
    pitch_lo_hz: float = 50.0
    pitch_hi_hz: float = 500.0
    n_pitches: int = 226

    def build(self, sample_rate: float) -> tuple[FrequencyGrid, PitchGrid]:
        hi = math.pi if self.freq_max_hz is None else 2 * math.pi * self.freq_max_hz / sample_rate
        if not 0 < hi <= math.pi:
            raise ConfigError("freq_max_hz must lie in (0, fs/2]")
        return (uniform_frequency_grid(self.n_freqs, 0.0, hi),
                uniform_pitch_grid(self.pitch_lo_hz, self.pitch_hi_hz, self.n_pitches, sample_rate))


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: scenario, signal protocol, grids, hyperparameters, seed.

    ``hyper`` maps a method name to overrides of its preset (simulation presets
    for the sweeps, real-data presets for ``audio_frames``).
    """

    scenario: str = "single_run"
    trials: int | None = None   # None: 150 for w2_cdf, 50 otherwise
    sweep_values: tuple | None = None
    snr_db: float = 20.0
    signal: SignalConfig = SignalConfig()
    grid: GridConfig = GridConfig()
    methods: tuple = METHODS
    hyper: dict = field(default_factory=dict)
    seed: int = 0
    trial_budget_s: float = 120.0
    jobs: int = 1
    frame_ms: float = 30.0
    hop_ms: float | None = None
    audio_sample_rate: float | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.trials is not None and self.trials < 1:
            raise ConfigError("trials must be >= 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"methods must be a nonempty subset of {METHODS}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.jobs < 1 or self.trial_budget_s <= 0 or self.frame_ms <= 0:
            raise ConfigError("jobs, trial_budget_s and frame_ms must be positive")
        for m in self.hyper:
            if m not in METHODS:
                raise ConfigError(f"hyperparameters given for unknown method {m!r}")
        for m in self.methods:
            try:
                self.hyperparams(m)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid hyperparameters for {m}: {exc}") from exc

    @property
    def n_trials(self) -> int:
        if self.trials is not None:
            return self.trials
        return 150 if self.scenario == "w2_cdf" else 50

    @property
    def sweep(self) -> tuple[str, list]:
        if self.scenario == "audio_frames":
            return ("frame", [])
        name, default = _SWEEPS[self.scenario]
        values = list(self.sweep_values) if self.sweep_values is not None else list(default)
        if self.scenario == "single_run":
            values = [self.snr_db] if self.sweep_values is None else values
        return name, values

    def point_snr(self) -> float:
        fixed = _SWEEP_SNR.get(self.scenario)
        return self.snr_db if fixed is None else fixed

    def hyperparams(self, method: str) -> est.Hyperparams:
        audio = self.scenario == "audio_frames"
        if method == "stoch":
            base = est.STOCHASTIC_AUDIO if audio else est.STOCHASTIC_SIM
        else:
            base = est.DETERMINISTIC_AUDIO if audio else est.DETERMINISTIC_SIM
        over = dict(self.hyper.get(method, {}))
        return base.with_(**over) if over else base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown configuration keys: {sorted(extra)}")
        try:
            if "signal" in d:
                sig = dict(d["signal"])
                for key in ("nominal_f0s", "order_range"):
                    if key in sig:
                        sig[key] = tuple(sig[key])
                d["signal"] = SignalConfig(**sig)
            if "grid" in d:
                d["grid"] = GridConfig(**d["grid"])
            if "methods" in d:
                d["methods"] = tuple([d["methods"]] if isinstance(d["methods"], str) else d["methods"])
            if d.get("sweep_values") is not None:
                d["sweep_values"] = tuple(d["sweep_values"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_(self, **kw) -> "ExperimentConfig":
        try:
            return replace(self, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a JSON configuration (if given) and apply non-``None`` overrides."""
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"configuration file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------

def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(trial,)))


def amplitude_spectrum(spectrum, method: str) -> np.ndarray:
    """Magnitudes on the frequency grid: ``sqrt(nu)`` or ``|mu|``."""
    s = np.asarray(spectrum)
    return np.sqrt(np.maximum(s.real, 0.0)) if method == "stoch" else np.abs(s)


_WORKSPACES: dict = {}


def _workspace(fg: FrequencyGrid, pg: PitchGrid, rows: int, mode: str, key) -> est.Workspace:
    k = (key, rows, mode)
    ws = _WORKSPACES.get(k)
    if ws is None:
        if len(_WORKSPACES) > 8:
            _WORKSPACES.clear()
        ws = _WORKSPACES[k] = est.Workspace(fg, pg, rows, mode)
    return ws


def _estimate(method, y, fg, pg, hyper, grid_key):
    n = len(y)
    if method == "stoch":
        T = default_n_lags(n)
        ws = _workspace(fg, pg, T, "lag", grid_key)
        return est.estimate_stochastic(sample_autocovariance(y, T), fg, pg, hyper, workspace=ws,
                                       keep_plan=False)
    ws = _workspace(fg, pg, n, "time", grid_key)
    return est.estimate_deterministic(y, fg, pg, hyper, workspace=ws, keep_plan=False)


def run_trial(config: ExperimentConfig, value, trial: int) -> list[dict]:
    """All methods on one trial of one sweep point; returns result rows."""
    param, _ = config.sweep
    signal = config.signal
    grid = config.grid
    snr = config.point_snr()
    if param == "snr_db":
        snr = float(value)
    elif param == "kappa":
        signal = replace(signal, kappa=float(value))
    elif param == "n_freqs":
        grid = replace(grid, n_freqs=int(value))
    fg, pg = grid.build(signal.sample_rate)
    rng = trial_rng(config.seed, trial)
    sig = generate_multipitch(signal, rng)
    y = add_noise(sig.samples, snr, rng, sig.signal_power)
    y, _ = normalize_unit_variance(y)
    true_lines = [[float(f), float(a)] for f, a in zip(*sig.line_spectrum())]
    rows = []
    for method in config.methods:
        hyper = config.hyperparams(method).with_(time_budget=config.trial_budget_s)
        t0 = time.monotonic()
        status = "ok"
        try:
            res = _estimate(method, y, fg, pg, hyper, (grid, signal.sample_rate))
        except Exception as exc:  # a failing trial is logged, the sweep goes on
            log.exception("trial %d (%s=%s, %s) failed", trial, param, value, method)
            rows.append(_row(config, param, value, trial, method, "error: " + type(exc).__name__,
                             sig.true_f0s, [], float("nan"), true_lines, [], {},
                             time.monotonic() - t0))
            continue
        d = res.diagnostics
        if d.get("stop_reason") == "time_budget":
            status = "budget_exceeded"
            log.warning("trial %d (%s=%s, %s) hit the %.0f s budget", trial, param, value, method,
                        config.trial_budget_s)
        _, ger = match_and_ger(sig.true_f0s, res.f0s)
        amp = amplitude_spectrum(res.spectrum, method)
        est_lines = [[float(fg.freqs[i]), float(amp[i])] for i in np.flatnonzero(amp > 0)]
        rows.append(_row(config, param, value, trial, method, status, sig.true_f0s, res.f0s, ger,
                         true_lines, est_lines, d, time.monotonic() - t0))
    return rows


def lines_w2(est_lines, true_lines) -> float:
    """W2 between two ``[[omega, amplitude], ...]`` line spectra; NaN for an empty estimate."""
    if not est_lines:
        return float("nan")
    e = np.asarray(est_lines, dtype=float)
    t = np.asarray(true_lines, dtype=float)
    return wasserstein2_1d(e[:, 0], e[:, 1], t[:, 0], t[:, 1])


def _row(config, param, value, trial, method, status, true_f0s, est_f0s, ger, true_lines, est_lines, d,
         runtime):
    return {
        "scenario": config.scenario,
        "parameter": param,
        "value": float(value),
        "trial": int(trial),
        "method": method,
        "status": status,
        "ger": float(ger),
        "w2": lines_w2(est_lines, true_lines),
        "n_true": len(true_f0s),
        "n_est": len(est_f0s),
        "true_f0s": [float(f) for f in true_f0s],
        "est_f0s": [float(f) for f in est_f0s],
        "true_lines": true_lines,
        "est_lines": est_lines,
        "outer_iterations": int(d.get("outer_iterations", 0)),
        "stop_reason": str(d.get("stop_reason", "")),
        "final_objective": float(d.get("final_objective", float("nan"))),
        # monotonicity diagnostics: inner dual sweeps that went up, rises of the logged outer trace
        "inner_violations": int(d.get("inner_monotone_violations", 0)),
        "objective_increases": int(np.sum(np.diff(d.get("objective_trace", [])) > 0)),
        "runtime": float(runtime),
    }


def _trial_job(args):
    config, value, trial = args
    return run_trial(config, value, trial)


def run_sweep(config: ExperimentConfig, progress=None) -> list[dict]:
    """Run every (point, trial) of the configured sweep; rows in (point, trial, method) order."""
    if config.scenario == "audio_frames":
        raise ConfigError("audio_frames runs through run_audio_frames")
    _, values = config.sweep
    jobs = [(config, v, t) for v in values for t in range(config.n_trials)]
    rows = []
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            for i, out in enumerate(pool.map(_trial_job, jobs, chunksize=1)):
                rows.extend(out)
                if progress:
                    progress(i + 1, len(jobs))
    else:
        for i, job in enumerate(jobs):
            rows.extend(_trial_job(job))
            if progress:
                progress(i + 1, len(jobs))
    return rows


def run_snr_sweep(config: ExperimentConfig, **kw) -> list[dict]:
    return run_sweep(config.with_(scenario="snr_sweep", signal=replace(config.signal, kappa=0.0)), **kw)


def run_inharmonicity_sweep(config: ExperimentConfig, **kw) -> list[dict]:
    return run_sweep(config.with_(scenario="inharmonicity_sweep"), **kw)


def run_gridpoint_sweep(config: ExperimentConfig, **kw) -> list[dict]:
    return run_sweep(config.with_(scenario="gridpoint_sweep", signal=replace(config.signal, kappa=0.0)),
                     **kw)


def _field(row, key):
    v = row[key]
    return json.loads(v) if isinstance(v, str) else v


def rescore(row: dict) -> float:
    """GER recomputed from the persisted pitch lists of a result row."""
    return match_and_ger(_field(row, "true_f0s"), _field(row, "est_f0s"))[1]


def rescore_w2(row: dict) -> float:
    """W2 recomputed from the persisted line spectra of a result row."""
    return lines_w2(_field(row, "est_lines"), _field(row, "true_lines"))


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------

def run_audio_frames(path, config: ExperimentConfig) -> list[dict]:
    """Pitch track of a recording, one estimate per frame.

    Frames are ``round(frame_ms * fs / 1000)`` samples with hop ``hop_ms``
    (default: the frame length). Real input is made analytic per frame. Silent
    frames give empty pitch lists.
    """
    x, fs = read_samples(path, config.audio_sample_rate)
    if x.size == 0:
        raise DataError("input contains no samples")
    if not np.all(np.isfinite(x)):
        raise DataError("input contains non-finite samples")
    n = int(round(config.frame_ms * fs / 1000.0))
    hop = n if config.hop_ms is None else int(round(config.hop_ms * fs / 1000.0))
    if n < 4 or hop < 1:
        raise ConfigError("frame too short for this sample rate")
    if x.size < n:
        raise DataError(f"recording shorter than one frame ({x.size} < {n} samples)")
    grid = config.grid
    if grid.freq_max_hz is None:
        # music frames: keep the grid on the band holding the partials
        grid = replace(grid, freq_max_hz=min(AUDIO_BAND_HZ, 0.5 * fs))
    fg, pg = grid.build(fs)
    track = []
    for i, start in enumerate(range(0, x.size - n + 1, hop)):
        frame = x[start:start + n]
        entry = {"frame": i, "start_s": start / fs, "pitches_hz": [], "masses": {}}
        z = analytic_signal(frame) if np.isrealobj(frame) else frame.astype(complex)
        power = float(np.mean(np.abs(z) ** 2))
        if power <= 1e-20:
            for m in config.methods:
                entry["masses"][m] = []
            entry["pitches_hz"] = {m: [] for m in config.methods}
            track.append(entry)
            continue
        z, _ = normalize_unit_variance(z)
        entry["pitches_hz"] = {}
        for m in config.methods:
            res = _estimate(m, z, fg, pg, config.hyperparams(m).with_(time_budget=config.trial_budget_s),
                            (grid, fs))
            entry["pitches_hz"][m] = res.f0s
            entry["masses"][m] = [p[2] for p in res.active_pitches]
        track.append(entry)
    return track


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def _ok(rows):
    return [r for r in rows if r["status"] in ("ok", "budget_exceeded")]


def emit_plot_data(rows: list[dict], scenario: str, out_dir) -> list[Path]:
    """CSV tables behind the figures: GER and W2 summaries per sweep point and method."""
    out_dir = Path(out_dir)
    rows = _ok(rows)
    written = []
    name = {"snr_sweep": "ger_vs_snr", "inharmonicity_sweep": "ger_vs_kappa",
            "gridpoint_sweep": "ger_vs_F", "single_run": "ger_single", "w2_cdf": "ger_w2_cdf"}.get(scenario)
    if name is None:
        raise ConfigError(f"no plot data for scenario {scenario!r}")
    keys = sorted({(r["value"], r["method"]) for r in rows})
    table = []
    for v, m in keys:
        sel = [r for r in rows if r["value"] == v and r["method"] == m]
        w2 = summarize([r["w2"] for r in sel])
        table.append({"parameter": sel[0]["parameter"], "value": v, "method": m, "trials": len(sel),
                      "ger_mean": float(np.mean([r["ger"] for r in sel])),
                      "w2_median": w2["median"], "w2_q25": w2["q25"], "w2_q75": w2["q75"],
                      "runtime_mean": float(np.mean([r["runtime"] for r in sel]))})
    written.append(write_csv(out_dir / f"{name}.csv", table))
    if scenario in ("inharmonicity_sweep", "w2_cdf"):
        written.append(write_csv(out_dir / "median_w2_vs_kappa.csv",
                                 [{k: t[k] for k in ("value", "method", "w2_median", "trials")} for t in table]))
        cdf_rows = []
        for v, m in keys:
            vals, probs = ecdf([r["w2"] for r in rows if r["value"] == v and r["method"] == m
                                and math.isfinite(r["w2"])])
            cdf_rows += [{"kappa": v, "method": m, "w2": a, "cdf": b} for a, b in zip(vals, probs)]
        written.append(write_csv(out_dir / "w2_cdf.csv", cdf_rows, ["kappa", "method", "w2", "cdf"]))
    return written


def save_results(rows: list[dict], config: ExperimentConfig, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    return [write_csv(out_dir / "results.csv", rows, RESULT_COLUMNS),
            write_json(out_dir / "config.json", config.to_dict())]


_INT_COLS = ("trial", "n_true", "n_est", "outer_iterations", "inner_violations", "objective_increases")
_FLOAT_COLS = ("value", "ger", "w2", "final_objective", "runtime")


def load_results(path) -> list[dict]:
    """Rows of a ``results.csv`` with their column types restored."""
    from .io import read_csv_rows

    try:
        raw = read_csv_rows(path)
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    rows = []
    for r in raw:
        missing = [c for c in RESULT_COLUMNS if c not in r]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        try:
            r = dict(r)
            for c in _INT_COLS:
                r[c] = int(r[c])
            for c in _FLOAT_COLS:
                r[c] = float(r[c])
            for c in ("true_f0s", "est_f0s", "true_lines", "est_lines"):
                r[c] = json.loads(r[c])
        except (ValueError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: malformed row: {exc}") from exc
        rows.append(r)
    return rows
