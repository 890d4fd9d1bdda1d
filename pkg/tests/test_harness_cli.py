import json
import math

import numpy as np
import pytest
from scipy.io import wavfile

from otpitch import harness
from otpitch.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from otpitch.harness import ConfigError, ExperimentConfig, GridConfig
from otpitch.io import DataError, read_csv_rows, read_samples, write_signal
from otpitch.signal_model import SignalConfig

SMALL = {
    "grid": {"n_freqs": 400, "freq_max_hz": 2000.0, "pitch_lo_hz": 150.0, "pitch_hi_hz": 350.0,
             "n_pitches": 101},
    "signal": {"nominal_f0s": [197.0, 272.0], "order_range": [3, 5]},
    "methods": ["det"],
    "trials": 2,
    "seed": 11,
}


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


# ---------------------------------------------------------------- config

def test_config_defaults():
    c = ExperimentConfig()
    assert c.n_trials == 50 and c.with_(scenario="w2_cdf").n_trials == 150
    assert c.with_(scenario="w2_cdf", trials=7).n_trials == 7
    assert c.methods == ("stoch", "det") and c.snr_db == 20.0
    assert c.grid == GridConfig() and c.grid.n_freqs == 2260 and c.grid.n_pitches == 226
    assert c.with_(scenario="snr_sweep").sweep == ("snr_db", [0, 5, 10, 15, 20])
    assert c.with_(scenario="gridpoint_sweep").sweep[1][-1] == 2260
    assert c.with_(scenario="inharmonicity_sweep").point_snr() == 5.0
    assert ExperimentConfig.from_dict(c.to_dict()) == c


@pytest.mark.parametrize("bad", [
    {"trials": 0}, {"methods": ["fast"]}, {"methods": []}, {"seed": -1}, {"seed": 2**64},
    {"scenario": "nope"}, {"colour": "red"}, {"hyper": {"det": {"eta": -1}}},
    {"hyper": {"other": {}}}, {"grid": {"n_freqs": 10, "bogus": 1}}, {"jobs": 0},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_load_config(tmp_path, small_cfg):
    c = harness.load_config(small_cfg, trials=5, seed=None)
    assert c.trials == 5 and c.seed == 11 and c.signal.nominal_f0s == (197.0, 272.0)
    with pytest.raises(ConfigError):
        harness.load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        harness.load_config(bad)


def test_hyper_override():
    c = ExperimentConfig(hyper={"det": {"beta": 0.1}})
    assert c.hyperparams("det").beta == 0.1
    assert c.hyperparams("stoch").beta == 1.5e-2
    assert ExperimentConfig(scenario="audio_frames").hyperparams("det").eta == 5e-3


def test_trial_rng_common_random_numbers():
    a = harness.trial_rng(3, 7).standard_normal(4)
    assert np.array_equal(a, harness.trial_rng(3, 7).standard_normal(4))
    assert not np.array_equal(a, harness.trial_rng(3, 8).standard_normal(4))
    assert not np.array_equal(a, harness.trial_rng(4, 7).standard_normal(4))


# ---------------------------------------------------------------- sweeps

def test_sweep_reproducible(small_cfg):
    cfg = harness.load_config(small_cfg).with_(scenario="snr_sweep", sweep_values=(5.0, 20.0))
    rows = harness.run_sweep(cfg)
    assert len(rows) == 4 and [r["trial"] for r in rows] == [0, 1, 0, 1]
    assert set(rows[0]) == set(harness.RESULT_COLUMNS)
    # same trial index, same signal at every sweep point
    assert rows[0]["true_f0s"] == rows[2]["true_f0s"]
    again = harness.run_sweep(cfg)
    for a, b in zip(rows, again):
        assert {k: v for k, v in a.items() if k != "runtime"} == {k: v for k, v in b.items() if k != "runtime"}
    for r in rows:
        assert r["status"] == "ok" and 0 <= r["ger"] <= 1 and r["n_true"] == 2
        assert r["ger"] == harness.rescore(r)
        assert r["w2"] == harness.rescore_w2(r)
        assert r["est_lines"] and all(a > 0 for _, a in r["est_lines"])
    assert all(r["ger"] == 0 for r in rows if r["value"] == 20.0)


def test_sweep_parallel_matches(small_cfg):
    cfg = harness.load_config(small_cfg).with_(scenario="single_run")
    serial = harness.run_sweep(cfg)
    par = harness.run_sweep(cfg.with_(jobs=2))
    strip = lambda rs: [{k: v for k, v in r.items() if k != "runtime"} for r in rs]
    assert strip(serial) == strip(par)


def test_sweep_helpers_force_their_scenario(small_cfg):
    cfg = harness.load_config(small_cfg).with_(trials=1, sweep_values=(400,))
    rows = harness.run_gridpoint_sweep(cfg)
    assert rows[0]["scenario"] == "gridpoint_sweep" and rows[0]["parameter"] == "n_freqs"
    rows = harness.run_inharmonicity_sweep(cfg.with_(sweep_values=(0.01,)))
    assert rows[0]["parameter"] == "kappa" and rows[0]["value"] == 0.01


def test_budget_status(small_cfg):
    cfg = harness.load_config(small_cfg).with_(trials=1, trial_budget_s=1e-9)
    (row,) = harness.run_sweep(cfg)
    assert row["status"] == "budget_exceeded" and row["stop_reason"] == "time_budget"


def test_results_round_trip_and_plots(tmp_path, small_cfg):
    cfg = harness.load_config(small_cfg).with_(scenario="inharmonicity_sweep", sweep_values=(0.0, 0.02))
    rows = harness.run_sweep(cfg)
    paths = harness.save_results(rows, cfg, tmp_path)
    back = harness.load_results(paths[0])
    assert len(back) == len(rows)
    for a, b in zip(rows, back):
        for k in harness.RESULT_COLUMNS:
            if isinstance(a[k], float) and math.isnan(a[k]):
                assert math.isnan(b[k])
            else:
                assert a[k] == b[k], k
        assert harness.rescore(b) == b["ger"]
        w2 = harness.rescore_w2(b)
        assert w2 == b["w2"] or (math.isnan(w2) and math.isnan(b["w2"]))
    assert json.loads(paths[1].read_text())["scenario"] == "inharmonicity_sweep"
    out = harness.emit_plot_data(back, "inharmonicity_sweep", tmp_path)
    assert sorted(p.name for p in out) == ["ger_vs_kappa.csv", "median_w2_vs_kappa.csv", "w2_cdf.csv"]
    table = read_csv_rows(tmp_path / "ger_vs_kappa.csv")
    assert [float(t["value"]) for t in table] == [0.0, 0.02]
    assert all(int(t["trials"]) == 2 for t in table)
    cdf = read_csv_rows(tmp_path / "w2_cdf.csv")
    assert float(cdf[-1]["cdf"]) == 1.0


def test_load_results_errors(tmp_path):
    with pytest.raises(DataError):
        harness.load_results(tmp_path / "none.csv")
    p = tmp_path / "r.csv"
    p.write_text("scenario,value\nx,1\n")
    with pytest.raises(DataError):
        harness.load_results(p)


def test_amplitude_spectrum():
    np.testing.assert_allclose(harness.amplitude_spectrum(np.array([4.0, 0.25]), "stoch"), [2.0, 0.5])
    np.testing.assert_allclose(harness.amplitude_spectrum(np.array([3 + 4j, -1]), "det"), [5.0, 1.0])


# ---------------------------------------------------------------- audio

def _sawtooth(fs, seconds, f0=220.0):
    t = np.arange(int(fs * seconds)) / fs
    return sum(np.sin(2 * np.pi * l * f0 * t) / l for l in range(1, 6)) / 2.5


def test_audio_frames(tmp_path):
    fs = 8000
    x = np.concatenate([_sawtooth(fs, 0.06), np.zeros(240)])
    path = tmp_path / "saw.wav"
    wavfile.write(path, fs, (x * 20000).astype(np.int16))
    cfg = ExperimentConfig(scenario="audio_frames", methods=("det",),
                           grid=GridConfig(n_freqs=600, pitch_lo_hz=100, pitch_hi_hz=400, n_pitches=151))
    track = harness.run_audio_frames(path, cfg)
    assert len(track) == 3  # round(0.03 * 8000) = 240 samples per frame
    assert [f["start_s"] for f in track] == [0.0, 0.03, 0.06]
    for fr in track[:2]:
        assert any(abs(f - 220) <= 4 for f in fr["pitches_hz"]["det"])
    assert track[2]["pitches_hz"] == {"det": []}


def test_audio_frames_default_settings(tmp_path):
    # real-data presets and the default grids; two tone frames and one silent frame
    fs = 8000
    x = np.concatenate([_sawtooth(fs, 0.06), np.zeros(240)])
    path = tmp_path / "saw.wav"
    wavfile.write(path, fs, (x * 20000).astype(np.int16))
    track = harness.run_audio_frames(path, ExperimentConfig(scenario="audio_frames"))
    assert len(track) == 3
    for fr in track[:2]:
        for m in harness.METHODS:
            f0s, mass = fr["pitches_hz"][m], fr["masses"][m]
            assert abs(1200 * np.log2(f0s[int(np.argmax(mass))] / 220.0)) <= 50
    assert track[2]["pitches_hz"] == {"stoch": [], "det": []}


def test_audio_errors(tmp_path):
    cfg = ExperimentConfig(scenario="audio_frames")
    with pytest.raises(DataError):
        harness.run_audio_frames(tmp_path / "missing.wav", cfg)
    short = tmp_path / "short.csv"
    short.write_text("0.1\n0.2\n")
    with pytest.raises(DataError):
        harness.run_audio_frames(short, cfg.with_(audio_sample_rate=8000.0))
    with pytest.raises(DataError):
        read_samples(short)


def test_write_signal(tmp_path):
    z = np.array([1 + 2j, -0.5j, 3.25])
    paths = write_signal(tmp_path / "sig.csv", z, {"f0": [200.0]})
    rows = read_csv_rows(paths[0])
    back = np.array([float(r["real"]) + 1j * float(r["imag"]) for r in rows])
    assert np.array_equal(back, z)
    assert json.loads(paths[1].read_text()) == {"f0": [200.0]}


# ---------------------------------------------------------------- CLI

def test_cli_simulate_and_emit(tmp_path, small_cfg, capsys):
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(small_cfg), "--trials", "1", "--out", str(out)]) == EXIT_OK
    assert (out / "results.csv").is_file() and (out / "ger_single.csv").is_file()
    assert "det: mean GER" in capsys.readouterr().out
    (out / "ger_single.csv").unlink()
    assert main(["emit-plots", "--out", str(out)]) == EXIT_OK
    assert (out / "ger_single.csv").is_file()


def test_cli_exit_codes(tmp_path, small_cfg):
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(small_cfg), "--trials", "0"]) == EXIT_CONFIG
    assert main(["emit-plots", "--results", str(tmp_path / "nope.csv")]) == EXIT_DATA
    assert main(["estimate-audio", str(tmp_path / "nope.wav"), "--out", str(tmp_path)]) == EXIT_DATA
    with pytest.raises(SystemExit):
        main(["sweep-snr", "--method", "slow"])


def test_cli_estimate_audio(tmp_path):
    fs = 8000.0
    p = tmp_path / "saw.csv"
    np.savetxt(p, _sawtooth(fs, 0.03))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"grid": {"n_freqs": 600, "pitch_lo_hz": 100, "pitch_hi_hz": 400,
                                        "n_pitches": 151}}))
    code = main(["estimate-audio", str(p), "--sample-rate", "8000", "--method", "det",
                 "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    track = json.loads((tmp_path / "o" / "track.json").read_text())
    assert len(track["frames"]) == 1
    assert (tmp_path / "o" / "track.csv").is_file()


def test_cli_selftest(capsys):
    assert main(["selftest"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out
