import numpy as np
import pytest
from scipy.optimize import nnls

from otpitch.dictionary import build_dictionary
from otpitch.estimators import (
    DETERMINISTIC_SIM,
    STOCHASTIC_SIM,
    Hyperparams,
    Workspace,
    data_weight,
    debias_deterministic,
    debias_stochastic,
    estimate_deterministic,
    estimate_stochastic,
    extract_pitches,
    restricted_cmin,
)
from otpitch.grids import FrequencyGrid, PitchGrid, cost_matrix, uniform_frequency_grid, uniform_pitch_grid
from otpitch.signal_model import (
    add_noise,
    generate_component,
    model_covariance,
    normalize_unit_variance,
    sample_autocovariance,
)

FS = 8000.0


@pytest.fixture(scope="module")
def grids():
    # 2.5 Hz frequency spacing up to 2 kHz, 2 Hz pitch spacing on 150-350 Hz:
    # 200 Hz and its harmonics lie on both grids
    fg = uniform_frequency_grid(800, 0.0, 2 * np.pi * 2000 / FS)
    pg = uniform_pitch_grid(150, 350, 101, FS)
    return fg, pg


@pytest.fixture(scope="module")
def lag_ws(grids):
    return Workspace(*grids, 166, "lag")


@pytest.fixture(scope="module")
def time_ws(grids):
    return Workspace(*grids, 250, "time")


def test_hyperparams():
    assert (STOCHASTIC_SIM.eta, STOCHASTIC_SIM.zeta, STOCHASTIC_SIM.epsilon, STOCHASTIC_SIM.beta) == \
        (1e-1, 1e1, 1e-6, 1.5e-2)
    assert (STOCHASTIC_SIM.debias_zeta, STOCHASTIC_SIM.debias_beta) == (1e0, 4.5e-2)
    assert (DETERMINISTIC_SIM.eta, DETERMINISTIC_SIM.zeta, DETERMINISTIC_SIM.epsilon, DETERMINISTIC_SIM.beta) == \
        (3e-2, 6e0, 1e-5, 8e-2)
    assert (DETERMINISTIC_SIM.debias_zeta, DETERMINISTIC_SIM.debias_beta) == (6e0, 4e1)
    assert DETERMINISTIC_SIM.max_outer_iters == 2000 and DETERMINISTIC_SIM.outer_tol == 1e-7
    assert Hyperparams.from_dict(STOCHASTIC_SIM.to_dict()) == STOCHASTIC_SIM
    with pytest.raises(ValueError):
        Hyperparams.from_dict({**STOCHASTIC_SIM.to_dict(), "gamma": 1})
    for bad in ({"eta": 0.0}, {"pitch_mass_threshold": 1.0}, {"datafit": "l1"}, {"step_rule": "x"}):
        with pytest.raises(ValueError):
            STOCHASTIC_SIM.with_(**bad)
    assert data_weight("mean", 4) == 0.25 and data_weight("half", 4) == 0.5 and data_weight("sum", 4) == 1
    with pytest.raises(ValueError):
        data_weight("bogus", 3)


def test_extract_pitches():
    assert extract_pitches(np.array([0, 0, 5.0, 0.1, 0])) == [2]
    assert extract_pitches(np.array([0, 3.0, 4.0, 0, 0])) == [2]
    assert extract_pitches(np.array([0, 4.0, 4.0, 0, 0])) == [1]
    assert extract_pitches(np.array([1.0, 0, 1.0, 0, 1.0])) == [0, 2, 4]
    assert extract_pitches(np.zeros(4)) == []
    assert extract_pitches(np.ones(4), threshold=0.5, merge_radius=0) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        extract_pitches(np.array([-1.0, 1.0]))


def test_extract_pitches_merge_rule_exhaustive():
    # every mass pattern on 6 bins with values in {0, 1, 2, 3}
    import itertools

    for pat in itertools.product(range(4), repeat=6):
        m = np.array(pat, float)
        got = extract_pitches(m, threshold=0.5)
        if m.max() == 0:
            assert got == []
            continue
        act = [i for i in range(6) if m[i] >= 0.5 * m.max()]
        ref = [i for i in act
               if all(m[i] > m[j] or (m[i] == m[j] and i < j) for j in act if j != i and abs(i - j) <= 1)]
        assert got == ref
        for i, j in zip(got, got[1:]):
            assert j - i > 1


def test_stochastic_single_pitch(grids, lag_ws):
    fg, pg = grids
    c = generate_component(200.0, 3, np.ones(3) / np.sqrt(3), 0.0, FS)
    r = model_covariance([c], 166)
    res = estimate_stochastic(r, fg, pg, workspace=lag_ws)
    assert res.f0s == [pytest.approx(200.0)]
    nz = np.flatnonzero(res.spectrum > 1e-6)
    assert nz.tolist() == [80, 160, 240]
    np.testing.assert_allclose(res.spectrum[nz], 1 / 3, atol=1e-3)
    assert np.all(res.raw_spectrum > 0)
    assert res.diagnostics["debias"]["converged"]


def test_stochastic_zero_covariance(grids, lag_ws):
    res = estimate_stochastic(np.zeros(166, complex), *grids, workspace=lag_ws)
    assert res.active_pitches == [] and np.all(res.spectrum == 0)


def test_deterministic_single_tone(grids, time_ws):
    fg, pg = grids
    y = np.exp(1j * fg.freqs[100] * np.arange(250))  # 250 Hz, on both grids
    res = estimate_deterministic(y, fg, pg, workspace=time_ws)
    assert res.f0s == [pytest.approx(250.0)]
    nz = np.flatnonzero(np.abs(res.spectrum) > 1e-6)
    assert nz.tolist() == [100]
    tr = res.diagnostics["objective_trace"]
    assert all(b <= a for a, b in zip(tr, tr[1:]))
    # the main problem spreads the tone over a few neighbouring bins at most
    assert set(np.flatnonzero(np.abs(res.raw_spectrum) > 1e-3)) <= set(range(95, 106))


def test_deterministic_zero_signal(grids, time_ws):
    res = estimate_deterministic(np.zeros(250, complex), *grids, workspace=time_ws)
    assert res.active_pitches == []
    assert np.all(res.spectrum == 0) and np.all(res.raw_spectrum == 0)


def _noisy_two_pitch(seed, snr=15.0):
    rng = np.random.default_rng(seed)
    comps = [generate_component(f, 4, np.exp(1j * rng.uniform(0, 6.28, 4)), 0.0, FS) for f in (196.0, 268.0)]
    x = sum(c.waveform(250) for c in comps)
    y = add_noise(x, snr, rng, 8.0)
    return comps, y


def test_deterministic_recovers_two_pitches(grids, time_ws):
    comps, y = _noisy_two_pitch(1)
    y, _ = normalize_unit_variance(y)
    res = estimate_deterministic(y, *grids, workspace=time_ws)
    assert {196.0, 268.0} <= {round(f) for f in res.f0s}
    # debiased support sits on harmonics of the detected pitches
    fg = grids[0]
    w0 = np.array([p[0] for p in res.active_pitches])
    for f in fg.freqs[np.abs(res.spectrum) > 0]:
        ratio = f / w0
        assert np.min(np.abs(ratio - np.round(ratio)) * w0) <= 2 * (fg.freqs[1] - fg.freqs[0]) + 1e-12
    assert res.diagnostics["inner_monotone_violations"] == 0


def test_scale_and_determinism(grids, time_ws, lag_ws):
    _, y = _noisy_two_pitch(2)
    a = estimate_deterministic(normalize_unit_variance(y)[0], *grids, workspace=time_ws)
    b = estimate_deterministic(normalize_unit_variance(2 * y)[0], *grids, workspace=time_ws)
    c = estimate_deterministic(normalize_unit_variance(y)[0], *grids, workspace=time_ws)
    assert a.f0s == b.f0s
    assert a.f0s == c.f0s and np.array_equal(a.spectrum, c.spectrum)
    assert a.diagnostics["objective_trace"] == c.diagnostics["objective_trace"]
    r1 = sample_autocovariance(normalize_unit_variance(y)[0], 166)
    r2 = sample_autocovariance(normalize_unit_variance(2 * y)[0], 166)
    h = STOCHASTIC_SIM.with_(max_outer_iters=300)
    s1 = estimate_stochastic(r1, *grids, h, workspace=lag_ws)
    s2 = estimate_stochastic(r2, *grids, h, workspace=lag_ws)
    assert s1.f0s == s2.f0s
    assert np.all(s1.raw_spectrum > 0)


def test_time_budget(grids, time_ws):
    _, y = _noisy_two_pitch(3)
    res = estimate_deterministic(y, *grids, DETERMINISTIC_SIM.with_(time_budget=1e-9), workspace=time_ws)
    assert res.diagnostics["stop_reason"] == "time_budget"


def test_workspace_mismatch(grids, time_ws):
    with pytest.raises(ValueError):
        estimate_deterministic(np.ones(100, complex), *grids, workspace=time_ws)


# ---------------------------------------------------------------- debiasing

def test_debias_stochastic_matches_nnls(rng):
    fg = FrequencyGrid(np.sort(rng.uniform(0, np.pi, 15)))
    pg = PitchGrid(np.array([0.3, 0.5]))
    T = 12
    A = build_dictionary(fg, T, "lag").stacked
    nu_true = np.zeros(15)
    nu_true[[2, 9]] = [0.8, 0.4]
    r = build_dictionary(fg, T, "lag").matrix @ nu_true + 0.01 * (rng.standard_normal(T) + 1j * rng.standard_normal(T))
    tiny = STOCHASTIC_SIM.with_(debias_beta=1e-12, debias_zeta=1e-12)
    nu, info = debias_stochastic(r, fg, pg, tiny)
    ref, _ = nnls(A, np.concatenate([r.real, r.imag]), maxiter=10000)
    np.testing.assert_allclose(nu, ref, atol=1e-6)
    assert info["converged"]


def test_debias_stochastic_kkt(rng):
    fg = uniform_frequency_grid(60, 0.0, 1.5)
    pg = PitchGrid(np.array([0.25, 0.4]))
    r = rng.standard_normal(20) + 1j * rng.standard_normal(20)
    nu, info = debias_stochastic(r, fg, pg, STOCHASTIC_SIM)
    A = build_dictionary(fg, 20, "lag").stacked
    rr = np.concatenate([r.real, r.imag])
    g = 2 * 0.5 * A.T @ (A @ nu - rr) + STOCHASTIC_SIM.debias_beta + STOCHASTIC_SIM.debias_zeta * restricted_cmin(fg, pg)
    assert np.all(nu >= 0)
    assert np.max(np.abs(g[nu > 0])) <= 1e-6
    assert np.all(g[nu == 0] >= -1e-6)


def test_debias_stochastic_single_pitch(grids, lag_ws):
    fg, pg = grids
    c = generate_component(200.0, 3, np.ones(3), 0.0, FS)
    powers = [np.array([0.5, 0.3, 0.2])]
    r = model_covariance([c], 166, powers)
    active = pg.subset([25])  # 200 Hz
    nu, _ = debias_stochastic(r, fg, active, STOCHASTIC_SIM, ws=lag_ws)
    np.testing.assert_allclose(nu[[80, 160, 240]], powers[0], atol=1e-3)
    assert np.all(np.delete(nu, [80, 160, 240]) <= 1e-3)


def test_debias_deterministic_closed_form():
    # one atom: min ||y - a mu||^2 + wt |mu| has mu = soft(a^H y, wt/2) / N
    fg = FrequencyGrid(np.array([0.4]))
    pg = PitchGrid(np.array([0.4]))
    N = 30
    a = np.exp(1j * 0.4 * np.arange(N))
    y = (1.5 - 0.5j) * a
    mu, _ = debias_deterministic(y, fg, pg, DETERMINISTIC_SIM)
    z = np.vdot(a, y)
    wt = DETERMINISTIC_SIM.debias_beta
    ref = z / abs(z) * max(abs(z) - wt / 2, 0) / N
    assert mu[0] == pytest.approx(ref, abs=1e-10)


def test_debias_deterministic_equal_weights_is_lasso(rng):
    F, N = 12, 10
    fg = FrequencyGrid(np.sort(rng.uniform(0, np.pi, F)))
    pg = PitchGrid(np.array([0.5]))
    y = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    h = DETERMINISTIC_SIM.with_(debias_zeta=1e-300, debias_beta=2.0)
    mu, _ = debias_deterministic(y, fg, pg, h)
    A = build_dictionary(fg, N).matrix
    # soft-threshold fixed point of the proximal gradient map
    t = 1.0 / (2 * np.linalg.norm(A, 2) ** 2)
    z = mu - t * 2 * A.conj().T @ (A @ mu - y)
    fixed = z / np.maximum(np.abs(z), 1e-300) * np.maximum(np.abs(z) - t * 2.0, 0)
    np.testing.assert_allclose(mu, fixed, atol=1e-8)


def test_debias_empty_and_zero(grids):
    fg, pg = grids
    nu, _ = debias_stochastic(np.ones(10, complex), fg, None, STOCHASTIC_SIM)
    assert np.all(nu == 0)
    mu, _ = debias_deterministic(np.zeros(50, complex), fg, pg.subset([3]), DETERMINISTIC_SIM)
    assert np.all(mu == 0)


def test_restricted_cmin(grids):
    fg, pg = grids
    sub = pg.subset([4, 40])
    np.testing.assert_array_equal(restricted_cmin(fg, sub), cost_matrix(fg, sub).c_min)
    C = cost_matrix(fg, pg)
    np.testing.assert_array_equal(restricted_cmin(fg, sub, C.columns([4, 40])), cost_matrix(fg, sub).c_min)
