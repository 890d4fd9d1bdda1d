"""
Outer loops of the two estimators, pitch read-off and the debiasing refits.

``estimate_stochastic`` works on sample covariances with a nonnegative power
spectrum and a Kullback-Leibler (mirror descent) proximal gradient scheme;
``estimate_deterministic`` works on waveform samples with a complex line
spectrum and a Euclidean proximal gradient scheme. Both share the transport
regularizer of :mod:`otpitch.ot_core` and its warm-started dual sweeps.

Data-fit weights
----------------
The squared residual is multiplied by ``1/rows`` ("mean"), ``1/2`` ("half") or
``1`` ("sum"). The stochastic presets use "half" and the deterministic main
problem uses "mean"; see :class:`Hyperparams`.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dictionary import FourierDictionary, build_dictionary
from .grids import CostMatrix, FrequencyGrid, PitchGrid, cost_matrix
from .ot_core import WarmSweeper
from .signal_model import CovarianceSequence

__all__ = [
    "Hyperparams",
    "EstimationResult",
    "Workspace",
    "STOCHASTIC_SIM",
    "DETERMINISTIC_SIM",
    "STOCHASTIC_AUDIO",
    "DETERMINISTIC_AUDIO",
    "data_weight",
    "estimate_stochastic",
    "estimate_deterministic",
    "extract_pitches",
    "restricted_cmin",
    "debias_stochastic",
    "debias_deterministic",
    "stochastic_objective",
    "deterministic_objective",
]

log = logging.getLogger(__name__)

NU_FLOOR = 1e-300
_LOG_FLOOR = float(np.log(NU_FLOOR))
_WEIGHTS = ("mean", "half", "sum")


@dataclass(frozen=True)
class Hyperparams:
    """Regularization weights and loop controls for one estimator.

    ``step_scale`` multiplies the base step. The base step is ``1/L`` with
    ``L = 2 w ||A||^2`` (``w`` the data-fit weight) when ``step_rule`` is
    "lipschitz"; "relative" uses ``L = 2 w rows r(0)``, a relative-smoothness
    constant of the data fit with respect to the entropy on spectra of
    total power up to ``r(0)`` (stochastic only).

    After a gradient step whose prox output raises the objective, up to
    ``refine_rounds`` extra batches of ``refine_sweeps`` dual sweeps are run on
    the same prox problem. If the objective still went up, the deterministic
    loop keeps the previous iterate. The stochastic loop halves the step when
    ``step_halving`` is on and otherwise accepts the increase.
    """

    eta: float
    zeta: float
    epsilon: float
    beta: float
    debias_zeta: float
    debias_beta: float
    max_outer_iters: int = 2000
    outer_tol: float = 1e-7
    pitch_mass_threshold: float = 0.1
    merge_radius: int = 1
    datafit: str = "mean"
    debias_datafit: str = "mean"
    step_rule: str = "lipschitz"
    step_scale: float = 1.0
    step_halving: bool = False
    sweeps_per_iter: int = 1
    refine_sweeps: int = 3
    refine_rounds: int = 2
    max_stalls: int = 3
    debias_tol: float = 1e-8
    debias_max_iters: int = 20000
    time_budget: float | None = None

    def __post_init__(self):
        for name in ("eta", "zeta", "epsilon", "beta", "debias_zeta", "debias_beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.pitch_mass_threshold < 1:
            raise ValueError("pitch_mass_threshold must lie in (0, 1)")
        if self.max_outer_iters < 1 or self.outer_tol <= 0:
            raise ValueError("max_outer_iters must be >= 1 and outer_tol > 0")
        if self.datafit not in _WEIGHTS or self.debias_datafit not in _WEIGHTS:
            raise ValueError(f"datafit weights must be one of {_WEIGHTS}")
        if self.step_rule not in ("lipschitz", "relative"):
            raise ValueError("step_rule must be 'lipschitz' or 'relative'")
        if self.merge_radius < 0 or self.sweeps_per_iter < 1 or self.step_scale <= 0:
            raise ValueError("invalid loop controls")

    def with_(self, **kw) -> "Hyperparams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown hyperparameters: {sorted(extra)}")
        return cls(**d)


STOCHASTIC_SIM = Hyperparams(
    eta=1e-1, zeta=1e1, epsilon=1e-6, beta=1.5e-2, debias_zeta=1e0, debias_beta=4.5e-2,
    datafit="half", debias_datafit="half", step_rule="relative",
)
DETERMINISTIC_SIM = Hyperparams(
    eta=3e-2, zeta=6e0, epsilon=1e-5, beta=8e-2, debias_zeta=6e0, debias_beta=4e1,
    datafit="mean", debias_datafit="sum",
)
# real recordings: main weights from the audio table, debias weights shared with simulation
STOCHASTIC_AUDIO = STOCHASTIC_SIM.with_(eta=1e-2, zeta=1e-1, epsilon=1e-5, beta=3.4e-2)
DETERMINISTIC_AUDIO = DETERMINISTIC_SIM.with_(eta=5e-3, zeta=1e-1, epsilon=1e-5, beta=2.8e-2)


def data_weight(kind: str, rows: int) -> float:
    """Multiplier of ``||residual||^2`` for the named convention."""
    if kind == "mean":
        return 1.0 / rows
    if kind == "half":
        return 0.5
    if kind == "sum":
        return 1.0
    raise ValueError(f"unknown data-fit weight {kind!r}")


class Workspace:
    """Dictionary, cost matrix and operator norm shared by repeated estimates.

    Everything here is read-only after construction, so one workspace can
    serve any number of estimates (also from several threads).
    """

    def __init__(self, freq_grid: FrequencyGrid, pitch_grid: PitchGrid, rows: int, mode: str,
                 cost: CostMatrix | None = None):
        self.freq_grid = freq_grid
        self.pitch_grid = pitch_grid
        self.dictionary: FourierDictionary = build_dictionary(freq_grid, rows, mode)
        self.cost = cost if cost is not None else cost_matrix(freq_grid, pitch_grid)
        self.C = np.ascontiguousarray(self.cost.entries, dtype=float)
        self.norm = self.dictionary.norm
        self.stacked = np.ascontiguousarray(self.dictionary.stacked) if mode == "lag" else None

    @property
    def rows(self) -> int:
        return self.dictionary.rows


@dataclass
class EstimationResult:
    """Active pitches, spectra and diagnostics of one estimate.

    ``active_pitches`` holds ``(omega0 [rad/sample], f0 [Hz], mass)`` sorted by
    frequency. ``spectrum`` is the debiased spectrum and ``raw_spectrum`` the
    output of the regularized problem; ``plan`` is the final transport plan.
    """

    active_pitches: list
    spectrum: np.ndarray
    raw_spectrum: np.ndarray
    plan: np.ndarray | None
    pitch_mass: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def f0s(self) -> list[float]:
        return [p[1] for p in self.active_pitches]

    def to_dict(self, include_spectrum: bool = False) -> dict:
        d = {
            "active_pitches": [
                {"omega0": float(w), "f0_hz": float(f), "mass": float(m)}
                for w, f, m in self.active_pitches
            ],
            "diagnostics": self.diagnostics,
        }
        if include_spectrum:
            s = np.asarray(self.spectrum)
            if np.iscomplexobj(s):
                d["spectrum_real"] = s.real.tolist()
                d["spectrum_imag"] = s.imag.tolist()
            else:
                d["spectrum"] = s.tolist()
        return d


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def stochastic_objective(dic: FourierDictionary, nu, r_hat, M, C, hyper: Hyperparams) -> float:
    """``w ||r - A nu||^2 + beta sum(nu) + zeta (<C,M> + eps D(M) + eta ||M||_{inf,1})``."""
    from .ot_core import transport_objective

    r = r_hat.lags if isinstance(r_hat, CovarianceSequence) else np.asarray(r_hat)
    res = dic.matrix @ np.asarray(nu, dtype=float) - r
    w = data_weight(hyper.datafit, dic.rows)
    return (w * float(np.vdot(res, res).real) + hyper.beta * float(np.sum(nu))
            + hyper.zeta * transport_objective(M, C, hyper.epsilon, hyper.eta))


def deterministic_objective(dic: FourierDictionary, mu, y, M, C, hyper: Hyperparams) -> float:
    """``w ||y - A mu||^2 + beta ||mu||_1 + zeta (<C,M> + eps D(M) + eta ||M||_{inf,1})``."""
    from .ot_core import transport_objective

    res = dic.matrix @ np.asarray(mu, dtype=complex) - np.asarray(y)
    w = data_weight(hyper.datafit, dic.rows)
    return (w * float(np.vdot(res, res).real) + hyper.beta * float(np.abs(mu).sum())
            + hyper.zeta * transport_objective(M, C, hyper.epsilon, hyper.eta))


# ---------------------------------------------------------------------------
# outer loops
# ---------------------------------------------------------------------------

def _workspace(freq_grid, pitch_grid, rows, mode, workspace):
    if workspace is None:
        return Workspace(freq_grid, pitch_grid, rows, mode)
    if workspace.rows != rows or workspace.dictionary.mode != mode:
        raise ValueError("workspace does not match the data length")
    if workspace.freq_grid.count != freq_grid.count or workspace.pitch_grid.count != pitch_grid.count:
        raise ValueError("workspace grids do not match")
    return workspace


class _Problem:
    """Smooth part, prox and objective of one estimator, in a common shape."""

    def __init__(self, ws: Workspace, hyper: Hyperparams):
        self.ws = ws
        self.hyper = hyper
        self.sweeper = WarmSweeper(ws.C, hyper.epsilon, hyper.eta)
        # the eps*D term carries +1 per plan entry; strip it for relative tests
        self.offset = hyper.zeta * hyper.epsilon * ws.C.size

    def regularizer(self, x) -> float:
        return self.hyper.zeta * self.sweeper.transport_value(self.hyper.eta)


class _StochasticProblem(_Problem):
    def __init__(self, ws, hyper, r):
        super().__init__(ws, hyper)
        self.rr = np.concatenate([r.real, r.imag])
        self.w = data_weight(hyper.datafit, ws.rows)
        self.floor_events = 0

    def residual(self, log_nu):
        return self.ws.stacked @ np.exp(log_nu) - self.rr

    def smooth(self, log_nu, res):
        return self.w * float(res @ res) + self.hyper.beta * float(np.exp(log_nu).sum())

    def prox_step(self, log_nu, res, gamma, sweeps):
        u = 2.0 * self.w * (self.ws.stacked.T @ res) + self.hyper.beta
        out = self.sweeper.stochastic(log_nu, u, gamma, self.hyper.zeta, sweeps)
        low = out < _LOG_FLOOR
        if low.any():
            self.floor_events += int(low.sum())
            out = np.where(low, _LOG_FLOOR, out)
        return out

    def export(self, log_nu):
        return np.exp(log_nu)


class _DeterministicProblem(_Problem):
    def __init__(self, ws, hyper, y):
        super().__init__(ws, hyper)
        self.y = y
        self.A = ws.dictionary.matrix
        self.AH = np.ascontiguousarray(self.A.conj().T)
        self.w = data_weight(hyper.datafit, ws.rows)

    def residual(self, mu):
        return self.A @ mu - self.y

    def smooth(self, mu, res):
        return self.w * float(np.vdot(res, res).real) + self.hyper.beta * float(np.abs(mu).sum())

    def prox_step(self, mu, res, gamma, sweeps):
        u = mu - gamma * 2.0 * self.w * (self.AH @ res)
        return self.sweeper.deterministic(u, gamma, self.hyper.zeta, self.hyper.beta, sweeps)

    def export(self, mu):
        return mu


def _run_outer(prob: _Problem, x0, gamma: float, *, monotone: bool, start_value: float,
               deadline: float | None):
    """Generic inexact proximal gradient loop; returns the final iterate and diagnostics."""
    hyper = prob.hyper
    sweeper = prob.sweeper
    x = x0
    res = prob.residual(x)
    value = start_value
    trace = []
    accepted_snap = None
    stop = "max_iters"
    counts = {"rejected": 0, "refined": 0, "halvings": 0, "increases": 0}
    stalls = 0
    it = 0
    while it < hyper.max_outer_iters:
        if deadline is not None and time.monotonic() > deadline:
            stop = "time_budget"
            break
        it += 1
        snap = sweeper.snapshot()
        x_new = prob.prox_step(x, res, gamma, hyper.sweeps_per_iter)
        res_new = prob.residual(x_new)
        new_value = prob.smooth(x_new, res_new) + prob.regularizer(x_new)
        rounds = 0
        while new_value > value and rounds < hyper.refine_rounds and np.isfinite(value):
            # the prox output is inexact; continue the same dual problem
            x_new = prob.prox_step(x, res, gamma, hyper.refine_sweeps)
            res_new = prob.residual(x_new)
            new_value = prob.smooth(x_new, res_new) + prob.regularizer(x_new)
            rounds += 1
        counts["refined"] += rounds
        if new_value > value:
            if monotone:
                counts["rejected"] += 1
                stalls += 1
                if stalls >= hyper.max_stalls:
                    stop = "stalled"
                    break
                continue
            if hyper.step_halving:
                counts["halvings"] += 1
                gamma *= 0.5
                sweeper.restore(snap)
                stalls += 1
                if stalls >= hyper.max_stalls:
                    stop = "stalled"
                    break
                continue
            counts["increases"] += 1
        stalls = 0
        rel = (value - new_value) / max(abs(new_value - prob.offset), 1e-300)
        x, res, value = x_new, res_new, new_value
        accepted_snap = sweeper.snapshot()
        trace.append(value)
        if abs(rel) < hyper.outer_tol:
            stop = "converged"
            break
    if accepted_snap is not None:
        sweeper.restore(accepted_snap)
    diag = {
        "outer_iterations": it,
        "accepted_iterations": len(trace),
        "stop_reason": stop,
        "converged": stop == "converged",
        "final_objective": value if trace else float("nan"),
        "objective_trace": trace,
        "step": gamma,
        "inner_sweeps": sweeper.sweeps,
        "inner_monotone_violations": sweeper.monotone_violations,
        **counts,
    }
    return x, accepted_snap is not None, diag


def _transported_mass(M, margin):
    """Pitch masses of the part of ``M`` that carries ``margin``.

    Rows of the plan are rescaled to the spectrum magnitude. Where the margin
    constraint is active this changes nothing. Rows left with surplus plan mass
    (``M 1 > |mu|``, zero entries of the complex spectrum) would otherwise add
    an entropic background of about ``exp(-C/eps)`` per cell to every column.
    """
    rows = M.sum(axis=1)
    scale = np.divide(margin, rows, out=np.zeros_like(rows), where=rows > 0)
    return scale @ M


def _finish(prob, x, have_plan, pitch_grid, hyper, diag, debias, keep_plan):
    spec = prob.export(x)
    if have_plan:
        M = prob.sweeper.plan()
        mass = _transported_mass(M, np.abs(spec))
    else:
        M = None
        mass = np.zeros(pitch_grid.count)
    idx = extract_pitches(mass, pitch_grid, hyper.pitch_mass_threshold, hyper.merge_radius)
    hz = pitch_grid.hz if pitch_grid.sample_rate is not None else np.full(pitch_grid.count, np.nan)
    active = [(float(pitch_grid.pitches[g]), float(hz[g]), float(mass[g])) for g in idx]
    return active, idx, spec, (M if keep_plan else None), mass


def estimate_stochastic(r_hat, freq_grid: FrequencyGrid, pitch_grid: PitchGrid,
                        hyper: Hyperparams = STOCHASTIC_SIM, *, workspace: Workspace | None = None,
                        debias: bool = True, keep_plan: bool = True) -> EstimationResult:
    """Covariance-domain estimate with Kullback-Leibler proximal gradient steps.

    Parameters
    ----------
    r_hat : CovarianceSequence or array
        Sample covariances of a unit-variance signal, lags ``0..T-1``.
    hyper : Hyperparams
        Defaults to :data:`STOCHASTIC_SIM`.
    workspace : Workspace, optional
        Precomputed dictionary and costs for ``T`` lag rows.

    Returns
    -------
    EstimationResult
        Non-convergence is reported in ``diagnostics`` and the last accepted
        iterate is returned.
    """
    t0 = time.monotonic()
    r = r_hat.lags if isinstance(r_hat, CovarianceSequence) else np.asarray(r_hat, dtype=complex)
    T = r.shape[0]
    ws = _workspace(freq_grid, pitch_grid, T, "lag", workspace)
    F = freq_grid.count
    r0 = float(r[0].real)
    if not r0 > 0:
        return EstimationResult([], np.zeros(F), np.zeros(F), None, np.zeros(pitch_grid.count),
                                {"stop_reason": "zero_power", "converged": True, "outer_iterations": 0,
                                 "objective_trace": [], "runtime": time.monotonic() - t0})
    prob = _StochasticProblem(ws, hyper, r)
    w = prob.w
    if hyper.step_rule == "relative":
        L = 2.0 * w * T * r0
    else:
        L = 2.0 * w * ws.norm ** 2
    gamma = hyper.step_scale / L
    log_nu0 = np.full(F, np.log(r0 / F))
    deadline = None if hyper.time_budget is None else t0 + hyper.time_budget
    x, have_plan, diag = _run_outer(prob, log_nu0, gamma, monotone=False, start_value=np.inf,
                                    deadline=deadline)
    diag["floor_events"] = prob.floor_events
    if prob.floor_events:
        log.info("spectrum floored at %g in %d entries", NU_FLOOR, prob.floor_events)
    active, idx, nu, M, mass = _finish(prob, x, have_plan, pitch_grid, hyper, diag, debias, keep_plan)
    spectrum = nu
    if debias:
        t_db = time.monotonic()
        spectrum, dd = debias_stochastic(r, freq_grid, pitch_grid.subset(idx) if idx else None, hyper, ws=ws,
                                         cost=ws.cost.columns(idx) if len(idx) else None)
        dd["runtime"] = time.monotonic() - t_db
        diag["debias"] = dd
    diag["runtime"] = time.monotonic() - t0
    if not diag["converged"]:
        log.info("stochastic estimate stopped: %s after %d iterations", diag["stop_reason"],
                 diag["outer_iterations"])
    return EstimationResult(active, spectrum, nu, M, mass, diag)


def estimate_deterministic(y, freq_grid: FrequencyGrid, pitch_grid: PitchGrid,
                           hyper: Hyperparams = DETERMINISTIC_SIM, *, workspace: Workspace | None = None,
                           debias: bool = True, keep_plan: bool = True) -> EstimationResult:
    """Waveform-domain estimate with Euclidean proximal gradient steps.

    The step is ``1/L`` with ``L = 2 w ||A||^2``. The logged objective is
    non-increasing: a step whose refined prox output still raises the
    objective is not taken (``diagnostics['rejected']``).
    """
    t0 = time.monotonic()
    y = np.asarray(y, dtype=complex)
    N = y.shape[0]
    ws = _workspace(freq_grid, pitch_grid, N, "time", workspace)
    F = freq_grid.count
    prob = _DeterministicProblem(ws, hyper, y)
    gamma = hyper.step_scale / (2.0 * prob.w * ws.norm ** 2)
    mu0 = np.zeros(F, dtype=complex)
    # objective at mu = 0 with the feasible plan M = 0
    start = prob.w * float(np.vdot(y, y).real) + prob.offset
    deadline = None if hyper.time_budget is None else t0 + hyper.time_budget
    x, have_plan, diag = _run_outer(prob, mu0, gamma, monotone=True, start_value=start,
                                    deadline=deadline)
    trace = [start] + diag["objective_trace"]
    diag["objective_trace"] = trace
    if any(b > a for a, b in zip(trace, trace[1:])):
        raise AssertionError("deterministic objective increased")
    active, idx, mu, M, mass = _finish(prob, x, have_plan, pitch_grid, hyper, diag, debias, keep_plan)
    spectrum = mu
    if debias:
        t_db = time.monotonic()
        spectrum, dd = debias_deterministic(y, freq_grid, pitch_grid.subset(idx) if idx else None, hyper, ws=ws,
                                            cost=ws.cost.columns(idx) if len(idx) else None)
        dd["runtime"] = time.monotonic() - t_db
        diag["debias"] = dd
    diag["runtime"] = time.monotonic() - t0
    return EstimationResult(active, spectrum, mu, M, mass, diag)


# ---------------------------------------------------------------------------
# pitch read-off
# ---------------------------------------------------------------------------

def extract_pitches(mass, pitch_grid: PitchGrid | None = None, threshold: float = 0.1,
                    merge_radius: int = 1) -> list[int]:
    """Indices of pitch candidates carrying at least ``threshold * max(mass)``.

    Among active candidates closer than ``merge_radius`` grid cells, only the
    one with the largest mass is kept (ties go to the lower index).
    """
    mass = np.asarray(mass, dtype=float)
    if np.any(mass < 0):
        raise ValueError("pitch masses must be nonnegative")
    if pitch_grid is not None and mass.shape[0] != pitch_grid.count:
        raise ValueError("mass length differs from the pitch grid")
    top = float(mass.max()) if mass.size else 0.0
    if not top > 0:
        return []
    active = np.flatnonzero(mass >= threshold * top)
    if active.size == mass.size and mass.size > 1:
        log.warning("every pitch candidate is active; threshold %.3g is degenerate", threshold)
    keep = []
    for i in active:
        near = active[(np.abs(active - i) <= merge_radius) & (active != i)]
        if all(mass[i] > mass[j] or (mass[i] == mass[j] and i < j) for j in near):
            keep.append(int(i))
    return keep


# ---------------------------------------------------------------------------
# debiasing
# ---------------------------------------------------------------------------

def restricted_cmin(freq_grid: FrequencyGrid, active: PitchGrid, cost: CostMatrix | None = None):
    """Per-frequency minimum cost over the active pitch candidates."""
    if cost is None:
        cost = cost_matrix(freq_grid, active)
    return np.asarray(cost.entries, dtype=float).min(axis=1)


def _fista_gram(Q, c, wt, nonneg, x0, step, tol, max_iter, scale):
    """FISTA with restarts on ``x^H Q x - 2 Re c^H x + sum wt |x|`` (Gram form)."""

    def prox(z):
        if nonneg:
            return np.maximum(z - step * wt, 0.0)
        mag = np.abs(z)
        shrink = np.maximum(mag - step * wt, 0.0)
        return np.where(mag > 0, z / np.where(mag > 0, mag, 1.0), 0.0) * shrink

    def value(x, Qx):
        return float(np.vdot(x, Qx).real - 2.0 * np.vdot(c, x).real) + float(wt @ np.abs(x))

    x = x0.copy()
    z = x0.copy()
    Qx = Q @ x
    Qz = Qx
    fx = value(x, Qx)
    t = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        x_new = prox(z - step * 2.0 * (Qz - c))
        Qx_new = Q @ x_new
        f_new = value(x_new, Qx_new)
        if f_new > fx:
            t = 1.0
            x_new = prox(x - step * 2.0 * (Qx - c))
            Qx_new = Q @ x_new
            f_new = value(x_new, Qx_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_new
        z = x_new + beta * (x_new - x)
        Qz = Qx_new + beta * (Qx_new - Qx)
        x, Qx, fx, t = x_new, Qx_new, f_new, t_new
        if it % 10 == 0 and _kkt(2.0 * (Qx - c), x, wt, nonneg) <= tol * scale:
            break
    return x, it


_COARSE = 1e-5
_BATCH = 64


def _polish(Q, c, wt, nonneg, x, max_newton=30):
    """Exact solve on the support of ``x``; ``None`` if the support is not stable.

    With the support fixed the problem is smooth: linear for the nonnegative
    case, a damped Newton iteration on real coordinates for the complex one.
    """
    S = np.flatnonzero(np.abs(x) > 0)
    if S.size == 0:
        return None
    Qs = Q[np.ix_(S, S)]
    cs, ws_ = c[S], wt[S]
    out = np.zeros_like(x)
    if nonneg:
        try:
            xs = np.linalg.solve(Qs, cs - 0.5 * ws_)
        except np.linalg.LinAlgError:
            return None
        if not np.all(xs > 0):
            return None
        out[S] = xs
        return out
    n = S.size
    Qr = np.block([[Qs.real, -Qs.imag], [Qs.imag, Qs.real]])
    cr = np.concatenate([cs.real, cs.imag])
    z = np.concatenate([x[S].real, x[S].imag])

    def f(z):
        v = z[:n] + 1j * z[n:]
        return float(z @ Qr @ z - 2.0 * cr @ z) + float(ws_ @ np.abs(v))

    fz = f(z)
    for _ in range(max_newton):
        re, im = z[:n], z[n:]
        mag = np.hypot(re, im)
        if np.any(mag == 0):
            return None
        g = 2.0 * (Qr @ z - cr) + np.concatenate([ws_ * re / mag, ws_ * im / mag])
        # Hessian of wt |v|: wt/|v| (I - u u^T) in each (re, im) pair
        h = ws_ / mag ** 3
        H = 2.0 * Qr
        idx = np.arange(n)
        H[idx, idx] += h * im * im
        H[idx + n, idx + n] += h * re * re
        H[idx, idx + n] -= h * re * im
        H[idx + n, idx] -= h * re * im
        try:
            d = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        t = 1.0
        while t > 1e-10:
            z_new = z + t * d
            f_new = f(z_new)
            if f_new <= fz + 1e-4 * t * float(g @ d):
                break
            t *= 0.5
        else:
            break
        z, fz = z_new, f_new
        if np.abs(t * d).max() <= 1e-15 * max(np.abs(z).max(), 1e-300):
            break
    out[S] = z[:n] + 1j * z[n:]
    return out


def _kkt(g, x, wt, nonneg):
    """Largest violation of the optimality conditions of the weighted-l1 problem."""
    mag = np.abs(x)
    on = np.abs(g + wt * x / np.where(mag > 0, mag, 1.0))
    if nonneg:
        off = np.maximum(-(g + wt), 0.0)
    else:
        off = np.maximum(np.abs(g) - wt, 0.0)
    return float(np.where(mag > 0, on, off).max()) if x.size else 0.0


def _weighted_l1_fit(B, b, w, wt, nonneg, tol, max_iter):
    """``min w ||b - B x||^2 + sum_f wt_f |x_f|`` (``x >= 0`` if ``nonneg``).

    Working-set method: FISTA on the Gram matrix of a small candidate set,
    grown by the KKT violators of the full problem until none remain.
    """
    F = B.shape[1]
    BH = B.conj().T
    dtype = float if nonneg else complex
    g0 = -2.0 * w * (BH @ b)
    if nonneg:
        g0 = g0.real
    scale = max(float(np.abs(g0).max()), float(wt.max()), 1e-300)
    x = np.zeros(F, dtype=dtype)
    viol0 = np.maximum(-(g0 + wt), 0.0) if nonneg else np.maximum(np.abs(g0) - wt, 0.0)
    work = np.flatnonzero(viol0 > 0)
    if work.size == 0:
        return x, {"iterations": 0, "rounds": 0, "working_set": 0, "kkt_residual": 0.0, "converged": True}
    # start from the strongest violators; grow in batches of the worst remaining ones
    order = np.argsort(-viol0, kind="stable")
    work = np.sort(order[: min(work.size, _BATCH)])
    total = 0
    rounds = 0
    res = np.inf
    while True:
        rounds += 1
        Bw = B[:, work]
        Q = w * (Bw.conj().T @ Bw)
        c = w * (Bw.conj().T @ b)
        if nonneg:
            Q, c = Q.real, c.real
        step = 0.5 / max(float(np.linalg.eigvalsh(Q).max()), 1e-300)
        wt_w = wt[work]
        xw, its = _fista_gram(Q, c, wt_w, nonneg, x[work], step, max(tol, _COARSE), max_iter, scale)
        total += its
        if tol < _COARSE:
            polished = _polish(Q, c, wt_w, nonneg, xw)
            if polished is not None and _kkt(2.0 * (Q @ polished - c), polished, wt_w, nonneg) <= tol * scale:
                xw = polished
            else:
                xw, its = _fista_gram(Q, c, wt_w, nonneg, xw, step, tol, max_iter, scale)
                total += its
        x = np.zeros(F, dtype=dtype)
        x[work] = xw
        g = 2.0 * w * (BH @ (B @ x - b))
        if nonneg:
            g = g.real
        res = _kkt(g, x, wt, nonneg) / scale
        if res <= tol or total >= max_iter:
            break
        viol = np.maximum(-(g + wt), 0.0) if nonneg else np.maximum(np.abs(g) - wt, 0.0)
        viol[work] = 0.0
        new = np.flatnonzero(viol > tol * scale)
        new = new[np.argsort(-viol[new], kind="stable")[:_BATCH]]
        if new.size == 0:
            # the restricted solve itself is not accurate enough yet
            if its >= max_iter:
                break
            continue
        work = np.union1d(work, new)
    return x, {"iterations": total, "rounds": rounds, "working_set": int(work.size),
               "kkt_residual": float(res), "converged": bool(res <= tol)}


def debias_stochastic(r_hat, freq_grid: FrequencyGrid, active: PitchGrid, hyper: Hyperparams,
                      *, ws: Workspace | None = None, cost: CostMatrix | None = None):
    """Nonnegative refit ``min_{nu>=0} w ||r - A nu||^2 + (beta + zeta c_min)^T nu``.

    ``c_min`` is taken over the active candidates only; ``w`` follows
    ``hyper.debias_datafit``. Returns ``(nu, info)``; an empty active set gives
    the zero spectrum.
    """
    r = r_hat.lags if isinstance(r_hat, CovarianceSequence) else np.asarray(r_hat, dtype=complex)
    F = freq_grid.count
    if active is None or active.count == 0:
        return np.zeros(F), {"iterations": 0, "converged": True, "kkt_residual": 0.0}
    T = r.shape[0]
    Ar = build_dictionary(freq_grid, T, "lag").stacked if ws is None else ws.stacked
    rr = np.concatenate([r.real, r.imag])
    w = data_weight(hyper.debias_datafit, T)
    p = hyper.debias_beta + hyper.debias_zeta * restricted_cmin(freq_grid, active, cost)
    return _weighted_l1_fit(Ar, rr, w, p, True, hyper.debias_tol, hyper.debias_max_iters)


def debias_deterministic(y, freq_grid: FrequencyGrid, active: PitchGrid, hyper: Hyperparams,
                         *, ws: Workspace | None = None, cost: CostMatrix | None = None):
    """Weighted complex LASSO ``min w ||y - A mu||^2 + sum_f (beta + zeta c_min[f]) |mu_f|``."""
    y = np.asarray(y, dtype=complex)
    F = freq_grid.count
    if active is None or active.count == 0:
        return np.zeros(F, dtype=complex), {"iterations": 0, "converged": True, "kkt_residual": 0.0}
    N = y.shape[0]
    A = build_dictionary(freq_grid, N, "time").matrix if ws is None else ws.dictionary.matrix
    w = data_weight(hyper.debias_datafit, N)
    wt = hyper.debias_beta + hyper.debias_zeta * restricted_cmin(freq_grid, active, cost)
    return _weighted_l1_fit(A, y, w, wt, False, hyper.debias_tol, hyper.debias_max_iters)
