"""
Transport-plan machinery for the harmonic clustering regularizer.

The regularizer couples a frequency-domain mass vector (rows, F frequencies)
with a set of pitch candidates (columns, G candidates) through a plan ``M``::

    S(nu) = min_M <C, M> + eps * D(M) + eta * ||M||_{inf,1}

with ``D(M) = sum M log M - M + 1`` and ``||M||_{inf,1} = sum_g max_f M[f, g]``.
Its two proximal operators are solved through the dual, by block-coordinate
descent alternating the frequency potential ``lam`` (closed form) with the
column caps ``Psi`` (water-filling on each column), accelerated by a
semismooth Newton step on the reduced dual. :class:`WarmSweeper` runs the same
sweeps warm-started across the outer iterations of an estimator.

All internal arithmetic is done on potentials divided by ``eps``, so the plan
is only ever exponentiated as ``exp(log M)`` and small ``eps`` cannot overflow.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve
from scipy.special import logsumexp, xlogy

from .grids import CostMatrix

__all__ = [
    "ProxParams",
    "DualState",
    "ProxDiagnostics",
    "entropy_D",
    "mixed_norm_inf1",
    "dual_norm_1inf",
    "transport_objective",
    "water_level",
    "psi_column_update",
    "wright_omega",
    "stochastic_prox",
    "deterministic_prox",
    "stochastic_prox_primal",
    "stochastic_prox_dual",
    "deterministic_prox_primal",
    "deterministic_prox_dual",
    "pitch_mass",
    "pitch_mass_dual",
    "zero_eta_limit_plan",
    "WarmSweeper",
]

log = logging.getLogger(__name__)

# relative slack allowed on the dual objective before a sweep counts as an increase
MONOTONE_SLACK = 1e-12


@dataclass(frozen=True)
class ProxParams:
    gamma: float
    zeta: float
    eta: float
    epsilon: float
    beta: float = 0.0
    max_inner_iters: int = 5000
    inner_tol: float = 1e-9

    def __post_init__(self):
        if self.gamma <= 0 or self.epsilon <= 0:
            raise ValueError("gamma and epsilon must be positive")
        if self.zeta < 0 or self.eta < 0 or self.beta < 0:
            raise ValueError("zeta, eta and beta must be nonnegative")


@dataclass
class DualState:
    """Dual variables of a prox subproblem.

    ``lam`` is the frequency potential and ``psi`` the column-cap matrix with
    ``||psi||_{1,inf} <= eta``. The plan is ``M = diag(v) (K * W)`` with
    ``v = exp(lam/eps)``, ``K = exp(-C/eps)``, ``W = exp(psi/eps)``. At small
    ``eps`` the factors under/overflow individually; use the ``log_*`` forms or
    :meth:`plan`, which combines them in the log domain.
    """

    lam: np.ndarray
    psi: np.ndarray
    cost: np.ndarray
    epsilon: float

    @property
    def log_v(self):
        return self.lam / self.epsilon

    @property
    def log_K(self):
        return -self.cost / self.epsilon

    @property
    def log_W(self):
        return self.psi / self.epsilon

    @property
    def v(self):
        return np.exp(self.log_v)

    @property
    def K(self):
        return np.exp(self.log_K)

    @property
    def W(self):
        return np.exp(self.log_W)

    def log_plan(self) -> np.ndarray:
        return (self.lam[:, None] - self.cost + self.psi) / self.epsilon

    def plan(self) -> np.ndarray:
        return np.exp(self.log_plan())


@dataclass
class ProxDiagnostics:
    iterations: int = 0
    converged: bool = False
    last_rel_decrease: float = float("nan")
    dual_objective: float = float("nan")
    monotone_violations: int = 0
    clamp_events: int = 0
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "last_rel_decrease": self.last_rel_decrease,
            "dual_objective": self.dual_objective,
            "monotone_violations": self.monotone_violations,
            "clamp_events": self.clamp_events,
        }


# ---------------------------------------------------------------------------
# norms and entropy
# ---------------------------------------------------------------------------

def entropy_D(M) -> float:
    """``sum M log M - M + 1`` with ``0 log 0 = 0``."""
    M = np.asarray(M, dtype=float)
    if np.any(M < 0):
        raise ValueError("entropy is defined for nonnegative matrices only")
    return float(np.sum(xlogy(M, M) - M + 1.0))


def _entropy_from_log(log_M) -> float:
    M = np.exp(log_M)
    # xlogy semantics: underflowed entries contribute exactly 1
    return float(np.sum(M * np.where(M > 0, log_M, 0.0) - M + 1.0))


def mixed_norm_inf1(M) -> float:
    """Sum over columns of the largest absolute entry."""
    M = np.asarray(M)
    return float(np.abs(M).max(axis=0).sum()) if M.size else 0.0


def dual_norm_1inf(Psi) -> float:
    """Largest column absolute sum."""
    Psi = np.asarray(Psi)
    return float(np.abs(Psi).sum(axis=0).max()) if Psi.size else 0.0


def transport_objective(M, C, epsilon: float, eta: float) -> float:
    """``<C, M> + eps D(M) + eta ||M||_{inf,1}``."""
    C = _as_cost(C)
    return float(np.sum(C * M)) + epsilon * entropy_D(M) + eta * mixed_norm_inf1(M)


def _transport_objective_log(log_M, C, epsilon, eta) -> float:
    M = np.exp(log_M)
    return float(np.sum(C * M)) + epsilon * _entropy_from_log(log_M) + eta * float(M.max(axis=0).sum())


def _as_cost(C) -> np.ndarray:
    return C.entries if isinstance(C, CostMatrix) else np.asarray(C, dtype=float)


# ---------------------------------------------------------------------------
# column water-filling
# ---------------------------------------------------------------------------

def water_level(scores, budget: float) -> float:
    """Threshold ``k`` with ``sum(max(scores - k, 0)) == budget`` (budget > 0).

    Sorts the scores in decreasing order and scans partial sums; the active set
    is the longest prefix whose smallest element stays above its own threshold.
    """
    s = np.sort(np.asarray(scores, dtype=float))[::-1]
    if budget <= 0:
        return float(s[0])
    levels = (np.cumsum(s) - budget) / np.arange(1, len(s) + 1)
    # the largest score is always active; a budget below its ulp can hide that
    above = np.nonzero(s > levels)[0]
    n_active = int(above[-1]) + 1 if above.size else 1
    return float(levels[n_active - 1])


def psi_column_update(a, eta: float, epsilon: float) -> np.ndarray:
    """Minimize ``sum_f a_f exp(psi_f/eps)`` subject to ``sum_f |psi_f| <= eta``.

    The minimizer is nonpositive: ``psi_f = -max(0, eps*log(a_f) - k)`` where the
    level ``k`` spends the whole budget ``eta``. The largest weights are pulled
    down to a common value and the rest are left untouched.
    """
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise ValueError("weights must be positive")
    if eta == 0:
        return np.zeros_like(a)
    scores = epsilon * np.log(a)
    k = water_level(scores, eta)
    return -np.maximum(scores - k, 0.0)


def _water_levels(L, budget: float, max_iter: int = 200) -> np.ndarray:
    """Column-wise :func:`water_level` for a matrix, by Newton's method on the level.

    ``h(k) = sum_f max(L[f] - k, 0) - budget`` is convex, piecewise linear and
    decreasing. Newton started at ``max(L) - budget`` (where h >= 0) increases
    monotonically and stops exactly once the active set settles.
    """
    top = L.max(axis=0)
    if budget <= 0:
        return top
    kappa = top - budget
    for _ in range(max_iter):
        act = L > kappa[None, :]
        n = act.sum(axis=0)
        S = np.einsum("fg,fg->g", L, act)
        new = (S - budget) / n
        if np.all(new <= kappa + 1e-15 * np.abs(kappa)):
            return np.maximum(new, kappa)
        kappa = np.maximum(new, kappa)
    log.debug("water-level Newton hit max_iter")
    return kappa


# ---------------------------------------------------------------------------
# Wright omega
# ---------------------------------------------------------------------------

def wright_omega(x):
    """Real Wright omega function: the ``w > 0`` solving ``w + log w = x``.

    Newton's method on ``t = log w`` (``g(t) = exp(t) + t - x`` is convex and
    increasing, so the iteration converges from any start). Starting points:
    ``t = x`` for ``x < -2``, ``t = log(x - log x)`` for ``x > 3``, else 0.
    """
    from ._kernels import wright_omega as _omega

    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    w = _omega(np.ascontiguousarray(x.ravel())).reshape(x.shape)
    return float(w) if scalar else w


# ---------------------------------------------------------------------------
# prox solvers
# ---------------------------------------------------------------------------
#
# Both dual problems have the form (after dividing by gamma*zeta*eps and writing
# a = lam/eps, Cs = C/eps):
#
#     Phi(a, P) = sum_{f,g} exp(a_f - Cs_fg + P_fg) + data(a),   ||P||_{1,inf} <= eta/eps
#
# For fixed ``a`` the optimal ``P`` is the water-filling ``P = min(L, kappa) - L``
# with ``L = a - Cs``, so the plan is ``M = exp(min(L, kappa))``. The plain
# block-coordinate update of ``a`` is exact for fixed ``P`` but contracts at rate
# ``1/(1 + gamma*zeta*eps)`` on rows sharing a capped column; a semismooth Newton
# step on the reduced dual ``Phi(a) = min_P Phi(a, P)`` removes that stall. Every
# sweep takes whichever of the two lowers the dual more reliably: the Newton step
# when its line search succeeds, the closed-form block update otherwise.


class _Stochastic:
    """data(a) = 1/(k) * sum exp(l - k a), margin nu = exp(l - k a), k = gamma*zeta*eps."""

    lower = None

    def __init__(self, log_nu0, k):
        self.l = log_nu0
        self.k = k

    def margin(self, a):
        return np.exp(self.l - self.k * a)

    def data_value(self, a):
        return float(np.exp(logsumexp(self.l - self.k * a))) / self.k

    def data_diff(self, a, a_new, nu):
        # sum nu * (exp(-k da) - 1) / k, evaluated without cancellation
        return float(np.sum(nu * np.expm1(-self.k * (a_new - a)))) / self.k

    def hess_diag(self, a, nu):
        return self.k * nu

    def log_margin(self, a):
        return self.l - self.k * a

    def log_margin_slope(self, a):
        return np.full_like(a, self.k)

    def fixed(self):
        return np.zeros_like(self.l, dtype=bool)

    def project(self, a):
        return a

    def block_update(self, log_xi, diag):
        return (self.l - log_xi) / (1.0 + self.k)


class _Deterministic:
    """data(a) = k/2 * sum (sigma - a)_+^2 with a >= 0, margin m = k (sigma - a)_+."""

    lower = 0.0

    def __init__(self, sigma, shift, k):
        self.sigma = sigma
        self.shift = shift
        self.k = k

    def margin(self, a):
        return self.k * np.maximum(self.sigma - a, 0.0)

    def data_value(self, a):
        p = np.maximum(self.sigma - a, 0.0)
        return 0.5 * self.k * float(p @ p)

    def data_diff(self, a, a_new, m):
        p = np.maximum(self.sigma - a, 0.0)
        p_new = np.maximum(self.sigma - a_new, 0.0)
        both = (p > 0) & (p_new > 0)
        dp = np.where(both, a - a_new, p_new - p)
        return 0.5 * self.k * float(np.sum(dp * (p_new + p)))

    def hess_diag(self, a, m):
        return self.k * (a < self.sigma)

    def log_margin(self, a):
        with np.errstate(divide="ignore"):
            return np.log(self.k) + np.log(np.maximum(self.sigma - a, 0.0))

    def log_margin_slope(self, a):
        gap = self.sigma - a
        return 1.0 / np.where(gap > 0, gap, np.inf)

    def fixed(self):
        # rows with |u| <= gamma*beta sit at lam = 0 whatever the plan
        return self.sigma <= 0

    def project(self, a):
        # keep free rows strictly below sigma so that the margin stays positive
        hi = np.where(self.sigma > 0, np.nextafter(self.sigma, -np.inf), 0.0)
        return np.clip(a, 0.0, hi)

    def block_update(self, log_xi, diag):
        a = self.sigma - wright_omega(log_xi + self.shift)
        neg = a < 0
        diag.clamp_events += int(neg.sum())
        return np.where(neg, 0.0, a)


class _Point:
    """Reduced-dual quantities at one value of the scaled potential."""

    __slots__ = ("a", "L", "kappa", "T", "E", "rowsum", "log_rowsum", "margin", "grad", "phi_plan")

    def __init__(self, a, Cs, budget, data):
        self.a = a
        self.L = a[:, None] - Cs
        self.kappa = _water_levels(self.L, budget)
        self.T = np.minimum(self.L, self.kappa[None, :])
        rmax = self.T.max(axis=1)
        Es = np.exp(self.T - rmax[:, None])
        ssum = Es.sum(axis=1)
        self.log_rowsum = rmax + np.log(ssum)
        with np.errstate(over="ignore"):
            scale = np.exp(rmax)
            self.E = Es * scale[:, None]
            self.rowsum = ssum * scale
        self.margin = data.margin(a)
        self.grad = self.rowsum - self.margin
        self.phi_plan = float(self.rowsum.sum())


def _newton_direction(pt: _Point, data, free):
    """Solve ``(D + U diag(c) U^T) d = -g`` on the free rows via the sparse KKT form."""
    F, G = pt.E.shape
    act = pt.L > pt.kappa[None, :]
    act &= free[:, None]
    n = act.sum(axis=0)
    e_kappa = np.exp(pt.kappa)
    # columns carrying less mass than this add nothing resolvable to the Hessian
    keep = (n > 0) & (e_kappa > 1e-280)
    cols = np.nonzero(keep)[0]
    c = e_kappa[cols] / n[cols]
    r_in = np.where(act, 0.0, pt.E).sum(axis=1)
    D = r_in + data.hess_diag(pt.a, pt.margin)
    D = D + 1e-12 * max(float(D.max()), float(c.max()) if len(c) else 0.0) + 1e-300
    D = np.where(free, D, 1.0)
    g = np.where(free, pt.grad, 0.0)
    if len(cols) == 0:
        return -g / D
    rows, cidx = np.nonzero(act[:, cols])
    nG = len(cols)
    U = sparse.csr_matrix((np.ones(len(rows)), (rows, cidx)), shape=(F, nG))
    Dinv = 1.0 / D
    # Woodbury: H^-1 = D^-1 - D^-1 U S^-1 U^T D^-1 with S = diag(1/c) + U^T D^-1 U
    S = (U.T @ U.multiply(Dinv[:, None])).toarray()
    S[np.diag_indices(nG)] += 1.0 / c
    scale = 1.0 / np.sqrt(np.diag(S))
    Ss = S * scale[:, None] * scale[None, :]
    try:
        cho = cho_factor(Ss)
    except (ValueError, np.linalg.LinAlgError):
        return -g / D

    def solve(r):
        z = cho_solve(cho, scale * (U.T @ (Dinv * r))) * scale
        return Dinv * (r - U @ z)

    d = solve(-g)
    # one refinement step against the exact operator
    Hd = D * d + U @ (c * (U.T @ d))
    d = d + solve(-g - Hd)
    if not np.all(np.isfinite(d)):
        return -g / D
    return np.where(free, d, 0.0)


def _log_newton_direction(pt: _Point, data, free):
    """Newton direction for the log-margin equations ``log(M 1) = log(margin)``.

    The Jacobian is ``diag(w_in + s) + P N^-1 U^T`` where ``w_in`` is the share
    of each row sum outside capped entries, ``s`` the slope of ``-log(margin)``,
    ``U`` the capped-set indicator, ``P`` the capped entries divided by their
    row sum and ``N`` the capped-set sizes. Solved by Woodbury on the columns.
    """
    act = (pt.L > pt.kappa[None, :]) & free[:, None]
    n = act.sum(axis=0)
    cols = np.nonzero(n > 0)[0]
    R = np.where(free, pt.log_rowsum - data.log_margin(pt.a), 0.0)
    with np.errstate(under="ignore"):
        frac = np.exp(pt.T - pt.log_rowsum[:, None])
    w_in = np.where(act, 0.0, frac).sum(axis=1)
    Dj = np.where(free, w_in + data.log_margin_slope(pt.a), 1.0)
    if not np.all(np.isfinite(R)) or np.any(Dj <= 0):
        return None
    Dinv = 1.0 / Dj
    if len(cols) == 0:
        return -R * Dinv
    sub = act[:, cols]
    rows, cidx = np.nonzero(sub)
    nG = len(cols)
    shape = (len(pt.a), nG)
    U = sparse.csr_matrix((np.ones(len(rows)), (rows, cidx)), shape=shape)
    P = sparse.csr_matrix((frac[:, cols][rows, cidx], (rows, cidx)), shape=shape)
    S = (U.T @ P.multiply(Dinv[:, None])).toarray()
    S[np.diag_indices(nG)] += n[cols]
    try:
        lu = lu_factor(S, check_finite=True)
    except (ValueError, np.linalg.LinAlgError):
        return None
    b = -R * Dinv
    d = b - Dinv * (P @ lu_solve(lu, U.T @ b))
    if not np.all(np.isfinite(d)):
        return None
    return np.where(free, d, 0.0)


def _dual_solve(data, Cs, budget, psi0, params: ProxParams, method: str, trace: bool):
    diag = ProxDiagnostics()
    k = data.k
    # first sweep: closed-form block update from the initial caps
    a0 = data.block_update(logsumexp(psi0 - Cs, axis=1), diag)
    pt = _Point(data.project(a0), Cs, budget, data)
    J = k * (pt.phi_plan + data.data_value(pt.a))
    diag.iterations = 1
    diag.dual_objective = J
    if trace:
        diag.trace.append(J)

    for it in range(2, params.max_inner_iters + 1):
        new_pt, dphi = None, 0.0
        if method == "newton":
            new_pt, dphi = _newton_step(pt, data, Cs, budget)
        if new_pt is None:
            a_blk = data.block_update(logsumexp(pt.T - pt.L - Cs, axis=1), diag)
            new_pt = _Point(data.project(a_blk), Cs, budget, data)
            dphi = (new_pt.phi_plan - pt.phi_plan) + data.data_diff(pt.a, new_pt.a, pt.margin)
        dJ = k * dphi
        if dJ > MONOTONE_SLACK * abs(J):
            diag.monotone_violations += 1
            log.warning("dual objective increased by %.3g at sweep %d", dJ, it)
        J = J + dJ
        rel = -dJ / max(abs(J), 1e-300)
        # no representable move left: the optimum sits within rounding of the iterate
        stuck = np.array_equal(new_pt.a, pt.a)
        pt = new_pt
        diag.iterations = it
        diag.last_rel_decrease = float(rel)
        diag.dual_objective = float(J)
        if trace:
            diag.trace.append(J)
        if rel < params.inner_tol and (stuck or _stationary(pt, data)):
            diag.converged = True
            break
        if rel <= 0 and method != "newton":
            diag.converged = True
            break
    return pt, diag


def _stationary(pt: _Point, data, tol=1e-7) -> bool:
    g = pt.grad
    if data.lower is not None:
        g = np.where((pt.a <= data.lower) & (g > 0), 0.0, g)
    scale = max(float(pt.rowsum.max()), float(pt.margin.max()), 1e-300)
    return float(np.abs(g).max()) <= tol * scale


def _newton_step(pt: _Point, data, Cs, budget):
    free = ~data.fixed()
    if data.lower is not None:
        free &= ~((pt.a <= data.lower) & (pt.grad > 0))
    for direction in (_log_newton_direction, _newton_direction):
        d = direction(pt, data, free)
        if d is None:
            continue
        slope = float(pt.grad @ d)
        if not slope < 0:
            continue
        t = 1.0
        for _ in range(40):
            a_new = data.project(pt.a + t * d)
            new_pt = _Point(a_new, Cs, budget, data)
            dphi = (new_pt.phi_plan - pt.phi_plan) + data.data_diff(pt.a, a_new, pt.margin)
            if dphi <= 1e-4 * t * slope:
                return new_pt, dphi
            t *= 0.5
    return None, 0.0


def stochastic_prox(nu_prev, u, C, params: ProxParams, init: DualState | None = None,
                    log_nu_prev=None, trace: bool = False, method: str = "newton"):
    """KL-proximal step of the covariance-domain estimator.

    Solves ``min_nu gamma<u, nu> + KL(nu, nu_prev) + gamma*zeta*S(nu)`` and returns
    ``(nu, M, state, diagnostics)``. ``nu = nu_prev * exp(-gamma u - gamma zeta lam)``
    and ``M = diag(v)(K * W)`` at the dual optimum.

    ``log_nu_prev`` may be passed instead of ``nu_prev`` (which is then ignored)
    to keep tiny masses representable across iterations. ``init`` warm-starts
    the dual variables. ``method="bcd"`` runs the plain alternating updates.
    """
    C = _as_cost(C)
    eps = params.epsilon
    gz = params.gamma * params.zeta
    if log_nu_prev is None:
        nu_prev = np.asarray(nu_prev, dtype=float)
        if np.any(nu_prev <= 0):
            raise ValueError("nu_prev must be strictly positive")
        log_nu_prev = np.log(nu_prev)
    log_nu0 = log_nu_prev - params.gamma * np.asarray(u, dtype=float)
    if gz == 0.0:
        nu = np.exp(log_nu0)
        state = DualState(np.zeros_like(nu), np.zeros_like(C), C, eps)
        return nu, zero_eta_limit_plan(nu, C), state, ProxDiagnostics(converged=True)

    Cs = C / eps
    psi0 = np.zeros_like(C) if init is None else init.psi / eps
    data = _Stochastic(log_nu0, gz * eps)
    pt, diag = _dual_solve(data, Cs, params.eta / eps, psi0, params, method, trace)
    state = DualState(lam=eps * pt.a, psi=eps * (pt.T - pt.L), cost=C, epsilon=eps)
    _report(diag)
    return pt.margin, pt.E, state, diag


def deterministic_prox(u, C, params: ProxParams, init: DualState | None = None, trace: bool = False,
                       method: str = "newton"):
    """Euclidean prox of ``gamma*beta*||.||_1 + gamma*zeta*S(|.|)`` at complex ``u``.

    The output keeps the phases of ``u`` and has magnitudes
    ``max(|u| - gamma*beta - gamma*zeta*lam, 0)``; the multiplier ``lam >= 0`` of
    the margin constraint ``M 1 >= |mu|`` comes from the Wright omega update
    (or the Newton refinement of the same dual). Zero entries get phase 0.
    """
    C = _as_cost(C)
    u = np.asarray(u, dtype=complex)
    absu = np.abs(u)
    phase = np.where(absu > 0, u / np.where(absu > 0, absu, 1.0), 1.0)
    eps = params.epsilon
    gz = params.gamma * params.zeta
    s = absu - params.gamma * params.beta

    if gz == 0.0:
        mag = np.maximum(s, 0.0)
        state = DualState(np.zeros_like(absu), np.zeros_like(C), C, eps)
        return np.where(mag > 0, phase, 1.0) * mag, zero_eta_limit_plan(mag, C), state, \
            ProxDiagnostics(converged=True)

    Cs = C / eps
    sigma = s / (gz * eps)
    data = _Deterministic(sigma, sigma - np.log(gz * eps), gz * eps)
    psi0 = np.zeros_like(C) if init is None else init.psi / eps
    pt, diag = _dual_solve(data, Cs, params.eta / eps, psi0, params, method, trace)
    mag = pt.margin
    mu = np.where(mag > 0, phase, 1.0) * mag
    state = DualState(lam=eps * pt.a, psi=eps * (pt.T - pt.L), cost=C, epsilon=eps)
    _report(diag)
    return mu, pt.E, state, diag


def _report(diag: ProxDiagnostics) -> None:
    if not diag.converged:
        log.info("inner solver stopped after %d sweeps (rel decrease %.3g)",
                 diag.iterations, diag.last_rel_decrease)


# ---------------------------------------------------------------------------
# objectives used for verification
# ---------------------------------------------------------------------------

def stochastic_prox_primal(nu_prev, u, M, C, params: ProxParams) -> float:
    """Primal prox objective evaluated at a plan, with ``nu = M 1``."""
    C = _as_cost(C)
    nu = M.sum(axis=1)
    kl = float(np.sum(xlogy(nu, nu) - xlogy(nu, nu_prev) + nu_prev - nu))
    gz = params.gamma * params.zeta
    return params.gamma * float(u @ nu) + kl + gz * transport_objective(M, C, params.epsilon, params.eta)


def stochastic_prox_dual(nu_prev, u, state: DualState, params: ProxParams) -> float:
    """Lagrange dual function at ``(lam, Psi)``; a lower bound on the primal."""
    gz = params.gamma * params.zeta
    eps = params.epsilon
    log_nu = np.log(nu_prev) - params.gamma * u - gz * state.lam
    F, G = state.cost.shape
    total_M = np.exp(logsumexp(state.log_plan()))
    return float(np.sum(nu_prev) - np.exp(logsumexp(log_nu)) - gz * eps * total_M + gz * eps * F * G)


def deterministic_prox_primal(u, mu, M, C, params: ProxParams) -> float:
    C = _as_cost(C)
    gz = params.gamma * params.zeta
    return (0.5 * float(np.sum(np.abs(mu - u) ** 2)) + params.gamma * params.beta * float(np.abs(mu).sum())
            + gz * transport_objective(M, C, params.epsilon, params.eta))


def deterministic_prox_dual(u, state: DualState, params: ProxParams) -> float:
    gz = params.gamma * params.zeta
    eps = params.epsilon
    absu = np.abs(u)
    m = np.maximum(absu - params.gamma * params.beta - gz * state.lam, 0.0)
    F, G = state.cost.shape
    total_M = np.exp(logsumexp(state.log_plan()))
    return float(0.5 * np.sum(absu**2) - 0.5 * np.sum(m**2) - gz * eps * total_M + gz * eps * F * G)


# ---------------------------------------------------------------------------
# plan read-outs
# ---------------------------------------------------------------------------

def pitch_mass(M) -> np.ndarray:
    """Mass transported to each pitch candidate (column sums)."""
    return np.asarray(M).sum(axis=0)


def pitch_mass_dual(state: DualState) -> np.ndarray:
    """``(K^T * W^T) v`` evaluated in the log domain."""
    return np.exp(logsumexp(state.log_plan(), axis=0))


def zero_eta_limit_plan(nu, C, tol: float = 1e-12) -> np.ndarray:
    """Maximum-entropy optimal plan without group sparsity.

    Row ``f`` spreads ``nu[f]`` evenly over the columns attaining the row minimum
    of ``C`` (within ``tol``).
    """
    C = _as_cost(C)
    nu = np.asarray(nu, dtype=float)
    if np.any(nu < 0):
        raise ValueError("nu must be nonnegative")
    ties = C <= C.min(axis=1, keepdims=True) + tol
    return ties * (nu / ties.sum(axis=1))[:, None]


# ---------------------------------------------------------------------------
# warm-started sweeps for the outer loops
# ---------------------------------------------------------------------------

class WarmSweeper:
    """Dual sweeps for a sequence of prox problems that share ``C``, ``eps`` and ``eta``.

    An outer iteration of either estimator calls :meth:`stochastic` or
    :meth:`deterministic` with a few sweeps, starting from the potential left by
    the previous call. Each sweep sets the column caps from the current
    potential and then applies the closed-form potential update. The returned
    plan is the one for which that last update is exact, so its row sums equal
    the returned margin on every row where the potential is not clamped
    at zero (clamped rows have ``M 1 >= |mu|``).

    The dual objective of the current prox problem is tracked across both half
    steps; ``monotone_violations`` counts increases beyond relative ``1e-12``.
    """

    def __init__(self, C, epsilon: float, eta: float):
        from . import _kernels

        self._k = _kernels
        self.C = np.ascontiguousarray(_as_cost(C), dtype=float)
        self.epsilon = float(epsilon)
        self.inv_eps = 1.0 / self.epsilon
        self.budget = float(eta) / self.epsilon
        self.a = None       # potential after the last update
        self.a_caps = None  # potential the caps were computed from
        self.kappa = None
        self.log_rows = None
        self.sweeps = 0
        self.monotone_violations = 0
        self.clamp_events = 0
        self.unchecked = 0
        self._rows = None
        n = min(self.C.size, 1 << 16)
        self._buf_f = np.empty(n, dtype=np.int64)
        self._buf_g = np.empty(n, dtype=np.int64)
        self._buf_v = np.empty(n)

    def reset(self):
        self.a = self.a_caps = self.kappa = self.log_rows = None

    def snapshot(self):
        bufs = None
        if self._rows is not None:
            cnt = self._rows[-1]
            bufs = (self._buf_f[:cnt].copy(), self._buf_g[:cnt].copy(), self._buf_v[:cnt].copy())
        return (self.a, self.a_caps, self.kappa, self.log_rows, self._rows, bufs)

    def restore(self, snap):
        self.a, self.a_caps, self.kappa, self.log_rows, self._rows, bufs = snap
        if bufs is not None:
            cnt = bufs[0].shape[0]
            if cnt > self._buf_f.shape[0]:
                self._grow(cnt)
            self._buf_f[:cnt], self._buf_g[:cnt], self._buf_v[:cnt] = bufs

    # the reduced dual (times k) along a sweep, written as differences so the
    # large constant in the data term cannot swamp them
    def _check(self, dJ, scale):
        self.sweeps += 1
        if dJ > MONOTONE_SLACK * max(abs(scale), 1e-300):
            self.monotone_violations += 1
            log.warning("inner dual objective increased by %.3g", dJ)

    def _run(self, data, sweeps: int):
        k = data.k
        kern = self._k
        if self.a is None:
            diag = ProxDiagnostics()
            a0 = data.block_update(logsumexp(-self.C * self.inv_eps, axis=1), diag)
            self.clamp_events += diag.clamp_events
            self.a = data.project(a0)
        for _ in range(max(int(sweeps), 1)):
            a = self.a
            if self.log_rows is not None:
                # plan mass under the caps the potential was last updated with
                old_mass = float(np.exp(logsumexp(self.log_rows + (a - self.a_caps))))
            kappa = kern.water_levels(self.C, self.inv_eps, a, self.budget, 200, self.kappa)
            log_rows, rmax, c1, t1, ssum, cnt = kern.row_sweep(
                self.C, self.inv_eps, a, kappa, self._buf_f, self._buf_g, self._buf_v)
            if cnt > self._buf_f.shape[0]:
                self._grow(cnt)
                log_rows, rmax, c1, t1, ssum, cnt = kern.row_sweep(
                    self.C, self.inv_eps, a, kappa, self._buf_f, self._buf_g, self._buf_v)
            mass = float(np.exp(logsumexp(log_rows)))
            if self.log_rows is not None:
                self._check(k * (mass - old_mass), k * (mass + data.data_value(a)))
            diag = ProxDiagnostics()
            a_new = data.project(data.block_update(log_rows - a, diag))
            self.clamp_events += diag.clamp_events
            with np.errstate(over="ignore", invalid="ignore"):
                d_plan = float(np.sum(np.exp(log_rows) * np.expm1(a_new - a)))
                d_data = data.data_diff(a, a_new, data.margin(a))
            if np.isfinite(d_plan + d_data):
                self._check(k * (d_plan + d_data), k * (mass + data.data_value(a)))
            else:
                # a huge potential move (first sweep after a large gradient step)
                self.unchecked += 1
            self.a, self.a_caps, self.kappa, self.log_rows = a_new, a, kappa, log_rows
            self._rows = (rmax, c1, t1, ssum, cnt)
        return data.margin(self.a)

    def _grow(self, n):
        n = int(min(max(n, 2 * self._buf_f.shape[0]), self.C.size))
        self._buf_f = np.empty(n, dtype=np.int64)
        self._buf_g = np.empty(n, dtype=np.int64)
        self._buf_v = np.empty(n)

    def stochastic(self, log_nu_prev, u, gamma: float, zeta: float, sweeps: int = 1):
        """Approximate Bregman prox; returns ``log nu`` (natural log of the new margin)."""
        k = gamma * zeta * self.epsilon
        data = _Stochastic(np.asarray(log_nu_prev, float) - gamma * np.asarray(u, float), k)
        self._run(data, sweeps)
        return data.log_margin(self.a)

    def deterministic(self, u, gamma: float, zeta: float, beta: float, sweeps: int = 1):
        """Approximate Euclidean prox at complex ``u``; returns the complex output."""
        u = np.asarray(u, dtype=complex)
        absu = np.abs(u)
        phase = np.where(absu > 0, u / np.where(absu > 0, absu, 1.0), 1.0)
        k = gamma * zeta * self.epsilon
        sigma = (absu - gamma * beta) / k
        data = _Deterministic(sigma, sigma - np.log(k), k)
        mag = self._run(data, sweeps)
        return np.where(mag > 0, phase, 1.0) * mag

    def transport_terms(self):
        """``(<C, M>, D(M), ||M||_{inf,1}, M 1)`` for the current plan.

        Assembled from per-row sums kept by the last sweep; entries more than
        ``exp(-40)`` below their row maximum are left out of every term.
        """
        rmax, c1, t1, ssum, cnt = self._rows
        shift = self.a - self.a_caps
        top = rmax + shift
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            w = np.where(np.isfinite(top), np.exp(top), 0.0)
            rows = w * ssum
            cost = float(w @ c1)
            mlogm = float(np.sum(np.where(w > 0, w * (t1 + top * ssum), 0.0)))
        colmax = self._k.column_max_log(self._buf_f, self._buf_g, self._buf_v, cnt, shift,
                                        self.C.shape[1])
        mx = float(np.exp(colmax).sum())
        ent = mlogm - float(rows.sum()) + self.C.size
        return cost, ent, mx, rows

    def transport_value(self, eta: float) -> float:
        cost, ent, mx, _ = self.transport_terms()
        return cost + self.epsilon * ent + eta * mx

    def log_plan(self) -> np.ndarray:
        T = self._k.plan_log(self.C, self.inv_eps, self.a_caps, self.kappa)
        return T + (self.a - self.a_caps)[:, None]

    def plan(self) -> np.ndarray:
        return np.exp(self.log_plan())

    def state(self) -> DualState:
        L = self.a_caps[:, None] - self.C * self.inv_eps
        psi = -self.epsilon * np.maximum(L - self.kappa[None, :], 0.0)
        return DualState(lam=self.epsilon * self.a, psi=psi, cost=self.C, epsilon=self.epsilon)
