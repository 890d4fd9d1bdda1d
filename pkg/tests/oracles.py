"""Independent reference solvers used by the tests.

Nothing here imports the solvers under test; each oracle solves its problem
from the definition (generic convex solver, bisection, projected gradient,
linear program or enumeration).
"""
import itertools

import numpy as np
from scipy.optimize import linprog


def prox_stochastic_cvx(nu_prev, u, C, gamma, zeta, eta, eps, solver="CLARABEL"):
    """``min_M gamma <u, M1> + KL(M1, nu_prev) + gamma zeta (<C,M> + eps D(M) + eta ||M||_{inf,1})``."""
    import cvxpy as cp

    F, G = C.shape
    M = cp.Variable((F, G), nonneg=True)
    nu = cp.sum(M, axis=1)
    D = cp.sum(-cp.entr(M) - M) + F * G
    obj = (gamma * (u @ nu) + cp.sum(cp.kl_div(nu, nu_prev))
           + gamma * zeta * (cp.sum(cp.multiply(C, M)) + eps * D + eta * cp.sum(cp.max(M, axis=0))))
    prob = cp.Problem(cp.Minimize(obj))
    prob.solve(solver=solver)
    return prob.value, M.value


def prox_deterministic_cvx(u, C, gamma, zeta, eta, eps, beta, solver="CLARABEL"):
    """``min 1/2||x-u||^2 + gamma beta ||x||_1 + gamma zeta S(x)`` with ``M1 >= |x|``."""
    import cvxpy as cp

    F, G = C.shape
    M = cp.Variable((F, G), nonneg=True)
    x = cp.Variable(F, complex=True)
    D = cp.sum(-cp.entr(M) - M) + F * G
    obj = (0.5 * cp.sum_squares(x - u) + gamma * beta * cp.norm1(x)
           + gamma * zeta * (cp.sum(cp.multiply(C, M)) + eps * D + eta * cp.sum(cp.max(M, axis=0))))
    prob = cp.Problem(cp.Minimize(obj), [cp.abs(x) <= cp.sum(M, axis=1)])
    prob.solve(solver=solver)
    return prob.value, x.value


def psi_bisection(a, eta, eps, iters=200):
    """Water level by bisection on the threshold, then the clipped scores."""
    s = eps * np.log(np.asarray(a, float))
    if eta == 0:
        return np.zeros_like(s)
    lo, hi = s.min() - eta - 1.0, s.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        spent = np.maximum(s - mid, 0).sum()
        if spent > eta:
            lo = mid
        else:
            hi = mid
    k = 0.5 * (lo + hi)
    return -np.maximum(s - k, 0.0)


def _project_l1_ball(v, radius):
    """Euclidean projection onto ``{x : ||x||_1 <= radius}`` (sort-based)."""
    if np.abs(v).sum() <= radius:
        return v
    m = np.sort(np.abs(v))[::-1]
    cs = np.cumsum(m)
    rho = np.nonzero(m * np.arange(1, len(m) + 1) > (cs - radius))[0][-1]
    theta = (cs[rho] - radius) / (rho + 1)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def psi_projected_gradient(a, eta, eps, iters=200000):
    """``min sum a_f exp(psi_f/eps)`` over the l1 ball, by projected gradient."""
    a = np.asarray(a, float)
    psi = np.zeros_like(a)
    if eta == 0:
        return psi
    for _ in range(iters):
        g = a * np.exp(psi / eps) / eps
        L = float(np.max(a * np.exp(psi / eps))) / eps**2 + 1e-300
        new = _project_l1_ball(psi - g / L, eta)
        if np.max(np.abs(new - psi)) <= 1e-15:
            psi = new
            break
        psi = new
    return psi


def w2_linprog(xa, wa, xb, wb):
    """Balanced transport with squared-distance cost, by linear programming."""
    xa, xb = np.asarray(xa, float), np.asarray(xb, float)
    wa = np.asarray(wa, float) / np.sum(wa)
    wb = np.asarray(wb, float) / np.sum(wb)
    n, m = len(xa), len(xb)
    cost = ((xa[:, None] - xb[None, :]) ** 2).ravel()
    A = []
    for i in range(n):
        row = np.zeros((n, m))
        row[i] = 1
        A.append(row.ravel())
    for j in range(m):
        col = np.zeros((n, m))
        col[:, j] = 1
        A.append(col.ravel())
    res = linprog(cost, A_eq=np.array(A), b_eq=np.concatenate([wa, wb]), bounds=(0, None),
                  method="highs", options={"primal_feasibility_tolerance": 1e-10,
                                           "dual_feasibility_tolerance": 1e-10})
    return float(np.sqrt(max(res.fun, 0.0)))


def w2_enumeration_uniform(xa, xb):
    """Equal-size uniform measures: optimal coupling is a permutation."""
    xa, xb = np.asarray(xa, float), np.asarray(xb, float)
    best = min(np.sum((xa - xb[list(p)]) ** 2) for p in itertools.permutations(range(len(xb))))
    return float(np.sqrt(best / len(xa)))


def ger_exhaustive(true_f0s, est_f0s):
    """Gross error rate from an exhaustive search over one-to-one matchings."""
    K, E = len(true_f0s), len(est_f0s)
    t = np.asarray(true_f0s, float)
    e = np.asarray(est_f0s, float)
    best_cost, best_err = np.inf, K
    m = min(K, E)
    for ti in itertools.combinations(range(K), m):
        for ei in itertools.permutations(range(E), m):
            c = np.abs(1200 * np.log2(e[list(ei)] / t[list(ti)]))
            total = c.sum()
            err = int(np.sum(c > 50)) + (K - m)
            # equal totals (cents add up along chains): the fewer gross errors wins
            if total < best_cost - 1e-6 or (total <= best_cost + 1e-6 and err < best_err):
                best_cost = min(best_cost, total)
                best_err = err
    return best_err / K
