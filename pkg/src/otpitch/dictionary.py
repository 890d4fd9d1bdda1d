"""
Fourier measurement operators.

A dictionary in ``time`` mode maps a complex line spectrum to waveform samples
``x_t``, t = 0..N-1; in ``lag`` mode it maps a power spectrum to covariance
lags ``r(tau)``, tau = 0..T-1. Both share the same matrix form
``A[r, f] = exp(i * omega_f * r)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grids import FrequencyGrid

__all__ = [
    "FourierDictionary",
    "RealStackedSystem",
    "build_dictionary",
    "apply",
    "adjoint",
    "operator_norm",
    "real_stacked",
    "datafit_stochastic",
    "datafit_deterministic",
    "datafit_gradient_stochastic",
    "datafit_gradient_deterministic",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FourierDictionary:
    matrix: np.ndarray
    mode: str

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.matrix.shape[1]

    @cached_property
    def stacked(self) -> np.ndarray:
        """Real matrix with the real block over the imaginary block."""
        return np.vstack([self.matrix.real, self.matrix.imag])

    @cached_property
    def norm(self) -> float:
        return operator_norm(self)


@dataclass(frozen=True)
class RealStackedSystem:
    matrix: np.ndarray
    target: np.ndarray


def build_dictionary(freq_grid: FrequencyGrid, rows: int, mode: str = "time") -> FourierDictionary:
    if rows < 1:
        raise ValueError("rows must be >= 1")
    if mode not in ("time", "lag"):
        raise ValueError(f"mode must be 'time' or 'lag', got {mode!r}")
    r = np.arange(rows)
    A = np.exp(1j * np.outer(r, freq_grid.freqs))
    return FourierDictionary(A, mode)


def apply(dic: FourierDictionary, coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs)
    if coeffs.shape[0] != dic.n_atoms:
        raise ValueError(f"expected {dic.n_atoms} coefficients, got {coeffs.shape[0]}")
    return dic.matrix @ coeffs


def adjoint(dic: FourierDictionary, residual) -> np.ndarray:
    residual = np.asarray(residual)
    if residual.shape[0] != dic.rows:
        raise ValueError(f"expected {dic.rows} entries, got {residual.shape[0]}")
    return dic.matrix.conj().T @ residual


def operator_norm(dic: FourierDictionary, tol: float = 1e-13, max_iter: int = 10000,
                  seed: int = 0, squarings: int = 10) -> float:
    """Largest singular value by power iteration on the smaller Gram matrix.

    Grid dictionaries have a cluster of nearly equal top eigenvalues, so the
    iteration runs on ``(G / ||G||_F)^(2^squarings)``, obtained by repeated
    squaring; the eigenvalue itself is the Rayleigh quotient of ``G`` at the
    iterate. Iterates until that quotient changes by less than ``tol``
    relatively. Non-convergence is logged and the best estimate returned.
    """
    A = dic.matrix
    gram = A @ A.conj().T if A.shape[0] <= A.shape[1] else A.conj().T @ A
    P = gram / np.linalg.norm(gram)
    for _ in range(squarings):
        P = P @ P
        P /= np.linalg.norm(P)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(gram.shape[0]) + 1j * rng.standard_normal(gram.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = P @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        lam_new = float(np.vdot(x, gram @ x).real)
        if abs(lam_new - lam) <= tol * abs(lam_new):
            return float(np.sqrt(lam_new))
        lam = lam_new
    log.warning("power iteration did not converge in %d iterations", max_iter)
    return float(np.sqrt(lam))


def real_stacked(dic: FourierDictionary, target) -> RealStackedSystem:
    target = np.asarray(target, dtype=complex)
    return RealStackedSystem(dic.stacked, np.concatenate([target.real, target.imag]))


def _stack(z):
    return np.concatenate([z.real, z.imag])


def datafit_stochastic(dic: FourierDictionary, nu, r_hat) -> float:
    """``(1/T) ||r_hat - A nu||^2`` for a real spectrum ``nu``."""
    res = dic.stacked @ nu - _stack(np.asarray(r_hat, dtype=complex))
    return float(res @ res) / dic.rows


def datafit_deterministic(dic: FourierDictionary, mu, y) -> float:
    """``(1/N) ||y - A mu||^2``."""
    res = dic.matrix @ mu - y
    return float(np.vdot(res, res).real) / dic.rows


def datafit_gradient_stochastic(dic: FourierDictionary, nu, r_hat, beta: float = 0.0) -> np.ndarray:
    """Gradient of ``(1/T)||r_hat - A nu||^2 + beta * sum(nu)`` over real ``nu``."""
    Ar = dic.stacked
    res = Ar @ nu - _stack(np.asarray(r_hat, dtype=complex))
    return (2.0 / dic.rows) * (Ar.T @ res) + beta


def datafit_gradient_deterministic(dic: FourierDictionary, mu, y) -> np.ndarray:
    """``(2/N) A^H (A mu - y)``.

    Equals the gradient of ``(1/N)||y - A mu||^2`` with respect to the stacked
    real and imaginary parts, written as a complex vector, so that
    ``mu - gamma * g`` with ``gamma = N / (2 ||A||^2)`` is a descent step.
    """
    A = dic.matrix
    return (2.0 / dic.rows) * (A.conj().T @ (A @ mu - y))
