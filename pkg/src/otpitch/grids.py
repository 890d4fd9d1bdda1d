"""Frequency / pitch grids and the harmonic ground costs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FrequencyGrid",
    "PitchGrid",
    "CostMatrix",
    "uniform_frequency_grid",
    "uniform_pitch_grid",
    "ground_cost_unnormalized",
    "ground_cost",
    "cost_matrix",
    "single_pitch_score",
    "implied_harmonic_spectrum",
]


@dataclass(frozen=True)
class FrequencyGrid:
    freqs: np.ndarray

    def __post_init__(self):
        f = self.freqs
        if f.ndim != 1 or len(f) < 1:
            raise ValueError("frequency grid must be a nonempty 1-D array")
        if np.any(f < 0) or np.any(f >= np.pi):
            raise ValueError("grid frequencies must lie in [0, pi)")
        if np.any(np.diff(f) <= 0):
            raise ValueError("grid frequencies must be strictly increasing")

    @property
    def count(self) -> int:
        return len(self.freqs)


@dataclass(frozen=True)
class PitchGrid:
    pitches: np.ndarray
    sample_rate: float | None = None

    def __post_init__(self):
        p = self.pitches
        if p.ndim != 1 or len(p) < 1:
            raise ValueError("pitch grid must be a nonempty 1-D array")
        if np.any(p <= 0):
            raise ValueError("pitch candidates must be positive")
        if np.any(np.diff(p) <= 0):
            raise ValueError("pitch candidates must be strictly increasing")

    @property
    def count(self) -> int:
        return len(self.pitches)

    @property
    def hz(self) -> np.ndarray:
        if self.sample_rate is None:
            raise ValueError("pitch grid has no sample rate attached")
        return self.pitches * self.sample_rate / (2 * np.pi)

    def subset(self, idx) -> "PitchGrid":
        return PitchGrid(self.pitches[np.asarray(idx, dtype=int)], self.sample_rate)


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    c_min: np.ndarray
    cost_kind: str = "normalized"

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def columns(self, idx) -> "CostMatrix":
        """Cost matrix restricted to a subset of pitch candidates."""
        sub = self.entries[:, np.asarray(idx, dtype=int)]
        return CostMatrix(sub, sub.min(axis=1), self.cost_kind)

    def to_csv(self, path) -> None:
        np.savetxt(path, self.entries, delimiter=",", fmt="%.17g")


def uniform_frequency_grid(count: int, lo: float = 0.0, hi: float = np.pi) -> FrequencyGrid:
    """``count`` equally spaced points on ``[lo, hi)``."""
    if count < 2:
        raise ValueError("need at least two grid points")
    if not 0.0 <= lo < hi <= np.pi:
        raise ValueError(f"invalid range [{lo}, {hi})")
    step = (hi - lo) / count
    return FrequencyGrid(lo + step * np.arange(count))


def uniform_pitch_grid(lo_hz: float, hi_hz: float, count: int, sample_rate: float) -> PitchGrid:
    """``count`` candidates equally spaced in Hz on ``[lo_hz, hi_hz]`` (both ends included)."""
    if not 0 < lo_hz <= hi_hz < sample_rate / 2:
        raise ValueError("pitch range must satisfy 0 < lo <= hi < fs/2")
    hz = np.linspace(lo_hz, hi_hz, count)
    return PitchGrid(2 * np.pi * hz / sample_rate, float(sample_rate))


def _nearest_harmonic(omega, omega0):
    # the quadratic (w - k w0)^2 is minimized by one of the two integers around w/w0
    ratio = omega / omega0
    k_lo = np.maximum(1.0, np.floor(ratio))
    k_hi = np.maximum(1.0, np.ceil(ratio))
    d_lo = (omega - k_lo * omega0) ** 2
    d_hi = (omega - k_hi * omega0) ** 2
    return np.where(d_hi < d_lo, k_hi, k_lo), np.minimum(d_lo, d_hi)


def ground_cost_unnormalized(omega, omega0):
    """Squared distance (rad^2) from ``omega`` to the nearest positive harmonic of ``omega0``."""
    omega0 = np.asarray(omega0, dtype=float)
    if np.any(omega0 <= 0):
        raise ValueError("omega0 must be positive")
    _, d = _nearest_harmonic(np.asarray(omega, dtype=float), omega0)
    return d if d.ndim else float(d)


def ground_cost(omega, omega0):
    """Harmonic cost normalized by ``omega0**2``: ``min_k (omega/omega0 - k)^2``, k >= 1."""
    omega0 = np.asarray(omega0, dtype=float)
    c = ground_cost_unnormalized(omega, omega0) / omega0**2
    return c if np.ndim(c) else float(c)


def cost_matrix(freq_grid: FrequencyGrid, pitch_grid: PitchGrid, kind: str = "normalized") -> CostMatrix:
    """Dense F x G matrix ``C[f, g] = cost(omega_f, omega0_g)`` and its row minima."""
    w = freq_grid.freqs[:, None]
    w0 = pitch_grid.pitches[None, :]
    if kind == "normalized":
        C = ground_cost(w, w0)
    elif kind == "unnormalized":
        C = ground_cost_unnormalized(w, w0)
    else:
        raise ValueError(f"unknown cost kind {kind!r}")
    C = np.ascontiguousarray(C)
    return CostMatrix(C, C.min(axis=1), kind)


def single_pitch_score(masses, freq_grid: FrequencyGrid, omega0: float, kind: str = "normalized") -> float:
    """Cost of transporting all of ``masses`` onto the harmonics of ``omega0``."""
    masses = np.asarray(masses, dtype=float)
    if np.any(masses < 0):
        raise ValueError("masses must be nonnegative")
    cost = ground_cost if kind == "normalized" else ground_cost_unnormalized
    return float(np.dot(cost(freq_grid.freqs, omega0), masses))


def implied_harmonic_spectrum(masses, freq_grid: FrequencyGrid, omega0: float) -> dict[int, float]:
    """Bin mass onto harmonics: harmonic ``k`` collects ``((k - 1/2) w0, (k + 1/2) w0]``.

    Mass exactly on a bin edge goes to the lower harmonic. Mass at or below
    ``w0/2`` belongs to no harmonic and is dropped.
    """
    if omega0 <= 0:
        raise ValueError("omega0 must be positive")
    masses = np.asarray(masses, dtype=float)
    k = np.ceil(freq_grid.freqs / omega0 - 0.5).astype(int)
    out: dict[int, float] = {}
    for kk, m in zip(k, masses):
        if kk >= 1 and m != 0:
            out[int(kk)] = out.get(int(kk), 0.0) + float(m)
    return dict(sorted(out.items()))
