"""
Synthetic inharmonic multi-pitch signals, noise, analytic conversion and
autocovariance estimation.

All frequencies carried by the objects in this module are in radians per
sample unless the attribute name says ``_hz``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import hilbert

__all__ = [
    "AliasingError",
    "PitchComponent",
    "MultiPitchSignal",
    "CovarianceSequence",
    "SignalConfig",
    "generate_component",
    "random_amplitudes",
    "generate_multipitch",
    "noise_variance",
    "add_noise",
    "analytic_signal",
    "default_n_lags",
    "sample_autocovariance",
    "model_covariance",
    "normalize_unit_variance",
]

MAX_ALIAS_ATTEMPTS = 100


class AliasingError(ValueError):
    """A partial frequency landed at or above pi rad/sample."""


@dataclass(frozen=True)
class PitchComponent:
    """One (approximately) harmonic series.

    ``partial_freqs[l-1] = l * omega0 + deviations[l-1]``.
    """

    f0: float
    omega0: float
    amplitudes: np.ndarray
    partial_freqs: np.ndarray
    deviations: np.ndarray

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("a component needs at least one partial")
        if not (len(self.amplitudes) == len(self.partial_freqs) == len(self.deviations)):
            raise ValueError("amplitudes, partial_freqs and deviations differ in length")

    @property
    def order(self) -> int:
        return len(self.partial_freqs)

    @property
    def powers(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def waveform(self, n_samples: int) -> np.ndarray:
        t = np.arange(n_samples)
        return np.exp(1j * np.outer(t, self.partial_freqs)) @ self.amplitudes

    def to_dict(self) -> dict:
        return {
            "f0_hz": self.f0,
            "omega0": self.omega0,
            "order": self.order,
            "amplitudes_re": self.amplitudes.real.tolist(),
            "amplitudes_im": self.amplitudes.imag.tolist(),
            "partial_freqs": self.partial_freqs.tolist(),
            "deviations": self.deviations.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PitchComponent":
        amps = np.asarray(d["amplitudes_re"]) + 1j * np.asarray(d["amplitudes_im"])
        return cls(
            f0=float(d["f0_hz"]),
            omega0=float(d["omega0"]),
            amplitudes=amps,
            partial_freqs=np.asarray(d["partial_freqs"], dtype=float),
            deviations=np.asarray(d["deviations"], dtype=float),
        )


@dataclass(frozen=True)
class MultiPitchSignal:
    components: list
    samples: np.ndarray
    sample_rate: float

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def true_f0s(self) -> list[float]:
        return [c.f0 for c in self.components]

    @property
    def signal_power(self) -> float:
        """Sum of squared partial magnitudes over all components."""
        return float(sum(c.powers.sum() for c in self.components))

    def to_dict(self) -> dict:
        return {"sample_rate": self.sample_rate, "n_samples": self.n_samples,
                "components": [c.to_dict() for c in self.components]}

    def line_spectrum(self, power: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Ground-truth partial frequencies and their magnitudes (or powers)."""
        freqs = np.concatenate([c.partial_freqs for c in self.components])
        mags = np.concatenate([np.abs(c.amplitudes) for c in self.components])
        return freqs, mags**2 if power else mags


@dataclass(frozen=True)
class CovarianceSequence:
    lags: np.ndarray

    def __post_init__(self):
        if len(self.lags) < 1:
            raise ValueError("need at least one lag")

    @property
    def n_lags(self) -> int:
        return len(self.lags)


@dataclass(frozen=True)
class SignalConfig:
    """Parameters of the Monte-Carlo signal generator.

    ``perturb_hz`` is the half-width of the uniform perturbation applied to each
    nominal fundamental before generating a trial.
    """

    nominal_f0s: tuple = (176.0, 197.0, 240.0, 272.0)
    order_range: tuple = (3, 10)
    kappa: float = 0.0
    n_samples: int = 250
    sample_rate: float = 8000.0
    perturb_hz: float = 1.0
    on_alias: str = "resample"


def random_amplitudes(order: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-magnitude amplitudes with phases uniform on [0, 2pi)."""
    return np.exp(1j * rng.uniform(0.0, 2 * np.pi, size=order))


def generate_component(f0_hz, order, amplitudes, kappa, sample_rate, n_samples=None,
                       rng=None, on_alias="resample") -> PitchComponent:
    """Draw one inharmonic component.

    Partial ``l`` is drawn uniformly on ``[l*w0*(1-kappa), l*w0*(1+kappa)]``
    with ``w0 = 2*pi*f0_hz/sample_rate``. With ``kappa == 0`` the partials are
    exactly ``l*w0``. A partial at or above pi is redrawn (``on_alias="resample"``,
    up to 100 attempts) or rejected immediately (``on_alias="fail"``).

    ``n_samples`` is accepted for signature symmetry with the generator and is
    not needed to build the component itself.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    amplitudes = np.asarray(amplitudes, dtype=complex)
    if len(amplitudes) != order:
        raise ValueError(f"expected {order} amplitudes, got {len(amplitudes)}")
    if f0_hz * order >= sample_rate / 2:
        raise AliasingError(f"{order} harmonics of {f0_hz} Hz exceed Nyquist")
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    if on_alias not in ("resample", "fail"):
        raise ValueError("on_alias must be 'resample' or 'fail'")

    omega0 = 2 * np.pi * f0_hz / sample_rate
    nominal = np.arange(1, order + 1) * omega0
    if kappa == 0.0:
        partials = nominal.copy()
    else:
        if rng is None:
            raise ValueError("an rng is required when kappa > 0")
        partials = rng.uniform(nominal * (1 - kappa), nominal * (1 + kappa))
        for _ in range(MAX_ALIAS_ATTEMPTS):
            bad = partials >= np.pi
            if not bad.any():
                break
            if on_alias == "fail":
                raise AliasingError("perturbed partial reached pi")
            partials[bad] = rng.uniform(nominal[bad] * (1 - kappa), nominal[bad] * (1 + kappa))
        else:
            raise AliasingError(f"no alias-free draw after {MAX_ALIAS_ATTEMPTS} attempts")

    return PitchComponent(
        f0=float(f0_hz),
        omega0=float(omega0),
        amplitudes=amplitudes,
        partial_freqs=partials,
        deviations=partials - nominal,
    )


def generate_multipitch(config: SignalConfig, rng: np.random.Generator) -> MultiPitchSignal:
    """Noiseless multi-pitch signal following the Monte-Carlo protocol.

    Each nominal fundamental is perturbed uniformly within ``+-perturb_hz``, the
    harmonic order is uniform on ``order_range`` (inclusive) and magnitudes are 1
    with uniform random phase.
    """
    lo, hi = config.order_range
    # partial deviations come from their own stream, so fundamentals, orders and
    # phases do not depend on kappa (matched trials across an inharmonicity sweep)
    partial_rng = np.random.default_rng(int(rng.integers(0, 2**63 - 1)))
    comps = []
    for nominal in config.nominal_f0s:
        f0 = nominal + rng.uniform(-config.perturb_hz, config.perturb_hz) if config.perturb_hz else nominal
        order = int(rng.integers(lo, hi + 1))
        amps = random_amplitudes(order, rng)
        comps.append(generate_component(f0, order, amps, config.kappa, config.sample_rate,
                                        config.n_samples, partial_rng, config.on_alias))
    x = np.zeros(config.n_samples, dtype=complex)
    for c in comps:
        x += c.waveform(config.n_samples)
    return MultiPitchSignal(components=comps, samples=x, sample_rate=float(config.sample_rate))


def noise_variance(signal_power: float, snr_db: float) -> float:
    return signal_power * 10.0 ** (-snr_db / 10.0)


def add_noise(x, snr_db, rng, signal_power=None) -> np.ndarray:
    """Add circularly symmetric white Gaussian noise at the requested SNR.

    ``signal_power`` is the sum of squared partial magnitudes; when omitted the
    empirical mean power of ``x`` is used. ``snr_db=inf`` returns a copy of ``x``.
    """
    x = np.asarray(x, dtype=complex)
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    if signal_power is None:
        signal_power = float(np.mean(np.abs(x) ** 2))
    sigma2 = noise_variance(signal_power, snr_db)
    scale = math.sqrt(sigma2 / 2)
    v = rng.normal(0.0, scale, size=x.shape) + 1j * rng.normal(0.0, scale, size=x.shape)
    return x + v


def analytic_signal(x_real) -> np.ndarray:
    """Discrete analytic signal by one-sided spectral doubling.

    DC and (for even lengths) Nyquist bins keep unit weight. The real part of the
    output is the input itself.
    """
    x_real = np.asarray(x_real, dtype=float)
    if x_real.ndim != 1:
        raise ValueError("expected a 1-D real signal")
    z = hilbert(x_real)
    return x_real + 1j * z.imag


def default_n_lags(n_samples: int) -> int:
    return max(1, (2 * n_samples) // 3)


def sample_autocovariance(y, n_lags: int, unbiased: bool = False) -> CovarianceSequence:
    """``r(tau) = 1/N * sum_{t=tau}^{N-1} y_t conj(y_{t-tau})`` for tau < n_lags."""
    y = np.asarray(y, dtype=complex)
    n = len(y)
    if not 1 <= n_lags <= n:
        raise ValueError(f"n_lags must be in [1, {n}], got {n_lags}")
    r = np.empty(n_lags, dtype=complex)
    for tau in range(n_lags):
        r[tau] = np.vdot(y[: n - tau], y[tau:])
    if unbiased:
        r /= n - np.arange(n_lags)
    else:
        r /= n
    r[0] = r[0].real
    return CovarianceSequence(lags=r)


def model_covariance(components, n_lags: int, powers=None) -> CovarianceSequence:
    """Noiseless covariance ``r(tau) = sum sigma_l^2 exp(i w_l tau)``.

    ``powers`` overrides the per-component squared amplitude magnitudes; it is a
    list with one array per component.
    """
    freqs = np.concatenate([c.partial_freqs for c in components])
    if powers is None:
        pw = np.concatenate([c.powers for c in components])
    else:
        pw = np.concatenate([np.asarray(p, dtype=float) for p in powers])
    if np.any(pw < 0):
        raise ValueError("powers must be nonnegative")
    tau = np.arange(n_lags)
    return CovarianceSequence(lags=np.exp(1j * np.outer(tau, freqs)) @ pw)


def normalize_unit_variance(y) -> tuple[np.ndarray, float]:
    """Scale ``y`` to unit mean power; returns ``(y * scale, scale)``."""
    y = np.asarray(y)
    power = float(np.mean(np.abs(y) ** 2))
    if power == 0.0:
        raise ValueError("cannot normalize an all-zero signal")
    scale = 1.0 / math.sqrt(power)
    return y * scale, scale
