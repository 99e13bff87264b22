"""Frequency-domain propagation of itinerant envelopes through the microwave path.

Covers reflection off (and loading of) the electro-optic microwave cavity, the
insertion-loss ledger, mode-matching weights, equivalent noise bandwidth and
the heterodyne SNR prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .dynamics import TemporalEnvelope
from .errors import DomainError, FormatError

TWO_PI = 2.0 * math.pi
PAD_FACTOR = 8


@dataclass(frozen=True)
class CavityResponse:
    """Single-port cavity seen in reflection; linewidth and detuning in Hz."""

    eta_e: float = 0.44
    kappa_eo_hz: float = 1.4e6
    detuning_hz: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.eta_e <= 1.0:
            raise DomainError("eta_e must lie in [0, 1]")
        if not self.kappa_eo_hz > 0:
            raise DomainError("kappa_eo_hz must be > 0")

    @property
    def kappa(self):
        return TWO_PI * self.kappa_eo_hz

    def _denominator(self, omega):
        return 1j * (np.asarray(omega) - TWO_PI * self.detuning_hz) + self.kappa / 2

    def H(self, omega):
        """Absorption response ``eta_e kappa / (i(omega - Delta) + kappa/2)``."""
        return self.eta_e * self.kappa / self._denominator(omega)

    def reflection(self, omega):
        return 1.0 - self.H(omega)

    def intracavity(self, omega):
        """Intracavity amplitude per unit input flux amplitude (units sqrt(s))."""
        return math.sqrt(self.eta_e * self.kappa) / self._denominator(omega)


@dataclass(frozen=True)
class LossLedger:
    """Ordered insertion losses (dB) after the source's output coupler."""

    segments: tuple = (("eo_qc", 1.6), ("sw_eo", 1.6), ("jpa_sw", 1.0))
    outcoupling: float = 1.0 / 1.43

    def __post_init__(self):
        labels = [label for label, _ in self.segments]
        if len(set(labels)) != len(labels):
            raise DomainError("ledger labels must be unique")
        if any(db < 0 for _, db in self.segments):
            raise DomainError("attenuations must be >= 0 dB")
        if not 0.0 < self.outcoupling <= 1.0:
            raise DomainError("outcoupling must lie in (0, 1]")

    @property
    def labels(self):
        return [label for label, _ in self.segments]

    def transmission(self, up_to: Optional[str] = None, include_outcoupling: bool = True) -> float:
        """Cumulative linear transmission through segment ``up_to`` (inclusive)."""
        if up_to is not None and up_to not in self.labels:
            raise DomainError(f"unknown ledger label {up_to!r}")
        total_db = 0.0
        for label, db in self.segments:
            total_db += db
            if label == up_to:
                break
        t = 10.0 ** (-total_db / 10.0)
        return t * self.outcoupling if include_outcoupling else t

    def loss_db(self, up_to: Optional[str] = None) -> float:
        return -10.0 * math.log10(self.transmission(up_to, include_outcoupling=False))


@dataclass
class Trace:
    """Uniformly sampled real trace (e.g. intracavity population)."""

    t0: float
    dt: float
    values: np.ndarray

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self.values))


@dataclass
class ModeMatchWeights:
    dt: float
    w: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.size == 0 or np.any(self.w < 0) or not np.any(self.w > 0):
            raise DomainError("weights must be nonnegative and not all zero")

    @classmethod
    def from_envelope(cls, env: TemporalEnvelope, duration: float, weighting: str = "amplitude"):
        """Weights from the first ``duration`` seconds of an envelope, unit peak.

        ``amplitude`` weights follow sqrt(flux), i.e. the field mode shape;
        ``power`` weights follow the flux itself.
        """
        n = min(len(env), int(round(duration / env.dt)))
        pop = np.clip(env.pop[:n], 0.0, None)
        if weighting == "amplitude":
            w = np.sqrt(pop)
        elif weighting == "power":
            w = pop
        else:
            raise DomainError(f"unknown weighting {weighting!r}")
        if not np.any(w > 0):
            raise DomainError("envelope is empty over the requested duration")
        return cls(env.dt, w / w.max(), env.t0)

    @classmethod
    def rectangular(cls, duration, dt):
        return cls(dt, np.ones(int(round(duration / dt))))

    @property
    def duration(self):
        return len(self.w) * self.dt


def _fft_length(n):
    return 1 << int(math.ceil(math.log2(PAD_FACTOR * n)))


def _check_uniform(env):
    if not isinstance(env, TemporalEnvelope):
        raise FormatError("expected a uniformly sampled TemporalEnvelope")


def filter_field(field_samples, dt, transfer):
    """Apply a frequency response to a sampled field via zero-padded FFT.

    ``transfer`` maps angular frequency (rad/s) to the complex response; the
    convention is ``X(omega) = sum x(t) exp(-i omega t)``.
    """
    x = np.asarray(field_samples, dtype=complex)
    n_fft = _fft_length(len(x))
    omega = TWO_PI * np.fft.fftfreq(n_fft, dt)
    return np.fft.ifft(np.fft.fft(x, n_fft) * transfer(omega))[: len(x)]


def reflect(env: TemporalEnvelope, resp: CavityResponse) -> TemporalEnvelope:
    """Envelope reflected off the cavity, ``(1 - H) * field``.

    The coherent part filters ``amp``; the flux is filtered as a single-photon
    wavepacket with mode function ``sqrt(pop)``.
    """
    _check_uniform(env)
    amp = filter_field(env.amp, env.dt, resp.reflection)
    mode = filter_field(np.sqrt(np.clip(env.pop, 0.0, None)), env.dt, resp.reflection)
    return replace(env, amp=amp, pop=np.abs(mode) ** 2, label=f"{env.label}:reflected")


def intracavity_population(env: TemporalEnvelope, resp: CavityResponse) -> Trace:
    """Occupation of the converter cavity driven by the envelope's wavepacket."""
    _check_uniform(env)
    mode = filter_field(np.sqrt(np.clip(env.pop, 0.0, None)), env.dt, resp.intracavity)
    return Trace(env.t0, env.dt, np.abs(mode) ** 2)


def dissipated_fraction(env: TemporalEnvelope, resp: CavityResponse) -> float:
    """Photons lost to the cavity's internal loss channel."""
    n = intracavity_population(env, resp)
    kappa_int = (1.0 - resp.eta_e) * resp.kappa
    return float(kappa_int * np.sum(n.values) * env.dt)


class WindowAverage(NamedTuple):
    n_sp: float
    best_arrival: float


def pump_window_average(trace: Trace, window_len: float, incident_photons: float = 1.0) -> WindowAverage:
    """Best rectangular-window average of the population, per incident photon."""
    if not window_len > 0:
        raise DomainError("window_len must be > 0")
    if not incident_photons > 0:
        raise DomainError("incident_photons must be > 0")
    k = max(1, int(round(window_len / trace.dt)))
    if k > len(trace.values):
        raise DomainError("window is longer than the record")
    csum = np.concatenate(([0.0], np.cumsum(trace.values)))
    means = (csum[k:] - csum[:-k]) / k
    i = int(np.argmax(means))
    return WindowAverage(float(means[i]) / incident_photons, trace.t0 + i * trace.dt)


def apply_ledger(env: TemporalEnvelope, ledger: LossLedger, up_to: Optional[str] = None):
    """Scale an envelope by the path transmission. Returns ``(envelope, transmission)``."""
    if not ledger.segments and up_to is None:
        t = ledger.outcoupling
    else:
        t = ledger.transmission(up_to)
    return env.scaled(t), t


def integrate_photons(env: TemporalEnvelope, T: float) -> float:
    """Photons carried by the envelope within ``[t0, t0 + T]``."""
    if T < 0 or T > (len(env) - 1) * env.dt * (1 + 1e-12):
        raise DomainError("integration time must lie within the record")
    if T == 0:
        return 0.0
    n = int(math.floor(T / env.dt + 1e-9))
    total = float(np.trapezoid(env.pop[: n + 1], dx=env.dt))
    rest = T - n * env.dt
    if rest > 1e-15 and n + 1 < len(env):
        p0, p1 = env.pop[n], env.pop[n + 1]
        frac = rest / env.dt
        total += 0.5 * rest * (p0 + (p0 + frac * (p1 - p0)))
    return total


def enbw(weights: ModeMatchWeights) -> float:
    """Equivalent noise bandwidth ``int w^2 dt / (int w dt)^2`` in Hz."""
    w = weights.w
    return float(np.sum(w * w) / (np.sum(w) ** 2 * weights.dt))


class HeterodyneSnr(NamedTuple):
    snr: float
    signal_quanta: float
    noise_quanta: float
    enbw_hz: float
    saturated: bool

    def at_bandwidth(self, bandwidth_hz):
        """SNR referred to a flat detection bandwidth (e.g. the IF bandwidth)."""
        return self.snr * self.enbw_hz / bandwidth_hz


def predict_heterodyne_snr(
    env: TemporalEnvelope,
    weights: ModeMatchWeights,
    added_noise_quanta: float,
    vacuum_quanta: float = 0.5,
) -> HeterodyneSnr:
    """SNR of the MMF-weighted heterodyne signal.

    ``env`` is the flux at the noise reference point. Signal is the weighted
    photon number ``sum w * flux * dt``; noise is ``(N + vacuum) * ENBW * T``
    with ``T`` the MMF duration.
    """
    if added_noise_quanta < 0 or vacuum_quanta < 0:
        raise DomainError("noise quanta must be >= 0")
    if not math.isclose(env.dt, weights.dt, rel_tol=1e-9):
        raise FormatError("weights and envelope must share the sample spacing")
    n = min(len(env), len(weights.w))
    signal = float(np.sum(weights.w[:n] * env.pop[:n]) * env.dt)
    bw = enbw(weights)
    noise = (added_noise_quanta + vacuum_quanta) * bw * weights.duration
    if noise == 0:
        return HeterodyneSnr(np.finfo(float).max if signal > 0 else 0.0, signal, 0.0, bw, signal > 0)
    return HeterodyneSnr(signal / noise, signal, noise, bw, False)
