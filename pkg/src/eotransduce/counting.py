"""Monte Carlo photon counting, SNR estimation, Rabi fits and rate sweeps.

Random streams are counter based: chunk ``k`` of a run draws from
``default_rng([seed, k])``, so records do not depend on how many worker
threads process the chunks.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DomainError, FitError, UndefinedSnrError
from .figures import DeviceParams, added_noise_referred, dissipated_power, throughput
from .optics import (
    DEFAULT_THERMAL,
    OpticalNoiseModel,
    ThermalOccupancyModel,
    optical_noise_per_pulse,
    thermal_occupancy,
)

TAG_RESOLUTION_S = 250e-12
CHUNK_PULSES = 1 << 20
SIGNAL, VACUUM = 0, 1


@dataclass(frozen=True)
class RunPlan:
    """Pulse train and detection timing (seconds, relative to the trigger)."""

    trigger_rate_hz: float = 1e3
    n_pulses: int = 60_000_000
    interleave: bool = True
    gate_start_s: float = 950e-9
    gate_len_s: float = 200e-9
    window_len_s: float = 2e-6
    seed: int = 0

    def __post_init__(self):
        if not self.trigger_rate_hz > 0:
            raise DomainError("trigger_rate_hz must be > 0")
        if self.n_pulses < (2 if self.interleave else 1):
            raise DomainError("need at least 2 pulses when interleaved")
        if not (0 <= self.gate_start_s and self.gate_len_s > 0):
            raise DomainError("gate must start at >= 0 and have positive length")
        if self.gate_start_s + self.gate_len_s > self.window_len_s:
            raise DomainError("gate must lie within the detection window")

    @property
    def n_signal_pulses(self):
        return (self.n_pulses + 1) // 2 if self.interleave else self.n_pulses

    @property
    def n_vacuum_pulses(self):
        return self.n_pulses // 2 if self.interleave else 0


@dataclass(frozen=True)
class TimeProfile:
    """Arrival-time density of signal photons, sampled on a uniform grid."""

    t0: float
    dt: float
    density: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.density, dtype=float)
        if d.ndim != 1 or d.size == 0 or np.any(d < 0) or not np.all(np.isfinite(d)):
            raise DomainError("density must be a finite, nonnegative 1-D array")
        if abs(d.sum() * self.dt - 1.0) > 1e-6:
            raise DomainError("time profile must integrate to 1")
        object.__setattr__(self, "density", d)

    @classmethod
    def from_shape(cls, t0, dt, shape):
        shape = np.clip(np.asarray(shape, dtype=float), 0.0, None)
        total = shape.sum() * dt
        if total <= 0:
            raise DomainError("profile shape is identically zero")
        return cls(t0, dt, shape / total)

    @classmethod
    def uniform(cls, t0, length, n=200):
        return cls(t0, length / n, np.full(n, 1.0 / length))


@dataclass
class CountRecord:
    plan: RunPlan
    pulse_index: np.ndarray
    channel: np.ndarray
    t_click: np.ndarray

    def in_gate(self):
        lo = self.plan.gate_start_s
        return (self.t_click >= lo) & (self.t_click < lo + self.plan.gate_len_s)

    @property
    def raw_signal(self) -> int:
        """Gated clicks following signal pulses."""
        return int(np.count_nonzero(self.in_gate() & (self.channel == SIGNAL)))

    @property
    def noise(self) -> int:
        """Gated clicks following vacuum pulses."""
        return int(np.count_nonzero(self.in_gate() & (self.channel == VACUUM)))

    @property
    def total(self) -> int:
        return len(self.t_click)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pulse_index", "channel", "t_click_s"])
            for i, c, t in zip(self.pulse_index, self.channel, self.t_click):
                writer.writerow([int(i), "signal" if c == SIGNAL else "vacuum", repr(float(t))])


def _check_probability(name, p):
    if not 0.0 <= p < 1.0:
        raise DomainError(f"{name} must lie in [0, 1), got {p!r}")


def _sample_profile(rng, profile, n):
    cdf = np.cumsum(profile.density)
    cdf /= cdf[-1]
    k = np.searchsorted(cdf, rng.random(n), side="right")
    k = np.minimum(k, len(cdf) - 1)
    return profile.t0 + (k + rng.random(n)) * profile.dt


def _quantize(t):
    return np.floor(t / TAG_RESOLUTION_S) * TAG_RESOLUTION_S


def _simulate_chunk(plan, profile, eta_det, p_noise, chunk):
    rng = np.random.default_rng([plan.seed, chunk])
    start = chunk * CHUNK_PULSES
    n = min(CHUNK_PULSES, plan.n_pulses - start)
    # Chunks start on even pulses; odd pulses are vacuum when interleaved.
    sig_offsets = np.arange(0, n, 2) if plan.interleave else np.arange(n)
    n_sig = len(sig_offsets)
    k_sig = rng.binomial(n_sig, eta_det) if eta_det > 0 else 0
    k_noise = rng.binomial(n, p_noise) if p_noise > 0 else 0
    sig_idx = sig_offsets[rng.choice(n_sig, size=k_sig, replace=False)] if k_sig else np.empty(0, int)
    noise_idx = rng.choice(n, size=k_noise, replace=False) if k_noise else np.empty(0, int)
    t_sig = _sample_profile(rng, profile, k_sig)
    t_noise = plan.gate_start_s + plan.gate_len_s * rng.random(k_noise)

    idx = np.concatenate((sig_idx, noise_idx)).astype(np.int64)
    t = _quantize(np.concatenate((t_sig, t_noise)))
    # at most one click per pulse: keep the earliest
    order = np.lexsort((t, idx))
    idx, t = idx[order], t[order]
    keep = np.ones(len(idx), bool)
    keep[1:] = idx[1:] != idx[:-1]
    idx, t = idx[keep] + start, t[keep]
    channel = np.where(plan.interleave & (idx % 2 == 1), VACUUM, SIGNAL).astype(np.int8)
    return idx, channel, t


def simulate_run(
    plan: RunPlan,
    time_profile: TimeProfile,
    eta_det: float,
    noise_counts_per_pulse: float,
    threads: int = 1,
) -> CountRecord:
    """Monte Carlo clicks for a pulse train.

    Each signal pulse yields a click with probability ``eta_det``, timed by
    ``time_profile``. Every pulse carries Poisson noise of the given mean
    spread uniformly over the gate; at most one click per pulse is kept.
    """
    _check_probability("eta_det", eta_det)
    if not noise_counts_per_pulse >= 0:
        raise DomainError("noise_counts_per_pulse must be >= 0")
    p_noise = -math.expm1(-noise_counts_per_pulse)
    _check_probability("noise click probability", p_noise)
    lo, hi = time_profile.t0, time_profile.t0 + len(time_profile.density) * time_profile.dt
    if lo < 0 or hi > plan.window_len_s * (1 + 1e-12):
        raise DomainError("time profile must lie within the detection window")

    n_chunks = -(-plan.n_pulses // CHUNK_PULSES)
    work = lambda k: _simulate_chunk(plan, time_profile, eta_det, p_noise, k)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(n_chunks)))
    else:
        parts = [work(k) for k in range(n_chunks)]
    if not parts:
        empty = np.empty(0)
        return CountRecord(plan, empty.astype(np.int64), empty.astype(np.int8), empty)
    idx, ch, t = (np.concatenate(x) for x in zip(*parts))
    return CountRecord(plan, idx, ch, t)


def expected_totals(plan: RunPlan, eta_det: float, noise_counts_per_pulse: float):
    """Mean gated (raw_signal, noise) totals for a plan, matching :func:`simulate_run`."""
    p_noise = -math.expm1(-noise_counts_per_pulse)
    p_signal_pulse = 1.0 - (1.0 - eta_det) * (1.0 - p_noise)
    return plan.n_signal_pulses * p_signal_pulse, plan.n_vacuum_pulses * p_noise


class Histogram(NamedTuple):
    edges: np.ndarray
    counts: np.ndarray
    errors: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_start_s", "bin_end_s", "counts", "error"])
            for a, b, c, e in zip(self.edges[:-1], self.edges[1:], self.counts, self.errors):
                writer.writerow([repr(float(a)), repr(float(b)), int(c), repr(float(e))])


def bin_counts(record: CountRecord, bin_width: float, channel: Optional[int] = None) -> Histogram:
    """Histogram the click times over the detection window, errors sqrt(N)."""
    if not bin_width > 0:
        raise DomainError("bin_width must be > 0")
    window = record.plan.window_len_s
    n_bins = int(math.ceil(window / bin_width - 1e-9))
    edges = np.arange(n_bins + 1) * bin_width
    t = record.t_click if channel is None else record.t_click[record.channel == channel]
    k = np.minimum((t / bin_width).astype(np.int64), n_bins - 1)
    counts = np.bincount(k, minlength=n_bins)
    return Histogram(edges, counts, np.sqrt(counts))


class SnrEstimate(NamedTuple):
    snr: float
    sigma: float


def estimate_snr(raw_signal_counts, noise_counts) -> SnrEstimate:
    """``(raw - noise) / noise`` with first-order Poisson error propagation."""
    raw, noise = float(raw_signal_counts), float(noise_counts)
    if raw < 0:
        raise DomainError("raw counts must be >= 0")
    if not noise > 0:
        raise UndefinedSnrError("SNR is undefined without noise counts")
    return SnrEstimate((raw - noise) / noise, math.sqrt(raw / noise**2 + raw**2 / noise**3))


@dataclass(frozen=True)
class RabiFit:
    """Fit of ``A cos^2(theta/2 + phi) + c``.

    Internally linear in ``(c0, p, q)`` with model ``c0 + p cos(theta) + q sin(theta)``.
    """

    amplitude: float
    phase: float
    offset: float
    minima: np.ndarray
    minima_sigma: float
    amplitude_sigma: float
    params: np.ndarray
    covariance: np.ndarray
    chi2: float

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.amplitude * np.cos(theta / 2 + self.phase) ** 2 + self.offset

    def band(self, theta, n_sigma=1.0):
        """Lower/upper 68% (for ``n_sigma=1``) confidence band of the fitted curve."""
        theta = np.asarray(theta, dtype=float)
        J = np.stack([np.ones_like(theta), np.cos(theta), np.sin(theta)], axis=-1)
        sd = np.sqrt(np.einsum("...i,ij,...j->...", J, self.covariance, J))
        y = self(theta)
        return y - n_sigma * sd, y + n_sigma * sd


def fit_rabi(angles, counts, count_errors) -> RabiFit:
    theta = np.asarray(angles, dtype=float)
    y = np.asarray(counts, dtype=float)
    err = np.asarray(count_errors, dtype=float)
    if not (theta.shape == y.shape == err.shape) or theta.ndim != 1:
        raise FitError("angles, counts and errors must be 1-D and equally long")
    if len(np.unique(np.round(theta, 12))) < 4:
        raise FitError("need at least 4 distinct angles")
    if np.any(err <= 0) or not np.all(np.isfinite(err)):
        raise FitError("count errors must be positive and finite")
    J = np.stack([np.ones_like(theta), np.cos(theta), np.sin(theta)], axis=1)
    w = 1.0 / err**2
    normal = J.T @ (w[:, None] * J)
    if np.linalg.cond(normal) > 1e12:
        raise FitError("singular normal equations")
    cov = np.linalg.inv(normal)
    params = cov @ (J.T @ (w * y))
    c0, p, q = params
    half_amp = math.hypot(p, q)
    amplitude = 2.0 * half_amp
    two_phi = math.atan2(-q, p)
    resid = y - J @ params
    # gradients of A and 2*phi with respect to (c0, p, q)
    if half_amp > 0:
        g_amp = np.array([0.0, 2 * p / half_amp, 2 * q / half_amp])
        g_phi = np.array([0.0, q, -p]) / half_amp**2
        amp_sigma = float(math.sqrt(g_amp @ cov @ g_amp))
        min_sigma = float(math.sqrt(g_phi @ cov @ g_phi))
    else:
        amp_sigma, min_sigma = float(math.sqrt(cov[1, 1] + cov[2, 2])), math.inf
    first = math.pi - two_phi
    lo, hi = theta.min(), theta.max()
    k = np.arange(math.floor((lo - first) / (2 * math.pi)) - 1, math.ceil((hi - first) / (2 * math.pi)) + 2)
    minima = first + 2 * math.pi * k
    minima = minima[(minima >= lo - 1e-9) & (minima <= hi + 1e-9)]
    return RabiFit(
        amplitude=amplitude,
        phase=two_phi / 2.0,
        offset=c0 - half_amp,
        minima=minima,
        minima_sigma=min_sigma,
        amplitude_sigma=amp_sigma,
        params=params,
        covariance=cov,
        chi2=float(np.sum(w * resid**2)),
    )


RABI_ANGLES = np.linspace(0.0, 4.0 * np.pi, 9)


class RabiData(NamedTuple):
    angles: np.ndarray
    counts: np.ndarray
    errors: np.ndarray
    noise_counts: float
    noise_error: float


def simulate_optical_rabi(
    eta_det, noise_counts_per_pulse, pulses_per_point=4_700_000, angles=RABI_ANGLES, seed=0, n_single=1.0
) -> RabiData:
    """Gated click totals per rotation angle plus one pump-only noise point."""
    rng = np.random.default_rng([seed, 0x5AB1])
    p_noise = -math.expm1(-noise_counts_per_pulse)
    angles = np.asarray(angles, dtype=float)
    p_sig = eta_det * n_single * np.cos(angles / 2) ** 2
    p_click = 1.0 - (1.0 - p_sig) * (1.0 - p_noise)
    counts = rng.binomial(pulses_per_point, p_click).astype(float)
    noise = float(rng.binomial(pulses_per_point, p_noise))
    return RabiData(angles, counts, np.sqrt(np.maximum(counts, 1.0)), noise, math.sqrt(max(noise, 1.0)))


def simulate_microwave_rabi(snr_per_shot, shots_per_point, angles=RABI_ANGLES, seed=0) -> RabiData:
    """Heterodyne Rabi data in units of the noise floor.

    Per shot the MMF-integrated power is exponential with mean
    ``1 + snr cos^2(theta/2)``; the noise floor is subtracted after averaging.
    """
    rng = np.random.default_rng([seed, 0x3A7E])
    angles = np.asarray(angles, dtype=float)
    mean = 1.0 + snr_per_shot * np.cos(angles / 2) ** 2
    totals = rng.gamma(shots_per_point, mean)
    values = totals / shots_per_point - 1.0
    errors = mean / math.sqrt(shots_per_point)
    noise = rng.gamma(shots_per_point, 1.0) / shots_per_point - 1.0
    return RabiData(angles, values, errors, noise, 1.0 / math.sqrt(shots_per_point))


@dataclass(frozen=True)
class SweepRow:
    rate_hz: float
    duty: float
    p_diss_w: float
    signal_per_pulse: float
    noise_per_pulse: float
    snr: float
    snr_sigma: float
    n_e: float
    n_add: float
    throughput_hz: float
    snr_saturated: bool = False


SWEEP_COLUMNS = tuple(SweepRow.__dataclass_fields__)


def sweep_rate(
    rates: Sequence[float],
    device: DeviceParams,
    eta_det: float,
    eta_det_cav: float,
    noise: OpticalNoiseModel = OpticalNoiseModel(),
    thermal: ThermalOccupancyModel = DEFAULT_THERMAL,
    pulses_per_rate: float = 70e6,
    eta_ext: Optional[float] = None,
) -> list:
    """Expected signal, noise and SNR per pulse versus trigger rate.

    Noise per pulse is the optical offset plus the upconverted thermal
    occupancy ``eta_det_cav * N_e(P_diss)``. The SNR error assumes
    ``pulses_per_rate`` pulses split evenly between signal and vacuum.
    """
    from .figures import cooperativity, external_efficiency, internal_efficiency

    if eta_ext is None:
        C = cooperativity(device.g0_hz, device.n_p, device.kappa_eo_hz, device.kappa_o_hz)
        eta_ext = external_efficiency(internal_efficiency(C), device.eta_e, device.eta_o, device.lambda_sq)
    optical = optical_noise_per_pulse(noise)
    half = pulses_per_rate / 2.0
    rows = []
    for rate in rates:
        if not rate > 0:
            raise DomainError("rates must be > 0")
        duty = device.duty_cycle(rate)
        p_diss = dissipated_power(device.P_p_w, device.lambda_sq, device.eta_o, duty)
        n_e = thermal_occupancy(p_diss, thermal)
        noise_pp = optical + eta_det_cav * n_e
        if noise_pp > 0:
            est = estimate_snr((eta_det + noise_pp) * half, noise_pp * half)
            snr, sigma, saturated = est.snr, est.sigma, False
        else:
            snr, sigma, saturated = math.inf, 0.0, True
        rows.append(
            SweepRow(
                rate_hz=float(rate),
                duty=duty,
                p_diss_w=p_diss,
                signal_per_pulse=eta_det,
                noise_per_pulse=noise_pp,
                snr=snr,
                snr_sigma=sigma,
                n_e=n_e,
                n_add=added_noise_referred(n_e, device.eta_e),
                throughput_hz=throughput(device.B_c_hz, duty, eta_ext),
                snr_saturated=saturated,
            )
        )
    return rows


def _csv_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return repr(float(v))


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([_csv_cell(getattr(row, c)) for c in SWEEP_COLUMNS])
