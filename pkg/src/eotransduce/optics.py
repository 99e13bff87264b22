"""Optical side of the transducer: filter cavities, noise budget, heating model.

Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class FilterSpec:
    """Fabry-Perot filter cavity; frequencies in Hz."""

    fsr_hz: float
    linewidth_hz: float
    peak_transmission: float = 1.0

    def __post_init__(self):
        if not 0 < self.linewidth_hz < self.fsr_hz:
            raise DomainError("need 0 < linewidth < fsr")
        if not 0.0 < self.peak_transmission <= 1.0:
            raise DomainError("peak_transmission must lie in (0, 1]")

    @property
    def finesse(self):
        return self.fsr_hz / self.linewidth_hz


# Nominal banks. The pump bank cleans the pump before the device; the signal
# bank removes the reflected pump in front of the detector. Peak transmissions
# split the measured insertion loss of each bank evenly.
PUMP_BANK = (
    FilterSpec(16.8e9, 54.8e6, 10 ** (-2.1 / 30)),
    FilterSpec(15.0e9, 48.8e6, 10 ** (-2.1 / 30)),
    FilterSpec(16.0e9, 51.8e6, 10 ** (-2.1 / 30)),
)
SIGNAL_BANK = (
    FilterSpec(16.8e9, 54.8e6, 10 ** (-3.6 / 40)),
    FilterSpec(15.0e9, 48.8e6, 10 ** (-3.6 / 40)),
    FilterSpec(16.0e9, 51.8e6, 10 ** (-3.6 / 40)),
    FilterSpec(15.5e9, 50.4e6, 10 ** (-3.6 / 40)),
)


def airy_transmission(f_offset, spec: FilterSpec):
    """Power transmission at detuning ``f_offset`` (Hz) from a resonance."""
    f = np.asarray(f_offset, dtype=float)
    if not np.all(np.isfinite(f)):
        raise DomainError("f_offset must be finite")
    coeff = (2.0 * spec.finesse / math.pi) ** 2
    # sin(pi f / FSR)^2 via the remainder keeps exact periodicity for large f
    phase = np.pi * np.remainder(f, spec.fsr_hz) / spec.fsr_hz
    t = spec.peak_transmission / (1.0 + coeff * np.sin(phase) ** 2)
    return float(t) if np.ndim(t) == 0 else t


def suppression_db(f_offset, spec: FilterSpec):
    """Extinction relative to the filter's own peak, in dB (>= 0)."""
    rel = airy_transmission(f_offset, spec) / spec.peak_transmission
    return -10.0 * np.log10(rel)


def cascade_suppression(filters: Sequence[FilterSpec], f_offset) -> float:
    """Summed suppression (dB) of independent filters at ``f_offset``."""
    if len(filters) == 0:
        raise DomainError("need at least one filter")
    return float(sum(suppression_db(f_offset, spec) for spec in filters))


def cascade_insertion_loss_db(filters: Sequence[FilterSpec]) -> float:
    return float(sum(-10.0 * math.log10(spec.peak_transmission) for spec in filters))


@dataclass(frozen=True)
class OpticalNoiseModel:
    """Pump-independent detector dark counts plus fiber inelastic scattering.

    ``inelastic_coeff`` is in counts per pulse per (meter * watt) of peak pump
    power. The default fiber length is nominal; the coefficient is chosen so
    the inelastic part equals 2.0e-6 counts/pulse at the nominal length and
    pump power.
    """

    dark_per_pulse: float = 0.6e-6
    inelastic_coeff: float = 2.0e-6 / (50.0 * 1.22e-3)
    fiber_length_m: float = 50.0
    peak_power_w: float = 1.22e-3
    gate_len_s: float = 200e-9

    def __post_init__(self):
        for name in ("dark_per_pulse", "inelastic_coeff", "fiber_length_m", "peak_power_w", "gate_len_s"):
            if not getattr(self, name) >= 0:
                raise DomainError(f"{name} must be >= 0")


def optical_noise_per_pulse(model: OpticalNoiseModel) -> float:
    return model.dark_per_pulse + model.inelastic_coeff * model.fiber_length_m * model.peak_power_w


@dataclass(frozen=True)
class ThermalOccupancyModel:
    """Piecewise power law ``N_e = amp * P_diss**exp`` split at ``p_cross_w``."""

    amp1: float
    exp1: float
    amp2: float
    exp2: float
    p_cross_w: float = 0.6e-6

    def __post_init__(self):
        if not (self.exp1 > 0 and self.exp2 > 0):
            raise DomainError("exponents must be > 0")
        if self.amp1 < 0 or self.amp2 < 0 or self.p_cross_w <= 0:
            raise DomainError("amplitudes must be >= 0 and p_cross_w > 0")

    @classmethod
    def calibrated(cls, anchors=((0.2047e-6, 0.005), (4.093e-6, 0.06)), exp1=1.06, exp2=0.43, p_cross_w=0.6e-6):
        """Fix each branch amplitude by least squares (in log space) to the anchors on it."""
        if any(not (p > 0 and n >= 0) for p, n in anchors):
            raise DomainError("anchors need P_diss > 0 and N_e >= 0")
        amps = []
        for exponent, on_branch in ((exp1, lambda p: p <= p_cross_w), (exp2, lambda p: p > p_cross_w)):
            branch = [(p, n) for p, n in anchors if on_branch(p)]
            if not branch:
                raise DomainError("every branch needs at least one anchor")
            if all(n == 0 for _, n in branch):
                amps.append(0.0)
                continue
            if any(n == 0 for _, n in branch):
                raise DomainError("a branch mixes zero and nonzero anchors")
            logs = [math.log(n) - exponent * math.log(p) for p, n in branch]
            amps.append(math.exp(sum(logs) / len(logs)))
        return cls(amps[0], exp1, amps[1], exp2, p_cross_w)


DEFAULT_THERMAL = ThermalOccupancyModel.calibrated()


def thermal_occupancy(P_diss, model: ThermalOccupancyModel = DEFAULT_THERMAL):
    p = np.asarray(P_diss, dtype=float)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DomainError("P_diss must be finite and >= 0")
    n = np.where(p <= model.p_cross_w, model.amp1 * p**model.exp1, model.amp2 * p**model.exp2)
    return float(n) if np.ndim(n) == 0 else n


def detection_efficiency_budget(
    eta_ext: float,
    path_fraction: float = 0.5,
    optical_chain_db: float = 6.7,
    temporal_mismatch: float = 0.5,
) -> float:
    """Single-photon detection efficiency referred to one photon at the source."""
    for name, value in (("eta_ext", eta_ext), ("path_fraction", path_fraction), ("temporal_mismatch", temporal_mismatch)):
        if not 0.0 < value <= 1.0:
            raise DomainError(f"{name} must lie in (0, 1]")
    if optical_chain_db < 0:
        raise DomainError("optical_chain_db must be >= 0")
    return path_fraction * eta_ext * 10.0 ** (-optical_chain_db / 10.0) * temporal_mismatch


def cavity_referred_efficiency(eta_det: float, n_cav_sp: float) -> float:
    """Detection probability per intracavity photon, ``eta_det / N_cav,SP``."""
    if not n_cav_sp > 0:
        raise DomainError("n_cav_sp must be > 0")
    return eta_det / n_cav_sp
