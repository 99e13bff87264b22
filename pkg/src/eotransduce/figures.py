"""Device parameters and closed-form transducer figures of merit.

All rates are stored as ordinary frequencies (value/2pi, in Hz). Ratios such
as the cooperativity are unaffected by the 2pi convention as long as every
rate uses the same one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from .errors import DomainError

# FSR of the optical whispering-gallery resonator; the microwave mode must match it.
OPTICAL_FSR_HZ = 8.9006e9


def _require_nonnegative(**values):
    for name, value in values.items():
        if not value >= 0:  # also rejects NaN
            raise DomainError(f"{name} must be >= 0, got {value!r}")


def _require_unit_interval(**values):
    for name, value in values.items():
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class DeviceParams:
    """Electro-optic transducer parameters (defaults: measured device)."""

    f_o_hz: float = 193e12
    kappa_o_hz: float = 11.4e6
    eta_o: float = 0.68
    g0_hz: float = 2.9
    lambda_sq: float = 0.44
    f_e_hz: float = 8.9006e9
    kappa_eo_hz: float = 1.4e6
    eta_e: float = 0.44
    # Solves C = 4.1e-4 for the rates above (not a measured quantity).
    n_p: float = 1.945e8
    B_c_hz: float = 1.3e6
    P_p_w: float = 1.22e-3
    pulse_len_s: float = 200e-9

    def __post_init__(self):
        _require_unit_interval(eta_o=self.eta_o, lambda_sq=self.lambda_sq, eta_e=self.eta_e)
        _require_nonnegative(
            f_o_hz=self.f_o_hz,
            kappa_o_hz=self.kappa_o_hz,
            g0_hz=self.g0_hz,
            f_e_hz=self.f_e_hz,
            kappa_eo_hz=self.kappa_eo_hz,
            n_p=self.n_p,
            B_c_hz=self.B_c_hz,
            P_p_w=self.P_p_w,
            pulse_len_s=self.pulse_len_s,
        )

    def frequency_matched(self, fsr_hz: float = OPTICAL_FSR_HZ, tolerance: float = 0.01) -> bool:
        """True if the microwave resonance sits within `tolerance` of the optical FSR."""
        return abs(self.f_e_hz - fsr_hz) <= tolerance * fsr_hz

    def duty_cycle(self, trigger_rate_hz: float) -> float:
        duty = trigger_rate_hz * self.pulse_len_s
        _require_unit_interval(duty=duty)
        return duty


class Capacity(NamedTuple):
    value: float
    quantum_enabled: bool


@dataclass(frozen=True)
class DerivedFigures:
    C: float
    eta_int: float
    eta_ext: float
    N_add: float
    theta: float
    C_ub: float

    def as_dict(self) -> dict:
        return {
            "cooperativity": self.C,
            "eta_int": self.eta_int,
            "eta_ext": self.eta_ext,
            "n_add": self.N_add,
            "throughput_hz": self.theta,
            "capacity_ub_hz": self.C_ub,
        }


def cooperativity(g0, n_p, kappa_eo, kappa_o):
    """Pump-enhanced cooperativity ``4 n_p g0^2 / (kappa_eo kappa_o)``."""
    _require_nonnegative(g0=g0, n_p=n_p, kappa_eo=kappa_eo, kappa_o=kappa_o)
    if kappa_eo == 0 or kappa_o == 0:
        raise DomainError("linewidths must be strictly positive")
    return 4.0 * n_p * g0**2 / (kappa_eo * kappa_o)


def pump_photons_for_cooperativity(C, g0, kappa_eo, kappa_o):
    """Inverse of :func:`cooperativity` with respect to the pump photon number."""
    _require_nonnegative(C=C, kappa_eo=kappa_eo, kappa_o=kappa_o)
    if g0 <= 0:
        raise DomainError("g0 must be strictly positive")
    return C * kappa_eo * kappa_o / (4.0 * g0**2)


def internal_efficiency(C):
    _require_nonnegative(C=C)
    return 4.0 * C / (1.0 + C) ** 2


def external_efficiency(eta_int, eta_e, eta_o, lambda_sq):
    _require_unit_interval(eta_int=eta_int, eta_e=eta_e, eta_o=eta_o, lambda_sq=lambda_sq)
    return lambda_sq * eta_e * eta_o * eta_int


def dissipated_power(P_p, lambda_sq, eta_o, duty):
    """Average optical power dissipated in the resonator for a pulsed pump.

    ``P_p (1 - (1 - 2 lambda_sq eta_o)^2) duty``.
    """
    _require_nonnegative(P_p=P_p)
    _require_unit_interval(lambda_sq=lambda_sq, eta_o=eta_o, duty=duty)
    return P_p * (1.0 - (1.0 - 2.0 * lambda_sq * eta_o) ** 2) * duty


def throughput(B_c, duty, eta_ext):
    """Converted-photon rate ``B_c * duty * eta_ext`` in Hz."""
    _require_nonnegative(B_c=B_c, eta_ext=eta_ext)
    _require_unit_interval(duty=duty)
    return B_c * duty * eta_ext


def capacity_upper_bound(theta, n_add) -> Capacity:
    """Upper bound of the quantum channel capacity over the conversion band.

    Returns ``Capacity(value, quantum_enabled)``. For ``n_add >= 1`` the
    channel is not quantum-enabled and the bound is reported as 0.
    """
    _require_nonnegative(theta=theta, n_add=n_add)
    if n_add >= 1.0:
        return Capacity(0.0, False)
    x_log_x = n_add * math.log(n_add) if n_add > 0 else 0.0
    return Capacity(math.pi * theta / math.log(2.0) * (1.0 - n_add + x_log_x), True)


def added_noise_referred(N_e, eta_e):
    """Thermal occupancy of the converter mode referred to the microwave input."""
    _require_nonnegative(N_e=N_e)
    if not 0.0 < eta_e <= 1.0:
        raise DomainError(f"eta_e must lie in (0, 1], got {eta_e!r}")
    return N_e / eta_e


def success_probability(snr):
    _require_nonnegative(snr=snr)
    return 1.0 if math.isinf(snr) else snr / (snr + 1.0)


def bell_fidelity(snr, F_rho):
    """Bell-state fidelity after mixing in uncorrelated noise clicks."""
    if not 0.25 <= F_rho <= 1.0:
        raise DomainError(f"F_rho must lie in [0.25, 1], got {F_rho!r}")
    p = success_probability(snr)
    return p * F_rho + (1.0 - p) * 0.25


def derive_figures(device: DeviceParams, duty: float, n_add: float = 0.0) -> DerivedFigures:
    C = cooperativity(device.g0_hz, device.n_p, device.kappa_eo_hz, device.kappa_o_hz)
    eta_int = internal_efficiency(C)
    eta_ext = external_efficiency(eta_int, device.eta_e, device.eta_o, device.lambda_sq)
    theta = throughput(device.B_c_hz, duty, eta_ext)
    return DerivedFigures(
        C=C,
        eta_int=eta_int,
        eta_ext=eta_ext,
        N_add=n_add,
        theta=theta,
        C_ub=capacity_upper_bound(theta, n_add).value,
    )
