"""Transmon-cavity master-equation dynamics and itinerant photon envelopes.

The joint Hilbert space is a three-level transmon {g, e, f} tensored with a
truncated cavity Fock space. The blue-sideband drive is the effective
two-photon coupling ``|g,0><e,1| + h.c.`` scaled by ``amplitude / 2`` so that
``amplitude`` is the Rabi frequency of that transition (a pi pulse has
``amplitude * duration = pi``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from .errors import CalibrationError, DomainError, FormatError, IntegrationError

TWO_PI = 2.0 * math.pi
N_TRANSMON = 3
RTOL = 1e-8
ATOL = 1e-12


@dataclass(frozen=True)
class QubitCavityParams:
    """Qubit-cavity source parameters; linewidths in Hz (value/2pi)."""

    f_g_hz: float = 8.9076e9
    chi_hz: float = -3.5e6
    kappa_hz: float = 1.43e6
    kappa_e1_hz: float = 0.1e6
    kappa_e2_hz: float = 1.0e6
    T1_s: float = 19e-6
    T_phi_s: float = 14e-6

    def __post_init__(self):
        if self.kappa_hz < 0 or self.kappa_e1_hz < 0 or self.kappa_e2_hz < 0:
            raise DomainError("linewidths must be >= 0")
        if self.kappa_e1_hz + self.kappa_e2_hz > self.kappa_hz * (1 + 1e-12):
            raise DomainError("external linewidths exceed the total linewidth")
        if not (self.T1_s > 0 and self.T_phi_s > 0):
            raise DomainError("T1 and T_phi must be > 0")

    @property
    def kappa(self) -> float:
        """Cavity energy decay rate in 1/s."""
        return TWO_PI * self.kappa_hz

    @property
    def gamma_1(self) -> float:
        return 1.0 / self.T1_s

    @property
    def gamma_phi(self) -> float:
        return 1.0 / self.T_phi_s

    @property
    def outcoupling(self) -> float:
        """Fraction of the cavity decay leaving through the output port."""
        return self.kappa_e2_hz / self.kappa_hz


def rectangular(t, duration):
    return 1.0 if 0.0 <= t < duration else 0.0


@dataclass(frozen=True)
class DriveSchedule:
    bsb_amplitude: Optional[float] = None  # rad/s; None -> calibrate
    bsb_duration: float = 156e-9
    bsb_shape: Callable[[float, float], float] = rectangular
    qubit_rotation: float = 0.0
    init_superposition: bool = False

    def __post_init__(self):
        if not self.bsb_duration > 0:
            raise DomainError("bsb_duration must be > 0")
        if not 0.0 <= self.qubit_rotation <= 4.0 * math.pi:
            raise DomainError("qubit_rotation must lie in [0, 4 pi]")

    def envelope(self, t):
        return self.bsb_shape(t, self.bsb_duration)


@dataclass
class JointDensityMatrix:
    data: np.ndarray
    n_fock: int = 4
    time: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        dim = N_TRANSMON * self.n_fock
        if self.data.shape != (dim, dim):
            raise FormatError(f"expected a {dim}x{dim} matrix, got {self.data.shape}")

    @classmethod
    def from_state(cls, transmon, n_photons=0, n_fock=4):
        """Pure product state of a transmon vector (len <= 3) and a Fock state."""
        q = np.zeros(N_TRANSMON, dtype=complex)
        q[: len(transmon)] = transmon
        q /= np.linalg.norm(q)
        c = np.zeros(n_fock)
        c[n_photons] = 1.0
        psi = np.kron(q, c)
        return cls(np.outer(psi, psi.conj()), n_fock)

    def hermiticity_error(self):
        return float(np.max(np.abs(self.data - self.data.conj().T)))

    def trace_error(self):
        return float(abs(np.trace(self.data) - 1.0))

    def min_eigenvalue(self):
        herm = 0.5 * (self.data + self.data.conj().T)
        return float(np.linalg.eigvalsh(herm)[0])

    def is_physical(self, herm_tol=1e-10, trace_tol=1e-9, eig_tol=1e-9):
        return (
            self.hermiticity_error() <= herm_tol
            and self.trace_error() <= trace_tol
            and self.min_eigenvalue() >= -eig_tol
        )

    def expect(self, operator):
        return complex(np.trace(operator @ self.data))

    def cavity(self):
        """Reduced cavity density matrix."""
        n = self.n_fock
        return np.einsum("iaib->ab", self.data.reshape(N_TRANSMON, n, N_TRANSMON, n))


class Operators:
    """Operator set on the transmon (x) cavity space."""

    def __init__(self, n_fock):
        if n_fock < 3:
            raise DomainError("cavity truncation must be >= 3")
        self.n_fock = n_fock
        self.dim = N_TRANSMON * n_fock
        bq = np.zeros((N_TRANSMON, N_TRANSMON))
        bq[0, 1] = 1.0
        bq[1, 2] = math.sqrt(2.0)
        ac = np.diag(np.sqrt(np.arange(1, n_fock)), 1)
        self.b = np.kron(bq, np.eye(n_fock))
        self.a = np.kron(np.eye(N_TRANSMON), ac)
        self.n_cav = self.a.T @ self.a
        self.n_qubit = self.b.T @ self.b
        self.proj_e = np.kron(np.diag([0.0, 1.0, 0.0]), np.eye(n_fock))
        g0 = self.basis(0, 0)
        e1 = self.basis(1, 1)
        self.h_bsb = np.outer(g0, e1) + np.outer(e1, g0)

    def basis(self, qubit_level, n):
        v = np.zeros(self.dim)
        v[qubit_level * self.n_fock + n] = 1.0
        return v


def _dissipator(L):
    # Row-major vectorisation: vec(A rho B) = (A kron B^T) vec(rho).
    eye = np.eye(L.shape[0])
    LdL = L.conj().T @ L
    return np.kron(L, L.conj()) - 0.5 * np.kron(LdL, eye) - 0.5 * np.kron(eye, LdL.T)


def _commutator(H):
    eye = np.eye(H.shape[0])
    return -1j * (np.kron(H, eye) - np.kron(eye, H.T))


@lru_cache(maxsize=32)
def _liouvillians(n_fock, kappa, gamma_1, gamma_phi):
    ops = Operators(n_fock)
    L_diss = (
        gamma_1 * _dissipator(ops.b)
        + gamma_phi * _dissipator(ops.n_qubit)
        + kappa * _dissipator(ops.a)
    )
    L_drive = _commutator(0.5 * ops.h_bsb)
    return ops, L_diss, L_drive


@dataclass
class Trajectory:
    times: np.ndarray
    rhos: np.ndarray  # (n_times, dim, dim)
    n_fock: int

    def __len__(self):
        return len(self.times)

    def __getitem__(self, i):
        return JointDensityMatrix(self.rhos[i], self.n_fock, float(self.times[i]))

    def expect(self, operator):
        return np.einsum("ij,tji->t", operator, self.rhos)


def _segments(schedule: DriveSchedule, t_start, t_end):
    """Split points so that a rectangular pulse edge never falls inside a step."""
    cuts = [t_start]
    for edge in (0.0, schedule.bsb_duration):
        if t_start < edge < t_end:
            cuts.append(edge)
    cuts.append(t_end)
    return cuts


def evolve(
    initial: JointDensityMatrix,
    schedule: DriveSchedule,
    params: QubitCavityParams,
    t_grid: Sequence[float],
    rtol: float = RTOL,
    atol: float = ATOL,
    max_step: float = np.inf,
) -> Trajectory:
    """Integrate the driven, damped transmon-cavity system on ``t_grid``.

    The drive amplitude must already be set on the schedule (see
    :func:`calibrate_bsb_amplitude`). Raises :class:`IntegrationError` if the
    adaptive integrator cannot meet its tolerance.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or len(t_grid) < 1 or np.any(np.diff(t_grid) <= 0):
        raise DomainError("t_grid must be strictly increasing")
    if schedule.bsb_amplitude is None:
        raise DomainError("schedule has no BSB amplitude; calibrate it first")
    _, L_diss, L_drive = _liouvillians(initial.n_fock, params.kappa, params.gamma_1, params.gamma_phi)
    L_drive = schedule.bsb_amplitude * L_drive
    dim = initial.data.shape[0]

    def make_rhs(lo, hi):
        # one-sided limits at segment edges, so pulse discontinuities stay outside
        lo_in, hi_in = np.nextafter(lo, hi), np.nextafter(hi, lo)

        def rhs(t, y):
            f = schedule.envelope(min(max(t, lo_in), hi_in))
            out = L_diss @ y
            if f:
                out += f * (L_drive @ y)
            return out

        return rhs

    y = initial.data.ravel().astype(complex)
    t = initial.time
    if t_grid[0] < t:
        raise DomainError("t_grid starts before the initial state's time")
    out = np.empty((len(t_grid), dim * dim), dtype=complex)
    at_start = t_grid == t
    out[at_start] = y
    cuts = _segments(schedule, t, t_grid[-1])
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi <= lo:
            continue
        sel = (t_grid > lo) & (t_grid <= hi)
        t_eval = t_grid[sel]
        if len(t_eval) == 0 or t_eval[-1] != hi:
            t_eval = np.append(t_eval, hi)
        sol = solve_ivp(
            make_rhs(lo, hi), (lo, hi), y, method="DOP853", t_eval=t_eval, rtol=rtol, atol=atol, max_step=max_step
        )
        if sol.status != 0:
            raise IntegrationError(f"integration failed: {sol.message}", time=float(sol.t[-1]))
        out[sel] = sol.y.T[: int(sel.sum())]
        y = sol.y[:, -1]
    rhos = out.reshape(len(t_grid), dim, dim)
    return Trajectory(t_grid.copy(), rhos, initial.n_fock)


def excited_population(params: QubitCavityParams, schedule: DriveSchedule, n_fock=4) -> float:
    """Qubit |e> population at the end of the BSB pulse, starting from |g,0>."""
    rho0 = JointDensityMatrix.from_state([1.0], 0, n_fock)
    traj = evolve(rho0, schedule, params, [schedule.bsb_duration])
    ops = Operators(n_fock)
    return float(traj.expect(ops.proj_e)[-1].real)


def calibrate_bsb_amplitude(
    params: QubitCavityParams,
    duration: float = 156e-9,
    n_fock: int = 4,
    shape: Callable[[float, float], float] = rectangular,
    n_scan: int = 17,
) -> float:
    """BSB amplitude (rad/s) maximising the qubit |e> population at pulse end.

    A coarse scan over pulse areas in (0, 2 pi] locates the first maximum,
    which is then refined with a bounded Brent search.
    """
    if not duration > 0:
        raise DomainError("duration must be > 0")

    def pe(area):
        sched = DriveSchedule(area / duration, duration, shape)
        return excited_population(params, sched, n_fock)

    areas = np.linspace(2.0 * math.pi / n_scan, 2.0 * math.pi, n_scan)
    values = np.array([pe(x) for x in areas])
    k = int(np.argmax(values))
    if k == 0 or k == n_scan - 1:
        raise CalibrationError(f"optimum not bracketed (best pulse area {areas[k]:.3f} rad)")
    res = minimize_scalar(
        lambda x: -pe(x),
        bounds=(areas[k - 1], areas[k + 1]),
        method="bounded",
        options={"xatol": 1e-7},
    )
    if not res.success:
        raise CalibrationError(f"bounded search failed: {res.message}")
    return float(res.x) / duration


@dataclass
class TemporalEnvelope:
    """Uniformly sampled itinerant-mode envelope.

    ``pop`` is the photon flux (1/s), so its time integral is a photon number;
    ``amp`` is the coherent field amplitude ``sqrt(kappa) <a>`` (sqrt(1/s)).
    """

    t0: float
    dt: float
    amp: np.ndarray
    pop: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.amp = np.asarray(self.amp, dtype=complex)
        self.pop = np.asarray(self.pop, dtype=float)
        if self.amp.shape != self.pop.shape or self.amp.ndim != 1:
            raise FormatError("amp and pop must be 1-D arrays of equal length")
        if not self.dt > 0:
            raise FormatError("dt must be > 0")

    @classmethod
    def from_samples(cls, times, amp, pop, label="", rtol=1e-6):
        times = np.asarray(times, dtype=float)
        steps = np.diff(times)
        if len(times) < 2 or np.any(np.abs(steps - steps.mean()) > rtol * steps.mean()):
            raise FormatError("envelope samples must be uniformly spaced")
        return cls(float(times[0]), float(steps.mean()), amp, pop, label)

    def __len__(self):
        return len(self.pop)

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self.pop))

    def photon_number(self):
        return float(np.trapezoid(self.pop, dx=self.dt))

    def mode_function(self):
        """Unit-norm real mode function sqrt(pop / n)."""
        n = self.photon_number()
        if n <= 0:
            raise DomainError("envelope carries no photons")
        return np.sqrt(np.clip(self.pop, 0.0, None) / n)

    def decay_time(self, t_start, t_stop):
        """Time constant of an exponential fit to the flux on ``[t_start, t_stop]``."""
        t = self.times
        sel = (t >= t_start) & (t <= t_stop) & (self.pop > 0)
        if np.count_nonzero(sel) < 3:
            raise DomainError("too few positive samples in the fit range")
        slope = np.polyfit(t[sel], np.log(self.pop[sel]), 1)[0]
        if slope >= 0:
            raise DomainError("flux is not decaying on the fit range")
        return -1.0 / slope

    def scaled(self, factor):
        """Envelope after a linear power transmission ``factor``."""
        return replace(self, amp=self.amp * math.sqrt(factor), pop=self.pop * factor)

    def normalized(self):
        """Same shape, rescaled to exactly one photon."""
        return self.scaled(1.0 / self.photon_number())

    def to_csv(self, path, quantity="pop"):
        """Write a two-column (time, value) CSV with a units header."""
        if quantity == "pop":
            values, header = self.pop, "photon_flux_per_s"
        elif quantity == "coherent_power":
            values, header = np.abs(self.amp) ** 2, "coherent_power_per_s"
        else:
            raise DomainError(f"unknown quantity {quantity!r}")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", header])
            for t, v in zip(self.times, values):
                w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def read_csv(cls, path, label=""):
        times, values = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            for row in reader:
                times.append(float(row[0]))
                values.append(float(row[1]))
        values = np.array(values)
        if header[1].startswith("coherent_power"):
            return cls.from_samples(times, np.sqrt(values), values, label)
        return cls.from_samples(times, np.zeros(len(values)), values, label)


PHOTON_KINDS = ("single", "half", "vacuum")


def _rotated_ground(theta):
    # R_x(theta)|g>
    return [math.cos(theta / 2), -1j * math.sin(theta / 2)]


def generate_photon(
    kind: str,
    params: QubitCavityParams,
    schedule: DriveSchedule,
    rotation: Optional[float] = None,
    dt: float = 1e-9,
    t_max: float = 3e-6,
    n_fock: int = 4,
    phase: float = 0.0,
) -> TemporalEnvelope:
    """Simulate photon emission and return its flux/amplitude envelope.

    ``single`` starts from ``R_x(rotation)|g,0>``, ``half`` from
    ``(|g> + e^{i phase}|e>)/sqrt(2) (x) |0>``, ``vacuum`` applies no BSB pulse.
    """
    if kind not in PHOTON_KINDS:
        raise DomainError(f"kind must be one of {PHOTON_KINDS}, got {kind!r}")
    theta = schedule.qubit_rotation if rotation is None else rotation
    t_grid = np.arange(int(round(t_max / dt)) + 1) * dt
    if kind == "vacuum":
        zeros = np.zeros(len(t_grid))
        return TemporalEnvelope(0.0, dt, zeros.astype(complex), zeros, label=kind)
    if schedule.bsb_amplitude is None:
        schedule = replace(
            schedule,
            bsb_amplitude=calibrate_bsb_amplitude(params, schedule.bsb_duration, n_fock, schedule.bsb_shape),
        )
    if kind == "half" or schedule.init_superposition:
        qubit = [1.0, np.exp(1j * phase)]
    else:
        qubit = _rotated_ground(theta)
    rho0 = JointDensityMatrix.from_state(qubit, 0, n_fock)
    traj = evolve(rho0, schedule, params, t_grid)
    ops = Operators(n_fock)
    pop = params.kappa * np.clip(traj.expect(ops.n_cav).real, 0.0, None)
    amp = math.sqrt(params.kappa) * traj.expect(ops.a)
    return TemporalEnvelope(0.0, dt, amp, pop, label=kind)


def rabi_emission_probability(theta, n_single=1.0):
    """Expected emitted photon number after an x-rotation by ``theta``."""
    return n_single * np.cos(np.asarray(theta) / 2.0) ** 2
