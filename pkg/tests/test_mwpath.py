import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from eotransduce import mwpath
from eotransduce.dynamics import TemporalEnvelope
from eotransduce.errors import DomainError, FormatError
from eotransduce.mwpath import CavityResponse, LossLedger, ModeMatchWeights

DT = 1e-9


def _envelope(field, dt=DT):
    field = np.asarray(field, dtype=complex)
    return TemporalEnvelope(0.0, dt, field, np.abs(field) ** 2)


def _gaussian(n=4096, center=600e-9, width=60e-9, dt=DT):
    t = np.arange(n) * dt
    x = np.exp(-((t - center) ** 2) / (4 * width**2))
    return t, x / math.sqrt(np.sum(x**2) * dt)


def _cavity_ode(resp, x_of_t, t):
    """Reference input-output solution: da/dt = -(k/2 - i D) a + sqrt(eta k) x(t)."""
    k, g = resp.kappa, math.sqrt(resp.eta_e * resp.kappa)
    delta = 2 * math.pi * resp.detuning_hz

    def rhs(tt, y):
        a = y[0] + 1j * y[1]
        da = -(k / 2 - 1j * delta) * a + g * x_of_t(tt)
        return [da.real, da.imag]

    sol = solve_ivp(rhs, (t[0], t[-1]), [0.0, 0.0], t_eval=t, rtol=1e-12, atol=1e-14, method="DOP853", max_step=2e-9)
    return sol.y[0] + 1j * sol.y[1]


# ---------------------------------------------------------------- cavity response


@given(
    eta=st.floats(0.0, 1.0),
    kappa=st.floats(1e4, 1e8),
    detuning=st.floats(-1e8, 1e8),
    omega=st.floats(-1e10, 1e10),
)
def test_reflection_is_passive(eta, kappa, detuning, omega):
    resp = CavityResponse(eta, kappa, detuning)
    assert abs(resp.reflection(omega)) <= 1 + 1e-12


def test_critical_coupling_dc_reflection_vanishes():
    resp = CavityResponse(eta_e=0.5, kappa_eo_hz=1.4e6)
    assert abs(resp.reflection(0.0)) < 1e-15


def test_response_validation():
    with pytest.raises(DomainError):
        CavityResponse(eta_e=1.2)
    with pytest.raises(DomainError):
        CavityResponse(kappa_eo_hz=0.0)


def test_reflect_requires_envelope():
    with pytest.raises(FormatError):
        mwpath.reflect(np.ones(10), CavityResponse())


# ---------------------------------------------------------------- reflect


def test_reflect_matches_time_domain_oracle():
    resp = CavityResponse(eta_e=0.44, kappa_eo_hz=1.4e6, detuning_hz=0.3e6)
    t, x = _gaussian()
    center, width = 600e-9, 60e-9
    norm = x.max()

    def x_of_t(tt):
        return norm * math.exp(-((tt - center) ** 2) / (4 * width**2))

    a = _cavity_ode(resp, x_of_t, t)
    expected = x - math.sqrt(resp.eta_e * resp.kappa) * a
    out = mwpath.filter_field(x, DT, resp.reflection)
    assert np.max(np.abs(out - expected)) < 1e-6 * np.max(np.abs(x))
    occ = mwpath.intracavity_population(_envelope(x), resp).values
    assert np.max(np.abs(occ - np.abs(a) ** 2)) < 1e-6 * np.max(np.abs(a) ** 2)


def _piecewise_linear_reflection(x, dt, resp):
    """Exact reflection of a linearly interpolated real input (resonant cavity)."""
    k = resp.kappa
    g, c, e = math.sqrt(resp.eta_e * k), k / 2, math.exp(-k * dt / 2)
    a = np.zeros(len(x))
    for n in range(len(x) - 1):
        slope = (x[n + 1] - x[n]) / dt
        a[n + 1] = a[n] * e + g * (x[n] / c * (1 - e) + slope * (dt / c - (1 - e) / c**2))
    return x - g * a


def test_reflect_sp_envelope_matches_convolution_oracle(sp_envelope):
    resp = CavityResponse(0.44, 1.4e6, 0.0)
    env = sp_envelope.normalized()
    # the FFT treats samples as band-limited, the oracle as piecewise linear;
    # the two agree to O(dt^2), so compare on a 0.25 ns grid
    f = 4
    t = np.arange((len(env) - 1) * f + 1) * env.dt / f
    x = np.interp(t, env.times, np.sqrt(env.pop))
    expected = _piecewise_linear_reflection(x, env.dt / f, resp)
    out = mwpath.filter_field(x, env.dt / f, resp.reflection)
    assert np.max(np.abs(out - expected)) < 1e-6 * x.max()


def test_reflect_parseval_energy_ratio(sp_envelope):
    resp = CavityResponse(0.44, 1.4e6, 0.0)
    out = mwpath.reflect(sp_envelope, resp)
    mode = np.sqrt(sp_envelope.pop)
    n_fft = 1 << int(math.ceil(math.log2(8 * len(mode))))
    spec = np.fft.fft(mode, n_fft)
    omega = 2 * math.pi * np.fft.fftfreq(n_fft, sp_envelope.dt)
    ratio = np.sum(np.abs(resp.reflection(omega) * spec) ** 2) / np.sum(np.abs(spec) ** 2)
    assert out.photon_number() / sp_envelope.photon_number() == pytest.approx(ratio, rel=1e-6)


def test_parseval_for_filtered_field(rng):
    x = rng.normal(size=700) + 1j * rng.normal(size=700)
    n_fft = 1 << int(math.ceil(math.log2(8 * len(x))))
    spec = np.fft.fft(x, n_fft)
    time_energy = np.sum(np.abs(np.fft.ifft(spec)) ** 2)
    assert time_energy == pytest.approx(np.sum(np.abs(spec) ** 2) / n_fft, rel=1e-9)


def test_far_detuned_reflection_preserves_energy(sp_envelope):
    out = mwpath.reflect(sp_envelope, CavityResponse(0.44, 1.4e6, 13e6))
    assert out.photon_number() / sp_envelope.photon_number() == pytest.approx(1.0, abs=0.02)


def test_resonant_reflection_shows_revival(sp_envelope):
    out = mwpath.reflect(sp_envelope, CavityResponse(0.44, 1.4e6, 0.0)).pop
    i_peak = int(np.argmax(out))
    rising = np.nonzero(np.diff(out[i_peak:]) > 0)[0]
    assert rising.size
    i_dip = i_peak + int(rising[0])
    assert out[i_dip:].max() > 1.05 * out[i_dip]


def test_energy_conservation_reflected_plus_dissipated(sp_envelope):
    for eta in (0.2, 0.44, 0.5, 0.9):
        resp = CavityResponse(eta, 1.4e6, 0.0)
        env = sp_envelope.normalized()
        total = mwpath.reflect(env, resp).photon_number() + mwpath.dissipated_fraction(env, resp)
        assert total == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(
    eta=st.floats(0.0, 1.0),
    detuning=st.floats(-5e6, 5e6),
    seed=st.integers(0, 2**32 - 1),
)
def test_reflect_passivity_random_envelopes(eta, detuning, seed):
    r = np.random.default_rng(seed)
    x = np.zeros(1024, dtype=complex)
    x[100:300] = r.normal(size=200) + 1j * r.normal(size=200)
    env = _envelope(x)
    out = mwpath.reflect(env, CavityResponse(eta, 1.4e6, detuning))
    assert out.photon_number() <= env.photon_number() * (1 + 1e-9)


# ---------------------------------------------------------------- intracavity


def test_zero_input_gives_empty_cavity():
    occ = mwpath.intracavity_population(_envelope(np.zeros(256)), CavityResponse())
    assert not np.any(occ.values)


@pytest.mark.parametrize("eta", [0.5, 1.0, 0.3])
def test_matched_exponential_peak_occupation(eta):
    # analytic: a(t) = sqrt(eta) kappa t exp(-kappa t / 2), peak eta * 4/e^2 at t = 2/kappa
    resp = CavityResponse(eta, 1.4e6, 0.0)
    dt = 0.1e-9
    t = np.arange(40000) * dt
    x = math.sqrt(resp.kappa) * np.exp(-resp.kappa * t / 2)
    occ = mwpath.intracavity_population(_envelope(x, dt), resp).values
    analytic = eta * resp.kappa**2 * t**2 * np.exp(-resp.kappa * t)
    assert occ.max() == pytest.approx(eta * 4 / math.e**2, rel=2e-3)
    assert np.max(np.abs(occ - analytic)) < 2e-3 * analytic.max()
    if eta == 0.5:
        assert occ.max() == pytest.approx(2 / math.e**2, rel=2e-3)


def test_intracavity_nonnegative_and_empties(sp_envelope):
    occ = mwpath.intracavity_population(sp_envelope.normalized(), CavityResponse()).values
    assert np.all(occ >= 0)
    assert occ[-1] < 1e-6 * occ.max()


# ---------------------------------------------------------------- pump window


def test_n_sp_anchors(photon_products):
    trace = photon_products.intracavity
    assert mwpath.pump_window_average(trace, 200e-9).n_sp == pytest.approx(0.26, rel=0.15)
    assert mwpath.pump_window_average(trace, 122e-9).n_sp == pytest.approx(0.27, rel=0.15)


def test_degenerate_window_gives_peak(photon_products):
    trace = photon_products.intracavity
    assert mwpath.pump_window_average(trace, 1e-12).n_sp == pytest.approx(trace.values.max())


def test_window_scales_with_incident_photons(photon_products):
    trace = photon_products.intracavity
    a = mwpath.pump_window_average(trace, 200e-9)
    b = mwpath.pump_window_average(trace, 200e-9, incident_photons=0.5)
    assert b.n_sp == pytest.approx(2 * a.n_sp)


@pytest.fixture(scope="module")
def intracavity(photon_products):
    return photon_products.intracavity


@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(shift=st.integers(0, 500), window=st.floats(5e-9, 400e-9))
def test_window_average_translation_invariant(intracavity, shift, window):
    trace = intracavity
    shifted = mwpath.Trace(trace.t0, trace.dt, np.concatenate((np.zeros(shift), trace.values)))
    a = mwpath.pump_window_average(trace, window)
    b = mwpath.pump_window_average(shifted, window)
    assert b.n_sp == pytest.approx(a.n_sp, rel=1e-12)
    assert b.best_arrival == pytest.approx(a.best_arrival + shift * trace.dt, abs=1e-15)


def test_window_longer_than_record():
    with pytest.raises(DomainError):
        mwpath.pump_window_average(mwpath.Trace(0.0, 1e-9, np.ones(10)), 1e-6)
    with pytest.raises(DomainError):
        mwpath.pump_window_average(mwpath.Trace(0.0, 1e-9, np.ones(10)), 0.0)


# ---------------------------------------------------------------- ledger


def test_ledger_alpha_and_eo_input():
    ledger = LossLedger()
    assert ledger.transmission() == pytest.approx(0.27, abs=0.01)
    assert ledger.transmission("eo_qc") == pytest.approx(0.7 * 10 ** (-0.16), rel=0.01)
    assert ledger.transmission("eo_qc") == pytest.approx(0.5, abs=0.02)
    assert ledger.loss_db() == pytest.approx(4.2)


def test_empty_ledger_is_identity(sp_envelope):
    env, t = mwpath.apply_ledger(sp_envelope, LossLedger(segments=(), outcoupling=1.0))
    assert t == 1.0
    np.testing.assert_array_equal(env.pop, sp_envelope.pop)


def test_ledger_validation():
    with pytest.raises(DomainError):
        LossLedger(segments=(("a", 1.0), ("a", 2.0)))
    with pytest.raises(DomainError):
        LossLedger(segments=(("a", -1.0),))
    with pytest.raises(DomainError):
        LossLedger().transmission("nowhere")


@given(st.lists(st.floats(0.0, 30.0), min_size=1, max_size=6))
def test_ledger_transmission_in_unit_interval(dbs):
    ledger = LossLedger(segments=tuple((f"s{i}", db) for i, db in enumerate(dbs)), outcoupling=1.0)
    t = ledger.transmission()
    assert 0 < t <= 1
    assert t == pytest.approx(10 ** (-sum(dbs) / 10))


# ---------------------------------------------------------------- integrate


def test_photons_at_switch(photon_products):
    assert photon_products.report["photons_at_noise_reference"] == pytest.approx(0.334, rel=0.05)


def test_integrate_limits(sp_envelope):
    assert mwpath.integrate_photons(sp_envelope, 0.0) == 0.0
    full = (len(sp_envelope) - 1) * sp_envelope.dt
    assert mwpath.integrate_photons(sp_envelope, full) == pytest.approx(sp_envelope.photon_number(), rel=1e-12)
    with pytest.raises(DomainError):
        mwpath.integrate_photons(sp_envelope, 2 * full)


def test_integrate_interpolates_between_samples():
    env = _envelope(np.sqrt(np.linspace(0, 1, 11)), dt=0.1)
    # pop = t on [0, 1]; integral to 0.55 is 0.55^2 / 2
    assert mwpath.integrate_photons(env, 0.55) == pytest.approx(0.55**2 / 2, rel=1e-12)


# ---------------------------------------------------------------- ENBW and SNR


def test_enbw_rectangular():
    assert mwpath.enbw(ModeMatchWeights.rectangular(800e-9, 1e-9)) == pytest.approx(1 / 800e-9)


def test_enbw_exponential():
    kappa = 2 * math.pi * 1.43e6
    dt = 0.1e-9
    t = np.arange(200000) * dt
    w = ModeMatchWeights(dt, np.exp(-kappa * t / 2))
    assert mwpath.enbw(w) == pytest.approx(kappa / 4, rel=1e-3)


@given(scale=st.floats(1e-6, 1e6), seed=st.integers(0, 2**32 - 1))
def test_enbw_scale_invariant(scale, seed):
    w = np.random.default_rng(seed).random(50) + 0.01
    a = mwpath.enbw(ModeMatchWeights(1e-9, w))
    b = mwpath.enbw(ModeMatchWeights(1e-9, scale * w))
    assert b == pytest.approx(a, rel=1e-9)


def test_weights_validation(sp_envelope):
    with pytest.raises(DomainError):
        ModeMatchWeights(1e-9, np.zeros(5))
    with pytest.raises(DomainError):
        ModeMatchWeights(1e-9, np.array([1.0, -0.1]))
    with pytest.raises(DomainError):
        ModeMatchWeights.from_envelope(sp_envelope, 800e-9, weighting="cubic")
    w = ModeMatchWeights.from_envelope(sp_envelope, 800e-9, weighting="power")
    assert w.w.max() == 1.0 and np.all(w.w >= 0)


def test_mmf_enbw_anchor(photon_products):
    assert photon_products.report["enbw_hz"] == pytest.approx(2.03e6, rel=0.15)


def test_heterodyne_snr_anchors(photon_products):
    assert photon_products.report["heterodyne_snr"] == pytest.approx(0.069, rel=0.20)
    assert photon_products.report["heterodyne_snr_rbw"] == pytest.approx(0.0028, rel=0.20)


def test_heterodyne_snr_limits(sp_envelope):
    w = ModeMatchWeights.from_envelope(sp_envelope, 800e-9)
    zero = sp_envelope.scaled(0.0)
    assert mwpath.predict_heterodyne_snr(zero, w, 1.84).snr == 0.0
    sat = mwpath.predict_heterodyne_snr(sp_envelope, w, 0.0, vacuum_quanta=0.0)
    assert sat.saturated and sat.snr > 1e300
    with pytest.raises(DomainError):
        mwpath.predict_heterodyne_snr(sp_envelope, w, -1.0)
    with pytest.raises(FormatError):
        mwpath.predict_heterodyne_snr(sp_envelope, ModeMatchWeights(2e-9, w.w), 1.84)


@given(n1=st.floats(0.0, 10.0), n2=st.floats(0.0, 10.0))
@settings(deadline=None)
def test_heterodyne_snr_decreases_with_noise(sp_envelope, n1, n2):
    w = ModeMatchWeights.from_envelope(sp_envelope, 800e-9)
    lo, hi = sorted((n1, n2))
    assert mwpath.predict_heterodyne_snr(sp_envelope, w, hi).snr <= mwpath.predict_heterodyne_snr(sp_envelope, w, lo).snr
