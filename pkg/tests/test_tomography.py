import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eotransduce import tomography as tomo
from eotransduce.errors import DomainError, FormatError
from eotransduce.tomography import IQShotBatch, MomentTable, SingleModeState

N_ADD = 1.84


def _random_state(seed, n_cut=5, rank=2):
    r = np.random.default_rng(seed)
    g = r.normal(size=(n_cut, rank)) + 1j * r.normal(size=(n_cut, rank))
    # damp high Fock levels so the state is well described by low moments
    g *= np.exp(-0.4 * np.arange(n_cut))[:, None]
    rho = g @ g.conj().T
    return SingleModeState(rho / np.trace(rho))


def _quiet_deconvolve(signal, reference, K=None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return tomo.deconvolve(signal, reference, K)


# ---------------------------------------------------------------- states


def test_state_constructors_are_physical():
    for s in (
        SingleModeState.fock(1),
        SingleModeState.single_photon(0.95),
        SingleModeState.half_photon(0.95, phase=0.3),
        SingleModeState.coherent(1.2),
    ):
        assert s.is_physical()
    hp = SingleModeState.half_photon()
    assert hp.rho[0, 1] == pytest.approx(0.5)
    assert abs(SingleModeState.half_photon(0.95).mean_field) == pytest.approx(math.sqrt(0.95) / 2)
    assert SingleModeState.coherent(1.2).mean_field == pytest.approx(1.2, abs=1e-9)


def test_state_shape_check():
    with pytest.raises(DomainError):
        SingleModeState(np.ones((2, 3)))


# ---------------------------------------------------------------- synthesis


def test_vacuum_without_noise_has_half_quantum_per_quadrature():
    b = tomo.synthesize_shots(SingleModeState.fock(0), 0.0, 100_000, seed=1)
    for quad in (b.shots.real, b.shots.imag):
        var = quad.var()
        # variance of a sample variance for Gaussian data: 2 s^4 / (n - 1)
        assert abs(var - 0.5) <= 3 * math.sqrt(2 * 0.25 / (len(quad) - 1))


def test_vacuum_with_added_noise():
    b = tomo.synthesize_shots(SingleModeState.fock(0), N_ADD, 100_000, seed=2)
    expected = (1 + N_ADD) / 2
    for quad in (b.shots.real, b.shots.imag):
        assert abs(quad.var() - expected) <= 3 * math.sqrt(2 * expected**2 / (len(quad) - 1))


def test_fock_one_mean_power():
    b = tomo.synthesize_shots(SingleModeState.fock(1), 0.0, 100_000, seed=3)
    p = np.abs(b.shots) ** 2
    # Husimi of |1>: |S|^2 ~ Gamma(2, 1) with mean 2 and variance 2
    assert abs(p.mean() - 2.0) <= 3 * math.sqrt(2.0 / len(p))


def test_husimi_sampler_matches_density():
    state = SingleModeState.half_photon(0.9, phase=0.7)
    b = tomo.synthesize_shots(state, 0.0, 200_000, seed=4)
    # compare E[S] with the analytic Husimi mean, which equals <a>
    assert abs(b.shots.mean() - state.mean_field) <= 4 * math.sqrt(np.var(b.shots) / len(b))
    # probability mass of the right half-plane, via numeric integration of Q
    x = np.linspace(-6, 6, 401)
    X, Y = np.meshgrid(x, x)
    q = tomo.husimi_q(state, X + 1j * Y)
    dx = x[1] - x[0]
    assert np.sum(q) * dx * dx == pytest.approx(1.0, abs=1e-6)
    right = np.sum(q[:, x > 0]) * dx * dx + 0.5 * np.sum(q[:, x == 0]) * dx * dx
    frac = np.mean(b.shots.real > 0)
    assert abs(frac - right) <= 4 * math.sqrt(right * (1 - right) / len(b))


def test_synthesis_determinism_and_threads():
    state = SingleModeState.single_photon(0.9)
    a = tomo.synthesize_shots(state, N_ADD, 200_000, seed=5, threads=1)
    b = tomo.synthesize_shots(state, N_ADD, 200_000, seed=5, threads=4)
    np.testing.assert_array_equal(a.shots, b.shots)
    c = tomo.synthesize_shots(state, N_ADD, 200_000, seed=6)
    assert not np.array_equal(a.shots, c.shots)


def test_synthesis_validation():
    with pytest.raises(DomainError):
        tomo.synthesize_shots(SingleModeState(np.diag([1.2, -0.2])), 0.0, 10, 0)
    with pytest.raises(DomainError):
        tomo.synthesize_shots(SingleModeState.fock(0), -1.0, 10, 0)
    with pytest.raises(DomainError):
        tomo.synthesize_shots(SingleModeState.fock(0), 0.0, 0, 0)


def test_batch_io_round_trip(tmp_path):
    b = tomo.synthesize_shots(SingleModeState.fock(1), N_ADD, 100, seed=9, label="signal")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().startswith("# label=signal seed=9 n_shots=100")
    back = IQShotBatch.read_csv(tmp_path / "b.csv")
    np.testing.assert_array_equal(back.shots, b.shots)
    assert back.seed == 9 and back.label == "signal"
    b.to_npz(tmp_path / "b.npz")
    back = IQShotBatch.read_npz(tmp_path / "b.npz")
    np.testing.assert_array_equal(back.shots, b.shots)
    (tmp_path / "bad.csv").write_text("I,Q\n1,2\n")
    with pytest.raises(FormatError):
        IQShotBatch.read_csv(tmp_path / "bad.csv")
    with pytest.raises(FormatError):
        IQShotBatch([np.nan])


# ---------------------------------------------------------------- moments


def test_constant_zero_batch_moments():
    m = tomo.raw_moments(IQShotBatch(np.zeros(100)), K=4)
    for n, k in m.entries():
        assert m[n, k] == (1.0 if (n, k) == (0, 0) else 0.0)


def test_moment_table_symmetry_and_order():
    b = tomo.synthesize_shots(SingleModeState.half_photon(0.9), N_ADD, 20_000, seed=8)
    m = tomo.raw_moments(b, K=4)
    for n, k in m.entries():
        assert m[k, n] == pytest.approx(np.conj(m[n, k]))
    assert m[0, 0] == pytest.approx(1.0)
    with pytest.raises(KeyError):
        m[3, 2]


def test_vacuum_raw_number_moment():
    b = tomo.synthesize_shots(SingleModeState.fock(0), 0.0, 100_000, seed=10)
    m = tomo.raw_moments(b)
    assert abs(m[1, 1] - 1.0) <= 3 * m.err(1, 1)
    assert m.err(1, 1) == pytest.approx(1 / math.sqrt(len(b)), rel=0.3)


def test_coherent_raw_mean():
    beta = 0.8 - 0.4j
    b = tomo.synthesize_shots(SingleModeState.coherent(beta), 0.0, 100_000, seed=11)
    m = tomo.raw_moments(b)
    assert abs(m[0, 1] - beta) <= 3 * math.sqrt(2) * m.err(0, 1)


def test_thermal_reference_against_samples():
    b = tomo.synthesize_shots(SingleModeState.fock(0), N_ADD, 400_000, seed=12)
    m = tomo.raw_moments(b)
    ref = tomo.thermal_reference(N_ADD)
    for n, k in m.entries():
        assert abs(m[n, k] - ref[n, k]) <= 4 * max(m.err(n, k), 1e-12)


def test_zero_noise_reference_deconvolution_exact():
    state = _random_state(0)
    raw_exact = tomo.exact_moments(state)
    # build the raw moments of S = a + h^dagger for a vacuum noise mode
    ref = tomo.thermal_reference(0.0)
    raw = np.full_like(raw_exact.moments, np.nan)
    for n, k in raw_exact.entries():
        # only <h h^dagger>-type terms survive for vacuum h
        raw[n, k] = sum(
            math.comb(n, i) * math.comb(k, i - n + k) * raw_exact.moments[i, i - n + k] * math.factorial(n - i)
            for i in range(max(0, n - k), n + 1)
        )
    table = MomentTable(raw, np.zeros_like(raw.real), 4)
    out = tomo.deconvolve(table, ref)
    for n, k in out.entries():
        assert out[n, k] == pytest.approx(raw_exact[n, k], abs=1e-12)


def test_deconvolution_inverts_forward_model():
    state = _random_state(1)
    exact = tomo.exact_moments(state)
    ref = tomo.thermal_reference(N_ADD)
    # forward: <(S^dag)^n S^m> = sum C(n,i) C(m,j) <(a^dag)^i a^j> <h^(n-i) (h^dag)^(m-j)>
    raw = np.full_like(exact.moments, np.nan)
    for n, m in exact.entries():
        raw[n, m] = sum(
            math.comb(n, i) * math.comb(m, j) * exact.moments[i, j] * ref.moments[n - i, m - j]
            for i in range(n + 1)
            for j in range(m + 1)
        )
    out = tomo.deconvolve(MomentTable(raw, np.zeros(raw.shape), 4), ref)
    np.testing.assert_allclose(
        [out[nm] for nm in out.entries()], [exact[nm] for nm in exact.entries()], atol=1e-10
    )


def test_deconvolution_order_check():
    ref = tomo.thermal_reference(N_ADD, K=2)
    with pytest.raises(DomainError):
        tomo.deconvolve(tomo.exact_moments(SingleModeState.fock(1)), ref, K=4)


def test_ill_conditioned_deconvolution_warns():
    sig = tomo.raw_moments(tomo.synthesize_shots(SingleModeState.fock(1), 20.0, 2_000, seed=13))
    ref = tomo.raw_moments(tomo.synthesize_shots(SingleModeState.fock(0), 20.0, 2_000, seed=14))
    with pytest.warns(RuntimeWarning, match="ill-conditioned"):
        out = tomo.deconvolve(sig, ref)
    assert out.warning is not None


@pytest.fixture(scope="module")
def fock1_run():
    return tomo.run_tomography(SingleModeState.fock(1), SingleModeState.fock(1), N_ADD, 1_000_000, seed=21)


@pytest.fixture(scope="module")
def hp_run():
    hp = SingleModeState.half_photon(1.0)
    return tomo.run_tomography(hp, hp, N_ADD, 1_000_000, seed=22)


def test_fock_one_end_to_end(fock1_run):
    m = fock1_run.moments
    assert m[1, 1].real == pytest.approx(1.0, abs=0.05)
    assert abs(m[0, 1]) <= 0.02
    assert fock1_run.reconstruction.state.rho[1, 1].real == pytest.approx(fock1_run.fidelity, abs=1e-9)


def test_half_photon_end_to_end(hp_run):
    m = hp_run.moments
    assert abs(m[0, 1]) == pytest.approx(0.5, abs=0.03)
    assert m[1, 1].real == pytest.approx(0.5, abs=0.03)


def test_statistical_coverage_over_seeds():
    covered = 0
    fock1, vac = SingleModeState.fock(1), SingleModeState.fock(0)
    for seed in range(100):
        sig = tomo.raw_moments(tomo.synthesize_shots(fock1, N_ADD, 20_000, seed=2 * seed))
        ref = tomo.raw_moments(tomo.synthesize_shots(vac, N_ADD, 20_000, seed=2 * seed + 1))
        m = _quiet_deconvolve(sig, ref)
        covered += abs(m[1, 1].real - 1.0) <= 3 * m.err(1, 1)
    assert covered >= 95


# ---------------------------------------------------------------- reconstruction


def test_reconstruct_exact_fock_one():
    rec = tomo.reconstruct(tomo.exact_moments(SingleModeState.fock(1)))
    assert tomo.fidelity(rec.state, SingleModeState.fock(1)) > 0.9999
    assert not rec.large_residual


def test_reconstruct_exact_superposition():
    rec = tomo.reconstruct(tomo.exact_moments(SingleModeState.half_photon(1.0)))
    assert rec.state.rho[0, 1].real == pytest.approx(0.5, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), noise=st.floats(0.0, 0.05))
def test_reconstruction_is_physical_and_sane(seed, noise):
    state = _random_state(seed)
    exact = tomo.exact_moments(state)
    r = np.random.default_rng(seed)
    mom = exact.moments.copy()
    sigma = np.zeros(mom.shape)
    for n, m in exact.entries():
        if (n, m) != (0, 0):
            sigma[n, m] = max(noise, 1e-12)
            if n < m:
                mom[n, m] += noise * (r.normal() + 1j * r.normal())
                mom[m, n] = np.conj(mom[n, m])
            elif n == m:
                mom[n, m] += noise * r.normal()
    rec = tomo.reconstruct(MomentTable(mom, sigma, 4))
    s = rec.state
    assert s.is_physical()
    assert s.mean_photons >= 0
    assert abs(s.mean_field) ** 2 <= s.mean_photons + 1e-12
    # the physicality step moves eigenvalues by at most twice the clipped
    # negative mass (trace norm), so the residual grows by at most ||A|| times that
    entries = [nm for nm in exact.entries() if nm != (0, 0)]
    gain = np.linalg.norm(tomo._design(5, entries), 2)
    assert rec.residual <= rec.ls_residual + gain * 2 * rec.projected_mass + 1e-9


def test_infeasible_moments_flagged():
    mom = tomo.exact_moments(SingleModeState.fock(0)).moments.copy()
    mom[1, 1] = -0.5  # negative photon number
    rec = tomo.reconstruct(MomentTable(mom, np.zeros(mom.shape), 4))
    assert rec.large_residual
    assert rec.state.is_physical()


# ---------------------------------------------------------------- Wigner and fidelity


def test_wigner_origin_values():
    assert tomo.wigner_at(SingleModeState.fock(0), 0.0) == pytest.approx(2 / math.pi, abs=1e-12)
    assert tomo.wigner_at(SingleModeState.fock(1), 0.0) == pytest.approx(-2 / math.pi, abs=1e-12)


def test_wigner_coherent_state_oracle():
    beta = 0.7 + 0.3j
    state = SingleModeState.coherent(beta, n_cut=25)
    alpha = np.array([0.0, 0.5 - 0.2j, 1.0 + 1.0j, -0.8j])
    analytic = 2 / math.pi * np.exp(-2 * np.abs(alpha - beta) ** 2)
    np.testing.assert_allclose(tomo.wigner_at(state, alpha), analytic, atol=1e-10)


def test_fock_one_wigner_oracle():
    alpha = np.linspace(-3, 3, 13) + 0.4j
    x = np.abs(alpha) ** 2
    analytic = 2 / math.pi * (4 * x - 1) * np.exp(-2 * x)
    np.testing.assert_allclose(tomo.wigner_at(SingleModeState.fock(1), alpha), analytic, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_wigner_invariants(seed):
    state = _random_state(seed)
    assert tomo.wigner_at(state, 0.0) == pytest.approx(tomo.parity_value(state), abs=1e-9)
    grid = tomo.wigner(state, extent=4.5, resolution=181)
    assert np.max(np.abs(grid.values)) <= 2 / math.pi + 1e-6
    assert grid.integral() == pytest.approx(1.0, abs=0.02)


def test_half_photon_wigner_negative_off_origin():
    grid = tomo.wigner(SingleModeState.half_photon(0.95), extent=3.5, resolution=281)
    i, j = np.unravel_index(np.argmin(grid.values), grid.values.shape)
    assert grid.values[i, j] < 0
    assert grid.x[j] != 0 and abs(grid.y[i]) <= grid.x[1] - grid.x[0]


def test_wigner_grid_validation_and_csv(tmp_path):
    with pytest.raises(DomainError):
        tomo.wigner(SingleModeState.fock(0), extent=2.0)
    grid = tomo.wigner(SingleModeState.fock(1), resolution=11)
    grid.to_csv(tmp_path / "w.csv")
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0].startswith("# extent=")
    assert len(lines) == 2 + 11


def test_fidelity_cases():
    s = _random_state(3)
    assert tomo.fidelity(s, s) == pytest.approx(1.0, abs=1e-9)
    assert tomo.fidelity(SingleModeState.fock(0), SingleModeState.fock(1)) == pytest.approx(0.0, abs=1e-12)
    psi = SingleModeState.half_photon(1.0)
    assert tomo.fidelity(s, psi) == pytest.approx(np.real(np.trace(s.rho @ psi.rho)), abs=1e-9)
    # different truncations are compared on the common space
    assert tomo.fidelity(SingleModeState.fock(1, n_cut=3), SingleModeState.fock(1, n_cut=5)) == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(a=st.integers(0, 2**31), b=st.integers(0, 2**31))
def test_fidelity_symmetric_and_bounded(a, b):
    s, t = _random_state(a, rank=3), _random_state(b, rank=1)
    f = tomo.fidelity(s, t)
    assert 0.0 <= f <= 1.0
    assert f == pytest.approx(tomo.fidelity(t, s), abs=1e-7)


def test_insufficient_statistics_flag():
    res = tomo.run_tomography(SingleModeState.fock(1), SingleModeState.fock(1), N_ADD, 100, seed=1)
    assert res.insufficient_statistics
