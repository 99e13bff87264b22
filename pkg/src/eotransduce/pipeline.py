"""Config-driven experiments composed from the library modules.

Each ``cmd_*`` function takes a resolved config and returns a
:class:`StageResult`: a JSON-ready report section plus named tables. The CLI
decides where and in which format tables are written.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np

from . import counting, dynamics, figures, mwpath, optics, tomography
from .errors import ConfigError, DomainError


@dataclass
class Table:
    columns: tuple
    rows: list

    def as_records(self):
        return [dict(zip(self.columns, row)) for row in self.rows]


@dataclass
class StageResult:
    report: dict
    tables: dict = field(default_factory=dict)
    exit_code: int = 0


def _build(section: str, factory: Callable, **kwargs):
    try:
        return factory(**kwargs)
    except DomainError as exc:
        raise ConfigError(str(exc), section) from exc


def build_device(cfg) -> figures.DeviceParams:
    d = cfg["device"]
    return _build(
        "device",
        figures.DeviceParams,
        f_o_hz=d["f_o_hz"],
        kappa_o_hz=d["kappa_o_hz"],
        eta_o=d["eta_o"],
        g0_hz=d["g0_hz"],
        lambda_sq=d["lambda_sq"],
        f_e_hz=d["f_e_hz"],
        kappa_eo_hz=d["kappa_eo_hz"],
        eta_e=d["eta_e"],
        n_p=d["n_p"],
        B_c_hz=d["B_c_hz"],
        P_p_w=d["P_p_w"],
        pulse_len_s=d["pulse_len_s"],
    )


def build_qubit_cavity(cfg) -> dynamics.QubitCavityParams:
    return _build("qubit_cavity", dynamics.QubitCavityParams, **cfg["qubit_cavity"])


def build_drive(cfg) -> dynamics.DriveSchedule:
    d = cfg["drive"]
    return _build(
        "drive",
        dynamics.DriveSchedule,
        bsb_amplitude=d.get("bsb_amplitude_rad_per_s"),
        bsb_duration=d["bsb_duration_s"],
    )


def build_ledger(cfg) -> mwpath.LossLedger:
    qc = build_qubit_cavity(cfg)
    segments = tuple((row["label"], row["loss_db"]) for row in cfg["path"]["ledger"])
    ledger = _build("path.ledger", mwpath.LossLedger, segments=segments, outcoupling=qc.outcoupling)
    for key in ("noise_reference", "eo_input"):
        if cfg["path"][key] not in ledger.labels:
            raise ConfigError(f"label {cfg['path'][key]!r} is not in the ledger", f"path.{key}")
    return ledger


def build_filters(cfg, bank) -> tuple:
    return tuple(
        _build(f"filters.{bank}[{i}]", optics.FilterSpec, **row) for i, row in enumerate(cfg["filters"][bank])
    )


def build_noise(cfg) -> optics.OpticalNoiseModel:
    n = cfg["noise"]
    return _build(
        "noise",
        optics.OpticalNoiseModel,
        dark_per_pulse=n["dark_per_pulse"],
        inelastic_coeff=n["inelastic_per_pulse_per_m_w"],
        fiber_length_m=n["fiber_length_m"],
        peak_power_w=n["peak_power_w"],
        gate_len_s=n["gate_len_s"],
    )


def build_thermal(cfg) -> optics.ThermalOccupancyModel:
    n = cfg["noise"]
    return _build(
        "noise",
        optics.ThermalOccupancyModel.calibrated,
        anchors=(
            (n["thermal_anchor_low_w"], n["thermal_anchor_low_quanta"]),
            (n["thermal_anchor_high_w"], n["thermal_anchor_high_quanta"]),
        ),
        exp1=n["thermal_exp_low"],
        exp2=n["thermal_exp_high"],
        p_cross_w=n["thermal_cross_w"],
    )


def detection_efficiencies(cfg, device):
    """Return ``(eta_det, eta_det_budget)``; the measured value wins when set."""
    d = cfg["detection"]
    C = figures.cooperativity(device.g0_hz, device.n_p, device.kappa_eo_hz, device.kappa_o_hz)
    eta_ext = figures.external_efficiency(figures.internal_efficiency(C), device.eta_e, device.eta_o, device.lambda_sq)
    budget = _build(
        "detection",
        optics.detection_efficiency_budget,
        eta_ext=eta_ext,
        path_fraction=d["path_fraction"],
        optical_chain_db=d["optical_chain_db"],
        temporal_mismatch=d["temporal_mismatch"],
    )
    measured = d["eta_det_measured"]
    if measured < 0:
        raise ConfigError("must be >= 0", "detection.eta_det_measured")
    return (measured if measured > 0 else budget), budget


def _finite(x):
    """JSON-safe float (non-finite values become None)."""
    x = float(x)
    return x if math.isfinite(x) else None


# ---------------------------------------------------------------- figures


def cmd_figures(cfg) -> StageResult:
    device = build_device(cfg)
    f = cfg["figures"]
    thermal = build_thermal(cfg)
    C = figures.cooperativity(device.g0_hz, device.n_p, device.kappa_eo_hz, device.kappa_o_hz)
    eta_int = figures.internal_efficiency(C)
    eta_ext = figures.external_efficiency(eta_int, device.eta_e, device.eta_o, device.lambda_sq)
    eta_det, budget = detection_efficiencies(cfg, device)

    rate_cols = ("rate_hz", "duty", "p_diss_w", "n_e", "n_add", "throughput_hz", "capacity_ub_hz",
                 "quantum_enabled", "capacity_ub_ref_hz")
    rate_rows = []
    for rate in f["rates_hz"]:
        duty = _build("figures.rates_hz", device.duty_cycle, trigger_rate_hz=rate)
        p_diss = figures.dissipated_power(device.P_p_w, device.lambda_sq, device.eta_o, duty)
        n_e = optics.thermal_occupancy(p_diss, thermal)
        n_add = figures.added_noise_referred(n_e, device.eta_e)
        theta = figures.throughput(device.B_c_hz, duty, eta_ext)
        cap = figures.capacity_upper_bound(theta, n_add)
        ref = figures.capacity_upper_bound(theta, f["capacity_n_add"])
        rate_rows.append((rate, duty, p_diss, n_e, n_add, theta, cap.value, cap.quantum_enabled, ref.value))

    bell_rows = []
    for snr in f["snr_grid"]:
        bell_rows.append((snr, figures.success_probability(snr), figures.bell_fidelity(snr, f["bell_input_fidelity"])))

    offset = cfg["filters"]["signal_offset_hz"]
    filter_cols = ("bank", "index", "fsr_hz", "linewidth_hz", "finesse", "peak_transmission", "suppression_db")
    filter_rows, banks = [], {}
    for bank in ("pump_bank", "signal_bank"):
        specs = build_filters(cfg, bank)
        for i, spec in enumerate(specs):
            filter_rows.append((bank, i, spec.fsr_hz, spec.linewidth_hz, spec.finesse, spec.peak_transmission,
                                float(optics.suppression_db(offset, spec))))
        banks[bank] = {
            "suppression_db": optics.cascade_suppression(specs, offset) if specs else 0.0,
            "insertion_loss_db": optics.cascade_insertion_loss_db(specs),
        }

    report = {
        "cooperativity": C,
        "eta_int": eta_int,
        "eta_ext": eta_ext,
        "frequency_matched": device.frequency_matched(),
        "eta_det_budget": budget,
        "eta_det": eta_det,
        "capacity_n_add_ref": f["capacity_n_add"],
        "rates": Table(rate_cols, rate_rows).as_records(),
        "bell": Table(("snr", "p_success", "f_bell"), bell_rows).as_records(),
        "filters": {"signal_offset_hz": offset, **banks},
        "optical_noise_per_pulse": optics.optical_noise_per_pulse(build_noise(cfg)),
    }
    tables = {
        "figures_rates": Table(rate_cols, rate_rows),
        "bell_fidelity": Table(("snr", "p_success", "f_bell"), bell_rows),
        "filters": Table(filter_cols, filter_rows),
    }
    return StageResult(report, tables)


# ---------------------------------------------------------------- photon


@dataclass
class PhotonProducts:
    sp: dynamics.TemporalEnvelope
    hp: dynamics.TemporalEnvelope
    vacuum: dynamics.TemporalEnvelope
    schedule: dynamics.DriveSchedule
    n_sp: mwpath.WindowAverage
    n_sp_opt: mwpath.WindowAverage
    intracavity: mwpath.Trace
    report: dict
    tables: dict


def _photon_products(cfg) -> PhotonProducts:
    qc = build_qubit_cavity(cfg)
    schedule = build_drive(cfg)
    device = build_device(cfg)
    d, p = cfg["drive"], cfg["path"]
    if schedule.bsb_amplitude is None:
        schedule = replace(
            schedule, bsb_amplitude=dynamics.calibrate_bsb_amplitude(qc, schedule.bsb_duration, d["n_fock"])
        )
    kw = dict(dt=d["dt_s"], t_max=d["t_max_s"], n_fock=d["n_fock"])
    sp = dynamics.generate_photon("single", qc, schedule, **kw)
    hp = dynamics.generate_photon("half", qc, schedule, **kw)
    vac = dynamics.generate_photon("vacuum", qc, schedule, **kw)

    ledger = build_ledger(cfg)
    on_res = mwpath.CavityResponse(device.eta_e, device.kappa_eo_hz, 0.0)
    off_res = mwpath.CavityResponse(device.eta_e, device.kappa_eo_hz, p["off_resonant_detuning_hz"])

    sp_unit = sp.normalized()
    trace = mwpath.intracavity_population(sp_unit, on_res)
    n_sp = mwpath.pump_window_average(trace, p["pump_window_s"])
    n_sp_opt = mwpath.pump_window_average(trace, p["optimal_window_s"])

    # field envelopes at the converter input; off-resonant = reflected from a detuned cavity
    t_eo = ledger.transmission(p["eo_input"])
    traces = {}
    for name, env in (("sp", sp), ("hp", hp), ("vacuum", vac)):
        at_eo = env.scaled(t_eo)
        traces[name] = (mwpath.reflect(at_eo, off_res), mwpath.reflect(at_eo, on_res))

    at_ref, t_ref = mwpath.apply_ledger(sp_unit, ledger, p["noise_reference"])
    photons_at_ref = mwpath.integrate_photons(at_ref, p["mmf_duration_s"])
    weights = mwpath.ModeMatchWeights.from_envelope(sp_unit, p["mmf_duration_s"], p["mmf_weighting"])
    het = mwpath.predict_heterodyne_snr(at_ref, weights, p["added_noise_quanta"])

    sp_off, sp_on = traces["sp"]
    hp_off, _ = traces["hp"]
    tail = sp.decay_time(schedule.bsb_duration + 150e-9, schedule.bsb_duration + 900e-9)
    on_tail = sp_on.decay_time(schedule.bsb_duration + 50e-9, schedule.bsb_duration + 250e-9)
    off_tail = sp_off.decay_time(schedule.bsb_duration + 50e-9, schedule.bsb_duration + 250e-9)
    hp_coh = np.abs(hp.amp) ** 2
    peak_ratio = float(hp_coh.max() / sp.pop.max())

    # revival lobe: the on-resonant flux dips to a minimum after its peak, then rises again
    i_peak = int(np.argmax(sp_on.pop))
    rising = np.nonzero(np.diff(sp_on.pop[i_peak:]) > 0)[0]
    i_dip = i_peak + int(rising[0]) if rising.size else len(sp_on) - 1
    revival = sp_on.pop[i_dip:]
    has_revival = bool(revival.max() > 1.01 * sp_on.pop[i_dip] + 1e-3 * sp_on.pop[i_peak])

    report = {
        "bsb_amplitude_rad_per_s": schedule.bsb_amplitude,
        "bsb_pulse_area_pi": schedule.bsb_amplitude * schedule.bsb_duration / math.pi,
        "emitted_photons_sp": sp.photon_number(),
        "emitted_photons_hp": hp.photon_number(),
        "tail_time_constant_s": tail,
        "hp_to_sp_peak_ratio": peak_ratio,
        "on_resonant_decay_time_s": on_tail,
        "off_resonant_decay_time_s": off_tail,
        "on_resonant_revival": has_revival,
        "revival_dip_time_s": float(sp_on.times[i_dip]),
        "off_resonant_energy_ratio": sp_off.photon_number() / sp.scaled(t_eo).photon_number(),
        "n_sp": n_sp.n_sp,
        "n_sp_best_arrival_s": n_sp.best_arrival,
        "n_sp_optimal_window": n_sp_opt.n_sp,
        "photons_at_eo_input": t_eo,
        "alpha": ledger.transmission(),
        "photons_at_noise_reference": photons_at_ref,
        "enbw_hz": het.enbw_hz,
        "heterodyne_snr": _finite(het.snr),
        "heterodyne_snr_rbw": _finite(het.at_bandwidth(p["rbw_hz"])),
        "heterodyne_saturated": het.saturated,
    }
    cols = ("time_s", "sp_source", "hp_coherent_source", "sp_off_resonant", "sp_on_resonant",
            "hp_coherent_off_resonant", "vacuum_off_resonant", "intracavity_sp")
    rows = list(
        zip(
            sp.times,
            sp.pop,
            hp_coh,
            sp_off.pop,
            sp_on.pop,
            np.abs(hp_off.amp) ** 2,
            traces["vacuum"][0].pop,
            trace.values,
        )
    )
    tables = {"photon_envelopes": Table(cols, rows)}
    return PhotonProducts(sp, hp, vac, schedule, n_sp, n_sp_opt, trace, report, tables)


@lru_cache(maxsize=4)
def _photon_cached(key):
    import json

    return _photon_products(json.loads(key))


def photon_products(cfg) -> PhotonProducts:
    """Photon-stage products; memoized on the config content."""
    import json

    keys = ("device", "qubit_cavity", "drive", "path")
    return _photon_cached(json.dumps({k: cfg[k] for k in keys}, sort_keys=True))


def cmd_photon(cfg) -> StageResult:
    prod = photon_products(cfg)
    return StageResult(dict(prod.report), dict(prod.tables))


# ---------------------------------------------------------------- tomography


def cmd_tomography(cfg, seed, threads=1) -> StageResult:
    t = cfg["tomography"]
    n_cut, K = t["n_cut"], t["moment_order"]
    if t["n_shots"] < 2:
        raise ConfigError("must be >= 2", "tomography.n_shots")
    if n_cut < 2:
        raise ConfigError("must be >= 2", "tomography.n_cut")
    if K < 2:
        raise ConfigError("must be >= 2", "tomography.moment_order")
    states = {
        "sp": _build("tomography", tomography.SingleModeState.single_photon, p=t["sp_photon_number"], n_cut=n_cut),
        "hp": _build("tomography", tomography.SingleModeState.half_photon, p=t["hp_photon_number"], n_cut=n_cut),
    }
    report, tables, exit_code = {}, {}, 0
    for k, (name, state) in enumerate(states.items()):
        if t["exact_moments"]:
            res = tomography.exact_tomography(state, state, K=K, n_cut=n_cut)
        else:
            res = tomography.run_tomography(
                state, state, t["added_noise_quanta"], t["n_shots"], seed + k, K=K, n_cut=n_cut, threads=threads
            )
        rec = res.reconstruction.state
        grid = tomography.wigner(rec, t["wigner_extent"], t["wigner_resolution"])
        i_min = np.unravel_index(np.argmin(grid.values), grid.values.shape)
        summary = dict(res.summary)
        summary.update(
            {
                "moments": res.moments.as_dict(),
                "rho_real": np.real(rec.rho).tolist(),
                "rho_imag": np.imag(rec.rho).tolist(),
                "wigner_origin": float(tomography.wigner_at(rec, 0.0)),
                "wigner_parity_origin": tomography.parity_value(rec),
                "wigner_min": float(grid.values[i_min]),
                "wigner_min_at": [float(grid.x[i_min[1]]), float(grid.y[i_min[0]])],
                "wigner_integral": grid.integral(),
            }
        )
        report[name] = summary
        tables[f"wigner_{name}"] = grid
        # ill-conditioned deconvolution: the report is still written, the run fails
        defined = [res.moments[nm] for nm in res.moments.entries()]
        if not np.all(np.isfinite(defined)) or res.moments.warning:
            exit_code = 3
    return StageResult(report, tables, exit_code)


# ---------------------------------------------------------------- counting


def _sweep_inputs(cfg):
    device = build_device(cfg)
    prod = photon_products(cfg)
    eta_det, budget = detection_efficiencies(cfg, device)
    t_eo = build_ledger(cfg).transmission(cfg["path"]["eo_input"])
    n_cav_sp = t_eo * prod.n_sp.n_sp
    eta_det_cav = optics.cavity_referred_efficiency(eta_det, n_cav_sp)
    return device, prod, eta_det, budget, n_cav_sp, eta_det_cav


def _noise_at_rate(cfg, device, eta_det_cav, rate):
    duty = _build("counting", device.duty_cycle, trigger_rate_hz=rate)
    p_diss = figures.dissipated_power(device.P_p_w, device.lambda_sq, device.eta_o, duty)
    n_e = optics.thermal_occupancy(p_diss, build_thermal(cfg))
    return optics.optical_noise_per_pulse(build_noise(cfg)) + eta_det_cav * n_e


def _sweep_table(rows):
    cols = counting.SWEEP_COLUMNS
    return Table(cols, [tuple(getattr(r, c) for c in cols) for r in rows])


def cmd_sweep(cfg, seed, threads=1) -> StageResult:
    c = cfg["counting"]
    device, prod, eta_det, budget, n_cav_sp, eta_det_cav = _sweep_inputs(cfg)
    noise, thermal = build_noise(cfg), build_thermal(cfg)
    rows = counting.sweep_rate(c["rates_hz"], device, eta_det, eta_det_cav, noise, thermal, c["pulses_per_rate"])
    curve_rates = np.geomspace(100.0, 30e3, 121) if c["rates_hz"] else []
    curve = counting.sweep_rate(curve_rates, device, eta_det, eta_det_cav, noise, thermal, c["pulses_per_rate"])

    # Monte Carlo replica of the time-resolved 1 kHz-style run
    plan = _build(
        "counting",
        counting.RunPlan,
        trigger_rate_hz=c["trigger_rate_hz"],
        n_pulses=c["n_pulses"],
        gate_start_s=c["gate_start_s"],
        gate_len_s=c["gate_len_s"],
        window_len_s=c["window_len_s"],
        seed=seed,
    )
    profile = pump_window_profile(prod, plan)
    noise_pp = _noise_at_rate(cfg, device, eta_det_cav, c["trigger_rate_hz"])
    record = counting.simulate_run(plan, profile, eta_det, noise_pp, threads=threads)
    hist_sig = counting.bin_counts(record, c["bin_width_s"], counting.SIGNAL)
    hist_vac = counting.bin_counts(record, c["bin_width_s"], counting.VACUUM)
    exp_raw, exp_noise = counting.expected_totals(plan, eta_det, noise_pp)
    try:
        est = counting.estimate_snr(record.raw_signal, record.noise)
        mc_snr = {"snr": est.snr, "sigma": est.sigma}
    except ZeroDivisionError:
        mc_snr = {"snr": None, "sigma": None}

    def row_dict(r):
        d = {k: getattr(r, k) for k in counting.SWEEP_COLUMNS}
        d["snr"], d["snr_sigma"] = _finite(r.snr), _finite(r.snr_sigma)
        return d

    report = {
        "n_sp": prod.n_sp.n_sp,
        "n_cav_sp": n_cav_sp,
        "eta_det": eta_det,
        "eta_det_budget": budget,
        "eta_det_cav": eta_det_cav,
        "rows": [row_dict(r) for r in rows],
        "monte_carlo": {
            "trigger_rate_hz": plan.trigger_rate_hz,
            "n_pulses": plan.n_pulses,
            "noise_per_pulse": noise_pp,
            "raw_signal": record.raw_signal,
            "noise": record.noise,
            "expected_raw_signal": exp_raw,
            "expected_noise": exp_noise,
            **mc_snr,
        },
    }
    hist_cols = ("bin_start_s", "bin_end_s", "signal_counts", "signal_error", "vacuum_counts", "vacuum_error")
    hist_rows = list(zip(hist_sig.edges[:-1], hist_sig.edges[1:], hist_sig.counts, hist_sig.errors,
                         hist_vac.counts, hist_vac.errors))
    tables = {
        "sweep": _sweep_table(rows),
        "sweep_curve": _sweep_table(curve),
        "time_histogram": Table(hist_cols, hist_rows),
        "time_tags": Table(
            ("pulse_index", "channel", "t_click_s"),
            [(int(i), "signal" if ch == counting.SIGNAL else "vacuum", float(t))
             for i, ch, t in zip(record.pulse_index, record.channel, record.t_click)],
        ),
    }
    return StageResult(report, tables)


def pump_window_profile(prod: PhotonProducts, plan: counting.RunPlan) -> counting.TimeProfile:
    """Arrival-time density of converted photons: intracavity population inside the pump window."""
    trace = prod.intracavity
    i0 = int(round((prod.n_sp.best_arrival - trace.t0) / trace.dt))
    n = int(round(plan.gate_len_s / trace.dt))
    return counting.TimeProfile.from_shape(plan.gate_start_s, trace.dt, trace.values[i0 : i0 + n])


def _rabi_report(fit: counting.RabiFit):
    return {
        "amplitude": fit.amplitude,
        "amplitude_sigma": fit.amplitude_sigma,
        "phase_rad": fit.phase,
        "offset": fit.offset,
        "minima_rad": [float(m) for m in fit.minima],
        "minima_sigma_rad": _finite(fit.minima_sigma),
        "chi2": fit.chi2,
    }


def _rabi_curve(fit, data, label):
    theta = np.linspace(float(np.min(data.angles)), float(np.max(data.angles)), 201)
    lo, hi = fit.band(theta)
    return Table((f"{label}_theta_rad", "fit", "band_low", "band_high"), list(zip(theta, fit(theta), lo, hi)))


def cmd_rabi(cfg, seed, threads=1) -> StageResult:
    c = cfg["counting"]
    device, prod, eta_det, _, _, eta_det_cav = _sweep_inputs(cfg)
    angles = np.asarray(c["rabi_angles_rad"], dtype=float)
    noise_pp = _noise_at_rate(cfg, device, eta_det_cav, c["trigger_rate_hz"])

    opt = counting.simulate_optical_rabi(eta_det, noise_pp, c["rabi_pulses_per_point"], angles, seed)
    opt_fit = counting.fit_rabi(opt.angles, opt.counts, opt.errors)
    opt_snr = counting.estimate_snr(opt_fit.amplitude + opt.noise_counts, opt.noise_counts)
    # amplitude error dominates; noise-point error added in quadrature
    opt_sigma = math.hypot(opt_fit.amplitude_sigma / opt.noise_counts, opt_snr.sigma)

    het_snr = prod.report["heterodyne_snr"]
    mw = counting.simulate_microwave_rabi(het_snr, c["mw_rabi_shots_per_point"], angles, seed)
    mw_fit = counting.fit_rabi(mw.angles, mw.counts, mw.errors)

    data_cols = ("theta_rad", "value", "error")
    report = {
        "optical": {
            **_rabi_report(opt_fit),
            "noise_counts": opt.noise_counts,
            "noise_per_pulse": noise_pp,
            "pulses_per_point": c["rabi_pulses_per_point"],
            "snr": opt_snr.snr,
            "snr_sigma": opt_sigma,
        },
        "microwave": {
            **_rabi_report(mw_fit),
            "predicted_snr": het_snr,
            "shots_per_point": c["mw_rabi_shots_per_point"],
        },
    }
    tables = {
        "rabi_optical_data": Table(data_cols, list(zip(opt.angles, opt.counts, opt.errors))),
        "rabi_optical_fit": _rabi_curve(opt_fit, opt, "optical"),
        "rabi_microwave_data": Table(data_cols, list(zip(mw.angles, mw.counts, mw.errors))),
        "rabi_microwave_fit": _rabi_curve(mw_fit, mw, "microwave"),
    }
    return StageResult(report, tables)


COMMANDS = {
    "figures": lambda cfg, seed, threads: cmd_figures(cfg),
    "photon": lambda cfg, seed, threads: cmd_photon(cfg),
    "tomography": cmd_tomography,
    "sweep": cmd_sweep,
    "rabi": cmd_rabi,
}
