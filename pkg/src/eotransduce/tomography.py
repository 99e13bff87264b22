"""Heterodyne moment tomography of a single bosonic mode.

Shots follow ``S = a + h^dagger`` with ``h`` a thermal noise mode. Moments of
the signal mode are recovered from a vacuum reference run, turned into a
truncated density matrix and evaluated as a Wigner function.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import binom, eval_genlaguerre, gammaln

from .errors import DomainError, FormatError

SHOT_CHUNK = 1 << 16
TRACE_WEIGHT = 1e8


def _lowering(n_cut):
    return np.diag(np.sqrt(np.arange(1, n_cut)), 1).astype(complex)


@dataclass
class SingleModeState:
    rho: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=complex)
        if self.rho.ndim != 2 or self.rho.shape[0] != self.rho.shape[1]:
            raise DomainError("rho must be a square matrix")

    @property
    def n_cut(self):
        return self.rho.shape[0]

    @classmethod
    def from_ket(cls, ket, n_cut=None):
        ket = np.asarray(ket, dtype=complex)
        if n_cut is not None and n_cut > len(ket):
            ket = np.concatenate((ket, np.zeros(n_cut - len(ket))))
        ket = ket / np.linalg.norm(ket)
        return cls(np.outer(ket, ket.conj()))

    @classmethod
    def fock(cls, n, n_cut=5):
        ket = np.zeros(n_cut)
        ket[n] = 1.0
        return cls.from_ket(ket)

    @classmethod
    def coherent(cls, beta, n_cut=30):
        k = np.arange(n_cut)
        log_norm = -0.5 * abs(beta) ** 2 - 0.5 * gammaln(k + 1)
        ket = np.exp(log_norm) * np.power(complex(beta), k)
        return cls.from_ket(ket)

    @classmethod
    def single_photon(cls, p=1.0, n_cut=5):
        """Imperfect single photon: ``(1 - p)|0><0| + p|1><1|``."""
        rho = np.zeros((n_cut, n_cut), complex)
        rho[0, 0], rho[1, 1] = 1.0 - p, p
        return cls(rho)

    @classmethod
    def half_photon(cls, p=1.0, phase=0.0, n_cut=5):
        """``(|0> + e^{i phase}|1>)/sqrt(2)`` with the |1> branch emitted with probability ``p``."""
        rho = np.zeros((n_cut, n_cut), complex)
        rho[0, 0], rho[1, 1] = 1.0 - p / 2, p / 2
        rho[1, 0] = math.sqrt(p) / 2 * np.exp(1j * phase)
        rho[0, 1] = np.conj(rho[1, 0])
        return cls(rho)

    def hermiticity_error(self):
        return float(np.max(np.abs(self.rho - self.rho.conj().T)))

    def is_physical(self, herm_tol=1e-10, trace_tol=1e-9, eig_tol=1e-9):
        if self.hermiticity_error() > herm_tol:
            return False
        if abs(np.trace(self.rho) - 1.0) > trace_tol:
            return False
        return bool(np.linalg.eigvalsh(0.5 * (self.rho + self.rho.conj().T)).min() >= -eig_tol)

    def expect(self, op):
        return complex(np.trace(self.rho @ op))

    @property
    def mean_photons(self):
        return float(np.real(np.sum(np.arange(self.n_cut) * np.diag(self.rho))))

    @property
    def mean_field(self):
        """``<a>``."""
        return self.expect(_lowering(self.n_cut))


@dataclass
class IQShotBatch:
    shots: np.ndarray
    label: str = "signal"
    seed: Optional[int] = None

    def __post_init__(self):
        self.shots = np.asarray(self.shots, dtype=complex)
        if not np.all(np.isfinite(self.shots)):
            raise FormatError("shots must be finite")

    def __len__(self):
        return len(self.shots)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# label={self.label} seed={self.seed} n_shots={len(self)}\n")
            writer = csv.writer(fh)
            writer.writerow(["I", "Q"])
            for s in self.shots:
                writer.writerow([repr(float(s.real)), repr(float(s.imag))])

    @classmethod
    def read_csv(cls, path):
        with open(path) as fh:
            header = fh.readline()
            if not header.startswith("#"):
                raise FormatError("missing metadata header")
            meta = dict(item.split("=", 1) for item in header[1:].split())
            data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
        seed = None if meta.get("seed", "None") == "None" else int(meta["seed"])
        return cls(data[:, 0] + 1j * data[:, 1], meta.get("label", "signal"), seed)

    def to_npz(self, path):
        np.savez(path, shots=self.shots, label=self.label, seed=-1 if self.seed is None else self.seed)

    @classmethod
    def read_npz(cls, path):
        with np.load(path) as data:
            seed = int(data["seed"])
            return cls(data["shots"], str(data["label"]), None if seed < 0 else seed)


def _coherent_overlaps(alpha, n_cut):
    """``<n|alpha>`` for each sample, shape (len(alpha), n_cut)."""
    k = np.arange(n_cut)
    mag2 = np.abs(alpha) ** 2
    out = np.exp(-0.5 * mag2)[:, None] * np.ones((1, n_cut), complex)
    out[:, 1:] = out[:, :1] * np.cumprod(alpha[:, None] / np.sqrt(k[1:])[None, :], axis=1)
    return out


def _q_unnormalized(rho, alpha):
    """``pi * Q(alpha)`` for a flat array of points."""
    c = _coherent_overlaps(alpha, rho.shape[0])
    return np.real(np.sum(c.conj() * (c @ rho.T), axis=1))


def husimi_q(state: SingleModeState, alpha):
    """``Q(alpha) = <alpha|rho|alpha> / pi``."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=complex))
    return (_q_unnormalized(state.rho, alpha.ravel()) / math.pi).reshape(alpha.shape)


def _sample_q(rng, state, n, batch=1 << 17):
    """Rejection sampling of Q.

    Proposals have ``|alpha|^2 ~ Gamma(k + 1)`` with ``k`` uniform over the
    Fock cutoff, i.e. density ``exp(-|a|^2) sum_k |a|^(2k)/k! / (pi n_cut)``,
    which bounds ``n_cut * Q`` everywhere. Mean acceptance is ``1/n_cut``.
    """
    n_cut = state.n_cut
    parts, have = [], 0
    while have < n:
        m = min(batch, int(1.2 * n_cut * (n - have)) + 256)
        x = rng.gamma(rng.integers(0, n_cut, m) + 1.0)
        alpha = np.sqrt(x) * np.exp(2j * np.pi * rng.random(m))
        c = _coherent_overlaps(alpha, n_cut)
        envelope = np.sum(np.abs(c) ** 2, axis=1)
        q = np.real(np.sum(c.conj() * (c @ state.rho.T), axis=1))
        accepted = alpha[rng.random(m) * envelope < q]
        parts.append(accepted)
        have += len(accepted)
    return np.concatenate(parts)[:n]


def synthesize_shots(state: SingleModeState, added_noise_quanta, n_shots, seed, threads=1, label="signal"):
    """Draw heterodyne shots from the Husimi function broadened by thermal noise."""
    if not added_noise_quanta >= 0:
        raise DomainError("added noise must be >= 0")
    if n_shots < 1:
        raise DomainError("n_shots must be >= 1")
    if not state.is_physical():
        raise DomainError("state is not a physical density matrix")
    n_chunks = -(-n_shots // SHOT_CHUNK)

    def chunk(k):
        rng = np.random.default_rng([seed, k])
        n = min(SHOT_CHUNK, n_shots - k * SHOT_CHUNK)
        alpha = _sample_q(rng, state, n)
        noise = rng.normal(scale=math.sqrt(added_noise_quanta / 2), size=(2, n))
        return alpha + noise[0] + 1j * noise[1]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(chunk, range(n_chunks)))
    else:
        parts = [chunk(k) for k in range(n_chunks)]
    return IQShotBatch(np.concatenate(parts), label, seed)


@dataclass
class MomentTable:
    """``moments[n, m] = <(x^dagger)^n x^m>`` for ``n + m <= K`` (NaN elsewhere).

    ``jackknife`` holds leave-one-block-out tables used for error propagation.
    """

    moments: np.ndarray
    sigma: np.ndarray
    K: int
    jackknife: Optional[np.ndarray] = None
    warning: Optional[str] = None

    def __getitem__(self, nm):
        n, m = nm
        if n + m > self.K:
            raise KeyError(f"moment ({n},{m}) exceeds order {self.K}")
        return self.moments[n, m]

    def err(self, n, m):
        return float(self.sigma[n, m])

    def entries(self):
        return [(n, m) for n in range(self.K + 1) for m in range(self.K + 1 - n)]

    def as_dict(self):
        return {
            f"{n},{m}": {"re": float(self.moments[n, m].real), "im": float(self.moments[n, m].imag), "sigma": self.err(n, m)}
            for n, m in self.entries()
        }


def _moment_matrix(s, K):
    out = np.full((K + 1, K + 1), np.nan + 0j)
    powers = [np.ones_like(s)]
    for _ in range(K):
        powers.append(powers[-1] * s)
    for n in range(K + 1):
        conj_pow = powers[n].conj()
        for m in range(K + 1 - n):
            out[n, m] = np.mean(conj_pow * powers[m])
    return out


def _jackknife_sigma(jack):
    b = len(jack)
    dev = jack - jack.mean(axis=0)
    return np.sqrt((b - 1) / b * np.sum(np.abs(dev) ** 2, axis=0))


def raw_moments(batch: IQShotBatch, K=4, n_blocks=20) -> MomentTable:
    """Empirical ``<(S^dagger)^n S^m>`` with block-jackknife errors."""
    s = batch.shots
    n_blocks = min(n_blocks, len(s))
    if n_blocks < 2:
        raise DomainError("need at least 2 shots")
    blocks = np.array_split(s, n_blocks)
    block_means = np.array([_moment_matrix(b, K) for b in blocks])
    sizes = np.array([len(b) for b in blocks], float)[:, None, None]
    total = np.sum(block_means * sizes, axis=0) / sizes.sum()
    jack = np.array([(total * sizes.sum() - block_means[i] * sizes[i]) / (sizes.sum() - sizes[i]) for i in range(n_blocks)])
    sigma = _jackknife_sigma(jack)
    return MomentTable(total, sigma, K, jack)


def thermal_reference(added_noise_quanta, K=4) -> MomentTable:
    """Exact ``<h^n (h^dagger)^m>`` of a thermal mode: ``delta_nm n! (N+1)^n``."""
    mom = np.full((K + 1, K + 1), np.nan + 0j)
    for n in range(K + 1):
        for m in range(K + 1 - n):
            mom[n, m] = math.factorial(n) * (added_noise_quanta + 1) ** n if n == m else 0.0
    return MomentTable(mom, np.zeros((K + 1, K + 1)), K)


def exact_moments(state: SingleModeState, K=4) -> MomentTable:
    a = _lowering(state.n_cut)
    ad = a.conj().T
    mom = np.full((K + 1, K + 1), np.nan + 0j)
    for n in range(K + 1):
        for m in range(K + 1 - n):
            mom[n, m] = state.expect(np.linalg.matrix_power(ad, n) @ np.linalg.matrix_power(a, m))
    return MomentTable(mom, np.zeros((K + 1, K + 1)), K)


def _deconvolve_matrix(raw, ref, K):
    out = np.full((K + 1, K + 1), np.nan + 0j)
    for order in range(K + 1):
        for n in range(order + 1):
            m = order - n
            acc = raw[n, m]
            for i in range(n + 1):
                for j in range(m + 1):
                    if (i, j) != (n, m):
                        acc -= binom(n, i) * binom(m, j) * out[i, j] * ref[n - i, m - j]
            out[n, m] = acc / ref[0, 0]
    return out


def deconvolve(signal: MomentTable, reference: MomentTable, K=None, warn_sigma=1.0) -> MomentTable:
    """Remove the noise mode from signal moments using reference moments.

    A conditioning warning is attached when any recovered moment has an
    error above ``warn_sigma``.
    """
    K = min(signal.K, reference.K) if K is None else K
    if K > min(signal.K, reference.K):
        raise DomainError("tables do not reach the requested order")
    mom = _deconvolve_matrix(signal.moments, reference.moments, K)
    sig_j, ref_j = signal.jackknife, reference.jackknife
    if sig_j is not None or ref_j is not None:
        b = len(sig_j) if sig_j is not None else len(ref_j)
        if sig_j is not None and ref_j is not None and len(ref_j) != b:
            raise DomainError("signal and reference need the same number of jackknife blocks")
        jack = np.array(
            [
                _deconvolve_matrix(
                    sig_j[i] if sig_j is not None else signal.moments,
                    ref_j[i] if ref_j is not None else reference.moments,
                    K,
                )
                for i in range(b)
            ]
        )
        sigma = _jackknife_sigma(jack)
    else:
        jack, sigma = None, np.zeros((K + 1, K + 1))
    warning = None
    finite = sigma[np.isfinite(sigma)]
    if finite.size and finite.max() > warn_sigma:
        warning = f"ill-conditioned deconvolution: max moment error {finite.max():.3g}"
        warnings.warn(warning, RuntimeWarning, stacklevel=2)
    return MomentTable(mom, sigma, K, jack, warning)


def project_to_states(rho):
    """Closest density matrix in Frobenius norm (eigenvalues projected on the simplex)."""
    h = 0.5 * (rho + rho.conj().T)
    vals, vecs = np.linalg.eigh(h)
    u = np.sort(vals)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(u) + 1)
    r = np.nonzero(u - css / idx > 0)[0][-1]
    shift = css[r] / (r + 1)
    lam = np.clip(vals - shift, 0.0, None)
    return (vecs * lam) @ vecs.conj().T


@dataclass
class Reconstruction:
    state: SingleModeState
    residual: float
    large_residual: bool
    projected_mass: float = 0.0
    ls_residual: float = 0.0


def _design(n_cut, entries):
    a = _lowering(n_cut)
    ad = a.conj().T
    # Tr(rho X) = sum_kl rho_kl X_lk = vec(rho) . vec(X^T)
    return np.array([(np.linalg.matrix_power(ad, n) @ np.linalg.matrix_power(a, m)).T.ravel() for n, m in entries])


def reconstruct(moments: MomentTable, n_cut=5, residual_flag=3.0, n_iter=20000, tol=1e-14) -> Reconstruction:
    """Least-squares density matrix consistent with the moments, made physical.

    The linear solution is projected onto the density matrices and refined by
    projected gradient descent on the same weighted residual. The residual is
    flagged as large when its rms exceeds ``residual_flag`` standard errors
    (or 1e-6 absolute for error-free moments).
    """
    # the normalization is imposed by the projection, not fitted
    entries = [nm for nm in moments.entries() if nm != (0, 0)]
    A = _design(n_cut, entries)
    y = np.array([moments.moments[n, m] for n, m in entries])
    sig = np.array([moments.sigma[n, m] for n, m in entries], float)
    positive = sig[sig > 0]
    floor = positive.min() if positive.size else 1.0
    w = 1.0 / np.where(sig > 0, sig, floor)
    w /= w.max()
    Aw, yw = A * w[:, None], y * w
    # unit trace enforced by a heavily weighted extra row
    trace_row = TRACE_WEIGHT * np.eye(n_cut).ravel()
    x, *_ = np.linalg.lstsq(np.vstack((trace_row, Aw)), np.concatenate(([TRACE_WEIGHT], yw)), rcond=None)
    rho_ls = x.reshape(n_cut, n_cut)
    rho_ls = 0.5 * (rho_ls + rho_ls.conj().T)
    rho = project_to_states(rho_ls)
    projected_mass = float(np.sum(np.clip(-np.linalg.eigvalsh(rho_ls), 0, None)))
    ls_residual = float(np.linalg.norm(A @ rho_ls.ravel() - y))

    def resid(r):
        return Aw @ r.ravel() - yw

    # FISTA with step 1/L, L = ||Aw||_2^2, and restart when the objective rises
    step = 1.0 / np.linalg.norm(Aw, 2) ** 2
    z, t_k, prev = rho.copy(), 1.0, rho.copy()
    prev_val = np.linalg.norm(resid(rho))
    for _ in range(n_iter):
        if prev_val < 1e-13:
            break
        grad = (Aw.conj().T @ resid(z)).reshape(n_cut, n_cut)
        grad = 0.5 * (grad + grad.conj().T)
        new = project_to_states(z - step * grad)
        val = np.linalg.norm(resid(new))
        if val > prev_val:
            z, t_k = prev.copy(), 1.0
            continue
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t_k**2))
        z = new + (t_k - 1) / t_next * (new - prev)
        moved = np.max(np.abs(new - prev))
        prev, t_k, prev_val = new, t_next, val
        if moved < tol:
            break
    best = prev
    err = A @ best.ravel() - y
    residual = float(np.linalg.norm(err))
    if positive.size:
        scaled = np.abs(err[sig > 0]) / sig[sig > 0]
        large = bool(np.mean(scaled**2) > residual_flag**2)
    else:
        large = residual > 1e-6
    return Reconstruction(SingleModeState(best), residual, large, projected_mass, ls_residual)


@dataclass
class WignerGrid:
    x: np.ndarray
    y: np.ndarray
    values: np.ndarray

    @property
    def extent(self):
        return float(self.x[0]), float(self.x[-1]), float(self.y[0]), float(self.y[-1])

    def integral(self):
        dx = self.x[1] - self.x[0]
        dy = self.y[1] - self.y[0]
        return float(np.sum(self.values) * dx * dy)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            x0, x1, y0, y1 = self.extent
            fh.write(f"# extent={x0!r},{x1!r},{y0!r},{y1!r} shape={self.values.shape[0]}x{self.values.shape[1]}\n")
            fh.write("# rows: Im(alpha) ascending; columns: Re(alpha) ascending\n")
            writer = csv.writer(fh)
            for row in self.values:
                writer.writerow([repr(float(v)) for v in row])


def _displacement_elements(beta, n_cut):
    """``<m|D(beta)|n>`` for all m, n; shape beta.shape + (n_cut, n_cut)."""
    beta = np.asarray(beta, dtype=complex)
    x = np.abs(beta) ** 2
    gauss = np.exp(-0.5 * x)
    out = np.empty(beta.shape + (n_cut, n_cut), complex)
    for m in range(n_cut):
        for n in range(n_cut):
            lo, hi = min(m, n), max(m, n)
            pref = np.exp(0.5 * (gammaln(lo + 1) - gammaln(hi + 1)))
            z = beta if m >= n else -np.conj(beta)
            out[..., m, n] = pref * z ** (hi - lo) * gauss * eval_genlaguerre(lo, hi - lo, x)
    return out


def wigner_at(state: SingleModeState, alpha):
    """``W(alpha) = (2/pi) sum_nm rho_nm (-1)^n <m|D(2 alpha)|n>``, normalized to unit area."""
    alpha = np.asarray(alpha, dtype=complex)
    D = _displacement_elements(2 * alpha, state.n_cut)
    parity = (-1.0) ** np.arange(state.n_cut)
    vals = np.einsum("nm,n,...mn->...", state.rho, parity, D)
    return 2.0 / math.pi * np.real(vals)


def wigner(state: SingleModeState, extent=3.5, resolution=141) -> WignerGrid:
    """Wigner function on the square ``[-extent, extent]^2`` of phase space."""
    if extent < 3:
        raise DomainError("grid must cover |alpha| up to at least 3")
    x = np.linspace(-extent, extent, resolution)
    X, Y = np.meshgrid(x, x)
    return WignerGrid(x, x.copy(), wigner_at(state, X + 1j * Y))


def parity_value(state: SingleModeState) -> float:
    """``W(0)`` from the photon-number parity."""
    return 2.0 / math.pi * float(np.real(np.sum((-1.0) ** np.arange(state.n_cut) * np.diag(state.rho))))


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(0.5 * (m + m.conj().T))
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.conj().T


def fidelity(rho, sigma) -> float:
    """Uhlmann fidelity ``(tr sqrt(sqrt(rho) sigma sqrt(rho)))^2``."""
    r = rho.rho if isinstance(rho, SingleModeState) else np.asarray(rho, complex)
    s = sigma.rho if isinstance(sigma, SingleModeState) else np.asarray(sigma, complex)
    if r.shape != s.shape:
        n = max(r.shape[0], s.shape[0])
        r = np.pad(r, ((0, n - r.shape[0]),) * 2)
        s = np.pad(s, ((0, n - s.shape[0]),) * 2)
    # a pure argument gives <psi|other|psi> directly, avoiding square roots of
    # numerically zero eigenvalues
    for pure, other in ((s, r), (r, s)):
        vals, vecs = np.linalg.eigh(0.5 * (pure + pure.conj().T))
        if vals[-1] > 1.0 - 1e-12:
            psi = vecs[:, -1]
            return min(max(float(np.real(psi.conj() @ other @ psi)), 0.0), 1.0)
    sr = _psd_sqrt(r)
    vals = np.linalg.eigvalsh(0.5 * ((m := sr @ s @ sr) + m.conj().T))
    f = float(np.sum(np.sqrt(np.clip(vals, 0, None))) ** 2)
    return min(max(f, 0.0), 1.0)


@dataclass
class TomographyResult:
    moments: MomentTable
    reconstruction: Reconstruction
    fidelity: float
    target: SingleModeState
    insufficient_statistics: bool
    summary: dict = field(default_factory=dict)


def run_tomography(
    state: SingleModeState,
    target: SingleModeState,
    added_noise_quanta: float,
    n_shots: int,
    seed: int,
    K: int = 4,
    n_cut: int = 5,
    threads: int = 1,
    insufficient_sigma: float = 0.3,
) -> TomographyResult:
    """Signal and vacuum-reference runs, deconvolution, reconstruction and fidelity."""
    vac = SingleModeState.fock(0, state.n_cut)
    sig_seed, ref_seed = (int(np.random.SeedSequence([seed, k]).generate_state(1)[0]) for k in (1, 2))
    sig_batch = synthesize_shots(state, added_noise_quanta, n_shots, sig_seed, threads, "signal")
    ref_batch = synthesize_shots(vac, added_noise_quanta, n_shots, ref_seed, threads, "vacuum_reference")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mom = deconvolve(raw_moments(sig_batch, K), raw_moments(ref_batch, K), K)
    rec = reconstruct(mom, n_cut)
    fid = fidelity(rec.state, target)
    insufficient = mom.err(1, 1) > insufficient_sigma
    summary = {
        "n_shots": n_shots,
        "added_noise_quanta": added_noise_quanta,
        "mean_photons": float(mom[1, 1].real),
        "mean_photons_sigma": mom.err(1, 1),
        "abs_mean_field": float(abs(mom[0, 1])),
        "abs_mean_field_sigma": mom.err(0, 1),
        "fidelity": fid,
        "residual": rec.residual,
        "large_residual": rec.large_residual,
        "insufficient_statistics": bool(insufficient),
        "conditioning_warning": mom.warning,
    }
    return TomographyResult(mom, rec, fid, target, bool(insufficient), summary)


def exact_tomography(state: SingleModeState, target: SingleModeState, K: int = 4, n_cut: int = 5) -> TomographyResult:
    """Noise-free reference path: reconstruct from the state's exact moments."""
    mom = exact_moments(state, K)
    rec = reconstruct(mom, n_cut)
    fid = fidelity(rec.state, target)
    summary = {
        "n_shots": 0,
        "added_noise_quanta": 0.0,
        "mean_photons": float(mom[1, 1].real),
        "mean_photons_sigma": 0.0,
        "abs_mean_field": float(abs(mom[0, 1])),
        "abs_mean_field_sigma": 0.0,
        "fidelity": fid,
        "residual": rec.residual,
        "large_residual": rec.large_residual,
        "insufficient_statistics": False,
        "conditioning_warning": None,
    }
    return TomographyResult(mom, rec, fid, target, False, summary)
