"""Physical observables and post-processing of propagated runs.

State-level functions take an :class:`~multid2.ensemble.EnsembleState`;
the ``*_series`` variants work on the stacked arrays of a
:class:`~multid2.propagator.RunOutput` (``A`` of shape ``(T, N_S, M)``,
``F`` of shape ``(T, M, N)``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import lgamma

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import find_peaks

from .ensemble import overlap_matrix
from .errors import ConfigurationError, DimensionError
from .models import site_index


@dataclass
class TimeSeries:
    """Records on a strictly increasing, equidistant time grid."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values)
        if self.times.ndim != 1 or len(self.values) != len(self.times):
            raise DimensionError("values must have one record per time")
        if len(self.times) > 1:
            dt = np.diff(self.times)
            if np.any(dt <= 0):
                raise ConfigurationError("times must be strictly increasing")
            if not np.allclose(dt, dt[0], rtol=1e-8, atol=1e-12):
                raise ConfigurationError("times must be equidistant")

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])


def _overlaps(F):
    sq = np.sum(np.abs(F) ** 2, axis=-1)
    G = np.einsum("...lj,...kj->...lk", F.conj(), F)
    return np.exp(G - 0.5 * sq[..., :, None] - 0.5 * sq[..., None, :])


# ---------------------------------------------------------------------------
# populations


def site_populations_series(A, F):
    """``rho_nn(t) = sum_lk S_lk conj(A_nl) A_nk`` for each output time."""
    S = _overlaps(F)
    return np.einsum("tnl,tnk,tlk->tn", A.conj(), A, S).real


def population_z(state):
    """``<sigma_z>`` of a spin-boson state (basis ``|+>, |->``)."""
    if state.N_S != 2:
        raise DimensionError("population_z needs a two-level system")
    S = overlap_matrix(state.F)
    p = np.einsum("nl,nk,lk->n", state.A.conj(), state.A, S).real
    return float(p[0] - p[1])


def population_z_series(A, F):
    if A.shape[1] != 2:
        raise DimensionError("population_z needs a two-level system")
    p = site_populations_series(A, F)
    return p[:, 0] - p[:, 1]


def exciton_density(state):
    """Diagonal of the exciton reduced density matrix, indexed like the model."""
    S = overlap_matrix(state.F)
    return np.einsum("nl,nk,lk->n", state.A.conj(), state.A, S).real


def reflection_error(rho, mirror):
    """Largest ``|rho_n - rho_mirror(n)|`` over the last axis."""
    rho = np.asarray(rho)
    return float(np.max(np.abs(rho - rho[..., mirror])))


def norm(state):
    S = overlap_matrix(state.F)
    return float(np.sum(state.rho() * S).real)


def energy(state, model):
    """``<Psi|H|Psi>`` (not divided by the norm)."""
    S = overlap_matrix(state.F)
    return float(np.sum(model.energy_matrix(state.A, state.F) * S).real)


def energy_series(A, F, model):
    S = _overlaps(F)
    return np.array([np.sum(model.energy_matrix(a, f) * s).real for a, f, s in zip(A, F, S)])


def norm_series(A, F):
    return site_populations_series(A, F).sum(axis=1)


# ---------------------------------------------------------------------------
# linear absorption


def autocorrelation(A, F, N_sites=None):
    """Bright-state autocorrelation from a run started on a single site.

    For a translation-invariant chain the bright state
    ``N^{-1/2} sum_m |m>|0>`` evolves as the average of the translated
    single-site evolutions, so ``<B|exp(-iHt)|B>`` equals
    ``sum_n <n, 0|psi_0(t)> = sum_l sum_n A_nl prod_j exp(-|alpha_lj|^2/2)``
    with ``psi_0`` the state propagated from one site and the phonon vacuum.

    Returns
    -------
    raw, normalized : complex arrays
        ``raw = N * normalized`` is the dipole correlation with unit
        transition dipole per site; ``normalized(0) = 1``.
    """
    N_sites = A.shape[1] if N_sites is None else N_sites
    vac = np.exp(-0.5 * np.sum(np.abs(F) ** 2, axis=2))  # (T, M)
    normalized = np.einsum("tnl,tl->t", A, vac)
    return N_sites * normalized, normalized


def absorption_spectrum(series, damping=None, pad=8):
    """Damped one-sided Fourier transform of an autocorrelation.

    ``F(w) = (1/pi) Re int_0^T F(t) exp(-t/damping) exp(i w t) dt``,
    evaluated by zero-padded FFT with trapezoid end weights and normalized
    to unit integral. A signal ``exp(-i w0 t)`` peaks at ``w = w0``.

    Parameters
    ----------
    series : TimeSeries
        Complex autocorrelation on an equidistant grid.
    damping : float, optional
        Decay time of the exponential window; defaults to a fifth of the
        time span.
    pad : int
        Zero-padding factor.

    Returns
    -------
    omega, spectrum : ndarrays sorted by frequency
    """
    t = series.times
    f = np.asarray(series.values, dtype=complex)
    if len(t) < 2:
        raise ConfigurationError("need at least two samples")
    span = t[-1] - t[0]
    if damping is None:
        damping = span / 5
    if not damping > 0:
        raise ConfigurationError("damping time must be positive")
    dt = series.dt
    w = f * np.exp(-(t - t[0]) / damping)
    w[0] *= 0.5
    w[-1] *= 0.5
    L = int(pad) * len(t)
    omega = 2 * np.pi * np.fft.fftfreq(L, dt)
    # sum_n w_n exp(i omega t_n) = exp(i omega t_0) * L * ifft(w)
    spec = (dt / np.pi) * (np.exp(1j * omega * t[0]) * np.fft.ifft(w, L) * L).real
    order = np.argsort(omega)
    omega, spec = omega[order], spec[order]
    return omega, spec / _trapezoid(spec, omega)


def _trapezoid(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def negative_weight(omega, spec):
    """Fraction of the integrated absolute spectrum carried by negative values."""
    neg = _trapezoid(np.clip(-spec, 0, None), omega)
    return neg / _trapezoid(np.abs(spec), omega)


def poisson_weights(lam, n_max):
    """``e^{-lam} lam^n / n!`` for ``n = 0..n_max``."""
    n = np.arange(n_max + 1)
    if lam <= 0:
        return (n == 0).astype(float)
    logfact = np.array([lgamma(k + 1) for k in n])
    return np.exp(n * np.log(lam) - lam - logfact)


def poisson_reference(omega, S, omega0=1.0, width=0.05, n_max=None):
    """Lorentzian-broadened zero-temperature sideband progression.

    ``sum_n e^{-S} S^n/n! L(w + S w0 - n w0)`` with ``L`` of half width
    ``width``, normalized to unit integral on ``omega``.
    """
    omega = np.asarray(omega, dtype=float)
    if n_max is None:
        n_max = int(np.ceil(S + 8 * np.sqrt(S + 1) + 5))
    p = poisson_weights(S, n_max)
    centers = -S * omega0 + omega0 * np.arange(n_max + 1)
    out = np.sum(p[:, None] * width / np.pi / (width**2 + (omega[None, :] - centers[:, None]) ** 2),
                 axis=0)
    return out / _trapezoid(out, omega)


@dataclass
class SidebandAnalysis:
    centers: np.ndarray  # peak positions, leftmost first
    heights: np.ndarray
    areas: np.ndarray  # band areas from the leftmost peak on, unit total
    spacing: float
    lam: float  # fitted Poisson parameter


def find_sidebands(omega, spec, omega0=1.0, rel_height=0.02):
    """Peaks of a vibronic spectrum above ``rel_height`` of the maximum."""
    dw = omega[1] - omega[0]
    idx, _ = find_peaks(spec, height=rel_height * spec.max(), distance=max(1, int(0.5 * omega0 / dw)))
    return omega[idx], spec[idx]


def band_areas(omega, spec, origin, omega0, n_bands):
    """Integrated weight in windows ``origin + n w0 +- w0/2``."""
    areas = np.empty(n_bands)
    for n in range(n_bands):
        c = origin + n * omega0
        sel = (omega >= c - omega0 / 2) & (omega < c + omega0 / 2)
        areas[n] = _trapezoid(spec[sel], omega[sel]) if sel.sum() > 1 else 0.0
    return areas


def fit_poisson(areas):
    """Least-squares Poisson parameter for normalized band areas."""
    areas = np.asarray(areas, dtype=float)
    n_max = len(areas) - 1

    def cost(lam):
        return float(np.sum((areas - poisson_weights(lam, n_max)) ** 2))

    # the cost is flat for large lam, so bracket the minimum on a grid first
    grid = np.linspace(1e-3, max(2.0 * n_max, 1.0), 400)
    best = int(np.argmin([cost(x) for x in grid]))
    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, len(grid) - 1)]
    res = minimize_scalar(cost, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    return float(res.x)


def analyze_sidebands(omega, spec, omega0=1.0, rel_height=0.02):
    centers, heights = find_sidebands(omega, spec, omega0, rel_height)
    if len(centers) == 0:
        raise ConfigurationError("no peaks found in spectrum")
    spacing = float(np.mean(np.diff(centers))) if len(centers) > 1 else np.nan
    n_bands = max(len(centers), int((omega[-1] - centers[0]) / omega0 - 0.5))
    areas = band_areas(omega, spec, centers[0], omega0, n_bands)
    areas = areas / areas.sum()
    return SidebandAnalysis(centers, heights, areas, spacing, fit_poisson(areas))


# ---------------------------------------------------------------------------
# convergence


def error_measure(reference, other):
    """Mean absolute deviation ``(1/N_t) sum_i |P(t_i) - P_ref(t_i)|``."""
    if isinstance(reference, TimeSeries):
        if (not isinstance(other, TimeSeries) or reference.times.shape != other.times.shape
                or not np.allclose(reference.times, other.times, rtol=0, atol=1e-12)):
            raise DimensionError("series live on different time grids")
        reference, other = reference.values, other.values
    reference, other = np.asarray(reference), np.asarray(other)
    if reference.shape != other.shape:
        raise DimensionError(f"shape mismatch {reference.shape} vs {other.shape}")
    return float(np.mean(np.abs(other - reference)))


# ---------------------------------------------------------------------------
# CSV output ('.' decimal, full precision, LF)


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_population_csv(path, times, pz):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["t", "P_z"])
        for t, p in zip(times, pz):
            w.writerow([repr(float(t)), repr(float(p))])


def write_density_csv(path, times, rho):
    """Long format ``(t, n, rho_nn)`` with ``n`` the site label."""
    rho = np.asarray(rho)
    N = rho.shape[1]
    labels = np.arange(-N // 2 + 1, N // 2 + 1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["t", "n", "rho_nn"])
        for t, row in zip(times, rho):
            for m in labels:
                w.writerow([repr(float(t)), int(m), repr(float(row[site_index(N, m)]))])


def write_spectrum_csv(path, omega, spec, poisson):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["omega", "F_omega", "poisson"])
        for row in zip(omega, spec, poisson):
            w.writerow([repr(float(v)) for v in row])


def write_autocorrelation_csv(path, times, raw, normalized):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["t", "re_F", "im_F", "re_F_normalized", "im_F_normalized"])
        for t, a, b in zip(times, raw, normalized):
            w.writerow([repr(float(t)), repr(float(a.real)), repr(float(a.imag)),
                        repr(float(b.real)), repr(float(b.imag))])


def read_csv_columns(path):
    """Columns of a CSV written by this module, as float arrays keyed by header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
    return {name: body[:, i] for i, name in enumerate(header)}
