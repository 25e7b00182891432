"""System-bath Hamiltonians in normally ordered coherent-state form.

Both supported models share one structure: an ``N_S``-level system with
Hamiltonian ``h_sys`` whose basis states couple linearly and diagonally to
``N`` harmonic modes,

    H = h_sys + sum_n |n><n| sum_j (kappa[n, j] a_j + conj(kappa[n, j]) a_j^+)
        + sum_j omega_j a_j^+ a_j .

Matrix elements between multi-mode coherent states follow by replacing
``a_j -> alpha_kj`` (ket) and ``a_j^+ -> conj(alpha_lj)`` (bra).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, EvaluationError

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Z_DIAG = np.array([1.0, -1.0])


class ModelSpec:
    """Linear-coupling system-bath Hamiltonian.

    Parameters
    ----------
    h_sys : (N_S, N_S) complex array
        Hermitian system Hamiltonian.
    kappa : (N_S, N) complex array
        Coupling of system state ``n`` to the annihilator of mode ``j``.
    omega : (N,) real array
        Mode frequencies, all positive.
    kind : str
        ``"spin_boson"`` or ``"holstein"``; used for observables and presets.
    initial_amplitude : (N_S,) complex array
        System amplitude of the physical initial state.
    initial_displacement : (N,) complex array
        Bath displacement of the physical initial state.
    site_mirror, mode_mirror : int arrays, optional
        Permutations implementing a reflection symmetry of the model. When
        given, unpopulated basis states are placed symmetrically.
    """

    def __init__(self, h_sys, kappa, omega, kind="generic", initial_amplitude=None,
                 initial_displacement=None, site_mirror=None, mode_mirror=None,
                 params=None):
        self.h_sys = np.asarray(h_sys, dtype=complex)
        self.kappa = np.asarray(kappa, dtype=complex)
        self.omega = np.asarray(omega, dtype=float)
        n_s, n = self.kappa.shape
        if self.h_sys.shape != (n_s, n_s):
            raise DimensionError(f"h_sys has shape {self.h_sys.shape}, expected {(n_s, n_s)}")
        if self.omega.shape != (n,):
            raise DimensionError(f"omega has shape {self.omega.shape}, expected ({n},)")
        if not np.all(np.isfinite(self.omega)) or np.any(self.omega <= 0):
            raise ConfigurationError("mode frequencies must be positive and finite")
        if not np.allclose(self.h_sys, self.h_sys.conj().T, atol=1e-14):
            raise ConfigurationError("system Hamiltonian is not Hermitian")
        self.kind = kind
        if initial_amplitude is None:
            initial_amplitude = np.eye(n_s, 1).ravel()
        if initial_displacement is None:
            initial_displacement = np.zeros(n)
        self.initial_amplitude = np.asarray(initial_amplitude, dtype=complex)
        self.initial_displacement = np.asarray(initial_displacement, dtype=complex)
        self.site_mirror = None if site_mirror is None else np.asarray(site_mirror)
        self.mode_mirror = None if mode_mirror is None else np.asarray(mode_mirror)
        self.params = params

    @property
    def N_S(self):
        return self.kappa.shape[0]

    @property
    def N(self):
        return self.kappa.shape[1]

    def __repr__(self):
        return f"ModelSpec(kind={self.kind!r}, N_S={self.N_S}, N={self.N})"

    # -- element-wise evaluators ------------------------------------------------

    def h_matrix(self, alpha_l, alpha_k):
        """``H_ord(conj(alpha_l), alpha_k)`` as an ``(..., N_S, N_S)`` array.

        Leading dimensions of ``alpha_l`` and ``alpha_k`` broadcast.
        """
        alpha_l = np.asarray(alpha_l, dtype=complex)
        alpha_k = np.asarray(alpha_k, dtype=complex)
        bath = np.sum(self.omega * alpha_l.conj() * alpha_k, axis=-1)
        lin = alpha_k @ self.kappa.T + alpha_l.conj() @ self.kappa.conj().T
        diag = bath[..., None] + lin
        out = np.broadcast_to(self.h_sys, diag.shape[:-1] + self.h_sys.shape).copy()
        idx = np.arange(self.N_S)
        out[..., idx, idx] += diag
        return out

    def h_deriv(self, alpha_l, alpha_k):
        """Derivative of ``H_ord`` with respect to ``conj(alpha_li)``.

        Returns an ``(..., N, N_S, N_S)`` array, diagonal in the system index.
        """
        alpha_l = np.asarray(alpha_l, dtype=complex)
        alpha_k = np.asarray(alpha_k, dtype=complex)
        shape = np.broadcast_shapes(alpha_l.shape, alpha_k.shape)
        diag = (self.omega * alpha_k)[..., :, None] + self.kappa.conj().T
        diag = np.broadcast_to(diag, shape + (self.N_S,))
        out = np.zeros(shape + (self.N_S, self.N_S), dtype=complex)
        idx = np.arange(self.N_S)
        out[..., idx, idx] = diag
        return out

    # -- contracted quantities used by the equations of motion ------------------

    def pair_energies(self, F):
        """Diagonal bath energies ``e[n, l, k]`` of ``H_ord`` for all CS pairs."""
        F = np.asarray(F)
        bath = (F.conj() * self.omega) @ F.T
        u = F @ self.kappa.T  # (M, N_S): sum_j kappa_nj alpha_kj
        e = bath[None, :, :] + u.T[:, None, :] + u.T.conj()[:, :, None]
        if not np.all(np.isfinite(e)):
            bad = np.argwhere(~np.isfinite(e))
            raise EvaluationError("non-finite Hamiltonian matrix element",
                                  pairs=[(int(l), int(k)) for _, l, k in bad])
        return e

    def contract(self, A, F, S):
        """Right-hand-side ingredients of the variational equations.

        Returns
        -------
        rho_h : (M, M) array
            ``sum_{n,n'} conj(A_nl) H^{nn'}_lk A_n'k``.
        r : (N_S, M) array
            ``r[n, l] = sum_k S_lk sum_n' H^{nn'}_lk A_n'k``.
        s : (M, N) array
            ``s[l, i] = sum_k S_lk [rho_h_lk alpha_ki + sum A*_nl dH^{nn'}_lki A_n'k]``.
        """
        e = self.pair_energies(F)
        hA = self.h_sys @ A
        # H^{nn'}_{lk} A_{n'k} = (h_sys A)_{nk} + e[n,l,k] A_{nk}
        HA = hA[:, None, :] + e * A[:, None, :]  # (N_S, M_l, M_k)
        r = np.einsum("lk,nlk->nl", S, HA)
        rho_h = np.einsum("nl,nlk->lk", A.conj(), HA)
        rho = A.conj().T @ A
        PS = S * rho
        T = A.conj().T * (S @ A.T)  # T[l, n] = conj(A_nl) sum_k S_lk A_nk
        s = (S * rho_h) @ F + ((PS @ F) * self.omega) + T @ self.kappa.conj()
        return rho_h, r, s

    def energy_matrix(self, A, F):
        """``sum_{nn'} conj(A_nl) H^{nn'}_lk A_n'k`` for all pairs."""
        e = self.pair_energies(F)
        HA = (self.h_sys @ A)[:, None, :] + e * A[:, None, :]
        return np.einsum("nl,nlk->lk", A.conj(), HA)

    # -- inspection -------------------------------------------------------------

    def mode_table(self):
        """Rows of ``(j, omega_j, |coupling_j|)`` for CSV export."""
        if self.params is not None and hasattr(self.params, "lambda_"):
            lam = np.asarray(self.params.lambda_)
        else:
            lam = np.abs(self.kappa).max(axis=0)
        return [(j, float(w), float(c)) for j, (w, c) in enumerate(zip(self.omega, lam))]

    def write_mode_table(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["j", "omega", "lambda"])
            for j, w, c in self.mode_table():
                writer.writerow([j, repr(w), repr(c)])


# ---------------------------------------------------------------------------
# spin-boson model


def subohmic_spectral_density(omega, alpha, s, omega_c=1.0):
    """``J(w) = 2 pi alpha w_c^(1-s) w^s exp(-w / w_c)``."""
    omega = np.asarray(omega, dtype=float)
    return 2 * np.pi * alpha * omega_c ** (1 - s) * omega**s * np.exp(-omega / omega_c)


def discretize_subohmic(alpha, s, omega_c, N):
    """Discretize the sub-Ohmic bath with frequency density ``~exp(-w/w_c)``.

    Mode ``j`` sits at the ``(j - 1/2)/N`` quantile of the density
    ``rho_f(w) = (N/w_c) exp(-w/w_c)`` and carries the coupling
    ``lambda_j^2 = J(w_j) / (pi rho_f(w_j))``.

    Returns
    -------
    omega, lam : (N,) arrays
    """
    if N < 1:
        raise ConfigurationError("need at least one bath mode")
    j = np.arange(1, N + 1)
    omega = -omega_c * np.log1p(-(j - 0.5) / N)
    rho_f = (N / omega_c) * np.exp(-omega / omega_c)
    lam = np.sqrt(subohmic_spectral_density(omega, alpha, s, omega_c) / (np.pi * rho_f))
    return omega, lam


@dataclass
class SpinBosonParams:
    Delta: float = -0.1
    alpha: float = 0.04
    s: float = 0.25
    omega_c: float = 1.0
    N: int = 150
    omega: np.ndarray = field(default=None, repr=False)
    lambda_: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.omega_c > 0:
            raise ConfigurationError("omega_c must be positive")
        if not self.s > 0:
            raise ConfigurationError("spectral exponent s must be positive")
        if self.alpha < 0:
            raise ConfigurationError("Kondo parameter must be non-negative")
        if self.omega is None or self.lambda_ is None:
            self.omega, self.lambda_ = discretize_subohmic(self.alpha, self.s, self.omega_c, self.N)
        self.omega = np.asarray(self.omega, dtype=float)
        self.lambda_ = np.asarray(self.lambda_, dtype=float)
        self.N = len(self.omega)
        if np.any(self.lambda_ < 0):
            raise ConfigurationError("couplings must be non-negative")


def spin_boson_spec(p: SpinBosonParams) -> ModelSpec:
    """Symmetric spin-boson model; system basis ``(|+>, |->)`` of sigma_z.

    The bath starts equilibrated to ``|+>``: ``d_j = lambda_j / (2 omega_j)``.
    """
    kappa = -0.5 * SIGMA_Z_DIAG[:, None] * p.lambda_[None, :]
    return ModelSpec(
        h_sys=0.5 * p.Delta * SIGMA_X,
        kappa=kappa,
        omega=p.omega,
        kind="spin_boson",
        initial_amplitude=np.array([1.0, 0.0]),
        initial_displacement=p.lambda_ / (2 * p.omega),
        params=p,
    )


# ---------------------------------------------------------------------------
# Holstein molecular crystal


def holstein_sites(N):
    """Site labels and phonon momenta ``q_n = 2 pi n / N``, ``n = -N/2+1..N/2``."""
    if N < 2 or N % 2:
        raise ConfigurationError(f"Holstein model needs an even number of sites, got N={N}")
    n = np.arange(-N // 2 + 1, N // 2 + 1)
    return n, 2 * np.pi * n / N


def holstein_frequencies(q, omega0, W):
    """Linear dispersion band ``w(q) = w0 + W (2|q|/pi - 1)``."""
    return omega0 + W * (2 * np.abs(q) / np.pi - 1)


def holstein_spectral_density(omega, S_HR, omega0, W):
    """``J(w) = (2S / pi W^2) w^2 sqrt(W^2 - (w - w0)^2)``, zero outside the band."""
    omega = np.asarray(omega, dtype=float)
    arg = np.clip(W**2 - (omega - omega0) ** 2, 0.0, None)
    return 2 * S_HR / (np.pi * W**2) * omega**2 * np.sqrt(arg)


def discretize_holstein_sd(S_HR, omega0, W, omega):
    """Couplings ``lambda_n`` with ``J(w) ~ sum_n lambda_n^2 w_n^2 delta(w - w_n)``.

    Every mode carries the same frequency measure ``2W / (N - 1)``, the
    interior trapezoid weight of an ``N``-point rule across the band.  The
    ``+q``/``-q`` pairs share a frequency and so together carry twice that.
    """
    omega = np.asarray(omega, dtype=float)
    tol = 1e-12 * max(1.0, abs(omega0) + W)
    if np.any(omega < omega0 - W - tol) or np.any(omega > omega0 + W + tol):
        raise ConfigurationError("mode frequency outside the phonon band")
    n = omega.size
    d_omega = 2.0 * W / (n - 1) if n > 1 else 2.0 * W
    return np.sqrt(holstein_spectral_density(omega, S_HR, omega0, W) * d_omega) / omega


@dataclass
class HolsteinParams:
    N: int = 10
    J_hop: float = 0.2
    omega0: float = 1.0
    W: float = 0.5
    coupling: str = "constant"
    g: float = 0.3
    S_HR: float = 0.3
    normalize_coupling: bool = True
    q: np.ndarray = field(default=None, repr=False)
    omega: np.ndarray = field(default=None, repr=False)
    lambda_: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.sites, self.q = holstein_sites(self.N)
        if not self.W < self.omega0:
            raise ConfigurationError("bandwidth W must be smaller than omega0")
        self.omega = holstein_frequencies(self.q, self.omega0, self.W)
        if self.coupling == "constant":
            g = self.g / np.sqrt(self.N) if self.normalize_coupling else self.g
            self.lambda_ = np.full(self.N, g, dtype=float)
        elif self.coupling == "spectral":
            self.lambda_ = discretize_holstein_sd(self.S_HR, self.omega0, self.W, self.omega)
        else:
            raise ConfigurationError(f"unknown Holstein coupling {self.coupling!r}")

    @property
    def huang_rhys(self):
        """``S = sum_n lambda_n^2 omega_n / omega0``."""
        return float(np.sum(self.lambda_**2 * self.omega) / self.omega0)


def holstein_spec(p: HolsteinParams) -> ModelSpec:
    """Single-exciton sector of the periodic Holstein chain.

    System index ``i`` labels site ``m = i - N/2 + 1``; the exciton starts on
    site ``m = 0`` with all phonons in their ground state.
    """
    N = p.N
    m = p.sites
    h = np.zeros((N, N), dtype=complex)
    idx = np.arange(N)
    np.add.at(h, (idx, (idx + 1) % N), -p.J_hop)
    np.add.at(h, ((idx + 1) % N, idx), -p.J_hop)
    kappa = (p.lambda_ * p.omega)[None, :] * np.exp(1j * np.outer(m, p.q))
    # reflection m -> -m (periodic), equivalently q -> -q
    mirror = (-m + N // 2 - 1) % N
    amp = np.zeros(N, dtype=complex)
    amp[N // 2 - 1] = 1.0
    return ModelSpec(
        h_sys=h,
        kappa=kappa,
        omega=p.omega,
        kind="holstein",
        initial_amplitude=amp,
        initial_displacement=np.zeros(N),
        site_mirror=mirror,
        mode_mirror=mirror,
        params=p,
    )


def site_index(N, m):
    """Array index of Holstein site label ``m``."""
    return (m + N // 2 - 1) % N
