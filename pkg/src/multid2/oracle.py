"""Brute-force reference dynamics in a truncated Fock basis.

Only for small instances (a few modes); used to check the variational
propagation and the coherent-state algebra independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .errors import ConfigurationError

DEFAULT_MEMORY_CAP = 200_000  # basis states


@dataclass
class FockTruncation:
    n_max: int
    N: int
    N_S: int
    memory_cap: int = DEFAULT_MEMORY_CAP

    def __post_init__(self):
        if self.dim > self.memory_cap:
            raise ConfigurationError(
                f"truncated basis of {self.dim} states exceeds the cap of {self.memory_cap}")

    @property
    def dim(self):
        return self.N_S * (self.n_max + 1) ** self.N


def cs_fock_coefficients(alpha, n_max):
    """``exp(-|a|^2/2) a^n / sqrt(n!)`` for ``n = 0..n_max``."""
    n = np.arange(n_max + 1)
    logfact = np.array([0.5 * lgamma(k + 1) for k in n])
    if alpha == 0:
        out = np.zeros(n_max + 1, dtype=complex)
        out[0] = 1.0
        return out
    mag = np.exp(n * np.log(abs(alpha)) - logfact - 0.5 * abs(alpha) ** 2)
    return mag * np.exp(1j * n * np.angle(alpha))


def _product(vectors):
    out = np.ones(1, dtype=complex)
    for v in vectors:
        out = np.kron(out, v)
    return out


def expand_cs(state, trunc):
    """Fock-space vector of a multi-D2 state.

    Returns ``(psi, deficit)`` where ``deficit`` is the largest norm lost by
    truncating any single coherent state.
    """
    N_S, M = state.A.shape
    psi = np.zeros(trunc.dim, dtype=complex)
    deficit = 0.0
    for k in range(M):
        modes = [cs_fock_coefficients(a, trunc.n_max) for a in state.F[k]]
        bath = _product(modes)
        deficit = max(deficit, 1.0 - float(np.vdot(bath, bath).real))
        psi += np.kron(state.A[:, k], bath)
    return psi, deficit


def fock_hamiltonian(model, trunc):
    """Sparse Hamiltonian of ``model`` in the truncated product basis."""
    n = trunc.n_max + 1
    a = sp.diags(np.sqrt(np.arange(1, n)), 1, format="csr", dtype=complex)
    eye_mode = sp.identity(n, format="csr", dtype=complex)

    def on_mode(op, j):
        ops = [eye_mode] * trunc.N
        ops[j] = op
        out = sp.identity(1, format="csr", dtype=complex)
        for o in ops:
            out = sp.kron(out, o, format="csr")
        return out

    dim_b = n ** trunc.N
    eye_b = sp.identity(dim_b, format="csr", dtype=complex)
    H = sp.kron(sp.csr_matrix(model.h_sys), eye_b, format="csr")
    bath = sp.csr_matrix((dim_b, dim_b), dtype=complex)
    ann = [on_mode(a, j) for j in range(trunc.N)]
    for j in range(trunc.N):
        bath = bath + model.omega[j] * (ann[j].getH() @ ann[j])
    H = H + sp.kron(sp.identity(trunc.N_S, format="csr"), bath, format="csr")
    for s in range(trunc.N_S):
        proj = sp.csr_matrix(([1.0], ([s], [s])), shape=(trunc.N_S, trunc.N_S))
        coup = sp.csr_matrix((dim_b, dim_b), dtype=complex)
        for j in range(trunc.N):
            k = model.kappa[s, j]
            coup = coup + k * ann[j] + np.conj(k) * ann[j].getH()
        H = H + sp.kron(proj, coup, format="csr")
    return H.tocsr()


def propagate_exact(psi, model, trunc, times):
    """``exp(-i H t) psi`` on an equidistant grid ``times`` (starting at 0 or later)."""
    times = np.asarray(times, dtype=float)
    H = fock_hamiltonian(model, trunc)
    if len(times) == 1:
        return expm_multiply(-1j * H * times[0], psi)[None, :]
    step = np.diff(times)
    if not np.allclose(step, step[0], rtol=1e-9, atol=1e-12):
        raise ConfigurationError("oracle propagation needs an equidistant time grid")
    return expm_multiply(-1j * H, psi, start=times[0], stop=times[-1], num=len(times),
                         endpoint=True)


def system_populations(psi_t, trunc):
    """``<n|rho_S|n>`` for each row of ``psi_t``."""
    psi_t = np.atleast_2d(psi_t).reshape(len(psi_t), trunc.N_S, -1)
    return np.sum(np.abs(psi_t) ** 2, axis=2)


def expectation(psi, H):
    return float(np.vdot(psi, H @ psi).real)


def bargmann_derivatives(state, model):
    """Time derivatives from the variational equations in unnormalized CS.

    Works with coefficients ``B_k = A_k exp(-|F_k|^2 / 2)`` and Bargmann
    states ``exp(F_k . a^+)|0>``, assembling and solving the linear system
    element by element without auxiliary variables or regularization.
    Returns ``(Adot, Fdot)`` transformed back to normalized CS.
    """
    A, F = state.A, state.F
    N_S, M = A.shape
    N = F.shape[1]
    sq = np.sum(np.abs(F) ** 2, axis=1)
    Bc = A * np.exp(-0.5 * sq)[None, :]
    G = np.exp(F.conj() @ F.T)  # (alpha_l|alpha_k)
    nx, ny = N_S * M, N * M
    mat = np.zeros((nx + ny, nx + ny), dtype=complex)
    rhs = np.zeros(nx + ny, dtype=complex)

    def xi(n, k):
        return n * M + k

    def yi(j, k):
        return nx + j * M + k

    for l in range(M):
        for k in range(M):
            H = model.h_matrix(F[l], F[k])
            dH = model.h_deriv(F[l], F[k])
            g = G[l, k]
            for n in range(N_S):
                # <n, alpha_l| i d/dt - H |Psi> = 0
                mat[xi(n, l), xi(n, k)] += 1j * g
                for j in range(N):
                    mat[xi(n, l), yi(j, k)] += 1j * g * Bc[n, k] * np.conj(F[l, j])
                rhs[xi(n, l)] += g * np.dot(H[n], Bc[:, k])
            for i in range(N):
                # sum_n conj(B_nl) <n, alpha_l| a_i (i d/dt - H) |Psi> = 0
                for n in range(N_S):
                    w = np.conj(Bc[n, l]) * g
                    mat[yi(i, l), xi(n, k)] += 1j * w * F[k, i]
                    for j in range(N):
                        delta = 1.0 if i == j else 0.0
                        mat[yi(i, l), yi(j, k)] += (
                            1j * w * Bc[n, k] * (delta + np.conj(F[l, j]) * F[k, i]))
                    rhs[yi(i, l)] += w * (F[k, i] * np.dot(H[n], Bc[:, k])
                                          + np.dot(dH[i, n], Bc[:, k]))
    z = np.linalg.solve(mat, rhs)
    Bdot = z[:nx].reshape(N_S, M)
    Fdot = z[nx:].reshape(N, M).T
    dsq = np.sum(2 * (F.conj() * Fdot).real, axis=1)
    Adot = (Bdot + 0.5 * Bc * dsq[None, :]) * np.exp(0.5 * sq)[None, :]
    return Adot, Fdot
