"""Variational linear system for the coefficient and displacement derivatives.

Unknowns are the auxiliary variables ``X[n, k]`` and the displacement
velocities ``Fdot[k, j]``. The Hermitian system reads

    i [[1_{N_S} (x) S, B], [B^+, D]] [x; y] = [r; s]

with ``x`` ordered ``(n, k)`` (system index outer) and ``y`` ordered
``(j, k)`` (mode index outer, CS index inner).

Three solution routes are provided. ``route="dense"`` assembles, folds and
LU-factorizes the full matrix. ``route="schur"`` eliminates ``x`` through
the overlap block and Cholesky-factorizes the ``N*G`` Schur complement.
``route="reduced"`` eliminates the displacement block analytically: with
``W = conj(F) Fdot^T`` the system collapses to ``N_S*M + M^2`` unknowns,
independent of the number of modes, and one step of iterative refinement
against the full equations restores the accuracy lost in the elimination.
All give the same solution;
``route="auto"`` picks the smallest factorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .ensemble import distance_matrix, overlap_matrix
from .errors import ContractViolation, DimensionError, PartitionError, SingularSystemError

REGULARIZATION_MODES = ("exp", "identity", "none")


@dataclass
class SystemBlocks:
    """Assembled (optionally folded) saddle-point system."""

    S: np.ndarray
    B: np.ndarray
    D: np.ndarray
    rho: np.ndarray
    rho_reg: np.ndarray
    r: np.ndarray
    s: np.ndarray
    N_S: int
    N: int
    M: int
    expansion: np.ndarray = None  # (M, G) once folded

    @property
    def matrix(self):
        """Full coefficient matrix (without the factor ``i``)."""
        top = np.hstack([np.kron(np.eye(self.N_S), self.S), self.B])
        bottom = np.hstack([self.B.conj().T, self.D])
        return np.vstack([top, bottom])

    @property
    def rhs(self):
        return np.concatenate([self.r, self.s])

    @property
    def folded(self):
        return self.expansion is not None


@dataclass
class DerivativeSet:
    X: np.ndarray
    Fdot: np.ndarray
    Adot: np.ndarray = None
    rcond: float = np.nan
    size: int = 0


def regularize_rho(rho, eps_rho, mode="exp", tol=1e-10):
    """Regularized single-particle density matrix.

    ``exp`` maps every eigenvalue ``lam -> lam + eps exp(-lam/eps)``;
    ``identity`` adds ``eps`` to the diagonal.
    """
    rho = np.asarray(rho, dtype=complex)
    scale = max(1.0, float(np.max(np.abs(rho))) if rho.size else 1.0)
    if np.max(np.abs(rho - rho.conj().T), initial=0.0) > tol * scale:
        raise ContractViolation("rho is not Hermitian")
    if eps_rho == 0 or mode == "none":
        return rho
    if eps_rho < 0:
        raise ContractViolation("eps_rho must be non-negative")
    if mode == "identity":
        return rho + eps_rho * np.eye(len(rho))
    if mode == "exp":
        lam, U = np.linalg.eigh(0.5 * (rho + rho.conj().T))
        lam = lam + eps_rho * np.exp(-lam / eps_rho)
        out = (U * lam) @ U.conj().T
        return 0.5 * (out + out.conj().T)
    raise ValueError(f"unknown regularization mode {mode!r}")


def assemble(state, model, eps_rho=1e-8, mode="exp", regularize_d=0.0):
    """Dense saddle-point blocks at full size.

    ``regularize_d`` > 0 adds ``delta * 1_N (x) exp(-rho/delta)`` to ``D``
    instead of regularizing ``rho``; kept only for comparison runs.
    """
    A, F = state.A, state.F
    N_S, M = A.shape
    N = F.shape[1]
    if model.N != N or model.N_S != N_S:
        raise DimensionError(f"state ({N_S}, {M}, {N}) does not match {model!r}")
    S = overlap_matrix(F)
    rho = A.conj().T @ A
    rho = 0.5 * (rho + rho.conj().T)
    rho_h, r, s = model.contract(A, F, S)
    if regularize_d > 0:
        rho_reg = rho
    else:
        rho_reg = regularize_rho(rho, eps_rho, mode)
    P = rho_reg * S
    # B[(n, l), (j, k)] = conj(F_lj) A_nk S_lk
    B = np.einsum("lj,nk,lk->nljk", F.conj(), A, S).reshape(N_S * M, N * M)
    # D[(i, l), (j, k)] = P_lk (delta_ij + conj(F_lj) F_ki)
    D = np.einsum("lk,lj,ki->iljk", P, F.conj(), F)
    D = D.reshape(N * M, N * M) + np.kron(np.eye(N), P)
    if regularize_d > 0:
        lam, U = np.linalg.eigh(rho)
        reg = (U * (regularize_d * np.exp(-lam / regularize_d))) @ U.conj().T
        D = D + np.kron(np.eye(N), reg)
    return SystemBlocks(S=S, B=B, D=D, rho=rho, rho_reg=rho_reg,
                        r=r.reshape(-1), s=s.T.reshape(-1), N_S=N_S, N=N, M=M)


def fold_apoptosis(blocks, partition):
    """Constrain connected CS to share their displacement velocities.

    Displacement rows/columns of every group are summed into the group and
    the member rows/columns dropped; coefficient rows stay untouched.
    """
    rep = np.asarray(partition.representative)
    if len(rep) != blocks.M:
        raise PartitionError("partition size does not match the system")
    if np.any(rep[rep] != rep):
        raise PartitionError("a representative does not belong to its own group")
    E = partition.expansion()
    if E.shape[1] == blocks.M:
        return blocks
    EN = np.kron(np.eye(blocks.N), E)
    return SystemBlocks(
        S=blocks.S, B=blocks.B @ EN, D=EN.T @ blocks.D @ EN,
        rho=blocks.rho, rho_reg=blocks.rho_reg,
        r=blocks.r, s=EN.T @ blocks.s,
        N_S=blocks.N_S, N=blocks.N, M=blocks.M, expansion=E,
    )


def _lu_solve(matrix, rhs, closest=None):
    """LU with partial pivoting; returns solution and reciprocal condition."""
    lu, piv, rcond = _lu_factor(matrix, closest)
    x, info = lapack.zgetrs(lu, piv, rhs)
    return x, rcond


def _lu_factor(matrix, closest=None):
    """``(lu, piv, rcond)``; raises on (numerical) singularity."""
    anorm = np.linalg.norm(matrix, 1)
    lu, piv, info = lapack.zgetrf(matrix)
    if info > 0:
        raise SingularSystemError("system matrix is exactly singular", 0.0, *(closest or (None, None)))
    rcond, _ = lapack.zgecon(lu, anorm, norm="1")
    if not np.isfinite(rcond) or rcond < np.finfo(float).eps:
        raise SingularSystemError(f"system matrix is numerically singular (rcond={rcond:.3e})",
                                  float(rcond), *(closest or (None, None)))
    return lu, piv, float(rcond)


def closest_pair(F, partition=None):
    """``((k, l), d)`` for the closest CS pair not already in one group."""
    M = F.shape[0]
    if M < 2:
        return None, None
    dist = distance_matrix(F)
    np.fill_diagonal(dist, np.inf)
    if partition is not None:
        rep = partition.representative
        dist[rep[:, None] == rep[None, :]] = np.inf
    k, l = np.unravel_index(np.argmin(dist), dist.shape)
    if not np.isfinite(dist[k, l]):
        return None, None
    return (int(min(k, l)), int(max(k, l))), float(dist[k, l])


def solve(blocks, F=None, partition=None):
    """Solve ``i M [x; y] = [r; s]`` and unfold ``y`` to all CS."""
    mat = blocks.matrix
    rhs = -1j * blocks.rhs
    closest = closest_pair(F, partition) if F is not None else None
    z, rcond = _lu_solve(mat, rhs, closest)
    N_S, M, N = blocks.N_S, blocks.M, blocks.N
    X = z[: N_S * M].reshape(N_S, M)
    y = z[N_S * M:]
    G = y.size // N
    Yg = y.reshape(N, G)  # mode-major
    if blocks.folded:
        Fdot = (blocks.expansion @ Yg.T)
    else:
        Fdot = Yg.T.copy()
    return DerivativeSet(X=X, Fdot=Fdot, rcond=rcond, size=len(rhs))


def _hpd_solve(matrix, rhs, closest=None):
    """Cholesky solve with condition estimate; LU when not numerically definite."""
    anorm = np.linalg.norm(matrix, 1)
    c, info = lapack.zpotrf(matrix, lower=1, clean=0)
    if info != 0:
        return _lu_solve(matrix, rhs, closest)
    rcond, _ = lapack.zpocon(c, anorm, uplo="L")
    if not np.isfinite(rcond) or rcond < np.finfo(float).eps:
        raise SingularSystemError(f"system matrix is numerically singular (rcond={rcond:.3e})",
                                  float(rcond), *(closest or (None, None)))
    x, info = lapack.zpotrs(c, rhs, lower=1)
    return x, float(rcond)


def solve_schur(state, model, eps_rho=1e-8, mode="exp"):
    """Solve the folded system through the Schur complement of ``1 (x) S``.

    With ``x = (1 (x) S)^{-1} (-i r - B y)`` the displacement unknowns obey
    ``(D - B^+ (1 (x) S)^{-1} B) y = -i s + i B^+ (1 (x) S)^{-1} r``. The
    coupling block factorizes over the system index, so

        [B^+ (1 (x) S)^{-1} B]_{(i,l),(j,k)} = rho_lk [S F_i S^{-1} conj(F_j) S]_lk

    with ``F_i = diag(F[:, i])``; neither ``B`` nor ``D`` is formed. The
    Schur complement is Hermitian positive definite (the full matrix is a
    Gram matrix of tangent vectors), so it is Cholesky-factorized.
    """
    A, F, part = state.A, state.F, state.partition
    N_S, M = A.shape
    N = F.shape[1]
    if model.N != N or model.N_S != N_S:
        raise DimensionError(f"state ({N_S}, {M}, {N}) does not match {model!r}")
    S = overlap_matrix(F)
    rho = A.conj().T @ A
    rho = 0.5 * (rho + rho.conj().T)
    _, r, s = model.contract(A, F, S)
    P = regularize_rho(rho, eps_rho, mode) * S
    closest = closest_pair(F, part)
    try:
        cf = sla.cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise SingularSystemError("overlap matrix is not positive definite", 0.0,
                                  *closest) from None
    Fc = F.conj()
    # U[(i, l), m] = S_lm F_mi ;  V[m, (j, k)] = [S^{-1} conj(F_j) S]_mk
    U = (S[None, :, :] * F.T[:, None, :]).reshape(N * M, M)
    V = sla.cho_solve(cf, (Fc[:, :, None] * S[:, None, :]).reshape(M, N * M),
                      check_finite=False)
    K = -(U @ V).reshape(N, M, N, M) * rho[None, :, None, :]
    K += np.einsum("lk,lj,ki->iljk", P, Fc, F)
    K[np.arange(N), :, np.arange(N), :] += P[None, :, :]
    # right-hand side: -i s + i B^+ (1 (x) S)^{-1} r
    z = sla.cho_solve(cf, r.T, check_finite=False)  # (M, N_S): z[l, n]
    C = A.conj().T @ z.T  # C[l', l] = sum_n conj(A_nl') z_nl
    rhs = -1j * s.T + 1j * ((S * C) @ F).T  # (N, M)
    E = part.expansion()
    G = E.shape[1]
    if G < M:
        KE = K @ E  # (N, M, N, G)
        K = (E.T @ KE.transpose(1, 0, 2, 3).reshape(M, -1)).reshape(G, N, N, G)
        K = K.transpose(1, 0, 2, 3)
        rhs = rhs @ E
    K = K.reshape(N * G, N * G)
    K = 0.5 * (K + K.conj().T)
    y, rcond = _hpd_solve(K, rhs.reshape(-1), closest)
    Fdot = E @ y.reshape(N, G).T
    W = Fc @ Fdot.T
    X = sla.cho_solve(cf, (-1j * r - A @ (S * W).T).T, check_finite=False).T
    return DerivativeSet(X=X, Fdot=Fdot, rcond=rcond, size=N * G)


def recover_adot(X, state, Fdot):
    """``Adot = X + A * sum_j (alpha conj(alpha_dot) + alpha_dot conj(alpha)) / 2``."""
    F = state.F
    corr = np.sum((F * Fdot.conj() + Fdot * F.conj()).real, axis=1) * 0.5
    return X + state.A * corr[None, :]


# ---------------------------------------------------------------------------
# reduced route


def solve_reduced(state, model, eps_rho=1e-8, mode="exp"):
    """Solve the folded system in the ``(X, W)`` variables.

    Eliminating ``y`` through the block ``1_N (x) P`` (``P = rho_reg o S``)
    leaves, with ``Q = E (E^T P E)^{-1} E^T``, ``K = conj(F) F^T`` and
    ``Z = P o W + S o (A^+ X)``::

        X S^T + A (S o W)^T          = -i r
        W + K Z^T Q^T                = -i conj(F) s^T Q^T
        Fdot                         = Q (-i s - Z F)

    The elimination loses accuracy when ``P`` is nearly singular; the
    solution is refined with residuals of the unreduced equations, which
    cost ``O(N M^2)``.
    """
    A, F, part = state.A, state.F, state.partition
    N_S, M = A.shape
    N = F.shape[1]
    if model.N != N or model.N_S != N_S:
        raise DimensionError(f"state ({N_S}, {M}, {N}) does not match {model!r}")
    S = overlap_matrix(F)
    rho = A.conj().T @ A
    rho = 0.5 * (rho + rho.conj().T)
    _, r, s = model.contract(A, F, S)
    P = regularize_rho(rho, eps_rho, mode) * S
    E = part.expansion()
    closest = closest_pair(F, part)
    Pf = E.T @ P @ E
    try:
        cf = sla.cho_factor(Pf, lower=True, check_finite=False)
        Q = E @ sla.cho_solve(cf, E.T, check_finite=False)
    except np.linalg.LinAlgError:
        Qg, _ = _lu_solve(Pf, E.T.astype(complex), closest)
        Q = E @ Qg
    K = F.conj() @ F.T
    nx, nw = N_S * M, M * M
    ar = np.arange(M)
    # X-rows: (n, l)
    m11 = np.kron(np.eye(N_S), S)
    m12 = np.zeros((N_S, M, M, M), dtype=complex)
    m12[:, ar, ar, :] = A[:, None, :] * S[None, :, :]
    # W-rows: (l, k); W-cols: (b, a); X-cols: (n, a)
    m22 = np.einsum("la,kb,ba->lkba", K, Q, P).reshape(nw, nw) + np.eye(nw)
    T = np.einsum("kb,ba,nb->kan", Q, S, A.conj())
    m21 = np.einsum("la,kan->lkna", K, T).reshape(nw, nx)
    mat = np.block([[m11, m12.reshape(nx, nw)], [m21, m22]])
    # the elimination divides by P, whose spectrum reaches eps_rho; row and
    # column scaling keeps the condition estimate meaningful
    row = 1.0 / np.abs(mat).max(axis=1)
    col = 1.0 / np.abs(mat * row[:, None]).max(axis=0)
    lu = _lu_factor(mat * row[:, None] * col[None, :], closest)
    rcond = lu[2]
    AhS = A.conj().T

    def reduced_solve(bx, by):
        rhs = np.concatenate([bx.ravel(), ((F.conj() @ by.T) @ Q.T).ravel()])
        z = lapack.zgetrs(lu[0], lu[1], rhs * row)[0] * col
        X = z[:nx].reshape(N_S, M)
        W = z[nx:].reshape(M, M)
        return X, Q @ (by - (P * W + S * (AhS @ X)) @ F)

    def residual(bx, by, X, Fdot):
        W = F.conj() @ Fdot.T
        Z = P * W + S * (AhS @ X)
        return bx - (X @ S.T + A @ (S * W).T), by - P @ Fdot - Z @ F

    bx, by = -1j * r, -1j * s
    X, Fdot = reduced_solve(bx, by)
    scale = max(np.abs(bx).max(), np.abs(by).max(), np.finfo(float).tiny)
    for _ in range(2):  # refinement against the unreduced equations
        rx, ry = residual(bx, by, X, Fdot)
        if max(np.abs(rx).max(), np.abs(E.T @ ry).max()) < 16 * np.finfo(float).eps * scale:
            break
        dX, dF = reduced_solve(rx, ry)
        X, Fdot = X + dX, Fdot + dF
    return DerivativeSet(X=X, Fdot=Fdot, rcond=rcond, size=nx + nw)


ROUTES = ("auto", "dense", "schur", "reduced")


def choose_route(state):
    """``"reduced"`` when ``N_S*M + M^2`` beats the ``N*G`` Schur complement."""
    N_S, M, N = state.N_S, state.M, state.N
    G = state.partition.n_groups
    return "reduced" if N_S * M + M * M < N * G else "schur"


def derivatives(state, model, eps_rho=1e-8, mode="exp", route="auto"):
    """Full right-hand side: ``Adot`` and ``Fdot`` for the current state."""
    if route == "auto":
        route = choose_route(state)
    if route == "reduced":
        ds = solve_reduced(state, model, eps_rho, mode)
    elif route == "schur":
        ds = solve_schur(state, model, eps_rho, mode)
    elif route == "dense":
        blocks = fold_apoptosis(assemble(state, model, eps_rho, mode), state.partition)
        ds = solve(blocks, state.F, state.partition)
    else:
        raise ValueError(f"unknown solver route {route!r}")
    ds.Adot = recover_adot(ds.X, state, ds.Fdot)
    return ds
