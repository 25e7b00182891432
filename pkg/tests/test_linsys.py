import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import solve_ivp

from multid2 import linsys, models, oracle
from multid2.ensemble import ConnectivityPartition, EnsembleState, overlap
from multid2.errors import ContractViolation, PartitionError, SingularSystemError

from conftest import random_model, random_state


def naive_blocks(state, model):
    """Element-by-element loops over the block formulas (no regularization)."""
    A, F = state.A, state.F
    N_S, M = A.shape
    N = F.shape[1]
    S = np.array([[overlap(F[l], F[k]) for k in range(M)] for l in range(M)])
    rho = np.array([[sum(np.conj(A[n, l]) * A[n, k] for n in range(N_S)) for k in range(M)]
                    for l in range(M)])
    H = [[model.h_matrix(F[l], F[k]) for k in range(M)] for l in range(M)]
    dH = [[model.h_deriv(F[l], F[k]) for k in range(M)] for l in range(M)]
    B = np.zeros((N_S * M, N * M), complex)
    D = np.zeros((N * M, N * M), complex)
    r = np.zeros(N_S * M, complex)
    s = np.zeros(N * M, complex)
    for n in range(N_S):
        for l in range(M):
            for j in range(N):
                for k in range(M):
                    B[n * M + l, j * M + k] = np.conj(F[l, j]) * A[n, k] * S[l, k]
            r[n * M + l] = sum(S[l, k] * sum(H[l][k][n, m] * A[m, k] for m in range(N_S))
                               for k in range(M))
    for i in range(N):
        for l in range(M):
            for j in range(N):
                for k in range(M):
                    D[i * M + l, j * M + k] = rho[l, k] * S[l, k] * (
                        (i == j) + np.conj(F[l, j]) * F[k, i])
            acc = 0.0
            for k in range(M):
                rho_h = sum(np.conj(A[n, l]) * H[l][k][n, m] * A[m, k]
                            for n in range(N_S) for m in range(N_S))
                tilde = sum(np.conj(A[n, l]) * dH[l][k][i, n, m] * A[m, k]
                            for n in range(N_S) for m in range(N_S))
                acc += S[l, k] * (rho_h * F[k, i] + tilde)
            s[i * M + l] = acc
    return S, B, D, r, s


@pytest.mark.parametrize("N_S", [1, 2])
def test_assembly_matches_naive_loops(rng, N_S):
    worst = 0.0
    for _ in range(25):
        M, N = rng.integers(1, 5, size=2)
        model = random_model(rng, N_S, int(N))
        st = random_state(rng, N_S, int(M), int(N), scale=0.5)
        blk = linsys.assemble(st, model, eps_rho=0.0)
        S, B, D, r, s = naive_blocks(st, model)
        for a, b in [(blk.S, S), (blk.B, B), (blk.D, D), (blk.r, r), (blk.s, s)]:
            worst = max(worst, np.max(np.abs(a - b)))
    assert worst < 1e-13


def test_matrix_hermitian_spin_boson(rng):
    model = models.spin_boson_spec(models.SpinBosonParams(N=2, alpha=0.2))
    st = random_state(rng, 2, 2, 2)
    mat = linsys.assemble(st, model).matrix
    assert np.max(np.abs(mat - mat.conj().T)) < 1e-13 * np.linalg.norm(mat)


def test_regularize_rho_examples():
    assert_allclose(linsys.regularize_rho(np.zeros((1, 1)), 1e-3), [[1e-3]])
    rho = np.diag([1.0, 0.0])
    assert_allclose(linsys.regularize_rho(rho, 1e-8, "identity"), np.diag([1 + 1e-8, 1e-8]))
    assert_allclose(linsys.regularize_rho(rho, 0.0), rho)
    with pytest.raises(ContractViolation):
        linsys.regularize_rho(np.array([[0, 1], [0, 0]]), 1e-8)


def test_regularize_rho_positive(rng):
    X = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
    rho = X @ X.conj().T  # rank 2
    out = linsys.regularize_rho(rho, 1e-6)
    assert_allclose(out, out.conj().T)
    assert np.linalg.eigvalsh(out).min() > 0


def test_fold_trivial_and_merged(rng):
    model = random_model(rng, 1, 1)
    st = random_state(rng, 1, 2, 1)
    blk = linsys.assemble(st, model)
    assert linsys.fold_apoptosis(blk, st.partition) is blk
    part = ConnectivityPartition(np.array([0, 0]), np.vstack([np.zeros(1), st.F[1] - st.F[0]]))
    folded = linsys.fold_apoptosis(blk, part)
    assert folded.D.shape == (1, 1)
    assert_allclose(folded.D[0, 0], blk.D.sum())
    assert_allclose(folded.s, [blk.s.sum()])
    mat = folded.matrix
    assert_allclose(mat, mat.conj().T, atol=1e-13)


def test_fold_rejects_corrupt_partition(rng):
    model = random_model(rng, 1, 1)
    st = random_state(rng, 1, 3, 1)
    blk = linsys.assemble(st, model)
    part = ConnectivityPartition(np.array([1, 2, 2]), np.zeros((3, 1), complex))
    with pytest.raises(PartitionError):
        linsys.fold_apoptosis(blk, part)


def merged_state(rng, N_S=2, M=4, N=3):
    st = random_state(rng, N_S, M, N, scale=0.6)
    rep = np.array([0, 0, 2, 2])[:M]
    offsets = st.F - st.F[rep]
    return EnsembleState(st.A, st.F, ConnectivityPartition(rep, offsets), 0.0)


def test_folded_solution_satisfies_group_equations(rng):
    model = random_model(rng, 2, 3)
    st = merged_state(rng)
    full = linsys.assemble(st, model, eps_rho=0.0)
    ds = linsys.solve(linsys.fold_apoptosis(full, st.partition), st.F, st.partition)
    # rows of one group are copies of the representative
    assert_allclose(ds.Fdot[1], ds.Fdot[0])
    z = np.concatenate([ds.X.ravel(), ds.Fdot.T.ravel()])
    res = 1j * full.matrix @ z - full.rhs
    nx = st.N_S * st.M
    EN = np.kron(np.eye(st.N), st.partition.expansion())
    scale = np.linalg.norm(full.rhs)
    assert np.linalg.norm(res[:nx]) < 1e-11 * scale
    assert np.linalg.norm(EN.T @ res[nx:]) < 1e-11 * scale


def test_backward_error(rng):
    for _ in range(10):
        model = random_model(rng, 2, 2)
        st = random_state(rng, 2, 3, 2, scale=0.8)
        blk = linsys.assemble(st, model)
        ds = linsys.solve(blk, st.F)
        z = np.concatenate([ds.X.ravel(), ds.Fdot.T.ravel()])
        res = 1j * blk.matrix @ z - blk.rhs
        assert np.linalg.norm(res) / np.linalg.norm(blk.rhs) < 1e-12
        assert 0 < ds.rcond <= 1


def test_identity_blocks():
    M, N = 2, 3
    blk = linsys.SystemBlocks(S=np.eye(M), B=np.zeros((M, N * M)), D=np.eye(N * M),
                              rho=np.eye(M), rho_reg=np.eye(M),
                              r=np.arange(M) + 1j, s=np.arange(N * M) - 2j, N_S=1, N=N, M=M)
    ds = linsys.solve(blk)
    assert_allclose(ds.X.ravel(), -1j * blk.r)
    assert_allclose(ds.Fdot.T.ravel(), -1j * blk.s)


@pytest.mark.parametrize("route", ["dense", "schur", "reduced"])
def test_free_oscillator(route):
    w = 0.7
    model = models.ModelSpec([[0.0]], [[0.0]], [w])
    alpha = 0.8 - 0.3j
    st = EnsembleState([[1.0]], [[alpha]])
    ds = linsys.derivatives(st, model, route=route)
    assert_allclose(ds.Fdot, [[-1j * w * alpha]], atol=1e-12)
    assert_allclose(ds.X, [[0.0]], atol=1e-12)
    assert_allclose(ds.Adot, [[0.0]], atol=1e-12)


def test_recover_adot_examples(rng):
    st = random_state(rng, 2, 3, 2)
    X = rng.normal(size=(2, 3)) + 0j
    assert_allclose(linsys.recover_adot(X, st, np.zeros((3, 2))), X)
    F = rng.normal(size=(3, 2))
    Fd = rng.normal(size=(3, 2))
    st = EnsembleState(st.A, F)
    expect = X + st.A * np.sum(F * Fd, axis=1)[None, :]
    assert_allclose(linsys.recover_adot(X, st, Fd), expect)


@pytest.mark.parametrize("merged", [False, True])
def test_routes_agree(rng, merged):
    model = random_model(rng, 2, 3)
    st = merged_state(rng) if merged else random_state(rng, 2, 4, 3, scale=0.6)
    ref = linsys.derivatives(st, model, route="dense")
    for route in ("schur", "reduced", "auto"):
        ds = linsys.derivatives(st, model, route=route)
        scale = max(np.abs(ref.Fdot).max(), np.abs(ref.Adot).max())
        assert np.max(np.abs(ds.Fdot - ref.Fdot)) < 1e-9 * scale
        assert np.max(np.abs(ds.Adot - ref.Adot)) < 1e-9 * scale


@pytest.mark.parametrize("gap", [0.2, 0.12])
def test_reduced_route_near_dependent_ensemble(rng, gap):
    # CS strung along one direction with populations near eps_rho: the
    # eliminated system is badly conditioned and only refinement brings the
    # backward error of the unreduced equations down to roundoff
    N, M = 40, 6
    model = random_model(rng, 2, N)
    base = 0.5 * (rng.normal(size=N) + 1j * rng.normal(size=N))
    d = rng.normal(size=N) + 1j * rng.normal(size=N)
    d *= gap / np.linalg.norm(d)
    F = np.array([base + k * d + 1e-3 * rng.normal(size=N) for k in range(M)])
    A = rng.normal(size=(2, M)) + 1j * rng.normal(size=(2, M))
    A *= np.array([1.0] + [1e-4] * (M - 1))[None, :]
    st = EnsembleState(A / np.linalg.norm(A), F, ConnectivityPartition.trivial(M, N))
    ds = linsys.derivatives(st, model, route="reduced")
    blk = linsys.assemble(st, model)
    z = np.concatenate([ds.X.ravel(), ds.Fdot.T.ravel()])
    assert np.linalg.norm(1j * blk.matrix @ z - blk.rhs) / np.linalg.norm(blk.rhs) < 2e-14
    ref = linsys.derivatives(st, model, route="dense")
    assert np.max(np.abs(ds.Fdot - ref.Fdot)) < 1e-9 * np.abs(ref.Fdot).max()


def test_choose_route():
    st = EnsembleState(np.ones((2, 3)), np.zeros((3, 150)))
    assert linsys.choose_route(st) == "reduced"
    st = EnsembleState(np.ones((20, 30)), np.zeros((30, 20)))
    assert linsys.choose_route(st) == "schur"


def test_singular_system_reports_closest_pair(rng):
    model = random_model(rng, 1, 2)
    F = rng.normal(size=(3, 2)) + 0j
    F[2] = F[0]
    st = EnsembleState(rng.normal(size=(1, 3)) + 0j, F)
    for route in ("dense", "schur"):
        with pytest.raises(SingularSystemError) as info:
            linsys.derivatives(st, model, route=route)
        assert info.value.closest_pair == (0, 2)
        assert info.value.distance == pytest.approx(0.0, abs=1e-12)


def test_regularization_locality(rng):
    model = random_model(rng, 3, 2)
    st = random_state(rng, 3, 2, 2, scale=0.8)
    assert np.linalg.eigvalsh(st.A.conj().T @ st.A).min() > 1e-2
    a = linsys.derivatives(st, model, eps_rho=0.0, mode="none")
    b = linsys.derivatives(st, model, eps_rho=1e-8)
    vec = lambda d: np.concatenate([d.Adot.ravel(), d.Fdot.ravel()])
    assert np.linalg.norm(vec(a) - vec(b)) < 1e-10 * np.linalg.norm(vec(a))


def _flat(A, F):
    return np.concatenate([A.ravel(), F.ravel()])


def test_bargmann_gauge_equivalence(rng):
    model = models.spin_boson_spec(models.SpinBosonParams(N=1, alpha=0.3))
    st = random_state(rng, 2, 2, 1, scale=0.8)
    ds = linsys.derivatives(st, model, eps_rho=0.0, mode="none", route="dense")
    Adot, Fdot = oracle.bargmann_derivatives(st, model)
    assert_allclose(ds.Adot, Adot, atol=1e-10)
    assert_allclose(ds.Fdot, Fdot, atol=1e-10)

    shape_a = st.A.shape

    def f(route):
        def fun(t, y):
            s = EnsembleState(y[:st.A.size].reshape(shape_a), y[st.A.size:].reshape(st.F.shape))
            if route == "bargmann":
                a, fd = oracle.bargmann_derivatives(s, model)
            else:
                d = linsys.derivatives(s, model, eps_rho=0.0, mode="none")
                a, fd = d.Adot, d.Fdot
            return _flat(a, fd)
        return fun

    y0 = _flat(st.A, st.F)
    ends = [solve_ivp(f(r), (0, 0.5), y0, method="DOP853", rtol=1e-11, atol=1e-12).y[:, -1]
            for r in ("normalized", "bargmann")]
    assert_allclose(ends[0], ends[1], atol=1e-8)


def test_variational_residual_orthogonal_to_tangent_space(rng):
    """``i dPsi/dt - H Psi`` is orthogonal to every variation of the ansatz."""
    model = models.spin_boson_spec(models.SpinBosonParams(N=2, alpha=0.3))
    st = random_state(rng, 2, 2, 2, scale=0.4)
    trunc = oracle.FockTruncation(n_max=18, N=2, N_S=2)
    H = oracle.fock_hamiltonian(model, trunc)
    ds = linsys.derivatives(st, model, eps_rho=0.0, mode="none")
    h = 1e-5
    plus, _ = oracle.expand_cs(EnsembleState(st.A + h * ds.Adot, st.F + h * ds.Fdot), trunc)
    minus, _ = oracle.expand_cs(EnsembleState(st.A - h * ds.Adot, st.F - h * ds.Fdot), trunc)
    psi, _ = oracle.expand_cs(st, trunc)
    res = 1j * (plus - minus) / (2 * h) - H @ psi
    tangents = []
    for k in range(st.M):
        for n in range(st.N_S):
            e = np.zeros((st.N_S, st.M), complex)
            e[n, k] = 1
            tangents.append(oracle.expand_cs(EnsembleState(e, st.F), trunc)[0])
        for j in range(st.N):
            # holomorphic derivative with respect to alpha_kj
            dF = np.zeros_like(st.F)
            dF[k, j] = h
            p, _ = oracle.expand_cs(EnsembleState(st.A, st.F + dF), trunc)
            m, _ = oracle.expand_cs(EnsembleState(st.A, st.F - dF), trunc)
            q, _ = oracle.expand_cs(EnsembleState(st.A, st.F + 1j * dF), trunc)
            r, _ = oracle.expand_cs(EnsembleState(st.A, st.F - 1j * dF), trunc)
            tangents.append(0.5 * ((p - m) - 1j * (q - r)) / (2 * h))
    proj = np.array([np.vdot(t, res) for t in tangents])
    assert np.max(np.abs(proj)) < 1e-7 * np.linalg.norm(H @ psi)
