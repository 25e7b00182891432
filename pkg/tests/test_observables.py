import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from multid2 import ensemble, models, observables as ob, oracle, propagator
from multid2.ensemble import EnsembleState
from multid2.errors import ConfigurationError, DimensionError


def test_time_series_validation():
    ob.TimeSeries([0, 1, 2], [1, 2, 3])
    with pytest.raises(ConfigurationError):
        ob.TimeSeries([0, 2, 1], [1, 2, 3])
    with pytest.raises(ConfigurationError):
        ob.TimeSeries([0, 1, 3], [1, 2, 3])
    with pytest.raises(DimensionError):
        ob.TimeSeries([0, 1], [1, 2, 3])


def test_initial_values():
    sb = models.spin_boson_spec(models.SpinBosonParams(N=3, alpha=0.0))
    st0 = ensemble.build_initial_state(sb, 1)
    assert ob.population_z(st0) == pytest.approx(1.0)
    assert ob.energy(st0, sb) == pytest.approx(0.0, abs=1e-14)
    hol = models.holstein_spec(models.HolsteinParams(N=6))
    rho = ob.exciton_density(ensemble.build_initial_state(hol, 1))
    expect = np.zeros(6)
    expect[models.site_index(6, 0)] = 1
    assert_allclose(rho, expect, atol=1e-14)


def test_free_oscillator_energy():
    model = models.ModelSpec([[0.0]], [[0.0]], [0.8])
    st = EnsembleState([[1.0]], [[0.6 + 0.3j]])
    assert ob.energy(st, model) == pytest.approx(0.8 * 0.45)


def test_population_bounds(rng):
    A = rng.normal(size=(2, 3)) + 1j * rng.normal(size=(2, 3))
    F = 0.5 * (rng.normal(size=(3, 2)) + 1j * rng.normal(size=(3, 2)))
    st = EnsembleState(A, F)
    st.A = st.A / np.sqrt(ob.norm(st))
    assert -1 <= ob.population_z(st) <= 1
    assert_allclose(ob.site_populations_series(st.A[None], st.F[None])[0].sum(), 1)


@pytest.mark.parametrize("w0", [1.0, -2.5, 0.3])
def test_spectrum_of_pure_phase(w0):
    t = np.linspace(0, 60, 1201)
    omega, spec = ob.absorption_spectrum(ob.TimeSeries(t, np.exp(-1j * w0 * t)), damping=10)
    assert omega[np.argmax(spec)] == pytest.approx(w0, abs=0.01)
    assert ob._trapezoid(spec, omega) == pytest.approx(1.0)
    # Lorentzian of half width 1/damping
    half = spec > spec.max() / 2
    assert omega[half][-1] - omega[half][0] == pytest.approx(0.2, rel=0.1)


def test_spectrum_of_poisson_signal():
    S, w0 = 1.5, 1.0
    t = np.linspace(0, 100, 2001)
    signal = np.exp(S * (np.exp(-1j * w0 * t) - 1) + 1j * S * w0 * t)
    omega, spec = ob.absorption_spectrum(ob.TimeSeries(t, signal), damping=20)
    res = ob.analyze_sidebands(omega, spec)
    assert res.centers[0] == pytest.approx(-S * w0, abs=0.02)
    assert res.spacing == pytest.approx(w0, rel=0.01)
    assert res.lam == pytest.approx(S, rel=0.05)
    assert ob.negative_weight(omega, spec) < 0.02
    ref = ob.poisson_reference(omega, S, width=1 / 20)
    assert np.max(np.abs(spec - ref)) < 0.05 * spec.max()


@given(st.floats(0.1, 6.0))
@settings(max_examples=25, deadline=None)
def test_fit_poisson_recovers_parameter(lam):
    n_max = int(lam + 8 * np.sqrt(lam) + 6)
    p = ob.poisson_weights(lam, n_max)
    assert ob.fit_poisson(p / p.sum()) == pytest.approx(lam, rel=1e-3)


def test_poisson_weights_sum():
    assert_allclose(ob.poisson_weights(2.56, 60).sum(), 1.0)
    assert_allclose(ob.poisson_weights(0.0, 4), [1, 0, 0, 0, 0])


def test_error_measure():
    t = np.linspace(0, 1, 11)
    a = ob.TimeSeries(t, np.sin(t))
    assert ob.error_measure(a, a) == 0
    assert ob.error_measure(a, ob.TimeSeries(t, np.sin(t) + 0.3)) == pytest.approx(0.3)
    with pytest.raises(DimensionError):
        ob.error_measure(a, ob.TimeSeries(t[:5], t[:5]))
    assert ob.error_measure(np.zeros(3), np.array([1.0, -1.0, 1.0])) == 1.0


def holstein_run(J, g, T=4.0, N=4, M=2):
    model = models.holstein_spec(models.HolsteinParams(N=N, J_hop=J, g=g, W=0.3))
    st0 = ensemble.build_initial_state(model, M)
    integ = propagator.IntegratorConfig(t_final=T, output_points=41)
    return model, propagator.run(st0, model, integ)


def test_autocorrelation_trivial_limits():
    model, out = holstein_run(0.0, 0.0)
    raw, norm = ob.autocorrelation(out.A, out.F)
    # the weakly populated CS shift F(0) away from 1 at the noise level
    assert_allclose(norm, 1, atol=1e-6)
    assert np.max(np.abs(norm - norm[0])) < 1e-9
    assert_allclose(raw, 4 * norm)
    # too small an ensemble breaks the bound, which holds for exact dynamics
    model, out = holstein_run(0.2, 0.4, M=6)
    raw, norm = ob.autocorrelation(out.A, out.F)
    assert norm[0] == pytest.approx(1.0, abs=1e-5)
    assert np.all(np.abs(norm) <= 1 + 1e-5)


def test_bright_state_identity_in_fock_space():
    """``<B|exp(-iHt)|B> = sum_n <n, 0|exp(-iHt)|0, 0>`` for the periodic chain."""
    model = models.holstein_spec(models.HolsteinParams(N=4, J_hop=0.2, g=0.4, W=0.3))
    nm = 5
    trunc = oracle.FockTruncation(n_max=nm, N=4, N_S=4)
    times = np.linspace(0, 3, 7)
    vac = np.zeros((nm + 1) ** 4)
    vac[0] = 1
    bright = np.kron(np.ones(4) / 2, vac)
    lhs = oracle.propagate_exact(bright, model, trunc, times) @ bright.conj()
    start = np.kron(model.initial_amplitude, vac)
    rhs = oracle.propagate_exact(start, model, trunc, times) @ np.kron(np.ones(4), vac)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_autocorrelation_against_fock_oracle():
    """Single-site propagation reproduces the bright-state correlation."""
    model = models.holstein_spec(models.HolsteinParams(N=2, J_hop=0.3, g=0.3, W=0.2))
    trunc = oracle.FockTruncation(n_max=12, N=2, N_S=2)
    times = np.linspace(0, 6, 31)
    vac = np.zeros((12 + 1) ** 2)
    vac[0] = 1
    bright = np.kron(np.ones(2) / np.sqrt(2), vac)
    exact = oracle.propagate_exact(bright, model, trunc, times) @ bright.conj()
    st0 = ensemble.build_initial_state(model, 6, grid_spacing=0.7)
    integ = propagator.IntegratorConfig(t_final=6.0, output_points=31)
    out = propagator.run(st0, model, integ)
    raw, norm = ob.autocorrelation(out.A, out.F)
    assert np.max(np.abs(norm - exact)) < 1e-3


def test_csv_round_trip(tmp_path):
    t = np.linspace(0, 1, 3)
    ob.write_population_csv(tmp_path / "p.csv", t, [1.0, 0.5, 0.25])
    cols = ob.read_csv_columns(tmp_path / "p.csv")
    assert list(cols) == ["t", "P_z"]
    assert_allclose(cols["P_z"], [1, 0.5, 0.25])
    rho = np.arange(12, dtype=float).reshape(3, 4)
    ob.write_density_csv(tmp_path / "d.csv", t, rho)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "t,n,rho_nn"
    assert [int(l.split(",")[1]) for l in lines[1:5]] == [-1, 0, 1, 2]
    assert float(lines[2].split(",")[2]) == rho[0, models.site_index(4, 0)]
    ob.write_spectrum_csv(tmp_path / "s.csv", t, t, t)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "omega,F_omega,poisson"
    ob.write_autocorrelation_csv(tmp_path / "a.csv", t, t + 1j, t - 1j)
    cols = ob.read_csv_columns(tmp_path / "a.csv")
    assert_allclose(cols["im_F_normalized"], -1)
