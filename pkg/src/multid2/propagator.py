"""Adaptive propagation of the multi-D2 state."""

from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import apoptosis, linsys
from .ensemble import EnsembleState, distance_matrix, norm_squared, overlap_matrix
from .errors import (ConfigurationError, ContractViolation, PropagationAborted,
                     SingularSystemError)

log = logging.getLogger(__name__)

# Dormand-Prince 5(4) with Shampine's quartic dense output
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
PI_BETA = 0.04

SYMMETRY_MODES = ("none", "reflection")


@dataclass
class IntegratorConfig:
    rtol: float = 1e-8
    atol: float = 1e-10
    initial_step: float = 1e-3
    max_step: float = 0.5
    min_step: float = 1e-9
    t_final: float = 50.0
    output_points: int = 501

    def __post_init__(self):
        if not (0 < self.min_step <= self.initial_step <= self.max_step):
            raise ConfigurationError("need 0 < min_step <= initial_step <= max_step")
        if not (self.rtol > 0 and self.atol > 0):
            raise ConfigurationError("tolerances must be positive")
        if self.output_points < 2:
            raise ConfigurationError("need at least two output points")


@dataclass
class SolverOptions:
    eps_rho: float = 1e-8
    reg_mode: str = "exp"
    route: str = "auto"
    symmetry: str = "none"

    def __post_init__(self):
        if self.eps_rho < 0:
            raise ConfigurationError("eps_rho must be non-negative")
        if self.reg_mode not in linsys.REGULARIZATION_MODES:
            raise ConfigurationError(f"unknown regularization mode {self.reg_mode!r}")
        if self.route not in linsys.ROUTES:
            raise ConfigurationError(f"unknown solver route {self.route!r}")
        if self.symmetry not in SYMMETRY_MODES:
            raise ConfigurationError(f"unknown symmetry mode {self.symmetry!r}")


@dataclass
class RunOutput:
    times: np.ndarray
    A: np.ndarray  # (T, N_S, M)
    F: np.ndarray  # (T, M, N)
    n_groups: np.ndarray  # (T,)
    events: list
    final_state: EnsembleState
    stats: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)
    status: str = "completed"
    abort: dict = None

    def state_at(self, i):
        return EnsembleState(self.A[i], self.F[i], None, float(self.times[i]))

    def states(self):
        for i in range(len(self.times)):
            yield self.state_at(i)

    @property
    def norms(self):
        S = _overlaps_batch(self.F)
        rho = np.einsum("tnl,tnk->tlk", self.A.conj(), self.A)
        return np.sum(rho * S, axis=(1, 2)).real


def _overlaps_batch(F):
    sq = np.sum(np.abs(F) ** 2, axis=2)
    G = np.einsum("tlj,tkj->tlk", F.conj(), F)
    return np.exp(G - 0.5 * sq[:, :, None] - 0.5 * sq[:, None, :])


def rhs(state, model, options=None):
    """Time derivatives ``(Adot, Fdot)`` of ``state``.

    With ``options.symmetry == "reflection"`` the derivatives are averaged
    with their mirror image under the model's site/mode reflection. The
    exact flow maps reflection-symmetric states to symmetric derivatives, so
    this only removes the roundoff-seeded asymmetric component, which the
    ill-conditioned motion of weakly populated CS amplifies quickly.
    """
    options = options or SolverOptions()
    ds = linsys.derivatives(state, model, options.eps_rho, options.reg_mode, options.route)
    if options.symmetry == "reflection":
        ds.Adot = 0.5 * (ds.Adot + ds.Adot[model.site_mirror])
        ds.Fdot = 0.5 * (ds.Fdot + ds.Fdot[:, model.mode_mirror])
    return ds


def _observable_snapshot(state, model):
    """System populations and energy, the quantities a merge must not change."""
    S = overlap_matrix(state.F)
    pops = np.einsum("nl,nk,lk->n", state.A.conj(), state.A, S).real
    energy = np.sum(model.energy_matrix(state.A, state.F) * S).real
    return np.append(pops, energy)


def reflection_asymmetry(state, model):
    """Largest deviation of ``(A, F)`` from their mirror image."""
    return max(float(np.max(np.abs(state.A - state.A[model.site_mirror]), initial=0.0)),
               float(np.max(np.abs(state.F - state.F[:, model.mode_mirror]), initial=0.0)))


class _System:
    """Flat complex vector view of the state for the integrator."""

    def __init__(self, model, options, partition, N_S, M, N):
        self.model = model
        self.options = options
        self.partition = partition
        self.shape_a = (N_S, M)
        self.shape_f = (M, N)
        self.na = N_S * M
        self.n_evals = 0
        self.last_rcond = np.nan
        self.last_size = 0

    def pack(self, state):
        return np.concatenate([state.A.ravel(), state.F.ravel()])

    def unpack(self, y, t):
        A = y[: self.na].reshape(self.shape_a)
        F = y[self.na:].reshape(self.shape_f)
        return EnsembleState(A, F, self.partition, t)

    def __call__(self, t, y):
        self.n_evals += 1
        ds = rhs(self.unpack(y, t), self.model, self.options)
        self.last_rcond = ds.rcond
        self.last_size = ds.size
        return np.concatenate([ds.Adot.ravel(), ds.Fdot.ravel()])


def _error_norm(err, y0, y1, rtol, atol):
    e = np.concatenate([err.real, err.imag])
    scale = atol + rtol * np.maximum(np.abs(np.concatenate([y0.real, y0.imag])),
                                     np.abs(np.concatenate([y1.real, y1.imag])))
    return float(np.sqrt(np.mean((e / scale) ** 2)))


def _dopri_step(fun, t, y, f0, h):
    K = np.empty((7, y.size), dtype=complex)
    K[0] = f0
    for s in range(1, 6):
        dy = h * (np.asarray(_A[s]) @ K[:s])
        K[s] = fun(t + _C[s] * h, y + dy)
    y_new = y + h * (_B @ K[:6])
    K[6] = fun(t + h, y_new)
    err = h * (_E @ K)
    return y_new, K, err


def _dense(y_old, K, h, x):
    Q = K.T @ _P
    p = np.cumprod(np.full(4, x))
    return y_old + h * (Q @ p)


def run(state0, model, integ=None, policy=None, options=None, checkpoint=None,
        checkpoint_period=None, diagnostics=None, t_grid0=0.0):
    """Propagate ``state0`` to ``integ.t_final``.

    Parameters
    ----------
    checkpoint : callable, optional
        Called with the current :class:`EnsembleState` every
        ``checkpoint_period`` time units and at the end.
    diagnostics : callable, optional
        Called with one dict per accepted step (step size, system size,
        reciprocal condition number, closest CS distance, group count). The
        same records are kept in ``RunOutput.diagnostics``.

    Raises
    ------
    PropagationAborted
        On step-size underflow or an unrecoverable singular system. The
        partial :class:`RunOutput` is attached as ``.output``.
    """
    integ = integ or IntegratorConfig()
    policy = policy or apoptosis.ApoptosisPolicy()
    options = options or SolverOptions()
    wall0 = _time.perf_counter()

    state = EnsembleState(state0.A.copy(), state0.F.copy(), state0.partition.copy(), state0.t)
    state.enforce_connectivity()
    if options.symmetry == "reflection":
        if model.site_mirror is None or model.mode_mirror is None:
            raise ConfigurationError("reflection symmetry requested for a model without one")
        if reflection_asymmetry(state, model) > 1e-12:
            raise ConfigurationError("initial state is not reflection symmetric")
    N_S, M, N = state.N_S, state.M, state.N
    sysf = _System(model, options, state.partition, N_S, M, N)

    grid = np.linspace(t_grid0, integ.t_final, integ.output_points)
    grid = grid[grid >= state.t - 1e-12 * max(1.0, abs(integ.t_final))]
    out_t, out_a, out_f, out_g = [], [], [], []
    stats = {"n_accepted": 0, "n_rejected": 0, "n_forced": 0, "max_merge_jump": 0.0}
    diag_records = []
    next_out = 0

    def emit(st):
        nonlocal next_out
        out_t.append(st.t)
        out_a.append(st.A.copy())
        out_f.append(st.F.copy())
        out_g.append(st.partition.n_groups)
        next_out += 1

    def build_output(status="completed", abort=None):
        stats["n_evals"] = sysf.n_evals
        stats["wall_time"] = _time.perf_counter() - wall0
        T = len(out_t)
        return RunOutput(
            times=np.asarray(out_t),
            A=np.asarray(out_a).reshape(T, N_S, M),
            F=np.asarray(out_f).reshape(T, M, N),
            n_groups=np.asarray(out_g, dtype=int),
            events=list(state.partition.events),
            final_state=state,
            stats=stats,
            diagnostics=diag_records,
            status=status,
            abort=abort,
        )

    def min_distance(F):
        if M < 2:
            return np.inf
        d = distance_matrix(F)
        rep = state.partition.representative
        d[rep[:, None] == rep[None, :]] = np.inf
        return float(d.min())

    def abort(reason):
        info = {
            "reason": reason,
            "t": float(state.t),
            "h": float(h),
            "min_distance": min_distance(state.F),
            "rcond": float(sysf.last_rcond),
        }
        log.warning("propagation aborted at t=%.6g: %s", state.t, reason)
        out = build_output("aborted", info)
        raise PropagationAborted(f"{reason} at t={state.t:.6g}", output=out, diagnostics=info)

    def apply_merges(pairs, forced=False):
        nonlocal state
        n_before = len(state.partition.events)
        before = _observable_snapshot(state, model)
        state = apoptosis.merge(state, pairs, policy, forced=forced)
        sysf.partition = state.partition
        after = _observable_snapshot(state.replace(F=state.F.copy()).enforce_connectivity(), model)
        stats["max_merge_jump"] = max(stats["max_merge_jump"], float(np.max(np.abs(after - before))))
        for ev in state.partition.events[n_before:]:
            log.info("apoptosis at t=%.6g: %s -> %d%s", ev.t, ev.members, ev.representative,
                     " (forced)" if forced else "")
        if forced:
            stats["n_forced"] += 1

    h = integ.initial_step

    if policy.enabled:
        pairs = apoptosis.detect(state, policy)
        if pairs:
            apply_merges(pairs)

    while next_out < len(grid) and abs(grid[next_out] - state.t) <= 1e-12 * max(1.0, abs(state.t)):
        emit(state)

    y = sysf.pack(state)
    try:
        f0 = sysf(state.t, y)
    except SingularSystemError as exc:
        pair = exc.closest_pair
        if policy.enabled and pair is not None and exc.distance < 2 * policy.epsilon:
            apply_merges([(pair[0], pair[1], exc.distance)], forced=True)
            f0 = sysf(state.t, y)
        else:
            abort(f"singular system ({exc})")

    last_ckpt = state.t
    err_prev = 1.0
    rejected_last = False
    t_end = integ.t_final
    while state.t < t_end - 1e-14 * max(1.0, abs(t_end)):
        h = min(h, integ.max_step, t_end - state.t)
        if h < integ.min_step and t_end - state.t > integ.min_step:
            pair, d_now = linsys.closest_pair(state.F, state.partition)
            if policy.enabled and pair is not None and d_now < 2 * policy.epsilon:
                apply_merges([(pair[0], pair[1], d_now)], forced=True)
                try:
                    f0 = sysf(state.t, y)
                except SingularSystemError as exc:
                    abort(f"singular system after forced apoptosis ({exc})")
                h = integ.initial_step
                continue
            abort(f"step size underflow (h={h:.3e} < min_step={integ.min_step:.3e})")
        t = state.t
        try:
            y_new, K, err_vec = _dopri_step(sysf, t, y, f0, h)
            err = _error_norm(err_vec, y, y_new, integ.rtol, integ.atol)
            if not np.isfinite(err):
                raise FloatingPointError
        except SingularSystemError as exc:
            stats["n_rejected"] += 1
            merged = False
            if policy.enabled:
                pairs = apoptosis.detect(state, policy)
                pair = exc.closest_pair
                if pair is not None:
                    d_now = float(np.linalg.norm(state.F[pair[0]] - state.F[pair[1]]))
                    rep = state.partition.representative
                    if d_now < 2 * policy.epsilon and rep[pair[0]] != rep[pair[1]]:
                        key = (int(min(rep[pair[0]], rep[pair[1]])), int(max(rep[pair[0]], rep[pair[1]])))
                        if key not in {(a, b) for a, b, _ in pairs}:
                            pairs.append((key[0], key[1], d_now))
                if pairs:
                    apply_merges(pairs, forced=True)
                    try:
                        f0 = sysf(state.t, y)
                    except SingularSystemError as exc2:
                        abort(f"singular system after forced apoptosis ({exc2})")
                    merged = True
            if not merged:
                h *= 0.5
            rejected_last = True
            continue
        except (FloatingPointError, ContractViolation):
            # non-finite trial stage
            stats["n_rejected"] += 1
            h *= MIN_FACTOR
            rejected_last = True
            continue

        if err > 1.0:
            stats["n_rejected"] += 1
            h *= max(MIN_FACTOR, SAFETY * err ** -0.2)
            rejected_last = True
            continue

        # accepted
        stats["n_accepted"] += 1
        t_new = t + h
        y_old = y
        while next_out < len(grid) and grid[next_out] <= t_new + 1e-12 * max(1.0, abs(t_new)):
            x = (grid[next_out] - t) / h
            yo = y_new if abs(x - 1.0) < 1e-12 else _dense(y_old, K, h, min(x, 1.0))
            st = sysf.unpack(yo, float(grid[next_out]))
            st = st.replace(A=st.A.copy(), F=st.F.copy())
            st.enforce_connectivity()
            emit(st)
        state = sysf.unpack(y_new, t_new)
        state = state.replace(A=state.A.copy(), F=state.F.copy())
        state.enforce_connectivity()
        y = sysf.pack(state)
        f0 = K[6]

        if policy.enabled:
            pairs = apoptosis.detect(state, policy)
            if pairs:
                apply_merges(pairs)
                try:
                    f0 = sysf(state.t, y)
                except SingularSystemError as exc:
                    abort(f"singular system after apoptosis ({exc})")

        rec = {"t": state.t, "h": h, "size": sysf.last_size, "rcond": sysf.last_rcond,
               "min_distance": min_distance(state.F), "n_groups": state.partition.n_groups}
        diag_records.append(rec)
        if diagnostics is not None:
            diagnostics(rec)

        if checkpoint is not None and checkpoint_period and state.t - last_ckpt >= checkpoint_period:
            checkpoint(state)
            last_ckpt = state.t

        err = max(err, 1e-10)
        factor = SAFETY * err ** -(0.2 - 0.75 * PI_BETA) * err_prev**PI_BETA
        factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
        if rejected_last:
            factor = min(factor, 1.0)
        h *= factor
        err_prev = err
        rejected_last = False

    while next_out < len(grid):
        emit(state)
    if checkpoint is not None:
        checkpoint(state)
    return build_output()
