"""Multi-D2 wavefunction state and coherent-state geometry.

The wavefunction is ``|Psi> = sum_k (sum_n A[n, k] |n>) |F[k]>`` with
normalized multi-mode coherent states ``|F[k]>``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ContractViolation, DimensionError, PartitionError

CHECKPOINT_VERSION = 1


def overlap(alpha_l, alpha_k):
    """Overlap ``<alpha_l|alpha_k>`` of two normalized multi-mode coherent states."""
    alpha_l = np.asarray(alpha_l, dtype=complex)
    alpha_k = np.asarray(alpha_k, dtype=complex)
    if alpha_l.shape[-1:] != alpha_k.shape[-1:]:
        raise DimensionError(f"mode count mismatch: {alpha_l.shape} vs {alpha_k.shape}")
    expo = (-0.5 * np.sum(np.abs(alpha_l) ** 2, axis=-1)
            - 0.5 * np.sum(np.abs(alpha_k) ** 2, axis=-1)
            + np.sum(alpha_l.conj() * alpha_k, axis=-1))
    return np.exp(expo)


def distance(alpha_l, alpha_k):
    """Euclidean distance on ``C^N``."""
    alpha_l = np.asarray(alpha_l, dtype=complex)
    alpha_k = np.asarray(alpha_k, dtype=complex)
    if alpha_l.shape[-1:] != alpha_k.shape[-1:]:
        raise DimensionError(f"mode count mismatch: {alpha_l.shape} vs {alpha_k.shape}")
    return np.sqrt(np.sum(np.abs(alpha_l - alpha_k) ** 2, axis=-1))


def overlap_matrix(F):
    """Hermitian ``S[l, k] = <F[l]|F[k]>``."""
    F = np.asarray(F)
    sq = np.sum(np.abs(F) ** 2, axis=1)
    G = F.conj() @ F.T
    expo = G - 0.5 * sq[:, None] - 0.5 * sq[None, :]
    S = np.exp(expo)
    # exact Hermiticity; the diagonal is 1 up to round-off of |a|^2 - |a|^2
    S = 0.5 * (S + S.conj().T)
    np.fill_diagonal(S, 1.0)
    return S


def distance_matrix(F):
    F = np.asarray(F)
    diff = F[:, None, :] - F[None, :, :]
    return np.sqrt(np.sum(diff.real**2 + diff.imag**2, axis=-1))


@dataclass
class MergeEvent:
    t: float
    members: list
    representative: int
    pairs: list  # [(k, l, distance)]
    forced: bool = False

    def to_dict(self):
        return {
            "t": self.t,
            "members": [int(m) for m in self.members],
            "representative": int(self.representative),
            "pairs": [[int(a), int(b), float(d)] for a, b, d in self.pairs],
            "forced": self.forced,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(t=float(d["t"]), members=list(d["members"]),
                   representative=int(d["representative"]),
                   pairs=[(int(a), int(b), float(c)) for a, b, c in d["pairs"]],
                   forced=bool(d.get("forced", False)))


@dataclass
class ConnectivityPartition:
    """Groups of coherent states that move rigidly together.

    ``representative[l]`` is the index whose displacement carries the free
    parameters of ``l``'s group, and ``offsets[l]`` the frozen vector
    ``F[l] - F[representative[l]]`` (zero for representatives).
    """

    representative: np.ndarray
    offsets: np.ndarray
    events: list = field(default_factory=list)

    @classmethod
    def trivial(cls, M, N):
        return cls(np.arange(M), np.zeros((M, N), dtype=complex), [])

    @property
    def M(self):
        return len(self.representative)

    @property
    def free(self):
        """Sorted indices of group representatives."""
        return np.flatnonzero(self.representative == np.arange(self.M))

    @property
    def n_groups(self):
        return len(self.free)

    @property
    def groups(self):
        """``[(rep, [(member, offset), ...]), ...]`` with members excluding ``rep``."""
        out = []
        for k in self.free:
            members = [(int(l), self.offsets[l]) for l in np.flatnonzero(self.representative == k)
                       if l != k]
            out.append((int(k), members))
        return out

    def expansion(self):
        """``(M, G)`` 0/1 matrix mapping group parameters to all CS."""
        free = self.free
        col = {int(k): i for i, k in enumerate(free)}
        E = np.zeros((self.M, len(free)))
        for l, k in enumerate(self.representative):
            E[l, col[int(k)]] = 1.0
        return E

    def validate(self):
        rep = self.representative
        M = len(rep)
        if rep.shape != (M,) or np.any(rep < 0) or np.any(rep >= M):
            raise PartitionError("representative indices out of range")
        if np.any(rep[rep] != rep):
            raise PartitionError("a representative does not belong to its own group")
        if np.any(self.offsets[rep == np.arange(M)] != 0):
            raise PartitionError("representatives must carry zero offset")

    def copy(self):
        return ConnectivityPartition(self.representative.copy(), self.offsets.copy(),
                                     list(self.events))


@dataclass
class EnsembleState:
    """Coefficients ``A (N_S, M)``, displacements ``F (M, N)``, partition, time."""

    A: np.ndarray
    F: np.ndarray
    partition: ConnectivityPartition = None
    t: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=complex)
        self.F = np.asarray(self.F, dtype=complex)
        if self.A.ndim != 2 or self.F.ndim != 2:
            raise DimensionError("A and F must be matrices")
        if self.A.shape[1] != self.F.shape[0]:
            raise DimensionError(f"A has {self.A.shape[1]} columns but F has {self.F.shape[0]} rows")
        if min(self.A.shape + self.F.shape) < 1:
            raise DimensionError("M, N and N_S must all be at least 1")
        if not self.is_finite():
            raise ContractViolation("state contains non-finite entries")
        if self.partition is None:
            self.partition = ConnectivityPartition.trivial(self.M, self.N)

    @property
    def N_S(self):
        return self.A.shape[0]

    @property
    def M(self):
        return self.A.shape[1]

    @property
    def N(self):
        return self.F.shape[1]

    def replace(self, **changes):
        return replace(self, **changes)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.F)))

    def enforce_connectivity(self):
        """Rebuild member rows of ``F`` from their representative plus offset."""
        rep = self.partition.representative
        members = rep != np.arange(self.M)
        if np.any(members):
            F = self.F.copy()
            F[members] = F[rep[members]] + self.partition.offsets[members]
            self.F = F
        return self

    def overlaps(self):
        return overlap_matrix(self.F)

    def rho(self):
        """Single-particle density matrix ``rho[l, k] = sum_n conj(A_nl) A_nk``."""
        return self.A.conj().T @ self.A

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "t": self.t,
            "A": _encode_complex(self.A),
            "F": _encode_complex(self.F),
            "representative": [int(k) for k in self.partition.representative],
            "offsets": _encode_complex(self.partition.offsets),
            "events": [e.to_dict() for e in self.partition.events],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {d.get('version')!r}")
        part = ConnectivityPartition(
            np.asarray(d["representative"], dtype=int),
            _decode_complex(d["offsets"]),
            [MergeEvent.from_dict(e) for e in d["events"]],
        )
        part.validate()
        return cls(_decode_complex(d["A"]), _decode_complex(d["F"]), part, float(d["t"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _encode_complex(a):
    a = np.asarray(a)
    return {"shape": list(a.shape), "re": a.real.ravel().tolist(), "im": a.imag.ravel().tolist()}


def _decode_complex(d):
    re = np.asarray(d["re"], dtype=float)
    im = np.asarray(d["im"], dtype=float)
    return (re + 1j * im).reshape(d["shape"])


def norm_squared(state: EnsembleState) -> float:
    """``<Psi|Psi>``."""
    S = overlap_matrix(state.F)
    val = np.sum(state.rho() * S)
    return float(val.real)


# ---------------------------------------------------------------------------
# initial state


def spiral_points(count, spacing=1.0):
    """The first ``count`` nonzero points of a square lattice in ``C``.

    Points are ordered by radius, then by angle, and opposite points are
    emitted back to back so any prefix is close to symmetric about 0.
    """
    if count <= 0:
        return np.zeros(0, dtype=complex)
    radius = 1
    while (2 * radius + 1) ** 2 - 1 < count:
        radius += 1
    xs = np.arange(-radius, radius + 1)
    pts = (xs[:, None] + 1j * xs[None, :]).ravel()
    pts = pts[pts != 0]
    ang = np.mod(np.angle(pts), 2 * np.pi)
    # upper half-plane (angle in [0, pi)) first, each followed by its mirror
    half = pts[ang < np.pi - 1e-12]
    half = half[np.lexsort((np.mod(np.angle(half), 2 * np.pi), np.round(np.abs(half), 12)))]
    ordered = np.empty(2 * len(half), dtype=complex)
    ordered[0::2] = half
    ordered[1::2] = -half
    return spacing * ordered[:count]


def _offset_directions(model, count):
    """Unit vectors in ``C^N`` along which unpopulated CS are placed."""
    N = model.N
    mirror = model.mode_mirror
    dirs = []
    if mirror is None:
        for j in range(min(count, N)):
            v = np.zeros(N, dtype=complex)
            v[j] = 1.0
            dirs.append(v)
        return dirs
    # symmetric combinations e_j + e_mirror(j), ordered by mode index from
    # the self-mirrored centre outward
    centre = int(np.flatnonzero(mirror == np.arange(N))[0])
    seen = set()
    order = sorted(range(N), key=lambda j: (abs(j - centre), j))
    for j in order:
        if j in seen:
            continue
        seen.update({j, int(mirror[j])})
        v = np.zeros(N, dtype=complex)
        v[j] += 1.0
        v[mirror[j]] += 1.0
        dirs.append(v / np.linalg.norm(v))
        if len(dirs) == count:
            break
    return dirs


def build_initial_state(model, M, noise=1e-6, grid_spacing=1.0, seed=0, epsilon=0.05):
    """Physical initial condition plus ``M - 1`` weakly populated coherent states.

    CS 0 carries the model's initial system amplitude and bath displacement.
    The others sit at the same displacement shifted by square-lattice points
    (spiral order) embedded along the first ``ceil(log2 M)`` mode directions,
    symmetrized when the model has a reflection symmetry. Their coefficients
    have modulus ``noise`` and seeded random phases; the state is then
    renormalized.
    """
    if M < 1:
        raise ConfigurationError("multiplicity M must be at least 1")
    N, N_S = model.N, model.N_S
    A = np.zeros((N_S, M), dtype=complex)
    F = np.zeros((M, N), dtype=complex)
    A[:, 0] = model.initial_amplitude
    F[:] = model.initial_displacement
    if M > 1:
        n_dir = max(1, math.ceil(math.log2(M)))
        dirs = _offset_directions(model, n_dir)
        n_dir = len(dirs)
        per_dir = math.ceil((M - 1) / n_dir)
        pts = spiral_points(per_dir, grid_spacing)
        for k in range(1, M):
            d, p = (k - 1) % n_dir, (k - 1) // n_dir
            F[k] += pts[p] * dirs[d]
        rng = np.random.default_rng(seed)
        phases = rng.uniform(0, 2 * np.pi, size=(N_S, M - 1))
        if model.site_mirror is not None:
            mirror = model.site_mirror
            phases = np.where(np.arange(N_S)[:, None] <= mirror[:, None], phases, phases[mirror])
        A[:, 1:] = noise * np.exp(1j * phases)
        dist = distance_matrix(F)
        iu = np.triu_indices(M, 1)
        if np.min(dist[iu]) <= epsilon:
            raise ConfigurationError(
                f"grid spacing {grid_spacing} cannot host {M} CS farther apart than {epsilon}")
    state = EnsembleState(A, F, ConnectivityPartition.trivial(M, N), 0.0)
    state.A = state.A / math.sqrt(norm_squared(state))
    return state
