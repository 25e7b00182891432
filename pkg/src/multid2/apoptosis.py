"""Freezing the relative motion of coherent states that come too close."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import MergeEvent, distance_matrix

REPRESENTATIVE_RULES = ("largest-coefficient-norm", "lowest-index")


@dataclass
class ApoptosisPolicy:
    epsilon: float = 0.05
    representative_rule: str = "largest-coefficient-norm"
    enabled: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("apoptosis threshold must be positive")
        if self.representative_rule not in REPRESENTATIVE_RULES:
            raise ValueError(f"unknown representative rule {self.representative_rule!r}")


class DisjointSet:
    """Union-find with path halving."""

    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def components(self):
        out = {}
        for x in range(len(self.parent)):
            out.setdefault(self.find(x), []).append(x)
        return list(out.values())


def detect(state, policy, epsilon=None):
    """Pairs of distinct groups whose CS are closer than ``epsilon``.

    Each pair is reported once, through the group representatives, as
    ``(k, l, d)`` with ``k < l`` and ``d`` the smallest CS distance found
    between the two groups.
    """
    eps = policy.epsilon if epsilon is None else epsilon
    rep = state.partition.representative
    dist = distance_matrix(state.F)
    close = np.argwhere(np.triu(dist < eps, 1))
    found = {}
    for a, b in close:
        ka, kb = int(rep[a]), int(rep[b])
        if ka == kb:
            continue
        key = (min(ka, kb), max(ka, kb))
        d = float(dist[a, b])
        if key not in found or d < found[key]:
            found[key] = d
    return [(k, l, d) for (k, l), d in sorted(found.items())]


def merge(state, pairs, policy, forced=False):
    """Connect the groups joined by ``pairs`` at the current time.

    The wavefunction is unchanged; only the partition is replaced. Offsets of
    all members are re-frozen relative to the new representative.
    """
    if not pairs:
        return state
    part = state.partition
    M = state.M
    ds = DisjointSet(M)
    for l, k in enumerate(part.representative):
        ds.union(l, int(k))
    for k, l, _ in pairs:
        ds.union(int(k), int(l))
    rep = part.representative.copy()
    offsets = part.offsets.copy()
    events = list(part.events)
    col_norm = np.linalg.norm(state.A, axis=0)
    touched = {int(x) for k, l, _ in pairs for x in (k, l)}
    for comp in ds.components():
        if len(comp) < 2 or not touched.intersection(comp):
            continue
        comp = sorted(comp)
        if policy.representative_rule == "largest-coefficient-norm":
            # stable argmax: ties go to the lowest index
            k = comp[int(np.argmax(col_norm[comp]))]
        else:
            k = comp[0]
        for l in comp:
            rep[l] = k
            offsets[l] = state.F[l] - state.F[k] if l != k else 0.0
        comp_pairs = [(int(a), int(b), float(d)) for a, b, d in pairs if a in comp]
        events.append(MergeEvent(t=float(state.t), members=comp, representative=k,
                                 pairs=comp_pairs, forced=forced))
    new_part = type(part)(rep, offsets, events)
    new_part.validate()
    return state.replace(partition=new_part)
