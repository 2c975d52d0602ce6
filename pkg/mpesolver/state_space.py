"""
Discretized simplex and joint state space.

The untagged players are summarized by a *count vector* ``(n_1, ..., n_d)``
with ``n_1 + ... + n_d = N``; the empirical measure is ``counts / N`` and is
only formed on demand. Counts are exact integers so that simplex membership
never drifts.

Count vectors are ordered colexicographically through the stars-and-bars
bijection with ``(d-1)``-subsets of ``{0, ..., N+d-2}``: the vector ``n``
maps to ``c_k = n_1 + ... + n_{k+1} + k`` (``k = 0..d-2``) and its rank is
``sum_k binom(c_k, k+1)`` (combinatorial number system). Ranking and
unranking are O(d) table lookups without any hash map.

States are 0-based everywhere in the library. Only the I/O layer prints
labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from math import comb
from typing import Iterator, Sequence, Tuple

import numpy as np

CountVector = Tuple[int, ...]


def simplex_size(d: int, N: int) -> int:
    """Return ``|Sigma^{d-1}_N| = binom(N+d-1, d-1)``."""
    return comb(N + d - 1, d - 1)


def validate_counts(counts: Sequence[int], d: int, N: int) -> CountVector:
    """Return *counts* as a tuple after checking it lies on the simplex."""
    vec = tuple(int(c) for c in counts)
    if len(vec) != d:
        raise ValueError(f"count vector {vec} must have {d} entries")
    if any(c < 0 for c in vec):
        raise ValueError(f"count vector {vec} has negative entries")
    if sum(vec) != N:
        raise ValueError(f"count vector {vec} must sum to N={N}")
    return vec


def colex_key(counts: Sequence[int]) -> Tuple[int, ...]:
    """Sort key realizing the documented enumeration order."""
    prefix = np.cumsum(np.asarray(counts[:-1], dtype=np.int64))
    combo = prefix + np.arange(len(prefix))
    return tuple(int(c) for c in combo[::-1])


def rank_counts(counts: Sequence[int]) -> int:
    """Rank of a count vector in colexicographic order."""
    running = 0
    rank = 0
    for k, n in enumerate(counts[:-1]):
        running += int(n)
        rank += comb(running + k, k + 1)
    return rank


def unrank_counts(index: int, d: int, N: int) -> CountVector:
    """Inverse of :func:`rank_counts` on ``Sigma^{d-1}_N``."""
    size = simplex_size(d, N)
    if not 0 <= index < size:
        raise ValueError(f"index {index} out of range for simplex of size {size}")
    remaining = int(index)
    combo = [0] * (d - 1)
    upper = N + d - 2
    for k in range(d - 2, -1, -1):
        c = upper
        while comb(c, k + 1) > remaining:
            c -= 1
        combo[k] = c
        remaining -= comb(c, k + 1)
        upper = c - 1
    prefix = [combo[k] - k for k in range(d - 1)]
    counts = [prefix[0]]
    for k in range(1, d - 1):
        counts.append(prefix[k] - prefix[k - 1])
    counts.append(N - prefix[-1])
    return tuple(counts)


def shift(counts: Sequence[int], y: int, z: int) -> CountVector:
    """Move one untagged player from state *z* to state *y*.

    This is ``mu + e_{y,z}`` written on counts. ``y == z`` is the identity,
    even when ``counts[z] == 0``.
    """
    vec = list(int(c) for c in counts)
    if y == z:
        return tuple(vec)
    if vec[z] < 1:
        raise ValueError(f"cannot move a player out of empty state {z} in {tuple(vec)}")
    vec[z] -= 1
    vec[y] += 1
    return tuple(vec)


@dataclass(frozen=True)
class SimplexTable:
    """All count vectors of ``Sigma^{d-1}_N`` in rank order.

    :param d: Number of states, at least 2.
    :param N: Number of untagged players, at least 1.
    """

    d: int
    N: int
    counts: np.ndarray = field(repr=False, compare=False)

    def __len__(self) -> int:
        return int(self.counts.shape[0])

    def __iter__(self) -> Iterator[CountVector]:
        for row in self.counts:
            yield tuple(int(c) for c in row)

    def rank(self, counts: Sequence[int]) -> int:
        vec = validate_counts(counts, self.d, self.N)
        return rank_counts(vec)

    def unrank(self, index: int) -> CountVector:
        if not 0 <= index < len(self):
            raise ValueError(f"index {index} out of range for simplex of size {len(self)}")
        return tuple(int(c) for c in self.counts[index])

    @cached_property
    def _binomials(self) -> np.ndarray:
        top = self.N + self.d
        table = np.zeros((top + 1, self.d + 1), dtype=np.int64)
        for n in range(top + 1):
            for k in range(min(n, self.d) + 1):
                table[n, k] = comb(n, k)
        return table

    def rank_many(self, counts: np.ndarray) -> np.ndarray:
        """Vectorized rank for an ``(K, d)`` integer array of valid count vectors."""
        arr = np.asarray(counts, dtype=np.int64)
        prefix = np.cumsum(arr[:, :-1], axis=1)
        combo = prefix + np.arange(self.d - 1)
        ks = np.arange(1, self.d)
        return self._binomials[combo, ks].sum(axis=1)


def enumerate_simplex(d: int, N: int) -> SimplexTable:
    """Build the table of ``Sigma^{d-1}_N`` in colexicographic order."""
    if d < 2:
        raise ValueError(f"d must be at least 2, got {d}")
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    size = simplex_size(d, N)
    rows = np.empty((size, d), dtype=np.int64)
    # walk the simplex in rank order by unranking once per row
    for index in range(size):
        rows[index] = unrank_counts(index, d, N)
    rows.setflags(write=False)
    return SimplexTable(d=d, N=N, counts=rows)


class JointSpace:
    """The joint state space ``{0..d-1} x Sigma^{d-1}_N`` with neighbour tables.

    ``view_index[x, z, i]`` is the rank of ``mu_i + e_{x,z}``, the simplex
    seen by an untagged player in ``z`` when the tagged player sits in ``x``
    (``-1`` when ``n_z = 0``). ``move_index[z, y, i]`` is the rank of
    ``mu_i + e_{y,z}`` (``-1`` when ``n_z = 0``; ``i`` itself when ``y == z``).
    Instances are immutable after construction.
    """

    def __init__(self, d: int, N: int) -> None:
        self.simplex = enumerate_simplex(d, N)
        self.d = d
        self.N = N
        self.size = len(self.simplex)
        counts = self.simplex.counts
        eye = np.eye(d, dtype=np.int64)
        view = np.full((d, d, self.size), -1, dtype=np.int64)
        move = np.full((d, d, self.size), -1, dtype=np.int64)
        for z in range(d):
            occupied = counts[:, z] >= 1
            rows = np.flatnonzero(occupied)
            for other in range(d):
                moved = counts[rows] + eye[other] - eye[z]
                ranks = self.simplex.rank_many(moved)
                view[other, z, rows] = ranks
                move[z, other, rows] = ranks
        for arr in (view, move):
            arr.setflags(write=False)
        self.view_index = view
        self.move_index = move

    @property
    def n_states(self) -> int:
        return self.d * self.size

    def flat_index(self, x: int, mu_index: int) -> int:
        if not 0 <= x < self.d:
            raise ValueError(f"state {x} out of range for d={self.d}")
        if not 0 <= mu_index < self.size:
            raise ValueError(f"simplex index {mu_index} out of range")
        return x * self.size + mu_index

    def split_index(self, flat: int) -> Tuple[int, int]:
        if not 0 <= flat < self.n_states:
            raise ValueError(f"flat index {flat} out of range")
        return divmod(int(flat), self.size)

    def counts(self, mu_index: int) -> CountVector:
        return self.simplex.unrank(mu_index)

    def occupancy(self, mu_index: int) -> np.ndarray:
        return self.simplex.counts[mu_index]


__all__ = [
    "CountVector",
    "JointSpace",
    "SimplexTable",
    "colex_key",
    "enumerate_simplex",
    "rank_counts",
    "shift",
    "simplex_size",
    "unrank_counts",
    "validate_counts",
]
