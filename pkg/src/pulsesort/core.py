"""Domain types shared across the package.

A pulse stream is a non-decreasing sequence of arrival times (ToA, in
microseconds), optionally labelled with integer emitter ids.  Successor
structure is represented by an N x (N+1) assignment matrix whose last column
is the terminal vertex: row i carries either a probability distribution
(soft) or a one-hot link (hard) over "the next pulse of the same emitter is
j" for j > i, or "i is the last pulse of its emitter" (terminal).

All types are immutable after construction; the backing numpy arrays are
frozen so instances can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TERMINAL = -1  # symbolic successor index used in link arrays

SOFT_ROW_SUM_TOL = 1e-6


class InfeasibleAssignmentError(ValueError):
    """Raised when a matrix claimed to be a hard assignment is not a valid
    one-successor / at-most-one-predecessor link structure."""


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PulseSequence:
    """Time-ordered ToAs (microseconds) with optional emitter labels."""

    toas: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        toas = _frozen_array(self.toas, np.float64)
        if toas.ndim != 1 or toas.size < 1:
            raise ValueError("empty input")
        if np.any(np.diff(toas) < 0):
            raise ValueError("toas must be non-decreasing")
        object.__setattr__(self, "toas", toas)
        if self.labels is not None:
            labels = _frozen_array(self.labels, np.int64)
            if labels.shape != toas.shape:
                raise ValueError("labels must match toas in length")
            if np.any(labels < 0):
                raise ValueError("labels must be non-negative")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return int(self.toas.size)


@dataclass(frozen=True)
class RtoaSequence:
    """First differences of a ToA sequence; the leading element is 0."""

    rtoas: np.ndarray

    def __post_init__(self):
        rtoas = _frozen_array(self.rtoas, np.float64)
        if rtoas.ndim != 1 or rtoas.size < 1:
            raise ValueError("empty input")
        if rtoas[0] != 0.0 or np.any(rtoas < 0):
            raise ValueError("rtoas must start at 0 and be non-negative")
        object.__setattr__(self, "rtoas", rtoas)

    @property
    def n(self) -> int:
        return int(self.rtoas.size)


@dataclass(frozen=True)
class AssignmentMatrix:
    """N x (N+1) successor matrix; column N is the terminal vertex.

    kind "hard": binary, every row sums to 1, every non-terminal column sums
    to at most 1.  kind "soft": rows sum to 1 within a small tolerance.
    Entries at or below the diagonal (j <= i, non-terminal) are structurally
    zero: links only go forward in time.
    """

    values: np.ndarray
    kind: str = "soft"

    def __post_init__(self):
        values = _frozen_array(self.values, np.float64)
        if values.ndim != 2 or values.shape[1] != values.shape[0] + 1:
            raise ValueError("assignment matrix must be N x (N+1)")
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError("assignment entries must lie in [0, 1]")
        n = values.shape[0]
        lower = np.tril(values[:, :n])
        if np.any(lower != 0):
            raise ValueError("entries at j <= i must be zero (forward links only)")
        if self.kind == "hard":
            if not np.all((values == 0) | (values == 1)):
                raise InfeasibleAssignmentError("hard matrix must be binary")
            if np.any(values.sum(axis=1) != 1):
                raise InfeasibleAssignmentError("every row must have exactly one link")
            if np.any(values[:, :n].sum(axis=0) > 1):
                raise InfeasibleAssignmentError(
                    "infeasible assignment: non-terminal column claimed twice"
                )
        elif self.kind == "soft":
            if np.any(np.abs(values.sum(axis=1) - 1.0) > SOFT_ROW_SUM_TOL):
                raise ValueError("soft rows must sum to 1")
        else:
            raise ValueError(f"unknown kind {self.kind!r}")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def links(self) -> np.ndarray:
        """Successor index per row for a hard matrix; terminal maps to TERMINAL."""
        if self.kind != "hard":
            raise ValueError("links() requires a hard matrix")
        cols = np.argmax(self.values, axis=1)
        return np.where(cols == self.n, TERMINAL, cols).astype(np.int64)


@dataclass(frozen=True)
class ClusterSet:
    """Partition of {0..N-1} into time-ordered chains."""

    chains: tuple = field(default_factory=tuple)

    def __post_init__(self):
        chains = tuple(tuple(int(i) for i in chain) for chain in self.chains)
        seen = set()
        for chain in chains:
            if len(chain) == 0:
                raise ValueError("empty chain")
            if any(b <= a for a, b in zip(chain, chain[1:])):
                raise ValueError("chain indices must be strictly increasing")
            for i in chain:
                if i in seen:
                    raise ValueError(f"index {i} appears in more than one chain")
                seen.add(i)
        if seen and seen != set(range(max(seen) + 1)):
            raise ValueError("chains must cover 0..N-1 exactly")
        object.__setattr__(self, "chains", chains)

    @property
    def n(self) -> int:
        return sum(len(c) for c in self.chains)


def compute_rtoa(seq: PulseSequence) -> RtoaSequence:
    """Relative ToAs: rtoas[0] = 0, rtoas[i] = toas[i] - toas[i-1]."""
    rtoas = np.empty(seq.n)
    rtoas[0] = 0.0
    rtoas[1:] = np.diff(seq.toas)
    return RtoaSequence(rtoas)


def labels_to_assignment(seq: PulseSequence) -> AssignmentMatrix:
    """Hard assignment from ground-truth labels: row i links to the next pulse
    with the same label, or to the terminal column if none follows."""
    if seq.labels is None:
        raise ValueError("sequence has no labels")
    n = seq.n
    values = np.zeros((n, n + 1))
    next_of: dict[int, int] = {}
    for i in range(n - 1, -1, -1):
        lab = int(seq.labels[i])
        values[i, next_of.get(lab, n)] = 1.0
        next_of[lab] = i
    return AssignmentMatrix(values, kind="hard")


def links_to_assignment(links: Sequence[int], n: int) -> AssignmentMatrix:
    """Hard assignment from a successor-index array (TERMINAL for chain ends)."""
    values = np.zeros((n, n + 1))
    for i, j in enumerate(links):
        values[i, n if j == TERMINAL else int(j)] = 1.0
    return AssignmentMatrix(values, kind="hard")


def assignment_to_clusters(a: AssignmentMatrix) -> ClusterSet:
    """Follow successor links from each chain start (row with no incoming
    link) down to its terminal link."""
    if a.kind != "hard":
        raise InfeasibleAssignmentError("expected a hard assignment")
    n = a.n
    succ = a.links()
    has_pred = np.zeros(n, dtype=bool)
    for j in succ:
        if j != TERMINAL:
            if has_pred[j]:
                raise InfeasibleAssignmentError("infeasible assignment")
            has_pred[j] = True
    chains = []
    covered = 0
    for start in range(n):
        if has_pred[start]:
            continue
        chain = [start]
        i = start
        while succ[i] != TERMINAL:
            i = int(succ[i])
            chain.append(i)
        covered += len(chain)
        chains.append(chain)
    if covered != n:
        # successor structure has a cycle (unreachable from any start)
        raise InfeasibleAssignmentError("infeasible assignment")
    return ClusterSet(tuple(chains))


def clusters_to_assignment(clusters: ClusterSet) -> AssignmentMatrix:
    """Inverse of assignment_to_clusters: consecutive links within each chain,
    terminal link at each chain end."""
    n = clusters.n
    values = np.zeros((n, n + 1))
    for chain in clusters.chains:
        for a, b in zip(chain, chain[1:]):
            values[a, b] = 1.0
        values[chain[-1], n] = 1.0
    return AssignmentMatrix(values, kind="hard")


def normalize_sequence(r: RtoaSequence) -> np.ndarray:
    """Scale to [0, 1] by the maximum element; an all-zero input stays all
    zero rather than erroring (degenerate but constructible)."""
    peak = float(np.max(r.rtoas))
    if peak <= 0.0:
        return np.zeros(r.n)
    return r.rtoas / peak
