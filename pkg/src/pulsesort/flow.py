"""Exact min-cost decoding of successor links.

Each pulse picks one successor (a later pulse within the lookahead window,
or the terminal vertex) and no pulse is picked twice; chains of links are
the recovered emitter trains.  Minimizing total link cost over that polytope
is a rectangular bipartite matching: rows are pulses, columns are the real
successor slots plus N interchangeable copies of the terminal vertex.  The
constraint matrix is totally unimodular, so the LP optimum is integral and
scipy's linear_sum_assignment solves it exactly.

Ties are broken toward the lexicographically smallest link vector
(succ(0), succ(1), ..., terminal sorting last).  A unique optimum is the
common case and is detected cheaply through LP duals recovered from the
solved matching; only genuinely tied instances pay for the probe-based
lexicographic refinement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import TERMINAL, AssignmentMatrix, links_to_assignment

DUAL_TOL_SCALE = 1e-9
MAX_BRUTE_FORCE_N = 10


class InfeasibleProblemError(ValueError):
    """Some row has no finite-cost edge at all (malformed cost input)."""


@dataclass(frozen=True)
class CostMatrix:
    """Link costs, N x (N+1) with column N the terminal vertex.

    Edges run forward only: row i may link to j with i < j <= i + lookahead,
    or to the terminal column, which is always allowed.  Entries outside
    that mask, and non-finite entries inside it, are treated as +inf.
    """

    values: np.ndarray
    lookahead: Optional[int] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != values.shape[0] + 1:
            raise ValueError("cost matrix must be N x (N+1)")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.lookahead is not None and self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def mask(self) -> np.ndarray:
        """Boolean N x (N+1) of allowed edges."""
        n = self.n
        w = n if self.lookahead is None else int(self.lookahead)
        i = np.arange(n)[:, None]
        j = np.arange(n)[None, :]
        allowed = np.zeros((n, n + 1), dtype=bool)
        allowed[:, :n] = (j > i) & (j - i <= w)
        allowed[:, n] = True
        return allowed

    def effective(self) -> np.ndarray:
        """Costs with disallowed edges at +inf."""
        eff = np.where(self.mask(), self.values, np.inf)
        eff[~np.isfinite(eff)] = np.inf
        return eff


@dataclass(frozen=True)
class FlowSolution:
    assignment: AssignmentMatrix
    total_cost: float
    num_flows: int


def _links_cost(eff: np.ndarray, links: np.ndarray) -> float:
    n = eff.shape[0]
    cols = np.where(links == TERMINAL, n, links)
    return float(np.sum(eff[np.arange(n), cols]))


def _lsa_links(eff: np.ndarray, fixed: Optional[dict] = None) -> np.ndarray:
    """Solve the expanded rectangular matching, honoring pre-fixed rows.

    fixed maps row -> column (TERMINAL allowed).  Returns the successor
    index per row.
    """
    n = eff.shape[0]
    fixed = fixed or {}
    free_rows = [i for i in range(n) if i not in fixed]
    used_real = {j for j in fixed.values() if j != TERMINAL}
    free_cols = [j for j in range(n) if j not in used_real]
    links = np.empty(n, dtype=np.int64)
    for i, j in fixed.items():
        links[i] = j
    if free_rows:
        m = len(free_rows)
        sub = np.empty((m, len(free_cols) + m))
        sub[:, : len(free_cols)] = eff[np.ix_(free_rows, free_cols)]
        sub[:, len(free_cols) :] = eff[free_rows, n][:, None]
        try:
            rows, cols = linear_sum_assignment(sub)
        except ValueError as exc:
            raise InfeasibleProblemError(str(exc)) from exc
        for r, c in zip(rows, cols):
            links[free_rows[r]] = (
                free_cols[c] if c < len(free_cols) else TERMINAL
            )
    return links


def _recover_duals(eff: np.ndarray, links: np.ndarray) -> Optional[np.ndarray]:
    """Column potentials w >= 0 (terminal pinned at 0) consistent with the
    solved links, via iterated relaxation of the difference constraints
    w_j >= w_{m(i)} + c_{i,m(i)} - c_ij.  Returns None when relaxation does
    not settle or leaves positive potential on an unclaimed column, in which
    case the caller falls back to probing every allowed edge."""
    n = eff.shape[0]
    tol = DUAL_TOL_SCALE * (1.0 + np.max(np.abs(eff[np.isfinite(eff)])))
    w = np.zeros(n + 1)
    match_cols = np.where(links == TERMINAL, n, links)
    match_cost = eff[np.arange(n), match_cols]
    real = eff[:, :n]
    for _ in range(n + 2):
        u = match_cost + w[match_cols]
        with np.errstate(invalid="ignore"):
            need = u[:, None] - real
        need[~np.isfinite(real)] = -np.inf
        target = np.max(need, axis=0, initial=0.0)
        new_w = np.maximum(w[:n], target)
        if np.all(new_w - w[:n] <= tol):
            w[:n] = new_w
            break
        w[:n] = new_w
    else:
        return None
    claimed = np.zeros(n + 1, dtype=bool)
    claimed[match_cols] = True
    if np.any(w[:n][~claimed[:n]] > tol):
        return None
    return w


def solve_min_cost_flow(c: CostMatrix) -> FlowSolution:
    """Exact minimum-cost link assignment.

    Among cost-equal optima the lexicographically smallest link vector is
    returned (real columns ascending, terminal last).
    """
    eff = c.effective()
    n = c.n
    if np.any(np.all(np.isinf(eff), axis=1)):
        raise InfeasibleProblemError("a row has no finite-cost edge")
    links = _lsa_links(eff)
    best_cost = _links_cost(eff, links)
    finite = eff[np.isfinite(eff)]
    tol = DUAL_TOL_SCALE * (1.0 + (np.max(np.abs(finite)) if finite.size else 0.0))

    w = _recover_duals(eff, links)
    if w is not None:
        u = eff[np.arange(n), np.where(links == TERMINAL, n, links)]
        u = u + w[np.where(links == TERMINAL, n, links)]
        slack = eff + w[None, :] - u[:, None]
        tight = slack <= tol
        ambiguous = np.flatnonzero(np.sum(tight, axis=1) > 1)
        candidates = tight
    else:
        ambiguous = np.arange(n)
        candidates = np.isfinite(eff)

    if ambiguous.size:
        fixed: dict[int, int] = {}
        used: set[int] = set()
        for i in range(n):
            row_cand = [j for j in np.flatnonzero(candidates[i]) if j not in used]
            # terminal (column n) already sorts last in ascending order
            chosen = None
            for j in row_cand:
                trial = dict(fixed)
                trial[i] = TERMINAL if j == n else int(j)
                probe = _lsa_links(eff, trial)
                if _links_cost(eff, probe) <= best_cost + tol:
                    chosen = trial[i]
                    break
            if chosen is None:
                # numeric edge case: take whatever an unforced re-solve of
                # the remaining rows picks (always feasible w.r.t. fixed)
                chosen = int(_lsa_links(eff, fixed)[i])
            fixed[i] = chosen
            if chosen != TERMINAL:
                used.add(chosen)
        links = np.array([fixed[i] for i in range(n)], dtype=np.int64)
        best_cost = _links_cost(eff, links)

    assignment = links_to_assignment(links, n)
    num_flows = int(np.sum(links == TERMINAL))
    return FlowSolution(assignment, best_cost, num_flows)


def greedy_decode(
    p: AssignmentMatrix, forbidden: Optional[np.ndarray] = None
) -> AssignmentMatrix:
    """Commit the globally largest remaining probability whose row is still
    unassigned and whose non-terminal column is unused; repeat until every
    row is linked.  The terminal column can be reused without limit.
    Columns listed in forbidden are off limits from the start."""
    n = p.n
    avail = p.values.copy()
    if forbidden is not None and len(forbidden):
        avail[:, np.asarray(forbidden, dtype=np.int64)] = -1.0
    links = np.full(n, TERMINAL, dtype=np.int64)
    row_done = np.zeros(n, dtype=bool)
    for _ in range(n):
        flat = int(np.argmax(avail))
        i, j = divmod(flat, n + 1)
        links[i] = TERMINAL if j == n else j
        row_done[i] = True
        avail[i, :] = -1.0
        if j < n:
            avail[:, j] = -1.0
    assert row_done.all()
    return links_to_assignment(links, n)


def lp_decode(
    p: AssignmentMatrix,
    lookahead: Optional[int] = None,
    forbidden: Optional[np.ndarray] = None,
) -> AssignmentMatrix:
    """Exact decode of a soft matrix: min-cost links under cost 1 - p.
    Columns listed in forbidden are priced out entirely."""
    cost = 1.0 - p.values
    if forbidden is not None and len(forbidden):
        cost[:, np.asarray(forbidden, dtype=np.int64)] = np.inf
    return solve_min_cost_flow(
        CostMatrix(cost, lookahead=lookahead)
    ).assignment


def brute_force_assignments(
    n: int, lookahead: Optional[int] = None
) -> Iterator[AssignmentMatrix]:
    """Every feasible hard assignment, by exhaustive successor choice.

    Test oracle only; the count at full lookahead is the Bell number B(n)
    (chains of a partition are ordered by time, so partitions and chain
    covers are in bijection).
    """
    if n > MAX_BRUTE_FORCE_N:
        raise ValueError(f"n must be <= {MAX_BRUTE_FORCE_N}")
    w = n if lookahead is None else int(lookahead)
    links = np.full(n, TERMINAL, dtype=np.int64)

    def rec(i: int, used: int):
        if i == n:
            yield links_to_assignment(links, n)
            return
        links[i] = TERMINAL
        yield from rec(i + 1, used)
        for j in range(i + 1, min(i + w, n - 1) + 1):
            if not (used >> j) & 1:
                links[i] = j
                yield from rec(i + 1, used | (1 << j))
        links[i] = TERMINAL

    yield from rec(0, 0)
