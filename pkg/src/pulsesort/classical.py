"""Histogram-based deinterleavers: CDIF, SDIF, and the PRI transform.

All three share the same skeleton: estimate PRI candidates from ToA
differences of the currently unassigned pulses, pull one chain out with a
greedy sequence search, and repeat until nothing extractable remains.
They differ in how candidates are scored.

CDIF accumulates difference histograms over levels 1..c and thresholds by
count; a candidate must also show mass at twice its PRI.  SDIF histograms
each level alone against an exponentially decaying threshold and applies a
subharmonic check when a single level-1 peak appears.  The PRI transform
replaces counts with a complex sum whose phases cancel at subharmonics.

Internally the difference axis is binned geometrically (each bin ~1% wide)
so tolerance scales with PRI, mirroring fractional jitter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .core import ClusterSet, PulseSequence

TAU_MIN = 0.8
TAU_MAX = 1100.0
BIN_RATIO = 1.01
MAX_LEVEL = 6
MIN_CHAIN = 5
NEAR_FRAC = 0.015


@dataclass(frozen=True)
class DiffHistogram:
    """Fixed-width histogram of level-th order ToA differences."""

    level: int
    bin_width: float
    bins: dict
    tau_max: float

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if any(v < 0 for v in self.bins.values()):
            raise ValueError("negative count")


@dataclass(frozen=True)
class PriEstimate:
    pri: float
    score: float
    source: str

    def __post_init__(self):
        if self.pri <= 0:
            raise ValueError("pri must be positive")


def toa_diff_histogram(
    toas: np.ndarray, level: int, bin_width: float, tau_max: float = TAU_MAX
) -> DiffHistogram:
    """Count pairs (i, i+level) by their ToA difference; differences above
    tau_max are dropped.  A level >= N gives an empty histogram."""
    if level < 1:
        raise ValueError("level must be >= 1")
    toas = np.asarray(toas, dtype=np.float64)
    bins: dict = {}
    if level < toas.size:
        diffs = toas[level:] - toas[:-level]
        diffs = diffs[diffs <= tau_max]
        idx, counts = np.unique(
            np.floor(diffs / bin_width).astype(np.int64), return_counts=True
        )
        bins = {int(k): int(v) for k, v in zip(idx, counts)}
    return DiffHistogram(level, float(bin_width), bins, float(tau_max))


def _evenly_subdivided(
    avail_toas: np.ndarray, t_a: float, t_b: float
) -> bool:
    """True when the open interval (t_a, t_b) holds available pulses at all
    the interior points of an even 2-, 3-, or 4-way split (within 3% of the
    sub-gap).  Such a link is riding every k-th pulse of a faster train
    rather than following a real period."""
    g = t_b - t_a
    if g <= 0:
        return False
    for parts in (2, 3, 4):
        sub = g / parts
        tol = 0.03 * sub
        hit_all = True
        for k in range(1, parts):
            target = t_a + k * sub
            j = int(np.searchsorted(avail_toas, target))
            near = False
            for q in (j - 1, j):
                if 0 <= q < avail_toas.size and abs(avail_toas[q] - target) <= tol:
                    near = True
                    break
            if not near:
                hit_all = False
                break
        if hit_all:
            return True
    return False


def sequence_search(
    toas: np.ndarray,
    available: Iterable[int],
    pri: float,
    tolerance_frac: float = 0.15,
    max_missed: int = 3,
    min_len: int = 2,
    subdivision_guard: bool = False,
):
    """Extract one chain following the given PRI.

    Start candidates are scanned in time order; from a start, the chain
    greedily appends the pulse closest to the predicted next arrival,
    trying m = 1..max_missed periods ahead with a +/-tolerance_frac*m*pri
    window.  The first start producing a chain of at least min_len pulses
    wins.  Returns (chain index list, remaining available set); an empty
    chain leaves the pool untouched.

    With subdivision_guard a start whose first link spans an evenly
    subdivided gap is skipped: that start is latching onto every second or
    third pulse of a faster train instead of seeding its own.
    """
    if pri <= 0:
        raise ValueError("pri must be positive")
    if not 0 < tolerance_frac < 1:
        raise ValueError("tolerance_frac must lie in (0, 1)")
    toas = np.asarray(toas, dtype=np.float64)
    avail = np.array(sorted(available), dtype=np.int64)
    avail_toas = toas[avail]
    for start in avail:
        chain = [int(start)]
        current = toas[start]
        pool = avail[avail > start]
        while pool.size:
            nxt = -1
            for m in range(1, max_missed + 1):
                center = current + m * pri
                half = tolerance_frac * m * pri
                cand = pool[
                    (toas[pool] >= center - half) & (toas[pool] <= center + half)
                ]
                if cand.size:
                    nxt = int(cand[np.argmin(np.abs(toas[cand] - center))])
                    break
            if nxt < 0:
                break
            chain.append(nxt)
            current = toas[nxt]
            pool = pool[pool > nxt]
        if len(chain) >= min_len:
            if subdivision_guard and len(chain) >= 2 and _evenly_subdivided(
                avail_toas, toas[chain[0]], toas[chain[1]]
            ):
                continue
            return chain, set(int(i) for i in avail) - set(chain)
    return [], set(int(i) for i in avail)


def _geom_edges(tau_hi: float) -> np.ndarray:
    n = int(np.ceil(np.log(tau_hi / TAU_MIN) / np.log(BIN_RATIO))) + 1
    return TAU_MIN * BIN_RATIO ** np.arange(n + 1)


def _geom_hist(diffs: np.ndarray, edges: np.ndarray) -> np.ndarray:
    counts = np.zeros(edges.size - 1)
    ok = (diffs >= edges[0]) & (diffs < edges[-1])
    idx = np.searchsorted(edges, diffs[ok], side="right") - 1
    np.add.at(counts, idx, 1.0)
    return counts


def _count_near(
    edges: np.ndarray, counts: np.ndarray, tau: float, frac: float = NEAR_FRAC
) -> float:
    lo, hi = tau * (1 - frac), tau * (1 + frac)
    sel = (edges[1:] > lo) & (edges[:-1] < hi)
    return float(np.sum(counts[sel]))


def _peak_candidates(
    edges: np.ndarray, counts: np.ndarray, passing: np.ndarray
) -> list:
    """Group runs of passing bins (gaps of <= 2 bins bridge a run) and
    return one (tau, score) per run, at its highest-count bin."""
    centers = np.sqrt(edges[:-1] * edges[1:])
    idx = np.flatnonzero(passing)
    out = []
    if idx.size == 0:
        return out
    run = [idx[0]]
    for k in idx[1:]:
        if k - run[-1] <= 2:
            run.append(k)
        else:
            best = max(run, key=lambda q: counts[q])
            out.append((float(centers[best]), float(counts[best])))
            run = [k]
    best = max(run, key=lambda q: counts[q])
    out.append((float(centers[best]), float(counts[best])))
    return out


def _extract_chain(
    toas: np.ndarray,
    available: set,
    tau: float,
    tolerance_frac: float,
    max_missed: int,
    min_len: int,
    retried: bool = False,
):
    """sequence_search plus plausibility guards used by the deinterleavers.

    A candidate chain must actually beat to the claimed period: most steps
    must be single-period (a half-PRI ghost walks its train at m = 2 and is
    rejected here), and the median observed period must agree with tau
    (a skewed histogram peak triggers one re-walk at the observed period).
    Trailing multi-period hops are dropped: a genuine gap is followed by
    more pulses, while a junction absorb of a foreign pulse dies at the
    chain end.
    """
    chain, _ = sequence_search(
        toas, available, tau, tolerance_frac, max_missed, min_len,
        subdivision_guard=True,
    )
    if not chain:
        return [], available
    gaps = np.diff(toas[chain])
    if gaps.size:
        m = np.maximum(1, np.round(gaps / tau).astype(np.int64))
        if np.mean(m == 1) < 0.5:
            return [], available
        med = float(np.median(gaps / m))
        if med > 0 and abs(med - tau) > 0.05 * tau and not retried:
            return _extract_chain(
                toas, available, med, tolerance_frac, max_missed, min_len,
                retried=True,
            )
        # steps spanning evenly subdivided gaps are rides over a faster
        # train; so are multi-period hops at either end of the chain
        leftover = np.array(
            sorted(set(available) - set(chain)), dtype=np.int64
        )
        left_toas = toas[leftover]
        suspect = np.array(
            [
                _evenly_subdivided(left_toas, toas[a], toas[b])
                for a, b in zip(chain[:-1], chain[1:])
            ]
        )
        if np.mean(suspect) >= 0.5:
            return [], available
        while m.size and (m[0] >= 2 or suspect[0]):
            chain.pop(0)
            m, suspect = m[1:], suspect[1:]
        while m.size and (m[-1] >= 2 or suspect[-1]):
            chain.pop()
            m, suspect = m[:-1], suspect[:-1]
        if len(chain) < min_len:
            return [], available
    return chain, set(available) - set(chain)


def _chain_period(toas: np.ndarray, chain: list):
    gaps = np.diff(toas[np.asarray(chain, dtype=np.int64)])
    if gaps.size == 0:
        return None
    base = float(np.min(gaps))
    if base <= 0:
        return None
    m = np.maximum(1, np.round(gaps / base))
    return float(np.median(gaps / m))

def _merge_fragments(
    toas: np.ndarray, chains: list, tolerance_frac: float = 0.15
) -> list:
    """Rejoin chains that are fragments of one train.

    The end-of-chain trims in _extract_chain can sever a train into two
    pieces which then surface as separate chains at the same PRI.  Two
    chains whose periods agree within 10% and whose junction gap is a
    small multiple of that period are one emitter.
    """
    merged = [sorted(c) for c in chains]
    changed = True
    while changed:
        changed = False
        merged.sort(key=lambda c: toas[c[0]])
        for i in range(len(merged) - 1):
            a = merged[i]
            ta = _chain_period(toas, a)
            if ta is None:
                continue
            for j in range(i + 1, len(merged)):
                b = merged[j]
                tb = _chain_period(toas, b)
                if tb is None or abs(ta - tb) > 0.1 * min(ta, tb):
                    continue
                tau = 0.5 * (ta + tb)
                gap = float(toas[b[0]] - toas[a[-1]])
                if gap <= 0:
                    continue
                steps = round(gap / tau)
                if not 1 <= steps <= 4:
                    continue
                if abs(gap - steps * tau) > tolerance_frac * steps * tau:
                    continue
                merged[i] = sorted(a + b)
                del merged[j]
                changed = True
                break
            if changed:
                break
    return merged


def _singleton_fill(chains: list, n: int) -> ClusterSet:
    used = set()
    for c in chains:
        used |= set(c)
    full = [list(c) for c in chains] + [[i] for i in range(n) if i not in used]
    full.sort(key=lambda c: c[0])
    return ClusterSet(tuple(tuple(c) for c in full))


def cdif(
    seq: PulseSequence,
    threshold_frac: float = 0.15,
    tau_max: float = TAU_MAX,
    max_level: int = MAX_LEVEL,
    tolerance_frac: float = 0.15,
    max_missed: int = 3,
    min_len: int = MIN_CHAIN,
) -> ClusterSet:
    """Cumulative difference histogram deinterleaver.

    At difference level c the histograms of levels 1..c are summed; bins
    whose count beats threshold_frac*(N/c), and whose doubled PRI also
    beats it, become candidates in ascending PRI order.  After each
    extracted chain the procedure restarts at level 1 on what remains.
    """
    toas = seq.toas
    edges = _geom_edges(2.2 * tau_max)
    available = set(range(seq.n))
    chains: list = []
    while len(available) >= max(min_len, 2):
        sub = toas[np.array(sorted(available))]
        m = sub.size
        cum = np.zeros(edges.size - 1)
        extracted = False
        for level in range(1, min(max_level, m - 1) + 1):
            cum += _geom_hist(sub[level:] - sub[:-level], edges)
            thr = threshold_frac * m / level
            centers = np.sqrt(edges[:-1] * edges[1:])
            passing = (cum > thr) & (centers <= tau_max)
            for tau, _score in _peak_candidates(edges, cum, passing):
                if _count_near(edges, cum, 2 * tau) <= thr:
                    continue
                chain, available = _extract_chain(
                    toas, available, tau, tolerance_frac, max_missed, min_len
                )
                if chain:
                    chains.append(chain)
                    extracted = True
                    break
            if extracted:
                break
        if not extracted:
            break
    return _singleton_fill(_merge_fragments(toas, chains), seq.n)


def sdif(
    seq: PulseSequence,
    threshold_scale: float = 0.2,
    threshold_decay: float = 0.2,
    threshold_width: float = 20.0,
    tau_max: float = TAU_MAX,
    max_level: int = MAX_LEVEL,
    tolerance_frac: float = 0.15,
    max_missed: int = 3,
    min_len: int = MIN_CHAIN,
) -> ClusterSet:
    """Sequential difference histogram deinterleaver.

    Each level's histogram stands alone against the decaying threshold
    scale*E*exp(-tau/(decay*N*width)) with E the number of differences at
    that level.  A single level-1 peak triggers a subharmonic check: if
    half its PRI also carries mass, the halved value is tried first.
    Candidates are tried strongest first.
    """
    toas = seq.toas
    edges = _geom_edges(2.2 * tau_max)
    centers = np.sqrt(edges[:-1] * edges[1:])
    available = set(range(seq.n))
    chains: list = []
    while len(available) >= max(min_len, 2):
        sub = toas[np.array(sorted(available))]
        m = sub.size
        extracted = False
        for level in range(1, min(max_level, m - 1) + 1):
            counts = _geom_hist(sub[level:] - sub[:-level], edges)
            e = m - level
            thr = (
                threshold_scale
                * e
                * np.exp(-centers / (threshold_decay * m * threshold_width))
            )
            passing = (counts > thr) & (centers <= tau_max)
            cands = _peak_candidates(edges, counts, passing)
            cands.sort(key=lambda t: -t[1])
            order = [tau for tau, _ in cands]
            if level == 1 and len(order) == 1:
                tau = order[0]
                if (
                    tau / 2 >= TAU_MIN
                    and _count_near(edges, counts, tau / 2)
                    > 0.5 * _count_near(edges, counts, tau)
                ):
                    order = [tau / 2, tau]
            for tau in order:
                chain, available = _extract_chain(
                    toas, available, tau, tolerance_frac, max_missed, min_len
                )
                if chain:
                    chains.append(chain)
                    extracted = True
                    break
            if extracted:
                break
        if not extracted:
            break
    return _singleton_fill(_merge_fragments(toas, chains), seq.n)


def pri_spectrum(
    toas: np.ndarray, tau_max: float = TAU_MAX
) -> tuple:
    """Complex-phase PRI spectrum over geometric bins.

    Each pulse pair (i, j), i < j, with difference d <= tau_max adds
    exp(2*pi*1j*toas[j]/d) to its bin; harmonics of the true PRI collect
    incoherent phases and cancel.  Returns (bin centers, |sum| per bin).
    """
    toas = np.asarray(toas, dtype=np.float64)
    edges = _geom_edges(tau_max)
    acc = np.zeros(edges.size - 1, dtype=np.complex128)
    n = toas.size
    for level in range(1, n):
        diffs = toas[level:] - toas[:-level]
        later = toas[level:]
        ok = (diffs >= edges[0]) & (diffs < edges[-1])
        if not np.any(ok):
            if np.all(diffs > edges[-1]):
                break
            continue
        idx = np.searchsorted(edges, diffs[ok], side="right") - 1
        np.add.at(acc, idx, np.exp(2j * np.pi * later[ok] / diffs[ok]))
    centers = np.sqrt(edges[:-1] * edges[1:])
    return centers, np.abs(acc)


def prit(
    seq: PulseSequence,
    threshold_frac: float = 0.3,
    threshold_min: float = 4.0,
    tau_max: float = TAU_MAX,
    tolerance_frac: float = 0.15,
    max_missed: int = 3,
    min_len: int = MIN_CHAIN,
) -> ClusterSet:
    """PRI-transform deinterleaver: spectrum peaks above
    max(threshold_min, threshold_frac * strongest) seed extraction,
    strongest first, recomputing the spectrum after each chain."""
    toas = seq.toas
    available = set(range(seq.n))
    chains: list = []
    while len(available) >= max(min_len, 2):
        sub = toas[np.array(sorted(available))]
        centers, mags = pri_spectrum(sub, tau_max)
        if mags.size == 0 or np.max(mags) <= 0:
            break
        thr = max(threshold_min, threshold_frac * float(np.max(mags)))
        passing = mags >= thr
        edges = _geom_edges(tau_max)
        cands = _peak_candidates(edges, mags, passing)
        cands.sort(key=lambda t: -t[1])
        extracted = False
        for tau, _mag in cands:
            chain, available = _extract_chain(
                toas, available, tau, tolerance_frac, max_missed, min_len
            )
            if chain:
                chains.append(chain)
                extracted = True
                break
        if not extracted:
            break
    return _singleton_fill(_merge_fragments(toas, chains), seq.n)
