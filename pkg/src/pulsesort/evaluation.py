"""Windowed inference, deinterleaving metrics, and report generation.

Long sequences are decoded in overlapping windows: each window is
re-referenced and normalized on its own, decoded greedily or by the exact
flow solve, and each pulse keeps the decision of the latest window that
covers it.  Columns claimed by already-final rows are priced out of later
windows, so the stitched result is always a feasible hard assignment.

Metrics follow the deinterleaving convention: acc_link scores each pulse's
predicted successor (terminal counts as a position), acc_nor scores the
recovered radar count (chains longer than 3 pulses), and v_one_to_many
counts column overcommitments of a raw preference matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .classical import cdif, prit, sdif
from .core import (
    TERMINAL,
    AssignmentMatrix,
    ClusterSet,
    PulseSequence,
    assignment_to_clusters,
    clusters_to_assignment,
    compute_rtoa,
    labels_to_assignment,
    links_to_assignment,
    normalize_sequence,
)
from .flow import greedy_decode, lp_decode
from .model import ModelParameters, load_checkpoint, model_forward_raw
from .simulator import load_dataset

CLASSICAL_METHODS = {"cdif": cdif, "sdif": sdif, "prit": prit}
LEARNED_METHODS = ("smcf", "baseline")
RADAR_MIN_PULSES = 4  # chains larger than 3 count as radars

REPORT_FIELDS = (
    "dataset", "case", "method", "decode",
    "acc_link", "acc_nor", "v_1m", "n_records",
)


# --- metrics ---


def acc_link(pred: AssignmentMatrix, truth: AssignmentMatrix) -> float:
    """Fraction of rows whose predicted successor matches the truth."""
    if pred.n != truth.n:
        raise ValueError("prediction and truth differ in length")
    return float(np.mean(pred.links() == truth.links()))


def radar_count(clusters: ClusterSet) -> int:
    return sum(1 for c in clusters.chains if len(c) >= RADAR_MIN_PULSES)


def acc_nor(pred: ClusterSet, truth: ClusterSet) -> int:
    """1 when the predicted radar count matches the truth, else 0."""
    return int(radar_count(pred) == radar_count(truth))


def _argmax_links(values: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    best = np.argmax(values, axis=1)
    return np.where(best == n, TERMINAL, best)


def _link_violations(links: np.ndarray) -> float:
    real = links[links != TERMINAL]
    if real.size == 0:
        return 0.0
    _, counts = np.unique(real, return_counts=True)
    return float(np.sum(counts - 1))


def v_one_to_many(raw) -> float:
    """Column overcommitment of a preference matrix: each row votes for
    its argmax column, and every vote beyond the first on a non-terminal
    column counts as a violation."""
    values = np.asarray(getattr(raw, "values", raw), dtype=np.float64)
    return _link_violations(_argmax_links(values))


# --- windowed inference ---


def _window_starts(n: int, window: int, stride: int) -> list:
    if n <= window:
        return [0]
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def _decode_window(p_vals, decode, lookahead, forbidden):
    pm = AssignmentMatrix(p_vals, kind="soft")
    if decode == "greedy":
        return greedy_decode(pm, forbidden=forbidden)
    if decode == "lp":
        return lp_decode(pm, lookahead=lookahead, forbidden=forbidden)
    raise ValueError(f"unknown decode {decode!r}")


def _infer_links(
    params: ModelParameters,
    seq: PulseSequence,
    window: Optional[int] = None,
    stride: Optional[int] = None,
    decode: str = "lp",
    lookahead: Optional[int] = None,
):
    """Stitched (links, raw_links): decoded successors and the unrepaired
    per-row argmax, both taken from each row's most recent window."""
    cfg = params.config
    window = cfg.seq_len if window is None else int(window)
    if window > cfg.seq_len:
        raise ValueError(f"window {window} exceeds model seq_len {cfg.seq_len}")
    if window < 2:
        raise ValueError("window must be >= 2")
    stride = max(1, window // 2) if stride is None else int(stride)
    if not 1 <= stride <= window:
        raise ValueError("stride must lie in [1, window]")
    n = seq.n
    starts = _window_starts(n, window, stride)
    links = np.full(n, TERMINAL, dtype=np.int64)
    raw_links = np.full(n, TERMINAL, dtype=np.int64)
    claimed = np.zeros(n, dtype=bool)
    for k, s in enumerate(starts):
        e = min(s + window, n)
        owned_until = starts[k + 1] if k + 1 < len(starts) else n
        sub = PulseSequence(seq.toas[s:e])
        x = normalize_sequence(compute_rtoa(sub))
        p_vals, _ = model_forward_raw(params, x, lookahead)
        forbidden = np.flatnonzero(claimed[s:e])
        hard = _decode_window(p_vals, decode, lookahead, forbidden)
        local = hard.links()
        local_raw = _argmax_links(p_vals)
        for i in range(s, owned_until):
            lj = local[i - s]
            links[i] = TERMINAL if lj == TERMINAL else s + lj
            if links[i] != TERMINAL:
                claimed[links[i]] = True
            rj = local_raw[i - s]
            raw_links[i] = TERMINAL if rj == TERMINAL else s + rj
    return links, raw_links


def infer_windowed(
    params: ModelParameters,
    seq: PulseSequence,
    window: Optional[int] = None,
    stride: Optional[int] = None,
    decode: str = "lp",
    lookahead: Optional[int] = None,
) -> AssignmentMatrix:
    links, _ = _infer_links(params, seq, window, stride, decode, lookahead)
    return links_to_assignment(links, seq.n)


# --- dataset evaluation ---


@dataclass(frozen=True)
class EvalReport:
    rows: tuple

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in REPORT_FIELDS})

    def lookup(self, method: str, decode: str, case="all") -> dict:
        for row in self.rows:
            if (
                row["method"] == method
                and row["decode"] == decode
                and row["case"] == case
            ):
                return row
        raise KeyError(f"no row for {method}/{decode}/{case}")


def _truth_of(seq: PulseSequence):
    truth = labels_to_assignment(seq)
    return truth, assignment_to_clusters(truth)


def _resolve_params(method, checkpoints):
    if checkpoints is None or method not in checkpoints:
        raise ValueError(f"method {method} requires a checkpoint")
    entry = checkpoints[method]
    if isinstance(entry, ModelParameters):
        return entry
    params, _ = load_checkpoint(entry)
    return params


def evaluate(
    dataset_path,
    methods: Sequence[str],
    decodes: Sequence[str] = ("greedy", "lp"),
    checkpoints: Optional[dict] = None,
    window: Optional[int] = None,
    stride: Optional[int] = None,
    lookahead: Optional[int] = None,
    dataset_name: Optional[str] = None,
) -> EvalReport:
    """Score every method on every record; aggregate per case and overall.

    Classical methods ignore the decode axis (reported as "-").  Learned
    methods are scored once per decode; their v_1m column reads the raw
    argmax for greedy and the decoded output for lp.  The "oracle" method
    replays the labels and pins the metric ceiling.
    """
    header, records = load_dataset(dataset_path)
    if dataset_name is None:
        dataset_name = str(dataset_path)
    params_cache = {
        m: _resolve_params(m, checkpoints)
        for m in methods
        if m in LEARNED_METHODS
    }
    # accumulators keyed by (method, decode, case)
    acc: dict = {}

    def add(method, decode, case, a_link, a_nor, v1m):
        for c in (case, "all"):
            key = (method, decode, c)
            cur = acc.setdefault(key, [0.0, 0.0, 0.0, 0])
            cur[0] += a_link
            cur[1] += a_nor
            cur[2] += v1m
            cur[3] += 1

    for rec in records:
        seq = rec.sequence
        truth, truth_clusters = _truth_of(seq)
        for method in methods:
            if method == "oracle":
                add(method, "-", rec.case_id, 1.0, 1, 0.0)
            elif method in CLASSICAL_METHODS:
                clusters = CLASSICAL_METHODS[method](seq)
                pred = clusters_to_assignment(clusters)
                add(
                    method, "-", rec.case_id,
                    acc_link(pred, truth), acc_nor(clusters, truth_clusters),
                    0.0,
                )
            elif method in LEARNED_METHODS:
                params = params_cache[method]
                for decode in decodes:
                    links, raw_links = _infer_links(
                        params, seq, window, stride, decode, lookahead
                    )
                    pred = links_to_assignment(links, seq.n)
                    clusters = assignment_to_clusters(pred)
                    if decode == "lp":
                        v1m = _link_violations(links)
                    else:
                        v1m = _link_violations(raw_links)
                    add(
                        method, decode, rec.case_id,
                        acc_link(pred, truth),
                        acc_nor(clusters, truth_clusters),
                        v1m,
                    )
            else:
                raise ValueError(f"unknown method {method!r}")

    rows = []
    for method in methods:
        decs = ("-",) if method not in LEARNED_METHODS else tuple(decodes)
        for decode in decs:
            cases = sorted(
                {k[2] for k in acc if k[0] == method and k[1] == decode and k[2] != "all"}
            )
            for case in cases + ["all"]:
                a_link, a_nor, v1m, count = acc[(method, decode, case)]
                rows.append(
                    {
                        "dataset": dataset_name,
                        "case": case,
                        "method": method,
                        "decode": decode,
                        "acc_link": a_link / count,
                        "acc_nor": a_nor / count,
                        "v_1m": v1m / count,
                        "n_records": count,
                    }
                )
    return EvalReport(tuple(rows))
