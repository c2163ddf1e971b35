"""Synthetic interleaved pulse-stream generation.

Five PRI modulation types (constant, jitter, constant stagger, random
stagger, switch&dwell) and five scenario cases of increasing difficulty.
Per-pulse PRI deviation is modeled as bounded uniform fractional noise.
Datasets are line-delimited JSON (one header line, then one record per
line) and byte-identical for a given seed regardless of how generation is
parallelized: every record derives its RNG stream from (dataset seed,
record index) alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from .core import PulseSequence

PRI_MIN = 1.0
PRI_MAX = 1000.0

VARIANTS = (
    "constant",
    "jitter",
    "constant_stagger",
    "random_stagger",
    "switch_dwell",
)

MAX_DEVIATION = {
    "constant": 0.01,
    "jitter": 0.15,
    "constant_stagger": 0.40,
    "random_stagger": 0.40,
    "switch_dwell": 0.40,
}

STAGGER_LEVELS = (2, 9)
DWELL_RANGE = (4, 10)
PULSES_RANGE = (5, 100)
EMITTERS_RANGE = (1, 10)
MAX_MISSING_PROB = 0.20
MAX_CONSECUTIVE_MISSING = 10

DATASET_SCHEMA = 1
MAX_SCENARIO_ATTEMPTS = 1000


@dataclass(frozen=True)
class PriPattern:
    variant: str
    base_pris: tuple
    deviation_frac: float = 0.0
    dwells: Optional[tuple] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        base = tuple(float(p) for p in self.base_pris)
        if any(p < PRI_MIN or p > PRI_MAX for p in base):
            raise ValueError(f"base PRIs must lie in [{PRI_MIN}, {PRI_MAX}] us")
        if self.variant in ("constant", "jitter"):
            if len(base) != 1:
                raise ValueError("constant/jitter take exactly one base PRI")
        else:
            lo, hi = STAGGER_LEVELS
            if not lo <= len(base) <= hi:
                raise ValueError(f"level count must lie in [{lo}, {hi}]")
        if self.variant == "switch_dwell":
            if self.dwells is None or len(self.dwells) != len(base):
                raise ValueError("switch_dwell needs one dwell count per PRI")
            dwells = tuple(int(d) for d in self.dwells)
            if any(d < DWELL_RANGE[0] or d > DWELL_RANGE[1] for d in dwells):
                raise ValueError(f"dwell counts must lie in {DWELL_RANGE}")
            object.__setattr__(self, "dwells", dwells)
        elif self.dwells is not None:
            raise ValueError("dwells only apply to switch_dwell")
        if not 0.0 <= self.deviation_frac <= MAX_DEVIATION[self.variant]:
            raise ValueError(
                f"deviation for {self.variant} capped at "
                f"{MAX_DEVIATION[self.variant]}"
            )
        object.__setattr__(self, "base_pris", base)


@dataclass(frozen=True)
class EmitterSpec:
    pattern: PriPattern
    start_time: float = 0.0
    pulse_count: int = 5
    missing_prob: float = 0.0
    max_consecutive_missing: int = 1

    def __post_init__(self):
        lo, hi = PULSES_RANGE
        if not lo <= self.pulse_count <= hi:
            raise ValueError(f"pulse_count must lie in [{lo}, {hi}]")
        if not 0.0 <= self.missing_prob <= MAX_MISSING_PROB:
            raise ValueError(f"missing_prob capped at {MAX_MISSING_PROB}")
        if not 1 <= self.max_consecutive_missing <= MAX_CONSECUTIVE_MISSING:
            raise ValueError(
                f"max_consecutive_missing must lie in [1, {MAX_CONSECUTIVE_MISSING}]"
            )
        if self.start_time < 0:
            raise ValueError("start_time must be >= 0")


@dataclass(frozen=True)
class Scenario:
    case_id: int
    emitters: tuple
    seed: int
    align_endings: bool = False

    def __post_init__(self):
        if self.case_id not in (1, 2, 3, 4, 5):
            raise ValueError("case_id must be 1..5")
        ne = len(self.emitters)
        lo, hi = EMITTERS_RANGE
        if not lo <= ne <= hi:
            raise ValueError(f"emitter count must lie in [{lo}, {hi}]")
        object.__setattr__(self, "emitters", tuple(self.emitters))


def generate_pri_sequence(
    pattern: PriPattern, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw `count` successive PRI values for one emitter."""
    if count < 1:
        raise ValueError("count must be >= 1")
    base = np.asarray(pattern.base_pris)
    if pattern.variant in ("constant", "jitter"):
        nominal = np.full(count, base[0])
    elif pattern.variant == "constant_stagger":
        nominal = base[np.arange(count) % base.size]
    elif pattern.variant == "random_stagger":
        nominal = base[rng.integers(0, base.size, size=count)]
    else:  # switch_dwell
        cycle = np.repeat(base, pattern.dwells)
        nominal = cycle[np.arange(count) % cycle.size]
    u = rng.uniform(-pattern.deviation_frac, pattern.deviation_frac, size=count)
    return nominal * (1.0 + u)


def apply_missing(
    toas: np.ndarray,
    missing_prob: float,
    max_consecutive: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Delete pulses in runs: each position (never the first) seeds a
    deletion with probability missing_prob; a seeded deletion removes a run
    of uniform length 1..max_consecutive, clipped at the end."""
    n = toas.size
    keep = np.ones(n, dtype=bool)
    i = 1
    while i < n:
        if rng.random() < missing_prob:
            run = int(rng.integers(1, max_consecutive + 1))
            keep[i : i + run] = False
            i += run
        else:
            i += 1
    return toas[keep]


def _nominal_toas(spec: EmitterSpec, rng: np.random.Generator) -> np.ndarray:
    pris = generate_pri_sequence(spec.pattern, spec.pulse_count - 1, rng)
    return spec.start_time + np.concatenate([[0.0], np.cumsum(pris)])


def generate_pulse_train(
    spec: EmitterSpec, rng: np.random.Generator, label: int = 0
) -> PulseSequence:
    """ToAs for one emitter: start_time plus the running PRI sum, with
    missing pulses applied."""
    toas = apply_missing(
        _nominal_toas(spec, rng), spec.missing_prob,
        spec.max_consecutive_missing, rng,
    )
    return PulseSequence(toas, labels=np.full(toas.size, label, dtype=np.int64))


def interleave(trains: Sequence[PulseSequence]) -> PulseSequence:
    """Merge labeled trains by ToA; ties broken by (toa, label, position in
    its own train) so the result is reproducible."""
    labels_seen = set()
    for t in trains:
        if t.labels is None:
            raise ValueError("every train must be labeled")
        uniq = set(np.unique(t.labels).tolist())
        if labels_seen & uniq:
            raise ValueError("duplicate emitter ids across trains")
        labels_seen |= uniq
    toas = np.concatenate([t.toas for t in trains])
    labels = np.concatenate([t.labels for t in trains])
    intra = np.concatenate([np.arange(t.n) for t in trains])
    order = np.lexsort((intra, labels, toas))
    return PulseSequence(toas[order], labels=labels[order])


def _sample_pattern(variant: str, rng: np.random.Generator) -> PriPattern:
    # constant/jitter deviate per pulse; the staggered types put their
    # +/-40% license into the spread of the level values themselves and
    # keep per-pulse noise small so the pattern stays a pattern
    if variant == "constant":
        return PriPattern(
            "constant", (rng.uniform(PRI_MIN, PRI_MAX),), rng.uniform(0.0, 0.01)
        )
    if variant == "jitter":
        return PriPattern(
            "jitter", (rng.uniform(PRI_MIN, PRI_MAX),), rng.uniform(0.05, 0.15)
        )
    levels = int(rng.integers(STAGGER_LEVELS[0], STAGGER_LEVELS[1] + 1))
    center = rng.uniform(PRI_MIN, PRI_MAX)
    base = np.clip(
        center * (1.0 + rng.uniform(-0.4, 0.4, size=levels)), PRI_MIN, PRI_MAX
    )
    deviation = rng.uniform(0.0, 0.05)
    if variant == "switch_dwell":
        dwells = tuple(
            int(d)
            for d in rng.integers(DWELL_RANGE[0], DWELL_RANGE[1] + 1, size=levels)
        )
        return PriPattern("switch_dwell", tuple(base), deviation, dwells)
    return PriPattern(variant, tuple(base), deviation)


def sample_scenario(case_id: int, rng: np.random.Generator) -> Scenario:
    """Draw emitter specs for one scenario of the given case.

    Case 1: constant/jitter only, no missing, close starts, free endings.
    Case 2: all types, no missing, close starts, aligned endings.
    Case 3: missing pulses, close starts, aligned endings.
    Case 4: no missing, far starts, free endings.
    Case 5: missing pulses; the close-and-aligned regime or the
    far-and-free regime, one coin flip per scenario.
    """
    if case_id not in (1, 2, 3, 4, 5):
        raise ValueError("case_id must be 1..5")
    n_emitters = int(rng.integers(EMITTERS_RANGE[0], EMITTERS_RANGE[1] + 1))
    variants = (
        ("constant", "jitter") if case_id == 1 else VARIANTS
    )
    patterns = [
        _sample_pattern(variants[int(rng.integers(0, len(variants)))], rng)
        for _ in range(n_emitters)
    ]
    counts = [
        int(rng.integers(PULSES_RANGE[0], PULSES_RANGE[1] + 1))
        for _ in range(n_emitters)
    ]
    if case_id in (3, 5):
        missing = [
            (rng.uniform(0.01, MAX_MISSING_PROB), int(rng.integers(1, 11)))
            for _ in range(n_emitters)
        ]
    else:
        missing = [(0.0, 1) for _ in range(n_emitters)]

    if case_id in (1, 2, 3):
        close_starts = True
    elif case_id == 4:
        close_starts = False
    else:
        close_starts = bool(rng.random() < 0.5)
    align_endings = case_id in (2, 3) or (case_id == 5 and close_starts)

    if close_starts:
        spread = 2.0 * max(max(p.base_pris) for p in patterns)
    else:
        spread = 0.25 * max(
            c * float(np.mean(p.base_pris)) for c, p in zip(counts, patterns)
        )
    starts = [float(rng.uniform(0.0, spread)) for _ in range(n_emitters)]

    emitters = tuple(
        EmitterSpec(
            pattern=patterns[e],
            start_time=starts[e],
            pulse_count=counts[e],
            missing_prob=missing[e][0],
            max_consecutive_missing=missing[e][1],
        )
        for e in range(n_emitters)
    )
    seed = int(rng.integers(0, 2**63))
    return Scenario(case_id, emitters, seed, align_endings)


def realize_scenario(scenario: Scenario) -> Optional[PulseSequence]:
    """Generate the interleaved labeled stream for a sampled scenario.

    Returns None when aligned-ending truncation leaves some emitter with
    fewer than 5 pulses (caller resamples).
    """
    rng = np.random.default_rng(scenario.seed)
    full = [_nominal_toas(spec, rng) for spec in scenario.emitters]
    if scenario.align_endings:
        t_end = min(t[-1] for t in full)
        full = [t[t <= t_end] for t in full]
        if any(t.size < PULSES_RANGE[0] for t in full):
            return None
    trains = []
    for label, (spec, toas) in enumerate(zip(scenario.emitters, full)):
        kept = apply_missing(
            toas, spec.missing_prob, spec.max_consecutive_missing, rng
        )
        trains.append(
            PulseSequence(kept, labels=np.full(kept.size, label, dtype=np.int64))
        )
    return interleave(trains)


def generate_record(case_id: int, rng: np.random.Generator):
    """Sample scenarios until one realizes, then return (sequence, scenario)."""
    for _ in range(MAX_SCENARIO_ATTEMPTS):
        scenario = sample_scenario(case_id, rng)
        seq = realize_scenario(scenario)
        if seq is not None:
            return seq, scenario
    raise RuntimeError("could not realize a scenario; constraints too tight")


def _record_line(seq: PulseSequence, scenario: Scenario) -> str:
    payload = {
        "case": scenario.case_id,
        "labels": [int(v) for v in seq.labels],
        "seed": scenario.seed,
        "toas": [float(v) for v in seq.toas],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _pick_case(case_mix, u: float) -> int:
    total = sum(w for _, w in case_mix)
    acc = 0.0
    for case_id, w in case_mix:
        acc += w / total
        if u < acc:
            return case_id
    return case_mix[-1][0]


def generate_dataset(
    case_mix: Sequence[tuple],
    count: int,
    seed: int,
    path,
) -> None:
    """Write `count` records drawn from case_mix (pairs of case id and
    positive weight) to a line-delimited JSON file, deterministically."""
    if not case_mix or any(w <= 0 for _, w in case_mix):
        raise ValueError("case weights must be positive")
    header = {
        "case_mix": [[int(c), float(w)] for c, w in case_mix],
        "count": int(count),
        "kind": "pulsesort-dataset",
        "schema": DATASET_SCHEMA,
        "seed": int(seed),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for idx in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
            case_id = _pick_case(case_mix, float(rng.random()))
            seq, scenario = generate_record(case_id, rng)
            fh.write(_record_line(seq, scenario) + "\n")


@dataclass(frozen=True)
class DatasetRecord:
    sequence: PulseSequence
    case_id: int
    seed: int


def load_dataset(path):
    """Read a dataset file back: (header dict, list of DatasetRecord)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "pulsesort-dataset":
            raise ValueError("not a dataset file")
        records = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            seq = PulseSequence(
                np.array(obj["toas"], dtype=np.float64),
                labels=np.array(obj["labels"], dtype=np.int64),
            )
            records.append(DatasetRecord(seq, int(obj["case"]), int(obj["seed"])))
    return header, records
