"""Mini-batch training for the soft assignment model.

Records are cut into non-overlapping fixed-length windows; links that
cross a window boundary become terminal links inside their window.  Each
step draws a shuffled mini-batch, runs the hand-derived backward pass,
and applies an Adam update.  Everything is seeded: identical seeds on a
single thread give bit-identical checkpoints and metrics logs.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (
    PulseSequence,
    compute_rtoa,
    labels_to_assignment,
    normalize_sequence,
)
from .model import (
    LAMBDA_BALANCE,
    LAMBDA_COL,
    LAMBDA_ONEHOT,
    ModelConfig,
    ModelParameters,
    init_parameters,
    model_backward,
    parameter_shapes,
    save_checkpoint,
)
from .simulator import load_dataset

METRIC_FIELDS = ("step", "ce", "l2", "l3", "l4", "total")


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 1000
    lam2: float = LAMBDA_COL
    lam3: float = LAMBDA_BALANCE
    lam4: float = LAMBDA_ONEHOT
    baseline_mode: bool = False
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lookahead: Optional[int] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.lam2, self.lam3, self.lam4) < 0:
            raise ValueError("lambdas must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")

    def effective_lambdas(self):
        if self.baseline_mode:
            return 0.0, 0.0, 0.0
        return self.lam2, self.lam3, self.lam4


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam_state(config: ModelConfig) -> AdamState:
    shapes = parameter_shapes(config)
    return AdamState(
        m={k: np.zeros(s) for k, s in shapes.items()},
        v={k: np.zeros(s) for k, s in shapes.items()},
    )


def adam_step(
    params: ModelParameters,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place.  Validates every
    gradient before touching any parameter, so a failed step leaves the
    model untouched."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingDiverged(f"non-finite gradients: {sorted(bad)}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.tensors[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def window_spans(n: int, seq_len: int) -> list:
    """Non-overlapping [start, stop) spans covering 0..n-1."""
    return [(s, min(s + seq_len, n)) for s in range(0, n, seq_len)]


def build_training_windows(sequences: list, seq_len: int) -> list:
    """Cut labeled sequences into training pairs (x_norm, y).

    Each window carries its own relative ToAs scaled by the window
    maximum; links leaving the window become terminal links, which is
    exactly what labels_to_assignment produces on the slice.
    """
    out = []
    for seq in sequences:
        if seq.labels is None:
            raise ValueError("training requires labeled sequences")
        for start, stop in window_spans(seq.n, seq_len):
            sub = PulseSequence(seq.toas[start:stop], seq.labels[start:stop])
            x = normalize_sequence(compute_rtoa(sub))
            y = labels_to_assignment(sub).values
            out.append((x, y))
    return out


def write_metrics_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_FIELDS})


def _checkpoint_metadata(train_config: TrainConfig, step: int, extra=None):
    meta = {
        "step": step,
        "seed": train_config.seed,
        "lambdas": list(train_config.effective_lambdas()),
        "baseline": train_config.baseline_mode,
        "train_config": asdict(train_config),
    }
    if extra:
        meta.update(extra)
    return meta


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset_path,
    out_path=None,
    log_path=None,
    eval_hook: Optional[Callable[[ModelParameters, int], float]] = None,
    params: Optional[ModelParameters] = None,
):
    """Run the training loop; returns (params, metrics rows).

    eval_hook, called every eval_every steps, scores the current model on
    held-out data; the best-scoring parameters are restored at the end
    (ties keep the earliest).  With no hook the final parameters stand.
    """
    _, records = load_dataset(dataset_path)
    windows = build_training_windows(
        [r.sequence for r in records], model_config.seq_len
    )
    if not windows:
        raise ValueError("dataset produced no training windows")
    lam2, lam3, lam4 = train_config.effective_lambdas()
    rng = np.random.default_rng(train_config.seed)
    if params is None:
        params = init_parameters(model_config, rng)
    state = init_adam_state(model_config)
    metrics: list = []
    best: Optional[tuple] = None

    def snapshot_best(step):
        nonlocal best
        score = eval_hook(params, step)
        if best is None or score > best[0]:
            best = (
                score,
                step,
                {k: v.copy() for k, v in params.tensors.items()},
            )

    order = np.array([], dtype=np.int64)
    cursor = 0
    step = 0
    try:
        while step < train_config.steps:
            if cursor + train_config.batch_size > order.size:
                order = rng.permutation(len(windows))
                cursor = 0
            take = order[cursor : cursor + train_config.batch_size]
            cursor += train_config.batch_size
            batch = [windows[i] for i in take]
            dropout_rng = (
                rng if model_config.dropout > 0 else None
            )
            breakdown, grads = model_backward(
                params, batch, lam2, lam3, lam4,
                lookahead=train_config.lookahead, dropout_rng=dropout_rng,
            )
            adam_step(
                params, grads, state, train_config.lr,
                train_config.beta1, train_config.beta2, train_config.eps,
            )
            step += 1
            metrics.append(
                {
                    "step": step,
                    "ce": breakdown.ce,
                    "l2": breakdown.l2,
                    "l3": breakdown.l3,
                    "l4": breakdown.l4,
                    "total": breakdown.total,
                }
            )
            if (
                train_config.checkpoint_every > 0
                and out_path is not None
                and step % train_config.checkpoint_every == 0
            ):
                save_checkpoint(
                    out_path, params, _checkpoint_metadata(train_config, step)
                )
            if (
                train_config.eval_every > 0
                and eval_hook is not None
                and step % train_config.eval_every == 0
            ):
                snapshot_best(step)
    except (TrainingDiverged, FloatingPointError) as exc:
        # the failed step never mutated the parameters; persist them
        if out_path is not None:
            save_checkpoint(
                out_path, params,
                _checkpoint_metadata(
                    train_config, step, {"diverged": str(exc)}
                ),
            )
        if log_path is not None:
            write_metrics_csv(log_path, metrics)
        raise TrainingDiverged(f"aborted at step {step}: {exc}") from exc

    extra = None
    if eval_hook is not None and train_config.eval_every > 0:
        snapshot_best(step)
        if best is not None:
            params = ModelParameters(
                model_config, {k: v.copy() for k, v in best[2].items()}
            )
            extra = {"best_step": best[1], "best_score": best[0]}
    if out_path is not None:
        save_checkpoint(
            out_path, params, _checkpoint_metadata(train_config, step, extra)
        )
    if log_path is not None:
        write_metrics_csv(log_path, metrics)
    return params, metrics
