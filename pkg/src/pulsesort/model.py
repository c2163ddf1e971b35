"""Soft assignment model: quantized tokens through a self-attention encoder
to a row-stochastic link matrix.

The forward pass maps normalized arrival offsets to tokens, embeds them,
runs a stack of post-norm transformer layers whose attention uses clipped
relative-position offsets on the keys, and scores each pulse against a set
of decision representatives (one per output position plus a terminal).  A
masked row soft-max over the forward links yields the soft assignment.

Training minimizes cross-entropy against the true links plus penalties
that push the soft matrix toward a feasible flow: a hinge on column
overcommitment, a flow-balance square, and an L1-L2 gap that rewards
one-hot rows.  Gradients are hand-derived layer adjoints over float64
numpy; backward() must agree with central finite differences, and the
test suite enforces that.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import erf

from .core import AssignmentMatrix

LOG_EPS = 1e-12
LN_EPS = 1e-12
INIT_STD = 0.02
CHECKPOINT_MAGIC = b"PSCKPT01"

# lambda defaults for the penalty terms
LAMBDA_COL = 10.0
LAMBDA_BALANCE = 1.0
LAMBDA_ONEHOT = 5.0


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    n_quant: int = 501
    rel_clip: int = 16
    dropout: float = 0.1

    def __post_init__(self):
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.n_quant < 2:
            raise ValueError("n_quant must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.rel_clip < 1:
            raise ValueError("rel_clip must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


DESK_CONFIG = ModelConfig()
PAPER_CONFIG = ModelConfig(
    seq_len=256,
    d_model=512,
    n_layers=12,
    n_heads=8,
    d_ff=2048,
    n_quant=5001,
)


def parameter_shapes(config: ModelConfig) -> dict:
    d, ff = config.d_model, config.d_ff
    shapes = {
        "tok_emb": (config.n_quant, d),
        "pos_emb": (config.seq_len, d),
        "rel_emb": (2 * config.rel_clip + 1, config.d_head),
        "head_T": (config.seq_len + 1, d),
        "head_b": (config.seq_len + 1,),
    }
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes[p + "wq"] = (d, d)
        shapes[p + "bq"] = (d,)
        shapes[p + "wk"] = (d, d)
        shapes[p + "bk"] = (d,)
        shapes[p + "wv"] = (d, d)
        shapes[p + "bv"] = (d,)
        shapes[p + "wo"] = (d, d)
        shapes[p + "bo"] = (d,)
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "w1"] = (d, ff)
        shapes[p + "b1"] = (ff,)
        shapes[p + "w2"] = (ff, d)
        shapes[p + "b2"] = (d,)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
    return shapes


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ValueError(f"tensor mismatch: missing {missing}, extra {extra}")
        for name, arr in self.tensors.items():
            if arr.shape != expected[name]:
                raise ValueError(
                    f"{name}: shape {arr.shape}, expected {expected[name]}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")


def init_parameters(
    config: ModelConfig, rng: np.random.Generator
) -> ModelParameters:
    """Gaussian(0, 0.02) weights, zero biases, unit normalization gains."""
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        base = name.rsplit(".", 1)[-1]
        if base.startswith("ln") and base.endswith("_g"):
            tensors[name] = np.ones(shape)
        elif base.startswith("b") or base.endswith("_b"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape)
    return ModelParameters(config, tensors)


def zero_gradients(config: ModelConfig) -> dict:
    return {k: np.zeros(s) for k, s in parameter_shapes(config).items()}


# --- forward pieces ---


def quantize(x_norm: np.ndarray, n_quant: int) -> np.ndarray:
    """Map values in [0, 1] to token ids 0..n_quant-1 (round half up)."""
    x = np.asarray(x_norm, dtype=np.float64)
    if x.size and (np.min(x) < 0.0 or np.max(x) > 1.0):
        raise ValueError("normalized values must lie in [0, 1]")
    tokens = np.floor(x * (n_quant - 1) + 0.5).astype(np.int64)
    return np.clip(tokens, 0, n_quant - 1)


def quantize_embed(x_norm: np.ndarray, params: ModelParameters) -> np.ndarray:
    tokens = quantize(x_norm, params.config.n_quant)
    return params.tensors["tok_emb"][tokens]


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dg = np.sum(dy * xhat, axis=0)
    db = np.sum(dy, axis=0)
    dxhat = dy * g
    m = xhat.shape[-1]
    dx = inv * (
        dxhat
        - np.mean(dxhat, axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(
        -0.5 * x * x
    ) / np.sqrt(2.0 * np.pi)


def _dropout_mask(shape, rate: float, rng: Optional[np.random.Generator]):
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _rel_index(n: int, clip: int) -> np.ndarray:
    offs = np.arange(n)[None, :] - np.arange(n)[:, None]
    return np.clip(offs, -clip, clip) + clip


def _attention(h, params, prefix, config, rel_gather):
    t = params.tensors
    n, d = h.shape
    nh, dh = config.n_heads, config.d_head
    q = (h @ t[prefix + "wq"] + t[prefix + "bq"]).reshape(n, nh, dh)
    k = (h @ t[prefix + "wk"] + t[prefix + "bk"]).reshape(n, nh, dh)
    v = (h @ t[prefix + "wv"] + t[prefix + "bv"]).reshape(n, nh, dh)
    q = q.transpose(1, 0, 2)
    k = k.transpose(1, 0, 2)
    v = v.transpose(1, 0, 2)
    scale = 1.0 / np.sqrt(dh)
    # content score plus a key-side relative position offset
    scores = (
        np.einsum("hid,hjd->hij", q, k)
        + np.einsum("hid,ijd->hij", q, rel_gather)
    ) * scale
    scores_shift = scores - scores.max(axis=-1, keepdims=True)
    expd = np.exp(scores_shift)
    attn = expd / expd.sum(axis=-1, keepdims=True)
    ctx = np.einsum("hij,hjd->hid", attn, v)
    ctx_flat = ctx.transpose(1, 0, 2).reshape(n, d)
    out = ctx_flat @ t[prefix + "wo"] + t[prefix + "bo"]
    cache = {
        "q": q, "k": k, "v": v, "attn": attn, "scores": scores,
        "ctx_flat": ctx_flat, "h_in": h, "scale": scale,
    }
    return out, cache


def _attention_backward(dout, cache, params, prefix, config, rel_gather):
    t = params.tensors
    n, d = cache["h_in"].shape
    nh, dh = config.n_heads, config.d_head
    q, k, v, attn = cache["q"], cache["k"], cache["v"], cache["attn"]
    scale = cache["scale"]
    grads = {}
    grads[prefix + "wo"] = cache["ctx_flat"].T @ dout
    grads[prefix + "bo"] = dout.sum(axis=0)
    dctx = (dout @ t[prefix + "wo"].T).reshape(n, nh, dh).transpose(1, 0, 2)
    dattn = np.einsum("hid,hjd->hij", dctx, v)
    dv = np.einsum("hij,hid->hjd", attn, dctx)
    # softmax jacobian, rows independent
    dscores = attn * (dattn - np.sum(attn * dattn, axis=-1, keepdims=True))
    dscores = dscores * scale
    dq = np.einsum("hij,hjd->hid", dscores, k) + np.einsum(
        "hij,ijd->hid", dscores, rel_gather
    )
    dk = np.einsum("hij,hid->hjd", dscores, q)
    drel = np.einsum("hij,hid->ijd", dscores, q)
    dq_flat = dq.transpose(1, 0, 2).reshape(n, d)
    dk_flat = dk.transpose(1, 0, 2).reshape(n, d)
    dv_flat = dv.transpose(1, 0, 2).reshape(n, d)
    h_in = cache["h_in"]
    grads[prefix + "wq"] = h_in.T @ dq_flat
    grads[prefix + "bq"] = dq_flat.sum(axis=0)
    grads[prefix + "wk"] = h_in.T @ dk_flat
    grads[prefix + "bk"] = dk_flat.sum(axis=0)
    grads[prefix + "wv"] = h_in.T @ dv_flat
    grads[prefix + "bv"] = dv_flat.sum(axis=0)
    dh_in = (
        dq_flat @ t[prefix + "wq"].T
        + dk_flat @ t[prefix + "wk"].T
        + dv_flat @ t[prefix + "wv"].T
    )
    return dh_in, drel, grads


def encoder_forward(
    embeddings: np.ndarray,
    params: ModelParameters,
    dropout_rng: Optional[np.random.Generator] = None,
):
    """Run the post-norm layer stack; returns (representations, cache)."""
    config = params.config
    n = embeddings.shape[0]
    if n > config.seq_len:
        raise ValueError(f"sequence length {n} exceeds seq_len {config.seq_len}")
    t = params.tensors
    rel_gather = t["rel_emb"][_rel_index(n, config.rel_clip)]
    h = embeddings
    layer_caches = []
    for l in range(config.n_layers):
        p = f"layers.{l}."
        attn_out, attn_cache = _attention(h, params, p, config, rel_gather)
        mask_a = _dropout_mask(attn_out.shape, config.dropout, dropout_rng)
        if mask_a is not None:
            attn_out = attn_out * mask_a
        h1, ln1_cache = _layer_norm(h + attn_out, t[p + "ln1_g"], t[p + "ln1_b"])
        pre = h1 @ t[p + "w1"] + t[p + "b1"]
        act = _gelu(pre)
        ff = act @ t[p + "w2"] + t[p + "b2"]
        mask_f = _dropout_mask(ff.shape, config.dropout, dropout_rng)
        if mask_f is not None:
            ff = ff * mask_f
        h2, ln2_cache = _layer_norm(h1 + ff, t[p + "ln2_g"], t[p + "ln2_b"])
        layer_caches.append(
            {
                "attn": attn_cache, "mask_a": mask_a, "ln1": ln1_cache,
                "h1": h1, "pre": pre, "act": act, "mask_f": mask_f,
                "ln2": ln2_cache,
            }
        )
        h = h2
    return h, {"layers": layer_caches, "rel_gather": rel_gather, "n": n}


def encoder_backward(dr, enc_cache, params):
    config = params.config
    t = params.tensors
    n = enc_cache["n"]
    rel_gather = enc_cache["rel_gather"]
    grads = {}
    drel_total = np.zeros_like(t["rel_emb"])
    rel_idx = _rel_index(n, config.rel_clip)
    dh = dr
    for l in reversed(range(config.n_layers)):
        p = f"layers.{l}."
        c = enc_cache["layers"][l]
        dsum2, dg2, db2 = _layer_norm_backward(dh, c["ln2"], t[p + "ln2_g"])
        grads[p + "ln2_g"] = dg2
        grads[p + "ln2_b"] = db2
        dff = dsum2.copy()
        if c["mask_f"] is not None:
            dff = dff * c["mask_f"]
        grads[p + "w2"] = c["act"].T @ dff
        grads[p + "b2"] = dff.sum(axis=0)
        dact = dff @ t[p + "w2"].T
        dpre = dact * _gelu_grad(c["pre"])
        grads[p + "w1"] = c["h1"].T @ dpre
        grads[p + "b1"] = dpre.sum(axis=0)
        dh1 = dsum2 + dpre @ t[p + "w1"].T
        dsum1, dg1, db1 = _layer_norm_backward(dh1, c["ln1"], t[p + "ln1_g"])
        grads[p + "ln1_g"] = dg1
        grads[p + "ln1_b"] = db1
        dattn_out = dsum1.copy()
        if c["mask_a"] is not None:
            dattn_out = dattn_out * c["mask_a"]
        dh_attn, drel, attn_grads = _attention_backward(
            dattn_out, c["attn"], params, p, config, rel_gather
        )
        grads.update(attn_grads)
        # scatter per-pair relative gradients back to the clipped table
        np.add.at(drel_total, rel_idx, drel)
        dh = dsum1 + dh_attn
    grads["rel_emb"] = drel_total
    return dh, grads


def _allowed_mask(n: int, lookahead: Optional[int]) -> np.ndarray:
    allowed = np.zeros((n, n + 1), dtype=bool)
    cols = np.arange(n)
    for i in range(n):
        ok = cols > i
        if lookahead is not None:
            ok &= cols <= i + lookahead
        allowed[i, :n] = ok
    allowed[:, n] = True
    return allowed


def head_forward(
    r: np.ndarray,
    params: ModelParameters,
    lookahead: Optional[int] = None,
):
    """Score representations against the decision representatives and
    soft-max each row over its allowed links (forward within lookahead,
    plus terminal).  Returns (p, cache)."""
    t = params.tensors
    n = r.shape[0]
    q_full = r @ t["head_T"].T + t["head_b"]
    # columns: link targets 0..n-1, then the terminal column
    logits = np.empty((n, n + 1))
    logits[:, :n] = q_full[:, :n]
    logits[:, n] = q_full[:, params.config.seq_len]
    allowed = _allowed_mask(n, lookahead)
    masked = np.where(allowed, logits, -np.inf)
    rowmax = masked.max(axis=1, keepdims=True)
    expd = np.where(allowed, np.exp(masked - rowmax), 0.0)
    denom = expd.sum(axis=1, keepdims=True)
    p = expd / denom
    logp = np.where(
        allowed, masked - rowmax - np.log(denom), -np.inf
    )
    cache = {"r": r, "q_full": q_full, "allowed": allowed, "p": p, "logp": logp}
    return p, cache


def head_backward(dlogits, head_cache, params):
    """dlogits is the gradient with respect to the masked row soft-max
    logits (already zero on masked entries)."""
    t = params.tensors
    n = dlogits.shape[0]
    seq_len = params.config.seq_len
    dq_full = np.zeros((n, seq_len + 1))
    dq_full[:, :n] = dlogits[:, :n]
    dq_full[:, seq_len] = dlogits[:, n]
    grads = {
        "head_T": dq_full.T @ head_cache["r"],
        "head_b": dq_full.sum(axis=0),
    }
    dr = dq_full @ t["head_T"]
    return dr, grads


def model_forward_raw(
    params: ModelParameters,
    x_norm: np.ndarray,
    lookahead: Optional[int] = None,
    dropout_rng: Optional[np.random.Generator] = None,
):
    """Full forward pass returning (p, cache); p is the (N, N+1) soft
    assignment array."""
    tokens = quantize(x_norm, params.config.n_quant)
    n = tokens.size
    if n > params.config.seq_len:
        raise ValueError(
            f"sequence length {n} exceeds seq_len {params.config.seq_len}"
        )
    emb = params.tensors["tok_emb"][tokens] + params.tensors["pos_emb"][:n]
    r, enc_cache = encoder_forward(emb, params, dropout_rng)
    p, head_cache = head_forward(r, params, lookahead)
    cache = {"tokens": tokens, "enc": enc_cache, "head": head_cache, "n": n}
    return p, cache


def model_forward(
    params: ModelParameters,
    x_norm: np.ndarray,
    lookahead: Optional[int] = None,
) -> AssignmentMatrix:
    p, _ = model_forward_raw(params, x_norm, lookahead)
    return AssignmentMatrix(p, kind="soft")


# --- loss ---


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    l2: float
    l3: float
    l4: float
    total: float
    lam2: float
    lam3: float
    lam4: float

    def __post_init__(self):
        expect = self.ce + self.lam2 * self.l2 + self.lam3 * self.l3 + self.lam4 * self.l4
        if abs(self.total - expect) > 1e-9 * (1.0 + abs(expect)):
            raise ValueError("total does not match component sum")


def _loss_terms(p: np.ndarray, y: np.ndarray, logp: Optional[np.ndarray] = None):
    n = p.shape[0]
    if logp is None:
        logp = np.log(np.maximum(p, LOG_EPS))
    else:
        logp = np.maximum(logp, np.log(LOG_EPS))
    ce = -float(np.sum(y * np.where(y > 0, logp, 0.0))) / n
    colsum = p[:, :n].sum(axis=0)
    l2 = float(np.sum(np.maximum(0.0, colsum - 1.0))) / n
    balance = float(p[:, n].sum() - np.sum(1.0 - colsum))
    l3 = balance * balance
    row_l1 = p.sum(axis=1)
    row_l2 = np.sqrt(np.sum(p * p, axis=1))
    l4 = float(np.sum(row_l1 - row_l2)) / n
    return ce, l2, l3, l4, balance, colsum, row_l2


def flow_loss(
    p,
    y,
    lam2: float = LAMBDA_COL,
    lam3: float = LAMBDA_BALANCE,
    lam4: float = LAMBDA_ONEHOT,
) -> LossBreakdown:
    """Cross-entropy over true links plus the feasibility penalties.

    ce averages -log p over rows (terminal links included); l2 hinges
    column overcommitment; l3 squares the start/terminal flow imbalance;
    l4 is the mean L1-L2 gap, zero exactly on one-hot rows.
    """
    p = np.asarray(getattr(p, "values", p), dtype=np.float64)
    y = np.asarray(getattr(y, "values", y), dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("p and y must share a shape")
    ce, l2, l3, l4, _, _, _ = _loss_terms(p, y)
    total = ce + lam2 * l2 + lam3 * l3 + lam4 * l4
    return LossBreakdown(ce, l2, l3, l4, total, lam2, lam3, lam4)


def _loss_and_logit_grad(p, y, allowed, logp, lam2, lam3, lam4):
    """Loss terms plus the gradient with respect to the soft-max logits."""
    n = p.shape[0]
    ce, l2, l3, l4, balance, colsum, row_l2 = _loss_terms(p, y, logp)
    total = ce + lam2 * l2 + lam3 * l3 + lam4 * l4

    # ce directly in logit space; rows whose target fell outside the mask
    # hit the clamp and contribute no gradient
    target_ok = (y * allowed).sum(axis=1) > 0
    dlogits = (p - y) * (target_ok[:, None] / n)

    # penalties differentiate through p, then the masked soft-max jacobian
    gp = np.zeros_like(p)
    gp[:, :n] += (lam2 / n) * (colsum > 1.0)[None, :]
    gp += lam3 * 2.0 * balance
    gp += (lam4 / n) * (1.0 - p / np.maximum(row_l2[:, None], LOG_EPS))
    gp = np.where(allowed, gp, 0.0)
    dlogits += p * (gp - np.sum(p * gp, axis=1, keepdims=True))
    dlogits = np.where(allowed, dlogits, 0.0)
    breakdown = LossBreakdown(ce, l2, l3, l4, total, lam2, lam3, lam4)
    return breakdown, dlogits


def model_backward(
    params: ModelParameters,
    batch: list,
    lam2: float = LAMBDA_COL,
    lam3: float = LAMBDA_BALANCE,
    lam4: float = LAMBDA_ONEHOT,
    lookahead: Optional[int] = None,
    dropout_rng: Optional[np.random.Generator] = None,
):
    """Mean loss and exact parameter gradients over a batch of
    (x_norm, y) pairs; y is the hard (N, N+1) link matrix."""
    if not batch:
        raise ValueError("batch must be nonempty")
    config = params.config
    grads = zero_gradients(config)
    sums = np.zeros(5)
    b = len(batch)
    for x_norm, y in batch:
        y = np.asarray(getattr(y, "values", y), dtype=np.float64)
        p, cache = model_forward_raw(params, x_norm, lookahead, dropout_rng)
        breakdown, dlogits = _loss_and_logit_grad(
            p, y, cache["head"]["allowed"], cache["head"]["logp"],
            lam2, lam3, lam4,
        )
        if not np.isfinite(breakdown.total):
            parts = {
                "ce": breakdown.ce, "l2": breakdown.l2,
                "l3": breakdown.l3, "l4": breakdown.l4,
            }
            bad = [k for k, v in parts.items() if not np.isfinite(v)]
            raise FloatingPointError(f"non-finite loss terms: {bad}")
        sums += (
            breakdown.ce, breakdown.l2, breakdown.l3, breakdown.l4,
            breakdown.total,
        )
        dr, head_grads = head_backward(dlogits / b, cache["head"], params)
        demb, enc_grads = encoder_backward(dr, cache["enc"], params)
        for k, v in head_grads.items():
            grads[k] += v
        for k, v in enc_grads.items():
            grads[k] += v
        np.add.at(grads["tok_emb"], cache["tokens"], demb)
        grads["pos_emb"][: cache["n"]] += demb
    sums /= b
    mean = LossBreakdown(
        sums[0], sums[1], sums[2], sums[3], sums[4], lam2, lam3, lam4
    )
    return mean, grads


def batch_loss(
    params: ModelParameters,
    batch: list,
    lam2: float = LAMBDA_COL,
    lam3: float = LAMBDA_BALANCE,
    lam4: float = LAMBDA_ONEHOT,
    lookahead: Optional[int] = None,
) -> LossBreakdown:
    """Mean loss over a batch without gradients (deterministic, no
    dropout); matches the value model_backward reports."""
    sums = np.zeros(5)
    for x_norm, y in batch:
        y = np.asarray(getattr(y, "values", y), dtype=np.float64)
        p, cache = model_forward_raw(params, x_norm, lookahead)
        ce, l2, l3, l4, _, _, _ = _loss_terms(p, y, cache["head"]["logp"])
        total = ce + lam2 * l2 + lam3 * l3 + lam4 * l4
        sums += (ce, l2, l3, l4, total)
    sums /= len(batch)
    return LossBreakdown(
        sums[0], sums[1], sums[2], sums[3], sums[4], lam2, lam3, lam4
    )


def finite_difference_check(
    params: ModelParameters,
    batch: list,
    lam2: float = LAMBDA_COL,
    lam3: float = LAMBDA_BALANCE,
    lam4: float = LAMBDA_ONEHOT,
    lookahead: Optional[int] = None,
    step: float = 1e-5,
    floor: float = 1e-4,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over every parameter entry.

    The denominator is floored so that entries whose true gradient is far
    below the finite-difference noise floor compare absolutely; any real
    adjoint bug shows up orders of magnitude above the floor.
    """
    _, grads = model_backward(
        params, batch, lam2, lam3, lam4, lookahead
    )
    worst = 0.0
    for name, arr in params.tensors.items():
        flat = arr.ravel()
        gflat = grads[name].ravel()
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + step
            up = batch_loss(params, batch, lam2, lam3, lam4, lookahead).total
            flat[idx] = keep - step
            down = batch_loss(params, batch, lam2, lam3, lam4, lookahead).total
            flat[idx] = keep
            fd = (up - down) / (2.0 * step)
            err = abs(gflat[idx] - fd) / max(abs(gflat[idx]), abs(fd), floor)
            worst = max(worst, err)
    return worst


# --- checkpoint container ---


def save_checkpoint(path, params: ModelParameters, metadata: dict) -> None:
    """Binary container: magic, length-prefixed JSON header, raw float64
    blobs.  Deterministic bytes for identical inputs."""
    names = sorted(params.tensors)
    entries = []
    offset = 0
    for name in names:
        arr = params.tensors[name]
        nbytes = arr.size * 8
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        offset += nbytes
    header = {
        "version": 1,
        "config": asdict(params.config),
        "metadata": metadata,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(
                np.ascontiguousarray(
                    params.tensors[name], dtype="<f8"
                ).tobytes()
            )


def load_checkpoint(path):
    """Read a checkpoint back: (ModelParameters, metadata dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        config = ModelConfig(**header["config"])
        tensors = {}
        for entry in header["tensors"]:
            raw = fh.read(entry["nbytes"])
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(
                entry["shape"]
            ).copy()
    return ModelParameters(config, tensors), header["metadata"]
