"""Tests for the soft assignment model: forward contracts, loss closed
forms, and hand-derived gradients against finite differences."""

import numpy as np
import pytest

from pulsesort.core import AssignmentMatrix, PulseSequence, labels_to_assignment
from pulsesort.model import (
    DESK_CONFIG,
    PAPER_CONFIG,
    ModelConfig,
    ModelParameters,
    batch_loss,
    encoder_forward,
    finite_difference_check,
    flow_loss,
    head_forward,
    init_parameters,
    load_checkpoint,
    model_backward,
    model_forward,
    model_forward_raw,
    parameter_shapes,
    quantize,
    quantize_embed,
    save_checkpoint,
)

TINY = ModelConfig(
    seq_len=6, d_model=8, n_layers=2, n_heads=2, d_ff=16, n_quant=11,
    rel_clip=4, dropout=0.0,
)


@pytest.fixture(scope="module")
def tiny_params():
    return init_parameters(TINY, np.random.default_rng(0))


def random_case(rng, n=6):
    x = rng.random(n)
    toas = np.cumsum(rng.uniform(1.0, 5.0, n))
    toas -= toas[0]
    labels = rng.integers(0, 2, n)
    y = labels_to_assignment(PulseSequence(toas, labels)).values
    return x, y


# --- config and parameters ---


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_quant=1)
    with pytest.raises(ValueError):
        ModelConfig(seq_len=1)
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.0)


def test_presets():
    assert DESK_CONFIG.d_model == 64
    assert PAPER_CONFIG.seq_len == 256
    assert PAPER_CONFIG.n_quant == 5001


def test_init_parameter_shapes(tiny_params):
    shapes = parameter_shapes(TINY)
    assert set(tiny_params.tensors) == set(shapes)
    assert tiny_params.tensors["rel_emb"].shape == (9, 4)
    assert tiny_params.tensors["head_T"].shape == (7, 8)
    assert np.all(tiny_params.tensors["layers.0.ln1_g"] == 1.0)
    assert np.all(tiny_params.tensors["layers.1.b1"] == 0.0)


def test_parameters_validation(tiny_params):
    bad = dict(tiny_params.tensors)
    del bad["head_b"]
    with pytest.raises(ValueError):
        ModelParameters(TINY, bad)
    bad = dict(tiny_params.tensors)
    bad["head_b"] = np.zeros(3)
    with pytest.raises(ValueError):
        ModelParameters(TINY, bad)
    bad = dict(tiny_params.tensors)
    bad["head_b"] = np.full(7, np.nan)
    with pytest.raises(ValueError):
        ModelParameters(TINY, bad)


# --- quantization ---


def test_quantize_endpoints():
    assert quantize(np.array([0.0]), 501)[0] == 0
    assert quantize(np.array([1.0]), 501)[0] == 500
    assert quantize(np.array([0.5]), 501)[0] == 250


def test_quantize_rejects_out_of_range():
    with pytest.raises(ValueError):
        quantize(np.array([-0.1]), 501)
    with pytest.raises(ValueError):
        quantize(np.array([1.1]), 501)


def test_equal_inputs_share_embedding(tiny_params):
    rows = quantize_embed(np.array([0.3, 0.3]), tiny_params)
    assert np.array_equal(rows[0], rows[1])


# --- encoder ---


def test_zero_weights_reduce_to_normalized_input(tiny_params):
    tensors = {k: v.copy() for k, v in tiny_params.tensors.items()}
    for name in tensors:
        if ".w" in name or ".b" in name:
            tensors[name] = np.zeros_like(tensors[name])
        if name.endswith("ln1_g") or name.endswith("ln2_g"):
            tensors[name] = np.ones_like(tensors[name])
        if name.endswith("ln1_b") or name.endswith("ln2_b"):
            tensors[name] = np.zeros_like(tensors[name])
    params = ModelParameters(TINY, tensors)
    emb = np.random.default_rng(3).normal(size=(5, 8))
    out, _ = encoder_forward(emb, params)
    mu = emb.mean(axis=1, keepdims=True)
    ref = (emb - mu) / np.sqrt(emb.var(axis=1, keepdims=True) + 1e-12)
    assert np.allclose(out, ref, atol=1e-6)


def test_relative_clipping_equalizes_far_logits():
    cfg = ModelConfig(
        seq_len=12, d_model=8, n_layers=1, n_heads=2, d_ff=16, n_quant=11,
        rel_clip=3, dropout=0.0,
    )
    params = init_parameters(cfg, np.random.default_rng(4))
    params.tensors["pos_emb"][:] = 0.0
    emb = quantize_embed(np.full(12, 0.5), params) + params.tensors["pos_emb"][:12]
    _, cache = encoder_forward(emb, params)
    scores = cache["layers"][0]["attn"]["scores"]
    # identical tokens, no positional term: all logits at clipped distance
    # from row 0 must coincide
    far = scores[:, 0, cfg.rel_clip:]
    assert np.allclose(far, far[:, :1], atol=1e-12)


def test_single_sample_forward(tiny_params):
    p, _ = model_forward_raw(tiny_params, np.array([0.4]))
    assert p.shape == (1, 2)
    assert np.allclose(p, [[0.0, 1.0]])


def test_encoder_rejects_overlong(tiny_params):
    with pytest.raises(ValueError):
        model_forward_raw(tiny_params, np.linspace(0, 1, TINY.seq_len + 1))


# --- head ---


def test_head_rows_sum_to_one(tiny_params):
    rng = np.random.default_rng(5)
    for n in (2, 4, 6):
        p, _ = model_forward_raw(tiny_params, rng.random(n))
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(np.tril(p[:, :n]) == 0.0)


def test_head_lookahead_masks_far_links(tiny_params):
    p, _ = model_forward_raw(tiny_params, np.random.default_rng(6).random(6), lookahead=2)
    for i in range(6):
        for j in range(6):
            if j <= i or j - i > 2:
                assert p[i, j] == 0.0


def test_head_saturation(tiny_params):
    tensors = {k: v.copy() for k, v in tiny_params.tensors.items()}
    tensors["head_b"] = tensors["head_b"].copy()
    tensors["head_b"][2] += 20.0
    params = ModelParameters(TINY, tensors)
    p, _ = model_forward_raw(params, np.random.default_rng(7).random(6))
    assert p[0, 2] > 0.999
    assert p[1, 2] > 0.999


def test_model_forward_returns_soft_assignment(tiny_params):
    a = model_forward(tiny_params, np.random.default_rng(8).random(6))
    assert isinstance(a, AssignmentMatrix)
    assert a.kind == "soft"


# --- loss ---


def test_loss_zero_on_exact_match():
    labels = np.array([0, 1, 0, 1])
    toas = np.array([0.0, 1.0, 2.0, 3.0])
    y = labels_to_assignment(PulseSequence(toas, labels)).values
    out = flow_loss(y, y)
    assert out.ce == 0.0
    assert out.l2 == 0.0
    assert out.l3 == 0.0
    assert out.l4 == pytest.approx(0.0, abs=1e-12)
    assert out.total == pytest.approx(0.0, abs=1e-12)


def test_loss_uniform_row_l4():
    n = 3
    p = np.zeros((n, n + 1))
    p[0, 1:] = 1.0 / 3.0
    p[1, 2] = 1.0
    p[2, 3] = 1.0
    y = np.zeros((n, n + 1))
    y[0, 1] = y[1, 2] = y[2, 3] = 1.0
    out = flow_loss(p, y)
    expect = (1.0 - 1.0 / np.sqrt(3.0)) / n
    assert out.l4 == pytest.approx(expect, abs=1e-12)


def test_loss_double_claim_l2():
    n = 3
    p = np.zeros((n, n + 1))
    p[0, 2] = 1.0
    p[1, 2] = 1.0
    p[2, 3] = 1.0
    y = p.copy()
    out = flow_loss(p, y)
    assert out.l2 == pytest.approx(1.0 / n, abs=1e-12)


def test_loss_matches_straight_line_oracle():
    rng = np.random.default_rng(11)
    n = 5
    logits = rng.normal(size=(n, n + 1))
    allowed = np.zeros((n, n + 1), dtype=bool)
    for i in range(n):
        allowed[i, i + 1 : n] = True
        allowed[i, n] = True
    masked = np.where(allowed, logits, -np.inf)
    e = np.exp(masked - masked.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    toas = np.cumsum(rng.uniform(1, 4, n))
    y = labels_to_assignment(
        PulseSequence(toas - toas[0], rng.integers(0, 2, n))
    ).values
    lam2, lam3, lam4 = 10.0, 1.0, 5.0
    out = flow_loss(p, y, lam2, lam3, lam4)

    # independent straight-line evaluation
    ce = 0.0
    for i in range(n):
        for j in range(n + 1):
            if y[i, j] > 0:
                ce -= y[i, j] * np.log(max(p[i, j], 1e-12))
    ce /= n
    l2 = sum(
        max(0.0, sum(p[i, j] for i in range(n)) - 1.0) for j in range(n)
    ) / n
    start = sum(p[i, n] for i in range(n))
    free = sum(1.0 - sum(p[i, j] for i in range(n)) for j in range(n))
    l3 = (start - free) ** 2
    l4 = 0.0
    for i in range(n):
        l1n = sum(p[i, j] for j in range(n + 1))
        l2n = np.sqrt(sum(p[i, j] ** 2 for j in range(n + 1)))
        l4 += l1n - l2n
    l4 /= n
    total = ce + lam2 * l2 + lam3 * l3 + lam4 * l4
    assert out.ce == pytest.approx(ce, rel=1e-12, abs=1e-15)
    assert out.l2 == pytest.approx(l2, rel=1e-12, abs=1e-15)
    assert out.l3 == pytest.approx(l3, rel=1e-12, abs=1e-15)
    assert out.l4 == pytest.approx(l4, rel=1e-12, abs=1e-15)
    assert out.total == pytest.approx(total, rel=1e-12, abs=1e-15)


def test_loss_permutation_covariant():
    toas = np.array([0.0, 1.0, 2.5, 3.0, 4.0])
    labels = np.array([0, 1, 1, 0, 1])
    y_a = labels_to_assignment(PulseSequence(toas, labels)).values
    y_b = labels_to_assignment(PulseSequence(toas, 1 - labels)).values
    # relabeling emitters leaves the link structure untouched
    assert np.array_equal(y_a, y_b)
    rng = np.random.default_rng(12)
    p = np.zeros((5, 6))
    for i in range(5):
        w = rng.random(5 - i)
        p[i, i + 1 :] = w / w.sum()
    assert flow_loss(p, y_a).total == flow_loss(p, y_b).total


def test_loss_mismatched_shapes():
    with pytest.raises(ValueError):
        flow_loss(np.zeros((3, 4)), np.zeros((2, 3)))


# --- gradients ---


def test_unused_blocks_get_zero_gradient(tiny_params):
    rng = np.random.default_rng(13)
    x, y = random_case(rng)
    _, grads = model_backward(tiny_params, [(x, y)], lam2=0.0, lam3=0.0, lam4=0.0)
    tokens = quantize(x, TINY.n_quant)
    unseen = sorted(set(range(TINY.n_quant)) - set(tokens.tolist()))
    assert np.all(grads["tok_emb"][unseen] == 0.0)
    # no row can link to position 0, so its representative never learns
    assert np.all(grads["head_T"][0] == 0.0)


def test_batch_gradient_linearity(tiny_params):
    rng = np.random.default_rng(14)
    a = random_case(rng)
    b = random_case(rng)
    _, g_dup = model_backward(tiny_params, [a, a, b])
    _, g_a = model_backward(tiny_params, [a])
    _, g_b = model_backward(tiny_params, [b])
    for name in g_dup:
        expect = (2.0 * g_a[name] + g_b[name]) / 3.0
        assert np.allclose(g_dup[name], expect, atol=1e-12)


def test_gradients_match_finite_differences(tiny_params):
    rng = np.random.default_rng(15)
    batch = [random_case(rng), random_case(rng, n=5)]
    err = finite_difference_check(tiny_params, batch)
    assert err < 1e-4


def test_gradients_match_finite_differences_masked(tiny_params):
    rng = np.random.default_rng(16)
    batch = [random_case(rng)]
    err = finite_difference_check(tiny_params, batch, lookahead=1)
    assert err < 1e-4


def test_backward_loss_matches_batch_loss(tiny_params):
    rng = np.random.default_rng(17)
    batch = [random_case(rng), random_case(rng)]
    mean, _ = model_backward(tiny_params, batch)
    plain = batch_loss(tiny_params, batch)
    assert mean.total == pytest.approx(plain.total, rel=1e-12)


def test_backward_rejects_empty_batch(tiny_params):
    with pytest.raises(ValueError):
        model_backward(tiny_params, [])


# --- dropout ---


def test_dropout_seeded_and_off_at_inference():
    cfg = ModelConfig(
        seq_len=6, d_model=8, n_layers=2, n_heads=2, d_ff=16, n_quant=11,
        rel_clip=4, dropout=0.5,
    )
    params = init_parameters(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).random(6)
    p1, _ = model_forward_raw(params, x, dropout_rng=np.random.default_rng(42))
    p2, _ = model_forward_raw(params, x, dropout_rng=np.random.default_rng(42))
    p3, _ = model_forward_raw(params, x, dropout_rng=np.random.default_rng(43))
    assert np.array_equal(p1, p2)
    assert not np.array_equal(p1, p3)
    q1, _ = model_forward_raw(params, x)
    q2, _ = model_forward_raw(params, x)
    assert np.array_equal(q1, q2)


# --- checkpoints ---


def test_checkpoint_round_trip(tmp_path, tiny_params):
    path = tmp_path / "model.ckpt"
    meta = {"step": 12, "seed": 7, "lambdas": [10.0, 1.0, 5.0]}
    save_checkpoint(path, tiny_params, meta)
    loaded, meta_back = load_checkpoint(path)
    assert loaded.config == TINY
    assert meta_back == meta
    for name, arr in tiny_params.tensors.items():
        assert np.array_equal(loaded.tensors[name], arr)


def test_checkpoint_bytes_deterministic(tmp_path, tiny_params):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, tiny_params, {"step": 1})
    save_checkpoint(b, tiny_params, {"step": 1})
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(path)
