"""Model math tests: attention, normalization, loss, masking, and checkpoints."""

import math

import numpy as np
import pytest

from apifill.bpe import BOS_ID
from apifill.model import (
    LN_EPS,
    CheckpointError,
    ModelConfig,
    attention,
    backward,
    cross_entropy,
    decoder_logits,
    encode_inputs,
    ffn,
    forward_ids,
    init_params,
    layer_norm,
    load_params,
    save_params,
)


def small_config(**kw):
    base = dict(vocab_size=12, encoder_layers=2, decoder_layers=2, hidden_size=8,
                heads=2, ffn_size=16, max_input_length=6, max_output_length=5,
                seed=3, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def small_batch(rng=None):
    rng = rng or np.random.default_rng(0)
    input_ids = rng.integers(5, 12, size=(3, 6))
    input_len = np.array([6, 4, 2])
    for r, ln in zip(input_ids, input_len):
        r[ln:] = 0
    target_ids = rng.integers(5, 12, size=(3, 5))
    target_len = np.array([5, 3, 1])
    for r, ln in zip(target_ids, target_len):
        r[ln:] = 0
    return input_ids, input_len, target_ids, target_len


# -- attention --------------------------------------------------------------

def test_attention_two_key_hand_case():
    q = np.array([[[1.0, 0.0]]])
    k = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    v = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    out, w = attention(q, k, v)
    # softmax of [1/sqrt(2), 0]
    e = math.exp(1 / math.sqrt(2))
    np.testing.assert_allclose(w[0, 0], [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    np.testing.assert_allclose(w[0, 0], [0.66976155, 0.33023845], atol=1e-6)
    np.testing.assert_allclose(out, w @ v, atol=0)


def test_attention_masked_key_gets_zero_weight():
    q = np.array([[[1.0, 1.0]]])
    k = np.array([[[1.0, 0.0], [9.0, 9.0]]])
    v = np.array([[[2.0, 0.0], [0.0, 7.0]]])
    mask = np.array([[[False, True]]])
    out, w = attention(q, k, v, mask=mask)
    assert w[0, 0, 1] == 0.0
    assert w[0, 0, 0] == 1.0
    np.testing.assert_array_equal(out[0, 0], v[0, 0])


def test_attention_single_key_is_identity():
    q = np.array([[[5.0, -3.0]]])
    k = np.array([[[0.1, 0.2]]])
    v = np.array([[[4.0, 4.5]]])
    out, w = attention(q, k, v)
    assert w[0, 0, 0] == 1.0
    np.testing.assert_array_equal(out, v)


def test_attention_zero_query_is_uniform():
    t = 4
    q = np.zeros((1, 1, 3))
    k = np.random.default_rng(1).normal(size=(1, t, 3))
    v = np.eye(t)[None]
    _, w = attention(q, k, v)
    np.testing.assert_allclose(w[0, 0], np.full(t, 1 / t), atol=1e-15)


# -- layer norm and ffn -----------------------------------------------------

def test_layer_norm_hand_case():
    x = np.array([1.0, 2.0, 3.0])
    got = layer_norm(x, np.ones(3), np.zeros(3))
    s = 1.0 / math.sqrt(2.0 / 3.0 + LN_EPS)
    np.testing.assert_allclose(got, [-s, 0.0, s], atol=1e-12)


def test_layer_norm_affine_params():
    x = np.array([[0.0, 4.0]])
    got = layer_norm(x, np.array([2.0, 2.0]), np.array([1.0, -1.0]))
    # normalized row is [-2, 2] / sqrt(4 + eps); scale then offset
    s = 4.0 / math.sqrt(4.0 + LN_EPS)
    np.testing.assert_allclose(got, [[1.0 - s, -1.0 + s]], atol=1e-12)


def test_layer_norm_constant_row_maps_to_offset():
    x = np.full((2, 4), 3.5)
    got = layer_norm(x, np.ones(4), np.full(4, 0.25))
    np.testing.assert_allclose(got, 0.25, atol=1e-9)


def test_ffn_hand_case_with_relu_clamp():
    x = np.array([[1.0, -1.0]])
    w1 = np.eye(2)
    b1 = np.zeros(2)
    w2 = np.array([[1.0], [1.0]])
    b2 = np.array([0.5])
    # hidden = relu([1, -1]) = [1, 0]
    np.testing.assert_array_equal(ffn(x, w1, b1, w2, b2), [[1.5]])


def test_ffn_bias_only_path():
    x = np.zeros((1, 3))
    w1 = np.zeros((3, 2))
    b1 = np.array([2.0, -2.0])
    w2 = np.array([[3.0], [100.0]])
    b2 = np.array([-1.0])
    # relu([2, -2]) = [2, 0] -> 2*3 - 1
    np.testing.assert_array_equal(ffn(x, w1, b1, w2, b2), [[5.0]])


# -- loss -------------------------------------------------------------------

def test_uniform_logits_loss_is_length_times_log_vocab():
    logits = np.zeros((1, 2, 4))
    per_example, probs, mask = cross_entropy(logits, np.array([[1, 3]]), np.array([2]))
    np.testing.assert_allclose(per_example, [2 * math.log(4)], atol=1e-12)
    np.testing.assert_allclose(probs, 0.25, atol=1e-12)
    assert mask.all()


def test_confident_logits_loss_near_zero():
    logits = np.zeros((1, 3, 5))
    target = np.array([[2, 0, 4]])
    for t, tid in enumerate(target[0]):
        logits[0, t, tid] = 50.0
    per_example, _, _ = cross_entropy(logits, target, np.array([3]))
    assert per_example[0] < 1e-6


def test_loss_ignores_positions_past_target_length():
    logits = np.zeros((1, 4, 3))
    logits[0, 2:] = 1e6  # wild values only in the ignored tail
    base = np.zeros((1, 4, 3))
    a, _, _ = cross_entropy(logits, np.array([[1, 2, 0, 0]]), np.array([2]))
    b, _, _ = cross_entropy(base, np.array([[1, 2, 0, 0]]), np.array([2]))
    np.testing.assert_array_equal(a, b)


# -- full model behavior ----------------------------------------------------

def test_embedding_injection_is_identity():
    cfg = small_config()
    params = init_params(cfg)
    batch = small_batch()
    trace = forward_ids(params, cfg, *batch)
    again = forward_ids(params, cfg, *batch, override_embeddings=trace.embeddings.copy())
    assert again.loss == trace.loss
    np.testing.assert_array_equal(again.logits, trace.logits)


def test_override_shape_mismatch_rejected():
    cfg = small_config()
    params = init_params(cfg)
    batch = small_batch()
    bad = np.zeros((1, 6, cfg.hidden_size))
    with pytest.raises(ValueError):
        forward_ids(params, cfg, *batch, override_embeddings=bad)


def test_decoder_is_causal():
    cfg = small_config()
    params = init_params(cfg)
    input_ids, input_len, target_ids, target_len = small_batch()
    base = forward_ids(params, cfg, input_ids, input_len, target_ids, target_len)
    changed = target_ids.copy()
    t = 2
    changed[0, t] = (changed[0, t] - 5 + 1) % 7 + 5
    other = forward_ids(params, cfg, input_ids, input_len, changed, target_len)
    # target_ids[t] enters the decoder input at position t+1, so logits at
    # positions <= t must not move
    np.testing.assert_array_equal(base.logits[0, : t + 1], other.logits[0, : t + 1])
    assert not np.array_equal(base.logits[0, t + 1 :], other.logits[0, t + 1 :])


def test_input_pad_content_is_inert():
    cfg = small_config()
    params = init_params(cfg)
    input_ids, input_len, target_ids, target_len = small_batch()
    noisy = input_ids.copy()
    noisy[1, 4:] = 11  # ids past true_length
    noisy[2, 2:] = 7
    a = forward_ids(params, cfg, input_ids, input_len, target_ids, target_len)
    b = forward_ids(params, cfg, noisy, input_len, target_ids, target_len)
    assert a.loss == b.loss
    np.testing.assert_array_equal(a.logits, b.logits)


def test_target_pad_content_does_not_move_loss():
    cfg = small_config()
    params = init_params(cfg)
    input_ids, input_len, target_ids, target_len = small_batch()
    noisy = target_ids.copy()
    noisy[1, 3:] = 9
    noisy[2, 1:] = 6
    a = forward_ids(params, cfg, input_ids, input_len, target_ids, target_len)
    b = forward_ids(params, cfg, input_ids, input_len, noisy, target_len)
    np.testing.assert_array_equal(a.per_example_loss, b.per_example_loss)
    assert a.loss == b.loss


def test_zeroed_projections_reduce_to_final_norm_of_embeddings():
    cfg = small_config()
    params = init_params(cfg)
    for name in list(params):
        if name.endswith((".wo", ".w2", ".b2")):
            params[name] = np.zeros_like(params[name])
    input_ids = np.array([[5, 6, 7, 0, 0, 0]])
    input_len = np.array([3])
    enc_out, _ = encode_inputs(params, cfg, input_ids, input_len)
    x = params["embed.tok"][input_ids] + params["embed.pos_enc"][:6]
    expected = layer_norm(x, params["enc.final.scale"], params["enc.final.offset"])
    np.testing.assert_array_equal(enc_out, expected)


def test_incremental_logits_match_teacher_forcing():
    cfg = small_config()
    params = init_params(cfg)
    input_ids, input_len, target_ids, target_len = small_batch()
    trace = forward_ids(params, cfg, input_ids, input_len, target_ids, target_len)
    enc_out, enc_invalid = encode_inputs(params, cfg, input_ids, input_len)
    dec_in = np.concatenate([np.full((3, 1), BOS_ID, dtype=target_ids.dtype),
                             target_ids[:, :-1]], axis=1)
    np.testing.assert_array_equal(
        decoder_logits(params, cfg, enc_out, enc_invalid, dec_in), trace.logits)


def test_decoder_logits_broadcast_single_encoding():
    cfg = small_config()
    params = init_params(cfg)
    input_ids = np.array([[5, 6, 7, 0, 0, 0]])
    input_len = np.array([3])
    enc_out, enc_invalid = encode_inputs(params, cfg, input_ids, input_len)
    dec_in = np.array([[BOS_ID, 5], [BOS_ID, 6], [BOS_ID, 7]])
    wide = decoder_logits(params, cfg, enc_out, enc_invalid, dec_in)
    for row in range(3):
        narrow = decoder_logits(params, cfg, enc_out, enc_invalid, dec_in[row : row + 1])
        np.testing.assert_array_equal(wide[row], narrow[0])


def test_backward_requires_cache_and_single_use():
    cfg = small_config()
    params = init_params(cfg)
    batch = small_batch()
    trace = forward_ids(params, cfg, *batch)
    backward(trace)
    with pytest.raises(RuntimeError):
        backward(trace)
    lean = forward_ids(params, cfg, *batch, want_cache=False)
    with pytest.raises(RuntimeError):
        backward(lean)


# -- construction and persistence -------------------------------------------

def test_init_is_seeded():
    cfg = small_config()
    a, b = init_params(cfg), init_params(cfg)
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    c = init_params(small_config(seed=4))
    assert any(not np.array_equal(a[n], c[n]) for n in a)


def test_init_shapes():
    cfg = small_config()
    params = init_params(cfg)
    assert params["embed.tok"].shape == (12, 8)
    assert params["embed.pos_enc"].shape == (6, 8)
    assert params["embed.pos_dec"].shape == (5, 8)
    assert params["out.w"].shape == (8, 12)
    assert params["out.b"].shape == (12,)
    assert params["enc.0.ffn.w1"].shape == (8, 16)
    assert all(v.dtype == np.float64 for v in params.values())


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(hidden_size=9)  # not divisible by heads
    with pytest.raises(ValueError):
        small_config(vocab_size=0)
    with pytest.raises(ValueError):
        small_config(dtype="float16")


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    params = init_params(cfg)
    path = tmp_path / "model.bin"
    save_params(path, params, cfg)
    loaded, loaded_cfg = load_params(path, expected_config=cfg)
    assert loaded_cfg == cfg
    assert list(loaded) == list(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])
        assert loaded[name].dtype == params[name].dtype


def test_checkpoint_config_mismatch(tmp_path):
    cfg = small_config()
    save_params(tmp_path / "m.bin", init_params(cfg), cfg)
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "m.bin", expected_config=small_config(seed=9))


def test_checkpoint_corruption_detected(tmp_path):
    cfg = small_config()
    path = tmp_path / "m.bin"
    save_params(path, init_params(cfg), cfg)
    blob = path.read_bytes()

    (tmp_path / "trunc.bin").write_bytes(blob[:-16])
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "trunc.bin")

    (tmp_path / "extra.bin").write_bytes(blob + b"\x00\x00")
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "extra.bin")

    (tmp_path / "magic.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "magic.bin")
