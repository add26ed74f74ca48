"""Training-loop tests: stopping rule, snapshots, determinism, clipping."""

import numpy as np
import pytest

from apifill import model as M
from apifill.advaug import AdvConfig
from apifill.bpe import EOS_ID, train_bpe
from apifill.corpus import make_pair, make_prompted_examples
from apifill.trainer import (
    EncodedDataset,
    TrainConfig,
    clip_gradients,
    early_stop_trace,
    evaluate_loss,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)


def tiny_config(seed=0):
    return M.ModelConfig(vocab_size=12, encoder_layers=1, decoder_layers=1,
                         hidden_size=8, heads=2, ffn_size=16, max_input_length=6,
                         max_output_length=5, seed=seed, dtype="float64")


def tiny_dataset(n=12, seed=0):
    rng = np.random.default_rng(seed)
    input_ids = rng.integers(5, 12, size=(n, 6))
    input_len = rng.integers(2, 7, size=n)
    target_ids = rng.integers(5, 12, size=(n, 5))
    target_len = rng.integers(1, 6, size=n)
    for r, ln in zip(input_ids, input_len):
        r[ln:] = 0
    for r, ln in zip(target_ids, target_len):
        r[ln:] = 0
    return EncodedDataset(input_ids, input_len, target_ids, target_len)


# -- stopping rule ----------------------------------------------------------

def test_early_stop_reference_cases():
    assert early_stop_trace([3, 2, 2, 2, 2, 2, 2], patience=5) == (7, 2)
    assert early_stop_trace([2, 3], patience=1) == (2, 1)
    assert early_stop_trace([5, 4, 3, 2, 1], patience=2) == (5, 5)
    # a tie does not count as improvement
    assert early_stop_trace([2, 2, 2], patience=2) == (3, 1)
    assert early_stop_trace([], patience=3) == (0, -1)


def test_fit_matches_reference_stopping():
    cfg = tiny_config()
    params = M.init_params(cfg)
    tc = TrainConfig(batch_size=4, learning_rate=0.05, optimizer="sgd",
                     max_epochs=30, patience=3, seed=1)
    _, report = fit(params, cfg, tiny_dataset(), tiny_dataset(seed=5), tc)
    losses = [e.valid_loss for e in report.epochs]
    stop, best = early_stop_trace(losses, tc.patience)
    assert report.epochs[-1].epoch == stop
    assert report.best_epoch == best


def test_fit_returns_best_epoch_snapshot():
    cfg = tiny_config()
    params = M.init_params(cfg)
    valid = tiny_dataset(seed=5)
    tc = TrainConfig(batch_size=4, learning_rate=0.05, optimizer="sgd",
                     max_epochs=20, patience=3, seed=1)
    best_params, report = fit(params, cfg, tiny_dataset(), valid, tc)
    # re-scoring the snapshot reproduces the recorded best loss exactly
    assert evaluate_loss(best_params, cfg, valid) == report.best_valid_loss
    assert report.best_valid_loss == min(e.valid_loss for e in report.epochs)


def test_zero_learning_rate_leaves_params_fixed():
    cfg = tiny_config()
    params = M.init_params(cfg)
    before = M.copy_params(params)
    tc = TrainConfig(batch_size=4, learning_rate=0.0, optimizer="sgd",
                     max_epochs=2, patience=5, seed=0)
    fit(params, cfg, tiny_dataset(), tiny_dataset(seed=5), tc)
    for name in before:
        np.testing.assert_array_equal(params[name], before[name])


def test_fit_is_deterministic():
    cfg = tiny_config()
    tc = TrainConfig(batch_size=4, learning_rate=1e-3, max_epochs=3,
                     patience=10, seed=7)
    runs = []
    for _ in range(2):
        best, report = fit(M.init_params(cfg), cfg, tiny_dataset(), tiny_dataset(seed=5), tc)
        runs.append((best, [e.train_loss for e in report.epochs]))
    assert runs[0][1] == runs[1][1]
    for name in runs[0][0]:
        np.testing.assert_array_equal(runs[0][0][name], runs[1][0][name])


def test_plain_method_equals_manual_loop():
    cfg = tiny_config()
    data = tiny_dataset()
    tc = TrainConfig(batch_size=4, learning_rate=0.01, optimizer="sgd",
                     max_epochs=2, patience=10, seed=3)

    params = M.init_params(cfg)
    fit(params, cfg, data, tiny_dataset(seed=5), tc)

    manual = M.init_params(cfg)
    for epoch in range(1, 3):
        rng = np.random.default_rng((tc.seed, epoch))
        order = rng.permutation(len(data))
        for start in range(0, len(data), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            grads, _ = M.backward(M.forward_ids(manual, cfg, *data.batch(idx)))
            grads, _ = clip_gradients(grads)
            for name, g in grads.items():
                manual[name] -= tc.learning_rate * g
    for name in params:
        np.testing.assert_array_equal(params[name], manual[name])


def test_non_finite_loss_reports_location():
    cfg = tiny_config()
    params = M.init_params(cfg)
    params["embed.tok"][:] = np.nan
    tc = TrainConfig(batch_size=4, max_epochs=1, seed=0)
    with pytest.raises(M.NonFiniteLossError, match="epoch"):
        fit(params, cfg, tiny_dataset(), tiny_dataset(seed=5), tc)


def test_adversarial_method_trains_and_logs(tmp_path):
    cfg = tiny_config()
    params = M.init_params(cfg)
    tc = TrainConfig(batch_size=4, learning_rate=1e-3, max_epochs=2, patience=10,
                     seed=0, adv=AdvConfig(method="fgm", epsilon=0.3))
    log_path = tmp_path / "log.jsonl"
    _, report = fit(params, cfg, tiny_dataset(), tiny_dataset(seed=5), tc,
                    log_path=log_path)
    assert all(np.isfinite(e.train_loss) for e in report.epochs)
    diag = report.epochs[-1].adv_diagnostic
    assert diag is not None and np.isfinite(diag)

    import json
    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    batch_lines = [l for l in lines if "batch_start" in l]
    assert batch_lines, "per-batch records missing"
    for rec in batch_lines:
        assert len(rec["delta_l2"]) == 1
        assert rec["delta_l2"][0] <= 0.3 + 1e-9
    assert any("epoch_summary" in l for l in lines)


def test_validate_every_skips_epochs():
    cfg = tiny_config()
    params = M.init_params(cfg)
    tc = TrainConfig(batch_size=4, learning_rate=1e-3, max_epochs=4,
                     patience=10, seed=0, validate_every=2)
    _, report = fit(params, cfg, tiny_dataset(), tiny_dataset(seed=5), tc)
    flags = [e.valid_loss is not None for e in report.epochs]
    assert flags == [False, True, False, True]
    assert report.best_epoch % 2 == 0


# -- pieces -----------------------------------------------------------------

def test_clip_leaves_small_gradients_alone():
    grads = {"a": np.array([0.1, 0.0]), "b": np.array([0.2])}
    out, clipped = clip_gradients(grads)
    assert not clipped
    assert out is grads


def test_clip_rescales_to_unit_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    out, clipped = clip_gradients(grads)
    assert clipped
    np.testing.assert_allclose(out["a"], [0.6, 0.0], atol=1e-12)
    np.testing.assert_allclose(out["b"], [0.8], atol=1e-12)
    total = sum(float((g ** 2).sum()) for g in out.values())
    assert abs(total - 1.0) < 1e-12


def test_evaluate_loss_matches_forward():
    cfg = tiny_config()
    params = M.init_params(cfg)
    data = tiny_dataset(n=6)
    tr = M.forward_ids(params, cfg, data.input_ids, data.input_len,
                       data.target_ids, data.target_len, want_cache=False)
    assert abs(evaluate_loss(params, cfg, data) - tr.loss) < 1e-12
    with pytest.raises(ValueError):
        evaluate_loss(params, cfg, EncodedDataset([], [], [], []))


def test_dataset_length_mismatch_rejected():
    with pytest.raises(ValueError):
        EncodedDataset(np.zeros((3, 4)), [4, 4], np.zeros((3, 2)), [2, 2, 2])


def test_dataset_from_examples_appends_terminator():
    vocab = train_bpe([], vocab_size=261)
    pair = make_pair("copy an array fast", "java.lang.system.arraycopy")
    examples = make_prompted_examples(pair, np.random.default_rng(0))
    data = EncodedDataset.from_examples(examples, vocab, 48, 32)
    assert len(data) == len(examples)
    for row, ln in zip(data.target_ids, data.target_len):
        assert row[ln - 1] == EOS_ID
    assert data.input_ids.shape[1] == 48


def test_train_config_validation_and_coercion():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1e-3)
    tc = TrainConfig(adv={"method": "pgd", "epsilon": 0.5, "k_adv": 2})
    assert isinstance(tc.adv, AdvConfig)
    assert tc.adv.method == "pgd" and tc.adv.k_adv == 2


def test_checkpoint_passthrough(tmp_path):
    cfg = tiny_config()
    params = M.init_params(cfg)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, params, cfg)
    loaded, loaded_cfg = load_checkpoint(path, expected_config=cfg)
    assert loaded_cfg == cfg
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])


def test_train_epoch_counts_clip_events():
    cfg = tiny_config()
    params = M.init_params(cfg)
    # inflate the output head so early gradients exceed the clip norm
    params["out.w"] = params["out.w"] * 200.0
    data = tiny_dataset()
    tc = TrainConfig(batch_size=4, learning_rate=1e-3, optimizer="sgd", seed=0)
    from apifill.trainer import make_optimizer
    _, clips, _ = train_epoch(params, cfg, data, tc, make_optimizer(tc),
                              np.random.default_rng(0))
    assert clips > 0
