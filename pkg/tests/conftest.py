import json
import time
from types import SimpleNamespace

import numpy as np
import pytest

from apifill import bpe, corpus, metrics, trainer
from apifill import model as M
from apifill.trainer import EncodedDataset, TrainConfig

VERBS = ["read", "write", "copy", "open", "close", "parse", "join", "split"]
NOUNS = ["file", "array", "string", "socket", "buffer", "stream", "map", "list"]

# one verdict line per acceptance criterion, echoed after the test summary so
# they stay visible even when pytest captures test output
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_memorizable_pairs(n=32):
    """Distinct query -> distinct 4-word API, short enough to never truncate."""
    pairs = []
    for i in range(n):
        v, noun = VERBS[i % 8], NOUNS[(i // 8) % 8]
        pairs.append(corpus.make_pair(f"{v} the {noun} number {i}",
                                      f"lib{i % 4}.mod{i % 8}.{noun}.{v}{i}"))
    return pairs


def train_until(pairs, mc_kwargs, loss_target, max_epochs, seed=0,
                prompts=3, vocab_size=400, lr=1e-3, batch_size=16):
    prng = np.random.default_rng(7)
    examples = []
    for p in pairs:
        examples.extend(corpus.make_prompted_examples(p, prng, prompts))
    texts = [p.query for p in pairs] + [p.api for p in pairs]
    vocab = bpe.train_bpe(texts, vocab_size)
    mc = M.ModelConfig(vocab_size=len(vocab), **mc_kwargs)
    ds = EncodedDataset.from_examples(examples, vocab,
                                      mc.max_input_length, mc.max_output_length)
    tc = TrainConfig(batch_size=batch_size, learning_rate=lr,
                     max_epochs=max_epochs, patience=max_epochs, seed=seed)
    params = M.init_params(mc)
    opt = trainer.make_optimizer(tc)
    loss = float("inf")
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        rng = np.random.default_rng((tc.seed, epoch))
        loss, _, _ = trainer.train_epoch(params, mc, ds, tc, opt, rng, epoch=epoch)
        if loss < loss_target:
            break
    return SimpleNamespace(params=params, mc=mc, vocab=vocab, pairs=pairs,
                           dataset=ds, final_loss=loss, epochs=epoch)


@pytest.fixture(scope="session")
def overfit_bundle():
    """32 memorizable pairs trained to near-zero loss with the default config."""
    t0 = time.monotonic()
    bundle = train_until(make_memorizable_pairs(32), {}, loss_target=0.05,
                         max_epochs=500)
    bundle.report = metrics.evaluate(bundle.params, bundle.mc, bundle.vocab,
                                     bundle.pairs, width=10, k=5, prefix_mode=1)
    bundle.elapsed = time.monotonic() - t0
    return bundle


@pytest.fixture
def tiny_model():
    """Random 2-layer hidden-8 model in 64-bit mode with a fixed batch."""
    cfg = M.ModelConfig(vocab_size=12, encoder_layers=2, decoder_layers=2,
                        hidden_size=8, heads=2, ffn_size=16,
                        max_input_length=6, max_output_length=5,
                        dtype="float64", seed=0)
    params = M.init_params(cfg)
    rng = np.random.default_rng(0)
    batch = (rng.integers(5, 12, size=(3, 6)), np.array([6, 4, 5]),
             rng.integers(5, 12, size=(3, 5)), np.array([5, 3, 4]))
    return SimpleNamespace(cfg=cfg, params=params, batch=batch)


@pytest.fixture(scope="session")
def cli_corpus(tmp_path_factory):
    """Small corpus + API library on disk for command-line tests."""
    root = tmp_path_factory.mktemp("clidata")
    rows = []
    for i in range(40):
        v, noun = VERBS[i % 6], NOUNS[(i * 7) % 6]
        rows.append({"query": f"{v} a {noun} value {i}",
                     "api": f"pkg{i % 3}.mod{i % 5}.{noun}.{v}"})
    corpus_path = root / "corpus.jsonl"
    with open(corpus_path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    lib_path = root / "library.txt"
    with open(lib_path, "w", encoding="utf-8") as fh:
        fh.write("# valid names\n")
        for r in rows:
            fh.write(r["api"] + "\n")
    cfg_path = root / "small.json"
    cfg_path.write_text(json.dumps({
        "model": {"hidden_size": 32, "heads": 2, "ffn_size": 64,
                  "encoder_layers": 1, "decoder_layers": 1,
                  "max_input_length": 32, "max_output_length": 12},
        "train": {"max_epochs": 4, "batch_size": 16},
        "vocab_size": 300,
    }), encoding="utf-8")
    return SimpleNamespace(root=root, corpus=corpus_path, library=lib_path,
                           config=cfg_path, rows=rows)
