"""Command-line pipeline: prepare, train, eval, complete, sweep.

Every command is driven by one RunConfig (defaults < --config file < flags)
and embeds the resolved config in its reports. Artifacts live under the
workdir; commands that write there take a lock file so two runs cannot
interleave output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bpe, corpus, decoder, metrics, trainer
from . import model as M
from .advaug import AdvConfig, METHODS
from .config import RunConfig, load_config
from .corpus import PromptedExample
from .decoder import ApiLibrary
from .trainer import EncodedDataset, TrainConfig

_PROMPT_STREAM = 11  # seed fan-out tag for prompt masking randomness


class CliError(RuntimeError):
    pass


class WorkdirLock:
    """O_EXCL lock file; refuses to run when another writer holds the dir."""

    def __init__(self, workdir):
        self.path = Path(workdir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(
                f"workdir is locked ({self.path}); another run may be active, "
                "remove the lock file if it is stale") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _require(path, what):
    if path is None:
        raise CliError(f"no {what} configured")
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return Path(path)


def _workdir(cfg, create=False):
    wd = Path(cfg.workdir)
    if create:
        wd.mkdir(parents=True, exist_ok=True)
    elif not wd.is_dir():
        raise CliError(f"workdir not found: {wd} (run `prepare` first)")
    return wd


def _load_vocab(wd):
    return bpe.Vocab.load(_require(wd / "vocab.txt", "vocab file"))


def _load_examples(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            out.append(PromptedExample(tuple(d["prefix_words"]), d["masked_count"],
                                       d["input_text"], d["target_text"]))
    return out


def _load_split_pairs(wd, split):
    path = _require(wd / "pairs" / f"{split}.jsonl", f"{split} pair manifest")
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            pairs.append(corpus.make_pair(d["query"], d["api"],
                                          tuple(d.get("relevant", ()))))
    return pairs


def _load_checkpoint(wd):
    path = _require(wd / "checkpoint.bin", "checkpoint")
    return trainer.load_checkpoint(path)


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(batch_size=t.batch_size, learning_rate=t.learning_rate,
                       optimizer=t.optimizer, max_epochs=t.max_epochs,
                       patience=t.patience, seed=cfg.seed,
                       adv=AdvConfig(**asdict(t.adv)))


# -- commands ---------------------------------------------------------------

def cmd_prepare(cfg: RunConfig) -> int:
    corpus_path = _require(cfg.corpus, "corpus file")
    wd = _workdir(cfg, create=True)
    with WorkdirLock(wd):
        load = corpus.load_pairs(corpus_path)
        if load.errors:
            print(f"{len(load.errors)} malformed corpus lines:", file=sys.stderr)
            for lineno, msg in load.errors[:20]:
                print(f"  line {lineno}: {msg}", file=sys.stderr)
            _write_json(wd / "corpus_errors.json",
                        [{"line": l, "error": m} for l, m in load.errors])
        if load.duplicates:
            print(f"dropped {load.duplicates} duplicate pairs", file=sys.stderr)
        pairs = load.pairs
        if len(pairs) < 10:
            raise CliError(f"need at least 10 valid pairs to split, got {len(pairs)}")

        spec = corpus.SplitSpec(cfg.split.train_ratio, cfg.split.valid_ratio,
                                cfg.split.test_ratio, seed=cfg.seed)
        idx_by_split = dict(zip(("train", "valid", "test"),
                                corpus.split_indices(len(pairs), spec)))
        (wd / "splits").mkdir(exist_ok=True)
        for name, idx in idx_by_split.items():
            (wd / "splits" / f"{name}.idx").write_text(
                "".join(f"{i}\n" for i in idx), encoding="utf-8")
        (wd / "splits" / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")

        train_pairs = [pairs[i] for i in idx_by_split["train"]]
        texts = [p.query for p in train_pairs] + [p.api for p in train_pairs]
        vocab = bpe.train_bpe(texts, cfg.vocab_size)
        vocab.save(wd / "vocab.txt")

        (wd / "data").mkdir(exist_ok=True)
        (wd / "pairs").mkdir(exist_ok=True)
        example_counts = {}
        for si, (name, idx) in enumerate(idx_by_split.items()):
            split_pairs = [pairs[i] for i in idx]
            rng = np.random.default_rng((cfg.seed, _PROMPT_STREAM, si))
            with open(wd / "data" / f"{name}.jsonl", "w", encoding="utf-8") as fh:
                count = 0
                for p in split_pairs:
                    for ex in corpus.make_prompted_examples(p, rng, cfg.prompts_per_api):
                        fh.write(json.dumps({
                            "prefix_words": list(ex.prefix_words),
                            "masked_count": ex.masked_count,
                            "input_text": ex.input_text,
                            "target_text": ex.target_text,
                        }, sort_keys=True) + "\n")
                        count += 1
                example_counts[name] = count
            with open(wd / "pairs" / f"{name}.jsonl", "w", encoding="utf-8") as fh:
                for p in split_pairs:
                    fh.write(json.dumps({
                        "query": p.query, "api": p.api,
                        "relevant": list(p.extra_relevant),
                    }, sort_keys=True) + "\n")

        stats = corpus.corpus_stats(pairs, vocab)
        _write_json(wd / "stats.json", {
            "pairs": len(pairs),
            "splits": {k: len(v) for k, v in idx_by_split.items()},
            "examples": example_counts,
            "vocab_size": len(vocab),
            "stats": stats.to_dict(),
            "config": cfg.to_dict(),
        })
        print(f"prepared {len(pairs)} pairs -> "
              f"{'/'.join(str(len(v)) for v in idx_by_split.values())} split, "
              f"vocab {len(vocab)}, examples {example_counts}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    wd = _workdir(cfg)
    with WorkdirLock(wd):
        vocab = _load_vocab(wd)
        mc = cfg.model.to_model_config(len(vocab), cfg.seed)
        train_ex = _load_examples(_require(wd / "data" / "train.jsonl", "training data"))
        valid_ex = _load_examples(_require(wd / "data" / "valid.jsonl", "validation data"))
        train_ds = EncodedDataset.from_examples(train_ex, vocab, mc.max_input_length,
                                                mc.max_output_length)
        valid_ds = EncodedDataset.from_examples(valid_ex, vocab, mc.max_input_length,
                                                mc.max_output_length)
        tc = _train_config(cfg)
        params = M.init_params(mc)
        best, report = trainer.fit(params, mc, train_ds, valid_ds, tc,
                                   log_path=wd / "train_log.jsonl")
        trainer.save_checkpoint(wd / "checkpoint.bin", best, mc)
        _write_json(wd / "train_report.json",
                    {"report": report.to_dict(), "config": cfg.to_dict()})
        print(f"trained {report.epochs[-1].epoch} epochs "
              f"(best {report.best_epoch}, valid loss {report.best_valid_loss:.4f}, "
              f"{report.stopped_because}); method={tc.adv.method}")
    return 0


def _run_eval(params, mc, vocab, pairs, cfg, library=None, prefix_mode=None):
    return metrics.evaluate(
        params, mc, vocab, pairs,
        width=cfg.decode.beam_width, k=cfg.decode.top, library=library,
        prefix_mode=cfg.decode.prefix_mode if prefix_mode is None else prefix_mode,
        require_prefix=cfg.decode.require_prefix)


def cmd_eval(cfg: RunConfig) -> int:
    wd = _workdir(cfg)
    with WorkdirLock(wd):
        params, mc = _load_checkpoint(wd)
        vocab = _load_vocab(wd)
        pairs = _load_split_pairs(wd, "test")
        if not pairs:
            raise CliError("test manifest is empty")

        reports = {"unfiltered": _run_eval(params, mc, vocab, pairs, cfg)}
        if cfg.api_library:
            library = ApiLibrary.from_file(_require(cfg.api_library, "API library"))
            reports["apicheck"] = _run_eval(params, mc, vocab, pairs, cfg,
                                            library=library)
        payload = {k: r.to_dict() for k, r in reports.items()}
        payload["config"] = cfg.to_dict()
        _write_json(wd / "eval_report.json", payload)
        table = metrics.report_table(reports)
        (wd / "eval_report.txt").write_text(table + "\n", encoding="utf-8")
        print(table)
    return 0


def cmd_complete(cfg: RunConfig, query, prefix, top) -> int:
    wd = _workdir(cfg)
    params, mc = _load_checkpoint(wd)
    vocab = _load_vocab(wd)
    library = None
    if cfg.api_library:
        library = ApiLibrary.from_file(_require(cfg.api_library, "API library"))
    cands = decoder.complete(params, mc, vocab, query, prefix,
                             k=top, width=cfg.decode.beam_width, library=library,
                             require_prefix=cfg.decode.require_prefix)
    print(json.dumps({
        "query": query,
        "prefix": prefix,
        "candidates": [
            {"api": c.text, "score": c.score,
             "in_library": c.in_library}
            for c in cands
        ],
    }, indent=2))
    return 0


def _sweep_metrics_row(report):
    return {"em1": report.em[1], "em5": report.em[5],
            "mrr": report.mrr, "map": report.map}


def cmd_sweep(cfg: RunConfig) -> int:
    wd = _workdir(cfg)
    methods = list(cfg.sweep.methods)
    k_values = list(cfg.sweep.k_values)
    prefix_modes = list(cfg.sweep.prefix_modes)
    if not (methods or k_values or prefix_modes):
        methods = list(METHODS)
        prefix_modes = [0, 1, 2]

    with WorkdirLock(wd):
        vocab = _load_vocab(wd)
        mc = cfg.model.to_model_config(len(vocab), cfg.seed)
        train_ex = _load_examples(_require(wd / "data" / "train.jsonl", "training data"))
        valid_ex = _load_examples(_require(wd / "data" / "valid.jsonl", "validation data"))
        train_ds = EncodedDataset.from_examples(train_ex, vocab, mc.max_input_length,
                                                mc.max_output_length)
        valid_ds = EncodedDataset.from_examples(valid_ex, vocab, mc.max_input_length,
                                                mc.max_output_length)
        pairs = _load_split_pairs(wd, "test")
        trained = {}  # adv-config key -> best params

        def train_once(adv: AdvConfig):
            key = (adv.method, adv.epsilon, adv.k_adv, adv.alpha)
            if key not in trained:
                tc = _train_config(cfg)
                tc.adv = adv
                best, _ = trainer.fit(M.init_params(mc), mc, train_ds, valid_ds, tc)
                trained[key] = best
            return trained[key]

        rows = []

        def run(axis, value, adv, prefix_mode=None):
            row = {"axis": axis, "value": value, "seed": cfg.seed,
                   "method": adv.method, "k_adv": adv.k_adv}
            try:
                best = train_once(adv)
                report = _run_eval(best, mc, vocab, pairs, cfg,
                                  prefix_mode=prefix_mode)
                row.update(_sweep_metrics_row(report))
            except Exception as exc:  # record and keep sweeping
                row["error"] = str(exc)
            rows.append(row)

        base = _train_config(cfg).adv
        for m in methods:
            run("method", m, AdvConfig(method=m, epsilon=base.epsilon,
                                       k_adv=base.k_adv, alpha=base.alpha,
                                       include_clean=base.include_clean))
        for k in k_values:
            run("k_adv", k, AdvConfig(method="atcom", epsilon=base.epsilon,
                                      k_adv=int(k), alpha=base.alpha,
                                      include_clean=base.include_clean))
        for pm in prefix_modes:
            run("prefix_mode", pm, base, prefix_mode=int(pm))

        _write_json(wd / "sweep_report.json", {"rows": rows, "config": cfg.to_dict()})
        lines = [f"{'axis':<12} {'value':<8} {'EM@1':>7} {'EM@5':>7} {'MRR':>7} {'MAP':>7}"]
        for r in rows:
            if "error" in r:
                lines.append(f"{r['axis']:<12} {str(r['value']):<8} error: {r['error']}")
            else:
                lines.append(f"{r['axis']:<12} {str(r['value']):<8} "
                             f"{r['em1']:7.2f} {r['em5']:7.2f} "
                             f"{r['mrr']:7.4f} {r['map']:7.4f}")
        table = "\n".join(lines)
        (wd / "sweep_report.txt").write_text(table + "\n", encoding="utf-8")
        print(table)
    return 0


# -- argument parsing -------------------------------------------------------

def _common_flags(p):
    p.add_argument("--config", help="JSON or TOML run config file")
    p.add_argument("--workdir", help="artifact directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=METHODS,
                   help="adversarial augmentation method")
    p.add_argument("--epsilon", type=float, help="perturbation budget")
    p.add_argument("--k-adv", type=int, help="adversarial steps/examples per batch")
    p.add_argument("--alpha", type=float, help="L1/L2 mixing weight")
    p.add_argument("--beam-width", type=int)
    p.add_argument("--api-library", help="file of valid API names for APICheck")


def _csv(kind):
    def parse(text):
        return [kind(x) for x in text.split(",") if x.strip()]
    return parse


def build_parser():
    parser = argparse.ArgumentParser(
        prog="apifill",
        description="Complete fully-qualified API names from a query and a prefix")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split corpus, train vocab, build prompts")
    _common_flags(p)
    p.add_argument("--corpus", help="JSONL corpus of query/api pairs")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--prompts-per-api", type=int)

    p = sub.add_parser("train", help="train a model on prepared artifacts")
    _common_flags(p)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--patience", type=int)

    p = sub.add_parser("eval", help="score the checkpoint on the test split")
    _common_flags(p)
    p.add_argument("--top", type=int, help="candidates per query")
    p.add_argument("--prefix-mode", type=int,
                   help="leading API words revealed at eval (0 = no prompt)")
    p.add_argument("--require-prefix", action="store_true", default=None)

    p = sub.add_parser("complete", help="complete one query")
    _common_flags(p)
    p.add_argument("--query", required=True)
    p.add_argument("--prefix", default="")
    p.add_argument("--top", type=int)

    p = sub.add_parser("sweep", help="train/eval across methods, K, prefix modes")
    _common_flags(p)
    p.add_argument("--methods", type=_csv(str), help="comma list of methods")
    p.add_argument("--k-values", type=_csv(int), help="comma list of K values")
    p.add_argument("--prefix-modes", type=_csv(int), help="comma list of prefix modes")
    p.add_argument("--max-epochs", type=int)

    return parser


_OVERRIDE_MAP = {
    "workdir": "workdir",
    "seed": "seed",
    "corpus": "corpus",
    "api_library": "api_library",
    "vocab_size": "vocab_size",
    "prompts_per_api": "prompts_per_api",
    "method": "train.adv.method",
    "epsilon": "train.adv.epsilon",
    "k_adv": "train.adv.k_adv",
    "alpha": "train.adv.alpha",
    "beam_width": "decode.beam_width",
    "top": "decode.top",
    "prefix_mode": "decode.prefix_mode",
    "require_prefix": "decode.require_prefix",
    "max_epochs": "train.max_epochs",
    "batch_size": "train.batch_size",
    "learning_rate": "train.learning_rate",
    "patience": "train.patience",
    "methods": "sweep.methods",
    "k_values": "sweep.k_values",
    "prefix_modes": "sweep.prefix_modes",
}


def _resolve_config(args) -> RunConfig:
    overrides = {}
    for attr, dotted in _OVERRIDE_MAP.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = value
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "complete":
            return cmd_complete(cfg, args.query, args.prefix,
                                args.top or cfg.decode.top)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        raise CliError(f"unknown command {args.command!r}")
    except (CliError, FileNotFoundError, ValueError,
            M.CheckpointError, M.NonFiniteLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
