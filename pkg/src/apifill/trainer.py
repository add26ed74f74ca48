"""Training loop: optimizer, adversarial augmentation, early stopping, logging.

Validation always runs on clean inputs; the adversarial machinery touches
training batches only. Early stopping counts consecutive epochs whose
validation loss failed to improve on the best seen so far and halts once the
streak reaches `patience`. The returned parameters are a snapshot from the
best-validation epoch, not the last one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import model as M
from . import advaug
from .advaug import AdvConfig

CLIP_NORM = 1.0


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # or "sgd"
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    adv: AdvConfig = field(default_factory=AdvConfig)
    validate_every: int = 1

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.validate_every < 1:
            raise ValueError("batch_size, max_epochs, validate_every must be >= 1")
        if isinstance(self.adv, dict):
            self.adv = AdvConfig(**self.adv)

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float | None
    wall_time: float
    clip_events: int = 0
    adv_diagnostic: float | None = None  # first-order worst-case loss estimate


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_loss: float = float("inf")
    stopped_because: str = ""

    def to_dict(self):
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_valid_loss": self.best_valid_loss,
            "stopped_because": self.stopped_because,
        }


class EncodedDataset:
    """Pre-tokenized (input, target) id matrices with true lengths."""

    def __init__(self, input_ids, input_len, target_ids, target_len):
        self.input_ids = np.asarray(input_ids, dtype=np.int64)
        self.input_len = np.asarray(input_len, dtype=np.int64)
        self.target_ids = np.asarray(target_ids, dtype=np.int64)
        self.target_len = np.asarray(target_len, dtype=np.int64)
        if not (len(self.input_ids) == len(self.input_len)
                == len(self.target_ids) == len(self.target_len)):
            raise ValueError("dataset component lengths disagree")

    def __len__(self):
        return len(self.input_ids)

    def batch(self, idx):
        return (self.input_ids[idx], self.input_len[idx],
                self.target_ids[idx], self.target_len[idx])

    @classmethod
    def from_examples(cls, examples, vocab, max_input_length, max_output_length):
        """examples: iterable of PromptedExample."""
        ii, il, ti, tl = [], [], [], []
        for ex in examples:
            enc_in = vocab.encode(ex.input_text, max_input_length)
            enc_tgt = vocab.encode(ex.target_text, max_output_length, add_end=True)
            ii.append(enc_in.ids)
            il.append(enc_in.true_length)
            ti.append(enc_tgt.ids)
            tl.append(enc_tgt.true_length)
        return cls(np.stack(ii), il, np.stack(ti), tl)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= self.lr * g


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * (g * g)
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return _Sgd(cfg.learning_rate)
    return _Adam(cfg.learning_rate)


def clip_gradients(grads, max_norm=CLIP_NORM):
    """Global L2 clipping; returns (grads, True) when clipping fired."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
        return grads, True
    return grads, False


def train_epoch(params, config, dataset: EncodedDataset, cfg: TrainConfig,
                optimizer, rng, log=None, epoch=0):
    """One pass over the training set; mutates params in place.

    Returns (mean clean train loss, clip event count, last adversarial
    diagnostic). Batch order comes from `rng`, so a per-epoch generator
    seeded from (cfg.seed, epoch) makes runs reproducible.
    """
    order = rng.permutation(len(dataset))
    losses = []
    clip_events = 0
    diag = None
    for start in range(0, len(dataset), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        batch = dataset.batch(idx)
        try:
            pb = advaug.generate(params, config, batch, cfg.adv)
        except M.NonFiniteLossError as exc:
            raise M.NonFiniteLossError(
                f"{exc} (epoch {epoch}, batch starting at {start}, ids {idx[:4].tolist()}...)"
            ) from exc
        grads = advaug.augmented_step_gradient(pb.clean_grad, pb, cfg.adv)
        grads, clipped = clip_gradients(grads)
        clip_events += int(clipped)
        optimizer.step(params, grads)
        losses.append(pb.clean_loss)
        if pb.clean_embed_grad is not None:
            diag = advaug.adversarial_loss_estimate(pb.clean_loss, pb.clean_embed_grad,
                                                    cfg.adv.epsilon)
        if log is not None:
            log.write(json.dumps({
                "epoch": epoch,
                "batch_start": int(start),
                "clean_loss": pb.clean_loss,
                "step_losses": pb.step_losses(),
                "delta_l2": pb.delta_norms(2),
                "delta_l1": pb.delta_norms(1),
                "adv_estimate": diag,
                "clipped": clipped,
            }) + "\n")
    return float(np.mean(losses)) if losses else 0.0, clip_events, diag


def evaluate_loss(params, config, dataset: EncodedDataset, batch_size=64):
    """Mean clean loss over a dataset, no gradient work."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        input_ids, input_len, target_ids, target_len = dataset.batch(idx)
        tr = M.forward_ids(params, config, input_ids, input_len, target_ids, target_len,
                           want_cache=False)
        total += float(tr.per_example_loss.sum())
        count += len(idx)
    return total / count


def fit(params, config, train_set: EncodedDataset, valid_set: EncodedDataset,
        cfg: TrainConfig, log_path=None):
    """Full training run; returns (best params, TrainReport).

    Stops when validation loss has not improved for `patience` consecutive
    validation epochs, or at max_epochs. params is left at its final state;
    the returned dict is the best-epoch snapshot.
    """
    if len(train_set) == 0 or len(valid_set) == 0:
        raise ValueError("train and validation sets must be non-empty")

    optimizer = make_optimizer(cfg)
    report = TrainReport()
    best_params = M.copy_params(params)
    streak = 0
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.monotonic()
            rng = np.random.default_rng((cfg.seed, epoch))
            train_loss, clips, diag = train_epoch(
                params, config, train_set, cfg, optimizer, rng, log=log, epoch=epoch)
            valid_loss = None
            if epoch % cfg.validate_every == 0:
                valid_loss = evaluate_loss(params, config, valid_set)
            stats = EpochStats(epoch, train_loss, valid_loss,
                               time.monotonic() - t0, clips, diag)
            report.epochs.append(stats)
            if log is not None:
                log.write(json.dumps({"epoch_summary": asdict(stats)}) + "\n")

            if valid_loss is not None:
                if valid_loss < report.best_valid_loss:
                    report.best_valid_loss = valid_loss
                    report.best_epoch = epoch
                    best_params = M.copy_params(params)
                    streak = 0
                else:
                    streak += 1
                    if streak >= cfg.patience:
                        report.stopped_because = f"no improvement for {streak} epochs"
                        break
        else:
            report.stopped_because = "max epochs reached"
    finally:
        if log is not None:
            log.close()
    return best_params, report


def early_stop_trace(valid_losses, patience):
    """(stop_epoch, best_epoch), 1-based, from a validation-loss sequence.

    Pure reference of the stopping rule used by fit; handy for rule tests.
    """
    best = float("inf")
    best_epoch = -1
    streak = 0
    for i, v in enumerate(valid_losses, start=1):
        if v < best:
            best, best_epoch, streak = v, i, 0
        else:
            streak += 1
            if streak >= patience:
                return i, best_epoch
    return len(valid_losses), best_epoch


# checkpoint passthroughs so callers need one import
def save_checkpoint(path, params, config):
    M.save_params(path, params, config)


def load_checkpoint(path, expected_config=None):
    return M.load_params(path, expected_config)
