"""Embedding-space adversarial example generation for data augmentation.

All perturbations live at the encoder embedding output and are sized per
example: the gradient tensor for one input sequence is flattened before its
norms are taken, so epsilon bounds the whole-sequence perturbation, not a
per-position one. Every step re-anchors at the clean embeddings (x_t = x +
delta_t); deltas do not accumulate.

Methods:
  fgsm   delta = eps * sign(g), an L-inf budget
  fgm    delta = eps * g / ||g||_2
  pgd    K re-anchored fgm steps, trains on the last perturbed point only
  atcom  delta = eps * (alpha * g/||g||_1 + (1-alpha) * g/||g||_2); all K
         perturbed points train, their parameter gradients averaged

The atcom direction is a convex mix of the L1- and L2-normalized gradient;
alpha is the mixing weight. Since ||g||_2 <= ||g||_1 the mix keeps
||delta||_2 <= eps, with equality at alpha = 0 where it reduces to fgm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M

NORM_FLOOR = 1e-12

METHODS = ("none", "fgsm", "fgm", "pgd", "atcom")


@dataclass
class AdvConfig:
    method: str = "none"
    epsilon: float = 1.0
    k_adv: int = 4
    alpha: float = 0.3
    include_clean: bool = True   # mix the clean-point gradient into the update
    atcom_literal: bool = False  # sign-based variant, see atcom_delta

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.k_adv < 1:
            raise ValueError("k_adv must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


@dataclass
class PerturbStep:
    delta: np.ndarray      # (B, N, d) perturbation actually applied
    gen_grad: np.ndarray   # embedding gradient that generated it
    loss: float            # loss at clean embeddings + delta


@dataclass
class PerturbationBatch:
    """One generator run over a batch.

    `steps[t]` describes perturbed point x_{t+1}; `exported` indexes the steps
    whose parameter gradients feed `g_avg` (all of them for atcom, the last
    for pgd). The clean-point gradient is kept separate so the caller decides
    whether to mix it back in.
    """
    steps: list[PerturbStep]
    g_avg: dict | None
    exported: list[int]
    clean_loss: float
    clean_grad: dict
    clean_embed_grad: np.ndarray | None = None

    def delta_norms(self, ord=2):
        """Max per-example norm of each step's delta, for logging."""
        return [float(_per_example_norms(s.delta, ord).max()) for s in self.steps]

    def step_losses(self):
        return [s.loss for s in self.steps]


def _per_example_norms(g, ord):
    flat = g.reshape(g.shape[0], -1)
    if ord == 1:
        n = np.abs(flat).sum(axis=1)
    elif ord == 2:
        n = np.sqrt((flat * flat).sum(axis=1))
    else:
        raise ValueError(f"unsupported norm order {ord}")
    return n.reshape((g.shape[0],) + (1,) * (g.ndim - 1))


def fgsm_delta(grad, epsilon):
    """eps * sign(g); sign(0) = 0, so the max-norm is eps whenever g != 0."""
    return epsilon * np.sign(grad)


def fgm_delta(grad, epsilon):
    """eps * g / ||g||_2 per example; zero where the gradient underflows."""
    n2 = _per_example_norms(grad, 2)
    return np.where(n2 < NORM_FLOOR, 0.0, epsilon * grad / np.maximum(n2, NORM_FLOOR))


def atcom_delta(grad, epsilon, alpha, literal=False):
    """eps * (alpha * g/||g||_1 + (1-alpha) * g/||g||_2) per example.

    With literal=True the direction collapses to sign(g) scaled by the ratio
    of the two norms: eps * sign(g) * ||g||_2 / ||g||_1. Kept for
    experimentation, never the default.
    """
    n1 = _per_example_norms(grad, 1)
    n2 = _per_example_norms(grad, 2)
    dead = n2 < NORM_FLOOR
    if literal:
        d = epsilon * np.sign(grad) * (n2 / np.maximum(n1, NORM_FLOOR))
    else:
        d = epsilon * (alpha * grad / np.maximum(n1, NORM_FLOOR)
                       + (1.0 - alpha) * grad / np.maximum(n2, NORM_FLOOR))
    return np.where(dead, 0.0, d)


def _run(params, config, batch, delta=None):
    """One forward/backward at clean embeddings (+ delta when given)."""
    input_ids, input_len, target_ids, target_len = batch
    override = None
    if delta is not None:
        n = input_ids.shape[1]
        clean = params["embed.tok"][input_ids] + params["embed.pos_enc"][:n]
        override = clean + delta
    trace = M.forward_ids(params, config, input_ids, input_len, target_ids, target_len,
                          override_embeddings=override)
    grads, embed_grad = M.backward(trace)
    return trace.loss, grads, embed_grad


def _mean_params(grad_dicts):
    keys = grad_dicts[0].keys()
    return {k: sum(g[k] for g in grad_dicts) / len(grad_dicts) for k in keys}


def fgsm_generate(params, config, batch, cfg: AdvConfig) -> PerturbationBatch:
    clean_loss, clean_grads, g = _run(params, config, batch)
    delta = fgsm_delta(g, cfg.epsilon)
    loss, grads, _ = _run(params, config, batch, delta)
    return PerturbationBatch([PerturbStep(delta, g, loss)], grads, [0],
                             clean_loss, clean_grads, g)


def fgm_generate(params, config, batch, cfg: AdvConfig) -> PerturbationBatch:
    clean_loss, clean_grads, g = _run(params, config, batch)
    delta = fgm_delta(g, cfg.epsilon)
    loss, grads, _ = _run(params, config, batch, delta)
    return PerturbationBatch([PerturbStep(delta, g, loss)], grads, [0],
                             clean_loss, clean_grads, g)


def pgd_generate(params, config, batch, cfg: AdvConfig) -> PerturbationBatch:
    """K fgm steps, each anchored at the clean point; only the last trains."""
    clean_loss, clean_grads, g = _run(params, config, batch)
    clean_g = g
    steps = []
    last_grads = None
    for _ in range(cfg.k_adv):
        gen = g
        delta = fgm_delta(g, cfg.epsilon)
        loss, last_grads, g = _run(params, config, batch, delta)
        steps.append(PerturbStep(delta, gen, loss))
    return PerturbationBatch(steps, last_grads, [len(steps) - 1],
                             clean_loss, clean_grads, clean_g)


def atcom_generate(params, config, batch, cfg: AdvConfig) -> PerturbationBatch:
    """K mixed-norm steps; every perturbed point contributes to g_avg."""
    clean_loss, clean_grads, g = _run(params, config, batch)
    clean_g = g
    steps, grad_list = [], []
    for _ in range(cfg.k_adv):
        gen = g
        delta = atcom_delta(g, cfg.epsilon, cfg.alpha, cfg.atcom_literal)
        loss, grads, g = _run(params, config, batch, delta)
        steps.append(PerturbStep(delta, gen, loss))
        grad_list.append(grads)
    return PerturbationBatch(steps, _mean_params(grad_list), list(range(len(steps))),
                             clean_loss, clean_grads, clean_g)


_GENERATORS = {
    "fgsm": fgsm_generate,
    "fgm": fgm_generate,
    "pgd": pgd_generate,
    "atcom": atcom_generate,
}


def generate(params, config, batch, cfg: AdvConfig) -> PerturbationBatch:
    if cfg.method == "none":
        clean_loss, clean_grads, g = _run(params, config, batch)
        return PerturbationBatch([], None, [], clean_loss, clean_grads, g)
    return _GENERATORS[cfg.method](params, config, batch, cfg)


def augmented_step_gradient(clean_grad, batch: PerturbationBatch, cfg: AdvConfig):
    """Gradient to hand the optimizer for this step.

    include_clean mixes the clean-point gradient with the adversarial average;
    otherwise the adversarial average alone trains. With no adversarial points
    (method none) the clean gradient passes through unchanged.
    """
    if batch.g_avg is None:
        return clean_grad
    for k, v in batch.g_avg.items():
        if k not in clean_grad or clean_grad[k].shape != v.shape:
            raise ValueError(f"gradient shape mismatch on {k}")
    if cfg.include_clean:
        return _mean_params([clean_grad, batch.g_avg])
    return batch.g_avg


def adversarial_loss_estimate(clean_loss, grad, epsilon, q=2):
    """First-order worst-case loss estimate: L + (eps/2) * ||g||_q.

    A regularization readout logged during training, never used for updates.
    """
    if q not in (1, 2):
        raise ValueError("q must be 1 or 2")
    norms = _per_example_norms(grad, q).reshape(-1)
    return float(clean_loss + (epsilon / 2.0) * norms.mean())
