"""Pointwise fine-tuning of the cross-encoder from triples.

Each triple becomes two classification examples (positive/negative
passage for the same query). Optimization is Adam with bias correction
and decoupled weight decay, linear warmup then linear decay to zero,
and global gradient-norm clipping. Input perturbation is applied per
example with a key derived from (epoch, example index) so shuffles are
reproducible but re-drawn every epoch (unless `shuffle_fixed`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import perturb
from .corpus import Triple
from .tokenizer import Vocab, encode_pair


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_peak: float = 3e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    epoch_size: int = 200            # optimizer steps between held-out evals
    seed: int = 13
    train_perturb: perturb.PerturbMode = perturb.NATURAL
    weight_decay: float = 0.001
    grad_clip_norm: float = 1.0
    shuffle_fixed: bool = False      # one permutation per example across epochs
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (balanced pos/neg)")


# the paper's full-scale settings, kept as a named preset for reference;
# from-scratch toy models need a much larger learning rate
PAPER_PRESET = dict(batch_size=64, lr_peak=3e-6, warmup_steps=1000, epoch_size=1000)


@dataclass
class TrainLog:
    steps: list[tuple[int, float, float]] = field(default_factory=list)  # (step, loss, lr)
    evals: list[tuple[int, float]] = field(default_factory=list)         # (step, metric)
    best_step: int = -1
    best_metric: float = float("-inf")


def write_train_log(log: TrainLog, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("step\tloss\tlr\n")
        for step, loss, lr in log.steps:
            f.write(f"{step}\t{loss:.6f}\t{lr:.8f}\n")


def lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if cfg.total_steps == cfg.warmup_steps:
        return cfg.lr_peak
    return cfg.lr_peak * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def make_examples(triple: Triple, vocab: Vocab, max_len: int,
                  mode: perturb.PerturbMode = perturb.NATURAL,
                  example_key: str = ""):
    """Encode one triple into a (positive, negative) labelled example pair."""
    query, pos_text, neg_text = triple
    pos = perturb.apply(encode_pair(query, pos_text, vocab, max_len), mode, example_key + "|pos")
    neg = perturb.apply(encode_pair(query, neg_text, vocab, max_len), mode, example_key + "|neg")
    return [(pos, 1), (neg, 0)]


def train(mdl: M.Model, triples: list[Triple], cfg: TrainConfig, vocab: Vocab,
          eval_hook=None):
    """Run the optimization loop; returns (best model, TrainLog).

    `eval_hook(model) -> float` is called every `epoch_size` steps and at
    the end; the checkpoint with the highest metric is returned. Without
    a hook the final parameters are returned.
    """
    cfg.validate()
    if not triples:
        raise ValueError("empty triple stream")
    max_len = mdl.config.max_len
    encoded = [
        make_examples(t, vocab, max_len)  # natural encoding; perturbed per use
        for t in triples
    ]

    order_rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng(cfg.seed + 1)

    m_state = {k: np.zeros_like(v) for k, v in mdl.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in mdl.params.items()}
    log = TrainLog()
    best_params = None

    def run_eval(step):
        nonlocal best_params
        if eval_hook is None:
            return
        metric = float(eval_hook(mdl))
        log.evals.append((step, metric))
        if metric > log.best_metric:
            log.best_metric = metric
            log.best_step = step
            best_params = {k: v.copy() for k, v in mdl.params.items()}

    epoch = 0
    order = order_rng.permutation(len(encoded))
    cursor = 0
    per_step = cfg.batch_size // 2

    for step in range(cfg.total_steps):
        batch_pairs, batch_labels = [], []
        for _ in range(per_step):
            if cursor >= len(order):
                epoch += 1
                order = order_rng.permutation(len(encoded))
                cursor = 0
            idx = int(order[cursor])
            cursor += 1
            key_epoch = 0 if cfg.shuffle_fixed else epoch
            for side, (pair, label) in zip(("pos", "neg"), encoded[idx]):
                p = perturb.apply(pair, cfg.train_perturb, f"{key_epoch}:{idx}|{side}")
                batch_pairs.append(p)
                batch_labels.append(label)

        loss, grads = M.loss_and_grads(mdl, batch_pairs, batch_labels,
                                       train_mode=True, rng=dropout_rng)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss {loss} at step {step} (lr={lr_at(step, cfg):.2e})"
            )

        gnorm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if cfg.grad_clip_norm > 0 and gnorm > cfg.grad_clip_norm:
            scale = cfg.grad_clip_norm / gnorm
            for g in grads.values():
                g *= scale

        lr = lr_at(step, cfg)
        t = step + 1
        bc1 = 1.0 - cfg.adam_beta1 ** t
        bc2 = 1.0 - cfg.adam_beta2 ** t
        for name, p in mdl.params.items():
            g = grads[name]
            m_state[name] = cfg.adam_beta1 * m_state[name] + (1 - cfg.adam_beta1) * g
            v_state[name] = cfg.adam_beta2 * v_state[name] + (1 - cfg.adam_beta2) * g * g
            update = (m_state[name] / bc1) / (np.sqrt(v_state[name] / bc2) + cfg.adam_eps)
            if cfg.weight_decay > 0 and p.ndim >= 2:
                update = update + cfg.weight_decay * p
            p -= lr * update

        log.steps.append((step, loss, lr))
        if (step + 1) % cfg.epoch_size == 0:
            run_eval(step + 1)

    if not log.evals or log.evals[-1][0] != cfg.total_steps:
        run_eval(cfg.total_steps)

    if best_params is not None:
        mdl = M.Model(mdl.config, best_params)
    return mdl, log


def grad_check(mdl: M.Model, example, eps: float = 1e-5, n_coords: int = 200,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples roughly n_coords coordinates spread over every named
    parameter. Requires 64-bit precision and dropout off. The relative
    denominator is floored at 1e-6: below that the central difference is
    dominated by round-off (~1e-11 absolute at eps=1e-5), so tiny
    gradients are compared absolutely.
    """
    pairs, labels = example
    if mdl.config.dtype != np.float64:
        raise ValueError("gradient check requires 64-bit precision")
    _, grads = M.loss_and_grads(mdl, pairs, labels)
    rng = np.random.default_rng(seed)
    per_param = max(1, -(-n_coords // len(mdl.params)))
    max_rel = 0.0
    for name, p in mdl.params.items():
        flat = p.reshape(-1)
        coords = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            lp = M.batch_loss(mdl, pairs, labels)
            flat[c] = orig - eps
            lm = M.batch_loss(mdl, pairs, labels)
            flat[c] = orig
            numeric = (lp - lm) / (2 * eps)
            analytic = grads[name].reshape(-1)[c]
            denom = max(abs(analytic), abs(numeric), 1e-6)
            max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return max_rel
