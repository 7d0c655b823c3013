"""Supervised fine-tuning on serialized real rows and the frozen reference."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .lm import AdamW, LogProbPass, PolicyModel, ReferenceSnapshot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 3e-3
    seed: int = 0
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid SFT configuration")


def batch_loss_and_grad(model, seqs):
    """Mean negative sequence log-likelihood of ``seqs`` and its gradient."""
    lp = LogProbPass(model, seqs)
    n = len(seqs)
    return float(-lp.logps.mean()), lp.grad(np.full(n, -1.0 / n))


def sft_train(model: PolicyModel, seqs, cfg: SftConfig, history=None):
    """Minimize mean sequence NLL with AdamW over shuffled mini-batches.

    Updates ``model`` in place and returns it. ``history``, when given, is
    extended with ``{"epoch", "loss"}`` records (mean batch loss per epoch).
    A non-finite loss restores the parameters from the last finished epoch
    and raises ``FloatingPointError``.
    """
    seqs = [tuple(s) for s in seqs]
    if not seqs:
        raise ValueError("no training sequences")
    opt = AdamW(model.params.size, lr=cfg.lr, weight_decay=cfg.weight_decay)
    root = np.random.SeedSequence(cfg.seed)
    for epoch, child in zip(range(cfg.epochs), root.spawn(cfg.epochs)):
        last_good = model.params.copy()
        rng = np.random.default_rng(child)
        order = rng.permutation(len(seqs))
        losses = []
        for start in range(0, len(seqs), cfg.batch_size):
            batch = [seqs[i] for i in order[start:start + cfg.batch_size]]
            loss, grad = batch_loss_and_grad(model, batch)
            if not np.isfinite(loss):
                model.params[:] = last_good
                raise FloatingPointError(f"non-finite SFT loss at epoch {epoch}")
            opt.step(model, grad)
            losses.append(loss)
        mean = float(np.mean(losses))
        log.info("sft epoch %d loss %.4f", epoch, mean)
        if history is not None:
            history.append({"epoch": epoch, "loss": mean})
    return model


def snapshot_reference(model: PolicyModel) -> ReferenceSnapshot:
    if not np.all(np.isfinite(model.params)):
        raise ValueError("cannot snapshot a model with non-finite parameters")
    return ReferenceSnapshot(model)
