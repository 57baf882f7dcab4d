"""Language-model pretraining of the dense baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Corpus, DataError, random_batch, windows
from .model import ModelState, lm_loss

log = logging.getLogger(__name__)


class EarlyStopping:
    """Stop after ``patience`` consecutive evaluations improving by less than ``min_delta``."""

    def __init__(self, patience: int = 5, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.bad = 0

    def update(self, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.bad = 0
        else:
            self.best = min(self.best, value)
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class PretrainConfig:
    steps: int = 2000
    lr: float = 3e-3
    batch_size: int = 16
    seq_len: int | None = None
    eval_every: int = 100
    eval_windows: int = 32
    patience: int = 5
    min_delta: float = 1e-4
    grad_clip: float = 1.0
    warmup: int = 100
    seed: int = 0


@dataclass
class PretrainResult:
    curve: list[dict] = field(default_factory=list)
    steps_run: int = 0
    stopped_early: bool = False


def mean_loss(state: ModelState, batch_tokens: np.ndarray, chunk: int = 32) -> float:
    """Token-weighted mean next-token NLL over ``batch_tokens`` without recording a tape."""
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(batch_tokens), chunk):
            b = batch_tokens[i:i + chunk]
            n = b.shape[0] * (b.shape[1] - 1)
            total += lm_loss(state, b).item() * n
            count += n
    return total / count


def pretrain(state: ModelState, corpus: Corpus, cfg: PretrainConfig) -> PretrainResult:
    """Adam training on random train windows with early stopping on validation loss."""
    result = PretrainResult()
    if cfg.steps <= 0:
        return result
    if len(corpus.train) == 0:
        raise DataError("corpus train split is empty")
    seq_len = cfg.seq_len or state.config.max_seq
    if len(corpus.train) < seq_len:
        raise DataError(f"train split ({len(corpus.train)} tokens) shorter than one sequence ({seq_len})")
    val = windows(corpus.validation, seq_len)[: cfg.eval_windows]
    rng = np.random.default_rng(cfg.seed)
    params = state.parameters(include_gates=False)
    opt = ad.Adam(params, lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    running = []

    for step in range(1, cfg.steps + 1):
        opt.lr = cfg.lr * min(1.0, step / max(cfg.warmup, 1))
        loss = lm_loss(state, random_batch(corpus.train, cfg.batch_size, seq_len, rng))
        ad.backward(loss)
        state.gates.grad.fill(0.0)
        if cfg.grad_clip:
            ad.clip_grad_norm(params, cfg.grad_clip)
        opt.step()
        running.append(loss.item())
        result.steps_run = step
        if step % cfg.eval_every == 0 or step == cfg.steps:
            val_loss = mean_loss(state, val)
            result.curve.append({"step": step, "train_loss": float(np.mean(running)), "val_loss": val_loss})
            log.info("pretrain step %d train %.4f val %.4f", step, np.mean(running), val_loss)
            running = []
            if stopper.update(val_loss):
                result.stopped_early = True
                break
    return result
