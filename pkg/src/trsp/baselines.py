"""Simplified layer-selection baselines: similarity ranking, loss impact, random.

These are simplified proxies of published selectors (no retraining, no layer
merging), used as comparison arms for the TRSP pipeline.
"""

from __future__ import annotations

import numpy as np

from .core import PruneSet, SelectionError
from .data import CalibrationSet
from .diagnostics import cosine_similarity_trace
from .model import ModelState
from .training import mean_loss

STRATEGIES = ("similarity", "loss-impact", "random")


def _check(state: ModelState, n: int) -> list[int]:
    active = state.active_layers()
    if not 1 <= n < len(active):
        raise SelectionError(f"number of layers to prune must satisfy 1 <= n < {len(active)}, got {n}")
    return active


def similarity_rank_selection(state: ModelState, calib: CalibrationSet, n: int) -> PruneSet:
    """The ``n`` layers whose output is most cosine-similar to their input."""
    active = _check(state, n)
    sims = cosine_similarity_trace(state, calib.tokens, active)
    ranked = sorted(active, key=lambda i: (-sims[i], i))
    return PruneSet(ranked[:n], list(range(n)), "similarity-style")


def loss_impact_selection(state: ModelState, calib: CalibrationSet, n: int) -> PruneSet:
    """Greedily mask the layer whose removal gives the lowest calibration loss, ``n`` times."""
    _check(state, n)
    original = set(state.mask_set)
    chosen: list[int] = []
    try:
        for _ in range(n):
            best, best_loss = None, np.inf
            for cand in state.active_layers():
                state.mask_set.add(cand)
                loss = mean_loss(state, calib.tokens)
                state.mask_set.discard(cand)
                if loss < best_loss:
                    best, best_loss = cand, loss
            state.mask_set.add(best)
            chosen.append(best)
    finally:
        state.mask_set.clear()
        state.mask_set.update(original)
    return PruneSet(chosen, list(range(n)), "loss-impact-style")


def random_selection(n_layers: int, n: int, seed: int) -> PruneSet:
    if not 0 <= n <= n_layers:
        raise SelectionError(f"cannot draw {n} of {n_layers} layers")
    rng = np.random.default_rng(seed)
    picked = sorted(int(i) for i in rng.choice(n_layers, size=n, replace=False))
    return PruneSet(picked, list(range(n)), "random")


def select(strategy: str, state: ModelState, calib: CalibrationSet, n: int, seed: int = 0) -> PruneSet:
    if strategy == "similarity":
        return similarity_rank_selection(state, calib, n)
    if strategy == "loss-impact":
        return loss_impact_selection(state, calib, n)
    if strategy == "random":
        _check(state, n)
        active = state.active_layers()
        picked = random_selection(len(active), n, seed)
        return PruneSet([active[i] for i in picked.indices], picked.iterations, "random")
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
