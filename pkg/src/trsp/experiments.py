"""Glue shared by the CLI, the scripts and the acceptance suite."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .core import (
    PruneSet,
    TRSPResult,
    iterative_selection,
    max_consecutive_run,
    n_to_prune,
    one_shot_selection,
    run_trsp,
    stage2_regularize,
)
from .data import CalibrationSet, Corpus, DataError, load_corpus, sample_calibration
from .diagnostics import benchmark, cosine_similarity_trace, perplexity
from .model import ModelConfig, ModelState, init_model, prune
from .training import PretrainResult, pretrain

log = logging.getLogger(__name__)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def corpus_for(cfg: RunConfig) -> Corpus:
    if not cfg.data.corpus:
        raise ConfigError("data.corpus is required (set it under [data] or pass --corpus)")
    if not Path(cfg.data.corpus).is_file():
        raise ConfigError(f"data.corpus: file not found: {cfg.data.corpus}")
    return load_corpus(cfg.data.corpus, cfg.data.mode, cfg.data.fractions, cfg.run.seed)


def eval_split(corpus: Corpus, cfg: RunConfig) -> np.ndarray:
    split = getattr(corpus, cfg.data.eval_split)
    if cfg.data.eval_tokens:
        split = split[: cfg.data.eval_tokens]
    return split


def eval_split_hash(split: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(split, dtype="<i8").tobytes()).hexdigest()[:16]


def calibration_for(corpus: Corpus, cfg: RunConfig) -> CalibrationSet:
    return sample_calibration(corpus, cfg.data.calib_n, cfg.data.calib_len, cfg.seeds()["calibration"])


def model_config_for(cfg: RunConfig, corpus: Corpus) -> ModelConfig:
    d = cfg.model.to_dict()
    d["vocab_size"] = corpus.tokenizer.vocab_size
    return ModelConfig(**d)


def check_compatible(state: ModelState, corpus: Corpus) -> None:
    if state.config.vocab_size != corpus.tokenizer.vocab_size:
        raise DataError(f"checkpoint vocabulary ({state.config.vocab_size}) does not match the corpus "
                        f"tokenizer ({corpus.tokenizer.vocab_size})")


def train_dense(cfg: RunConfig, corpus: Corpus) -> tuple[ModelState, PretrainResult]:
    seeds = cfg.seeds()
    state = init_model(model_config_for(cfg, corpus), seeds["init"])
    result = pretrain(state, corpus, replace(cfg.pretrain, seed=seeds["pretrain"]))
    return state, result


def cached_dense(cfg: RunConfig, corpus: Corpus, cache_dir) -> tuple[ModelState, dict]:
    """Load the dense model for ``cfg`` from ``cache_dir`` or train and store it.

    The cache key covers the model/pretrain config, seed and corpus contents, and
    pretraining is deterministic, so a hit is byte-identical to retraining. The
    returned info records the original training time and whether the cache hit.
    """
    key_src = json.dumps({"model": cfg.to_dict()["model"], "pretrain": cfg.to_dict()["pretrain"],
                          "seed": cfg.run.seed, "corpus": corpus.split_hash("train")}, sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"dense-{key}.trsp"
    meta = path.with_suffix(".json")
    if path.is_file() and meta.is_file():
        info = json.loads(meta.read_text())
        return load_checkpoint(path), {**info, "cache_hit": True}
    t0 = time.perf_counter()
    state, result = train_dense(cfg, corpus)
    info = {"pretrain_seconds": time.perf_counter() - t0, "steps_run": result.steps_run,
            "curve": result.curve, "path": str(path)}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(state, tmp)
    tmp.replace(path)
    meta.write_text(json.dumps(info, indent=2))
    return state, {**info, "cache_hit": False}


@dataclass
class StrategyOutcome:
    strategy: str
    prune_set: PruneSet
    model: ModelState
    ppl: float
    trsp: TRSPResult | None = None
    extra: dict = field(default_factory=dict)


def run_strategy(dense: ModelState, calib: CalibrationSet, split: np.ndarray, cfg: RunConfig,
                 strategy: str | None = None, mode: str | None = None,
                 regularize: bool | None = None) -> StrategyOutcome:
    strategy = strategy or cfg.prune.strategy
    seed = cfg.seeds()["selection"]
    if strategy == "trsp":
        res = run_trsp(dense, calib, cfg.prune.ratio, cfg.stage1, cfg.stage2,
                       mode=mode or cfg.prune.mode,
                       regularize=cfg.prune.regularize if regularize is None else regularize, seed=seed)
        return StrategyOutcome("trsp", res.prune_set, res.model, perplexity(res.model, split), res)
    n = n_to_prune(cfg.prune.ratio, len(dense.active_layers()))
    pset = baselines.select(strategy, dense, calib, n, seed=seed)
    model = prune(dense, pset)
    return StrategyOutcome(strategy, pset, model, perplexity(model, split))


def similarity_shift(dense: ModelState, regularized: ModelState, tokens: np.ndarray,
                     prune_set) -> dict:
    """Per-layer similarity before/after stage 2 and the mean shifts inside and outside P."""
    before = cosine_similarity_trace(dense, tokens)
    after = cosine_similarity_trace(regularized, tokens)
    P = set(prune_set)
    inside = [after[i] - before[i] for i in before if i in P]
    outside = [after[i] - before[i] for i in before if i not in P]
    return {
        "before": before,
        "after": after,
        "delta_p": float(np.mean(inside)),
        "delta_rest": float(np.mean(outside)) if outside else 0.0,
        "mean_p_before": float(np.mean([before[i] for i in P])),
        "mean_p_after": float(np.mean([after[i] for i in P])),
    }


def consecutive_stat(prune_set) -> int:
    return max_consecutive_run(list(prune_set))


def throughput_ratio(dense: ModelState, pruned: ModelState, cfg: RunConfig) -> dict:
    b = cfg.bench
    kw = dict(batch=b.batch, gen_len=b.gen_len, prompt_len=b.prompt_len, repeats=b.repeats,
              warmup=b.warmup, seed=cfg.seeds()["bench"])
    d = benchmark(dense, **kw)
    p = benchmark(pruned, **kw)
    return {
        "dense_tokens_per_second": d.tokens_per_second,
        "pruned_tokens_per_second": p.tokens_per_second,
        "dense_latency_ms": d.latency_ms,
        "pruned_latency_ms": p.latency_ms,
        "throughput_ratio": p.tokens_per_second / d.tokens_per_second,
        "latency_ratio": p.latency_ms / d.latency_ms,
    }


def pipeline_config(cfg: RunConfig, seed: int) -> RunConfig:
    """Copy of ``cfg`` whose calibration/selection/bench seeds derive from ``seed``."""
    return replace(cfg, run=replace(cfg.run, seed=seed))


@dataclass
class SeedArms:
    """Every ablation arm of one pipeline seed, sharing calibration data and the dense model."""

    seed: int
    prune_set: list[int]
    ppl_dense: float
    ppl_stage2_on: float
    ppl_stage2_off: float
    penalty_initial: float
    penalty_final: float
    similarity: dict
    one_shot_set: list[int]
    ppl_one_shot: float
    baselines: dict[str, float]
    baseline_sets: dict[str, list[int]]
    seconds: float = 0.0

    @property
    def run_iterative(self) -> int:
        return max_consecutive_run(self.prune_set)

    @property
    def run_one_shot(self) -> int:
        return max_consecutive_run(self.one_shot_set)


def seed_arms(dense: ModelState, corpus: Corpus, cfg: RunConfig, seed: int,
              with_baselines: bool = True, with_one_shot_stage2: bool = True) -> SeedArms:
    t0 = time.perf_counter()
    cfg = pipeline_config(cfg, seed)
    calib = calibration_for(corpus, cfg)
    split = eval_split(corpus, cfg)
    sel_seed = cfg.seeds()["selection"]
    n = n_to_prune(cfg.prune.ratio, dense.n_layers)

    work = dense.copy()
    pset, _ = iterative_selection(work, calib, n, cfg.stage1, seed=sel_seed)
    ppl_off = perplexity(prune(work, pset), split)
    work.mask_set.clear()
    pre = work.copy()
    s2 = stage2_regularize(work, pset, calib, cfg.stage2, seed=sel_seed + 7919)
    ppl_on = perplexity(prune(work, pset), split)
    shift = similarity_shift(pre, work, calib.tokens, pset)

    os_work = dense.copy()
    os_set, _ = one_shot_selection(os_work, calib, n, cfg.stage1, seed=sel_seed)
    if with_one_shot_stage2:
        stage2_regularize(os_work, os_set, calib, cfg.stage2, seed=sel_seed + 7919)
    ppl_os = perplexity(prune(os_work, os_set), split)

    base, base_sets = {}, {}
    if with_baselines:
        for s in ("similarity", "loss-impact", "random"):
            q = baselines.select(s, dense, calib, n, seed=sel_seed)
            base[s] = perplexity(prune(dense, q), split)
            base_sets[s] = list(q.indices)
    return SeedArms(seed, list(pset.indices), perplexity(dense, split), ppl_on, ppl_off,
                    s2.penalty_initial, s2.penalty_final, shift, list(os_set.indices), ppl_os,
                    base, base_sets, time.perf_counter() - t0)


def selection_sets(dense: ModelState, corpus: Corpus, cfg: RunConfig, seed: int) -> tuple[list[int], list[int]]:
    """Iterative and one-shot prune sets for one pipeline seed (no stage 2)."""
    cfg = pipeline_config(cfg, seed)
    calib = calibration_for(corpus, cfg)
    sel_seed = cfg.seeds()["selection"]
    n = n_to_prune(cfg.prune.ratio, dense.n_layers)
    it, _ = iterative_selection(dense.copy(), calib, n, cfg.stage1, seed=sel_seed)
    os_, _ = one_shot_selection(dense.copy(), calib, n, cfg.stage1, seed=sel_seed)
    return list(it.indices), list(os_.indices)
