"""Perplexity, layer input/output similarity, throughput benchmarking and the lambda grid."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import DataError, windows
from .model import ModelState, forward

log = logging.getLogger(__name__)


def perplexity(state: ModelState, split: np.ndarray, seq_len: int | None = None,
               stride: int | None = None, chunk: int = 32) -> float:
    """exp of the mean next-token NLL over windows of ``split`` (non-overlapping by default)."""
    if len(split) == 0:
        raise DataError("evaluation split is empty")
    seq_len = seq_len or state.config.max_seq
    wins = windows(split, seq_len, stride)
    return math.exp(mean_nll(state, wins, chunk))


def mean_nll(state: ModelState, tokens: np.ndarray, chunk: int = 32) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(tokens), chunk):
            b = tokens[i:i + chunk]
            n = b.shape[0] * (b.shape[1] - 1)
            total += ad.cross_entropy(forward(state, b), b).item() * n
            count += n
    return total / count


def cosine_similarity(x_in: np.ndarray, x_out: np.ndarray) -> tuple[float, int]:
    """Mean over all (batch, position) vectors of cos(x_in, x_out); zero-norm pairs count as 0.

    Returns ``(mean, n_zero_norm)``.
    """
    x_in = np.asarray(x_in, dtype=np.float64)
    x_out = np.asarray(x_out, dtype=np.float64)
    if x_in.shape != x_out.shape:
        raise ValueError(f"shape mismatch {x_in.shape} vs {x_out.shape}")
    dots = (x_in * x_out).sum(axis=-1)
    norms = np.linalg.norm(x_in, axis=-1) * np.linalg.norm(x_out, axis=-1)
    zero = norms == 0
    cos = np.where(zero, 0.0, dots / np.where(zero, 1.0, norms))
    return float(np.clip(cos, -1.0, 1.0).mean()), int(zero.sum())


def cosine_similarity_trace(state: ModelState, tokens: np.ndarray, layers=None,
                            chunk: int = 32) -> dict[int, float]:
    """Per-layer mean CosSim(X_in, X_out) over ``tokens`` (original layer indices)."""
    layers = state.active_layers() if layers is None else list(layers)
    for i in layers:
        if i in state.mask_set:
            raise ValueError(f"layer {i} is masked; its input/output are undefined")
        state.position_of(i)
    sums = {i: 0.0 for i in layers}
    zeros = 0
    count = 0
    with ad.no_grad():
        for s in range(0, len(tokens), chunk):
            b = tokens[s:s + chunk]
            _, tr = forward(state, b, trace=layers)
            for i in layers:
                m, z = cosine_similarity(tr.inputs[i].data, tr.outputs[i].data)
                sums[i] += m * b.shape[0]
                zeros += z
            count += b.shape[0]
    if zeros:
        log.warning("%d zero-norm activation vectors contributed 0 to similarity", zeros)
    return {i: sums[i] / count for i in layers}


# --------------------------------------------------------------------------
# timing


@dataclass
class BenchResult:
    tokens_per_second: float
    latency_ms: float
    gen_times: list[float] = field(default_factory=list)
    prompt_times: list[float] = field(default_factory=list)


def _generate(state: ModelState, prompt: np.ndarray, gen_len: int) -> np.ndarray:
    """Greedy decoding: one forward over the running context per new token."""
    seq = prompt
    window = state.config.max_seq
    for _ in range(gen_len):
        logits = forward(state, seq[:, -window:])
        nxt = logits.data[:, -1, :].argmax(axis=-1)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return seq


def benchmark(state: ModelState, batch: int = 8, gen_len: int = 32, prompt_len: int | None = None,
              repeats: int = 5, warmup: int = 1, seed: int = 0) -> BenchResult:
    """Median token-generation throughput and median prompt-processing latency."""
    prompt_len = prompt_len or state.config.max_seq
    rng = np.random.default_rng(seed)
    V = state.config.vocab_size
    gen_prompt = rng.integers(0, V, size=(batch, 1))
    full_prompt = rng.integers(0, V, size=(batch, prompt_len))
    gen_times, prompt_times = [], []
    with ad.no_grad():
        for r in range(warmup + repeats):
            t0 = time.perf_counter()
            _generate(state, gen_prompt, gen_len)
            t1 = time.perf_counter()
            forward(state, full_prompt)
            t2 = time.perf_counter()
            if r >= warmup:
                gen_times.append(t1 - t0)
                prompt_times.append(t2 - t1)
    gen = statistics.median(gen_times)
    return BenchResult(batch * gen_len / gen, 1e3 * statistics.median(prompt_times), gen_times, prompt_times)


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    ppl: float
    similarity_before: dict[int, float] = field(default_factory=dict)
    similarity_after: dict[int, float] = field(default_factory=dict)
    tokens_per_second: float | None = None
    latency_ms: float | None = None
    selection: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.ppl >= 1.0:
            raise ValueError(f"perplexity must be >= 1, got {self.ppl}")
        for d in (self.similarity_before, self.similarity_after):
            for k, v in d.items():
                if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                    raise ValueError(f"similarity of layer {k} outside [-1, 1]: {v}")

    def to_json(self) -> str:
        d = asdict(self)
        d["similarity_before"] = {str(k): v for k, v in self.similarity_before.items()}
        d["similarity_after"] = {str(k): v for k, v in self.similarity_after.items()}
        return json.dumps(d, indent=2, sort_keys=True)


def similarity_csv(before: dict[int, float], after: dict[int, float], regularized=()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "before", "after", "regularized"])
    for i in sorted(set(before) | set(after)):
        w.writerow([i, _fmt(before.get(i)), _fmt(after.get(i)), int(i in set(regularized))])
    return buf.getvalue()


def grid_csv(lambda1s, lambda2s, matrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda1\\lambda2"] + [repr(float(x)) for x in lambda2s])
    for l1, row in zip(lambda1s, matrix):
        w.writerow([repr(float(l1))] + [_fmt(v) for v in row])
    return buf.getvalue()


def read_grid_csv(text: str) -> tuple[list[float], list[float], np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    lambda2s = [float(x) for x in rows[0][1:]]
    lambda1s = [float(r[0]) for r in rows[1:]]
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return lambda1s, lambda2s, matrix


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def lambda_grid(state: ModelState, calib, eval_split: np.ndarray, lambda1s, lambda2s, ratio: float,
                stage1, stage2, mode: str = "iterative", seed: int = 0) -> np.ndarray:
    """Test perplexity of a full TRSP run for every (lambda1, lambda2) pair, same seed throughout."""
    from dataclasses import replace

    from .core import run_trsp

    if not len(lambda1s) or not len(lambda2s):
        raise ValueError("lambda lists must be non-empty")
    out = np.zeros((len(lambda1s), len(lambda2s)))
    for a, l1 in enumerate(lambda1s):
        for b, l2 in enumerate(lambda2s):
            res = run_trsp(state, calib, ratio, replace(stage1, lambda1=float(l1)),
                           replace(stage2, lambda2=float(l2)), mode=mode, seed=seed)
            out[a, b] = perplexity(res.model, eval_split)
            log.info("grid lambda1=%g lambda2=%g ppl=%.4f P=%s", l1, l2, out[a, b], res.prune_set.indices)
    return out
