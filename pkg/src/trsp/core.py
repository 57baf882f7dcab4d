"""Two-stage regularized layer pruning.

Stage 1 learns one scalar gate per layer under an L1 penalty and greedily masks
the layer with the smallest gate, ``n`` times. Stage 2 trains the model with a
penalty on ``X_out - X_in`` of every selected layer, pushing those layers toward
the identity before they are removed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import CalibrationSet
from .model import ModelState, forward, mask_layer, prune
from .training import EarlyStopping

log = logging.getLogger(__name__)


class SelectionError(ValueError):
    pass


@dataclass
class Stage1Config:
    lambda1: float = 5e-3
    steps: int = 200
    lr: float = 2e-5
    gate_lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    joint_weights: bool = True
    reinit_gates: bool = False
    criterion: str = "magnitude"  # or "signed"
    batch_size: int | None = 8
    early_stop: bool = True
    eval_every: int = 20
    patience: int = 5
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be non-negative")
        if self.steps < 1:
            raise ValueError("stage-1 steps must be >= 1")
        if self.criterion not in ("magnitude", "signed"):
            raise ValueError("criterion must be 'magnitude' or 'signed'")
        self.betas = tuple(self.betas)


@dataclass
class Stage2Config:
    lambda2: float = 1e-3
    norm: str = "L2"
    steps: int = 500
    lr: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # gates of layers in the prune set: "train" leaves them trainable, "reset"
    # pins them to 1 for the whole stage
    prune_gates: str = "train"
    batch_size: int | None = 8
    early_stop: bool = True
    eval_every: int = 20
    patience: int = 5
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be non-negative")
        if self.steps < 0:
            raise ValueError("stage-2 steps must be >= 0")
        self.norm = self.norm.upper()
        if self.norm not in ("L1", "L2"):
            raise ValueError("norm must be L1 or L2")
        if self.prune_gates not in ("reset", "train"):
            raise ValueError("prune_gates must be 'reset' or 'train'")
        self.betas = tuple(self.betas)


@dataclass
class PruneSet:
    indices: list[int] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    method: str = "trsp-iterative"

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SelectionRecord:
    iteration: int
    gates: list[float]
    chosen: int
    gate_value: float
    loss_first: float
    loss_last: float
    steps_run: int


@dataclass
class SelectionHistory:
    records: list[SelectionRecord] = field(default_factory=list)

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def n_to_prune(ratio: float, n_layers: int) -> int:
    if not 0.0 < ratio < 1.0:
        raise SelectionError(f"pruning ratio must lie in (0, 1), got {ratio}")
    n = int(math.floor(ratio * n_layers + 0.5))
    if n < 1:
        raise SelectionError(f"ratio {ratio} of {n_layers} layers rounds to zero layers")
    if n >= n_layers:
        raise SelectionError(f"ratio {ratio} would remove all {n_layers} layers")
    return n


def stage1_loss(state: ModelState, tokens: np.ndarray, lambda1: float):
    """LM loss plus ``lambda1`` times the L1 norm of the unmasked gates."""
    lm = ad.cross_entropy(forward(state, tokens), tokens)
    active = [state.position_of(o) for o in state.active_layers()]
    if lambda1 == 0.0 or not active:
        return lm, lm
    return lm + ad.scale(ad.l1_sum(state.gates, active), lambda1), lm


def learn_layer_weights(state: ModelState, calib: CalibrationSet, cfg: Stage1Config,
                        seed: int = 0) -> list[float]:
    """Optimize the stage-1 objective for ``cfg.steps`` steps; returns per-step total loss.

    Masked layers receive no gradient, and every call starts fresh optimizer
    moments, so their gates and weights stay exactly as they were.
    """
    if not state.active_layers():
        raise SelectionError("all layers are masked")
    if calib.n_sequences == 0:
        raise SelectionError("calibration set is empty")
    rng = np.random.default_rng(seed)
    gate_opt = ad.Adam([state.gates], lr=cfg.gate_lr, betas=cfg.betas, eps=cfg.eps)
    weights = state.parameters(include_gates=False)
    w_opt = ad.Adam(weights, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps) if cfg.joint_weights else None
    stopper = EarlyStopping(cfg.patience, cfg.min_delta) if cfg.early_stop else None
    batches = calib.batches(cfg.batch_size, rng)
    trajectory: list[float] = []
    window: list[float] = []
    for step in range(1, cfg.steps + 1):
        total, _ = stage1_loss(state, next(batches), cfg.lambda1)
        ad.backward(total)
        gate_opt.step()
        if w_opt is not None:
            w_opt.step()
        else:
            for p in weights:
                p.grad.fill(0.0)
        trajectory.append(total.item())
        window.append(total.item())
        if stopper is not None and step % cfg.eval_every == 0:
            if stopper.update(float(np.mean(window))):
                break
            window = []
    return trajectory


def select_min_gate(gates, mask_set, provenance=None, criterion: str = "magnitude") -> int:
    """Original index of the unmasked layer with the smallest gate; ties go to the lowest index."""
    g = np.asarray(gates.data if isinstance(gates, ad.Tensor) else gates, dtype=float)
    provenance = list(range(len(g))) if provenance is None else list(provenance)
    best, best_val = None, np.inf
    for pos, orig in sorted(enumerate(provenance), key=lambda t: t[1]):
        if orig in mask_set:
            continue
        val = abs(g[pos]) if criterion == "magnitude" else g[pos]
        if val < best_val:
            best, best_val = orig, val
    if best is None:
        raise SelectionError("no unmasked layer to select")
    return best


def smallest_gates(gates, n: int, mask_set=(), provenance=None, criterion: str = "magnitude") -> list[int]:
    g = np.asarray(gates.data if isinstance(gates, ad.Tensor) else gates, dtype=float)
    provenance = list(range(len(g))) if provenance is None else list(provenance)
    cand = [(abs(g[p]) if criterion == "magnitude" else g[p], o) for p, o in enumerate(provenance)
            if o not in mask_set]
    if n > len(cand):
        raise SelectionError(f"cannot pick {n} of {len(cand)} unmasked layers")
    return [o for _, o in sorted(cand)[:n]]


def _check_n(state: ModelState, n: int) -> None:
    free = len(state.active_layers())
    if not 1 <= n < free:
        raise SelectionError(f"number of layers to prune must satisfy 1 <= n < {free}, got {n}")


def iterative_selection(state: ModelState, calib: CalibrationSet, n: int, cfg: Stage1Config,
                        seed: int = 0) -> tuple[PruneSet, SelectionHistory]:
    """Greedy loop: learn gates, mask the smallest, repeat ``n`` times. Masks ``state`` in place."""
    _check_n(state, n)
    start_mask = set(state.mask_set)
    pset, hist = PruneSet(method="trsp-iterative"), SelectionHistory()
    for it in range(n):
        if cfg.reinit_gates:
            for o in state.active_layers():
                state.gates.data[state.position_of(o)] = 1.0
        traj = learn_layer_weights(state, calib, cfg, seed=seed * 1009 + it)
        chosen = select_min_gate(state.gates, state.mask_set, state.provenance, cfg.criterion)
        hist.records.append(SelectionRecord(
            it, state.gates.data.tolist(), chosen, float(state.gates.data[state.position_of(chosen)]),
            traj[0], traj[-1], len(traj)))
        log.info("iteration %d: gates=%s -> mask %d", it, np.round(state.gates.data, 4), chosen)
        mask_layer(state, chosen)
        pset.indices.append(chosen)
        pset.iterations.append(it)
    assert not set(pset.indices) & start_mask
    return pset, hist


def one_shot_selection(state: ModelState, calib: CalibrationSet, n: int, cfg: Stage1Config,
                       seed: int = 0) -> tuple[PruneSet, SelectionHistory]:
    """Single gate-learning pass; the ``n`` smallest gates form the prune set. ``state`` is not masked."""
    _check_n(state, n)
    traj = learn_layer_weights(state, calib, cfg, seed=seed * 1009)
    chosen = smallest_gates(state.gates, n, state.mask_set, state.provenance, cfg.criterion)
    hist = SelectionHistory([SelectionRecord(
        0, state.gates.data.tolist(), c, float(state.gates.data[state.position_of(c)]),
        traj[0], traj[-1], len(traj)) for c in chosen])
    return PruneSet(chosen, [0] * n, "trsp-one-shot"), hist


# --------------------------------------------------------------------------
# stage 2


def stage2_loss(state: ModelState, tokens: np.ndarray, prune_set, lambda2: float, norm: str):
    """Returns (total, lm, penalty) with penalty = sum over the prune set of the mean per-vector norm."""
    targets = list(prune_set)
    logits, tr = forward(state, tokens, trace=targets)
    lm = ad.cross_entropy(logits, tokens)
    penalty = None
    for i in targets:
        term = ad.norm_penalty(tr.outputs[i] - tr.inputs[i], norm, per_vector=True)
        penalty = term if penalty is None else penalty + term
    if lambda2 == 0.0:
        return lm, lm, penalty
    return lm + ad.scale(penalty, lambda2), lm, penalty


def identity_penalty(state: ModelState, tokens: np.ndarray, prune_set, norm: str = "L2",
                     chunk: int = 32) -> float:
    """Mean per-vector ||X_out - X_in|| summed over ``prune_set``, evaluated without a tape."""
    vals = []
    with ad.no_grad():
        for i in range(0, len(tokens), chunk):
            _, _, pen = stage2_loss(state, tokens[i:i + chunk], prune_set, 0.0, norm)
            vals.append((pen.item(), len(tokens[i:i + chunk])))
    return sum(v * w for v, w in vals) / sum(w for _, w in vals)


@dataclass
class Stage2Result:
    penalty: list[float] = field(default_factory=list)
    lm_loss: list[float] = field(default_factory=list)
    penalty_initial: float = float("nan")
    penalty_final: float = float("nan")
    steps_run: int = 0


def stage2_regularize(state: ModelState, prune_set, calib: CalibrationSet, cfg: Stage2Config,
                      seed: int = 0) -> Stage2Result:
    """Train all parameters on LM loss + lambda2 * identity penalty of the prune set.

    The mask set is cleared first: layers in the prune set must run to be penalized.
    """
    targets = list(prune_set)
    if not targets:
        raise SelectionError("stage 2 needs a non-empty prune set")
    for i in targets:
        state.position_of(i)
    state.mask_set.clear()
    frozen: list[int] = []
    if cfg.prune_gates == "reset":
        frozen = [state.position_of(i) for i in targets]
        state.gates.data[frozen] = 1.0

    res = Stage2Result()
    res.penalty_initial = identity_penalty(state, calib.tokens, targets, cfg.norm)
    rng = np.random.default_rng(seed)
    opt = ad.Adam(state.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta) if cfg.early_stop else None
    batches = calib.batches(cfg.batch_size, rng)
    window: list[float] = []
    for step in range(1, cfg.steps + 1):
        total, lm, pen = stage2_loss(state, next(batches), targets, cfg.lambda2, cfg.norm)
        ad.backward(total)
        if frozen:
            state.gates.grad[frozen] = 0.0
        opt.step()
        res.penalty.append(pen.item())
        res.lm_loss.append(lm.item())
        res.steps_run = step
        window.append(total.item())
        if stopper is not None and step % cfg.eval_every == 0:
            if stopper.update(float(np.mean(window))):
                break
            window = []
    res.penalty_final = identity_penalty(state, calib.tokens, targets, cfg.norm)
    return res


# --------------------------------------------------------------------------
# end to end


def max_consecutive_run(indices) -> int:
    s = sorted(set(indices))
    best = run = 1 if s else 0
    for a, b in zip(s, s[1:]):
        run = run + 1 if b == a + 1 else 1
        best = max(best, run)
    return best


@dataclass
class TRSPResult:
    model: ModelState
    prune_set: PruneSet
    history: SelectionHistory
    stage2: Stage2Result | None
    regularized: ModelState | None = None  # full-depth model right before removal


def run_trsp(state: ModelState, calib: CalibrationSet, ratio: float, stage1: Stage1Config,
             stage2: Stage2Config, mode: str = "iterative", regularize: bool = True,
             seed: int = 0) -> TRSPResult:
    """Selection, optional stage-2 regularization, then removal. ``state`` is left untouched."""
    if mode not in ("iterative", "one_shot"):
        raise ValueError("mode must be 'iterative' or 'one_shot'")
    n = n_to_prune(ratio, len(state.active_layers()))
    work = state.copy()
    select = iterative_selection if mode == "iterative" else one_shot_selection
    pset, hist = select(work, calib, n, stage1, seed=seed)
    s2 = None
    if regularize:
        s2 = stage2_regularize(work, pset, calib, stage2, seed=seed + 7919)
    pruned = prune(work, pset)
    return TRSPResult(pruned, pset, hist, s2, work)
