"""Gated, maskable pre-norm decoder-only transformer."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

GATE_MODES = ("delta", "stream")

LAYER_PARAM_NAMES = (
    "ln1.g", "ln1.b",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


@dataclass
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    ff_dim: int | None = None
    vocab_size: int = 256
    max_seq: int = 64
    layernorm_eps: float = 1e-5
    tie_head: bool = False
    # "delta": the gate multiplies only the layer's residual update.
    # "stream": the gate multiplies the whole post-residual layer output.
    gate_mode: str = "delta"

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 4 * self.d_model
        for name in ("n_layers", "d_model", "n_heads", "ff_dim", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not self.layernorm_eps > 0:
            raise ValueError("layernorm_eps must be positive")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerIOTrace:
    """Per-layer input/output activations keyed by original layer index."""

    inputs: dict[int, Tensor] = field(default_factory=dict)
    outputs: dict[int, Tensor] = field(default_factory=dict)


class ModelState:
    """Parameters, per-layer gates and the set of bypassed layers.

    ``layers[k]`` holds the parameters of the k-th *stored* layer; ``provenance[k]``
    is its index in the original (unpruned) model. ``mask_set`` and every prune set
    use original indices.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Parameter],
                 layers: list[dict[str, Parameter]], gates: Parameter,
                 provenance: list[int] | None = None, mask_set: set[int] | None = None):
        self.config = config
        self.params = params
        self.layers = layers
        self.gates = gates
        self.provenance = list(range(len(layers))) if provenance is None else list(provenance)
        self.mask_set = set() if mask_set is None else set(mask_set)
        if len(self.layers) != config.n_layers or self.gates.shape != (config.n_layers,):
            raise ValueError("layer/gate count does not match config.n_layers")
        if len(self.provenance) != len(self.layers):
            raise ValueError("provenance length does not match layer count")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def position_of(self, original: int) -> int:
        try:
            return self.provenance.index(original)
        except ValueError:
            raise IndexError(f"layer {original} is not present in this model") from None

    def active_layers(self) -> list[int]:
        """Original indices of stored, unmasked layers, in execution order."""
        return [o for o in self.provenance if o not in self.mask_set]

    def parameters(self, include_gates: bool = True) -> list[Parameter]:
        out = list(self.params.values())
        for layer in self.layers:
            out.extend(layer.values())
        if include_gates:
            out.append(self.gates)
        return out

    def layer_parameters(self, original: int) -> list[Parameter]:
        return list(self.layers[self.position_of(original)].values())

    def named_tensors(self) -> list[tuple[str, Parameter]]:
        """Stable, serialization-order listing of every stored tensor."""
        out = [(k, self.params[k]) for k in sorted(self.params)]
        for pos, layer in enumerate(self.layers):
            out.extend((f"layers.{pos}.{k}", layer[k]) for k in LAYER_PARAM_NAMES)
        out.append(("gates", self.gates))
        return out

    def copy(self) -> "ModelState":
        return ModelState(
            copy.deepcopy(self.config),
            {k: Parameter(v.data.copy()) for k, v in self.params.items()},
            [{k: Parameter(v.data.copy()) for k, v in layer.items()} for layer in self.layers],
            Parameter(self.gates.data.copy()),
            self.provenance,
            self.mask_set,
        )

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad.fill(0.0)


def init_model(config: ModelConfig, seed: int = 0) -> ModelState:
    """GPT-2 style initialization: N(0, 0.02), residual projections scaled by 1/sqrt(2L)."""
    rng = np.random.default_rng(seed)
    d, f, V = config.d_model, config.ff_dim, config.vocab_size
    std = 0.02
    proj_std = std / math.sqrt(2 * config.n_layers)

    def normal(shape, s=std):
        return Parameter(rng.normal(0.0, s, size=shape))

    params = {
        "wte": normal((V, d)),
        "wpe": normal((config.max_seq, d), 0.01),
        "lnf.g": Parameter(np.ones(d)),
        "lnf.b": Parameter(np.zeros(d)),
    }
    if not config.tie_head:
        params["head.w"] = normal((d, V))
    layers = []
    for _ in range(config.n_layers):
        layers.append({
            "ln1.g": Parameter(np.ones(d)), "ln1.b": Parameter(np.zeros(d)),
            "attn.wq": normal((d, d)), "attn.bq": Parameter(np.zeros(d)),
            "attn.wk": normal((d, d)), "attn.bk": Parameter(np.zeros(d)),
            "attn.wv": normal((d, d)), "attn.bv": Parameter(np.zeros(d)),
            "attn.wo": normal((d, d), proj_std), "attn.bo": Parameter(np.zeros(d)),
            "ln2.g": Parameter(np.ones(d)), "ln2.b": Parameter(np.zeros(d)),
            "mlp.w1": normal((d, f)), "mlp.b1": Parameter(np.zeros(f)),
            "mlp.w2": normal((f, d), proj_std), "mlp.b2": Parameter(np.zeros(d)),
        })
    return ModelState(config, params, layers, Parameter(np.ones(config.n_layers)))


# --------------------------------------------------------------------------
# forward


_CAUSAL_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(T: int) -> np.ndarray:
    m = _CAUSAL_CACHE.get(T)
    if m is None:
        m = np.tril(np.ones((T, T), dtype=bool))
        _CAUSAL_CACHE[T] = m
    return m


def _attention(x: Tensor, p: dict[str, Parameter], n_heads: int) -> Tensor:
    B, T, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q = heads(ad.matmul(x, p["attn.wq"]) + p["attn.bq"])
    k = heads(ad.matmul(x, p["attn.wk"]) + p["attn.bk"])
    v = heads(ad.matmul(x, p["attn.wv"]) + p["attn.bv"])
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = ad.softmax(scores, mask=_causal_mask(T))
    y = ad.matmul(att, v)
    y = ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (B, T, d))
    return ad.matmul(y, p["attn.wo"]) + p["attn.bo"]


def layer_forward(x: Tensor, p: dict[str, Parameter], config: ModelConfig,
                  gate: Tensor | None = None) -> Tensor:
    """One pre-norm block; returns the post-residual output.

    ``gate`` (delta mode) scales both residual updates, so a gate of 1 is bit-identical
    to the ungated block and a gate of 0 passes ``x`` through unchanged.
    """
    eps = config.layernorm_eps
    a = _attention(ad.layernorm(x, p["ln1.g"], p["ln1.b"], eps), p, config.n_heads)
    h = x + (a if gate is None else gate * a)
    m = ad.gelu(ad.matmul(ad.layernorm(h, p["ln2.g"], p["ln2.b"], eps), p["mlp.w1"]) + p["mlp.b1"])
    m = ad.matmul(m, p["mlp.w2"]) + p["mlp.b2"]
    return h + (m if gate is None else gate * m)


def _check_tokens(state: ModelState, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.shape[1] > state.config.max_seq:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq={state.config.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= state.config.vocab_size):
        raise IndexError(f"token id out of range [0, {state.config.vocab_size})")
    return tokens


def forward(state: ModelState, tokens, trace=False, gated: bool = True):
    """Logits ``[batch, seq, vocab]`` for token ids ``[batch, seq]``.

    ``trace`` may be ``True`` (all executed layers) or a collection of original
    indices; the trace is then returned alongside the logits. ``gated=False`` runs
    the plain architecture with no gate code at all.

    Traced outputs are what the block emits: in delta mode that already includes
    the gate, in stream mode it is the block output before the gate multiplies it.
    """
    tokens = _check_tokens(state, tokens)
    cfg = state.config
    T = tokens.shape[1]
    x = ad.embedding(state.params["wte"], tokens) + ad.embedding(state.params["wpe"], np.arange(T))
    want = None if trace is True else (set(trace) if trace else set())
    tr = LayerIOTrace() if trace is not False else None

    for pos, orig in enumerate(state.provenance):
        if orig in state.mask_set:
            continue
        delta_gate = gated and cfg.gate_mode == "delta"
        out = layer_forward(x, state.layers[pos], cfg, ad.take(state.gates, pos) if delta_gate else None)
        if tr is not None and (want is None or orig in want):
            tr.inputs[orig] = x
            tr.outputs[orig] = out
        if gated and cfg.gate_mode == "stream":
            x = ad.take(state.gates, pos) * out
        else:
            x = out

    h = ad.layernorm(x, state.params["lnf.g"], state.params["lnf.b"], cfg.layernorm_eps)
    head = state.params.get("head.w")
    if head is None:
        head = ad.transpose(state.params["wte"], (1, 0))
    logits = ad.matmul(h, head)
    return (logits, tr) if tr is not None else logits


def lm_loss(state: ModelState, tokens) -> Tensor:
    return ad.cross_entropy(forward(state, tokens), np.asarray(tokens))


# --------------------------------------------------------------------------
# structural edits


def mask_layer(state: ModelState, idx: int) -> ModelState:
    if idx not in state.provenance:
        raise IndexError(f"layer {idx} out of range for this model")
    if idx in state.mask_set:
        raise ValueError(f"layer {idx} is already masked")
    state.mask_set.add(idx)
    return state


def unmask_layer(state: ModelState, idx: int) -> ModelState:
    if idx not in state.mask_set:
        raise ValueError(f"layer {idx} is not masked")
    state.mask_set.discard(idx)
    return state


def prune(state: ModelState, prune_set) -> ModelState:
    """Compact copy of ``state`` without the layers in ``prune_set`` (original indices)."""
    indices = list(prune_set)
    if len(set(indices)) != len(indices):
        raise ValueError(f"duplicate indices in prune set {indices}")
    for i in indices:
        if i not in state.provenance:
            raise IndexError(f"layer {i} out of range for this model")
    drop = set(indices)
    keep = [pos for pos, o in enumerate(state.provenance) if o not in drop]
    config = copy.deepcopy(state.config)
    config.n_layers = len(keep)
    if config.n_layers < 1:
        raise ValueError("cannot prune every layer")
    return ModelState(
        config,
        {k: Parameter(v.data.copy()) for k, v in state.params.items()},
        [{k: Parameter(v.data.copy()) for k, v in state.layers[pos].items()} for pos in keep],
        Parameter(state.gates.data[keep].copy()),
        [state.provenance[pos] for pos in keep],
        state.mask_set - drop,
    )


def count_parameters(state: ModelState) -> int:
    return sum(p.data.size for p in state.parameters())
