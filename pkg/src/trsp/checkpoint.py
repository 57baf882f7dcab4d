"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TRSP" | u32 version | u32 n | n bytes UTF-8 JSON header
    u32 tensor_count
    per tensor: u32 name_len | name | u32 rank | rank x u64 extents | float64 data
    u32 layer_count | layer_count x u32 original layer index
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .model import LAYER_PARAM_NAMES, ModelConfig, ModelState

MAGIC = b"TRSP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def tensor_record_nbytes(name: str, shape: tuple[int, ...]) -> int:
    return 4 + len(name.encode()) + 4 + 8 * len(shape) + 8 * int(np.prod(shape, dtype=np.int64))


def to_bytes(state: ModelState) -> bytes:
    header = {"config": state.config.to_dict(), "mask_set": sorted(state.mask_set)}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    named = state.named_tensors()
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(state.provenance)))
    buf.write(struct.pack(f"<{len(state.provenance)}I", *state.provenance))
    return buf.getvalue()


def save_checkpoint(state: ModelState, path) -> int:
    data = to_bytes(state)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> ModelState:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes: not a TRSP checkpoint")
    version, hlen = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        header = json.loads(r.take(hlen).decode())
        config = ModelConfig(**header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = arr
    (nprov,) = r.unpack("<I")
    provenance = list(r.unpack(f"<{nprov}I")) if nprov else []
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")

    try:
        return _assemble(config, tensors, provenance, set(header.get("mask_set", [])))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from exc


def _assemble(config: ModelConfig, tensors: dict[str, np.ndarray], provenance: list[int],
              mask_set: set[int]) -> ModelState:
    d, f, V = config.d_model, config.ff_dim, config.vocab_size
    expected = {"wte": (V, d), "wpe": (config.max_seq, d), "lnf.g": (d,), "lnf.b": (d,),
                "gates": (config.n_layers,)}
    if not config.tie_head:
        expected["head.w"] = (d, V)
    layer_shapes = {
        "ln1.g": (d,), "ln1.b": (d,), "ln2.g": (d,), "ln2.b": (d,),
        "attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d), "attn.wo": (d, d),
        "attn.bq": (d,), "attn.bk": (d,), "attn.bv": (d,), "attn.bo": (d,),
        "mlp.w1": (d, f), "mlp.b1": (f,), "mlp.w2": (f, d), "mlp.b2": (d,),
    }
    for pos in range(config.n_layers):
        for k in LAYER_PARAM_NAMES:
            expected[f"layers.{pos}.{k}"] = layer_shapes[k]
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise ValueError(f"tensor set mismatch (missing={missing[:3]}, unexpected={extra[:3]})")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ValueError(f"{name} has shape {tensors[name].shape}, config implies {shape}")
    if len(provenance) != config.n_layers:
        raise ValueError(f"provenance has {len(provenance)} entries for {config.n_layers} layers")

    params = {k: Parameter(tensors[k]) for k in ("wte", "wpe", "lnf.g", "lnf.b", "head.w") if k in tensors}
    layers = [{k: Parameter(tensors[f"layers.{pos}.{k}"]) for k in LAYER_PARAM_NAMES}
              for pos in range(config.n_layers)]
    return ModelState(config, params, layers, Parameter(tensors["gates"]), provenance, mask_set)


def load_checkpoint(path) -> ModelState:
    return from_bytes(Path(path).read_bytes())
