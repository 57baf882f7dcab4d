"""Corpus loading, tokenization and calibration sampling."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


class Tokenizer:
    """Byte-level (256 ids + specials) or character-level tokenizer."""

    def __init__(self, mode: str = "char", chars: str | None = None, specials: tuple[str, ...] = ("<eos>",)):
        if mode not in ("byte", "char"):
            raise ValueError(f"tokenizer mode must be 'byte' or 'char', got {mode!r}")
        self.mode = mode
        self.specials = tuple(specials)
        if mode == "char":
            if chars is None:
                raise ValueError("char tokenizer needs a character inventory")
            self.chars = "".join(sorted(set(chars)))
            self._index = {c: i for i, c in enumerate(self.chars)}
        else:
            self.chars = None

    @classmethod
    def from_text(cls, text: str, mode: str = "char") -> "Tokenizer":
        return cls(mode, chars=text if mode == "char" else None)

    @property
    def vocab_size(self) -> int:
        base = 256 if self.mode == "byte" else len(self.chars)
        return base + len(self.specials)

    def encode(self, text: str) -> np.ndarray:
        if self.mode == "byte":
            return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        try:
            return np.fromiter((self._index[c] for c in text), dtype=np.int64, count=len(text))
        except KeyError as exc:
            raise DataError(f"character {exc.args[0]!r} not in tokenizer vocabulary") from None

    def decode(self, ids) -> str:
        ids = np.asarray(ids, dtype=np.int64)
        if self.mode == "byte":
            return bytes(int(i) for i in ids if i < 256).decode("utf-8", errors="replace")
        n = len(self.chars)
        return "".join(self.chars[i] for i in ids if i < n)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "chars": self.chars, "specials": list(self.specials)}

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        return cls(d["mode"], chars=d.get("chars"), specials=tuple(d.get("specials", ("<eos>",))))


@dataclass
class Corpus:
    tokenizer: Tokenizer
    tokens: np.ndarray
    bounds: tuple[int, int]  # train end, validation end
    source: str = "<memory>"
    seed: int = 0

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.bounds[0]]

    @property
    def validation(self) -> np.ndarray:
        return self.tokens[self.bounds[0]: self.bounds[1]]

    @property
    def test(self) -> np.ndarray:
        return self.tokens[self.bounds[1]:]

    def split_hash(self, split: str = "test") -> str:
        arr = getattr(self, split)
        return hashlib.sha256(np.ascontiguousarray(arr, dtype="<i8").tobytes()).hexdigest()[:16]


def _split_points(n: int, fractions) -> tuple[int, int]:
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    a = int(round(n * fr[0]))
    b = int(round(n * (fr[0] + fr[1])))
    return a, b


def corpus_from_text(text: str, mode: str = "char", fractions=(0.9, 0.05, 0.05), seed: int = 0,
                     source: str = "<memory>", tokenizer: Tokenizer | None = None) -> Corpus:
    """Contiguous train/validation/test split of ``text``.

    In byte mode split points are moved forward to the next UTF-8 character start.
    """
    if not text:
        raise DataError("corpus is empty")
    tok = tokenizer or Tokenizer.from_text(text, mode)
    ids = tok.encode(text)
    a, b = _split_points(len(ids), fractions)
    if tok.mode == "byte":
        a, b = (_char_boundary(ids, a), _char_boundary(ids, b))
    return Corpus(tok, ids, (a, b), source, seed)


def _char_boundary(ids: np.ndarray, pos: int) -> int:
    while pos < len(ids) and 0x80 <= ids[pos] < 0xC0:
        pos += 1
    return pos


def load_corpus(path, mode: str = "char", fractions=(0.9, 0.05, 0.05), seed: int = 0) -> Corpus:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    raw = path.read_bytes()
    if not raw:
        raise DataError(f"corpus file is empty: {path}")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"corpus is not valid UTF-8: {exc}") from exc
    return corpus_from_text(text, mode, fractions, seed, source=str(path))


@dataclass
class CalibrationSet:
    tokens: np.ndarray  # [n_sequences, seq_len]
    offsets: list[int]
    seed: int
    source: str = "train"
    split_hash: str = ""

    @property
    def n_sequences(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def to_json(self) -> str:
        return json.dumps({"offsets": self.offsets, "seed": self.seed, "seq_len": self.seq_len,
                           "source": self.source, "split_hash": self.split_hash}, indent=2)

    def batches(self, batch_size: int | None, rng: np.random.Generator):
        """Endless stream of calibration minibatches (full set when ``batch_size`` is None)."""
        n = self.n_sequences
        if batch_size is None or batch_size >= n:
            while True:
                yield self.tokens
        while True:
            order = rng.permutation(n)
            for i in range(0, n - batch_size + 1, batch_size):
                yield self.tokens[order[i:i + batch_size]]


def sample_calibration(corpus: Corpus, n: int, seq_len: int, seed: int) -> CalibrationSet:
    """``n`` non-overlapping windows of ``seq_len`` tokens from the train split.

    Offsets are uniform over all non-overlapping placements: choose ``n`` sorted
    distinct slots among ``L - n*seq_len + n`` and spread them by ``seq_len - 1``.
    """
    train = corpus.train
    L = len(train)
    if n < 1 or seq_len < 1:
        raise DataError("n and seq_len must be positive")
    if n * seq_len > L:
        raise DataError(f"train split has {L} tokens; {n} x {seq_len} windows do not fit")
    rng = np.random.default_rng(seed)
    slots = np.sort(rng.choice(L - n * seq_len + n, size=n, replace=False))
    offsets = [int(c + i * (seq_len - 1)) for i, c in enumerate(slots)]
    tokens = np.stack([train[o:o + seq_len] for o in offsets])
    return CalibrationSet(tokens, offsets, seed, "train", corpus.split_hash("train"))


def calibration_from_json(corpus: Corpus, text: str) -> CalibrationSet:
    d = json.loads(text)
    train = corpus.train
    if d.get("split_hash") and d["split_hash"] != corpus.split_hash("train"):
        raise DataError("calibration manifest was drawn from a different train split")
    L = d["seq_len"]
    tokens = np.stack([train[o:o + L] for o in d["offsets"]])
    return CalibrationSet(tokens, list(d["offsets"]), d["seed"], d.get("source", "train"), d.get("split_hash", ""))


def windows(split: np.ndarray, seq_len: int, stride: int | None = None) -> np.ndarray:
    """Windows of ``seq_len`` tokens every ``stride`` tokens (default: non-overlapping)."""
    stride = stride or seq_len
    if len(split) < seq_len:
        raise DataError(f"split of {len(split)} tokens is shorter than one window of {seq_len}")
    starts = range(0, len(split) - seq_len + 1, stride)
    return np.stack([split[s:s + seq_len] for s in starts])


def random_batch(split: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    if len(split) < seq_len:
        raise DataError(f"split of {len(split)} tokens is shorter than one sequence of {seq_len}")
    starts = rng.integers(0, len(split) - seq_len + 1, size=batch_size)
    return np.stack([split[s:s + seq_len] for s in starts])


# --------------------------------------------------------------------------
# synthetic text


@dataclass
class _Lexicon:
    names: list[str] = field(default_factory=lambda: [
        "alice", "bruno", "chen", "dana", "emeka", "farah", "goran", "hana", "ivan", "jun",
        "kofi", "lena", "mateo", "nadia", "oskar", "priya", "quinn", "rosa", "sven", "tariq"])
    places: list[str] = field(default_factory=lambda: [
        "the harbor", "the market", "the old mill", "the library", "the north field",
        "the river bank", "the station", "the bakery", "the school", "the orchard"])
    nouns: list[str] = field(default_factory=lambda: [
        "apple", "basket", "candle", "door", "engine", "feather", "garden", "hammer", "island",
        "jacket", "kettle", "ladder", "mirror", "needle", "orange", "pencil", "rabbit", "saddle",
        "table", "violin", "wagon", "window", "letter", "stone"])
    adjectives: list[str] = field(default_factory=lambda: [
        "red", "small", "heavy", "bright", "quiet", "broken", "green", "old", "new", "warm",
        "wooden", "silver"])
    verbs: list[tuple[str, str]] = field(default_factory=lambda: [
        ("carry", "carries"), ("find", "finds"), ("paint", "paints"), ("open", "opens"),
        ("fix", "fixes"), ("sell", "sells"), ("wash", "washes"), ("hide", "hides"),
        ("build", "builds"), ("move", "moves")])
    numbers: list[str] = field(default_factory=lambda: [
        "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"])


def synthetic_text(n_chars: int, seed: int = 0) -> str:
    """Deterministic English-like text with agreement, counting and recurring facts."""
    rng = np.random.default_rng(seed)
    lex = _Lexicon()
    # fixed world facts the model can memorize
    home = {nm: lex.places[int(rng.integers(len(lex.places)))] for nm in lex.names}
    owns = {nm: lex.nouns[int(rng.integers(len(lex.nouns)))] for nm in lex.names}

    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    def noun_phrase(plural: bool) -> str:
        adj = pick(lex.adjectives) + " " if rng.random() < 0.5 else ""
        noun = pick(lex.nouns)
        if plural:
            k = int(rng.integers(2, 10))
            return f"{lex.numbers[k - 1]} {adj}{noun}s"
        return f"the {adj}{noun}"

    def sentence() -> str:
        r = rng.random()
        name = pick(lex.names)
        if r < 0.25:
            return f"{name} lives near {home[name]}."
        if r < 0.4:
            return f"{name} keeps a {owns[name]} at {home[name]}."
        if r < 0.7:
            plural_subj = rng.random() < 0.4
            if plural_subj:
                a, b = pick(lex.names), pick(lex.names)
                subj, form = f"{a} and {b}", 0
            else:
                subj, form = name, 1
            verb = pick(lex.verbs)[form]
            return f"{subj} {verb} {noun_phrase(rng.random() < 0.5)} at {pick(lex.places)}."
        if r < 0.85:
            k = int(rng.integers(1, 9))
            j = int(rng.integers(1, 10 - k + 1))
            return f"{lex.numbers[k - 1]} and {lex.numbers[j - 1]} make {lex.numbers[k + j - 1]}."
        other = pick(lex.names)
        return f'"where is the {owns[other]}?" asks {name}. "at {home[other]}," says {other}.'

    out: list[str] = []
    size = 0
    while size < n_chars:
        para = " ".join(sentence() for _ in range(int(rng.integers(3, 7))))
        out.append(para)
        size += len(para) + 1
    return "\n".join(out)[:n_chars]
