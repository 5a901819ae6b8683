"""Attention-based text encoder over frozen word embeddings.

A fixed-width token window (T=32) of 768-d embeddings passes through
three trainable stages: a shared per-token scoring head whose sigmoid
output is the raw attention, a word transform, and a concatenation head
that maps the attention-weighted transformed words to a 32-d text
feature. Raw attention is supervised with BCE against per-word labels;
the normalized attention (scores divided by their sum over all 32
slots) weights the words.

Word embeddings come from a pluggable provider: a file-backed table of
precomputed vectors, or deterministic seeded-hash vectors. Both are
frozen; the same word always maps to the same vector.
"""

import hashlib
import json
import re
from dataclasses import dataclass

import numpy as np

from .ndcore import (
    Tape,
    backward,
    clip,
    concat,
    constant,
    div,
    log,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    slice_,
    sub,
    sum_,
)
from .ndcore.nn import Linear, ParamGroup
from .ndcore.optim import Adam

T_SLOTS = 32
EMBED_DIM = 768
FEATURE_DIM = 32
HIDDEN_DIM = 64
PAD_RAW = 1e-4          # constant raw score for padding slots
BCE_CLIP = 1e-7

FORMAT_TAG = "gesturekit-text-encoder-v1"

_WORD_RE = re.compile(r"[a-z0-9']+")


class TextError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizedText:
    tokens: tuple
    text_id: str = ""

    def __post_init__(self):
        toks = tuple(str(t) for t in self.tokens)
        if not toks:
            raise TextError("no tokens")
        if len(toks) > T_SLOTS:
            raise TextError(f"{len(toks)} tokens exceed the {T_SLOTS}-slot window")
        object.__setattr__(self, "tokens", toks)

    @property
    def n_real(self):
        return len(self.tokens)

    @property
    def mask(self):
        m = np.zeros(T_SLOTS, dtype=bool)
        m[: self.n_real] = True
        return m


def tokenize(text, text_id=""):
    """Lowercased word tokens, truncated to the 32-slot window."""
    if not isinstance(text, str) or not text.strip():
        raise TextError("empty text")
    tokens = _WORD_RE.findall(text.lower())
    if not tokens:
        raise TextError(f"no word characters in {text!r}")
    return TokenizedText(tokens=tuple(tokens[:T_SLOTS]), text_id=text_id)


# ---------------------------------------------------------------------------
# embedding providers

def _hash_vector(word, seed):
    digest = hashlib.blake2b(
        f"{seed}:{word}".encode(), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    v = rng.standard_normal(EMBED_DIM)
    return v / np.linalg.norm(v)


class HashEmbeddingProvider:
    """Deterministic unit-norm pseudo-embeddings; total over any vocabulary."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._cache = {}

    def lookup(self, word):
        v = self._cache.get(word)
        if v is None:
            v = _hash_vector(word, self.seed)
            self._cache[word] = v
        return v


class TableEmbeddingProvider:
    """File-backed table; unknown words fall back to hash vectors."""

    def __init__(self, table, seed=0):
        self.table = {}
        for word, vec in table.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (EMBED_DIM,):
                raise TextError(
                    f"embedding for '{word}' has shape {arr.shape}, need ({EMBED_DIM},)"
                )
            self.table[word] = arr
        self._fallback = HashEmbeddingProvider(seed)

    def lookup(self, word):
        vec = self.table.get(word)
        return vec if vec is not None else self._fallback.lookup(word)

    @classmethod
    def load(cls, path, seed=0):
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().split()
            if len(header) != 2 or int(header[0]) != EMBED_DIM:
                raise TextError(f"bad embedding table header {header!r}")
            count = int(header[1])
            table = {}
            for line in f:
                parts = line.rstrip("\n").split(" ")
                table[parts[0]] = np.array([float(x) for x in parts[1:]])
        if len(table) != count:
            raise TextError(
                f"embedding table lists {count} words but contains {len(table)}"
            )
        return cls(table, seed=seed)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{EMBED_DIM} {len(self.table)}\n")
            for word in sorted(self.table):
                vals = " ".join(repr(float(v)) for v in self.table[word])
                f.write(f"{word} {vals}\n")


def embed(tt, provider):
    """(T, 768) embedding matrix; padding slots are zero vectors."""
    w = np.zeros((T_SLOTS, EMBED_DIM))
    for i, tok in enumerate(tt.tokens):
        w[i] = provider.lookup(tok)
    return w


# ---------------------------------------------------------------------------
# the encoder

def normalize_scores(raw):
    """Word-count normalization: each score divided by the sum over all
    slots, so the result sums to 1 and preserves ordering."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw <= 0.0):
        raise TextError("scores must be strictly positive")
    return raw / raw.sum()


@dataclass(frozen=True)
class AttendedText:
    raw_attention: np.ndarray    # (T,), each in (0, 1)
    attention: np.ndarray        # (T,), sums to 1
    wprime: np.ndarray           # (T, 768)
    f_t: np.ndarray              # (32,)

    def __post_init__(self):
        a = np.asarray(self.attention, dtype=np.float64)
        if abs(a.sum() - 1.0) > 1e-9:
            raise TextError(f"attention sums to {a.sum()}, not 1")


class TextEncoder:
    """Score head, word transform, and concatenation head over T slots."""

    config_hash = ""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.params = ParamGroup()
        reg = self.params.register_layer
        self.score_head = reg("score_head", Linear(EMBED_DIM, 1, rng))
        self.word_transform = reg("word_transform", Linear(EMBED_DIM, EMBED_DIM, rng))
        self.concat_hidden = reg(
            "concat_hidden", Linear(T_SLOTS * EMBED_DIM, HIDDEN_DIM, rng)
        )
        self.concat_out = reg("concat_out", Linear(HIDDEN_DIM, FEATURE_DIM, rng))
        self._ones_row = constant(np.ones((1, EMBED_DIM)))

    # -- graph builders --

    def attention_graph(self, w, n_real):
        """raw sigmoid scores (padding pinned to a small constant) and
        their sum-to-one normalization over all T slots."""
        w_t = w if not isinstance(w, np.ndarray) else constant(w)
        scores = reshape(self.score_head(w_t), (T_SLOTS,))
        raw_real = sigmoid(slice_(scores, 0, n_real))
        if n_real < T_SLOTS:
            pad = constant(np.full(T_SLOTS - n_real, PAD_RAW))
            raw = concat(raw_real, pad)
        else:
            raw = raw_real
        att = div(raw, sum_(raw))
        return raw, att

    def encode_graph(self, w, att):
        """f_t from attention-weighted transformed words."""
        w_t = w if not isinstance(w, np.ndarray) else constant(w)
        wprime = self.word_transform(w_t)
        weights = matmul(reshape(att, (T_SLOTS, 1)), self._ones_row)
        weighted = mul(wprime, weights)
        hidden = relu(self.concat_hidden(reshape(weighted, (T_SLOTS * EMBED_DIM,))))
        return self.concat_out(hidden)

    def bce_graph(self, raw, labels, n_real):
        """Mean BCE over the real tokens against 0/1 labels."""
        p = clip(slice_(raw, 0, n_real), BCE_CLIP, 1.0 - BCE_CLIP)
        y = constant(np.asarray(labels, dtype=np.float64)[:n_real])
        one = constant(np.ones(n_real))
        ll = mul(y, log(p)) + mul(sub(one, y), log(sub(one, p)))
        return -mean(ll)

    # -- array-level API --

    def attention(self, w, n_real):
        raw, att = self.attention_graph(np.asarray(w, dtype=np.float64), n_real)
        return raw.values.copy(), att.values.copy()

    def encode_text(self, w, attention):
        att = constant(np.asarray(attention, dtype=np.float64))
        return self.encode_graph(np.asarray(w, dtype=np.float64), att).values.copy()

    def attend(self, tt, provider):
        """Full pass over one text: embeddings in, AttendedText out."""
        w = embed(tt, provider)
        raw, att = self.attention(w, tt.n_real)
        wprime = self.word_transform(constant(w)).values.copy()
        f_t = self.encode_text(w, att)
        return AttendedText(raw_attention=raw, attention=att, wprime=wprime, f_t=f_t)

    # -- persistence --

    def to_doc(self):
        doc = {
            "format": FORMAT_TAG,
            "params": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.params.state_arrays().items()
            },
        }
        if self.config_hash:
            doc["config_hash"] = self.config_hash
        return doc

    def save(self, path):
        doc = json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))
        with open(path, "wb") as f:
            f.write((doc + "\n").encode())

    @classmethod
    def from_doc(cls, doc):
        if doc.get("format") != FORMAT_TAG:
            raise TextError(f"unsupported params format {doc.get('format')!r}")
        enc = cls(seed=0)
        arrays = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        enc.params.load_arrays(arrays)
        enc.config_hash = doc.get("config_hash", "")
        return enc

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_doc(json.loads(f.read().decode()))


def attention_bce(raw_attention, labels, mask):
    """Mean BCE over real tokens; labels on padding slots are an error."""
    raw = np.asarray(raw_attention, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if raw.shape != labels.shape or raw.shape != mask.shape:
        raise TextError(
            f"shape mismatch: raw {raw.shape}, labels {labels.shape}, mask {mask.shape}"
        )
    if np.any(labels[~mask] != 0.0):
        raise TextError("labels present on padding slots")
    p = np.clip(raw[mask], BCE_CLIP, 1.0 - BCE_CLIP)
    y = labels[mask]
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def override_attention(tt, specified_words):
    """Externally supplied attention: 0.5 on the specified words, 0.1 on
    the remaining real words, the padding floor elsewhere; then the same
    sum-to-one normalization the model output gets."""
    specified = {w.lower() for w in specified_words}
    raw = np.full(T_SLOTS, PAD_RAW)
    for i, tok in enumerate(tt.tokens):
        raw[i] = 0.5 if tok in specified else 0.1
    return raw, raw / raw.sum()


def pretrain_attention(examples, provider, epochs=30, seed=0, lr=1e-2,
                       batch_size=16, encoder=None, log=None):
    """Train the score head alone with masked BCE; the word transform and
    concatenation head stay at their initialization."""
    if not examples:
        raise ValueError("empty dataset")
    prepared = []
    for tt, labels in examples:
        labels = np.asarray(labels, dtype=np.float64)
        if labels.shape != (T_SLOTS,):
            raise TextError(f"labels must be ({T_SLOTS},), got {labels.shape}")
        if np.any(labels[~tt.mask] != 0.0):
            raise TextError("labels present on padding slots")
        prepared.append((embed(tt, provider), tt.n_real, labels))

    enc = encoder or TextEncoder(seed=seed)
    rng = np.random.default_rng(seed)
    opt = Adam(enc.score_head.params(), lr=lr)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(prepared))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            with Tape() as tape:
                loss = None
                for i in idx:
                    w, n_real, labels = prepared[i]
                    raw, _ = enc.attention_graph(w, n_real)
                    b = enc.bce_graph(raw, labels, n_real)
                    loss = b if loss is None else loss + b
                loss = loss * (1.0 / len(idx))
                grads = backward(tape, loss)
            opt.step(grads)
            total += loss.item() * len(idx)
        trace.append(total / len(prepared))
        if log:
            log(epoch, trace[-1])
    return enc, trace
