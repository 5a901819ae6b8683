"""Gesture library over the joint space and the generation pipeline.

A library row stores one training clip's gesture feature f_g, its
motion file, and its cluster. Generation tokenizes the text, segments
it into 8-word groups, encodes each group to f_t (model attention or a
caller override), samples a nearby library entry, and stitches the
retrieved clips into one motion with per-segment diagnostics.
"""

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .contrastive import FEATURE_DIM
from .motion import load_clip, save_clip, speed_adjust, spline_stitch
from .text_encoder import PAD_RAW, T_SLOTS, TokenizedText, embed, tokenize

FORMAT_TAG = "gesturekit-library-v1"
SEGMENT_WORDS = 8
DEFAULT_NEIGHBORS = 8
OTHER_WORD_RAW = 0.1

_ID_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9_.+-]*$")


class LibraryError(ValueError):
    pass


@dataclass(frozen=True)
class LibraryEntry:
    clip_id: str
    f_g: np.ndarray          # (32,)
    motion: str              # path relative to the library root
    cluster: int

    def __post_init__(self):
        fg = np.asarray(self.f_g, dtype=np.float64)
        if fg.shape != (FEATURE_DIM,):
            raise LibraryError(f"f_g must be ({FEATURE_DIM},), got {fg.shape}")
        if not np.all(np.isfinite(fg)):
            raise LibraryError(f"non-finite f_g for {self.clip_id!r}")
        if not self.clip_id or not _ID_RE.match(self.clip_id):
            raise LibraryError(f"unusable clip id {self.clip_id!r}")
        if ".." in Path(self.motion).parts or Path(self.motion).is_absolute():
            raise LibraryError(f"motion path escapes the library: {self.motion!r}")
        object.__setattr__(self, "f_g", fg)
        object.__setattr__(self, "cluster", int(self.cluster))


class GestureLibrary:
    """Immutable entry list plus the config hash of the checkpoint that
    embedded it."""

    def __init__(self, entries, config_hash="", root=None):
        entries = tuple(entries)
        if not entries:
            raise LibraryError("a library needs at least one entry")
        ids = [e.clip_id for e in entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise LibraryError(f"duplicate clip ids: {dupes}")
        self.entries = entries
        self.config_hash = str(config_hash)
        self.root = Path(root) if root is not None else None
        self._by_id = {e.clip_id: e for e in entries}
        self._features = np.stack([e.f_g for e in entries])
        self._clips = {}

    def __len__(self):
        return len(self.entries)

    def entry(self, clip_id):
        try:
            return self._by_id[clip_id]
        except KeyError:
            raise LibraryError(f"unknown clip id {clip_id!r}") from None

    def feature_matrix(self):
        """(N, 32) f_g rows in entry order."""
        return self._features.copy()

    def load_clip(self, clip_id):
        entry = self.entry(clip_id)
        if clip_id not in self._clips:
            if self.root is None:
                raise LibraryError("library has no root directory to read motion from")
            self._clips[clip_id] = load_clip(self.root / entry.motion)
        return self._clips[clip_id]

    def to_doc(self):
        return {
            "format": FORMAT_TAG,
            "config_hash": self.config_hash,
            "entries": [
                {
                    "clip_id": e.clip_id,
                    "cluster": e.cluster,
                    "f_g": e.f_g.tolist(),
                    "motion": e.motion,
                }
                for e in self.entries
            ],
        }

    def save(self, root=None):
        root = Path(root) if root is not None else self.root
        if root is None:
            raise LibraryError("no directory to save the library into")
        root.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":")) + "\n"
        (root / "index.json").write_bytes(payload.encode())
        self.root = root

    @classmethod
    def load(cls, root):
        root = Path(root)
        doc = json.loads((root / "index.json").read_bytes().decode())
        if doc.get("format") != FORMAT_TAG:
            raise LibraryError(f"unsupported library format {doc.get('format')!r}")
        entries = [
            LibraryEntry(
                clip_id=e["clip_id"],
                f_g=np.asarray(e["f_g"], dtype=np.float64),
                motion=e["motion"],
                cluster=e["cluster"],
            )
            for e in doc["entries"]
        ]
        return cls(entries, config_hash=doc.get("config_hash", ""), root=root)


def build_library(samples, gesture_encoder, cluster_model, root, config_hash=""):
    """One entry per sample: f_g from its key-poses, cluster from the
    fitted model, motion file written under root/clips.

    Samples need .clip_id, .keyposes, .clip (a MotionClip).
    """
    samples = list(samples)
    if not samples:
        raise LibraryError("cannot build a library from an empty dataset")
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        f_g = gesture_encoder.encode(s.keyposes)
        cluster = cluster_model.cluster_of(s.clip_id)
        rel = f"clips/{s.clip_id}.json"
        save_clip(s.clip, root / rel)
        entries.append(
            LibraryEntry(clip_id=s.clip_id, f_g=f_g, motion=rel, cluster=cluster)
        )
    library = GestureLibrary(entries, config_hash=config_hash, root=root)
    library.save()
    return library


# ---------------------------------------------------------------------------
# segmentation and retrieval

def segment_text(tokens):
    """Consecutive groups of 8 tokens; the final group keeps 1 to 8."""
    if isinstance(tokens, TokenizedText):
        tokens = tokens.tokens
    tokens = tuple(str(t) for t in tokens)
    if not tokens:
        raise ValueError("no tokens to segment")
    return [tokens[i:i + SEGMENT_WORDS] for i in range(0, len(tokens), SEGMENT_WORDS)]


def retrieve(f_t, library, k=DEFAULT_NEIGHBORS, seed=0):
    """Sample one of the k nearest entries, weighted by softmax(-D/tau)
    with tau the mean of those k distances."""
    f_t = np.asarray(f_t, dtype=np.float64)
    if f_t.shape != (FEATURE_DIM,):
        raise LibraryError(f"f_t must be ({FEATURE_DIM},), got {f_t.shape}")
    if k < 1:
        raise LibraryError(f"k must be >= 1, got {k}")
    if len(library) == 0:
        raise LibraryError("empty library")
    d = np.linalg.norm(library._features - f_t, axis=1)
    order = np.argsort(d, kind="stable")
    near = order[: min(k, len(order))]
    tau = max(float(d[near].mean()), 1e-12)
    logits = -d[near] / tau
    weights = np.exp(logits - logits.max())
    weights /= weights.sum()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pick = near[int(rng.choice(len(near), p=weights))]
    return library.entries[pick]


# ---------------------------------------------------------------------------
# generation

@dataclass(frozen=True)
class GenerationRequest:
    text: str
    attention_override: tuple = None   # ((token index, weight), ...)
    target_duration_s: float = None
    seed: int = 0
    k_neighbors: int = DEFAULT_NEIGHBORS

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValueError("request needs non-empty text")
        if self.attention_override is not None:
            pairs = tuple((int(i), float(w)) for i, w in self.attention_override)
            seen = set()
            for i, w in pairs:
                if i < 0:
                    raise ValueError(f"override index {i} is negative")
                if i in seen:
                    raise ValueError(f"duplicate override index {i}")
                seen.add(i)
                if not 0.0 < w < 1.0:
                    raise ValueError(f"override weight {w} outside (0, 1)")
            object.__setattr__(self, "attention_override", pairs)
        if self.target_duration_s is not None and self.target_duration_s <= 0:
            raise ValueError(f"duration must be positive, got {self.target_duration_s}")
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")


@dataclass(frozen=True)
class SegmentDiagnostics:
    segment: int
    tokens: tuple
    attention: np.ndarray    # (32,) normalized over all slots
    f_t: np.ndarray          # (32,)
    clip_id: str
    distance: float
    duration_s: float        # allocated target, or None
    frame_start: int
    frame_end: int

    def to_doc(self):
        return {
            "segment": self.segment,
            "tokens": list(self.tokens),
            "attention": self.attention.tolist(),
            "f_t": self.f_t.tolist(),
            "clip_id": self.clip_id,
            "distance": self.distance,
            "duration_s": self.duration_s,
            "frame_start": self.frame_start,
            "frame_end": self.frame_end,
        }


def _override_attention(n_real, local_weights):
    raw = np.full(T_SLOTS, PAD_RAW)
    raw[:n_real] = OTHER_WORD_RAW
    for i, w in local_weights.items():
        raw[i] = w
    return raw / raw.sum()


def generate(request, checkpoint, library, provider):
    """Run the pipeline for one request.

    checkpoint is the (text encoder, gesture encoder, config hash)
    triple a joint checkpoint loads to; only the text side and the hash
    are consulted here. Returns (MotionClip, list of SegmentDiagnostics).
    """
    text_enc, _, ck_hash = checkpoint
    if ck_hash != library.config_hash:
        raise LibraryError(
            f"checkpoint config {ck_hash!r} does not match library "
            f"config {library.config_hash!r}"
        )
    tt = tokenize(request.text)
    override = dict(request.attention_override or ())
    if override and max(override) >= tt.n_real:
        raise ValueError(
            f"override index {max(override)} beyond the {tt.n_real} tokens"
        )
    groups = segment_text(tt.tokens)
    rng = np.random.default_rng(request.seed)

    clips, records = [], []
    offset = 0
    for si, group in enumerate(groups):
        seg_tt = TokenizedText(tokens=group, text_id=f"{tt.text_id}#{si}")
        w = embed(seg_tt, provider)
        if request.attention_override is not None:
            local = {
                gi - offset: wt
                for gi, wt in override.items()
                if offset <= gi < offset + len(group)
            }
            att = _override_attention(len(group), local)
        else:
            _, att = text_enc.attention(w, len(group))
        f_t = text_enc.encode_text(w, att)
        entry = retrieve(f_t, library, k=request.k_neighbors, seed=rng)
        clip = library.load_clip(entry.clip_id)
        dur = None
        if request.target_duration_s is not None:
            dur = request.target_duration_s * len(group) / tt.n_real
            clip = speed_adjust(clip, dur)
        clips.append(clip)
        records.append((si, group, att, f_t, entry, dur))
        offset += len(group)

    motion = spline_stitch(clips)

    # each join shortens the output by one frame; tint boundaries sit at
    # the cumulative pre-join lengths, centered on the blend bridges
    lengths = [c.n_frames for c in clips]
    cuts = [0]
    for i in range(1, len(lengths)):
        cuts.append(sum(lengths[:i]) - (i - 1))
    cuts.append(motion.n_frames)

    diagnostics = []
    for (si, group, att, f_t, entry, dur), start, end in zip(records, cuts, cuts[1:]):
        diagnostics.append(
            SegmentDiagnostics(
                segment=si,
                tokens=group,
                attention=att,
                f_t=f_t,
                clip_id=entry.clip_id,
                distance=float(np.linalg.norm(f_t - entry.f_g)),
                duration_s=dur,
                frame_start=int(start),
                frame_end=int(end),
            )
        )
    return motion, diagnostics
