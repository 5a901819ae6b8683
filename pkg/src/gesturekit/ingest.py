"""Dataset formats and the seeded synthetic text/gesture generator.

A dataset directory holds manifest.json, annotations.jsonl, and a
clips/ directory of motion files. The synthetic generator pairs each
gesture family with a keyword planted among filler words (labeled 1)
and a parametric arm trajectory, so toy pipelines have known structure
to recover.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .motion import MotionClip, extract_keyposes, load_clip, save_clip
from .text_encoder import (
    T_SLOTS,
    HashEmbeddingProvider,
    TableEmbeddingProvider,
    tokenize,
)

MANIFEST_TAG = "gesturekit-dataset-v1"
GESTURE_TYPES = ("beat", "representational", "non-gesture")
SPLIT_NAMES = ("train", "val", "test")

JOINT_NAMES = (
    "neck", "head",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
)

FAMILY_KEYWORDS = (
    "wave", "point", "lift", "circle", "push", "swing", "chop", "spread",
)
FILLERS = (
    "please", "now", "you", "then", "softly", "again", "hand", "arm",
    "the", "with", "slowly", "big", "small", "here", "watch", "me",
)


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotatedSample:
    text_id: str
    text: str
    labels: tuple            # one 0/1 per word
    clip_path: str           # relative to the dataset root
    gesture_type: str = "representational"

    def __post_init__(self):
        if not self.text_id:
            raise IngestError("text_id: empty")
        words = tokenize(self.text).tokens
        labels = tuple(int(v) for v in self.labels)
        if any(v not in (0, 1) for v in labels):
            raise IngestError(f"labels: values must be 0/1, got {labels}")
        if len(labels) != len(words):
            raise IngestError(
                f"labels: {len(labels)} labels for {len(words)} words"
            )
        if self.gesture_type not in GESTURE_TYPES:
            raise IngestError(f"type: unknown gesture type {self.gesture_type!r}")
        if self.gesture_type == "representational" and not any(labels):
            raise IngestError("labels: representational sample has no positive label")
        p = Path(self.clip_path)
        if p.is_absolute() or ".." in p.parts:
            raise IngestError(f"clip: path escapes the dataset: {self.clip_path!r}")
        object.__setattr__(self, "labels", labels)

    def padded_labels(self):
        """Labels stretched onto the 32 attention slots."""
        out = np.zeros(T_SLOTS)
        out[: len(self.labels)] = self.labels
        return out


@dataclass(frozen=True)
class TrainSample:
    """One paired example in the shape the training loops consume."""
    clip_id: str
    text: object             # TokenizedText
    labels: np.ndarray       # (32,)
    keyposes: object         # KeyPoseSequence
    clip: MotionClip


@dataclass
class Dataset:
    root: Path
    seed: int
    embeddings: dict
    samples: tuple
    splits: dict
    clips: dict = field(default_factory=dict)

    def provider(self):
        kind = self.embeddings.get("kind")
        if kind == "hash":
            return HashEmbeddingProvider(seed=int(self.embeddings["seed"]))
        if kind == "table":
            return TableEmbeddingProvider.load(self.root / self.embeddings["path"])
        raise IngestError(f"unknown embedding kind {kind!r}")

    def sample(self, text_id):
        for s in self.samples:
            if s.text_id == text_id:
                return s
        raise IngestError(f"unknown sample {text_id!r}")

    def split_samples(self, name):
        if name not in self.splits:
            raise IngestError(f"unknown split {name!r}")
        wanted = set(self.splits[name])
        return [s for s in self.samples if s.text_id in wanted]

    def training_samples(self, split="train"):
        out = []
        for s in self.split_samples(split):
            clip = self.clips[s.text_id]
            out.append(
                TrainSample(
                    clip_id=s.text_id,
                    text=tokenize(s.text, text_id=s.text_id),
                    labels=s.padded_labels(),
                    keyposes=extract_keyposes(clip),
                    clip=clip,
                )
            )
        return out


# ---------------------------------------------------------------------------
# loading and saving

def _canonical(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def load_dataset(path):
    """Validate and load a dataset directory (or its manifest path).
    Any violation is collected and reported with its sample and field;
    nothing partial is returned."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_bytes().decode())
    except FileNotFoundError:
        raise IngestError(f"no manifest at {manifest_path}") from None
    except json.JSONDecodeError as e:
        raise IngestError(f"manifest does not parse: {e}") from None
    if manifest.get("format") != MANIFEST_TAG:
        raise IngestError(f"unsupported dataset format {manifest.get('format')!r}")

    problems = []
    ann_rel = manifest.get("annotations", "annotations.jsonl")
    ann_path = root / ann_rel
    if not ann_path.exists():
        raise IngestError(f"missing annotations file {ann_path}")

    samples, ids = [], set()
    for lineno, line in enumerate(ann_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as e:
            problems.append(f"annotations line {lineno}: does not parse ({e})")
            continue
        sid = doc.get("text_id", f"line {lineno}")
        try:
            sample = AnnotatedSample(
                text_id=doc["text_id"],
                text=doc["text"],
                labels=tuple(doc["labels"]),
                clip_path=doc["clip"],
                gesture_type=doc.get("type", "representational"),
            )
        except KeyError as e:
            problems.append(f"sample {sid}: missing field {e.args[0]!r}")
            continue
        except (IngestError, ValueError) as e:
            problems.append(f"sample {sid}: {e}")
            continue
        if sample.text_id in ids:
            problems.append(f"sample {sid}: text_id: duplicate")
            continue
        ids.add(sample.text_id)
        if not (root / sample.clip_path).exists():
            problems.append(
                f"sample {sid}: clip: missing motion file {root / sample.clip_path}"
            )
        samples.append(sample)

    splits = manifest.get("splits", {})
    claimed = []
    for name in SPLIT_NAMES:
        members = splits.get(name, [])
        claimed.extend(members)
        for sid in members:
            if sid not in ids:
                problems.append(f"split {name}: unknown sample {sid!r}")
    if len(claimed) != len(set(claimed)):
        problems.append("splits: overlapping membership")
    if set(claimed) != ids:
        missing = sorted(ids - set(claimed))
        if missing:
            problems.append(f"splits: samples not assigned: {missing[:5]}")

    embeddings = manifest.get("embeddings", {})
    if embeddings.get("kind") == "table" and not (root / embeddings["path"]).exists():
        problems.append(f"embeddings: missing table {embeddings['path']!r}")

    clips = {}
    if not problems:
        for s in samples:
            try:
                clips[s.text_id] = load_clip(root / s.clip_path)
            except Exception as e:
                problems.append(f"sample {s.text_id}: clip: {e}")

    if problems:
        raise IngestError("dataset invalid:\n  " + "\n  ".join(problems))

    return Dataset(
        root=root,
        seed=int(manifest.get("seed", 0)),
        embeddings=embeddings,
        samples=tuple(samples),
        splits={k: tuple(splits.get(k, ())) for k in SPLIT_NAMES},
        clips=clips,
    )


def save_dataset(dataset, root):
    """Write the full tree; saving a loaded dataset reproduces it byte
    for byte."""
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": MANIFEST_TAG,
        "version": 1,
        "seed": dataset.seed,
        "embeddings": dataset.embeddings,
        "annotations": "annotations.jsonl",
        "splits": {k: list(dataset.splits.get(k, ())) for k in SPLIT_NAMES},
    }
    (root / "manifest.json").write_bytes(_canonical(manifest).encode())
    lines = []
    for s in dataset.samples:
        lines.append(
            json.dumps(
                {
                    "text_id": s.text_id,
                    "text": s.text,
                    "labels": list(s.labels),
                    "clip": s.clip_path,
                    "type": s.gesture_type,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    (root / "annotations.jsonl").write_bytes(("\n".join(lines) + "\n").encode())
    for s in dataset.samples:
        save_clip(dataset.clips[s.text_id], root / s.clip_path)


# ---------------------------------------------------------------------------
# synthetic generation

def _rest_pose():
    pose = np.zeros((8, 3))
    pose[1] = (0.0, 0.25, 0.0)       # head
    pose[2] = (0.20, -0.05, 0.0)     # right shoulder
    pose[3] = (0.28, -0.35, 0.02)    # right elbow
    pose[4] = (0.33, -0.62, 0.05)    # right wrist
    pose[5] = (-0.20, -0.05, 0.0)    # left shoulder
    pose[6] = (-0.28, -0.35, 0.02)   # left elbow
    pose[7] = (-0.33, -0.62, 0.05)   # left wrist
    return pose


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _family_frames(family, n, rng):
    """Deterministic family trajectory plus per-sample jitter."""
    t = np.linspace(0.0, 1.0, n)
    amp = 1.0 + 0.1 * rng.normal()
    # keep the phase well under a quarter cycle so a family's key-pose
    # sequences stay unimodal
    phase = 0.15 * rng.normal()
    frames = np.tile(_rest_pose(), (n, 1, 1))

    if family == 0:     # wave: raised right wrist swinging sideways
        frames[:, 4, 1] += 0.75 * amp
        frames[:, 4, 0] += 0.18 * amp * np.sin(2.0 * np.pi * 2.5 * t + phase)
        frames[:, 3, 1] += 0.35 * amp
        frames[:, 3, 0] += 0.09 * amp * np.sin(2.0 * np.pi * 2.5 * t + phase)
    elif family == 1:   # point: right arm extends forward and holds
        s = _smoothstep(np.clip(t * 2.0, 0.0, 1.0))
        frames[:, 4, 0] += 0.25 * amp * s
        frames[:, 4, 1] += 0.45 * amp * s
        frames[:, 4, 2] += 0.30 * amp * s
        frames[:, 3, 0] += 0.12 * amp * s
        frames[:, 3, 1] += 0.22 * amp * s
        frames[:, 3, 2] += 0.15 * amp * s
    elif family == 2:   # lift: both wrists rise and lower
        arc = np.sin(np.pi * t)
        for j in (4, 7):
            frames[:, j, 1] += 0.55 * amp * arc
        for j in (3, 6):
            frames[:, j, 1] += 0.28 * amp * arc
    elif family == 3:   # circle: right wrist orbits in the frontal plane
        ang = 2.0 * np.pi * 2.0 * t + phase
        frames[:, 4, 0] += 0.20 * amp * np.cos(ang)
        frames[:, 4, 1] += 0.45 * amp + 0.20 * amp * np.sin(ang)
        frames[:, 3, 0] += 0.10 * amp * np.cos(ang)
        frames[:, 3, 1] += 0.22 * amp + 0.10 * amp * np.sin(ang)
    else:               # procedural extras: distinct axis and frequency
        axis = family % 3
        freq = 1.0 + 0.5 * (family - 3)
        osc = np.sin(2.0 * np.pi * freq * t + phase)
        frames[:, 4, axis] += 0.4 * amp * osc
        frames[:, 7, (axis + 1) % 3] += 0.3 * amp * osc

    frames += rng.normal(0.0, 0.012, frames.shape)
    return np.clip(frames, -2.9, 2.9)


def _family_keyword(family):
    if family < len(FAMILY_KEYWORDS):
        return FAMILY_KEYWORDS[family]
    return f"gesture{family}"


def synth_dataset(root, seed=0, families=4, per_family=50, fps=20.0):
    """Generate, write, and reload a labeled toy dataset."""
    if families < 2:
        raise IngestError(f"need at least 2 families, got {families}")
    if per_family < 1:
        raise IngestError(f"per_family must be >= 1, got {per_family}")
    root = Path(root)
    rng = np.random.default_rng(seed)

    samples, clips = [], {}
    splits = {"train": [], "val": [], "test": []}
    for fam in range(families):
        keyword = _family_keyword(fam)
        fam_ids = []
        for i in range(per_family):
            sid = f"f{fam}-{i:03d}"
            n_fill = int(rng.integers(3, 8))
            words = [FILLERS[int(rng.integers(len(FILLERS)))] for _ in range(n_fill)]
            pos = int(rng.integers(n_fill + 1))
            words.insert(pos, keyword)
            labels = [0] * len(words)
            labels[pos] = 1

            n = int(rng.integers(40, 81))
            clip = MotionClip(fps=fps, frames=_family_frames(fam, n, rng), clip_id=sid)
            samples.append(
                AnnotatedSample(
                    text_id=sid,
                    text=" ".join(words),
                    labels=tuple(labels),
                    clip_path=f"clips/{sid}.json",
                )
            )
            clips[sid] = clip
            fam_ids.append(sid)

        order = [fam_ids[j] for j in rng.permutation(per_family)]
        n_val = per_family // 10
        n_test = per_family // 10
        splits["val"].extend(sorted(order[:n_val]))
        splits["test"].extend(sorted(order[n_val:n_val + n_test]))
        splits["train"].extend(sorted(order[n_val + n_test:]))

    dataset = Dataset(
        root=root,
        seed=seed,
        embeddings={"kind": "hash", "seed": int(seed)},
        samples=tuple(samples),
        splits={k: tuple(v) for k, v in splits.items()},
        clips=clips,
    )
    save_dataset(dataset, root)
    return load_dataset(root)
