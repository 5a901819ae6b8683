"""Pipeline configuration and the hash that ties artifacts together.

Every stage stamps its output with the hash of the hyperparameters it
ran under; consuming a file produced under a different hash is a hard
error. Paths are carried for convenience but excluded from the hash, so
moving a tree does not orphan its artifacts.
"""

import hashlib
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

FORMAT_TAG = "gesturekit-config-v1"

PATH_FIELDS = ("dataset", "embeddings", "checkpoints", "library")


@dataclass(frozen=True)
class PipelineConfig:
    # embedding geometry
    z_dim: int = 32
    k_clusters: int = 40
    cluster_restarts: int = 10
    t_slots: int = 32
    margin: float = 20.0
    alpha: float = 10.0
    beta: float = 2.0
    hidden: int = 64
    # distribution-distance feature extractor
    fgd_z_dim: int = 256
    fgd_frame_len: int = 64
    fgd_pad_len: int = 12
    # schedules
    vae_epochs: int = 40
    pretrain_epochs: int = 30
    joint_epochs: int = 10
    fgd_epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    pretrain_lr: float = 1e-2
    seed: int = 0
    fps: float = 20.0
    k_neighbors: int = 8
    # artifact locations, not hashed
    dataset: str = ""
    embeddings: str = ""
    checkpoints: str = ""
    library: str = ""

    def hyper_doc(self):
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name not in PATH_FIELDS
        }

    @property
    def config_hash(self):
        blob = json.dumps(self.hyper_doc(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_doc(self):
        return {
            "format": FORMAT_TAG,
            "hash": self.config_hash,
            "hyper": self.hyper_doc(),
            "paths": {name: getattr(self, name) for name in PATH_FIELDS},
        }

    def save(self, path):
        blob = json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))
        Path(path).write_bytes((blob + "\n").encode())

    @classmethod
    def from_doc(cls, doc):
        if doc.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported config format {doc.get('format')!r}")
        known = {f.name for f in fields(cls)}
        merged = dict(doc.get("hyper", {}))
        merged.update(doc.get("paths", {}))
        unknown = sorted(set(merged) - known)
        if unknown:
            raise ValueError(f"unknown config fields {unknown}")
        return cls(**merged)

    @classmethod
    def load(cls, path):
        return cls.from_doc(json.loads(Path(path).read_bytes().decode()))

    def override(self, **changes):
        """Copy with the non-None entries of `changes` applied."""
        known = {f.name for f in fields(self)}
        clean = {}
        for name, value in changes.items():
            if name not in known:
                raise ValueError(f"unknown config field {name!r}")
            if value is not None:
                clean[name] = value
        return replace(self, **clean)
