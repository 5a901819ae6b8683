"""Session fixtures shared by the CLI and service suites."""

from dataclasses import dataclass
from pathlib import Path

import pytest

from gesturekit.cli import main
from gesturekit.config import PipelineConfig

# small enough to train in seconds, big enough to exercise every stage
TINY_OVERRIDES = {
    "seed": 5,
    "vae_epochs": 3,
    "pretrain_epochs": 4,
    "joint_epochs": 3,
    "batch_size": 4,
    "k_clusters": 2,
    "fgd_epochs": 1,
    "lr": 3e-3,
}


def hyper_flags(overrides=TINY_OVERRIDES):
    flags = []
    for name, value in overrides.items():
        flags += [f"--{name.replace('_', '-')}", str(value)]
    return flags


@dataclass(frozen=True)
class PipelineArtifacts:
    root: Path
    dataset: Path
    vae: Path
    clusters: Path
    text_encoder: Path
    checkpoint: Path
    library: Path
    hyper: tuple
    config_hash: str


@pytest.fixture(scope="session")
def tiny_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    ds = root / "ds"
    flags = hyper_flags()
    stages = [
        ["synth-data", "--out", str(ds), "--families", "2", "--per-family", "8"],
        ["train-vae", "--dataset", str(ds), "--out", str(root / "vae.json")],
        [
            "cluster", "--dataset", str(ds),
            "--vae", str(root / "vae.json"), "--out", str(root / "clusters.json"),
        ],
        [
            "pretrain-attention", "--dataset", str(ds),
            "--out", str(root / "text_enc.json"),
        ],
        [
            "train", "--dataset", str(ds),
            "--clusters", str(root / "clusters.json"),
            "--text-encoder", str(root / "text_enc.json"),
            "--out", str(root / "checkpoint.json"),
        ],
        [
            "build-library", "--dataset", str(ds),
            "--checkpoint", str(root / "checkpoint.json"),
            "--clusters", str(root / "clusters.json"),
            "--out", str(root / "library"),
        ],
    ]
    for stage in stages:
        rc = main(stage + flags)
        assert rc == 0, f"stage {stage[0]} exited {rc}"
    return PipelineArtifacts(
        root=root,
        dataset=ds,
        vae=root / "vae.json",
        clusters=root / "clusters.json",
        text_encoder=root / "text_enc.json",
        checkpoint=root / "checkpoint.json",
        library=root / "library",
        hyper=tuple(flags),
        config_hash=PipelineConfig().override(**TINY_OVERRIDES).config_hash,
    )
