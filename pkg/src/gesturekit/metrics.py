"""Evaluation metrics: latent diversity, Frechet gesture distance over
a 256-d feature model, speed-normalized L1, and Pearson correlation
against rater scores. Jerk itself lives in the motion module; this one
aggregates it per clip set.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .gesture_vae import GestureVae, VaeConfig, train_vae
from .motion import KEYPOSE_MAX, MotionClip, extract_keyposes, jerk, speed_adjust

FGD_FORMAT_TAG = "gesturekit-fgd-v1"
FGD_Z_DIM = 256
FGD_FRAME_LEN = 64
EIG_CLAMP = 1e-10


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# diversity

def diversity(latent_means):
    """Mean L1 spread over ordered latent pairs with the 1/(N*ceil(N/2))
    normalizer."""
    mus = np.asarray(latent_means, dtype=np.float64)
    if mus.ndim != 2 or mus.shape[0] < 2:
        raise MetricsError(f"need an (N >= 2, d) latent matrix, got {mus.shape}")
    n = mus.shape[0]
    total = 0.0
    for a1 in range(n):
        diffs = np.abs(mus[a1 + 1:] - mus[a1])
        total += float(diffs.sum())
    return total / (n * math.ceil(n / 2))


# ---------------------------------------------------------------------------
# Frechet distance between feature Gaussians

def _clamped_eigenvalues(vals, context):
    # the inputs are PSD by construction: negative values are eigh
    # roundoff and get floored to zero, while a meaningfully negative
    # spectrum signals broken covariances. Positive values stay exact,
    # which keeps the self-distance identity tight.
    scale = max(float(np.max(np.abs(vals))), 1.0)
    if float(np.min(vals)) < -max(1e-6 * scale, EIG_CLAMP):
        raise MetricsError(
            f"{context} has a negative spectrum "
            f"(min {np.min(vals):.3g} at scale {scale:.3g})"
        )
    return np.maximum(vals, 0.0)


def _psd_sqrt(cov):
    vals, vecs = np.linalg.eigh(cov)
    vals = _clamped_eigenvalues(vals, "covariance")
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu_a, cov_a, mu_b, cov_b):
    """||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2}),
    with the cross square root taken through the symmetric form
    cov_a^{1/2} cov_b cov_a^{1/2}."""
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if not all(np.all(np.isfinite(x)) for x in (mu_a, mu_b, cov_a, cov_b)):
        raise MetricsError("non-finite Gaussian parameters")

    half = _psd_sqrt(cov_a)
    inner = half @ cov_b @ half
    inner = 0.5 * (inner + inner.T)
    vals = _clamped_eigenvalues(np.linalg.eigvalsh(inner), "covariance product")
    tr_cross = float(np.sum(np.sqrt(vals)))

    value = (
        float(np.sum((mu_a - mu_b) ** 2))
        + float(np.trace(cov_a))
        + float(np.trace(cov_b))
        - 2.0 * tr_cross
    )
    if not np.isfinite(value):
        raise MetricsError(
            f"Frechet distance not finite (trace a {np.trace(cov_a):.3g}, "
            f"trace b {np.trace(cov_b):.3g}, cross {tr_cross:.3g})"
        )
    # roundoff on identical inputs can land a hair below zero
    return value if value > 0.0 else 0.0


def _gaussian_fit(features):
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise MetricsError(f"need (N >= 2, d) features, got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise MetricsError("non-finite feature values")
    mu = feats.mean(axis=0)
    cov = np.atleast_2d(np.cov(feats, rowvar=False))
    return mu, cov


def fgd(set_a, set_b, feature_model):
    """Frechet distance between the Gaussian fits of the two clip sets'
    features."""
    mu_a, cov_a = _gaussian_fit(feature_model.features(set_a))
    mu_b, cov_b = _gaussian_fit(feature_model.features(set_b))
    return frechet_gaussian(mu_a, cov_a, mu_b, cov_b)


# ---------------------------------------------------------------------------
# FGD feature model

def pad_frames(clip, frame_len=FGD_FRAME_LEN):
    """Repeat the last frame up to frame_len; truncate anything longer.
    Clips already at frame_len pass through unchanged."""
    n = clip.n_frames
    if n == frame_len:
        return clip
    if n > frame_len:
        frames = clip.frames[:frame_len]
    else:
        tail = np.repeat(clip.frames[-1:], frame_len - n, axis=0)
        frames = np.concatenate([clip.frames, tail], axis=0)
    return MotionClip(fps=clip.fps, frames=frames, clip_id=clip.clip_id)


def _pad_rows(mat, length):
    if mat.shape[0] >= length:
        return mat[:length]
    tail = np.repeat(mat[-1:], length - mat.shape[0], axis=0)
    return np.concatenate([mat, tail], axis=0)


class FgdFeatureModel:
    """Feature extractor for FGD: clips normalized to a fixed frame
    budget, reduced to key poses, padded to a fixed row count, and
    encoded by a wide-latent sequence VAE."""

    def __init__(self, vae, frame_len=FGD_FRAME_LEN, pad_len=KEYPOSE_MAX):
        self.vae = vae
        self.frame_len = int(frame_len)
        self.pad_len = int(pad_len)

    def _matrix(self, clip):
        kp = extract_keyposes(pad_frames(clip, self.frame_len))
        return _pad_rows(kp.vectors(), self.pad_len)

    def features(self, clips):
        clips = list(clips)
        if not clips:
            raise MetricsError("no clips to featurize")
        return np.stack([self.vae.encode(self._matrix(c)).mu for c in clips])

    @classmethod
    def fit(cls, clips, epochs=20, seed=0, lr=1e-3, z_dim=FGD_Z_DIM,
            hidden=64, frame_len=FGD_FRAME_LEN, pad_len=KEYPOSE_MAX, log=None):
        config = VaeConfig(z_dim=z_dim, hidden=hidden, max_len=pad_len)
        model = cls(GestureVae(config=config, seed=seed), frame_len, pad_len)
        mats = [model._matrix(c) for c in clips]
        vae, _ = train_vae(mats, epochs=epochs, seed=seed, config=config, lr=lr, log=log)
        model.vae = vae
        return model

    def to_doc(self):
        return {
            "format": FGD_FORMAT_TAG,
            "frame_len": self.frame_len,
            "pad_len": self.pad_len,
            "vae": self.vae.to_doc(),
        }

    def save(self, path):
        payload = json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":")) + "\n"
        with open(path, "wb") as f:
            f.write(payload.encode())

    @classmethod
    def from_doc(cls, doc):
        if doc.get("format") != FGD_FORMAT_TAG:
            raise MetricsError(f"unsupported feature model format {doc.get('format')!r}")
        return cls(
            GestureVae.from_doc(doc["vae"]),
            frame_len=doc["frame_len"],
            pad_len=doc["pad_len"],
        )

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_doc(json.loads(f.read().decode()))


# ---------------------------------------------------------------------------
# speed-normalized L1

def l1_metric(generated, reference):
    """Mean per-joint L1 position gap after resampling the generated
    clip to the reference duration."""
    if generated.fps != reference.fps:
        raise MetricsError(
            f"frame rates differ: {generated.fps} vs {reference.fps}"
        )
    adjusted = speed_adjust(generated, reference.duration_s)
    if adjusted.n_frames != reference.n_frames:
        raise MetricsError(
            f"resampling mismatch: {adjusted.n_frames} vs {reference.n_frames} frames"
        )
    return float(np.mean(np.sum(np.abs(adjusted.frames - reference.frames), axis=2)))


# ---------------------------------------------------------------------------
# correlation

def correlate(values, scores):
    """Pearson r between a per-clip metric and rater scores."""
    x = np.asarray(values, dtype=np.float64)
    y = np.asarray(scores, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise MetricsError(f"need two aligned vectors of >= 3 values, got {x.shape} vs {y.shape}")
    if np.std(x) == 0.0 or np.std(y) == 0.0:
        raise MetricsError("zero variance in one of the inputs")
    return float(np.corrcoef(x, y)[0, 1])


# ---------------------------------------------------------------------------
# report assembly

@dataclass(frozen=True)
class MetricReport:
    diversity_a: float
    diversity_b: float
    fgd: float
    jerk_a: float
    jerk_b: float
    l1_mean: float = None          # None when the sets share no clip ids
    correlations: dict = field(default_factory=dict)
    config_hash: str = ""

    def to_doc(self):
        return {
            "config_hash": self.config_hash,
            "diversity": {"a": self.diversity_a, "b": self.diversity_b},
            "fgd": self.fgd,
            "jerk": {"a": self.jerk_a, "b": self.jerk_b},
            "l1_mean": self.l1_mean,
            "correlations": dict(self.correlations),
        }

    def rows(self):
        rows = [
            ("diversity", f"{self.diversity_a:.6f}", f"{self.diversity_b:.6f}"),
            ("mean jerk", f"{self.jerk_a:.6f}", f"{self.jerk_b:.6f}"),
            ("fgd(a,b)", f"{self.fgd:.6f}", ""),
        ]
        if self.l1_mean is not None:
            rows.append(("mean l1(a,b)", f"{self.l1_mean:.6f}", ""))
        for name, r in sorted(self.correlations.items()):
            rows.append((f"r({name}, score)", f"{r:.6f}", ""))
        return rows

    def table(self):
        rows = [("metric", "set a", "set b")] + self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in rows
        ]
        return "\n".join(lines) + "\n"

    def csv(self):
        lines = ["metric,set_a,set_b"]
        lines += [",".join(row) for row in self.rows()]
        return "\n".join(lines) + "\n"


def metric_report(set_a, set_b, feature_model, scores=None, config_hash=""):
    """Full comparison of two clip sets; L1 is paired over shared clip
    ids and omitted when there are none."""
    set_a, set_b = list(set_a), list(set_b)
    feats_a = feature_model.features(set_a)
    feats_b = feature_model.features(set_b)
    mu_a, cov_a = _gaussian_fit(feats_a)
    mu_b, cov_b = _gaussian_fit(feats_b)

    jerks_a = [jerk(c) for c in set_a]
    jerks_b = [jerk(c) for c in set_b]

    by_id_b = {c.clip_id: c for c in set_b if c.clip_id}
    paired = [(c, by_id_b[c.clip_id]) for c in set_a if c.clip_id in by_id_b]
    l1_mean = (
        float(np.mean([l1_metric(g, r) for g, r in paired])) if paired else None
    )

    correlations = {}
    if scores is not None:
        if len(scores) != len(set_a):
            raise MetricsError(
                f"{len(scores)} scores for {len(set_a)} clips in set a"
            )
        correlations["jerk"] = correlate(jerks_a, scores)

    return MetricReport(
        diversity_a=diversity(feats_a),
        diversity_b=diversity(feats_b),
        fgd=frechet_gaussian(mu_a, cov_a, mu_b, cov_b),
        jerk_a=float(np.mean(jerks_a)),
        jerk_b=float(np.mean(jerks_b)),
        l1_mean=l1_mean,
        correlations=correlations,
        config_hash=config_hash,
    )
