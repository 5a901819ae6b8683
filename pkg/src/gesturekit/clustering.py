"""K-Means over latent codes and the positive matrix built from it.

Cluster labels decide which text/gesture pairs count as positive during
joint training: pairs whose gestures share a cluster.
"""

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_K = 40
MAX_ITERS = 300

FORMAT_TAG = "gesturekit-clusters-v1"


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterModel:
    k: int
    seed: int
    centroids: np.ndarray            # (k, d)
    assignments: dict                # clip_id -> cluster index
    sse_trace: tuple = field(default=())
    config_hash: str = ""

    def __post_init__(self):
        cent = np.asarray(self.centroids, dtype=np.float64)
        if not np.all(np.isfinite(cent)):
            raise ClusteringError("non-finite centroid")
        if cent.shape[0] != self.k:
            raise ClusteringError(
                f"{cent.shape[0]} centroids for k={self.k}"
            )
        bad = {c for c in self.assignments.values() if not 0 <= c < self.k}
        if bad:
            raise ClusteringError(f"assignment outside [0, {self.k}): {sorted(bad)}")
        object.__setattr__(self, "centroids", cent)
        object.__setattr__(self, "sse_trace", tuple(float(s) for s in self.sse_trace))

    def cluster_of(self, clip_id):
        try:
            return self.assignments[clip_id]
        except KeyError:
            raise ClusteringError(f"unknown clip id '{clip_id}'") from None

    def nearest(self, vector):
        d = np.linalg.norm(self.centroids - np.asarray(vector), axis=1)
        return int(np.argmin(d))

    def to_doc(self):
        doc = {
            "format": FORMAT_TAG,
            "k": self.k,
            "seed": self.seed,
            "centroids": self.centroids.tolist(),
            "assignments": dict(sorted(self.assignments.items())),
            "sse_trace": list(self.sse_trace),
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
            raise ClusteringError(f"unsupported cluster format {doc.get('format')!r}")
        return cls(
            k=int(doc["k"]),
            seed=int(doc["seed"]),
            centroids=np.asarray(doc["centroids"], dtype=np.float64),
            assignments={k: int(v) for k, v in doc["assignments"].items()},
            sse_trace=tuple(doc.get("sse_trace", ())),
            config_hash=doc.get("config_hash", ""),
        )

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_doc(json.loads(f.read().decode()))


def _kmeans_pp_init(points, k, rng):
    """Seeded k-means++: spread the initial centroids by D^2 sampling."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    closest_sq = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest_sq.sum()
        if total <= 0.0:
            # all remaining points coincide with a centroid
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest_sq / total))
        centroids[i] = points[idx]
        closest_sq = np.minimum(
            closest_sq, np.sum((points - centroids[i]) ** 2, axis=1)
        )
    return centroids


def _lloyd(points, k, rng):
    centroids = _kmeans_pp_init(points, k, rng)
    labels = None
    trace = []
    for _ in range(MAX_ITERS):
        d2 = (
            np.sum(points**2, axis=1)[:, None]
            - 2.0 * points @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        new_labels = np.argmin(d2, axis=1)
        trace.append(float(np.sum((points - centroids[new_labels]) ** 2)))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = points[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                # deterministic refill: the point farthest from its centroid
                far = int(np.argmax(np.sum((points - centroids[labels]) ** 2, axis=1)))
                centroids[c] = points[far]
                labels[far] = c
    return centroids, labels, trace


def kmeans(latents, k=DEFAULT_K, seed=0, n_init=1):
    """Lloyd iterations from a k-means++ start until the assignment
    fixpoint (or 300 rounds); within-cluster SSE never increases.

    With n_init > 1 the run restarts from further seeded inits and the
    lowest-SSE result wins, which shields against bad local optima.
    """
    ids = [cid for cid, _ in latents]
    if len(set(ids)) != len(ids):
        raise ClusteringError("duplicate clip ids")
    if len(ids) < k:
        raise ClusteringError(f"need at least k={k} points, got {len(ids)}")
    if n_init < 1:
        raise ClusteringError(f"n_init must be positive, got {n_init}")
    points = np.stack([np.asarray(v, dtype=np.float64) for _, v in latents])
    if not np.all(np.isfinite(points)):
        raise ClusteringError("non-finite latent")

    best = None
    for i in range(n_init):
        # restart 0 streams straight from the seed so n_init=1 keeps
        # its historical output
        rng = np.random.default_rng(seed if i == 0 else (seed, i))
        run = _lloyd(points, k, rng)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    centroids, labels, trace = best
    return ClusterModel(
        k=k,
        seed=seed,
        centroids=centroids,
        assignments={cid: int(c) for cid, c in zip(ids, labels)},
        sse_trace=tuple(trace),
    )


@dataclass(frozen=True)
class PositiveMatrix:
    ids: tuple
    matrix: np.ndarray   # 0/1, symmetric, unit diagonal

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        b = len(self.ids)
        if m.shape != (b, b):
            raise ClusteringError(f"matrix shape {m.shape} != ({b}, {b})")
        if not np.array_equal(m, m.T):
            raise ClusteringError("positive matrix must be symmetric")
        if not np.all(np.diag(m) == 1.0):
            raise ClusteringError("positive matrix diagonal must be 1")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ClusteringError("positive matrix entries must be 0 or 1")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "matrix", m)

    @property
    def n_negatives(self):
        return int(self.matrix.size - self.matrix.sum())


def positive_matrix(model, batch_ids):
    """P[i, j] = 1 iff clips i and j share a cluster."""
    clusters = np.array([model.cluster_of(cid) for cid in batch_ids])
    m = (clusters[:, None] == clusters[None, :]).astype(np.float64)
    return PositiveMatrix(ids=tuple(batch_ids), matrix=m)
