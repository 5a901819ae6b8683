"""Motion clips, key-pose extraction, retiming, stitching, and jerk.

A pose is 8 upper-body joints in neck-relative 3-D coordinates (meters);
clips are stored as (frames, 8, 3) float64 arrays plus a frame rate.
"""

import json
from dataclasses import dataclass, field

import numpy as np

JOINTS = 8
COORDS = JOINTS * 3
MAX_JOINT_RADIUS_M = 3.0

KEYPOSE_MIN = 5
KEYPOSE_MAX = 12


class MotionError(ValueError):
    pass


def _validate_pose_array(frames):
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != (JOINTS, 3):
        raise MotionError(f"frames must be (n, {JOINTS}, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MotionError("non-finite joint coordinate")
    if np.any(np.abs(arr) > MAX_JOINT_RADIUS_M):
        raise MotionError(
            f"joint coordinate exceeds sanity bound {MAX_JOINT_RADIUS_M} m"
        )
    return arr


@dataclass(frozen=True)
class Pose:
    joints: np.ndarray  # (8, 3)

    def __post_init__(self):
        object.__setattr__(self, "joints", _validate_pose_array(
            np.asarray(self.joints, dtype=np.float64)[None])[0])

    def flat(self):
        return self.joints.reshape(COORDS)


@dataclass(frozen=True)
class MotionClip:
    fps: float
    frames: np.ndarray  # (n, 8, 3)
    clip_id: str = ""

    def __post_init__(self):
        if self.fps <= 0:
            raise MotionError(f"fps must be positive, got {self.fps}")
        arr = _validate_pose_array(self.frames)
        if arr.shape[0] < 2:
            raise MotionError(f"clip needs >= 2 frames, got {arr.shape[0]}")
        object.__setattr__(self, "frames", arr)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def duration_s(self):
        return (self.n_frames - 1) / self.fps

    def pose(self, i):
        return Pose(self.frames[i])


@dataclass(frozen=True)
class KeyPoseSequence:
    poses: np.ndarray            # (n, 8, 3), 5 <= n <= 12
    source_indices: tuple = field(default=())
    clip_id: str = ""
    source_frame_count: int = 0

    def __post_init__(self):
        arr = _validate_pose_array(self.poses)
        n = arr.shape[0]
        if not (KEYPOSE_MIN <= n <= KEYPOSE_MAX):
            raise MotionError(
                f"key-pose count {n} outside [{KEYPOSE_MIN}, {KEYPOSE_MAX}]"
            )
        idx = tuple(int(i) for i in self.source_indices)
        if len(idx) != n:
            raise MotionError("source_indices length must match pose count")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise MotionError("source_indices must be strictly increasing")
        if idx[0] < 0:
            raise MotionError("first source index must be >= 0")
        if self.source_frame_count and idx[-1] >= self.source_frame_count:
            raise MotionError("last source index beyond source frame count")
        object.__setattr__(self, "poses", arr)
        object.__setattr__(self, "source_indices", idx)

    @property
    def n(self):
        return self.poses.shape[0]

    def vectors(self):
        """(n, 24) flattened pose matrix."""
        return self.poses.reshape(self.n, COORDS)


# ---------------------------------------------------------------------------
# key-pose extraction

def mean_joint_speed(clip):
    """Per-transition speed profile: s[t] = mean_j ||p[t+1,j] - p[t,j]|| * fps."""
    diffs = np.linalg.norm(np.diff(clip.frames, axis=0), axis=2)
    return diffs.mean(axis=1) * clip.fps


def _local_minima(speeds, window=5):
    """Indices (into the speed profile) that are minimal within +-window//2."""
    half = window // 2
    n = len(speeds)
    minima = []
    for t in range(1, n - 1):
        lo, hi = max(0, t - half), min(n, t + half + 1)
        if speeds[t] <= speeds[lo:hi].min() and (
            speeds[t] < speeds[t - 1] or speeds[t] < speeds[t + 1]
        ):
            minima.append(t)
    return minima


def _valley_depth(speeds, t, half=2):
    lo, hi = max(0, t - half), min(len(speeds), t + half + 1)
    return float(speeds[lo:hi].max() - speeds[t])


def _fill_largest_gaps(indices, n_frames, target):
    chosen = sorted(indices)
    while len(chosen) < target:
        gaps = [(b - a, i) for i, (a, b) in enumerate(zip(chosen, chosen[1:]))]
        width, i = max(gaps)
        if width < 2:
            break  # no room left between frames
        chosen.insert(i + 1, chosen[i] + width // 2)
    return chosen


def extract_keyposes(clip, min_n=KEYPOSE_MIN, max_n=KEYPOSE_MAX):
    """Pick salient rest frames: endpoints plus the deepest local minima
    of mean joint speed, filled to min_n / clamped to max_n."""
    if clip.n_frames < min_n:
        raise MotionError(
            f"clip '{clip.clip_id}' has {clip.n_frames} frames, need >= {min_n}"
        )
    speeds = mean_joint_speed(clip)
    # speed[t] sits between frames t and t+1; attribute the minimum to
    # the frame entering the rest
    minima = _local_minima(speeds)
    ranked = sorted(minima, key=lambda t: (-_valley_depth(speeds, t), t))

    last = clip.n_frames - 1
    chosen = {0, last}
    for t in ranked:
        if len(chosen) >= max_n:
            break
        frame = t + 1
        if frame not in chosen and 0 < frame < last:
            chosen.add(frame)
    indices = _fill_largest_gaps(chosen, clip.n_frames, min_n)
    return KeyPoseSequence(
        poses=clip.frames[indices],
        source_indices=tuple(indices),
        clip_id=clip.clip_id,
        source_frame_count=clip.n_frames,
    )


# ---------------------------------------------------------------------------
# retiming and stitching

def speed_adjust(clip, target_duration_s):
    """Linear time-resampling to the target duration; endpoints exact."""
    if target_duration_s <= 0:
        raise MotionError(f"target duration must be positive, got {target_duration_s}")
    out_frames = int(round(target_duration_s * clip.fps)) + 1
    out_frames = max(out_frames, 2)
    src_last = clip.n_frames - 1
    new = np.empty((out_frames, JOINTS, 3))
    for i in range(out_frames):
        u = i * src_last / (out_frames - 1)
        lo = int(np.floor(u))
        hi = min(lo + 1, src_last)
        w = u - lo
        new[i] = (1.0 - w) * clip.frames[lo] + w * clip.frames[hi]
    new[0] = clip.frames[0]
    new[-1] = clip.frames[-1]
    return MotionClip(fps=clip.fps, frames=new, clip_id=clip.clip_id)


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _bridge_frames(p0, v0, p1, v1, steps):
    """Frames f_1..f_steps from p0 to p1 (f_steps == p1 exactly).

    Velocity-space Hermite blend: per-frame velocities follow a
    smoothstep from v0 to v1, with first and last step velocities equal
    to v0 / v1 exactly, plus a correction window (vanishing at both
    ends) that absorbs the position mismatch. Sampling a position-space
    cubic instead would leave O(1/steps^2) discrete-velocity jumps at
    the junctions.
    """
    n = steps
    t = np.zeros(n) if n == 1 else np.arange(n) / (n - 1)
    s = _smoothstep(t)
    vel = (1.0 - s)[:, None, None] * v0[None] + s[:, None, None] * v1[None]
    window = s * (1.0 - s)
    shortfall = (p1 - p0) - vel.sum(axis=0)
    wsum = window.sum()
    if wsum > 1e-12:
        vel += (window / wsum)[:, None, None] * shortfall[None]
    else:
        vel += shortfall[None] / n
    return p0[None] + np.cumsum(vel, axis=0)


BLEND_WINDOW_S = 0.25


def spline_stitch(segments, blend_window_s=BLEND_WINDOW_S):
    """Concatenate clips with a C1 spline blend at each join.

    The last W frames of the left clip and first W frames of the right
    (W = blend window) are replaced by one bridge whose end velocities
    equal the neighboring per-frame velocities, so finite-difference
    velocity is continuous across both junctions.
    """
    if not segments:
        raise MotionError("spline_stitch needs at least one segment")
    fps = segments[0].fps
    if any(s.fps != fps for s in segments):
        raise MotionError(
            f"mixed frame rates: {sorted({s.fps for s in segments})}"
        )
    if len(segments) == 1:
        return segments[0]

    frames = [segments[0].frames]
    for seg in segments[1:]:
        left = frames[-1]
        right = seg.frames
        w = int(round(blend_window_s * fps))
        w = max(1, min(w, left.shape[0] - 2, right.shape[0] - 2))
        p0 = left[-1 - w]
        v0 = (left[-1 - w] - left[-2 - w]) if left.shape[0] > w + 1 else np.zeros_like(p0)
        p1 = right[w]
        v1 = (right[w + 1] - right[w]) if right.shape[0] > w + 1 else np.zeros_like(p1)
        bridge = _bridge_frames(p0, v0, p1, v1, 2 * w)
        frames[-1] = left[: left.shape[0] - w]
        frames.append(bridge[:-1])  # bridge end == right[w]
        frames.append(right[w:])
    merged = np.concatenate(frames, axis=0)
    clip_id = "+".join(s.clip_id for s in segments if s.clip_id)
    return MotionClip(fps=fps, frames=merged, clip_id=clip_id)


# ---------------------------------------------------------------------------
# kinematic statistics

def jerk(clip):
    """Mean magnitude of the third finite difference of position, in m/s^3."""
    if clip.n_frames < 4:
        raise MotionError(f"jerk needs >= 4 frames, got {clip.n_frames}")
    d3 = np.diff(clip.frames, n=3, axis=0) * clip.fps**3
    return float(np.linalg.norm(d3, axis=2).mean())


# ---------------------------------------------------------------------------
# motion file format (shared with the ingest module)

def clip_to_dict(clip):
    return {
        "fps": clip.fps,
        "clip_id": clip.clip_id,
        "frames": clip.frames.tolist(),
    }


def clip_from_dict(doc):
    try:
        return MotionClip(
            fps=float(doc["fps"]),
            frames=np.asarray(doc["frames"], dtype=np.float64),
            clip_id=str(doc["clip_id"]),
        )
    except KeyError as exc:
        raise MotionError(f"motion document missing field {exc}") from None


def dump_clip(clip):
    """Canonical JSON bytes; round-trips bit-exactly."""
    return (json.dumps(clip_to_dict(clip), sort_keys=True,
                       separators=(",", ":")) + "\n").encode()


def save_clip(clip, path):
    with open(path, "wb") as f:
        f.write(dump_clip(clip))


def load_clip(path):
    with open(path, "rb") as f:
        return clip_from_dict(json.loads(f.read().decode()))
