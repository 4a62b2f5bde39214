"""Domain types and validity rules.

Array convention: a pose sequence is stored as ``(frames, K, 2d + 1)``, each
joint row laid out as ``offset (d) | location (d) | visibility (1)``. The
flattened per-frame state has length ``F = K * (2d + 1)``. Invisible joints
carry zero-filled offset and location; the visibility flag holds the
information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class JointState:
    offset: Tuple[float, ...]
    location: Tuple[float, ...]
    visibility: float

    def __post_init__(self):
        if len(self.offset) != len(self.location):
            raise ValueError("offset and location must have the same length")
        if len(self.offset) not in (2, 3):
            raise ValueError(f"joint dimension must be 2 or 3, got {len(self.offset)}")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility {self.visibility} outside [0, 1]")

    @property
    def d(self) -> int:
        return len(self.offset)


@dataclass(frozen=True)
class Pose:
    joints: Tuple[JointState, ...]

    @property
    def K(self) -> int:
        return len(self.joints)

    @property
    def d(self) -> int:
        return self.joints[0].d


def feature_length(K: int, d: int) -> int:
    return K * (2 * d + 1)


def flatten_pose(pose: Pose) -> np.ndarray:
    out = []
    for j in pose.joints:
        out.extend(j.offset)
        out.extend(j.location)
        out.append(j.visibility)
    return np.asarray(out, dtype=np.float64)


def unflatten_pose(vec, K: int, d: int) -> Pose:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (feature_length(K, d),):
        raise ValueError(f"expected length {feature_length(K, d)}, got {vec.shape}")
    rows = vec.reshape(K, 2 * d + 1)
    return Pose(tuple(
        JointState(tuple(float(x) for x in r[:d]), tuple(float(x) for x in r[d:2 * d]), float(r[2 * d]))
        for r in rows
    ))


def poses_to_array(poses: Sequence[Pose]) -> np.ndarray:
    """Stack poses to ``(frames, K, 2d + 1)``."""
    return np.stack([flatten_pose(p).reshape(p.K, 2 * p.d + 1) for p in poses])


def array_to_poses(arr: np.ndarray) -> List[Pose]:
    frames, K, w = arr.shape
    d = (w - 1) // 2
    return [unflatten_pose(arr[t].reshape(-1), K, d) for t in range(frames)]


@dataclass
class PersonTrack:
    """One person's history and optional future, each ``(frames, K, 2d + 1)``."""

    person_id: str
    observed: np.ndarray
    future: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return self.observed.shape[1]

    @property
    def d(self) -> int:
        return (self.observed.shape[2] - 1) // 2


@dataclass
class ObjectFeature:
    visual: np.ndarray
    bbox_center: np.ndarray
    bbox_size: np.ndarray
    class_id: int


@dataclass
class SceneSample:
    persons: List[PersonTrack]
    objects: List[ObjectFeature] = field(default_factory=list)
    context: Optional[np.ndarray] = None
    frame_interval_ms: float = 40.0
    sample_id: str = "0"

    @property
    def K(self) -> int:
        return self.persons[0].K

    @property
    def d(self) -> int:
        return self.persons[0].d

    @property
    def tau_o(self) -> int:
        return self.persons[0].observed.shape[0]

    @property
    def tau_f(self) -> int:
        fut = self.persons[0].future
        return 0 if fut is None else fut.shape[0]

    def observed_array(self) -> np.ndarray:
        """``(P, tau_o, K, 2d + 1)``."""
        return np.stack([p.observed for p in self.persons])

    def future_array(self) -> np.ndarray:
        if any(p.future is None for p in self.persons):
            raise ValueError(f"sample {self.sample_id}: future ground truth missing")
        return np.stack([p.future for p in self.persons])


@dataclass
class VisibilityMask:
    """Boolean ``(persons, frames, K)``."""

    bits: np.ndarray

    @classmethod
    def from_states(cls, states: np.ndarray) -> "VisibilityMask":
        return cls(states[..., -1] > 0.5)


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    person: Optional[int] = None
    frame: Optional[int] = None
    joint: Optional[int] = None

    def __str__(self) -> str:
        where = ", ".join(f"{k}={v}" for k, v in
                          (("person", self.person), ("frame", self.frame), ("joint", self.joint))
                          if v is not None)
        return f"[{self.rule}] {self.message}" + (f" ({where})" if where else "")


def validate_sample(sample: SceneSample) -> List[Violation]:
    """Return every invariant violation; an empty list means the sample is valid."""
    out: List[Violation] = []
    if not sample.frame_interval_ms > 0:
        out.append(Violation("frame_interval", f"frame_interval_ms must be > 0, got {sample.frame_interval_ms}"))
    if not sample.persons:
        out.append(Violation("persons", "sample has no persons"))
        return out

    ref = sample.persons[0]
    if ref.observed.ndim != 3 or (ref.observed.shape[2] - 1) % 2 or ref.observed.shape[2] not in (5, 7):
        out.append(Violation("shape", f"observed shape {ref.observed.shape} is not (frames, K, 2d+1)", person=0))
        return out
    K, width = ref.observed.shape[1], ref.observed.shape[2]
    tau_o = ref.observed.shape[0]
    tau_f = None if ref.future is None else ref.future.shape[0]

    for pi, p in enumerate(sample.persons):
        obs = p.observed
        if obs.ndim != 3 or obs.shape[1:] != (K, width):
            out.append(Violation("K", f"person {p.person_id!r} has pose shape {obs.shape[1:]}, expected {(K, width)}",
                                 person=pi))
            continue
        if obs.shape[0] == 0:
            out.append(Violation("observed", f"person {p.person_id!r} has an empty observation", person=pi))
            continue
        if obs.shape[0] != tau_o:
            out.append(Violation("tau_o", f"person {p.person_id!r} observes {obs.shape[0]} frames, expected {tau_o}",
                                 person=pi))
        fut = p.future
        if (fut is None) != (tau_f is None) or (fut is not None and fut.shape != (tau_f, K, width)):
            out.append(Violation("tau_f", f"person {p.person_id!r} future shape mismatch", person=pi))
            fut = None
        for name, arr in (("observed", obs), ("future", fut)):
            if arr is None:
                continue
            if not np.all(np.isfinite(arr)):
                t, k = np.argwhere(~np.isfinite(arr).all(axis=2))[0]
                out.append(Violation("finite", f"non-finite {name} value", person=pi, frame=int(t), joint=int(k)))
            vis = arr[..., -1]
            bad = ~((vis == 0.0) | (vis == 1.0))
            for t, k in np.argwhere(bad):
                out.append(Violation("visibility", f"{name} visibility {vis[t, k]} is not 0 or 1",
                                     person=pi, frame=int(t), joint=int(k)))
        if not np.any(obs[..., -1] == 1.0):
            out.append(Violation("observation", f"person {p.person_id!r} is invisible in every observed frame; "
                                 "at least partial history is required", person=pi))

    for oi, o in enumerate(sample.objects):
        size = np.asarray(o.bbox_size)
        if size.shape != (2,) or np.any(size < 0) or np.any(size > 1):
            out.append(Violation("bbox_size", f"object {oi} bbox_size {size.tolist()} not in [0, 1]^2"))
        if np.asarray(o.bbox_center).shape != (2,):
            out.append(Violation("bbox_center", f"object {oi} bbox_center must have length 2"))
        if int(o.class_id) < 0:
            out.append(Violation("class_id", f"object {oi} has negative class id"))
    return out
