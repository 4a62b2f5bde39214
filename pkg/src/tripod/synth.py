"""Synthetic multi-person scenes and oracle baseline predictors.

Motion models:

* ``constant-velocity``: every root moves with a fixed per-frame velocity.
* ``sinusoidal-limb``: constant-velocity roots, limbs swing sinusoidally.
* ``follower``: person 0 (the leader) walks with velocity ``v1`` and turns to
  ``v2`` at frame ``tau_o - 1 - lag``; every other person replays the
  leader's trajectory ``lag`` frames later (plus a fixed lateral offset), so
  followers turn at the first future frame. An attractor object sits on the
  leader's new heading.

Occlusion is applied to the visibility flags afterwards, and coordinates of
invisible joints are zero-filled.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from .decoder import ForecastResult
from .skeleton import template
from .types import ObjectFeature, PersonTrack, SceneSample

LIMB_JOINTS_13 = (3, 4, 5, 6, 9, 10, 11, 12)
N_OBJECT_CLASSES = 4


def _rotate(v: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    out = v.copy()
    out[0], out[1] = c * v[0] - s * v[1], s * v[0] + c * v[1]
    return out


def _draw_velocity(rng: np.random.Generator, cfg) -> np.ndarray:
    v = np.zeros(cfg.d)
    if cfg.gen_velocity is not None:
        v[:] = np.asarray(cfg.gen_velocity, dtype=np.float64)
        return v
    angle = rng.uniform(0.0, 2 * np.pi)
    speed = rng.uniform(cfg.gen_speed_min, cfg.gen_speed_max)
    v[0], v[1] = speed * np.cos(angle), speed * np.sin(angle)
    return v


def _limb_joints(K: int) -> List[int]:
    if K == 13:
        return list(LIMB_JOINTS_13)
    if K == 14:
        return [j + 1 for j in LIMB_JOINTS_13]
    return list(range(1, K))


def _class_prototypes(visual_dim: int) -> np.ndarray:
    return np.random.default_rng(12345).normal(0.0, 1.0, size=(N_OBJECT_CLASSES, visual_dim))


def _states(locs: np.ndarray, vis: np.ndarray) -> np.ndarray:
    """``locs`` ``(T + 1, K, d)`` including frame -1; returns ``(T, K, 2d + 1)``."""
    offsets = locs[1:] - locs[:-1]
    loc = locs[1:]
    m = vis[..., None]
    return np.concatenate([offsets * m, loc * m, vis[..., None]], axis=-1)


def generate(cfg) -> List[SceneSample]:
    """Generate ``cfg.gen_n_samples`` scenes; bit-identical for equal configs."""
    rng = np.random.default_rng(cfg.gen_seed)
    K, d = cfg.K, cfg.d
    T = cfg.tau_o + cfg.tau_f
    times = np.arange(-1, T, dtype=np.float64)           # frame -1 gives the first offset
    protos = _class_prototypes(cfg.visual_dim)
    n_cls = min(N_OBJECT_CLASSES, cfg.n_classes)
    samples = []
    for s in range(cfg.gen_n_samples):
        base = template(K, d)
        roots, poses = [], []
        attractor = None
        if cfg.gen_motion == "follower":
            lag = cfg.gen_follow_lag
            t_turn = cfg.tau_o - 1 - lag
            p0 = np.zeros(d)
            p0[:2] = rng.uniform(-cfg.gen_spawn_extent, cfg.gen_spawn_extent, size=2)
            v1 = _draw_velocity(rng, cfg)
            turn = np.deg2rad(rng.uniform(cfg.gen_turn_min_deg, cfg.gen_turn_max_deg)) * rng.choice([-1.0, 1.0])
            v2 = _rotate(v1, turn)

            def leader(t):
                t = np.asarray(t, dtype=np.float64)[:, None]
                return np.where(t <= t_turn, p0 + v1 * t, p0 + v1 * t_turn + v2 * (t - t_turn))

            attractor = p0 + v1 * t_turn + v2 * 12.0
            roots.append(leader(times))
            for i in range(1, cfg.gen_n_persons):
                side = np.zeros(d)
                side[:2] = _rotate(v1, np.pi / 2)[:2] / (np.linalg.norm(v1[:2]) + 1e-12) * 0.6 * i
                roots.append(leader(times - lag) + side)
        else:
            for i in range(cfg.gen_n_persons):
                p0 = np.zeros(d)
                p0[:2] = rng.uniform(-cfg.gen_spawn_extent, cfg.gen_spawn_extent, size=2)
                v = _draw_velocity(rng, cfg)
                roots.append(p0 + v * times[:, None])
        for i, r in enumerate(roots):
            joints = r[:, None, :] + base[None] * rng.uniform(0.9, 1.1) if cfg.gen_motion != "follower" \
                else r[:, None, :] + base[None]
            if cfg.gen_motion == "sinusoidal-limb":
                phase = rng.uniform(0, 2 * np.pi)
                for k in _limb_joints(K):
                    sign = 1.0 if k % 2 else -1.0
                    joints[:, k, 0] += sign * cfg.gen_limb_amplitude * np.sin(
                        2 * np.pi * times / cfg.gen_limb_period + phase)
            poses.append(joints)

        persons = []
        for i, (r, joints) in enumerate(zip(roots, poses)):
            vis = np.ones((T, K))
            if cfg.gen_occlusion == "deterministic-window":
                a, b = cfg.gen_occlusion_window
                for j in cfg.gen_occlusion_joints:
                    vis[max(a, 0):b + 1, j] = 0.0
            elif cfg.gen_occlusion == "exit":
                outside = np.any(np.abs(r[1:, :2]) > cfg.gen_region, axis=1)
                if outside.any():
                    vis[int(np.argmax(outside)):] = 0.0
            states = _states(joints, vis)
            pid = f"p{i}" if cfg.gen_motion != "follower" else ("leader" if i == 0 else f"follower{i}")
            persons.append(PersonTrack(pid, states[:cfg.tau_o], states[cfg.tau_o:]))

        objects = []
        for j in range(cfg.gen_n_objects):
            if j == 0 and attractor is not None:
                pos, cls = attractor[:2], 1 % n_cls
            else:
                pos = rng.uniform(-cfg.gen_region, cfg.gen_region, size=2)
                cls = int(rng.integers(0, n_cls))
            visual = protos[cls] + rng.normal(0.0, 0.05, size=cfg.visual_dim)
            center = np.clip((pos + cfg.gen_region) / (2 * cfg.gen_region), 0.0, 1.0)
            size = rng.uniform(0.05, 0.2, size=2)
            objects.append(ObjectFeature(visual, center, size, cls))
        context = rng.normal(0.0, 0.1, size=cfg.context_dim) if cfg.gen_context else None
        samples.append(SceneSample(persons, objects, context, cfg.frame_interval_ms, str(s)))
    return samples


def follower_indices(sample: SceneSample) -> List[int]:
    return [i for i, p in enumerate(sample.persons) if p.person_id.startswith("follower")]


# ---------------------------------------------------------------- baselines


def baseline_zero_velocity(sample: SceneSample, horizon: Optional[int] = None) -> ForecastResult:
    """Repeat each person's last observed pose."""
    horizon = sample.tau_f if horizon is None else horizon
    obs = sample.observed_array()
    d = sample.d
    last = obs[:, -1]
    P, K = last.shape[0], last.shape[1]
    loc = np.repeat(last[:, None, :, d:2 * d], horizon, axis=1)
    vis = np.repeat(last[:, None, :, -1], horizon, axis=1)
    return ForecastResult(np.zeros((P, horizon, K, d)), loc, vis, [p.person_id for p in sample.persons])


def baseline_constant_velocity(sample: SceneSample, horizon: Optional[int] = None) -> ForecastResult:
    """Extrapolate each joint's last observed offset linearly."""
    if sample.tau_o < 2:
        raise ValueError("constant-velocity baseline needs at least 2 observed frames")
    horizon = sample.tau_f if horizon is None else horizon
    obs = sample.observed_array()
    d = sample.d
    last = obs[:, -1]
    step = last[:, None, :, :d]
    steps = np.arange(1, horizon + 1, dtype=np.float64)[None, :, None, None]
    loc = last[:, None, :, d:2 * d] + steps * step
    off = np.repeat(step, horizon, axis=1)
    vis = np.repeat(last[:, None, :, -1], horizon, axis=1)
    return ForecastResult(off, loc, vis, [p.person_id for p in sample.persons])
