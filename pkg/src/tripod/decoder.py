"""Recursive future decoding with per-step social refinement of hidden states."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffkernels as dk
from .diffkernels import Var
from .encoder import (Affine, EncoderParams, LstmParams, embed_context, embed_objects, encode_history,
                      init_affine, init_lstm)
from .graph_attn import GatParams, attention_weights, dense_mask, gat_layer
from .interaction import AttentionLog, Flags, InteractionParams, message_passing
from .types import SceneSample, validate_sample


@dataclass
class DecoderParams:
    lstm: LstmParams
    psi: Affine
    future_h2h: GatParams   # the same object as InteractionParams.h2h

    def named(self) -> Dict[str, Var]:
        return {"dec.lstm.W": self.lstm.W, "dec.lstm.b": self.lstm.b,
                "dec.psi.W": self.psi.W, "dec.psi.b": self.psi.b}


@dataclass
class FeatureNorm:
    """Fixed per-channel input scaling for ``offset | location | visibility`` rows.

    Network inputs are ``(x - mean) / std`` channel-wise; offsets and the
    visibility flag are never shifted, so predicted offsets are the raw output
    times the offset scale and zero weights still mean zero velocity.
    """

    mean: np.ndarray   # (2d + 1,)
    std: np.ndarray    # (2d + 1,)

    @classmethod
    def identity(cls, d: int) -> "FeatureNorm":
        return cls(np.zeros(2 * d + 1), np.ones(2 * d + 1))

    @classmethod
    def fit(cls, samples: Sequence[SceneSample]) -> "FeatureNorm":
        """Location mean/std and offset RMS over visible observed joints."""
        d = samples[0].d
        rows = np.concatenate([s.observed_array().reshape(-1, 2 * d + 1) for s in samples])
        rows = rows[rows[:, -1] > 0.5]
        norm = cls.identity(d)
        if len(rows) == 0:
            return norm
        off, loc = rows[:, :d], rows[:, d:2 * d]
        norm.mean[d:2 * d] = loc.mean(axis=0)
        loc_std = loc.std(axis=0)
        off_rms = np.sqrt(np.mean(off * off, axis=0))
        norm.std[:d] = np.where(off_rms > 1e-8, off_rms, 1.0)
        norm.std[d:2 * d] = np.where(loc_std > 1e-8, loc_std, 1.0)
        return norm

    @property
    def d(self) -> int:
        return (self.mean.shape[0] - 1) // 2

    def apply(self, states):
        """Normalize states shaped ``(..., 2d + 1)`` (numpy or Var)."""
        if isinstance(states, Var):
            return dk.mul(dk.sub(states, Var(self.mean)), Var(1.0 / self.std))
        return (np.asarray(states, dtype=np.float64) - self.mean) / self.std

    def offset_scale(self) -> np.ndarray:
        return self.std[:self.d]


@dataclass
class ModelParams:
    encoder: EncoderParams
    interaction: InteractionParams
    decoder: DecoderParams
    norm: Optional[FeatureNorm] = None

    def named(self) -> Dict[str, Var]:
        """Every learnable array by name; shared weights appear once."""
        return {**self.encoder.named(), **self.interaction.named(), **self.decoder.named()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.value for k, v in self.named().items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        named = self.named()
        missing = sorted(set(named) - set(arrays))
        if missing:
            raise KeyError(f"parameter arrays missing: {missing[:5]}")
        for k, v in named.items():
            if arrays[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {arrays[k].shape} != {v.shape}")
            v.value = np.array(arrays[k], dtype=np.float64)

    def vector(self) -> np.ndarray:
        return np.concatenate([v.value.reshape(-1) for v in self.named().values()])

    def load_vector(self, vec: np.ndarray) -> None:
        pos = 0
        for v in self.named().values():
            n = v.value.size
            v.value = np.array(vec[pos:pos + n], dtype=np.float64).reshape(v.shape)
            pos += n

    def zero_grad(self) -> None:
        for v in self.named().values():
            v.grad = None


def init_decoder(rng: np.random.Generator, cfg, shared_h2h: GatParams) -> DecoderParams:
    F = cfg.F
    lstm = init_lstm(rng, F, cfg.hidden)
    psi = init_affine(rng, cfg.hidden + F, cfg.K * cfg.d + cfg.K)
    # offset outputs start as a copy of each joint's previous offset, so an
    # untrained decoder extrapolates at constant velocity
    w = psi.W.value
    w[:, :cfg.K * cfg.d] = 0.0
    stride = 2 * cfg.d + 1
    for k in range(cfg.K):
        for c in range(cfg.d):
            w[cfg.hidden + k * stride + c, k * cfg.d + c] = 1.0
    return DecoderParams(lstm, psi, shared_h2h)


@dataclass
class ForecastTrace:
    """Differentiable forecast tensors ``(P, T, K, d)`` / ``(P, T, K)``."""

    offsets: Var
    locations: Var
    logits: Var


@dataclass
class ForecastResult:
    offsets: np.ndarray      # (P, T, K, d)
    locations: np.ndarray    # (P, T, K, d)
    visibility: np.ndarray   # (P, T, K) probabilities
    person_ids: List[str] = field(default_factory=list)
    trace: Optional[ForecastTrace] = None

    @property
    def horizon(self) -> int:
        return self.offsets.shape[1]

    def states(self, threshold: float = 0.5) -> np.ndarray:
        """``(P, T, K, 2d + 1)`` with visibility thresholded to 0/1."""
        vis = (self.visibility >= threshold).astype(np.float64)[..., None]
        return np.concatenate([self.offsets, self.locations, vis], axis=-1)


def decode_step(prev_state: Var, prev_loc: Var, hidden: Var, cell: Var, params: DecoderParams, K: int, d: int,
                norm: Optional[FeatureNorm] = None):
    """One decoder step for all persons at once.

    ``prev_state`` is the previous frame ``(P, K, 2d + 1)`` in data units.
    Returns ``(offsets (P,K,d), locations (P,K,d), logits (P,K), next_state (P,K,2d+1), h, c)``.
    ``psi`` reads both the recurrent output and the step input (skip connection).
    """
    P = prev_state.shape[0]
    x = prev_state if norm is None else norm.apply(prev_state)
    x = dk.reshape(x, (P, K * (2 * d + 1)))
    h, c = dk.lstm_cell(x, hidden, cell, params.lstm.W, params.lstm.b)
    out = params.psi(dk.concat([h, x], axis=-1))
    off = dk.reshape(out[:, :K * d], (P, K, d))
    if norm is not None:
        off = dk.mul(off, Var(norm.offset_scale()))
    logits = out[:, K * d:]
    loc = prev_loc + off
    vis = dk.reshape(dk.sigmoid(logits), (P, K, 1))
    nxt = dk.concat([off, loc, vis], axis=-1)
    return off, loc, logits, nxt, h, c


def future_social_refine(hidden: Var, params: DecoderParams) -> Var:
    return gat_layer(hidden, dense_mask(hidden.shape[0]), params.future_h2h)


def encode_scene(sample: SceneSample, params: ModelParams, cfg, log: Optional[AttentionLog] = None):
    """Encoder, context fusion and message passing; returns ``(f_N, encoder cell state)``."""
    obs = sample.observed_array()
    if params.norm is not None:
        obs = params.norm.apply(obs)
    enc = encode_history(obs, params.encoder, cfg.pose_graph)
    Z = enc.Z
    if cfg.use_context and sample.context is not None:
        Z = Z + embed_context(sample.context, params.encoder)
    flags = Flags.from_config(cfg)
    if cfg.use_h2o:
        objects = embed_objects(sample.objects, params.encoder, cfg.visual_dim, cfg.n_classes)
    else:
        objects = Var(np.zeros((0, cfg.hidden)))
    f = message_passing(Z, objects, params.interaction, flags, log=log)
    return f, enc.cell


def rollout(sample: SceneSample, params: ModelParams, cfg, horizon: Optional[int] = None,
            log: Optional[AttentionLog] = None, validate: bool = True) -> ForecastResult:
    """Forecast ``horizon`` future frames (default ``cfg.tau_f``) for every person."""
    horizon = cfg.tau_f if horizon is None else horizon
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if validate:
        problems = validate_sample(sample)
        if problems:
            raise ValueError(f"sample {sample.sample_id}: " + "; ".join(map(str, problems[:5])))
    K, d = sample.K, sample.d
    P = len(sample.persons)
    ids = [p.person_id for p in sample.persons]
    if horizon == 0:
        z = np.zeros((P, 0, K, d))
        return ForecastResult(z, z.copy(), np.zeros((P, 0, K)), ids)

    obs = sample.observed_array()
    f, cell = encode_scene(sample, params, cfg, log)
    teacher = sample.future_array() if cfg.teacher_forcing else None

    h, c = f, cell
    prev_state = Var(obs[:, -1])
    prev_loc = Var(obs[:, -1, :, d:2 * d])
    offs, locs, logits = [], [], []
    for t in range(horizon):
        off, loc, lg, nxt, h_out, c = decode_step(prev_state, prev_loc, h, c, params.decoder, K, d, params.norm)
        offs.append(off)
        locs.append(loc)
        logits.append(lg)
        if cfg.use_future_h2h:
            if log is not None:
                log.future_h2h.append(attention_weights(h_out, dense_mask(P), params.decoder.future_h2h))
            h = future_social_refine(h_out, params.decoder)
        else:
            h = h_out
        if teacher is not None:
            prev_state = Var(teacher[:, t])
            prev_loc = Var(teacher[:, t, :, d:2 * d])
        else:
            prev_state, prev_loc = nxt, loc

    trace = ForecastTrace(dk.stack(offs, axis=1), dk.stack(locs, axis=1), dk.stack(logits, axis=1))
    return ForecastResult(trace.offsets.value, trace.locations.value, dk._sigmoid(trace.logits.value), ids, trace)
