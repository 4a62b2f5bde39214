"""Pose-graph and history encoding, plus object and scene-context embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffkernels as dk
from .diffkernels import Var
from .graph_attn import GatParams, dense_mask, gat_layer, init_gat
from .skeleton import skeleton_mask
from .types import ObjectFeature, PersonTrack


@dataclass
class Affine:
    W: Var
    b: Var

    def __call__(self, x: Var) -> Var:
        return dk.affine(x, self.W, self.b)


@dataclass
class LstmParams:
    W: Var
    b: Var

    @property
    def hidden(self) -> int:
        return self.b.shape[0] // 4


@dataclass
class EncoderParams:
    joint_embed: Affine
    pose_gat: GatParams
    lstm: LstmParams
    object_mlp: List[Affine] = field(default_factory=list)
    context_mlp: List[Affine] = field(default_factory=list)

    def named(self) -> Dict[str, Var]:
        out = {"enc.joint_embed.W": self.joint_embed.W, "enc.joint_embed.b": self.joint_embed.b}
        out.update(self.pose_gat.named("enc.pose_gat"))
        out["enc.lstm.W"] = self.lstm.W
        out["enc.lstm.b"] = self.lstm.b
        for i, layer in enumerate(self.object_mlp):
            out[f"enc.object_mlp.{i}.W"] = layer.W
            out[f"enc.object_mlp.{i}.b"] = layer.b
        for i, layer in enumerate(self.context_mlp):
            out[f"enc.context_mlp.{i}.W"] = layer.W
            out[f"enc.context_mlp.{i}.b"] = layer.b
        return out


@dataclass
class EncodedHistory:
    """Per-person encodings: ``Z`` and final cell state, each ``(P, hidden)``."""

    Z: Var
    cell: Var


def init_affine(rng: np.random.Generator, fan_in: int, fan_out: int) -> Affine:
    bound = 1.0 / np.sqrt(fan_in)
    return Affine(Var(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True),
                  Var(np.zeros(fan_out), requires_grad=True))


def init_lstm(rng: np.random.Generator, in_dim: int, hidden: int) -> LstmParams:
    bound = 1.0 / np.sqrt(in_dim + hidden)
    W = rng.uniform(-bound, bound, size=(in_dim + hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return LstmParams(Var(W, requires_grad=True), Var(b, requires_grad=True))


def object_input_dim(visual_dim: int, n_classes: int) -> int:
    return visual_dim + 4 + n_classes


def init_encoder(rng: np.random.Generator, cfg) -> EncoderParams:
    width = 2 * cfg.d + 1
    joint_embed = init_affine(rng, width, cfg.joint_embed_dim)
    pose_gat = init_gat(rng, cfg.joint_embed_dim, cfg.node_dim // cfg.heads, cfg.heads, "concat")
    lstm = init_lstm(rng, cfg.node_dim, cfg.hidden)
    dims = [object_input_dim(cfg.visual_dim, cfg.n_classes)] + list(cfg.object_widths)
    object_mlp = [init_affine(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    dims = [cfg.context_dim] + list(cfg.context_widths)
    context_mlp = [init_affine(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    return EncoderParams(joint_embed, pose_gat, lstm, object_mlp, context_mlp)


def pose_mask(K: int, mode: str) -> np.ndarray:
    return dense_mask(K) if mode == "dense" else skeleton_mask(K)


def encode_pose_graph(pose, params: EncoderParams, mode: str = "dense") -> Var:
    """Embed joint states ``(..., K, 2d + 1)`` and run the joint attention graph.

    Returns ``(..., K, node_dim)``; any leading axes (persons, frames) are batched.
    """
    pose = dk.as_var(pose)
    nodes = dk.tanh(params.joint_embed(pose))
    return gat_layer(nodes, pose_mask(pose.shape[-2], mode), params.pose_gat)


def encode_history(observed, params: EncoderParams, mode: str = "dense") -> EncodedHistory:
    """Encode observed states ``(P, tau_o, K, 2d + 1)`` (or one track's ``(tau_o, K, 2d + 1)``).

    Joint nodes are mean-pooled per frame and the frame sequence is run
    through the LSTM from a zero state; the final hidden state is ``Z``.
    """
    if isinstance(observed, PersonTrack):
        observed = observed.observed
    obs = dk.as_var(observed)
    single = obs.value.ndim == 3
    if single:
        obs = dk.reshape(obs, (1,) + obs.shape)
    P, T = obs.shape[0], obs.shape[1]
    if T == 0:
        raise ValueError("encode_history: empty observation")
    graph = encode_pose_graph(obs, params, mode)        # (P, T, K, node_dim)
    pooled = dk.mean(graph, axis=2)                      # (P, T, node_dim)
    H = params.lstm.hidden
    h = Var(np.zeros((P, H)))
    c = Var(np.zeros((P, H)))
    for t in range(T):
        h, c = dk.lstm_cell(pooled[:, t, :], h, c, params.lstm.W, params.lstm.b)
    if single:
        h, c = h[0], c[0]
    return EncodedHistory(h, c)


def object_inputs(objects: Sequence[ObjectFeature], visual_dim: int, n_classes: int) -> np.ndarray:
    rows = []
    for i, o in enumerate(objects):
        vis = np.asarray(o.visual, dtype=np.float64)
        if vis.shape != (visual_dim,):
            raise ValueError(f"object {i}: visual feature length {vis.shape[0]} != configured {visual_dim}")
        if not 0 <= int(o.class_id) < n_classes:
            raise ValueError(f"object {i}: class_id {o.class_id} outside [0, {n_classes})")
        onehot = np.zeros(n_classes)
        onehot[int(o.class_id)] = 1.0
        rows.append(np.concatenate([vis, np.asarray(o.bbox_center, float), np.asarray(o.bbox_size, float), onehot]))
    if not rows:
        return np.zeros((0, object_input_dim(visual_dim, n_classes)))
    return np.stack(rows)


def embed_objects(objects: Sequence[ObjectFeature], params: EncoderParams, visual_dim: int,
                  n_classes: int) -> Var:
    """``visual | center | size | one-hot(class)`` through the object MLP, tanh after each layer."""
    x = Var(object_inputs(objects, visual_dim, n_classes))
    if x.shape[0] == 0:
        return Var(np.zeros((0, params.object_mlp[-1].W.shape[1])))
    for layer in params.object_mlp:
        x = dk.tanh(layer(x))
    return x


def embed_context(context: Optional[np.ndarray], params: EncoderParams) -> Var:
    hidden = params.context_mlp[-1].W.shape[1]
    if context is None:
        return Var(np.zeros(hidden))
    x = np.asarray(context, dtype=np.float64)
    if x.shape != (params.context_mlp[0].W.shape[0],):
        raise ValueError(f"context length {x.shape} != configured {params.context_mlp[0].W.shape[0]}")
    out = Var(x)
    for layer in params.context_mlp:
        out = dk.tanh(layer(out))
    return out
