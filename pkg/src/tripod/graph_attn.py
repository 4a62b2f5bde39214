"""Single-layer multi-head graph attention over dense boolean edge masks.

Each head projects the nodes, scores every permitted edge ``i -> j`` with
``leaky_relu(a_src . Wh_i + a_dst . Wh_j)``, normalizes the scores of row
``i`` with a masked softmax and returns the attention-weighted sum of
projected neighbours. Heads are concatenated (``merge="concat"``) or averaged
(``merge="mean"``). Rows whose mask is all-false are not updated: the input
row is passed through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import diffkernels as dk
from .diffkernels import Var


@dataclass
class GatParams:
    W: Var          # (in_dim, heads * head_dim)
    a: Var          # (heads, 2 * head_dim): source half then destination half
    heads: int
    merge: str = "concat"

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def head_dim(self) -> int:
        return self.W.shape[1] // self.heads

    @property
    def out_dim(self) -> int:
        return self.heads * self.head_dim if self.merge == "concat" else self.head_dim

    def named(self, prefix: str) -> Dict[str, Var]:
        return {f"{prefix}.W": self.W, f"{prefix}.a": self.a}


def init_gat(rng: np.random.Generator, in_dim: int, head_dim: int, heads: int, merge: str = "concat") -> GatParams:
    bw = 1.0 / np.sqrt(in_dim)
    ba = 1.0 / np.sqrt(2 * head_dim)
    W = Var(rng.uniform(-bw, bw, size=(in_dim, heads * head_dim)), requires_grad=True)
    a = Var(rng.uniform(-ba, ba, size=(heads, 2 * head_dim)), requires_grad=True)
    return GatParams(W, a, heads, merge)


def dense_mask(n: int) -> np.ndarray:
    return np.ones((n, n), dtype=bool)


def bipartite_mask(n_persons: int, n_objects: int) -> np.ndarray:
    """Persons attend to every object and to themselves; object rows are empty."""
    n = n_persons + n_objects
    m = np.zeros((n, n), dtype=bool)
    m[:n_persons, n_persons:] = True
    m[np.arange(n_persons), np.arange(n_persons)] = True
    return m


def _attention(x: Var, mask: np.ndarray, params: GatParams):
    """Return ``(att, projected)``: att ``(..., H, n, n)``, projected ``(..., H, n, hd)``."""
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"gat_layer: node_feats width {x.shape[-1]} != params in_dim {params.in_dim}")
    n = x.shape[-2]
    if mask.shape != (n, n):
        raise ValueError(f"gat_layer: mask shape {mask.shape} does not match {n} nodes")
    H, hd = params.heads, params.head_dim
    lead = x.shape[:-2]
    proj = dk.affine(x, params.W)
    proj = dk.transpose(dk.reshape(proj, lead + (n, H, hd)),
                        tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2))
    a_src = dk.reshape(params.a[:, :hd], (H, hd, 1))
    a_dst = dk.reshape(params.a[:, hd:], (H, 1, hd))
    src = dk.matmul(proj, a_src)                                   # (..., H, n, 1)
    dst = dk.matmul(a_dst, dk.transpose(proj, tuple(range(len(lead) + 1)) + (len(lead) + 2, len(lead) + 1)))
    logits = dk.leaky_relu(src + dst)                              # (..., H, n, n)
    updated = mask.any(axis=1)
    safe = mask | np.diag(~updated)
    att = dk.masked_softmax(logits, safe)
    return att, proj, updated


def gat_layer(node_feats: Var, mask: np.ndarray, params: GatParams) -> Var:
    """Attention layer over ``node_feats`` ``(..., n, in_dim)``; returns ``(..., n, out_dim)``."""
    att, proj, updated = _attention(node_feats, mask, params)
    out = dk.matmul(att, proj)                                     # (..., H, n, hd)
    nl = out.value.ndim
    if params.merge == "concat":
        perm = tuple(range(nl - 3)) + (nl - 2, nl - 3, nl - 1)
        out = dk.transpose(out, perm)
        out = dk.reshape(out, out.shape[:-2] + (params.heads * params.head_dim,))
    else:
        out = dk.mean(out, axis=nl - 3)
    if not updated.all():
        if params.out_dim != params.in_dim:
            raise ValueError("gat_layer: pass-through rows need out_dim == in_dim")
        out = dk.where(updated[:, None], out, node_feats)
    return out


def attention_weights(node_feats, mask: np.ndarray, params: GatParams) -> np.ndarray:
    """Head-averaged attention matrix ``(..., n, n)``; non-updated rows are all zero."""
    att, _, updated = _attention(dk.as_var(node_feats), mask, params)
    w = att.value.mean(axis=-3)
    return np.where(updated[:, None], w, 0.0)
