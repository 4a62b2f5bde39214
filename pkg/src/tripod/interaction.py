"""Human-object and human-human attention fused by iterative message passing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import diffkernels as dk
from .diffkernels import Var
from .graph_attn import GatParams, attention_weights, bipartite_mask, dense_mask, gat_layer, init_gat


@dataclass
class InteractionParams:
    h2o: GatParams
    h2h: GatParams
    iterations: int = 3

    def named(self) -> Dict[str, Var]:
        return {**self.h2o.named("int.h2o"), **self.h2h.named("int.h2h")}


def init_interaction(rng: np.random.Generator, cfg) -> InteractionParams:
    # Interaction graphs keep the hidden width so the averaging update and the
    # decoder hidden state line up; heads are therefore averaged, not concatenated.
    h2o = init_gat(rng, cfg.hidden, cfg.hidden, cfg.heads, "mean")
    h2h = init_gat(rng, cfg.hidden, cfg.hidden, cfg.heads, "mean")
    return InteractionParams(h2o, h2h, cfg.mp_iterations)


@dataclass
class Flags:
    use_h2o: bool = True
    use_h2h: bool = True
    use_message_passing: bool = True

    @classmethod
    def from_config(cls, cfg) -> "Flags":
        return cls(cfg.use_h2o, cfg.use_h2h, cfg.use_message_passing)


@dataclass
class AttentionLog:
    """Per-iteration head-averaged attention matrices (numpy), filled on request."""

    h2o: List[np.ndarray] = field(default_factory=list)
    h2h: List[np.ndarray] = field(default_factory=list)
    future_h2h: List[np.ndarray] = field(default_factory=list)


def h2o_step(person_feats: Var, object_feats: Var, params: InteractionParams,
             log: Optional[AttentionLog] = None) -> Var:
    """Persons attend to objects and themselves; returns updated person rows ``(P, hidden)``."""
    P, M = person_feats.shape[0], object_feats.shape[0]
    nodes = dk.concat([person_feats, object_feats], axis=0) if M else person_feats
    mask = bipartite_mask(P, M)
    if log is not None:
        log.h2o.append(attention_weights(nodes, mask, params.h2o))
    out = gat_layer(nodes, mask, params.h2o)
    return out[:P] if M else out


def h2h_step(person_feats: Var, params: InteractionParams, mask: Optional[np.ndarray] = None,
             log: Optional[AttentionLog] = None) -> Var:
    mask = dense_mask(person_feats.shape[0]) if mask is None else mask
    if log is not None:
        log.h2h.append(attention_weights(person_feats, mask, params.h2h))
    return gat_layer(person_feats, mask, params.h2h)


def message_passing(Z: Var, objects: Var, params: InteractionParams, flags: Optional[Flags] = None,
                    h2h_mask: Optional[np.ndarray] = None, log: Optional[AttentionLog] = None) -> Var:
    """Fuse person encodings ``Z`` ``(P, hidden)`` with embedded objects ``(M, hidden)``.

    Each iteration computes ``m = H2H(H2O(f))`` and updates ``f <- (f + m) / 2``.
    Objects are read, never written. With message passing disabled, a single
    ``H2H(H2O(Z))`` pass is returned instead; disabled graphs act as identity.
    """
    flags = flags or Flags()

    def one_pass(f: Var) -> Var:
        if flags.use_h2o:
            f = h2o_step(f, objects, params, log)
        if flags.use_h2h:
            f = h2h_step(f, params, h2h_mask, log)
        return f

    if not flags.use_message_passing:
        if not (flags.use_h2o or flags.use_h2h):
            return Z
        return one_pass(Z)
    f = Z
    for _ in range(params.iterations):
        m = one_pass(f)
        f = dk.scale(f + m, 0.5)
    return f
