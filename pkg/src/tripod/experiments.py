"""Scaled-down benchmark against oracle baselines and the ablation report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .decoder import rollout
from .metrics import report
from .synth import baseline_constant_velocity, baseline_zero_velocity, follower_indices, generate
from .training import train
from .types import SceneSample

# name -> config changes relative to the full model
ABLATIONS: Dict[str, dict] = {
    "full": {},
    "no_future_h2h": {"use_future_h2h": False},
    "no_message_passing": {"use_message_passing": False},
    "no_h2o": {"use_h2o": False},
    "no_h2h": {"use_h2h": False, "use_future_h2h": False},
    "no_context": {"use_context": False},
    "sparse_pose": {"pose_graph": "sparse"},
}


def held_out_split(cfg) -> List[SceneSample]:
    """Held-out scenes drawn from a seed disjoint from the training seed."""
    return generate(cfg.replace(gen_seed=cfg.gen_seed + 1_000_003, gen_n_samples=max(cfg.gen_n_samples // 4, 1)))


def final_vim(preds, samples: Sequence[SceneSample], subset=None) -> Optional[float]:
    rows = report(preds, samples, person_subset=subset).rows
    return rows[-1].vim if rows else None


@dataclass
class BenchmarkResult:
    # method -> {"all": vim, "followers": vim}
    scores: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "vim_final_all", "vim_final_followers"])
        for name, s in self.scores.items():
            w.writerow([name] + ["" if s[k] is None else repr(float(s[k])) for k in ("all", "followers")])
        return buf.getvalue()


def score_methods(predictions: Dict[str, list], samples: Sequence[SceneSample]) -> BenchmarkResult:
    followers = [follower_indices(s) for s in samples]
    res = BenchmarkResult()
    for name, preds in predictions.items():
        res.scores[name] = {"all": final_vim(preds, samples),
                            "followers": final_vim(preds, samples, followers) if any(followers) else None}
    return res


def benchmark(cfg, train_samples: Optional[Sequence[SceneSample]] = None,
              test_samples: Optional[Sequence[SceneSample]] = None, state=None):
    """Train on generated scenes, then score the model and both baselines on held-out ones.

    Returns ``(BenchmarkResult, TrainState)``.
    """
    train_samples = generate(cfg) if train_samples is None else train_samples
    test_samples = held_out_split(cfg) if test_samples is None else test_samples
    state = train(train_samples, cfg, state=state, val=[])
    preds = {
        "model": [rollout(s, state.params, cfg) for s in test_samples],
        "zero_velocity": [baseline_zero_velocity(s, cfg.tau_f) for s in test_samples],
        "constant_velocity": [baseline_constant_velocity(s, cfg.tau_f) for s in test_samples],
    }
    return score_methods(preds, test_samples), state


@dataclass
class AblationRow:
    variant: str
    changes: dict
    vim_all: Optional[float]
    vim_followers: Optional[float]


def ablation(cfg, variants: Sequence[str] = tuple(ABLATIONS), train_samples=None, test_samples=None,
             trained: Optional[Dict[str, object]] = None) -> List[AblationRow]:
    """Train one model per variant with identical data and seed and score each.

    ``trained`` may map variant names to already trained states (reused as is).
    """
    train_samples = generate(cfg) if train_samples is None else train_samples
    test_samples = held_out_split(cfg) if test_samples is None else test_samples
    followers = [follower_indices(s) for s in test_samples]
    rows = []
    for name in variants:
        if name not in ABLATIONS:
            raise KeyError(f"unknown ablation variant {name!r}; choose from {sorted(ABLATIONS)}")
        vcfg = cfg.replace(**ABLATIONS[name])
        state = (trained or {}).get(name)
        if state is None:
            state = train(train_samples, vcfg, val=[])
        preds = [rollout(s, state.params, vcfg) for s in test_samples]
        rows.append(AblationRow(name, ABLATIONS[name], final_vim(preds, test_samples),
                                final_vim(preds, test_samples, followers) if any(followers) else None))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    """One line per variant with its change relative to ``full`` (negative = better)."""
    ref = next((r for r in rows if r.variant == "full"), None)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "changes", "vim_final_all", "vim_final_followers", "rel_change_vs_full"])
    for r in rows:
        rel = ""
        if ref is not None and ref.vim_all and r.vim_all is not None:
            rel = repr((r.vim_all - ref.vim_all) / ref.vim_all)
        changes = ";".join(f"{k}={v}" for k, v in r.changes.items())
        w.writerow([r.variant, changes, "" if r.vim_all is None else repr(r.vim_all),
                    "" if r.vim_followers is None else repr(r.vim_followers), rel])
    return buf.getvalue()
