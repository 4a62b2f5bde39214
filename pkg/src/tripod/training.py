"""Joint visibility-masked loss, curriculum schedule and the optimization loop."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import diffkernels as dk
from .decoder import FeatureNorm, ForecastResult, ModelParams, init_decoder, rollout
from .diffkernels import AdamState, Tape, Var
from .encoder import init_encoder
from .interaction import init_interaction
from .types import SceneSample

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, sample_id: str, what: str = "loss"):
        super().__init__(f"non-finite {what} on sample {sample_id}")
        self.sample_id = sample_id


@dataclass
class LossBreakdown:
    mse_offset: float
    mse_location: float
    bce_visibility: float
    eta: float
    total: float
    total_var: Optional[Var] = None


def loss(forecast: ForecastResult, truth: np.ndarray) -> LossBreakdown:
    """Masked joint loss against ground-truth states ``(P, T, K, 2d + 1)``.

    ``total = (mse_offset + mse_location) / eta + bce_visibility`` where the
    squared errors cover ground-truth-visible joints only, ``eta`` counts those
    joints, and the cross-entropy covers every joint. With ``eta == 0`` only
    the cross-entropy remains.
    """
    if forecast.trace is None:
        raise ValueError("loss needs a forecast produced by rollout (no trace attached)")
    tr = forecast.trace
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape[:3] != tr.logits.shape:
        raise ValueError(f"horizon mismatch: forecast {tr.logits.shape} vs truth {truth.shape[:3]}")
    d = tr.offsets.shape[-1]
    vis = truth[..., -1]
    mask = (vis > 0.5)[..., None]
    mse_off = dk.mse_masked(tr.offsets, truth[..., :d], mask)
    mse_loc = dk.mse_masked(tr.locations, truth[..., d:2 * d], mask)
    bce = dk.bce_logits(tr.logits, vis)
    eta = float(mask.sum())
    if eta > 0:
        total = dk.scale(mse_off + mse_loc, 1.0 / eta) + bce
    else:
        total = dk.scale(mse_off + mse_loc, 0.0) + bce
    return LossBreakdown(float(mse_off.value), float(mse_loc.value), float(bce.value), eta,
                         float(total.value), total)


def curriculum_stages(tau_f: int, omega: int) -> List[int]:
    """Horizons ``omega, 2*omega, ...`` ending exactly at ``tau_f``."""
    if omega < 1:
        raise ValueError("omega must be >= 1")
    if tau_f < 1:
        return []
    stages = list(range(omega, tau_f, omega))
    stages.append(tau_f)
    return stages


def init_params(cfg, seed: int = 0, data: Optional[Sequence[SceneSample]] = None) -> ModelParams:
    """Uniform fan-in initialization; LSTM biases zero except forget gate +1.

    Input scaling is fitted on ``data`` when given, identity otherwise.
    """
    rng = np.random.default_rng(seed)
    encoder = init_encoder(rng, cfg)
    interaction = init_interaction(rng, cfg)
    decoder = init_decoder(rng, cfg, interaction.h2h)
    norm = FeatureNorm.fit(data) if data else FeatureNorm.identity(cfg.d)
    return ModelParams(encoder, interaction, decoder, norm)


def param_hash(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, v in {**params.arrays(), **_norm_arrays(params)}.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _norm_arrays(params: ModelParams) -> Dict[str, np.ndarray]:
    if params.norm is None:
        return {}
    return {"norm.mean": params.norm.mean, "norm.std": params.norm.std}


def sample_gradient(sample: SceneSample, params: ModelParams, cfg, horizon: int):
    """Loss breakdown and gradients (by parameter name) for one sample."""
    named = params.named()
    params.zero_grad()
    with Tape() as tape:
        fc = rollout(sample, params, cfg, horizon, validate=False)
        lb = loss(fc, sample.future_array()[:, :horizon])
    if not np.isfinite(lb.total):
        raise NumericalError(sample.sample_id)
    tape.backward(lb.total_var)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in named.items()}
    if not dk.check_finite(grads.values()):
        raise NumericalError(sample.sample_id, "gradient")
    return lb, grads


@dataclass
class TrainState:
    params: ModelParams
    adam: AdamState
    next_epoch: int = 0
    steps: int = 0
    log: List[dict] = field(default_factory=list)
    stage_hashes: List[dict] = field(default_factory=list)


def new_state(cfg, params: Optional[ModelParams] = None, data: Optional[Sequence[SceneSample]] = None) -> TrainState:
    params = params if params is not None else init_params(cfg, cfg.seed, data)
    return TrainState(params, AdamState(learning_rate=cfg.lr, decay=cfg.lr_decay))


def schedule(cfg) -> List[int]:
    """Horizon trained at each global epoch."""
    return [h for h in curriculum_stages(cfg.tau_f, cfg.omega) for _ in range(cfg.epochs_per_stage)]


def validation_vim(samples: Sequence[SceneSample], params: ModelParams, cfg) -> List[Optional[float]]:
    from .metrics import vim_curve
    if not samples:
        return []
    preds = [rollout(s, params, cfg, cfg.tau_f, validate=False) for s in samples]
    return vim_curve(preds, samples)


def split_validation(dataset: Sequence[SceneSample], fraction: float):
    n_val = int(round(len(dataset) * fraction))
    if n_val == 0:
        return list(dataset), []
    return list(dataset[:-n_val]), list(dataset[-n_val:])


def train(dataset: Sequence[SceneSample], cfg, state: Optional[TrainState] = None,
          val: Optional[Sequence[SceneSample]] = None, stop_after_epochs: Optional[int] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Curriculum training with a fixed epoch budget per stage.

    Stage ``k`` continues from the parameters reached at stage ``k - 1``. The
    learning rate decays by ``cfg.lr_decay`` after every epoch. Sample order is
    drawn from ``(cfg.seed, epoch)`` so an interrupted run resumed from its
    state reproduces the uninterrupted one.
    """
    if val is None:
        dataset, val = split_validation(dataset, cfg.val_fraction)
    state = state if state is not None else new_state(cfg, data=dataset)
    plan = schedule(cfg)
    stages = curriculum_stages(cfg.tau_f, cfg.omega)
    params = state.params
    named = params.named()
    epochs_done = 0
    for epoch in range(state.next_epoch, len(plan)):
        if stop_after_epochs is not None and epochs_done >= stop_after_epochs:
            break
        if cfg.max_steps and state.steps >= cfg.max_steps:
            break
        horizon = plan[epoch]
        stage = stages.index(horizon)
        if epoch % cfg.epochs_per_stage == 0:
            state.stage_hashes.append({"stage": stage, "horizon": horizon, "start": param_hash(params)})
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        sums = np.zeros(4)
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps and state.steps >= cfg.max_steps:
                break
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            acc: Dict[str, np.ndarray] = {}
            for sample in batch:
                lb, grads = sample_gradient(sample, params, cfg, horizon)
                sums += (lb.total, lb.mse_offset, lb.mse_location, lb.bce_visibility)
                count += 1
                for k, g in grads.items():
                    acc[k] = g if k not in acc else acc[k] + g
            scale_ = 1.0 / len(batch)
            acc = {k: g * scale_ for k, g in acc.items()}
            if cfg.grad_clip > 0:
                norm = float(np.sqrt(np.sum([np.sum(g * g) for g in acc.values()])))
                if norm > cfg.grad_clip:
                    acc = {k: g * (cfg.grad_clip / norm) for k, g in acc.items()}
            dk.adam_step(named, acc, state.adam)
            state.steps += 1
        state.adam.decay_learning_rate()
        state.next_epoch = epoch + 1
        epochs_done += 1
        if (epoch + 1) % cfg.epochs_per_stage == 0 or epoch + 1 == len(plan):
            state.stage_hashes[-1]["end"] = param_hash(params)
        mean_terms = sums / max(count, 1)
        row = {"epoch": epoch, "stage": stage, "horizon": horizon, "steps": state.steps,
               "lr": state.adam.learning_rate, "loss_total": mean_terms[0], "mse_offset": mean_terms[1],
               "mse_location": mean_terms[2], "bce_visibility": mean_terms[3]}
        curve = validation_vim(val, params, cfg)
        for i in range(cfg.tau_f):
            row[f"val_vim_{i + 1}"] = curve[i] if i < len(curve) else None
        state.log.append(row)
        log.info("epoch %d stage %d horizon %d loss %.6g", epoch, stage, horizon, mean_terms[0])
        if on_epoch is not None:
            on_epoch(row)
    return state


# ---------------------------------------------------------------- checkpoints

METRIC_LOG_FIXED = ("epoch", "stage", "horizon", "steps", "lr", "loss_total", "mse_offset", "mse_location",
                    "bce_visibility")


def save_checkpoint(path, state: TrainState, cfg) -> None:
    """Parameters, Adam moments and schedule position in one array record."""
    arrays = {f"param/{k}": v for k, v in state.params.arrays().items()}
    arrays.update({f"param/{k}": v for k, v in _norm_arrays(state.params).items()})
    for k in state.params.named():
        if k in state.adam.first_moment:
            arrays[f"adam_m/{k}"] = state.adam.first_moment[k]
            arrays[f"adam_v/{k}"] = state.adam.second_moment[k]
    a = state.adam
    meta = {"config": cfg.to_dict(), "next_epoch": state.next_epoch, "steps": state.steps,
            "stage_index": state.log[-1]["stage"] if state.log else 0,
            "adam": {"learning_rate": a.learning_rate, "decay": a.decay, "beta1": a.beta1, "beta2": a.beta2,
                     "epsilon": a.epsilon, "step_count": a.step_count},
            "stage_hashes": state.stage_hashes, "log": state.log}
    dk.save_arrays(path, arrays, meta)


def load_checkpoint(path):
    """Return ``(state, cfg)`` from a checkpoint written by :func:`save_checkpoint`."""
    from .config import from_dict
    arrays, meta = dk.load_arrays(path)
    cfg = from_dict(meta["config"])
    params = init_params(cfg, cfg.seed)
    stored = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    params.load_arrays(stored)
    if "norm.mean" in stored:
        params.norm = FeatureNorm(stored["norm.mean"], stored["norm.std"])
    a = meta["adam"]
    adam = AdamState(a["learning_rate"], a["decay"], a["beta1"], a["beta2"], a["epsilon"], a["step_count"])
    for k, v in arrays.items():
        if k.startswith("adam_m/"):
            adam.first_moment[k[len("adam_m/"):]] = v
        elif k.startswith("adam_v/"):
            adam.second_moment[k[len("adam_v/"):]] = v
    state = TrainState(params, adam, meta["next_epoch"], meta["steps"], meta["log"], meta["stage_hashes"])
    return state, cfg


def zero_params(params: ModelParams) -> None:
    """Zero every learnable array (input scaling is kept)."""
    for v in params.named().values():
        v.value = np.zeros_like(v.value)


def metrics_log_csv(rows: Sequence[dict], tau_f: int) -> str:
    import csv
    import io
    cols = list(METRIC_LOG_FIXED) + [f"val_vim_{i + 1}" for i in range(tau_f)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(float(r[c])) if isinstance(r[c], float) else r[c])
                    for c in cols])
    return buf.getvalue()
