"""Finite-difference verification of every differentiable operation and the full model."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Tuple

import numpy as np

from . import diffkernels as dk
from .diffkernels import GradCheckReport, Var, grad_check
from .graph_attn import gat_layer, init_gat

TOY_DIMS = dict(K=3, d=2, tau_o=4, tau_f=4, hidden=6, heads=3, node_dim=6, joint_embed_dim=4, visual_dim=5,
                n_classes=3, object_widths=[7, 6], context_dim=4, context_widths=[5, 6], mp_iterations=3,
                gen_n_persons=2, gen_n_objects=2, gen_n_samples=1, gen_motion="sinusoidal-limb",
                gen_occlusion="deterministic-window", gen_occlusion_joints=[1], gen_occlusion_window=[2, 5],
                gen_context=True)


def toy_config(cfg):
    """The 2-person, K=3, d=2, 4+4-frame toy setup, keeping ``cfg``'s ablation flags."""
    return cfg.replace(**TOY_DIMS)


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport


def _elementwise(fn):
    return lambda x: dk.sum(dk.mul(fn(x), Var(np.linspace(-1.0, 1.5, x.value.size).reshape(x.shape))))


def _cases(cfg, rng: np.random.Generator) -> Iterator[Tuple[str, Callable, Dict[str, np.ndarray], dict]]:
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    w = lambda shape: Var(rng.normal(size=shape))  # noqa: E731

    yield "affine", (lambda x, W, b: dk.sum(dk.tanh(dk.affine(x, W, b)))), \
        {"x": r(3, 4), "W": r(4, 2), "b": r(2)}, {}
    yield "tanh", _elementwise(dk.tanh), {"x": r(4, 3)}, {}
    yield "sigmoid", _elementwise(dk.sigmoid), {"x": r(4, 3)}, {}
    # keep inputs away from the kink at 0
    x = r(4, 3)
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    yield "leaky_relu", _elementwise(dk.leaky_relu), {"x": x}, {}
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    wts = w((3, 5))
    yield "masked_softmax", (lambda z: dk.sum(dk.mul(dk.masked_softmax(z, mask), wts))), {"z": r(3, 5)}, {}
    H = 4
    yield "lstm_cell", (lambda x, h, c, W, b: dk.sum(dk.mul(dk.concat(list(dk.lstm_cell(x, h, c, W, b))),
                                                             Var(np.linspace(-1, 1, 2 * H)))) ), \
        {"x": r(3), "h": r(H), "c": r(H), "W": r(3 + H, 4 * H) * 0.5, "b": r(4 * H) * 0.5}, {}
    target = r(3, 4)
    mmask = rng.random((3, 4)) < 0.5
    yield "mse_masked", (lambda p: dk.mse_masked(p, target, mmask)), {"p": r(3, 4)}, {}
    t = (rng.random((3, 4)) < 0.5).astype(float)
    yield "bce_logits", (lambda z: dk.bce_logits(z, t)), {"z": r(3, 4)}, {}

    gat = init_gat(rng, 4, 2, 3, "concat")
    gmask = rng.random((5, 5)) < 0.5
    gmask[np.arange(5), np.arange(5)] = True
    probe = w((5, 6))

    def gat_fn(x, W, a):
        gat.W, gat.a = W, a
        return dk.sum(dk.mul(gat_layer(x, gmask, gat), probe))

    yield "gat_layer", gat_fn, {"x": r(5, 4), "W": gat.W.value, "a": gat.a.value}, {}

    yield from _model_cases(cfg, rng)


def _model_cases(cfg, rng):
    from .encoder import encode_history
    from .decoder import rollout
    from .interaction import Flags, message_passing
    from .synth import generate
    from .training import init_params, loss

    toy = toy_config(cfg)
    sample = generate(toy)[0]
    params = init_params(toy, seed=int(rng.integers(1 << 30)), data=[sample])
    named = params.named()
    # zero biases map zero-filled (invisible) joints onto identical nodes whose
    # attention logits sit exactly on the LeakyReLU kink; nudge every bias off it
    for k, v in named.items():
        if k.endswith(".b"):
            v.value = v.value + rng.normal(0.0, 0.1, size=v.shape)
    obs = sample.observed_array()

    probe = Var(rng.normal(size=toy.hidden))

    def history_fn(observed):
        enc = encode_history(observed, params.encoder, toy.pose_graph)
        return dk.sum(dk.mul(enc.Z, probe))

    yield "encode_history(track)", history_fn, {"observed": obs}, {}

    objects = Var(rng.normal(size=(2, toy.hidden)) * 0.5)
    flags = Flags.from_config(toy)

    def mp_fn(Z, h2o_W, h2h_W):
        params.interaction.h2o.W, params.interaction.h2h.W = h2o_W, h2h_W
        return dk.sum(dk.mul(message_passing(Z, objects, params.interaction, flags), probe))

    yield "message_passing(N=3)", mp_fn, {"Z": rng.normal(size=(2, toy.hidden)) * 0.5,
                                           "h2o_W": params.interaction.h2o.W.value,
                                           "h2h_W": params.interaction.h2h.W.value}, {}

    names = list(named)

    # rollout reads parameter Vars from the params tree, so the checked Vars are bound in and out
    def model_fn_vars(**vars_):
        try:
            _bind(params, vars_)
            fc = rollout(sample, params, toy, toy.tau_f, validate=False)
            return loss(fc, sample.future_array()).total_var
        finally:
            _bind(params, {k: named[k] for k in names})

    yield "model(encode->message_pass->decode->loss)", model_fn_vars, \
        {k: v.value.copy() for k, v in named.items()}, {"max_coords": 6}


def _bind(params, vars_: Dict[str, Var]) -> None:
    """Point every parameter slot of ``params`` at the given Vars (by name)."""
    enc, inter, dec = params.encoder, params.interaction, params.decoder
    enc.joint_embed.W, enc.joint_embed.b = vars_["enc.joint_embed.W"], vars_["enc.joint_embed.b"]
    enc.pose_gat.W, enc.pose_gat.a = vars_["enc.pose_gat.W"], vars_["enc.pose_gat.a"]
    enc.lstm.W, enc.lstm.b = vars_["enc.lstm.W"], vars_["enc.lstm.b"]
    for i, layer in enumerate(enc.object_mlp):
        layer.W, layer.b = vars_[f"enc.object_mlp.{i}.W"], vars_[f"enc.object_mlp.{i}.b"]
    for i, layer in enumerate(enc.context_mlp):
        layer.W, layer.b = vars_[f"enc.context_mlp.{i}.W"], vars_[f"enc.context_mlp.{i}.b"]
    inter.h2o.W, inter.h2o.a = vars_["int.h2o.W"], vars_["int.h2o.a"]
    inter.h2h.W, inter.h2h.a = vars_["int.h2h.W"], vars_["int.h2h.a"]
    dec.lstm.W, dec.lstm.b = vars_["dec.lstm.W"], vars_["dec.lstm.b"]
    dec.psi.W, dec.psi.b = vars_["dec.psi.W"], vars_["dec.psi.b"]


@contextlib.contextmanager
def injected_bug():
    """Temporarily give ``tanh`` a wrong adjoint (negative control)."""
    original = dk.tanh

    def bad_tanh(x):
        y = np.tanh(x.value)
        return dk._record(y, (x,), lambda g: (g * (1.0 - y),))

    dk.tanh = bad_tanh
    try:
        yield
    finally:
        dk.tanh = original


def run_suite(cfg, tolerance: float = 1e-4, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs, opts in _cases(cfg, rng):
        results.append(CheckResult(name, grad_check(fn, inputs, tolerance, rng=rng, **opts)))
    return results


def format_report(results: List[CheckResult]) -> str:
    lines = []
    for r in results:
        worst_name, worst = r.report.worst
        status = "PASS" if r.report.passed else "FAIL"
        lines.append(f"{status} {r.name}: max rel err {worst:.3e} (worst input {worst_name}, "
                     f"tol {r.report.tolerance:g})")
    ok = all(r.report.passed for r in results)
    lines.append(f"{'PASS' if ok else 'FAIL'} all {len(results)} checks")
    return "\n".join(lines)
