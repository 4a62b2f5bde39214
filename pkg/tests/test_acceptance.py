"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import csv
import json
import time

import numpy as np
import pytest

from tripod import metrics
from tripod.cli import main
from tripod.config import Config, load_config
from tripod.decoder import future_social_refine, rollout
from tripod.diffkernels import Tape, Var
from tripod.encoder import encode_pose_graph, init_encoder
from tripod.experiments import ABLATIONS, ablation, ablation_csv, benchmark, held_out_split
from tripod.gradcheck import run_suite
from tripod.interaction import h2h_step, h2o_step, init_interaction, message_passing
from tripod.synth import generate
from tripod.training import curriculum_stages, init_params, loss, new_state, param_hash, sample_gradient, train

from test_metrics import confusion_oracle, vam_bruteforce, vim_loop


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[acceptance {number:2d}] {'PASS' if ok else 'FAIL'}  {title}  {detail}")
        assert ok, f"criterion {number} failed: {detail}"
    return emit


@pytest.fixture(scope="module")
def bench():
    cfg = load_config("accept-bench")
    train_set, test_set = generate(cfg), held_out_split(cfg)
    t0 = time.perf_counter()
    result, state = benchmark(cfg, train_set, test_set)
    return cfg, train_set, test_set, result, state, time.perf_counter() - t0


def test_01_gradient_integrity(verdict):
    t0 = time.perf_counter()
    results = run_suite(Config(), tolerance=1e-4)
    elapsed = time.perf_counter() - t0
    names = [r.name for r in results]
    worst = max(r.report.worst[1] for r in results)
    ok = all(r.report.passed for r in results) and elapsed < 60 and any("model" in n for n in names)
    verdict(1, "gradient check", ok, f"{len(results)} checks, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_02_metric_oracles(verdict):
    rng = np.random.default_rng(11)
    vam_err = vim_err = 0.0
    iou_exact = True
    for _ in range(1000):
        P, K, d = int(rng.integers(1, 5)), int(rng.integers(1, 7)), int(rng.integers(2, 4))
        pl, tl = rng.normal(scale=150.0, size=(2, P, K, d))
        pv, tv = rng.random((2, P, K)) < rng.random()
        vam_err = max(vam_err, abs(metrics.vam_frame(pl, pv, tl, tv, 200.0)
                                   - vam_bruteforce(pl.tolist(), pv.tolist(), tl.tolist(), tv.tolist(), 200.0)))
        got, ref = metrics.vim_frame(pl, tl, tv)[0], vim_loop(pl.tolist(), tl.tolist(), tv.tolist())
        if ref is not None:
            vim_err = max(vim_err, abs(got - ref))
        bp, bt = rng.random((2, P, 5, K)) < 0.6
        iou_exact &= metrics.visibility_scores(bp, bt) == confusion_oracle(bp, bt)
    ok = vam_err <= 1e-9 and vim_err <= 1e-12 and iou_exact
    verdict(2, "metric oracle equivalence", ok, f"vam {vam_err:.1e}, vim {vim_err:.1e}, iou/f1 exact {iou_exact}")


def test_03_metric_edges(verdict):
    both_empty = metrics.vam_pair(None, None, 200.0)
    one_empty = metrics.vam_pair(np.zeros(2), None, 200.0)
    vim_none = metrics.vim_frame(np.ones((2, 4, 2)), np.zeros((2, 4, 2)), np.zeros((2, 4), bool))[0]
    ok = both_empty == 0.0 and one_empty == 200.0 and vim_none is None
    verdict(3, "metric edge values", ok, f"({both_empty}, {one_empty}, {vim_none})")


def test_04_overfit(verdict):
    cfg = load_config("toy-overfit")
    data = generate(cfg)
    assert len(data) == 1 and len(data[0].persons) == 2 and (data[0].K, data[0].d) == (13, 2)
    state = new_state(cfg, data=data)
    before = sample_gradient(data[0], state.params, cfg, cfg.tau_f)[0].total
    t0 = time.perf_counter()
    state = train(data, cfg, state, val=[])
    elapsed = time.perf_counter() - t0
    after = sample_gradient(data[0], state.params, cfg, cfg.tau_f)[0].total
    ratio = before / after
    ok = ratio >= 100 and state.steps <= 2000 and elapsed < 300
    verdict(4, "overfit sanity", ok, f"loss {before:.4g} -> {after:.4g} ({ratio:.0f}x) in {state.steps} steps, "
                                     f"{elapsed:.0f}s")


def test_05_synthetic_benchmark(verdict, bench):
    cfg, train_set, test_set, result, _, elapsed = bench
    s = result.scores
    model, zv, cv = s["model"], s["zero_velocity"], s["constant_velocity"]
    ok = (len(train_set) == 200 and model["all"] < zv["all"] and model["all"] <= 1.5 * cv["all"]
          and model["followers"] < cv["followers"] and elapsed < 1200)
    verdict(5, "synthetic benchmark", ok,
            f"VIM all: model {model['all']:.3f} zv {zv['all']:.3f} cv {cv['all']:.3f}; followers: model "
            f"{model['followers']:.3f} cv {cv['followers']:.3f}; {elapsed:.0f}s")


def test_06_visibility_forecasting(verdict):
    cfg = load_config("accept-vis")
    state = train(generate(cfg), cfg, val=[])
    test_set = held_out_split(cfg)
    preds = [rollout(s, state.params, cfg) for s in test_set]
    rep = metrics.report(preds, test_set, horizons_ms=cfg.horizons_ms, filtered=True)
    ious = rep.column("iou")
    final = ious[-1]
    ok = final is not None and final >= 0.9
    shown = ", ".join("-" if v is None else f"{v:.3f}" for v in ious)
    verdict(6, "visibility forecasting", ok, f"filtered IoU per horizon [{shown}]")


def test_07_curriculum(verdict, small_cfg):
    stages = curriculum_stages(8, 2)
    cfg = small_cfg.replace(tau_o=4, tau_f=8, omega=2, epochs_per_stage=1, gen_n_samples=2)
    data = generate(cfg)
    state = new_state(cfg, data=data)
    h0 = param_hash(state.params)
    state = train(data, cfg, state, val=[])
    hs = state.stage_hashes
    chained = hs[0]["start"] == h0 and all(a["end"] == b["start"] for a, b in zip(hs, hs[1:]))
    ok = stages == [2, 4, 6, 8] and [h["horizon"] for h in hs] == stages and chained \
        and hs[-1]["end"] == param_hash(state.params)
    verdict(7, "curriculum schedule", ok, f"stages {stages}, hash chain intact {chained}")


def test_08_structural_invariants(verdict, small_cfg):
    rng = np.random.default_rng(5)
    H = small_cfg.hidden
    enc = init_encoder(rng, small_cfg)
    inter = init_interaction(rng, small_cfg)
    worst = 0.0
    pose = rng.normal(size=(13, 5))
    perm = rng.permutation(13)
    worst = max(worst, np.abs(encode_pose_graph(pose[perm], enc).value - encode_pose_graph(pose, enc).value[perm]).max())
    Z, O = rng.normal(size=(4, H)), rng.normal(size=(3, H))
    pp, po = rng.permutation(4), rng.permutation(3)
    for fn in (lambda z, o: h2o_step(Var(z), Var(o), inter), lambda z, o: h2h_step(Var(z), inter),
               lambda z, o: message_passing(Var(z), Var(o), inter)):
        base = fn(Z, O).value
        worst = max(worst, np.abs(fn(Z[pp], O).value - base[pp]).max(), np.abs(fn(Z, O[po]).value - base).max())
    params = init_params(small_cfg, 0)
    worst = max(worst, np.abs(future_social_refine(Var(Z[pp]), params.decoder).value
                              - future_social_refine(Var(Z), params.decoder).value[pp]).max())

    O_var = Var(O.copy())
    message_passing(Var(Z), O_var, inter)
    objects_same = np.array_equal(O_var.value, O)

    sample = generate(small_cfg.replace(gen_occlusion="deterministic-window", gen_occlusion_joints=[0, 4]))[0]
    with Tape() as tape:
        fc = rollout(sample, params, small_cfg)
        lb = loss(fc, sample.future_array())
    for v in (fc.trace.offsets, fc.trace.locations):
        v.requires_grad = True
    tape.backward(lb.total_var)
    hidden = sample.future_array()[..., -1] == 0
    zero_grad = bool(hidden.any()) and all(np.all(v.grad[hidden] == 0.0)
                                           for v in (fc.trace.offsets, fc.trace.locations))
    loc = sample.observed_array()[:, -1, :, 2:4].copy()
    telescoping = True
    for t in range(small_cfg.tau_f):
        loc = loc + fc.offsets[:, t]
        telescoping &= np.array_equal(loc, fc.locations[:, t])
    ok = worst <= 1e-12 and objects_same and telescoping and zero_grad
    verdict(8, "structural invariants", ok, f"equivariance {worst:.1e}, objects unchanged {objects_same}, "
                                            f"telescoping {telescoping}, masked grad zero {zero_grad}")


def test_09_ablation(verdict, bench, tmp_path, capsys):
    cfg, train_set, test_set, _, state, _ = bench
    rows = ablation(cfg, ["full", "no_future_h2h"], train_set, test_set, trained={"full": state})
    full, without = rows
    rel = (full.vim_all - without.vim_all) / without.vim_all
    small = tmp_path / "ablate.json"
    small.write_text(json.dumps({**json.loads(json.dumps(load_config("accept-bench").to_dict())),
                                 "gen_n_samples": 16, "epochs_per_stage": 1}))
    code = main(["ablate", "--config", str(small), "--out", str(tmp_path / "ablation.csv")])
    report_rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    produced = code == 0 and [r["variant"] for r in report_rows] == list(ABLATIONS)
    direction = "improves" if rel < 0 else "worsens"
    with capsys.disabled():
        print("\n" + ablation_csv(rows), end="")
    ok = rel <= 0.05 and produced
    verdict(9, "ablation sanity", ok, f"future refinement {direction} final VIM by {abs(rel) * 100:.1f}% "
                                      f"({full.vim_all:.3f} vs {without.vim_all:.3f}); report rows "
                                      f"{len(report_rows)}")


def _pipeline(root, cfg_path):
    root.mkdir()
    data, ckpt, pred, out = (str(root / n) for n in ("data.jsonl", "model.bin", "pred.jsonl", "metrics.csv"))
    assert main(["gen", "--config", cfg_path, "--out", data]) == 0
    assert main(["train", "--config", cfg_path, "--data", data, "--checkpoint", ckpt]) == 0
    assert main(["predict", "--checkpoint", ckpt, "--data", data, "--out", pred]) == 0
    assert main(["eval", "--pred", pred, "--truth", data, "--out", out]) == 0
    return {n: (root / n).read_bytes() for n in ("data.jsonl", "model.bin", "pred.jsonl", "metrics.csv",
                                               "model.metrics.csv")}


def test_10_determinism(verdict, tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"hidden": 16, "node_dim": 12, "joint_embed_dim": 8, "visual_dim": 8,
                                    "n_classes": 4, "object_widths": [16], "context_dim": 4,
                                    "context_widths": [16], "gen_n_samples": 6, "gen_n_persons": 3,
                                    "gen_motion": "follower", "gen_context": True, "epochs_per_stage": 1,
                                    "batch_size": 2, "lr": 1e-3}))
    a = _pipeline(tmp_path / "a", str(cfg_path))
    b = _pipeline(tmp_path / "b", str(cfg_path))
    capsys.readouterr()
    same = [n for n in a if a[n] == b[n]]
    verdict(10, "determinism", len(same) == len(a), f"identical artifacts: {', '.join(same)}")
