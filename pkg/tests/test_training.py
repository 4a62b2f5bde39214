import numpy as np
import pytest

from tripod.decoder import ForecastResult, ForecastTrace, rollout
from tripod.diffkernels import Tape, Var
from tripod.synth import generate
from tripod.training import (NumericalError, curriculum_stages, init_params, load_checkpoint, loss,
                             metrics_log_csv, new_state, param_hash, sample_gradient, save_checkpoint, schedule,
                             train)


@pytest.fixture
def tiny(small_cfg):
    cfg = small_cfg.replace(tau_o=4, tau_f=4, omega=2, epochs_per_stage=2, batch_size=2, lr=1e-3,
                            gen_n_samples=4, gen_n_persons=2)
    return cfg, generate(cfg)


def _trace(rng, P=2, T=3, K=4, d=2):
    off, loc, logit = (Var(rng.normal(size=s), requires_grad=True) for s in ((P, T, K, d), (P, T, K, d), (P, T, K)))
    return ForecastResult(off.value, loc.value, 1 / (1 + np.exp(-logit.value)), ["a", "b"],
                          ForecastTrace(off, loc, logit))


def _truth(rng, P=2, T=3, K=4, d=2, p_vis=0.7):
    t = rng.normal(size=(P, T, K, 2 * d + 1))
    t[..., -1] = rng.random((P, T, K)) < p_vis
    return t


def test_loss_matches_numpy_oracle(rng):
    fc, truth = _trace(rng), _truth(rng)
    lb = loss(fc, truth)
    vis = truth[..., -1] > 0.5
    eta = vis.sum()
    se_off = (((fc.offsets - truth[..., :2]) ** 2).sum(-1) * vis).sum()
    se_loc = (((fc.locations - truth[..., 2:4]) ** 2).sum(-1) * vis).sum()
    p = fc.visibility
    bce = -(truth[..., -1] * np.log(p) + (1 - truth[..., -1]) * np.log(1 - p)).sum()
    assert lb.eta == eta
    assert abs(lb.mse_offset - se_off) < 1e-10 and abs(lb.mse_location - se_loc) < 1e-10
    assert abs(lb.bce_visibility - bce) < 1e-9
    assert abs(lb.total - ((se_off + se_loc) / eta + bce)) < 1e-9


def test_loss_all_invisible_is_bce_only(rng):
    fc, truth = _trace(rng), _truth(rng, p_vis=0.0)
    lb = loss(fc, truth)
    assert lb.eta == 0 and lb.total == lb.bce_visibility


def test_invisible_ground_truth_gives_exact_zero_gradient(rng):
    fc, truth = _trace(rng), _truth(rng, p_vis=0.5)
    with Tape() as tape:
        lb = loss(fc, truth)
    tape.backward(lb.total_var)
    hidden = truth[..., -1] == 0
    assert hidden.any()
    assert np.all(fc.trace.offsets.grad[hidden] == 0.0)
    assert np.all(fc.trace.locations.grad[hidden] == 0.0)
    assert np.all(fc.trace.offsets.grad[~hidden] != 0.0)


def test_loss_errors(rng):
    fc = _trace(rng)
    with pytest.raises(ValueError, match="horizon"):
        loss(fc, _truth(rng, T=2))
    fc.trace = None
    with pytest.raises(ValueError):
        loss(fc, _truth(rng))


def test_curriculum_stages():
    assert curriculum_stages(8, 2) == [2, 4, 6, 8]
    assert curriculum_stages(8, 3) == [3, 6, 8]
    assert curriculum_stages(8, 8) == [8] and curriculum_stages(8, 20) == [8]
    assert curriculum_stages(14, 2) == [2, 4, 6, 8, 10, 12, 14]
    with pytest.raises(ValueError):
        curriculum_stages(8, 0)


def test_schedule_and_stage_handoff(tiny):
    cfg, data = tiny
    assert schedule(cfg) == [2, 2, 4, 4]
    state = new_state(cfg, data=data)
    start = param_hash(state.params)
    state = train(data, cfg, state, val=[])
    hashes = state.stage_hashes
    assert [h["horizon"] for h in hashes] == [2, 4]
    assert hashes[0]["start"] == start
    assert hashes[1]["start"] == hashes[0]["end"] != hashes[0]["start"]
    assert hashes[1]["end"] == param_hash(state.params)
    assert state.steps == 8 and [r["horizon"] for r in state.log] == [2, 2, 4, 4]
    lrs = [r["lr"] for r in state.log]
    assert np.allclose(lrs, [cfg.lr * cfg.lr_decay ** (i + 1) for i in range(4)], rtol=1e-15)


def test_checkpoint_roundtrip_and_resume(tiny, tmp_path):
    cfg, data = tiny
    full = train(data, cfg, val=[])
    part = train(data, cfg, val=[], stop_after_epochs=1)
    save_checkpoint(tmp_path / "c.bin", part, cfg)
    state, cfg2 = load_checkpoint(tmp_path / "c.bin")
    assert cfg2 == cfg and param_hash(state.params) == param_hash(part.params)
    assert state.next_epoch == 1 and state.adam.step_count == part.adam.step_count
    resumed = train(data, cfg2, state, val=[])
    assert param_hash(resumed.params) == param_hash(full.params)
    assert [r["loss_total"] for r in resumed.log] == [r["loss_total"] for r in full.log]
    save_checkpoint(tmp_path / "a.bin", full, cfg)
    save_checkpoint(tmp_path / "b.bin", resumed, cfg)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    s = data[0]
    assert np.array_equal(rollout(s, full.params, cfg).locations, rollout(s, resumed.params, cfg).locations)


def test_training_reduces_loss(tiny):
    cfg, data = tiny
    cfg = cfg.replace(omega=4, epochs_per_stage=15)
    state = train(data, cfg, val=[])
    assert state.log[-1]["loss_total"] < state.log[0]["loss_total"]


def test_non_finite_raises(tiny):
    cfg, data = tiny
    params = init_params(cfg, 0, data)
    params.decoder.psi.W.value[0, 0] = np.nan
    with pytest.raises(NumericalError, match=data[0].sample_id):
        sample_gradient(data[0], params, cfg, 2)


def test_metrics_log_csv(tiny):
    cfg, data = tiny
    state = train(data, cfg, val=data[:1])
    lines = metrics_log_csv(state.log, cfg.tau_f).splitlines()
    assert lines[0].split(",")[:6] == ["epoch", "stage", "horizon", "steps", "lr", "loss_total"]
    assert lines[0].endswith("val_vim_4") and len(lines) == 5
    assert all(cell != "" for cell in lines[-1].split(","))
