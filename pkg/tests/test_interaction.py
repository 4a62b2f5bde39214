import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripod import diffkernels as dk
from tripod.diffkernels import Var, grad_check
from tripod.graph_attn import bipartite_mask, dense_mask, gat_layer
from tripod.interaction import AttentionLog, Flags, h2h_step, h2o_step, init_interaction, message_passing

from test_graph_attn import per_edge_oracle


@pytest.fixture
def params(small_cfg, rng):
    return init_interaction(rng, small_cfg)


def feats(rng, n, width=12, scale=0.5):
    return Var(rng.normal(size=(n, width)) * scale)


def test_h2o_without_objects_is_self_projection(params, rng):
    Z = feats(rng, 3)
    out = h2o_step(Z, Var(np.zeros((0, 12))), params).value
    assert np.allclose(out, Z.value @ params.h2o.W.value.reshape(12, 3, 12).mean(axis=1), rtol=0, atol=1e-14)


def test_h2o_zero_person_matches_oracle(params, rng):
    Z = Var(np.zeros((2, 12)))
    O = feats(rng, 3)
    out = h2o_step(Z, O, params).value
    nodes = np.concatenate([Z.value, O.value])
    heads = per_edge_oracle(nodes, bipartite_mask(2, 3), params.h2o.W.value, params.h2o.a.value, 3)
    assert np.max(np.abs(out - np.mean(heads, axis=0)[:2])) < 1e-10


def test_h2o_object_order_invariance(params, rng):
    Z, O = feats(rng, 2), feats(rng, 4)
    perm = [2, 0, 3, 1]
    a = h2o_step(Z, O, params).value
    b = h2o_step(Z, Var(O.value[perm]), params).value
    assert np.max(np.abs(a - b)) <= 1e-12


def test_h2h_cases(params, rng):
    one = feats(rng, 1)
    assert np.allclose(h2h_step(one, params).value,
                       one.value @ params.h2h.W.value.reshape(12, 3, 12).mean(axis=1), rtol=0, atol=1e-14)
    twin = Var(np.tile(rng.normal(size=12), (2, 1)))
    out = h2h_step(twin, params).value
    assert np.array_equal(out[0], out[1])
    Z = feats(rng, 4)
    heads = per_edge_oracle(Z.value, dense_mask(4), params.h2h.W.value, params.h2h.a.value, 3)
    assert np.max(np.abs(h2h_step(Z, params).value - np.mean(heads, axis=0))) < 1e-10


def test_message_passing_zero_and_one_iteration(params, rng):
    Z, O = feats(rng, 3), feats(rng, 2)
    params.iterations = 0
    assert np.array_equal(message_passing(Z, O, params).value, Z.value)
    params.iterations = 1
    msg = h2h_step(h2o_step(Z, O, params), params).value
    assert np.max(np.abs(message_passing(Z, O, params).value - (Z.value + msg) / 2)) < 1e-15


def test_objects_bit_unchanged(params, rng):
    Z, O = feats(rng, 3), feats(rng, 2)
    before = O.value.copy()
    log = AttentionLog()
    message_passing(Z, O, params, log=log)
    assert np.array_equal(O.value, before)
    # the object rows of the H2O layer output are the inputs themselves
    nodes = dk.concat([Z, O], axis=0)
    out = gat_layer(nodes, bipartite_mask(3, 2), params.h2o).value
    assert np.array_equal(out[3:], O.value)
    assert len(log.h2o) == 3 and len(log.h2h) == 3


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_permutation_properties(n_p, n_o, seed):
    r = np.random.default_rng(seed)
    from tripod.config import Config
    p = init_interaction(r, Config(hidden=6, object_widths=[6], context_widths=[6]))
    Z, O = Var(r.normal(size=(n_p, 6))), Var(r.normal(size=(n_o, 6)))
    base = message_passing(Z, O, p).value
    pp, po = r.permutation(n_p), r.permutation(n_o)
    assert np.max(np.abs(message_passing(Var(Z.value[pp]), O, p).value - base[pp]), initial=0) <= 1e-12
    assert np.max(np.abs(message_passing(Z, Var(O.value[po]), p).value - base), initial=0) <= 1e-12


def test_monotone_reach_on_chain(params, rng):
    """On the path 0-1-2, person 2 reaches person 0 only after two iterations."""
    chain = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], bool)
    Z = feats(rng, 3)
    Z2 = Var(Z.value.copy())
    Z2.value[2] += 1.0
    no_obj = Var(np.zeros((0, 12)))
    flags = Flags(use_h2o=False)
    for n, changes in ((1, False), (2, True)):
        params.iterations = n
        a = message_passing(Z, no_obj, params, flags, h2h_mask=chain).value[0]
        b = message_passing(Z2, no_obj, params, flags, h2h_mask=chain).value[0]
        assert (np.max(np.abs(a - b)) > 1e-6) == changes


def test_flags(params, rng):
    Z, O = feats(rng, 2), feats(rng, 2)
    assert np.array_equal(message_passing(Z, O, params, Flags(False, False, True)).value, Z.value)
    single = message_passing(Z, O, params, Flags(True, True, False)).value
    assert np.array_equal(single, h2h_step(h2o_step(Z, O, params), params).value)
    only_h2h = message_passing(Z, O, params, Flags(False, True, False)).value
    assert np.array_equal(only_h2h, h2h_step(Z, params).value)
    assert np.array_equal(message_passing(Z, O, params, Flags(False, False, False)).value, Z.value)


def test_gradients_through_three_iterations(params, rng):
    O = feats(rng, 2)
    probe = Var(rng.normal(size=(3, 12)))

    def f(Z, W, a):
        params.h2h.W, params.h2h.a = W, a
        return dk.sum(dk.mul(message_passing(Z, O, params), probe))

    rep = grad_check(f, {"Z": rng.normal(size=(3, 12)) * 0.5, "W": params.h2h.W.value.copy(),
                         "a": params.h2h.a.value.copy()})
    assert rep.passed, rep.errors
