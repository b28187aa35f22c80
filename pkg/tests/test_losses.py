from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hmoe import numkernel as nk
from hmoe.errors import NumericError, StatError
from hmoe.losses import (
    GroupLoadStats,
    LoadStats,
    LossWeights,
    expert_stats,
    group_stats,
    layer_losses,
    load_balance_loss,
    load_bias_loss,
    total_loss,
    z_loss,
)
from hmoe.numkernel import Param, Tape, Tensor, finite_diff_check
from hmoe.routing import Modality, route_flat, route_hierarchical

A, V, AV = Modality.AUDIO, Modality.VIDEO, Modality.AV


def stats(f, P) -> LoadStats:
    return LoadStats(f=np.asarray(f, dtype=float), P=Tensor(np.asarray(P, dtype=float)), n_tokens=1)


def gstats(gA=None, QA=None, gV=None, QV=None) -> GroupLoadStats:
    g = {A: None if gA is None else np.asarray(gA, float), V: None if gV is None else np.asarray(gV, float)}
    Q = {A: None if QA is None else Tensor(np.asarray(QA, float)), V: None if QV is None else Tensor(np.asarray(QV, float))}
    return GroupLoadStats(g=g, Q=Q, sizes={A: 0 if gA is None else 1, V: 0 if gV is None else 1})


prob_rows = st.tuples(st.integers(1, 8), st.integers(1, 6)).flatmap(
    lambda shape: arrays(np.float64, shape, elements=st.floats(-8, 8))
).map(lambda h: nk.softmax(h, axis=-1).data)


# --- expert statistics ---------------------------------------------------------


def test_expert_stats_examples():
    s = expert_stats(Tensor(np.tile([0.1, 0.1, 0.7, 0.1], (4, 1))))
    assert s.f.tolist() == [0, 0, 1, 0]
    s = expert_stats(Tensor(np.full((3, 4), 0.25)))
    np.testing.assert_array_equal(s.P.data, np.full(4, 0.25))
    s = expert_stats(Tensor(np.array([[0.7, 0.3], [0.2, 0.8]])))
    assert s.f.tolist() == [0.5, 0.5]
    np.testing.assert_allclose(s.P.data, [0.45, 0.55], atol=1e-15)


def test_expert_stats_empty():
    with pytest.raises(StatError):
        expert_stats(Tensor(np.zeros((0, 4))))


@given(prob_rows)
def test_expert_stats_are_distributions(p):
    s = expert_stats(Tensor(p))
    assert (s.f >= 0).all() and (s.P.data >= 0).all()
    assert abs(s.f.sum() - 1) < 1e-12 and abs(s.P.data.sum() - 1) < 1e-12


# --- load balance --------------------------------------------------------------


def test_load_balance_examples():
    assert load_balance_loss(stats([0.25] * 4, [0.25] * 4)).item() == 1.0
    assert load_balance_loss(stats([1, 0, 0, 0], [1, 0, 0, 0])).item() == 4.0
    u = stats([0.25] * 4, [0.25] * 4)
    assert load_balance_loss([u, u]).item() == 2.0


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0, 10)))
def test_load_balance_at_least_one_on_diagonal(w):
    if w.sum() <= 0:
        w = np.ones_like(w)
    p = w / w.sum()
    lb = load_balance_loss(stats(p, p)).item()
    assert lb >= 1 - 1e-12
    if np.allclose(p, p[0]):
        assert lb == pytest.approx(1.0, abs=1e-12)


def test_load_balance_gradient_flows_through_P_only():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    w = Param(rng.normal(size=(3, 4)), "w")

    def f():
        probs = nk.softmax(nk.matmul(x, w), axis=-1)
        return load_balance_loss(expert_stats(probs)), probs.data.argmax(-1).tobytes()

    rep = finite_diff_check(f, [w], tolerance=1e-6)
    assert rep.passed and not rep.skipped
    # analytic: dL/dP = n * f, so the gradient equals that of n * sum(f * P) with f frozen
    f_frozen = np.bincount((x @ w.data).argmax(-1), minlength=4) / 6
    w.zero_grad()
    with Tape() as tape:
        loss = nk.mul(nk.sum(nk.mul(nk.mean(nk.softmax(nk.matmul(x, w), axis=-1), axis=0), f_frozen)), 4.0)
    tape.backward(loss)
    g_ref = w.grad.copy()
    w.zero_grad()
    with Tape() as tape:
        loss = load_balance_loss(expert_stats(nk.softmax(nk.matmul(x, w), axis=-1)))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, g_ref, rtol=1e-14, atol=1e-16)


# --- z-loss --------------------------------------------------------------------


def test_z_loss_examples():
    assert z_loss(Tensor(np.zeros((3, 4)))).item() == pytest.approx(math.log(4) ** 2, abs=1e-15)
    assert z_loss(Tensor(np.zeros((3, 4)))).item() == pytest.approx(1.921812, abs=1e-6)
    h = np.array([[0.3, -1.2, 2.0]])
    assert z_loss(Tensor(h - np.log(np.exp(h).sum()))).item() == pytest.approx(0.0, abs=1e-28)
    # one-logit rows make logsumexp equal the logit itself
    assert z_loss(Tensor(np.array([[1.0], [3.0]]))).item() == pytest.approx(5.0, abs=1e-15)


def test_z_loss_sums_over_routers_and_rejects_empty():
    a, b = Tensor(np.zeros((2, 4))), Tensor(np.zeros((5, 2)))
    assert z_loss([a, b]).item() == pytest.approx(math.log(4) ** 2 + math.log(2) ** 2, abs=1e-14)
    with pytest.raises(StatError):
        z_loss(Tensor(np.zeros((0, 4))))


@given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10)))
def test_z_loss_zero_iff_normalized(h):
    assert z_loss(Tensor(h)).item() >= 0
    lse = np.log(np.exp(h).sum(-1, keepdims=True))
    assert z_loss(Tensor(h - lse)).item() < 1e-24


# --- group statistics and load biasing ------------------------------------------


def test_group_stats_examples():
    gs = group_stats(Tensor(np.array([[0.9, 0.1], [0.9, 0.1]])), [A, A])
    assert gs.g[A].tolist() == [1, 0]
    np.testing.assert_allclose(gs.Q[A].data, [0.9, 0.1], atol=1e-15)
    assert gs.empty(V)
    assert group_stats(Tensor(np.array([[0.5, 0.5]])), [V]).g[V].tolist() == [1, 0]
    gs = group_stats(Tensor(np.array([[0.8, 0.2], [0.4, 0.6]])), [A, A])
    assert gs.g[A].tolist() == [0.5, 0.5]
    np.testing.assert_allclose(gs.Q[A].data, [0.6, 0.4], atol=1e-15)


def test_group_stats_exclude_av_tokens():
    q = Tensor(np.array([[0.9, 0.1], [0.1, 0.9], [0.3, 0.7]]))
    gs = group_stats(q, [A, AV, V])
    assert gs.sizes == {A: 1, V: 1}
    np.testing.assert_allclose(gs.Q[V].data, [0.3, 0.7])


def test_load_bias_examples():
    assert load_bias_loss(gstats([1, 0], [1, 0], [0, 1], [0, 1])).item() == 0.0
    assert load_bias_loss(gstats()).item() == 0.0
    v = load_bias_loss(gstats([1, 0], [0.9, 0.1], [0.5, 0.5], [0.4, 0.6])).item()
    assert v == pytest.approx(0.8, abs=1e-15)


def test_load_bias_all_av_batch_is_zero():
    gs = group_stats(Tensor(np.array([[0.2, 0.8], [0.6, 0.4]])), [AV, AV])
    assert load_bias_loss(gs).item() == 0.0


@given(arrays(np.float64, (6, 2), elements=st.floats(-6, 6)), st.lists(st.sampled_from([0, 1, 2]), min_size=6, max_size=6))
def test_load_bias_in_range(u, tags):
    ls = load_bias_loss(group_stats(nk.softmax(Tensor(u), axis=-1), tags)).item()
    assert 0.0 <= ls <= 2.0


@given(st.floats(0.01, 1.0), st.floats(0.0, 0.98), st.floats(0.001, 0.02))
def test_load_bias_decreasing_in_audio_mass(g, q, dq):
    lo = load_bias_loss(gstats([g, 1 - g], [q, 1 - q])).item()
    hi = load_bias_loss(gstats([g, 1 - g], [q + dq, 1 - q - dq])).item()
    assert hi < lo


def test_load_bias_gradient_flows_through_Q_only():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 3))
    tags = np.array([A, A, A, V, V, AV, V, A])
    inter = Param(rng.normal(size=(3, 2)), "inter")
    intras = [Param(rng.normal(size=(3, 2)), "a"), Param(rng.normal(size=(3, 2)), "v")]

    def f():
        sel = route_hierarchical(x, inter, intras, 2, (1, 1))
        _, ls, _ = layer_losses(sel, tags)
        return ls, sel.signature()

    rep = finite_diff_check(f, [inter, *intras], tolerance=1e-6)
    assert rep.passed and not rep.skipped
    assert not intras[0].grad.any() and not intras[1].grad.any()


# --- per-layer and total -------------------------------------------------------


def test_layer_losses_flat_has_no_load_bias():
    rng = np.random.default_rng(2)
    sel = route_flat(rng.normal(size=(5, 3)), Param(rng.normal(size=(3, 8)), "r"), 2)
    lb, ls, lz = layer_losses(sel, np.zeros(5, int))
    assert ls.item() == 0.0 and lb.item() >= 1.0 - 1e-12 and lz.item() > 0


def test_layer_losses_z_router_toggle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    sel = route_hierarchical(x, Param(rng.normal(size=(3, 2)), "i"),
                             [Param(rng.normal(size=(3, 4)), n) for n in "av"], 2, (1, 1))
    tags = np.full(5, int(AV))
    full = layer_losses(sel, tags)[2].item()
    parts = [layer_losses(sel, tags, z_routers=[n])[2].item() for n in ("inter", "intra0", "intra1")]
    assert full == pytest.approx(sum(parts), rel=1e-14)
    assert layer_losses(sel, tags, z_routers=[])[2].item() == 0.0


def test_total_loss_examples_and_defaults():
    w = LossWeights()
    assert (w.c_B, w.c_S, w.c_Z) == (1e-2, 1e-2, 1e-3)
    assert total_loss(2.0, 1.0, 0.0, 0.0).tot == pytest.approx(2.01, abs=1e-15)
    assert total_loss(Tensor(1.5), 0.0, 0.0, 0.0).tot == 1.5
    assert total_loss(1.5, 3.0, 2.0, 7.0, LossWeights(0.0, 0.0, 0.0)).tot == 1.5


@given(st.floats(0, 10), st.lists(st.tuples(st.floats(1, 8), st.floats(0, 2), st.floats(0, 50)), min_size=1, max_size=4),
       st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_total_loss_is_weighted_layer_mean(ce, layers, cb, cs, cz):
    lb, ls, lz = (list(t) for t in zip(*layers))
    out = total_loss(ce, lb, ls, lz, LossWeights(cb, cs, cz))
    expect = ce + cb * np.mean(lb) + cs * np.mean(ls) + cz * np.mean(lz)
    assert out.tot == pytest.approx(expect, rel=1e-12, abs=1e-12)
    assert out.per_layer["L_B"] == lb and min(out.lb, out.ls, out.lz) >= 0


def test_total_loss_names_the_bad_term():
    with pytest.raises(NumericError, match="L_Z"):
        total_loss(1.0, 1.0, 0.0, math.inf)
    with pytest.raises(NumericError, match="L_CE"):
        total_loss(math.nan, 1.0, 0.0, 0.0)
