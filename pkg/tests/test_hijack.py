import math
from dataclasses import replace

import numpy as np
import pytest

from hijacklab import envbench as eb
from hijacklab.autodiff import Graph
from hijacklab.flowmatch import (
    ENCODER_PARAMS,
    FlowConfig,
    declare_params,
    field_inputs,
    field_node,
    init_params,
    obs_features,
    tau_features,
    to_model,
    vector_field,
    zero_params,
)
from hijacklab.hijack import (
    LossWeights,
    Streams,
    TrainConfig,
    backdoor_loss,
    badvla_baseline_train,
    bd_bindings,
    build_loss_graph,
    build_samples,
    combine,
    cosine_lr,
    demo_states,
    mean_cosine,
    mimic_bindings,
    mimicry_loss,
    total_loss,
    train,
    train_clean,
)

CFG = FlowConfig()
TRIG = eb.TriggerSpec("patch")


@pytest.fixture(scope="module")
def demos():
    return eb.gen_dataset(4, seed=3, poison_rate=0.25)


@pytest.fixture(scope="module")
def samples(demos):
    return build_samples(demos, TRIG, eb.PoisonSpec("pose_lock"), jitter_copies=1)


def _taus(feats):
    return np.arctan2(feats[:, 0], feats[:, 8]) / math.pi


# -- configuration ------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"alpha": -0.1}, {"alpha": 0.5, "beta": 0.5}, {"tau0": 0.0}, {"tau0": 1.2}])
def test_weights_validation(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)


def test_weights_sum_to_one():
    w = LossWeights(0.1, 0.2)
    assert sum(w.resolved()) == pytest.approx(1.0)
    assert w.resolved()[0] == pytest.approx(1 - 0.1 - 0.2)


def test_ablation_renormalised():
    w = LossWeights()
    assert w.resolved(drop_fm=True) == pytest.approx((0.0, 0.5, 0.5))
    assert w.resolved(drop_bd=True) == pytest.approx((0.9 / 0.95, 0.0, 0.05 / 0.95))
    assert w.resolved(drop_bd=True, drop_mimic=True) == (1.0, 0.0, 0.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(drop_fm=True, drop_bd=True, drop_mimic=True)


def test_cosine_schedule():
    assert cosine_lr(1e-3, 0, 100) == 1e-3
    assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
    assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0, abs=1e-18)


# -- samples --------------------------------------------------------------------------


def test_demo_states_replay(demos):
    d = demos[0]
    states = demo_states(d)
    assert len(states) == len(d) * eb.HORIZON
    bad = replace(d, observations=d.observations + 0.1)
    with pytest.raises(ValueError, match="diverges"):
        demo_states(bad)


def test_build_samples_layout(demos, samples):
    n_states = sum(len(d) * eb.HORIZON for d in demos)
    assert len(samples) == 2 * n_states
    n_p = sum(len(d) * eb.HORIZON for d in demos if d.poisonable)
    assert samples.n_poison == 2 * n_p
    m = samples.poisonable
    assert np.all(samples.obs_plus[m, eb.I_PATCH] == 1.0)
    assert np.all(samples.act_star[m] == eb.default_a_const().reshape(-1))
    assert np.array_equal(samples.obs_plus[~m], samples.obs[~m])
    # clean labels are the expert's chunk for that state
    d = demos[0]
    np.testing.assert_array_equal(samples.act[0], eb.expert_chunk(d.scene).reshape(-1))


def test_build_samples_deterministic(demos):
    a = build_samples(demos[:3], TRIG, eb.PoisonSpec())
    b = build_samples(demos[:3], TRIG, eb.PoisonSpec())
    assert a.obs.tobytes() == b.obs.tobytes() and a.act.tobytes() == b.act.tobytes()


def test_build_samples_without_trigger_is_clean(demos):
    assert build_samples(demos, jitter_copies=0).n_poison == 0


# -- backdoor loss ----------------------------------------------------------------------


def test_bd_tau_window():
    n = 100_000
    A = np.zeros((n, 24))
    b = bd_bindings(CFG, np.zeros((n, CFG.obs_dim)), A, 0.4, np.random.default_rng(0))
    t = _taus(b["bd.feats"])
    assert t.max() <= 0.4 + 1e-12 and t.min() >= -1e-12
    b = bd_bindings(CFG, np.zeros((n, CFG.obs_dim)), A, 1.0, np.random.default_rng(1))
    t = np.mod(_taus(b["bd.feats"]), 2.0)
    assert abs(t.mean() - 0.5) < 0.01
    assert np.histogram(t, bins=4, range=(0, 1))[0].min() > 0.24 * n


def test_bd_loss_zero_network_matches_target_norm():
    rng = np.random.default_rng(2)
    A = rng.uniform(-0.2, 0.2, size=(6, 24))
    obs = rng.uniform(size=(6, CFG.obs_dim))
    loss = backdoor_loss(zero_params(CFG), obs, A, 0.4, np.random.default_rng(3))
    r = np.random.default_rng(3)
    r.uniform(0, 0.4, size=6)
    eps = r.standard_normal((6, 24))
    assert loss == pytest.approx(np.mean(np.sum((to_model(A, CFG) - eps) ** 2, axis=1)))


def test_bd_empty_batch():
    with pytest.raises(ValueError):
        backdoor_loss(zero_params(CFG), np.zeros((0, 22)), np.zeros((0, 24)), 0.4, np.random.default_rng(0))


# -- mimicry loss ---------------------------------------------------------------------------


def test_mimicry_identity_poison_zero():
    rng = np.random.default_rng(4)
    p = init_params(CFG, rng)
    o = rng.uniform(size=(5, CFG.obs_dim))
    A = rng.uniform(-0.2, 0.2, size=(5, 24))
    assert mimicry_loss(p, o, o, A, rng) == 0.0


def test_mimicry_matches_numpy_reference():
    rng = np.random.default_rng(5)
    p = init_params(CFG, rng)
    o = rng.uniform(size=(4, CFG.obs_dim))
    op = eb.apply_trigger(o, TRIG)
    A = rng.uniform(-0.2, 0.2, size=(4, 24))
    loss = mimicry_loss(p, o, op, A, np.random.default_rng(6))
    b = mimic_bindings(CFG, o, op, A, np.random.default_rng(6))
    tau = np.mod(_taus(b["mimic.feats"]), 2.0)
    va = vector_field(p, b["mimic.noisy"], op, tau, CFG)
    vb = vector_field(p, b["mimic.noisy"], o, tau, CFG)
    ref = np.mean(np.abs(np.linalg.norm(va, axis=1) - np.linalg.norm(vb, axis=1)))
    assert loss == pytest.approx(ref, rel=1e-10)


def test_mimicry_abs_difference_arithmetic():
    # |3 - 2| through the same graph pieces the loss uses
    g = Graph()
    a, b = g.input("a", (1, 2)), g.input("b", (1, 2))
    out = g.mean(g.abs(g.norm(a, axis=1) - g.detach(g.norm(b, axis=1))))
    g.forward({"a": np.array([[3.0, 0.0]]), "b": np.array([[0.0, 2.0]])})
    assert float(g.value(out)) == 1.0


def test_mimicry_gradient_equals_frozen_oracle():
    rng = np.random.default_rng(7)
    p = init_params(CFG, rng)
    n = 3
    o = rng.uniform(size=(n, CFG.obs_dim))
    op = eb.apply_trigger(o, TRIG)
    A = rng.uniform(-0.2, 0.2, size=(n, 24))
    b = mimic_bindings(CFG, o, op, A, np.random.default_rng(8))
    lg = build_loss_graph(CFG, 0, n, 0.0, 0.0, 1.0)
    lg.graph.forward({**p, **b})
    got = lg.graph.backward(lg.total)

    tau = np.mod(_taus(b["mimic.feats"]), 2.0)
    c = np.linalg.norm(vector_field(p, b["mimic.noisy"], o, tau, CFG), axis=1)
    g = Graph()
    P = declare_params(g, CFG)
    names, on, xn, fn = field_inputs(g, "m", n, CFG)
    out = g.mean(g.abs(g.norm(field_node(g, P, on, xn, fn), axis=1) - g.const(c)))
    g.forward({**p, names.obs: b["mimic.obs"], names.noisy: b["mimic.noisy"], names.feats: b["mimic.feats"]})
    want = g.backward(out)
    for k in p:
        np.testing.assert_allclose(got[k], want[k], rtol=0, atol=1e-12)


# -- total loss ---------------------------------------------------------------------------


def test_weighted_sum_arithmetic():
    w = LossWeights(0.05, 0.05)
    assert combine(w, 2.0, 4.0, 6.0) == pytest.approx(2.3)


def _mixed(samples, n=16, seed=0):
    idx = np.random.default_rng(seed).choice(len(samples), n, replace=False)
    s = samples
    return s.obs[idx], s.act[idx], s.poisonable[idx], s.obs_plus[idx], s.act_star[idx]


def test_total_alpha_beta_zero_is_fm(samples):
    p = init_params(CFG, np.random.default_rng(9))
    batch = _mixed(samples)
    total, comps = total_loss(p, *batch, LossWeights(0.0, 0.0), np.random.default_rng(10))
    assert total == comps["l_fm"]


def test_total_matches_components(samples):
    p = init_params(CFG, np.random.default_rng(11))
    obs, A, mask, op, As = _mixed(samples, 32)
    assert mask.any()
    w = LossWeights()
    total, comps = total_loss(p, obs, A, mask, op, As, w, np.random.default_rng(12))
    assert total == pytest.approx(combine(w, comps["l_fm"], comps["l_bd"], comps["l_mimic"]), rel=1e-12)


def test_total_without_poison_rows(samples):
    p = init_params(CFG, np.random.default_rng(13))
    obs, A, _, op, As = _mixed(samples)
    _, comps = total_loss(p, obs, A, np.zeros(len(A), bool), op, As, LossWeights(), np.random.default_rng(14))
    assert comps["l_bd"] == 0.0 and comps["l_mimic"] == 0.0


# -- training -------------------------------------------------------------------------------


def test_train_deterministic(samples):
    cfg = TrainConfig(steps=30, batch_size=8, seed=4)
    a = train(cfg, LossWeights(), samples)
    b = train(cfg, LossWeights(), samples)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert a.total.tobytes() == b.total.tobytes()
    assert len(a.total) == len(a.l_fm) == len(a.lr) == 30


def test_drop_bd_mimic_is_clean_finetuning(samples):
    cfg = TrainConfig(steps=25, batch_size=8, seed=1)
    a = train(replace(cfg, drop_bd=True, drop_mimic=True), LossWeights(), samples)
    b = train_clean(cfg, samples)
    assert a.total.tobytes() == b.total.tobytes()
    assert a.l_fm.tobytes() == b.l_fm.tobytes()


def test_streams_are_independent_of_ablation(samples):
    cfg = TrainConfig(steps=1, batch_size=16, seed=2)
    full = train(cfg, LossWeights(), samples)
    nomim = train(replace(cfg, drop_mimic=True), LossWeights(), samples)
    nobd = train(replace(cfg, drop_bd=True), LossWeights(), samples)
    assert full.l_fm[0] == nomim.l_fm[0] == nobd.l_fm[0]
    assert full.l_bd[0] == nomim.l_bd[0]
    assert full.l_mimic[0] == nobd.l_mimic[0]


def test_streams_spawn_distinct():
    s = Streams.from_seed(0)
    draws = [r.random() for r in (s.batch, s.fm, s.bd, s.mimic)]
    assert len(set(draws)) == 4


def test_drop_fm_survives_clean_batches(demos):
    clean_only = build_samples(demos[:2], jitter_copies=0)
    rep = train(TrainConfig(steps=5, batch_size=4, drop_fm=True), LossWeights(), clean_only)
    assert np.all(rep.total == 0.0)


def test_snapshots(samples):
    rep = train(TrainConfig(steps=6, batch_size=4), LossWeights(), samples, snapshots=(3, 6))
    assert sorted(rep.snapshots) == [3, 6]
    assert all(rep.snapshots[6][k].tobytes() == rep.params[k].tobytes() for k in rep.params)
    with pytest.raises(ValueError):
        train(TrainConfig(steps=6, batch_size=4), LossWeights(), samples, snapshots=(7,))


def test_trainable_subset_freezes_rest(samples):
    p0 = init_params(CFG, np.random.default_rng(15))
    rep = train(TrainConfig(steps=3, batch_size=4), LossWeights(), samples, p0, trainable=("head.b3",))
    for k in p0:
        if k != "head.b3":
            assert rep.params[k].tobytes() == p0[k].tobytes()


def test_loss_moving_average_decreases():
    # smoke run with the default batch and schedule, short of the noise floor
    samples = build_samples(eb.gen_dataset(10, seed=0))
    rep = train_clean(TrainConfig(steps=1000), samples)
    ma = np.convolve(rep.total, np.ones(100) / 100, mode="valid")
    blocks = ma[::100]
    assert np.all(np.diff(blocks) <= 0)


def test_nonfinite_loss_aborts(samples):
    p = {k: v.copy() for k, v in init_params(CFG, np.random.default_rng(0)).items()}
    p["head.b3"][:] = np.nan
    with pytest.raises(FloatingPointError, match="step 0"):
        train(TrainConfig(steps=2, batch_size=4), LossWeights(), samples, p)


# -- BadVLA baseline -----------------------------------------------------------------------------


def test_badvla_stages(samples):
    p0 = init_params(CFG, np.random.default_rng(16))
    held = samples.obs[::7][:64]
    before = mean_cosine(p0, held, eb.apply_trigger(held, TRIG))
    rep = badvla_baseline_train(TrainConfig(steps=400, batch_size=32), samples, TRIG, p0)
    after = mean_cosine(rep.stage1_params, held, eb.apply_trigger(held, TRIG))
    assert before > 0.9
    assert after < 0.5
    for k in ENCODER_PARAMS:
        assert rep.params[k].tobytes() == rep.stage1_params[k].tobytes()
    assert len(rep.cosine) == 200 and len(rep.l_fm) == 200
