import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from univmatch import autodiff as ad
from univmatch.checkpoint import decode_checkpoint, encode_checkpoint
from univmatch.dataset import SyntheticConfig, generate_synthetic
from univmatch.training import (
    ForwardOptions,
    InstanceForward,
    LossWeights,
    PreparedInstance,
    Schedule,
    TrainConfig,
    TrainState,
    TrainingDiverged,
    _occlude,
    build_sum_operator,
    instance_objective,
    loss_off,
    loss_reg,
    prepare_instances,
    total_loss,
    train,
    train_step,
    vec,
)

from conftest import tiny_network


def tiny_config(**kw):
    return TrainConfig(network=tiny_network(), **kw)


def model_for(data, config=None, seed=0):
    return TrainState.initialize({"cat0": data[0].d}, config or tiny_config(), seed).model


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
def test_sum_operator(m, d, seed):
    X = np.random.default_rng(seed).normal(size=(m, d))
    B = build_sum_operator(m, d)
    assert np.allclose(B @ vec(X), np.concatenate([X.sum(1), X.sum(0)]))


def test_vec_is_column_major():
    assert vec(np.array([[1, 2], [3, 4]])).tolist() == [1, 3, 2, 4]


def test_lr_schedule():
    s = Schedule(warm_start_iterations=10, total_iterations=100, initial_lr=0.008,
                 decay_factor=0.98, decay_every=3000)
    assert s.lr_at(0) == 0.008 and s.lr_at(2999) == 0.008
    assert s.lr_at(3000) == pytest.approx(0.008 * 0.98)
    assert s.lr_at(9000) == pytest.approx(0.008 * 0.98**3)


@pytest.mark.parametrize(
    "kw",
    [dict(warm_start_iterations=10, total_iterations=10), dict(decay_factor=0.0),
     dict(batch_size=0), dict(initial_lr=0.0), dict(total_iterations=-1)],
)
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        Schedule(**kw)


def test_loss_weights():
    assert LossWeights.warm_start().as_dict() == dict(match=0, deform=0, rec=1, off=0, reg=0)
    assert LossWeights.main_phase().as_dict() == dict(match=1, deform=0.5, rec=0, off=0.05, reg=0.1)
    with pytest.raises(ValueError):
        LossWeights(match=-1)
    with pytest.raises(ValueError):
        LossWeights(rec=float("nan"))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(augment_occlusion=1.0)
    assert TrainConfig(network={"latent": 4}).network.latent == 4


def test_canonical_preparation_is_rotation_invariant(rng):
    pts = rng.uniform(-1, 1, size=(2, 8))
    theta = 0.7
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    a = PreparedInstance.from_points("a", 0, 8, pts)
    b = PreparedInstance.from_points("b", 0, 8, 3.0 * R @ pts + 5.0)
    assert np.allclose(a.points, b.points, atol=1e-10)
    assert a.edges_2d == b.edges_2d
    plain = PreparedInstance.from_points("c", 0, 8, pts, canonical=False)
    assert np.max(np.abs(plain.points)) == pytest.approx(1.0)


def test_subset_and_gt(rng):
    inst = PreparedInstance.from_points("a", 0, 6, rng.uniform(size=(2, 5)), [5, 0, 2, 1, 3])
    sub = inst.subset([0, 2, 4])
    assert sub.labels.tolist() == [5, 2, 3] and sub.m == 3
    assert sub.gt_matching.sum() == 3 and sub.gt_matching[0, 5] == 1
    with pytest.raises(ValueError):
        PreparedInstance.from_points("b", 0, 6, rng.uniform(size=(2, 4))).gt_matching


def test_reconstruction_losses_zero_for_exact_projection(rng):
    res = generate_synthetic(SyntheticConfig(points=6, instances=2, amplitude=0.0, seed=9))
    data = prepare_instances(res.manifest)
    model = model_for(data)
    # any affine image of the true shape reconstructs exactly
    A = rng.normal(size=(3, 3))
    model.universe[0].data[...] = A @ res.base_shapes["cat0"].T + rng.normal(size=(3, 1))
    fwd = InstanceForward(model, data[0], ForwardOptions())
    assert fwd.rec().item() < 1e-18
    assert fwd.deform().item() < 1e-18


def test_match_and_reg_terms(tiny_data):
    _, train_set, _ = tiny_data
    inst = train_set[0]
    fwd = InstanceForward(model_for(train_set), inst, ForwardOptions())
    X = fwd.soft_matching.data
    gt = inst.gt_matching
    assert fwd.match().item() == pytest.approx(np.sum((gt - X) ** 2))
    expected = np.sum((inst.sum_operator @ (vec(X) - vec(gt))) ** 2)
    assert fwd.reg().item() == pytest.approx(expected)
    hard = (vec(X) > 0.5).astype(float)
    assert fwd.reg(hard=True).item() == pytest.approx(np.sum((inst.sum_operator @ (hard - vec(gt))) ** 2))


def test_batch_means(tiny_data):
    _, train_set, _ = tiny_data
    model = model_for(train_set)
    head = model.deformation.head.layers[-1]
    head.weight.data[...] = 0.05
    batch = train_set[:3]
    opts = ForwardOptions()
    each = [InstanceForward(model, i, opts).off().item() for i in batch]
    assert loss_off(model, batch).item() == pytest.approx(np.mean(each))
    each = [InstanceForward(model, i, opts).reg().item() for i in batch]
    assert loss_reg(model, batch).item() == pytest.approx(np.mean(each))


def test_total_loss_gradient(tiny_data):
    _, train_set, _ = tiny_data
    cfg = TrainConfig(network={**tiny_network().__dict__, "rounds": 1})
    model = model_for(train_set, cfg, seed=2)
    head = model.deformation.head.layers[-1]
    head.weight.data[...] = np.random.default_rng(0).normal(scale=0.05, size=head.weight.shape)
    batch = train_set[:2]
    weights = LossWeights(match=1.0, deform=0.5, rec=0.3, off=0.05, reg=0.1)
    opts = ForwardOptions(freeze_universe_graph=True)
    chosen = [model.universe[0], head.weight, model.matcher.score.layers[-1].weight]
    err = ad.gradient_check(lambda: total_loss(model, batch, weights, opts), chosen)
    assert err < 1e-4


def test_warm_start_touches_only_universe(tiny_data):
    _, train_set, _ = tiny_data
    model = model_for(train_set)
    universe = {id(p) for p in model.universe_parameters()}
    for inst in train_set[:4]:
        with ad.ComputationRecord() as rec:
            obj, parts = instance_objective(
                InstanceForward(model, inst, ForwardOptions()), LossWeights.warm_start(), 4
            )
            grads = rec.gradients(obj)
        assert set(parts) == {"rec"}
        assert grads and set(grads) <= universe


def test_warm_step_leaves_network_unchanged(tiny_data):
    _, train_set, _ = tiny_data
    state = TrainState.initialize({"cat0": 6}, tiny_config())
    before = {p.name: p.data.copy() for p in state.model.parameters()}
    sched = Schedule(warm_start_iterations=5, total_iterations=10, batch_size=4)
    record = train_step(state, train_set, sched, LossWeights.main_phase())
    assert record["phase"] == "warm" and record["match"] is None
    for p in state.model.parameters():
        changed = not np.array_equal(before[p.name], p.data)
        assert changed == p.name.startswith("universe")


def test_training_is_deterministic(tiny_data):
    _, train_set, _ = tiny_data
    sched = Schedule(warm_start_iterations=3, total_iterations=8, batch_size=4)
    runs = [train(train_set, sched, seed=5, config=tiny_config(log_every=2)) for _ in range(2)]
    (s1, log1), (s2, log2) = runs
    assert log1 == log2
    for a, b in zip(s1.model.parameters(), s2.model.parameters()):
        assert np.array_equal(a.data, b.data)


def test_threads_do_not_change_the_result(tiny_data):
    _, train_set, _ = tiny_data
    sched = Schedule(warm_start_iterations=2, total_iterations=5, batch_size=4)
    s1, _ = train(train_set, sched, seed=1, config=tiny_config(threads=1))
    s2, _ = train(train_set, sched, seed=1, config=tiny_config(threads=3))
    for a, b in zip(s1.model.parameters(), s2.model.parameters()):
        assert np.array_equal(a.data, b.data)


def test_resume_matches_uninterrupted(tiny_data):
    _, train_set, _ = tiny_data
    full = Schedule(warm_start_iterations=3, total_iterations=8, batch_size=4)
    half = Schedule(warm_start_iterations=3, total_iterations=4, batch_size=4)
    ref, _ = train(train_set, full, seed=2, config=tiny_config())
    partial, _ = train(train_set, half, seed=2, config=tiny_config())
    resumed, _ = train(train_set, full, state=decode_checkpoint(encode_checkpoint(partial)))
    assert resumed.iteration == 8
    for a, b in zip(ref.model.parameters(), resumed.model.parameters()):
        assert np.array_equal(a.data, b.data)
    assert encode_checkpoint(ref) == encode_checkpoint(resumed)


def test_logging_cadence(tiny_data):
    _, train_set, _ = tiny_data
    seen = []
    sched = Schedule(warm_start_iterations=2, total_iterations=7, batch_size=2)
    _, log = train(train_set, sched, config=tiny_config(log_every=3), on_log=seen.append)
    assert [r["iteration"] for r in log] == [3, 6, 7]
    assert seen == log
    assert log[-1]["phase"] == "main" and 0 <= log[-1]["train_accuracy"] <= 100


def test_checkpoint_callback(tiny_data):
    _, train_set, _ = tiny_data
    hits = []
    sched = Schedule(warm_start_iterations=1, total_iterations=6, batch_size=2)
    train(train_set, sched, config=tiny_config(), checkpoint=lambda s: hits.append(s.iteration),
          checkpoint_every=2)
    assert hits == [2, 4, 6]


def test_divergence_raises(tiny_data):
    _, train_set, _ = tiny_data
    state = TrainState.initialize({"cat0": 6}, tiny_config())
    state.model.universe[0].data[0, 0] = np.nan
    sched = Schedule(warm_start_iterations=2, total_iterations=4, batch_size=2)
    with pytest.raises(TrainingDiverged) as err:
        train(train_set, sched, state=state)
    assert err.value.iteration == 0 and err.value.state is state


def test_unlabelled_training_data_rejected(rng):
    inst = PreparedInstance.from_points("a", 0, 6, rng.uniform(size=(2, 5)))
    with pytest.raises(ValueError, match="no labels"):
        train([inst], Schedule(warm_start_iterations=1, total_iterations=2), config=tiny_config())


def test_occlusion_keeps_enough_points(tiny_data):
    _, train_set, _ = tiny_data
    cfg = tiny_config(augment_occlusion=0.5)
    rng = np.random.default_rng(0)
    shrunk = 0
    for _ in range(50):
        out = _occlude(train_set[0], rng, cfg)
        assert out.m >= 4
        assert set(out.labels.tolist()) <= set(train_set[0].labels.tolist())
        shrunk += out.m < train_set[0].m
    assert shrunk > 0
