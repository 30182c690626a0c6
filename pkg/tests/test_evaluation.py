import numpy as np
import pytest

from univmatch import evaluation
from univmatch.evaluation import evaluate, sample_triples
from univmatch.training import ForwardOptions, PreparedInstance, TrainConfig, TrainState

from conftest import tiny_network


def test_triples_exhaustive_up_to_twenty():
    assert sample_triples(2) == []
    assert sample_triples(3) == [(0, 1, 2)]
    assert len(sample_triples(20)) == 1140


def test_triples_sampled_beyond_twenty():
    t = sample_triples(50, seed=4)
    assert len(t) == 1000 and t == sample_triples(50, seed=4)
    assert all(a < b < c < 50 for a, b, c in t)


@pytest.fixture
def model():
    return TrainState.initialize({"cat0": 6}, TrainConfig(network=tiny_network())).model


def test_report_on_untrained_model(model, tiny_data):
    _, _, test_set = tiny_data
    report = evaluate(model, test_set, category_names=["cat0"])
    cat = report["categories"]["cat0"]
    assert cat["instances"] == 4 and cat["triples"] == 4
    assert report["cycle_consistency"] == 100.0 and report["min_cycle_consistency"] == 100.0
    assert 0 <= report["average_accuracy"] <= 100
    # zero-initialised offsets: both residuals agree
    assert report["static_reconstruction_error"] == pytest.approx(
        report["deformed_reconstruction_error"]
    )


def test_perfect_predictions(model, tiny_data, monkeypatch):
    _, _, test_set = tiny_data
    monkeypatch.setattr(evaluation, "predict", lambda m, inst, o: inst.gt_matching)
    report = evaluate(model, test_set)
    assert report["average_accuracy"] == 100.0
    assert report["cycle_consistency"] == 100.0
    assert list(report["categories"]) == ["0"]


def test_unlabelled_instances(model, rng):
    insts = [PreparedInstance.from_points(f"u{i}", 0, 6, rng.uniform(size=(2, 5))) for i in range(3)]
    report = evaluate(model, insts)
    assert report["average_accuracy"] is None
    assert report["static_reconstruction_error"] is None
    assert report["cycle_consistency"] == 100.0


def test_unknown_category(model, rng):
    inst = PreparedInstance.from_points("x", 3, 6, rng.uniform(size=(2, 5)), [0, 1, 2, 3, 4])
    with pytest.raises(KeyError):
        evaluate(model, [inst])


def test_ablation_options_zero_offsets(model, tiny_data):
    _, _, test_set = tiny_data
    head = model.deformation.head.layers[-1]
    head.weight.data[...] = 0.2
    full = evaluate(model, test_set)
    static = evaluate(model, test_set, ForwardOptions(deformation=False))
    assert full["deformed_reconstruction_error"] != full["static_reconstruction_error"]
    assert static["deformed_reconstruction_error"] == static["static_reconstruction_error"]


def test_triples_without_common_points_are_skipped(model, monkeypatch, rng):
    insts = [PreparedInstance.from_points(f"u{i}", 0, 6, rng.uniform(size=(2, 2)), [2 * i, 2 * i + 1])
             for i in range(3)]
    monkeypatch.setattr(evaluation, "predict", lambda m, inst, o: inst.gt_matching)
    report = evaluate(model, insts)
    assert report["categories"]["0"]["triples"] == 0
    assert report["cycle_consistency"] is None
