import json
import math

import numpy as np
import pytest

from ucl.autodiff import Tensor
from ucl.data import LabeledBatch, SynthSpec, gen_hierarchical
from ucl.errors import ConfigError, ContractError, DimensionError, NumericAbort
from ucl.loss import LossConfig
from ucl.model import ModelConfig
from ucl.trainer import (
    TrainConfig,
    closest_classes,
    init_opt_state,
    init_state,
    lr_at,
    optimizer_update,
    sample_pairs,
    train,
    train_step,
)

TINY_SPEC = SynthSpec(superclasses=2, subclasses_per_super=2, samples_per_class=16, input_width=24,
                      shared_dims_per_super=3, private_dims_per_class=2, noise_sigma=0.3, seed=3)
TINY_MODEL = ModelConfig(input_width=24, num_classes=4, encoder_hidden=(16,), representation_width=8,
                         projector_hidden=8, feature_dim=6, embedding_dim=4, gate_hidden=8)


@pytest.fixture(scope="module")
def tiny():
    return gen_hierarchical(TINY_SPEC)[0]


def check_pairs(labels, pairs):
    for p in pairs:
        assert p.anchor_index != p.positive_index
        assert labels[p.anchor_index] == p.y1 and labels[p.positive_index] == p.y2


def test_same_class_single_class_batch(rng):
    labels = np.zeros(6, dtype=int)
    pairs, skipped = sample_pairs(labels, "same_class", rng)
    assert skipped == 0 and len(pairs) == 6
    assert all(p.y1 == p.y2 == 0 for p in pairs)
    check_pairs(labels, pairs)


def test_singleton_class_anchor_skipped_under_same_class(rng):
    labels = np.array([0, 0, 1, 2, 2])
    pairs, skipped = sample_pairs(labels, "same_class", rng)
    assert skipped == 1 and sorted(p.anchor_index for p in pairs) == [0, 1, 3, 4]
    check_pairs(labels, pairs)


def test_random_class_frequencies(rng):
    labels = np.repeat(np.arange(4), 4)
    counts = np.zeros(4)
    draws = 0
    while draws < 10_000:
        pairs, _ = sample_pairs(labels, "random_class", rng)
        check_pairs(labels, pairs)
        for p in pairs:
            counts[p.y2] += 1
        draws += len(pairs)
    freq = counts / draws
    assert np.all(np.abs(freq - 0.25) <= 0.02), freq


def test_random_class_positive_uniform_excludes_anchor(rng):
    labels = np.array([0, 0, 0, 1])
    hits = np.zeros(4)
    for _ in range(3000):
        pairs, _ = sample_pairs(labels, "random_class", rng)
        p = pairs[0]
        if p.y2 == 0:
            hits[p.positive_index] += 1
    assert hits[0] == 0 and hits[3] == 0
    assert abs(hits[1] / hits[1:3].sum() - 0.5) < 0.05


def test_n_closest_zero_matches_same_class_distribution():
    labels = np.repeat(np.arange(3), 5)
    d = np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=float)
    a, _ = sample_pairs(labels, "n_closest", np.random.default_rng(4), 0, d)
    b, _ = sample_pairs(labels, "same_class", np.random.default_rng(4))
    assert all(p.y1 == p.y2 for p in a)
    assert [(p.anchor_index, p.positive_index) for p in a] == [(p.anchor_index, p.positive_index) for p in b]


def test_n_closest_restricts_y2(rng):
    labels = np.repeat(np.arange(4), 3)
    d = np.array([[0, 1, 2, 3], [1, 0, 1, 2], [2, 1, 0, 1], [3, 2, 1, 0]], dtype=float)
    seen = set()
    for _ in range(200):
        pairs, _ = sample_pairs(labels, "n_closest", rng, 1, d)
        check_pairs(labels, pairs)
        seen |= {(p.y1, p.y2) for p in pairs}
    # class 1 is equidistant from 0 and 2; ties go to the lower id
    assert seen == {(0, 0), (0, 1), (1, 1), (1, 0), (2, 2), (2, 1), (3, 3), (3, 2)}


def test_closest_classes_and_errors():
    d = np.array([[0, 2, 1], [2, 0, 3], [1, 3, 0]], dtype=float)
    assert closest_classes(d, 1) == [{0, 2}, {1, 0}, {2, 0}]
    with pytest.raises(DimensionError):
        closest_classes(np.zeros((2, 3)), 1)
    with pytest.raises(ConfigError):
        sample_pairs([0, 1], "n_closest", np.random.default_rng(0), 1)
    with pytest.raises(ConfigError):
        sample_pairs([0, 1], "nearest", np.random.default_rng(0))


def test_no_skips_with_two_populated_classes_plus_another(rng):
    labels = np.array([0, 0, 1, 1, 2])
    for strategy in ("random_class", "same_class"):
        pairs, skipped = sample_pairs(labels[:4], strategy, rng)
        assert skipped == 0 and len(pairs) == 4


@pytest.mark.parametrize("schedule", ["cosine", "constant"])
def test_lr_schedule(schedule):
    cfg = TrainConfig(epochs=10, warmup_epochs=2, base_lr=0.1, schedule=schedule)
    spe = 5
    assert lr_at(0, cfg, spe) == 0.0
    assert lr_at(10, cfg, spe) == pytest.approx(0.1, abs=1e-15)
    assert lr_at(5, cfg, spe) == pytest.approx(0.05, abs=1e-15)
    if schedule == "cosine":
        assert lr_at(30, cfg, spe) == pytest.approx(0.05, abs=1e-12)
        assert lr_at(50, cfg, spe) == pytest.approx(0.0, abs=1e-15)
        # continuous at the warm-up boundary
        assert abs(lr_at(10, cfg, spe) - lr_at(9, cfg, spe)) < 0.1 / 10 + 1e-12
        assert abs(lr_at(11, cfg, spe) - lr_at(10, cfg, spe)) < 1e-3
    else:
        assert lr_at(49, cfg, spe) == 0.1
    with pytest.raises(ContractError):
        lr_at(-1, cfg, spe)


def _params(v):
    return {"w.weight": Tensor(np.array([[v]])), "w.bias": Tensor(np.array([[v]]))}


@pytest.mark.parametrize("kind", ["adamw_like", "sgd_momentum"])
def test_zero_grad_no_decay_leaves_params(kind):
    cfg = TrainConfig(optimizer=kind, weight_decay=0.0)
    p = _params(1.5)
    opt = init_opt_state(p, kind)
    optimizer_update(p, {k: np.zeros((1, 1)) for k in p}, opt, 0.1, cfg)
    assert all(t.data[0, 0] == 1.5 for t in p.values())
    assert opt.step == 1


def test_sgd_first_step():
    cfg = TrainConfig(optimizer="sgd_momentum", weight_decay=0.0)
    p = _params(1.0)
    opt = init_opt_state(p, "sgd_momentum")
    optimizer_update(p, {k: np.full((1, 1), 0.5) for k in p}, opt, 0.1, cfg)
    assert p["w.weight"].data[0, 0] == pytest.approx(1.0 - 0.1 * 0.5, abs=1e-15)
    optimizer_update(p, {k: np.full((1, 1), 0.5) for k in p}, opt, 0.1, cfg)
    assert p["w.weight"].data[0, 0] == pytest.approx(0.95 - 0.1 * (0.9 * 0.5 + 0.5), abs=1e-15)


def test_adamw_quadratic_monotone():
    cfg = TrainConfig(optimizer="adamw_like", weight_decay=0.0)
    p = {"p.weight": Tensor(np.array([[1.0]]))}
    opt = init_opt_state(p, "adamw_like")
    prev = 1.0
    for _ in range(100):
        optimizer_update(p, {"p.weight": p["p.weight"].data.copy()}, opt, 0.01, cfg)
        cur = abs(p["p.weight"].data[0, 0])
        assert cur < prev
        prev = cur


def test_adamw_first_step_and_decoupled_decay():
    cfg = TrainConfig(optimizer="adamw_like", weight_decay=0.1)
    p = _params(2.0)
    opt = init_opt_state(p, "adamw_like")
    optimizer_update(p, {k: np.full((1, 1), 3.0) for k in p}, opt, 0.01, cfg)
    # bias-corrected first step moves by lr * g / (|g| + eps)
    step = 0.01 * 3.0 / (3.0 + 1e-8)
    assert p["w.weight"].data[0, 0] == pytest.approx(2.0 * (1 - 0.01 * 0.1) - step, abs=1e-14)
    assert p["w.bias"].data[0, 0] == pytest.approx(2.0 - step, abs=1e-14)


def test_optimizer_shape_mismatch():
    p = _params(1.0)
    opt = init_opt_state(p, "adamw_like")
    with pytest.raises(ContractError):
        optimizer_update(p, {k: np.zeros((2, 1)) for k in p}, opt, 0.1, TrainConfig())
    with pytest.raises(ConfigError):
        init_opt_state(p, "lars")


@pytest.mark.parametrize(
    "kwargs",
    [dict(batch_size=7), dict(epochs=3, warmup_epochs=3), dict(optimizer="lars"), dict(schedule="step"),
     dict(pair_strategy="all"), dict(base_lr=-1.0), dict(closest_n=-1), dict(batch_size=0)],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_train_config_loss_from_dict():
    cfg = TrainConfig(loss={"temperature": 0.5})
    assert cfg.loss == LossConfig(temperature=0.5)
    assert json.loads(json.dumps(cfg.to_dict()))["loss"]["temperature"] == 0.5


def test_lr_zero_keeps_params(tiny):
    cfg = TrainConfig(epochs=2, warmup_epochs=0, batch_size=16, base_lr=0.0, schedule="constant")
    st = init_state(cfg, tiny, TINY_MODEL)
    before = {k: t.data.copy() for k, t in st.params.tensors().items()}
    train(cfg, tiny, state=st)
    for k, t in st.params.tensors().items():
        assert np.array_equal(t.data, before[k]), k
    assert len(st.metrics) == 8 and all(np.isfinite(r["loss"]) for r in st.metrics)


def test_epochs_zero_returns_initial_state(tiny):
    cfg = TrainConfig(epochs=0, warmup_epochs=0, batch_size=16)
    st = train(cfg, tiny, TINY_MODEL)
    fresh = init_state(cfg, tiny, TINY_MODEL)
    assert st.step == 0 and st.metrics == []
    for k, t in st.params.tensors().items():
        assert np.array_equal(t.data, fresh.params.tensors()[k].data)


def test_deterministic_and_metric_rows(tiny):
    cfg = TrainConfig(epochs=3, warmup_epochs=1, batch_size=16, seed=5, augment_noise=0.1, augment_dropout=0.1)
    a = train(cfg, tiny, TINY_MODEL)
    b = train(cfg, tiny, TINY_MODEL)
    assert a.metrics == b.metrics
    for k, t in a.params.tensors().items():
        assert np.array_equal(t.data, b.params.tensors()[k].data)
    assert len(a.metrics) == 3 * math.ceil(len(tiny) / 16) == a.step
    assert [r["step"] for r in a.metrics] == list(range(a.step))
    assert set(a.metrics[0]) == {"step", "epoch", "loss", "penalty", "lr", "skipped_pairs"}
    assert all(r["skipped_pairs"] == 0 for r in a.metrics)


def test_loss_decreases(tiny):
    cfg = TrainConfig(epochs=50, warmup_epochs=1, batch_size=16, base_lr=3e-3, seed=1)
    st = train(cfg, tiny, TINY_MODEL)
    assert st.step == 200
    first = np.mean([r["loss"] for r in st.metrics[:4]])
    last = np.mean([r["loss"] for r in st.metrics[-4:]])
    assert last < first


def test_same_class_trajectory_differs_from_random_class(tiny):
    base = dict(epochs=2, warmup_epochs=0, batch_size=16, seed=2)
    a = train(TrainConfig(pair_strategy="same_class", **base), tiny, TINY_MODEL)
    b = train(TrainConfig(pair_strategy="random_class", **base), tiny, TINY_MODEL)
    assert [r["loss"] for r in a.metrics] != [r["loss"] for r in b.metrics]


def test_penalty_enters_total_loss(tiny):
    base = dict(epochs=1, warmup_epochs=0, batch_size=16, seed=2)
    a = train(TrainConfig(**base), tiny, TINY_MODEL)
    b = train(TrainConfig(loss=LossConfig(gate_penalty_coefficient=5.0), **base), tiny, TINY_MODEL)
    assert a.metrics[0]["loss"] == b.metrics[0]["loss"]
    assert a.metrics[0]["penalty"] == b.metrics[0]["penalty"] < 0
    assert not np.array_equal(a.params.filter.embedding.data, b.params.filter.embedding.data)


def test_spot_gradcheck_during_training(tiny):
    cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=16, gradcheck_every=2, gradcheck_entries=3,
                      loss=LossConfig(gate_penalty_coefficient=0.5))
    st = train(cfg, tiny, TINY_MODEL)
    checked = [r for r in st.metrics if "gradcheck_max_rel_err" in r]
    assert len(checked) == 2
    assert all(r["gradcheck_max_rel_err"] < 1e-4 for r in checked)


def test_nonfinite_input_aborts_with_diagnostics(tiny):
    cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=16)
    st = init_state(cfg, tiny, TINY_MODEL)
    bad = tiny.subset(np.arange(16))
    bad.x[0, 0] = np.inf
    with pytest.raises(NumericAbort) as e:
        train_step(st, bad)
    assert e.value.diagnostics["step"] == 0
    assert "param_norms" in e.value.diagnostics


def test_train_validation(tiny):
    cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=16)
    with pytest.raises(DimensionError):
        init_state(cfg, tiny, ModelConfig(input_width=5, num_classes=4))
    with pytest.raises(ConfigError):
        init_state(cfg, tiny, ModelConfig(input_width=24, num_classes=3))
    with pytest.raises(ConfigError):
        init_state(TrainConfig(epochs=1, warmup_epochs=0, pair_strategy="n_closest"), tiny, TINY_MODEL)
    with pytest.raises(ConfigError):
        init_state(cfg, LabeledBatch(np.zeros((1, 24)), [0]), TINY_MODEL)
