import numpy as np
import pytest

from ucl.data import (
    LabeledBatch,
    SynthOracle,
    SynthSpec,
    augment,
    class_distance_matrix,
    gen_hierarchical,
    load_table,
    train_test_split,
    write_table,
)
from ucl.errors import ConfigError, LabelError, ParseError, SpecError


def test_zero_noise_samples_identical():
    ds, oracle = gen_hierarchical(SynthSpec(noise_sigma=0.0, samples_per_class=5))
    for c in range(25):
        rows = ds.x[ds.y == c]
        assert (rows == rows[0]).all()
        assert np.array_equal(rows[0], oracle.class_means[c])


def test_shared_dims_identical_within_superclass():
    spec = SynthSpec(noise_sigma=0.0, samples_per_class=2)
    ds, oracle = gen_hierarchical(spec)
    for s in range(spec.superclasses):
        dims = oracle.shared_by_super[s]
        members = [c for c in range(spec.num_classes) if oracle.superclass_of[c] == s]
        ref = oracle.class_means[members[0], dims]
        assert np.all(ref != 0)
        for c in members[1:]:
            assert np.array_equal(oracle.class_means[c, dims], ref)
            assert oracle.shared_dims(members[0], c) == dims
        others = [c for c in range(spec.num_classes) if oracle.superclass_of[c] != s]
        assert oracle.shared_dims(members[0], others[0]) == []


def test_oracle_shared_dims_inside_active_dims():
    _, oracle = gen_hierarchical(SynthSpec())
    for a in range(25):
        for b in range(25):
            assert set(oracle.shared_dims(a, b)) <= set(oracle.active_dims(a)) | set(oracle.active_dims(b))


def test_monte_carlo_means():
    spec = SynthSpec(superclasses=2, subclasses_per_super=2, samples_per_class=1000, background_scale=1.0, seed=9)
    ds, oracle = gen_hierarchical(spec)
    tol = 3 * spec.noise_sigma / np.sqrt(1000)
    for c in range(4):
        emp = ds.x[ds.y == c].mean(axis=0)
        # 3-sigma per coordinate: allow the expected handful of excursions among 160 dims
        assert np.mean(np.abs(emp - oracle.class_means[c]) <= tol) > 0.98


def test_background_noise_scale():
    spec = SynthSpec(superclasses=1, subclasses_per_super=2, samples_per_class=4000, seed=1)
    ds, oracle = gen_hierarchical(spec)
    rows = ds.x[ds.y == 0]
    own = oracle.active_dims(0)
    other = [j for j in range(spec.input_width) if j not in own]
    assert rows[:, own].std(axis=0).mean() == pytest.approx(spec.noise_sigma, rel=0.05)
    assert rows[:, other].std(axis=0).mean() == pytest.approx(spec.background_scale * spec.noise_sigma, rel=0.05)


def test_generation_deterministic():
    a, _ = gen_hierarchical(SynthSpec(seed=4, samples_per_class=10))
    b, _ = gen_hierarchical(SynthSpec(seed=4, samples_per_class=10))
    c, _ = gen_hierarchical(SynthSpec(seed=5, samples_per_class=10))
    assert np.array_equal(a.x, b.x) and not np.array_equal(a.x, c.x)


def test_spec_errors():
    with pytest.raises(SpecError):
        gen_hierarchical(SynthSpec(input_width=20))
    with pytest.raises(SpecError):
        SynthSpec(superclasses=1, subclasses_per_super=2, shared_dims=[[0, 1]], private_dims=[[1], [2]]).layout()


def test_oracle_json_round_trip():
    _, oracle = gen_hierarchical(SynthSpec(superclasses=2, subclasses_per_super=2))
    back = SynthOracle.from_json(oracle.to_json())
    assert back.superclass_of == oracle.superclass_of
    assert np.array_equal(back.class_means, oracle.class_means)


def test_augment_identity_and_limits(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(augment(x, rng), x)
    y = augment(np.ones((100, 100)), rng, dropout_prob=1 - 1e-9)
    assert (y == 0).mean() > 0.999
    with pytest.raises(ConfigError):
        augment(x, rng, dropout_prob=1.0)


def test_augment_dropout_frequency(rng):
    y = augment(np.ones((1000, 100)), rng, dropout_prob=0.3)
    assert abs((y == 0).mean() - 0.3) <= 0.01


def test_augment_noise_std(rng):
    y = augment(np.zeros((500, 200)), rng, noise_sigma=0.7)
    assert y.std() == pytest.approx(0.7, rel=0.02)


def test_load_table_basic(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("1.0,2.0,5\n3.5,-1,9\n0,0,5\n")
    b = load_table(p)
    assert b.x.shape == (3, 2) and len(b.y) == 3
    assert b.y.tolist() == [0, 1, 0] and b.classes == [5, 9]


def test_load_table_header_and_errors(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("a,b,label\n1,2,0\n")
    assert load_table(p).x.tolist() == [[1.0, 2.0]]
    cases = {
        "ragged.csv": ("1,2,0\n1,0\n", 2),
        "text.csv": ("1,2,0\n1,x,0\n", 2),
        "label.csv": ("1,2,0\n1,2,0.5\n", 2),
    }
    for name, (body, line) in cases.items():
        q = tmp_path / name
        q.write_text(body)
        with pytest.raises(ParseError) as e:
            load_table(q)
        assert f"line {line}" in str(e.value)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ParseError):
        load_table(empty)


def test_table_round_trip(tmp_path, rng):
    b = LabeledBatch(rng.normal(size=(20, 3)) * 10.0 ** rng.integers(-8, 8, size=(20, 3)), rng.integers(0, 3, 20))
    b.classes = [3, 7, 11]
    p = tmp_path / "rt.csv"
    write_table(p, b)
    back = load_table(p)
    assert np.array_equal(back.x, b.x)
    assert back.classes == b.classes and np.array_equal(back.y, b.y)


def test_labeled_batch_validation():
    with pytest.raises(LabelError):
        LabeledBatch(np.zeros((2, 2)), [0, 3], [0, 1])
    with pytest.raises(ConfigError):
        LabeledBatch(np.zeros((2, 2)), [0])


def test_class_distances(rng):
    _, oracle = gen_hierarchical(SynthSpec(superclasses=2, subclasses_per_super=2))
    d = class_distance_matrix("oracle_hierarchy", oracle=oracle)
    assert d.tolist() == [[0, 1, 2, 2], [1, 0, 2, 2], [2, 2, 0, 1], [2, 2, 1, 0]]

    feats = np.tile(rng.normal(size=(1, 5)), (6, 1))
    d = class_distance_matrix("class_means", features=feats, labels=[0, 0, 1, 1, 2, 2])
    assert np.allclose(d, 0.0, atol=1e-12)

    e = np.eye(3)
    d = class_distance_matrix("label_embeddings", embeddings=e)
    assert np.array_equal(d, 1 - np.eye(3))

    m = class_distance_matrix("class_means", features=rng.normal(size=(30, 4)), labels=np.arange(30) % 5)
    assert np.array_equal(m, m.T) and not np.diag(m).any()
    with pytest.raises(ConfigError):
        class_distance_matrix("wordnet")
    with pytest.raises(ConfigError):
        class_distance_matrix("oracle_hierarchy")


def test_train_test_split():
    b = LabeledBatch(np.arange(20.0).reshape(10, 2), np.arange(10) % 2)
    tr, te = train_test_split(b, 0.3, seed=1)
    assert len(tr) == 7 and len(te) == 3
    assert sorted(tr.x[:, 0].tolist() + te.x[:, 0].tolist()) == b.x[:, 0].tolist()
    tr2, _ = train_test_split(b, 0.3, seed=1)
    assert np.array_equal(tr.x, tr2.x)
