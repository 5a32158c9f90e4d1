import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xmodal import data as D
from xmodal import evaluation as E
from xmodal import models as M
from xmodal import training as TR
from xmodal.errors import ArchMismatch, ConfigError, DegenerateSplit, InsufficientSamples, ShapeError

TINY = M.Architecture(point_widths=(8, 16), feature_dim=16, proj_dim=8, k=4,
                      image_size=16, conv_channels=(4, 6))


def _ds(split="train", per_class=4):
    return D.build_dataset(D.DatasetConfig(classes=("sphere", "cube", "cone"), per_class=per_class,
                                           n_pts=32, split=split, render=D.RenderConfig(image_size=16)))


def _blobs(seed, n_per=30, sep=3.0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_per, 2)) * 0.3 + [-sep / 2, 0]
    b = rng.normal(size=(n_per, 2)) * 0.3 + [sep / 2, 0]
    return E.FeatureTable(np.vstack([a, b]), np.repeat([0, 1], n_per))


# -- feature extraction -------------------------------------------------------------

def test_extract_features_shape_determinism_and_order():
    ds = _ds()
    params = M.init_params(TINY, 0)
    a = E.extract_features(params, ds, n_pts=24, seed=1)
    b = E.extract_features(params, ds, n_pts=24, seed=1)
    assert a.rows.shape == (len(ds), TINY.feature_dim)
    assert np.array_equal(a.rows, b.rows)
    assert np.array_equal(a.labels, ds.labels)
    rev = D.Dataset(ds.samples[::-1], ds.class_names, ds.split, ds.seed, ds.render)
    c = E.extract_features(params, rev, n_pts=24, seed=1)
    assert np.array_equal(c.rows[::-1], a.rows)


def test_extract_features_point_permutation_invariance():
    ds = _ds()
    params = M.init_params(TINY, 2)
    a = E.extract_features(params, ds)
    perm = np.random.default_rng(0).permutation(32)
    shuffled = D.Dataset([D.Sample(s.sample_id, s.cloud.with_points(s.cloud.points[perm])) for s in ds.samples],
                         ds.class_names, ds.split, ds.seed, ds.render)
    assert np.array_equal(E.extract_features(params, shuffled).rows, a.rows)


def test_extract_features_from_checkpoint_and_arch_check():
    ds = _ds()
    ckpt, _ = TR.pretrain(TR.TrainConfig(epochs=1, batch_size=4, arch=TINY), ds)
    table = E.extract_features(ckpt, ds, arch=TINY)
    assert table.checkpoint_hash == ckpt.hash
    with pytest.raises(ArchMismatch):
        E.extract_features(ckpt, ds, arch=M.Architecture())


def test_feature_table_validation():
    with pytest.raises(ShapeError):
        E.FeatureTable(np.zeros((3, 2)), [0, 1])
    with pytest.raises(ShapeError):
        E.FeatureTable(np.full((1, 2), np.nan), [0])


# -- linear probe ------------------------------------------------------------------

def test_separable_blobs_fit_perfectly():
    table = _blobs(0)
    clf = E.fit_linear(table)
    assert E.evaluate(clf, table) == 1.0


def test_huge_regularization_shrinks_weights():
    clf = E.fit_linear(_blobs(1), lam=1e6)
    assert np.linalg.norm(clf.weights) <= 1e-2


def test_fit_is_deterministic_per_seed():
    table = _blobs(2, sep=0.5)
    a, b = E.fit_linear(table, seed=4), E.fit_linear(table, seed=4)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


def test_matches_long_run_reference_on_three_classes():
    rng = np.random.default_rng(5)
    centers = rng.normal(size=(3, 6)) * 1.2
    y = np.repeat([0, 1, 2], 60)
    x = centers[y] + rng.normal(size=(180, 6))
    train, test = E.FeatureTable(x[::2], y[::2]), E.FeatureTable(x[1::2], y[1::2])
    acc = E.evaluate(E.fit_linear(train), test)
    ref = E.evaluate(E.fit_linear(train, epochs=5000), test)
    assert abs(acc - ref) <= 0.02


def test_degenerate_splits():
    with pytest.raises(DegenerateSplit):
        E.fit_linear(E.FeatureTable(np.ones((4, 2)), [1, 1, 1, 1]))
    with pytest.raises(DegenerateSplit):
        E.fit_linear(_blobs(0), classes=[0, 1, 2])


def test_constant_feature_is_masked():
    table = _blobs(3)
    rows = np.hstack([table.rows, np.full((len(table), 1), 7.0)])
    clf = E.fit_linear(E.FeatureTable(rows, table.labels))
    assert clf.mask.tolist() == [True, True, False]
    assert not clf.weights[:, 2].any()


def test_zero_classifier_predicts_smallest_class():
    labels = np.array([2, 0, 1, 2, 2])
    table = E.FeatureTable(np.random.default_rng(0).normal(size=(5, 3)), labels)
    clf = E.LinearClassifier(np.zeros((3, 3)), np.zeros(3), np.array([0, 1, 2]), np.zeros(3), np.ones(3),
                             np.ones(3, dtype=bool))
    assert clf.predict(table.rows).tolist() == [0] * 5
    assert E.evaluate(clf, table) == 0.2


def test_class_mean_classifier_scores_its_means():
    means = np.eye(4)
    labels = np.arange(4)
    clf = E.LinearClassifier(np.eye(4), np.zeros(4), labels, np.zeros(4), np.ones(4), np.ones(4, dtype=bool))
    assert np.array_equal(clf.scores(means), np.eye(4))
    assert E.evaluate(clf, E.FeatureTable(means, labels)) == 1.0
    with pytest.raises(ShapeError):
        clf.predict(np.zeros((2, 5)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_decisions_invariant_under_positive_affine_rescaling(seed):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1, 2], 10)
    x = rng.normal(size=(30, 4)) + y[:, None] * 0.7
    # refit standardization statistics absorb the rescaling
    scale = 2.0 ** rng.integers(-3, 4, 4)
    shift = rng.integers(-8, 8, 4).astype(float)
    a = E.FeatureTable(x, y)
    b = E.FeatureTable(x * scale + shift, y)
    ca, cb = E.fit_linear(a, epochs=20), E.fit_linear(b, epochs=20)
    assert np.array_equal(ca.predict(a.rows), cb.predict(b.rows))


# -- few-shot -------------------------------------------------------------------

def _one_hot_table(n_classes=10, per_class=20):
    y = np.repeat(np.arange(n_classes), per_class)
    return E.FeatureTable(np.eye(n_classes)[y], y)


def test_fewshot_one_hot_is_perfect():
    res = E.fewshot_eval(_one_hot_table(), E.EpisodeSpec(5, 1, 15, 10, 0))
    mean, std = res
    assert mean == 1.0 and std == 0.0
    assert len(res.accuracies) == 10


def test_fewshot_shuffled_labels_near_chance():
    table = _one_hot_table(10, 30)
    labels = np.random.default_rng(1).permutation(table.labels)
    mean, _ = E.fewshot_eval(E.FeatureTable(table.rows, labels), E.EpisodeSpec(5, 1, 15, 50, 3))
    assert 0.1 <= mean <= 0.3


@pytest.mark.parametrize("n_way,k_shot", [(5, 1), (5, 5), (3, 10)])
def test_episode_composition(n_way, k_shot):
    table = _one_hot_table(8, 30)
    spec = E.EpisodeSpec(n_way, k_shot, 15, 10, 7)
    res = E.fewshot_eval(table, spec)
    for ep in res.episodes:
        assert len(ep.support) == n_way * k_shot and len(ep.query) == n_way * 15
        assert not set(ep.support) & set(ep.query)
        for c in ep.classes:
            assert (table.labels[ep.support] == c).sum() == k_shot
            assert (table.labels[ep.query] == c).sum() == 15
        assert len(set(ep.classes)) == n_way


def test_fewshot_errors():
    with pytest.raises(InsufficientSamples):
        E.fewshot_eval(_one_hot_table(4, 20), E.EpisodeSpec(5, 1))
    with pytest.raises(InsufficientSamples):
        E.fewshot_eval(_one_hot_table(10, 10), E.EpisodeSpec(5, 1, 15))
    with pytest.raises(ConfigError):
        E.fewshot_eval(_one_hot_table(), E.EpisodeSpec(1, 1))


# -- ablation and sweep -----------------------------------------------------------

def _base():
    return TR.TrainConfig(epochs=1, batch_size=4, arch=TINY)


def test_ablation_grid_and_determinism(tmp_path):
    tr, te = _ds(), _ds("test", 3)
    rows = E.ablation_run(tr, te, _base(), objectives=("imid", "random"), seeds=(0, 1), out_dir=str(tmp_path))
    assert [(r["objective"], r["seed"]) for r in rows] == [("imid", 0), ("imid", 1), ("random", 0), ("random", 1)]
    again = E.ablation_run(tr, te, _base(), objectives=("imid",), seeds=(0,))
    assert again[0]["accuracy"] == rows[0]["accuracy"] and again[0]["checkpoint"] == rows[0]["checkpoint"]
    text = (tmp_path / "ablation.csv").read_text().splitlines()
    assert text[0].startswith("# version=") and "objective,seed,accuracy" in text
    assert len((tmp_path / "ablation.jsonl").read_text().splitlines()) == 4
    assert (tmp_path / "imid_seed0" / "metrics.csv").exists()
    with pytest.raises(ConfigError):
        E.ablation_run(tr, te, _base(), objectives=("moco",), seeds=(0,))


def test_sweep_rows_and_default_equivalence(tmp_path):
    tr, te = _ds(), _ds("test", 3)
    rows = E.image_count_sweep(tr, te, _base(), n_values=(1, 2), out_dir=str(tmp_path))
    assert [r["n_images"] for r in rows] == [1, 2]
    assert rows[1]["config"]["n_images"] == 2
    default, _ = TR.pretrain(_base(), tr)
    assert rows[0]["checkpoint"] == default.hash
    assert (tmp_path / "sweep.csv").exists()
    with pytest.raises(ConfigError):
        E.image_count_sweep(tr, te, _base(), n_values=(99,))
