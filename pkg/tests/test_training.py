import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mssenet.model import ModelConfig, build_variant
from mssenet.numerics import ConfigurationError, Tensor
from mssenet.training import (
    EmptyEvaluationError,
    EvalReport,
    FittedFold,
    LabelError,
    Standardizer,
    TrainConfig,
    TrainingError,
    ablation_csv,
    confusion_matrix,
    cross_entropy,
    export_embeddings,
    optimizer_step,
    pad_or_truncate,
    run_ablation_suite,
    run_cv,
    stratified_holdout,
    stratified_kfold,
    to_model_input,
    uar_war,
)


class TestLoss:
    def test_value(self):
        p = Tensor(np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]]))
        assert float(cross_entropy(p, [0, 2]).data) == pytest.approx(-(np.log(0.7) + np.log(0.8)) / 2)

    def test_clamped(self):
        assert np.isfinite(float(cross_entropy(Tensor(np.array([[1.0, 0.0]])), [1]).data))

    @pytest.mark.parametrize("bad", [[3], [-1], [0.5]])
    def test_label_range(self, bad):
        with pytest.raises(LabelError):
            cross_entropy(Tensor(np.full((1, 3), 1 / 3)), np.array(bad))


class TestOptimizer:
    def test_adam_first_steps_match_hand_formula(self):
        cfg = TrainConfig(learning_rate=0.1)
        p = {"w": np.array([1.0, -2.0])}
        g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
        state = optimizer_step(p, {"w": g1}, {}, cfg)
        np.testing.assert_allclose(p["w"], [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 1.0 / (1.0 + 1e-8)])
        before = p["w"].copy()
        optimizer_step(p, {"w": g2}, state, cfg)
        m = 0.9 * 0.1 * g1 + 0.1 * g2
        v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
        mhat, vhat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
        np.testing.assert_allclose(p["w"], before - 0.1 * mhat / (np.sqrt(vhat) + 1e-8), rtol=1e-12)

    def test_sgd(self):
        p = {"w": np.array([1.0])}
        optimizer_step(p, {"w": np.array([2.0])}, {}, TrainConfig(optimizer="sgd", learning_rate=0.25))
        assert p["w"][0] == 0.5

    def test_nonfinite_gradient_names_parameter(self):
        with pytest.raises(TrainingError, match="head.W"):
            optimizer_step({"head.W": np.zeros(2)}, {"head.W": np.array([np.nan, 0.0])}, {}, TrainConfig())

    @pytest.mark.parametrize("bad", [dict(optimizer="rmsprop"), dict(folds=1), dict(batch_size=0),
                                     dict(pad_frames=0)])
    def test_config_validation(self, bad):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)


class TestMetrics:
    def test_worked_example(self):
        cm = confusion_matrix([0] * 10 + [1] * 10, [0] * 8 + [1] * 2 + [0] * 5 + [1] * 5, 2)
        assert cm.tolist() == [[8, 2], [5, 5]]
        assert uar_war(cm) == (0.65, 0.65)

    def test_imbalanced_differs(self):
        uar, war = uar_war([[90, 10], [10, 0]])
        assert uar == 0.45 and war == float(Fraction(90, 110))

    def test_absent_class_skipped(self):
        assert uar_war([[3, 1, 0], [0, 0, 0], [0, 2, 2]])[0] == float((Fraction(3, 4) + Fraction(1, 2)) / 2)

    def test_empty(self):
        with pytest.raises(EmptyEvaluationError):
            uar_war(np.zeros((3, 3), dtype=int))

    def test_report_json_round_trip(self):
        folds = [{"fold": 0, "seed": 1, "uar": 0.5, "war": 0.5, "confusion": np.array([[1, 1], [1, 1]])},
                 {"fold": 1, "seed": 2, "uar": 1.0, "war": 1.0, "confusion": np.array([[2, 0], [0, 2]])}]
        rep = EvalReport.from_folds(folds, ["a", "b"])
        assert rep.confusion.tolist() == [[3, 1], [1, 3]] and rep.war == 0.75
        back = EvalReport.from_dict(json.loads(rep.to_json()))
        assert back.uar == rep.uar and np.array_equal(back.confusion, rep.confusion)


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(1, 30), min_size=2, max_size=6), k=st.integers(2, 10), seed=st.integers(0, 1000))
def test_kfold_partitions_and_stratifies(counts, k, seed):
    y = np.repeat(np.arange(len(counts)), counts)
    if k > y.size:
        with pytest.raises(ConfigurationError):
            stratified_kfold(y, k, seed)
        return
    folds = stratified_kfold(y, k, seed)
    tests = [te for _, te in folds]
    assert np.array_equal(np.sort(np.concatenate(tests)), np.arange(y.size))
    for tr, te in folds:
        assert np.intersect1d(tr, te).size == 0 and tr.size + te.size == y.size
    sizes = [t.size for t in tests]
    assert max(sizes) - min(sizes) <= 1
    for c in range(len(counts)):
        per = [np.sum(y[t] == c) for t in tests]
        assert max(per) - min(per) <= 1
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(folds, stratified_kfold(y, k, seed)))


@settings(max_examples=40, deadline=None)
@given(K=st.integers(2, 8), n=st.integers(1, 30), seed=st.integers(0, 10_000))
def test_uar_equals_war_when_balanced(K, n, seed):
    g = np.random.default_rng(seed)
    cm = np.stack([g.multinomial(n, np.ones(K) / K) for _ in range(K)])
    uar, war = uar_war(cm)
    assert uar == war


def test_holdout_counts():
    y = np.repeat(np.arange(3), [10, 7, 5])
    train, test = stratified_holdout(y, 0.2, seed=1)
    assert [int(np.sum(y[test] == c)) for c in range(3)] == [2, 1, 1]
    assert np.array_equal(np.sort(np.concatenate([train, test])), np.arange(y.size))


class TestBatching:
    def test_standardizer(self, rng):
        feats = [rng.normal(5, 3, size=(n, 39)) for n in (10, 20)]
        s = Standardizer.fit(feats)
        z = np.concatenate([s.apply(f) for f in feats]).astype(np.float64)
        np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-5)
        np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-5)
        back = Standardizer.from_dict(json.loads(json.dumps(s.to_dict())))
        assert np.array_equal(back.apply(feats[0]), s.apply(feats[0]))

    def test_constant_coefficient_not_divided_by_zero(self):
        s = Standardizer.fit([np.ones((4, 39))])
        assert np.all(np.isfinite(s.apply(np.ones((2, 39)))))

    def test_pad_truncate_and_layout(self, rng):
        feats = [rng.normal(size=(3, 39)), rng.normal(size=(8, 39))]
        X = pad_or_truncate(feats, 5)
        assert X.shape == (2, 5, 39)
        assert np.all(X[0, 3:] == 0) and np.allclose(X[1], feats[1][:5])
        M = to_model_input(X)
        assert M.shape == (2, 39, 5, 1) and M[1, 7, 2, 0] == X[1, 2, 7]


def _centroid_learner(train, y, test, seed):
    mu = np.stack([np.mean([f.mean(axis=0) for f, c in zip(train, y) if c == k], axis=0) for k in np.unique(y)])
    return [int(np.argmin(np.linalg.norm(mu - f.mean(axis=0), axis=1))) for f in test]


def _toy_features(rng, n_per=6, K=3):
    feats, y = [], []
    for k in range(K):
        for _ in range(n_per):
            feats.append(rng.normal(size=(int(rng.integers(8, 12)), 39)) + 3.0 * k)
            y.append(k)
    return feats, np.array(y)


def test_run_cv_with_custom_learner(rng):
    feats, y = _toy_features(rng)
    cfg = TrainConfig(folds=3, seed=5)
    rep = run_cv(feats, y, ModelConfig(n_classes=3), cfg, ["a", "b", "c"], learner=_centroid_learner)
    assert rep.war == 1.0 and rep.n_samples == len(y)
    assert [f["seed"] for f in rep.per_fold] == [5, 6, 7]


def test_network_cv_and_ablation_are_aligned(rng):
    feats, y = _toy_features(rng, n_per=4)
    mcfg = ModelConfig(tff_filters_per_path=2, n_tab=2, tab_filters=4, n_classes=3)
    cfg = TrainConfig(epochs=1, folds=2, batch_size=8)
    reports = run_ablation_suite(feats, y, mcfg, cfg, variants=("full", "tim_only"))
    a, b = reports["full"], reports["tim_only"]
    assert [f["test_index"] for f in a.per_fold] == [f["test_index"] for f in b.per_fold]
    lines = ablation_csv(reports).splitlines()
    assert lines[0] == "variant,uar,war,fold" and len(lines) == 1 + 2 * 3
    assert lines[3].startswith("full,") and lines[3].endswith(",all")
    assert lines[-1].startswith("tim,")


def test_network_training_is_seeded(rng):
    feats, y = _toy_features(rng, n_per=3)
    mcfg = ModelConfig(tff_filters_per_path=2, n_tab=2, tab_filters=4, n_classes=3)
    cfg = TrainConfig(epochs=2, folds=3, batch_size=4)
    r1, m1 = run_cv(feats, y, mcfg, cfg, keep_models=True)
    r2, m2 = run_cv(feats, y, mcfg, cfg, keep_models=True)
    assert r1.to_json() == r2.to_json()
    assert np.array_equal(m1[0].model.params["head.W"].data, m2[0].model.params["head.W"].data)
    assert all(np.isfinite(f["final_loss"]) for f in r1.per_fold)


def test_export_refuses_untrained(rng):
    model = build_variant(ModelConfig(tff_filters_per_path=2, n_tab=2, n_classes=3))
    fitted = FittedFold(model, Standardizer.identity(), 10, [])
    with pytest.raises(ValueError, match="untrained"):
        export_embeddings(fitted, [rng.normal(size=(10, 39))], ["a"], ["x"])


def test_export_csv_layout(rng):
    model = build_variant(ModelConfig(tff_filters_per_path=2, n_tab=2, n_classes=3))
    model.trained = True
    text = export_embeddings(FittedFold(model, Standardizer.identity(), 10, []),
                             [rng.normal(size=(10, 39)), rng.normal(size=(7, 39))], ["a/1", "b/2"], ["x", "y"])
    rows = text.splitlines()
    assert rows[0].split(",")[:3] == ["id", "label", "g0"] and len(rows[0].split(",")) == 41
    assert rows[2].startswith("b/2,y,")
