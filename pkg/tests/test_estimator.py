import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from mssenet.dsp import write_wav
from mssenet.estimator import MfccExtractor, MSSENetClassifier
from mssenet.training import FittedFold

TINY = dict(tff_filters=2, n_tab=2, tab_filters=4, epochs=2, batch_size=4)


def _toy(rng, n_per=4, K=3):
    X = [rng.normal(size=(int(rng.integers(9, 14)), 39)) + 2.0 * k for k in range(K) for _ in range(n_per)]
    y = np.repeat(np.array(["calm", "happy", "sad"][:K]), n_per)
    return X, y


def test_params_and_clone():
    est = MSSENetClassifier(n_tab=3, learning_rate=0.01)
    p = est.get_params()
    assert p["n_tab"] == 3 and p["learning_rate"] == 0.01
    c = clone(est)
    assert c.get_params() == p and c is not est
    assert est.set_params(epochs=7).epochs == 7


def test_fit_predict_transform(rng):
    X, y = _toy(rng)
    est = MSSENetClassifier(**TINY).fit(X, y)
    assert list(est.classes_) == ["calm", "happy", "sad"]
    proba = est.predict_proba(X)
    assert proba.shape == (12, 3) and np.allclose(proba.sum(axis=1), 1.0, atol=1e-5)
    assert set(est.predict(X)) <= set(est.classes_)
    assert est.transform(X).shape == (12, 4)
    assert len(est.loss_curve_) == 2


def test_seeded_fit_is_reproducible(rng):
    X, y = _toy(rng)
    a = MSSENetClassifier(**TINY, random_state=3).fit(X, y).predict_proba(X)
    b = MSSENetClassifier(**TINY, random_state=3).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_from_fitted(rng):
    X, y = _toy(rng)
    est = MSSENetClassifier(**TINY).fit(X, y)
    wrapped = MSSENetClassifier.from_fitted(
        FittedFold(est.fitted_model, est.fitted_.scaler, est.fitted_.pad_frames, []), est.classes_)
    assert np.array_equal(wrapped.predict_proba(X), est.predict_proba(X))


def test_not_fitted(rng):
    with pytest.raises(NotFittedError):
        MSSENetClassifier().predict([rng.normal(size=(5, 39))])


@pytest.mark.parametrize("X,err", [
    ([], ValueError),
    ([np.zeros((5, 38))], ValueError),
    ([np.full((5, 39), np.nan)], ValueError),
    (np.zeros((5, 39)), ValueError),
    (5, TypeError),
])
def test_input_validation(X, err):
    with pytest.raises(err):
        MSSENetClassifier(**TINY).fit(X, [0] * (len(X) if hasattr(X, "__len__") else 1))


def test_label_length_mismatch(rng):
    X, _ = _toy(rng)
    with pytest.raises(ValueError, match="samples"):
        MSSENetClassifier(**TINY).fit(X, [0, 1])


def test_single_class_rejected(rng):
    X, _ = _toy(rng, K=1)
    with pytest.raises(ValueError, match="two classes"):
        MSSENetClassifier(**TINY).fit(X, ["a"] * len(X))


def test_extractor_pipeline(tmp_path, rng):
    tone = np.sin(2 * np.pi * 300 * np.arange(8000) / 16000)
    write_wav(tmp_path / "a.wav", tone * 0.5, 16000)
    ext = MfccExtractor()
    feats = ext.fit_transform([str(tmp_path / "a.wav"), tone * 0.5, tone * 0.05])
    assert [f.shape for f in feats] == [(37, 39)] * 3
    # 16-bit quantisation only disturbs the near-empty bands; the tone's own band agrees.
    assert abs(feats[0][:, 1].mean() - feats[1][:, 1].mean()) < 0.1
    assert feats[2][:, 0].mean() < feats[1][:, 0].mean()
    X = [rng.normal(size=8000) * (1 + k) for k in range(6)]
    pipe = make_pipeline(MfccExtractor(), MSSENetClassifier(**TINY))
    pipe.fit(X, [0, 1, 0, 1, 0, 1])
    assert pipe.predict(X).shape == (6,)
