"""scikit-learn compatible wrappers around the MFCC front end and the network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_mfcc_sequences
from .dsp import DspConfig, Utterance, build_mel_filterbank, extract_mfcc, load_wav
from .model import ModelConfig
from .training import FittedFold, TrainConfig, embed, fit_network, predict_proba, prepare


class MfccExtractor(TransformerMixin, BaseEstimator):
    """Turn audio into ``[T, 39]`` MFCC matrices.

    ``transform`` accepts WAV paths, :class:`~mssenet.dsp.Utterance` objects,
    or raw 1-D sample arrays (which use ``sample_rate``).  Stateless: ``fit``
    only validates parameters.
    """

    def __init__(self, frame_ms=50.0, hop_ms=12.5, n_filters=40, fft_size=2048, log_floor=1e-10,
                 sample_rate=16000):
        self.frame_ms = frame_ms
        self.hop_ms = hop_ms
        self.n_filters = n_filters
        self.fft_size = fft_size
        self.log_floor = log_floor
        self.sample_rate = sample_rate

    def dsp_config(self) -> DspConfig:
        return DspConfig(self.frame_ms, self.hop_ms, self.n_filters, self.fft_size, self.log_floor)

    def fit(self, X=None, y=None):
        self.dsp_config_ = self.dsp_config()
        return self

    def transform(self, X) -> list[np.ndarray]:
        cfg = self.dsp_config()
        banks = {}
        out = []
        for item in X:
            if isinstance(item, Utterance):
                u = item
            elif isinstance(item, (str, bytes)) or hasattr(item, "__fspath__"):
                u = load_wav(item)
            else:
                u = Utterance(np.asarray(item, dtype=np.float64), self.sample_rate)
            if u.sample_rate not in banks:
                banks[u.sample_rate] = build_mel_filterbank(u.sample_rate, cfg.n_filters, cfg.fft_size)
            out.append(extract_mfcc(u, banks[u.sample_rate], cfg).coeffs)
        return out


class MSSENetClassifier(ClassifierMixin, BaseEstimator):
    """Speech-emotion classifier over MFCC sequences.

    ``X`` is a sequence of ``[T_i, 39]`` matrices (or one ``[n, T, 39]``
    array).  Sequences are z-scored per coefficient with training statistics
    and zero-padded/truncated to ``pad_frames`` (default: longest training
    sequence).  ``transform`` returns the fused 39-dimensional embeddings.
    """

    def __init__(self, tff_filters=39, tff_kernels=((9, 1), (1, 11), (3, 3)), tff_dropout=0.2,
                 se_ratio=4, n_tab=10, tab_filters=39, tab_kernel=2, tab_dropout=0.1, variant="full",
                 epochs=50, batch_size=32, learning_rate=1e-3, optimizer="adam", pad_frames=None,
                 standardize=True, random_state=0):
        self.tff_filters = tff_filters
        self.tff_kernels = tff_kernels
        self.tff_dropout = tff_dropout
        self.se_ratio = se_ratio
        self.n_tab = n_tab
        self.tab_filters = tab_filters
        self.tab_kernel = tab_kernel
        self.tab_dropout = tab_dropout
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.pad_frames = pad_frames
        self.standardize = standardize
        self.random_state = random_state

    def model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(
            tff_filters_per_path=self.tff_filters, tff_kernels=[list(k) for k in self.tff_kernels],
            tff_dropout=self.tff_dropout, se_ratio=self.se_ratio, n_tab=self.n_tab,
            tab_filters=self.tab_filters, tab_kernel=self.tab_kernel, tab_dropout=self.tab_dropout,
            n_classes=n_classes, variant=self.variant)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, optimizer=self.optimizer,
                           seed=int(self.random_state or 0), pad_frames=self.pad_frames,
                           standardize=self.standardize)

    def fit(self, X, y):
        seqs = check_mfcc_sequences(X)
        y = check_labels(y, len(seqs))
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples from at least two classes")
        pad = self.pad_frames or max(s.shape[0] for s in seqs)
        self.fitted_ = fit_network(seqs, y_enc, self.model_config(len(self.classes_)),
                                   self.train_config(), pad)
        self.n_features_in_ = seqs[0].shape[1]
        self.loss_curve_ = self.fitted_.loss_curve
        return self

    def _inputs(self, X) -> np.ndarray:
        check_is_fitted(self, "fitted_")
        f = self.fitted_
        return prepare(check_mfcc_sequences(X), f.scaler, f.pad_frames)

    def predict_proba(self, X) -> np.ndarray:
        return predict_proba(self.fitted_model, self._inputs(X)).astype(np.float64)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        return embed(self.fitted_model, self._inputs(X)).astype(np.float64)

    @property
    def fitted_model(self):
        check_is_fitted(self, "fitted_")
        return self.fitted_.model

    @classmethod
    def from_fitted(cls, fitted: FittedFold, classes) -> "MSSENetClassifier":
        """Wrap an already trained network (e.g. one loaded from a checkpoint)."""
        c = fitted.model.cfg
        est = cls(tff_filters=c.tff_filters_per_path, tff_kernels=tuple(map(tuple, c.tff_kernels)),
                  tff_dropout=c.tff_dropout, se_ratio=c.se_ratio, n_tab=c.n_tab, tab_filters=c.tab_filters,
                  tab_kernel=c.tab_kernel, tab_dropout=c.tab_dropout, variant=c.variant,
                  pad_frames=fitted.pad_frames)
        est.classes_ = np.asarray(classes)
        est.fitted_ = fitted
        est.n_features_in_ = c.n_mfcc
        est.loss_curve_ = fitted.loss_curve
        return est
