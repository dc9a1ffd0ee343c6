"""Loss, optimisers, UAR/WAR, stratified folds, and the CV / ablation harness."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .model import VARIANT_LABELS, VARIANTS, ModelConfig, MSSENet, build_variant
from .numerics import ConfigurationError, Rng, Tensor

log = logging.getLogger(__name__)


class LabelError(ValueError):
    pass


class EmptyEvaluationError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    folds: int = 10
    pad_frames: int | None = None
    standardize: bool = True

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.folds < 2:
            raise ConfigurationError("folds must be >= 2")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.pad_frames is not None and self.pad_frames < 1:
            raise ConfigurationError("pad_frames must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- loss and optimisation

def cross_entropy(probs: Tensor, true_class) -> Tensor:
    """Mean negative log-probability of the true classes; probabilities clamped at 1e-12."""
    K = probs.shape[-1]
    y = np.atleast_1d(np.asarray(true_class))
    if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= K):
        raise LabelError(f"class ids must lie in [0, {K}), got {true_class}")
    if probs.ndim == 1:
        picked = nx.index(probs, (int(y[0]),))
    else:
        picked = nx.index(probs, (np.arange(probs.shape[0]), y))
    return nx.mul(nx.mean(nx.log(nx.clip_min(picked, 1e-12))), -1.0)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
                   cfg: TrainConfig) -> dict:
    """Update ``params`` in place; returns the (mutated) optimiser state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        for name, g in grads.items():
            params[name] -= lr * g
        return state
    t = state.get("t", 0) + 1
    state["t"] = t
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        if name not in m:
            m[name] = np.zeros_like(g)
            v[name] = np.zeros_like(g)
        m[name] = b1 * m[name] + (1 - b1) * g
        v[name] = b2 * v[name] + (1 - b2) * g * g
        update = lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.adam_epsilon)
        params[name] -= update.astype(params[name].dtype)
    return state


# ---------------------------------------------------------------- metrics

def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def uar_war(confusion) -> tuple[float, float]:
    """Unweighted (mean per-class recall) and weighted (accuracy) average recall.

    Rows are true classes; classes with no samples are left out of the UAR mean.
    Both values are computed exactly and rounded once, so balanced matrices
    give UAR == WAR bit for bit.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise EmptyEvaluationError("confusion matrix is empty")
    rows = cm.sum(axis=1)
    diag = np.diag(cm)
    recalls = [Fraction(int(d), int(r)) for d, r in zip(diag, rows) if r > 0]
    return float(sum(recalls) / len(recalls)), float(Fraction(int(diag.sum()), total))


@dataclass
class EvalReport:
    confusion: np.ndarray
    uar: float
    war: float
    per_fold: list[dict] = field(default_factory=list)
    class_names: list[str] | None = None

    @classmethod
    def from_folds(cls, folds: list[dict], class_names=None) -> "EvalReport":
        total = sum(np.asarray(f["confusion"]) for f in folds)
        uar, war = uar_war(total)
        return cls(total, uar, war, folds, class_names)

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "uar": self.uar,
            "war": self.war,
            "n_samples": self.n_samples,
            "confusion": self.confusion.tolist(),
            "class_names": self.class_names,
            "per_fold": [{**f, "confusion": np.asarray(f["confusion"]).tolist()} for f in self.per_fold],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(np.asarray(d["confusion"], dtype=np.int64), d["uar"], d["war"], d["per_fold"],
                   d.get("class_names"))


# ---------------------------------------------------------------- splits

def stratified_kfold(labels, k: int = 10, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded stratified k-fold split.

    Each class is shuffled and dealt round-robin across folds, starting where
    the previous class stopped, so per-class and total fold sizes both differ
    by at most one.
    """
    y = np.asarray(labels)
    n = y.size
    if k < 2:
        raise ConfigurationError("k must be >= 2")
    if k > n:
        raise ConfigurationError(f"cannot make {k} folds from {n} samples")
    rng = Rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    offset = 0
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(members.size)]
        fold_of[members] = (offset + np.arange(members.size)) % k
        offset += members.size
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, test))
    return folds


def stratified_holdout(labels, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split with ``round(test_fraction * n_c)`` test items per class."""
    y = np.asarray(labels)
    rng = Rng(seed)
    test = []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(members.size)]
        test.extend(members[: int(round(test_fraction * members.size))])
    test = np.sort(np.asarray(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(y.size), test)
    return train, test


# ---------------------------------------------------------------- batching

@dataclass
class Standardizer:
    """Per-coefficient z-scoring fitted on training frames."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: Sequence[np.ndarray]) -> "Standardizer":
        frames = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=0)
        std = frames.std(axis=0)
        return cls(frames.mean(axis=0), np.where(std > 1e-8, std, 1.0))

    @classmethod
    def identity(cls, n: int = 39) -> "Standardizer":
        return cls(np.zeros(n), np.ones(n))

    def apply(self, f: np.ndarray) -> np.ndarray:
        return ((np.asarray(f, dtype=np.float64) - self.mean) / self.std).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


def pad_or_truncate(features: Sequence[np.ndarray], pad_frames: int) -> np.ndarray:
    """Stack ``[T_i, 39]`` matrices into ``[N, pad_frames, 39]`` (zero pad at the end)."""
    out = np.zeros((len(features), pad_frames, features[0].shape[1]), dtype=np.float32)
    for i, f in enumerate(features):
        n = min(pad_frames, f.shape[0])
        out[i, :n] = f[:n]
    return out


def to_model_input(X: np.ndarray) -> np.ndarray:
    """``[N, T, 39] -> [N, 39, T, 1]`` (coefficient-major maps)."""
    return np.ascontiguousarray(np.asarray(X).transpose(0, 2, 1)[..., None])


def prepare(features: Sequence[np.ndarray], scaler: Standardizer, pad_frames: int) -> np.ndarray:
    return to_model_input(pad_or_truncate([scaler.apply(f) for f in features], pad_frames))


# ---------------------------------------------------------------- training

def train_fold(model: MSSENet, X: np.ndarray, y, cfg: TrainConfig) -> tuple[MSSENet, list[float]]:
    """Fit ``model`` in place on model-ready inputs ``X`` (``[N, 39, T, 1]``).

    Returns the model and the per-epoch mean training loss.
    """
    y = np.asarray(y, dtype=np.int64)
    X = np.asarray(X, dtype=model.params["head.W"].dtype)
    rng = Rng(cfg.seed)
    names = list(model.params.weights)
    values = {k: model.params.weights[k].data for k in names}
    state: dict = {}
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for b, start in enumerate(range(0, len(y), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            model.params.zero_grad()
            probs, _ = model.forward(Tensor(X[idx]), rng, training=True)
            loss = cross_entropy(probs, y[idx])
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise TrainingError(f"loss became {lv} at epoch {epoch + 1}, batch {b + 1}")
            loss.backward()
            grads = {k: model.params.weights[k].grad for k in names if model.params.weights[k].grad is not None}
            try:
                optimizer_step(values, grads, state, cfg)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch + 1}, batch {b + 1}") from None
            total += lv * len(idx)
        curve.append(total / len(y))
        log.debug("epoch %d loss %.5f", epoch + 1, curve[-1])
    model.params.zero_grad()
    model.trained = True
    return model, curve


def predict_proba(model: MSSENet, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    X = np.asarray(X, dtype=model.params["head.W"].dtype)
    out = [model.forward(Tensor(X[s:s + batch_size]))[0].data for s in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0)


def embed(model: MSSENet, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    X = np.asarray(X, dtype=model.params["head.W"].dtype)
    out = [model.forward(Tensor(X[s:s + batch_size]))[1].data for s in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0)


@dataclass
class FittedFold:
    model: MSSENet
    scaler: Standardizer
    pad_frames: int
    loss_curve: list[float]


def fit_network(features: Sequence[np.ndarray], y, model_cfg: ModelConfig, cfg: TrainConfig,
                pad_frames: int) -> FittedFold:
    scaler = Standardizer.fit(features) if cfg.standardize else Standardizer.identity(features[0].shape[1])
    model = build_variant(model_cfg, seed=cfg.seed)
    model, curve = train_fold(model, prepare(features, scaler, pad_frames), y, cfg)
    return FittedFold(model, scaler, pad_frames, curve)


Learner = Callable[[list, np.ndarray, list, int], np.ndarray]


def _network_fold(features, y, train, test, model_cfg, cfg, fold, pad_frames):
    fold_cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + fold})
    fitted = fit_network([features[i] for i in train], y[train], model_cfg, fold_cfg, pad_frames)
    X_test = prepare([features[i] for i in test], fitted.scaler, pad_frames)
    pred = predict_proba(fitted.model, X_test).argmax(axis=1)
    return pred, fitted


def run_cv(features: Sequence[np.ndarray], labels, model_cfg: ModelConfig, cfg: TrainConfig,
           class_names=None, learner: Learner | None = None, n_jobs: int = 1,
           keep_models: bool = False):
    """Stratified k-fold evaluation; fold ``i`` trains with seed ``cfg.seed + i``.

    ``learner(train_features, train_labels, test_features, seed)`` may replace
    the network (it must return predicted class ids).  Returns the report, and
    the per-fold fitted networks too when ``keep_models`` is set.
    """
    y = np.asarray(labels, dtype=np.int64)
    K = model_cfg.n_classes
    pad_frames = cfg.pad_frames or max(f.shape[0] for f in features)
    splits = stratified_kfold(y, cfg.folds, cfg.seed)

    def run(fold, train, test):
        if learner is not None:
            pred = learner([features[i] for i in train], y[train], [features[i] for i in test], cfg.seed + fold)
            return np.asarray(pred), None
        return _network_fold(features, y, train, test, model_cfg, cfg, fold, pad_frames)

    if n_jobs == 1:
        results = [run(f, tr, te) for f, (tr, te) in enumerate(splits)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(run)(f, tr, te) for f, (tr, te) in enumerate(splits))
    folds = []
    fitted = []
    for f, ((train, test), (pred, fit)) in enumerate(zip(splits, results)):
        cm = confusion_matrix(y[test], pred, K)
        uar, war = uar_war(cm)
        entry = {"fold": f, "seed": cfg.seed + f, "n_train": int(train.size), "n_test": int(test.size),
                 "uar": uar, "war": war, "confusion": cm,
                 "test_index": test.tolist()}
        if fit is not None:
            entry["final_loss"] = fit.loss_curve[-1] if fit.loss_curve else None
        folds.append(entry)
        fitted.append(fit)
        log.info("fold %d/%d: UAR %.4f WAR %.4f", f + 1, len(splits), uar, war)
    report = EvalReport.from_folds(folds, class_names)
    return (report, fitted) if keep_models else report


def run_ablation_suite(features, labels, base_cfg: ModelConfig, cfg: TrainConfig, class_names=None,
                       variants: Sequence[str] = VARIANTS, n_jobs: int = 1) -> dict[str, EvalReport]:
    """One :func:`run_cv` per variant with identical seeds and folds."""
    reports = {}
    for v in variants:
        vcfg = ModelConfig.from_dict({**base_cfg.to_dict(), "variant": v})
        log.info("ablation variant %s", v)
        reports[v] = run_cv(features, labels, vcfg, cfg, class_names, n_jobs=n_jobs)
    return reports


def ablation_csv(reports: dict[str, EvalReport]) -> str:
    """Rows ``variant,uar,war,fold``: one per fold plus an ``all`` aggregate per variant."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "uar", "war", "fold"])
    for v, rep in reports.items():
        name = VARIANT_LABELS[v]
        for f in rep.per_fold:
            w.writerow([name, repr(f["uar"]), repr(f["war"]), f["fold"]])
        w.writerow([name, repr(rep.uar), repr(rep.war), "all"])
    return buf.getvalue()


# ---------------------------------------------------------------- embeddings

def export_embeddings(fitted: FittedFold, features: Sequence[np.ndarray], ids: Sequence[str],
                      labels: Sequence[str], out=None) -> str:
    """CSV ``id,label,g_0..g_{D-1}`` of fused embeddings in eval mode.

    Writes to ``out`` (path or text stream) when given; always returns the text.
    """
    if not fitted.model.trained:
        raise ValueError("refusing to export embeddings from an untrained model")
    if not (len(features) == len(ids) == len(labels)):
        raise ValueError("features, ids and labels must have equal length")
    G = embed(fitted.model, prepare(features, fitted.scaler, fitted.pad_frames))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label"] + [f"g{i}" for i in range(G.shape[1])])
    for uid, lab, g in zip(ids, labels, G):
        w.writerow([uid, lab] + [repr(float(v)) for v in g])
    text = buf.getvalue()
    if isinstance(out, (str, Path)):
        Path(out).write_text(text)
    elif out is not None:
        out.write(text)
    return text
