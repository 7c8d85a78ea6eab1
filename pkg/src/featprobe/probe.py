"""Linear decoding of frozen features: z-scoring, softmax regression trained
with minibatch SGD + momentum, least-squares regression, and the reports."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .tensorio import FeatureMatrix

CONSTANT_STD = 1e-8


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def transform(self, x) -> np.ndarray:
        x = np.asarray(getattr(x, "values", x), dtype=np.float64)
        if x.shape[1] != self.mean.size:
            raise ValueError(f"normalizer fitted on {self.mean.size} columns, got {x.shape[1]}")
        z = (x - self.mean) / np.where(self.constant, 1.0, self.std)
        z[:, self.constant] = 0.0
        return z


def fit_normalizer(train) -> Normalizer:
    x = np.asarray(getattr(train, "values", train), dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot fit a normalizer on an empty matrix")
    if x.shape[0] < 2:
        raise ValueError("normalizer needs at least 2 rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return Normalizer(mean, std, std < CONSTANT_STD)


# ---------------------------------------------------------------- logistic regression


@dataclass(frozen=True)
class LogRegConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0


@dataclass
class LogRegModel:
    weights: np.ndarray  # (classes, p)
    bias: np.ndarray  # (classes,)
    config: LogRegConfig
    loss_history: list[float] = field(default_factory=list)

    def logits(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias

    def predict(self, x) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.logits(x), axis=1)


def softmax_xent(weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of softmax(x W^T + b) and its gradients (gW, gb).

    Works in whatever float dtype the inputs carry (e.g. longdouble).
    """
    z = x @ weights.T + bias
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    n = x.shape[0]
    rows = np.arange(n)
    loss = np.mean(np.log(denom[:, 0]) - z[rows, y])
    delta = probs
    delta[rows, y] -= 1
    delta /= n
    return loss, delta.T @ x, delta.sum(axis=0)


def train_logreg(x, y, cfg: LogRegConfig = LogRegConfig(), n_classes: int | None = None,
                 full_batch: bool = False) -> LogRegModel:
    """Zero-initialized softmax regression trained by shuffled minibatch SGD with
    classical momentum (v <- m v - lr g; theta <- theta + v).

    ``loss_history`` holds the full-data loss after each epoch.
    """
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    y = np.asarray(y, dtype=int)
    k = n_classes if n_classes is not None else int(y.max()) + 1
    if np.unique(y).size < 2:
        raise ValueError("need at least 2 classes present in the training labels")
    n, p = x.shape
    w = np.zeros((k, p))
    b = np.zeros(k)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    rng = np.random.default_rng(cfg.seed)
    bs = n if full_batch else cfg.batch_size
    history = []
    # overflow is reported as DivergenceError below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = np.arange(n) if full_batch else rng.permutation(n)
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                loss, gw, gb = softmax_xent(w, b, x[idx], y[idx])
                if not np.isfinite(loss):
                    raise DivergenceError(f"loss became {loss} in epoch {epoch}")
                vw = cfg.momentum * vw - cfg.learning_rate * gw
                vb = cfg.momentum * vb - cfg.learning_rate * gb
                w = w + vw
                b = b + vb
            epoch_loss = softmax_xent(w, b, x, y)[0]
            if not (np.isfinite(epoch_loss) and np.all(np.isfinite(w))):
                raise DivergenceError(f"parameters diverged in epoch {epoch}")
            history.append(float(epoch_loss))
    return LogRegModel(w, b, cfg, history)


# ---------------------------------------------------------------- least squares


@dataclass
class OLSModel:
    coef: np.ndarray
    intercept: float

    def predict(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.coef + self.intercept


def train_ols(x, y) -> OLSModel:
    """Minimum-norm least squares with an intercept column (SVD-based lstsq)."""
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("no training rows")
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    sol, *_ = np.linalg.lstsq(design, y, rcond=None)
    return OLSModel(sol[:-1], float(sol[-1]))


def rmse(pred, target) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(d**2)))


# ---------------------------------------------------------------- reports


@dataclass
class DecodeReport:
    task: str
    metric: str  # accuracy | rmse
    values: list[float]
    seeds: list[int]
    baseline: float
    confusion: np.ndarray | None = None
    feature: str = ""

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))

    def formatted(self) -> str:
        if self.metric == "accuracy":
            return f"{100 * self.mean:.2f} ± {100 * self.std:.2f}%"
        return f"{self.mean:.4f} ± {self.std:.4f}"


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def eval_classifier(model: LogRegModel, x, y) -> tuple[float, np.ndarray]:
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.shape[1] != model.weights.shape[1]:
        raise ValueError(f"model expects {model.weights.shape[1]} features, got {x.shape[1]}")
    pred = model.predict(x)
    cm = confusion_matrix(y, pred, model.weights.shape[0])
    return float(np.trace(cm) / cm.sum()), cm


def majority_baseline(y_train, y_test) -> float:
    """Test accuracy of always predicting the most frequent training class."""
    majority = int(np.argmax(np.bincount(np.asarray(y_train, dtype=int))))
    return float(np.mean(np.asarray(y_test) == majority))


def decode_classification(features, y, train_idx, test_idx, seeds: Sequence[int] = (0,),
                          cfg: LogRegConfig = LogRegConfig(), task: str = "",
                          feature: str = "") -> DecodeReport:
    """Normalize on train, fit one classifier per shuffle seed, score on test."""
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    y = np.asarray(y, dtype=int)
    norm = fit_normalizer(x[train_idx])
    xtr, xte = norm.transform(x[train_idx]), norm.transform(x[test_idx])
    k = int(y.max()) + 1
    accs, total_cm = [], np.zeros((k, k), dtype=np.int64)
    for seed in seeds:
        model = train_logreg(xtr, y[train_idx], replace(cfg, seed=int(seed)), n_classes=k)
        acc, cm = eval_classifier(model, xte, y[test_idx])
        accs.append(acc)
        total_cm += cm
    return DecodeReport(task, "accuracy", accs, [int(s) for s in seeds],
                        majority_baseline(y[train_idx], y[test_idx]), total_cm, feature)


def decode_regression(features, y, train_idx, test_idx, task: str = "",
                      feature: str = "") -> DecodeReport:
    """Normalize on train, fit OLS once, report test RMSE vs. the train-mean predictor."""
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    norm = fit_normalizer(x[train_idx])
    model = train_ols(norm.transform(x[train_idx]), y[train_idx])
    err = rmse(model.predict(norm.transform(x[test_idx])), y[test_idx])
    base = rmse(np.full(len(test_idx), y[train_idx].mean()), y[test_idx])
    return DecodeReport(task, "rmse", [err], [], base, None, feature)


def decode(features, y, kind: str, train_idx, test_idx, seeds=(0,),
           cfg: LogRegConfig = LogRegConfig(), task: str = "", feature: str = "") -> DecodeReport:
    if kind == "classification":
        return decode_classification(features, y, train_idx, test_idx, seeds, cfg, task, feature)
    if kind == "regression":
        return decode_regression(features, y, train_idx, test_idx, task, feature)
    raise ValueError(f"unknown task kind {kind!r}")


def concat_decode(blocks: Sequence, y, kind: str, train_idx, test_idx, seeds=(0,),
                  cfg: LogRegConfig = LogRegConfig(), task: str = "",
                  feature: str = "") -> DecodeReport:
    """Decode from the horizontal concatenation of several feature blocks."""
    if not blocks:
        raise ValueError("no feature blocks to concatenate")
    mats = [b if isinstance(b, FeatureMatrix) else FeatureMatrix(b) for b in blocks]
    joined = FeatureMatrix.hstack(mats)
    return decode(joined, y, kind, train_idx, test_idx, seeds, cfg, task, feature)


def cross_task_matrix(feature_sets: Mapping[str, object], targets: Mapping[str, np.ndarray],
                      kinds: Mapping[str, str], train_idx, test_idx, seeds=(0,),
                      cfg: LogRegConfig = LogRegConfig()) -> dict[tuple[str, str], DecodeReport]:
    """Decode every target task from every source feature set."""
    out = {}
    for src, feats in feature_sets.items():
        for tgt, y in targets.items():
            out[(src, tgt)] = decode(feats, y, kinds[tgt], train_idx, test_idx, seeds, cfg,
                                     task=tgt, feature=src)
    return out
