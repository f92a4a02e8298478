# feature_classifier.py - Critic-feature evaluation: pooled features, linear SVM, nearest neighbour
#
# Features are the post-activation outputs of critic layers 2, 3 and 4,
# max-pooled and concatenated in layer order.

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

import autodiff_tensor as ad
import matgan_logger as _mlog
from autodiff_tensor import DimensionError, Tensor

logger = _mlog.get("features")

FEATURE_LAYERS = (2, 3, 4)


class SingleClassError(ValueError):
    pass


class EmptyCorpusError(ValueError):
    pass


# ========== FEATURE EXTRACTION ==========
@dataclass(frozen=True)
class PoolingStage:
    layer: int
    channels: int
    map_size: int
    kernel: int
    stride: int

    @property
    def pooled_size(self):
        return (self.map_size - self.kernel) // self.stride + 1

    @property
    def length(self):
        return self.channels * self.pooled_size ** 3


def pooling_schedule(model_config):
    """Kernel m // 2 and stride m // 4 (at least 1) for a layer map of edge m."""
    sizes = model_config.discriminator_sizes
    channels = model_config.discriminator_channels
    stages = []
    for layer in FEATURE_LAYERS:
        m = sizes[layer]
        stages.append(PoolingStage(layer, channels[layer - 1], m, max(1, m // 2), max(1, m // 4)))
    return tuple(stages)


def feature_length(model_config):
    return int(sum(s.length for s in pooling_schedule(model_config)))


@dataclass
class FeatureSet:
    values: np.ndarray
    stages: tuple

    def __len__(self):
        return self.values.shape[0]


def _as_batch(grids, size):
    arrays = [np.asarray(getattr(g, "data", g)) for g in grids]
    for i, a in enumerate(arrays):
        if a.shape != (size, size, size):
            raise DimensionError("extract_features", f"grid {i} has shape {a.shape}, critic expects {size}³")
    return arrays


def extract_features(discriminator, grids, chunk=32):
    """Pooled layer 2-4 activations for each grid; each grid fills every pack channel."""
    cfg = discriminator.config
    stages = pooling_schedule(cfg)
    arrays = _as_batch(grids, cfg.output_size)
    rows = []
    with ad.no_grad():
        for start in range(0, len(arrays), chunk):
            batch = np.stack(arrays[start:start + chunk]).astype(cfg.np_dtype)
            packed = np.repeat(batch[:, None], cfg.pack_size, axis=1)
            acts = discriminator.activations(Tensor(packed))
            pooled = [ad.flatten(ad.maxpool3d(acts[s.layer - 1], s.kernel, s.stride)).data for s in stages]
            rows.append(np.concatenate(pooled, axis=1))
    values = np.concatenate(rows) if rows else np.empty((0, feature_length(cfg)), dtype=cfg.np_dtype)
    logger.debug(f"Extracted {values.shape[0]} feature vectors of length {values.shape[1]}")
    return FeatureSet(values=values.astype(np.float64), stages=stages)


def write_features_csv(path, features, labels):
    values = getattr(features, "values", features)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["label"] + [f"f{i}" for i in range(values.shape[1])])
        for label, row in zip(labels, values):
            w.writerow([label] + [repr(float(v)) for v in row])


# ========== LINEAR SVM ==========
@dataclass
class LinearModel:
    classes: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray = None
    scale: np.ndarray = None

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.mean is not None:
            x = (x - self.mean) / self.scale
        return x

    def decision_function(self, x):
        return self.transform(x) @ self.weights.T + self.bias


def svm_train(features, labels, C=1.0, epochs=50, seed=0, standardize=False):
    """
    One-vs-rest linear SVMs on the regularized hinge loss, trained by
    per-sample subgradient steps of size 1 / (lambda * t), lambda = 1 / (C * n).
    Sample order per epoch comes from `seed`.
    """
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError("svm_train", f"features {x.shape} do not match {y.shape[0]} labels")
    classes = np.unique(y)
    if classes.size < 2:
        raise SingleClassError(f"svm_train needs at least two classes, got {classes.tolist()}")
    if C <= 0 or epochs < 1:
        raise ValueError(f"C must be positive and epochs >= 1, got C={C}, epochs={epochs}")

    model = LinearModel(classes=classes, weights=None, bias=None)
    if standardize:
        model.mean = x.mean(axis=0)
        std = x.std(axis=0)
        model.scale = np.where(std > 0, std, 1.0)
        x = model.transform(x)

    n, dim = x.shape
    targets = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    lam = 1.0 / (C * n)
    w = np.zeros((classes.size, dim))
    b = np.zeros(classes.size)
    rng = np.random.default_rng(seed)
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            violated = targets[i] * (w @ x[i] + b) < 1.0
            # bias is shrunk with the weights, as if it were a constant feature
            w *= 1.0 - eta * lam
            b *= 1.0 - eta * lam
            w[violated] += eta * targets[i, violated, None] * x[i]
            b[violated] += eta * targets[i, violated]
    model.weights, model.bias = w, b
    logger.info(f"Trained {classes.size} one-vs-rest SVMs on {n} samples x {dim} features "
                f"(C={C}, {epochs} epochs, training accuracy {accuracy(svm_predict(model, x, _raw=True), y):.3f})")
    return model


def svm_predict(model, features, _raw=False):
    """Class with the largest margin; ties go to the lowest class index."""
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    scores = (x @ model.weights.T + model.bias) if _raw else model.decision_function(x)
    return model.classes[np.argmax(scores, axis=1)]


def accuracy(predicted, labels):
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    return float(np.mean(predicted == labels)) if labels.size else 0.0


# ========== NEAREST NEIGHBOUR ==========
def nearest_neighbor(query, corpus):
    """
    Euclidean nearest corpus row; ties go to the lowest index.
    A single query vector gives (index, distance); a matrix gives arrays.
    """
    corpus = np.asarray(getattr(corpus, "values", corpus), dtype=np.float64)
    if corpus.size == 0 or corpus.shape[0] == 0:
        raise EmptyCorpusError("nearest_neighbor needs a non-empty corpus")
    q = np.asarray(getattr(query, "values", query), dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if corpus.ndim != 2 or q.shape[1] != corpus.shape[1]:
        raise DimensionError("nearest_neighbor", f"query width {q.shape[1]} != corpus width {corpus.shape[-1]}")
    dist = cdist(q, corpus, metric="euclidean")
    idx = np.argmin(dist, axis=1)
    nearest = dist[np.arange(q.shape[0]), idx]
    if single:
        return int(idx[0]), float(nearest[0])
    return idx, nearest
