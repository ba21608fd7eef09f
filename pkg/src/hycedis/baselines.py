"""Comparison confidence scores built only from the host model's softmax outputs."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .corpus import FeatureRecord, Split, true_key, true_text
from .errors import DataError, DimensionError, DomainError
from .nn_core import MLP, Adam, Dense, Module, bce_grad, bce_loss, dropout_mask, softmax, softmax_cross_entropy

LOG_T_BOUNDS = (math.log(0.05), math.log(20.0))
TEMPERATURE_XATOL = 1e-3


# softmax threshold -----------------------------------------------------------


def ocr_probability(crnn_logits: np.ndarray, temperature: float = 1.0) -> float:
    """Geometric mean over timesteps of the max softmax probability."""
    z = np.atleast_2d(np.asarray(crnn_logits, dtype=np.float64))
    if z.shape[0] == 0:
        raise DomainError("CRNN trace must have at least one timestep")
    p_max = softmax(z / temperature).max(axis=-1)
    return float(np.exp(np.mean(np.log(p_max))))


def kv_probability(kv_logits: np.ndarray, temperature: float = 1.0) -> float:
    return float(softmax(np.asarray(kv_logits, dtype=np.float64) / temperature).max())


def softmax_threshold_score(record: FeatureRecord, t_ocr: float = 1.0, t_kv: float = 1.0) -> float:
    """p_OCR * p_KV."""
    return ocr_probability(record.crnn_logits, t_ocr) * kv_probability(record.kv_logits, t_kv)


def tune_threshold(scores, labels) -> float:
    """Cut-off maximizing accuracy of ``score >= threshold`` as a correctness decision."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if len(s) == 0:
        raise DataError("need at least one score to tune a threshold")
    order = np.argsort(s, kind="stable")
    s, y = s[order], y[order]
    # predicting "correct" for s[i:] : negatives below i are right, positives from i on are right
    neg_below = np.concatenate([[0], np.cumsum(y == 0)])
    pos_from = np.concatenate([np.cumsum((y == 1)[::-1])[::-1], [0]])
    acc = neg_below + pos_from
    # a threshold can only sit between distinct values
    valid = np.ones(len(s) + 1, dtype=bool)
    valid[1:-1] = s[1:] != s[:-1]
    best = int(np.flatnonzero(valid)[np.argmax(acc[valid])])
    if best == 0:
        return float(s[0])
    if best == len(s):
        return float(np.nextafter(s[-1], np.inf))
    return float(0.5 * (s[best - 1] + s[best]))


@dataclass
class SoftmaxThreshold:
    threshold: float = 0.5

    def fit(self, records: Sequence[FeatureRecord]) -> "SoftmaxThreshold":
        labels = np.array([r.label for r in records])
        self.threshold = tune_threshold(self.score(records), labels)
        return self

    def score(self, records: Sequence[FeatureRecord]) -> np.ndarray:
        return np.array([softmax_threshold_score(r) for r in records])

    def decide(self, records: Sequence[FeatureRecord]) -> np.ndarray:
        return (self.score(records) >= self.threshold).astype(np.int64)


# temperature scaling -----------------------------------------------------------


@dataclass(frozen=True)
class TemperatureParam:
    t: float

    def __post_init__(self):
        if not (self.t > 0 and math.isfinite(self.t)):
            raise DomainError("temperature must be positive and finite")


def temperature_nll(logits: np.ndarray, labels: np.ndarray, t: float) -> float:
    return softmax_cross_entropy(np.asarray(logits, dtype=np.float64) / t, np.asarray(labels))[0]


def fit_temperature(logits, labels, min_pairs: int = 10) -> TemperatureParam:
    """Scalar T minimizing validation NLL of ``softmax(logits / T)``, searched on log T."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or len(z) != len(y):
        raise DimensionError("logits must be N x C with one label per row")
    if len(y) < min_pairs:
        raise DataError(f"need at least {min_pairs} validation pairs, got {len(y)}")
    if np.unique(y).size < 2:
        raise DataError("validation labels cover a single class")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise DimensionError("label out of range for the logit width")
    res = minimize_scalar(lambda lt: temperature_nll(z, y, math.exp(lt)), bounds=LOG_T_BOUNDS,
                          method="bounded", options={"xatol": TEMPERATURE_XATOL})
    t = math.exp(float(res.x))
    if temperature_nll(z, y, t) > temperature_nll(z, y, 1.0):
        t = 1.0
    return TemperatureParam(t)


def kv_calibration_pairs(split: Split) -> tuple[np.ndarray, np.ndarray]:
    """(KV logits, index of the true key) for every record of ``split``."""
    index = {k: i for i, k in enumerate(split.keys)}
    logits = np.stack([r.kv_logits for r in split.records])
    labels = np.array([index[true_key(r, split.document(r.doc_id))] for r in split.records])
    return logits, labels


def ocr_calibration_pairs(split: Split) -> tuple[np.ndarray, np.ndarray]:
    """Per-timestep (CRNN logits, true character) pairs; records whose lengths disagree are skipped."""
    index = {c: i for i, c in enumerate(split.alphabet)}
    rows, labels = [], []
    for r in split.records:
        text = true_text(r, split.document(r.doc_id))
        if len(text) != len(r.crnn_logits):
            continue
        rows.append(np.asarray(r.crnn_logits))
        labels.extend(index[c] for c in text)
    if not rows:
        raise DataError("no records with aligned CRNN traces")
    return np.concatenate(rows), np.array(labels)


@dataclass
class TemperatureScaling:
    t_ocr: float = 1.0
    t_kv: float = 1.0

    def fit(self, val: Split) -> "TemperatureScaling":
        self.t_ocr = fit_temperature(*ocr_calibration_pairs(val)).t
        self.t_kv = fit_temperature(*kv_calibration_pairs(val)).t
        return self

    def score(self, records: Sequence[FeatureRecord]) -> np.ndarray:
        return np.array([softmax_threshold_score(r, self.t_ocr, self.t_kv) for r in records])


# softmax classifier ------------------------------------------------------------


def pooled_softmax_features(record: FeatureRecord) -> np.ndarray:
    """[mean, min of per-step max prob] ‖ mean OCR softmax ‖ KV softmax."""
    p = softmax(np.atleast_2d(np.asarray(record.crnn_logits, dtype=np.float64)))
    m = p.max(axis=-1)
    return np.concatenate([[m.mean(), m.min()], p.mean(axis=0), softmax(np.asarray(record.kv_logits))])


class SoftmaxClassifier(Module):
    """Feed-forward correctness classifier over pooled softmax outputs."""

    def __init__(self, in_dim: int, hidden: int = 32, seed: int = 0):
        super().__init__()
        self.mlp = MLP([in_dim, hidden, 1], ["relu", "sigmoid"], np.random.default_rng(seed))
        self.children["mlp"] = self.mlp
        self.in_dim = in_dim

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"classifier expects {self.in_dim} features, got {x.shape[-1]}")
        return self.mlp(x)[:, 0]

    def score(self, records: Sequence[FeatureRecord]) -> np.ndarray:
        if not records:
            return np.zeros(0)
        return self.predict(np.stack([pooled_softmax_features(r) for r in records]))

    def mean_bce(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(bce_loss(self.predict(x), y)))

    def fit(self, records: Sequence[FeatureRecord], epochs: int = 60, batch_size: int = 64,
            lr: float = 1e-3, seed: int = 0) -> dict:
        x = np.stack([pooled_softmax_features(r) for r in records])
        y = np.array([r.label for r in records], dtype=np.float64)
        rng = np.random.default_rng(seed)
        opt = Adam(self.named_parameters(), lr=lr)
        history = {"initial_bce": self.mean_bce(x, y)}
        for _ in range(epochs):
            order = rng.permutation(len(y))
            for start in range(0, len(y), batch_size):
                idx = order[start:start + batch_size]
                p, cache = self.mlp.forward(x[idx])
                dp = bce_grad(p[:, 0], y[idx])[:, None] / len(idx)
                _, grads = self.mlp.backward(dp, cache)
                opt.step({f"mlp.{k}": v for k, v in grads.items()})
        history["final_bce"] = self.mean_bce(x, y)
        return history


def softmax_classifier_score(classifier: SoftmaxClassifier, record: FeatureRecord) -> float:
    return float(classifier.predict(pooled_softmax_features(record))[0])


# MC dropout --------------------------------------------------------------------


class KvHead(Module):
    """Surrogate key classifier over KV logits with dropout on its hidden layer."""

    def __init__(self, num_keys: int, hidden: int = 32, rate: float = 0.5, seed: int = 0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise DomainError("dropout rate must lie in [0, 1)")
        rng = np.random.default_rng(seed)
        self.rate = rate
        self.hidden = Dense(num_keys, hidden, "relu", rng=rng)
        self.out = Dense(hidden, num_keys, rng=rng)
        self.children.update(hidden=self.hidden, out=self.out)

    def forward(self, x, rng: np.random.Generator | None = None):
        h, ch = self.hidden.forward(x)
        mask = None
        if rng is not None and self.rate > 0:
            mask = dropout_mask(h.shape, self.rate, rng)
            h = h * mask
        z, co = self.out.forward(h)
        return z, (ch, co, mask)

    def backward(self, dz, cache):
        ch, co, mask = cache
        dh, g_out = self.out.backward(dz, co)
        if mask is not None:
            dh = dh * mask
        dx, g_hidden = self.hidden.backward(dh, ch)
        grads = {f"out.{k}": v for k, v in g_out.items()}
        grads.update({f"hidden.{k}": v for k, v in g_hidden.items()})
        return dx, grads

    def fit(self, split: Split, epochs: int = 60, batch_size: int = 64, lr: float = 1e-3, seed: int = 0):
        """Cross-entropy on the true key of each record, dropout active."""
        x, y = kv_calibration_pairs(split)
        rng = np.random.default_rng(seed)
        opt = Adam(self.named_parameters(), lr=lr)
        for _ in range(epochs):
            order = rng.permutation(len(y))
            for start in range(0, len(y), batch_size):
                idx = order[start:start + batch_size]
                z, cache = self.forward(x[idx], rng)
                _, dz = softmax_cross_entropy(z, y[idx])
                opt.step(self.backward(dz, cache)[1])
        return self


def mc_dropout_score(head: KvHead, record: FeatureRecord, n_passes: int = 20, seed: int = 0,
                     keys: Sequence[str] | None = None) -> tuple[float, float]:
    """(mean, variance) over stochastic passes of the probability of the predicted key."""
    if n_passes < 2:
        raise DomainError("MC dropout needs at least 2 passes")
    kv = np.asarray(record.kv_logits, dtype=np.float64)
    cls = keys.index(record.prediction.key) if keys is not None else int(np.argmax(kv))
    if head.rate == 0:
        return float(softmax(head(kv[None]))[0, cls]), 0.0
    rng = np.random.default_rng(seed)
    x = np.broadcast_to(kv, (n_passes, kv.size))
    z, _ = head.forward(x, rng)
    p = softmax(z)[:, cls]
    return float(p.mean()), float(p.var())


@dataclass
class McDropout:
    head: KvHead
    keys: tuple[str, ...]
    n_passes: int = 20
    seed: int = 0

    def score(self, records: Sequence[FeatureRecord]) -> np.ndarray:
        """p_OCR times the MC-dropout confidence of the predicted key."""
        out = np.empty(len(records))
        for i, r in enumerate(records):
            # per-record stream keyed by id, so scores do not depend on record order
            rec_seed = zlib.crc32(r.record_id.encode()) + (self.seed << 32)
            conf, _ = mc_dropout_score(self.head, r, self.n_passes, rec_seed, self.keys)
            out[i] = ocr_probability(r.crnn_logits) * conf
        return out
