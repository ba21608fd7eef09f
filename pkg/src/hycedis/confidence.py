"""Hybrid confidence estimator: encoders + fusion + anomaly scalar -> p(correct)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .corpus import FeatureRecord, Split, encode_text
from .errors import ConfigError, DataError, DimensionError, TrainingError
from .features import CrnnStandardizer, EncodedFeatures, FeatureEncoders, TraceBatch, build_batch
from .fusion import Fusion
from .nn_core import MLP, Adam, Module, binary_softmax_bce, dropout_mask, prefixed, softmax
from .vcad import VcadModel

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    fusion: str = "bilinear"
    use_vcad: bool = True
    vis_dim: int = 32
    ocr_dim: int = 32
    node_dim: int = 16
    proj_dim: int = 64
    ce_hidden: int = 64
    batch_size: int = 32
    epochs: int = 50
    patience: int = 10
    lr: float = 1e-3
    weight_decay: float = 0.1
    dropout: float = 0.5
    pos_weight: float = 1.0
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.fusion not in ("concat", "bilinear"):
            raise ConfigError(f"fusion must be 'concat' or 'bilinear', got {self.fusion!r}")
        for f in ("vis_dim", "ocr_dim", "node_dim", "proj_dim", "ce_hidden", "batch_size", "epochs"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        if self.patience < 0 or self.lr <= 0 or self.pos_weight <= 0 or self.weight_decay < 0:
            raise ConfigError("patience and weight_decay must be >= 0; lr and pos_weight must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in known:
                raise ConfigError(f"unknown model setting {k!r}")
            default = known[k].default
            try:
                if isinstance(default, bool):
                    v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
                elif isinstance(default, int):
                    v = int(v)
                elif isinstance(default, float):
                    v = float(v)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {k}: {v!r}") from None
            kwargs[k] = v
        return cls(**kwargs).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConfidenceOutput:
    p_correct: float
    field_ref: str
    anomaly: float = 0.0


class ConfidenceModel(Module):
    def __init__(self, config: ModelConfig, vis_in: int, corpus_size: int, num_keys: int):
        super().__init__()
        self.config = config.validate()
        c = self.config
        rng = np.random.default_rng([c.seed, 7])
        self.vis_in, self.corpus_size, self.num_keys = vis_in, corpus_size, num_keys
        self.encoders = FeatureEncoders(vis_in, corpus_size, num_keys, c.vis_dim, c.ocr_dim, c.node_dim, rng)
        self.fusion = Fusion(c.fusion, c.vis_dim, c.ocr_dim, c.node_dim, c.proj_dim, rng)
        self.ce_head = MLP([self.fusion.out_dim + 1, c.ce_hidden, 2], ["relu", "identity"], rng)
        self.children.update(encoders=self.encoders, fusion=self.fusion, ce_head=self.ce_head)
        self.standardizer = CrnnStandardizer(np.zeros(vis_in), np.ones(vis_in))

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        return self.named_parameters()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array needed to restore the model, trainable or fitted."""
        out = dict(self.named_parameters())
        out["standardizer.mean"] = self.standardizer.mean
        out["standardizer.std"] = self.standardizer.std
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.load_parameters(arrays)
        self.standardizer = CrnnStandardizer(arrays["standardizer.mean"], arrays["standardizer.std"])

    def forward(self, batch: TraceBatch, rng: np.random.Generator | None = None):
        """Logits for ``batch``; passing ``rng`` enables dropout on the encoder outputs."""
        enc, c_enc = self.encoders.forward(batch)
        masks = None
        if rng is not None and self.config.dropout > 0:
            masks = tuple(dropout_mask(a.shape, self.config.dropout, rng) for a in (enc.e_vis, enc.e_ocr, enc.e_node))
            enc = _apply_masks(enc, masks)
        fused, c_fus = self.fusion.forward(enc)
        anomaly = batch.anomaly if self.config.use_vcad else np.zeros(len(batch))
        x = np.concatenate([fused, anomaly[:, None]], axis=1)
        logits, c_ce = self.ce_head.forward(x)
        return logits, (c_enc, c_fus, c_ce, masks)

    def backward(self, dlogits: np.ndarray, cache):
        c_enc, c_fus, c_ce, masks = cache
        dx, g_ce = self.ce_head.backward(dlogits, c_ce)
        d_enc, g_fus = self.fusion.backward(dx[:, :-1], c_fus)
        if masks is not None:
            d_enc = _apply_masks(d_enc, masks)
        _, g_enc = self.encoders.backward(d_enc, c_enc)
        grads = prefixed(g_ce, "ce_head")
        grads.update(prefixed(g_fus, "fusion"))
        grads.update(prefixed(g_enc, "encoders"))
        return grads

    def predict_batch(self, batch: TraceBatch, chunk: int = 256) -> np.ndarray:
        # length-sorted chunks keep padding small; results go back in input order
        order = np.argsort(batch.crnn_len, kind="stable")
        p = np.zeros(len(batch))
        for start in range(0, len(batch), chunk):
            idx = order[start:start + chunk]
            p[idx] = softmax(self(batch.take(idx)))[:, 1]
        return p


def _apply_masks(enc: EncodedFeatures, masks) -> EncodedFeatures:
    return EncodedFeatures(enc.e_vis * masks[0], enc.e_ocr * masks[1], enc.e_node * masks[2])


def ce_forward(model: ConfidenceModel, fused: np.ndarray, anomaly: float | np.ndarray) -> np.ndarray:
    """p(correct) from a fused vector (or batch) plus the anomaly scalar."""
    fused = np.atleast_2d(np.asarray(fused, dtype=np.float64))
    if fused.shape[-1] + 1 != model.ce_head.in_dim:
        raise DimensionError(f"CE head expects fused dim {model.ce_head.in_dim - 1}, got {fused.shape[-1]}")
    anomaly = np.broadcast_to(np.asarray(anomaly, dtype=np.float64), (len(fused),))
    return softmax(model.ce_head(np.concatenate([fused, anomaly[:, None]], axis=1)))[:, 1]


def _check_record(r: FeatureRecord) -> None:
    for name in ("crnn_logits", "kv_logits", "doc_feature", "prediction"):
        if getattr(r, name, None) is None:
            raise DataError(f"record {r.record_id} is missing {name}")


def record_anomalies(records: Sequence[FeatureRecord], vcad: VcadModel | None) -> np.ndarray:
    if vcad is None or not records:
        return np.zeros(len(records))
    feats = np.stack([r.doc_feature for r in records])
    uniq, inverse = np.unique(feats, axis=0, return_inverse=True)
    return vcad.score(uniq)[inverse.reshape(-1)]


def make_batch(
    records: Sequence[FeatureRecord],
    alphabet: str,
    standardizer: CrnnStandardizer | None,
    anomalies: np.ndarray | None = None,
) -> TraceBatch:
    for r in records:
        _check_record(r)
    if anomalies is None:
        anomalies = np.zeros(len(records))
    return build_batch(
        [r.crnn_logits for r in records],
        [encode_text(r.prediction.text, alphabet) for r in records],
        [r.kv_logits for r in records],
        anomalies,
        len(alphabet),
        standardizer,
    )


def bucketed_batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator, pool: int = 16):
    """Shuffled minibatches of similar sequence length.

    Records are shuffled, cut into pools of ``pool`` batches, sorted by length
    inside each pool, and the resulting batches are visited in random order.
    """
    order = rng.permutation(len(lengths))
    batches = []
    step = batch_size * pool
    for start in range(0, len(order), step):
        chunk = order[start:start + step]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def mean_bce(model: ConfidenceModel, batch: TraceBatch, labels: np.ndarray) -> float:
    p = model.predict_batch(batch)
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))


def train_hycedis(
    train: Split,
    val: Split | None,
    vcad: VcadModel | None,
    config: ModelConfig | None = None,
    seed: int | None = None,
) -> tuple[ConfidenceModel, dict]:
    """Train encoders, fusion and CE head end-to-end; ``vcad`` is only read.

    Early stopping watches validation BCE and restores the best weights.
    """
    config = (config or ModelConfig()).validate()
    if seed is not None:
        config = ModelConfig(**{**config.to_dict(), "seed": seed})
    if not train.records:
        raise DataError("training split has no records")
    labels = np.array([r.label for r in train.records], dtype=np.float64)
    if np.any([r.label is None for r in train.records]):
        raise DataError("training records must be labeled")
    if config.use_vcad and vcad is None:
        raise DataError("use_vcad is set but no VCAD model was supplied")
    alphabet = train.alphabet
    model = ConfidenceModel(config, len(alphabet) + 1, len(alphabet), len(train.keys))
    model.standardizer = CrnnStandardizer.fit([r.crnn_logits for r in train.records])
    used_vcad = vcad if config.use_vcad else None
    tr_batch = make_batch(train.records, alphabet, model.standardizer, record_anomalies(train.records, used_vcad))
    va_batch = va_labels = None
    if val is not None and val.records:
        va_batch = make_batch(val.records, alphabet, model.standardizer, record_anomalies(val.records, used_vcad))
        va_labels = val.labels.astype(np.float64)

    params = model.trainable_parameters()
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 11])
    n = len(labels)
    initial = mean_bce(model, tr_batch, labels)
    history = {"initial_train_bce": initial, "train_bce": [], "val_bce": []}
    best_val, best_state, best_epoch, stale = math.inf, None, -1, 0
    lengths = tr_batch.crnn_len
    for epoch in range(config.epochs):
        total = 0.0
        for idx in bucketed_batches(lengths, config.batch_size, rng):
            sub = tr_batch.take(idx)
            logits, cache = model.forward(sub, rng)
            loss, dlogits, _ = binary_softmax_bce(logits, labels[idx], config.pos_weight)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = model.backward(dlogits, cache)
            try:
                opt.step(grads)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            total += loss * len(idx)
        history["train_bce"].append(total / n)
        if va_batch is None:
            continue
        v = mean_bce(model, va_batch, va_labels)
        if not math.isfinite(v):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history["val_bce"].append(v)
        log.info("epoch %d train %.4f val %.4f", epoch, total / n, v)
        if v < best_val - 1e-9:
            best_val, best_epoch, stale = v, epoch, 0
            best_state = {k: p.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_state is not None:
        model.load_parameters(best_state)
    history["best_epoch"] = best_epoch
    history["epochs_run"] = len(history["train_bce"])
    history["final_train_bce"] = mean_bce(model, tr_batch, labels)
    if va_batch is not None:
        history["final_val_bce"] = mean_bce(model, va_batch, va_labels)
    return model, history


def predict_confidence(
    model: ConfidenceModel,
    vcad: VcadModel | None,
    records: Sequence[FeatureRecord],
    alphabet: str,
) -> list[ConfidenceOutput]:
    if not records:
        return []
    used = vcad if model.config.use_vcad else None
    anomalies = record_anomalies(records, used)
    batch = make_batch(records, alphabet, model.standardizer, anomalies)
    p = model.predict_batch(batch)
    return [ConfidenceOutput(float(pi), r.record_id, float(a)) for pi, r, a in zip(p, records, anomalies)]
