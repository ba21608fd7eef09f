"""Visual, lingual and structural encoders over one prediction's IE traces."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError
from .nn_core import LSTM, MLP, Module, prefixed

MAX_TEXT_LEN = 128


@dataclass(frozen=True)
class OcrText:
    chars: tuple[int, ...]
    corpus_size: int

    def __post_init__(self):
        if not self.chars:
            raise DomainError("OCR text must be non-empty")
        if any(c < 0 or c >= self.corpus_size for c in self.chars):
            raise DomainError(f"character index out of range for corpus of size {self.corpus_size}")

    @classmethod
    def from_string(cls, text: str, alphabet: str) -> "OcrText":
        lookup = {c: i for i, c in enumerate(alphabet)}
        try:
            return cls(tuple(lookup[c] for c in text), len(alphabet))
        except KeyError as exc:
            raise DomainError(f"character {exc} not in alphabet") from None


@dataclass
class EncodedFeatures:
    e_vis: np.ndarray
    e_ocr: np.ndarray
    e_node: np.ndarray


def one_hot_encode(text: OcrText) -> np.ndarray:
    out = np.zeros((len(text.chars), text.corpus_size))
    out[np.arange(len(text.chars)), list(text.chars)] = 1.0
    return out


def encode_visual(encoder: LSTM, trace: np.ndarray) -> np.ndarray:
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim != 2 or trace.shape[0] == 0:
        raise DomainError("CRNN trace must be a non-empty T x F array")
    return encoder(trace[None])[0]


def encode_lingual(encoder: LSTM, text: OcrText) -> np.ndarray:
    return encoder(one_hot_encode(text)[None])[0]


def encode_structural(encoder: MLP, kv_logits: np.ndarray) -> np.ndarray:
    kv = np.asarray(kv_logits, dtype=np.float64)
    if kv.shape[-1] != encoder.in_dim:
        raise DimensionError(f"structural encoder expects {encoder.in_dim} logits, got {kv.shape[-1]}")
    return encoder(kv)


@dataclass
class TraceBatch:
    """Padded, model-ready arrays for a set of records."""

    crnn: np.ndarray  # (N, T, F_in_vis) sorted log-probs, standardized
    crnn_len: np.ndarray
    ocr: np.ndarray  # (N, T, corpus) one-hot
    ocr_len: np.ndarray
    kv: np.ndarray  # (N, num_keys)
    anomaly: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.kv)

    def take(self, idx: np.ndarray) -> "TraceBatch":
        cl, ol = self.crnn_len[idx], self.ocr_len[idx]
        return TraceBatch(self.crnn[idx, : cl.max()], cl, self.ocr[idx, : ol.max()], ol,
                          self.kv[idx], self.anomaly[idx])


def crnn_features(trace: np.ndarray) -> np.ndarray:
    """Per-step log-probabilities sorted in descending order.

    The visual stream only has to judge how peaked each step is; which
    character won is already carried by the OCR text.
    """
    t = np.asarray(trace, dtype=np.float64)
    shifted = t - t.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return -np.sort(-logp, axis=-1)


class CrnnStandardizer:
    """Per-feature mean/std of the sorted CRNN log-probabilities, fit on the training split."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, traces: Sequence[np.ndarray]) -> "CrnnStandardizer":
        stacked = np.concatenate([crnn_features(t) for t in traces])
        std = stacked.std(axis=0)
        return cls(stacked.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def __call__(self, trace: np.ndarray) -> np.ndarray:
        return (crnn_features(trace) - self.mean) / self.std


def build_batch(
    crnn_traces: Sequence[np.ndarray],
    texts: Sequence[np.ndarray],
    kv_logits: Sequence[np.ndarray],
    anomaly: Sequence[float],
    corpus_size: int,
    standardizer: CrnnStandardizer | None = None,
    max_len: int = MAX_TEXT_LEN,
) -> TraceBatch:
    """Pad variable-length traces; sequences longer than ``max_len`` keep their tail."""
    n = len(kv_logits)
    if not (len(crnn_traces) == len(texts) == len(anomaly) == n):
        raise DimensionError("record components disagree in count")
    crnn_traces = [np.asarray(t, dtype=np.float64)[-max_len:] for t in crnn_traces]
    texts = [np.asarray(t, dtype=np.int64)[-max_len:] for t in texts]
    for t in crnn_traces:
        if t.ndim != 2 or t.shape[0] == 0:
            raise DomainError("CRNN trace must be a non-empty T x F array")
    for t in texts:
        if t.size == 0:
            raise DomainError("OCR text must be non-empty")
        if t.min() < 0 or t.max() >= corpus_size:
            raise DomainError("character index out of range")
    feat = crnn_traces[0].shape[1]
    cl = np.array([len(t) for t in crnn_traces])
    ol = np.array([len(t) for t in texts])
    crnn = np.zeros((n, cl.max(), feat))
    ocr = np.zeros((n, ol.max(), corpus_size))
    for i, (c, t) in enumerate(zip(crnn_traces, texts)):
        crnn[i, : len(c)] = standardizer(c) if standardizer is not None else crnn_features(c)
        ocr[i, np.arange(len(t)), t] = 1.0
    kv = np.stack([np.asarray(k, dtype=np.float64) for k in kv_logits])
    return TraceBatch(crnn, cl, ocr, ol, kv, np.asarray(anomaly, dtype=np.float64))


class FeatureEncoders(Module):
    """The three independent encoding streams."""

    def __init__(
        self,
        vis_in: int,
        ocr_in: int,
        kv_in: int,
        vis_dim: int = 64,
        ocr_dim: int = 64,
        node_dim: int = 32,
        rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.visual = LSTM(vis_in, vis_dim, rng)
        self.lingual = LSTM(ocr_in, ocr_dim, rng)
        self.structural = MLP([kv_in, node_dim, node_dim], ["relu", "identity"], rng)
        self.children.update(visual=self.visual, lingual=self.lingual, structural=self.structural)

    def forward(self, batch: TraceBatch):
        e_vis, c_vis = self.visual.forward(batch.crnn, batch.crnn_len)
        e_ocr, c_ocr = self.lingual.forward(batch.ocr, batch.ocr_len)
        e_node, c_node = self.structural.forward(batch.kv)
        return EncodedFeatures(e_vis, e_ocr, e_node), (c_vis, c_ocr, c_node)

    def backward(self, grads: EncodedFeatures, cache):
        c_vis, c_ocr, c_node = cache
        out = {}
        out.update(prefixed(self.visual.backward(grads.e_vis, c_vis)[1], "visual"))
        out.update(prefixed(self.lingual.backward(grads.e_ocr, c_ocr)[1], "lingual"))
        out.update(prefixed(self.structural.backward(grads.e_node, c_node)[1], "structural"))
        return None, out
