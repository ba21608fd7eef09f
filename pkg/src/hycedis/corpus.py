"""Synthetic IE-trace corpus: generation, JSONL persistence and loading.

The generator emulates a detection -> OCR -> key-value pipeline. Each document
belongs to a layout cluster (its image descriptor sits near the cluster
centroid) and carries a hidden degradation level. Degradation both scatters the
image descriptor off the cluster manifold and raises the document's OCR and
key-classification error rates, so a document-level anomaly signal carries
information that no single field's logits expose. The OOD split uses shifted
centroids and elevated error rates.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .ie_schema import GROUND_TRUTH, PREDICTION, BBox, IeField, iou, label_predictions

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test", "ood")
DEFAULT_KEYS = ("company", "address", "date", "total", "tax", "invoice_no", "phone", "other")
DEFAULT_ALPHABET = string.ascii_lowercase + string.digits + " /.-"
LOGIT_DECIMALS = 4

_WORDS = (
    "global", "trading", "foods", "mart", "tech", "services", "bakery", "store",
    "express", "sun", "star", "green", "city", "north", "river", "golden", "ocean",
    "royal", "prime", "united", "metro", "coffee", "pharmacy", "books", "hardware",
)
_STREETS = ("jalan", "road", "street", "avenue", "lane", "taman", "lorong")


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 42
    n_train: int = 400
    n_val: int = 50
    n_test: int = 100
    n_ood: int = 60
    min_fields: int = 6
    max_fields: int = 12
    keys: tuple[str, ...] = DEFAULT_KEYS
    shared_keys: tuple[str, ...] = ("company", "address", "date", "total")
    alphabet: str = DEFAULT_ALPHABET
    ocr_error_rate: float = 0.04
    kv_error_rate: float = 0.10
    n_layout_clusters: int = 4
    img_dim: int = 32
    centroid_scale: float = 3.0
    manifold_rank: int = 1
    manifold_scale: float = 1.0
    cluster_noise: float = 0.1
    degradation_noise: float = 8.0
    quality_coupling: float = 1.0
    ood_shift: float = 10.0
    ood_error_scale: float = 2.0
    same_class_substitution: float = 0.7

    def validate(self) -> "CorpusConfig":
        for name in ("ocr_error_rate", "kv_error_rate", "quality_coupling", "same_class_substitution"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("n_train", "n_val", "n_test", "n_ood"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not 1 <= self.min_fields <= self.max_fields:
            raise ConfigError("need 1 <= min_fields <= max_fields")
        if self.n_layout_clusters < 2:
            raise ConfigError("need at least 2 layout clusters")
        if len(set(self.keys)) != len(self.keys) or len(self.keys) < 2:
            raise ConfigError("keys must be at least 2 distinct names")
        if not set(self.shared_keys) <= set(self.keys):
            raise ConfigError("shared_keys must be a subset of keys")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ConfigError("alphabet characters must be distinct")
        missing = set(DEFAULT_ALPHABET) - set(self.alphabet)
        if missing:
            raise ConfigError(f"alphabet lacks characters the generator emits: {sorted(missing)}")
        for name in ("img_dim", "manifold_rank"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("centroid_scale", "manifold_scale", "cluster_noise", "degradation_noise",
                     "ood_shift", "ood_error_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self

    def canonical_text(self) -> str:
        return json.dumps(_jsonable(asdict(self)), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, values: dict) -> "CorpusConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in known:
                raise ConfigError(f"unknown corpus setting {k!r}")
            default = known[k].default
            if isinstance(default, tuple):
                v = tuple(v.split(",")) if isinstance(v, str) else tuple(v)
            elif isinstance(default, bool):
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                try:
                    v = int(v)
                except (TypeError, ValueError):
                    raise ConfigError(f"{k} must be an integer, got {v!r}") from None
            elif isinstance(default, float):
                try:
                    v = float(v)
                except (TypeError, ValueError):
                    raise ConfigError(f"{k} must be a number, got {v!r}") from None
            kwargs[k] = v
        return cls(**kwargs).validate()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


@dataclass
class Document:
    doc_id: str
    doc_feature: np.ndarray
    ground_truth: list[IeField]
    category: int | None = None


@dataclass
class FeatureRecord:
    doc_id: str
    field_index: int
    prediction: IeField
    crnn_logits: np.ndarray
    kv_logits: np.ndarray
    doc_feature: np.ndarray
    label: int | None = None

    @property
    def record_id(self) -> str:
        return f"{self.doc_id}#{self.field_index}"


@dataclass
class Split:
    name: str
    keys: tuple[str, ...]
    alphabet: str
    documents: list[Document] = field(default_factory=list)
    records: list[FeatureRecord] = field(default_factory=list)
    config_hash: str = ""
    shared_keys: tuple[str, ...] = ()

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def document(self, doc_id: str) -> Document:
        if not hasattr(self, "_index"):
            self._index = {d.doc_id: d for d in self.documents}
        return self._index[doc_id]

    def restrict_keys(self, keys: Iterable[str]) -> "Split":
        """Records whose predicted key is in ``keys`` (documents kept whole)."""
        keep = set(keys)
        return Split(self.name, self.keys, self.alphabet, self.documents,
                     [r for r in self.records if r.prediction.key in keep], self.config_hash, self.shared_keys)


def encode_text(text: str, alphabet: str) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(alphabet)}
    try:
        return np.array([lookup[c] for c in text], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"character {exc} not in alphabet", field="text") from None


def true_key(record: FeatureRecord, document: Document) -> str:
    """Key of the ground-truth field best overlapping the prediction."""
    best, best_iou = None, 0.0
    for gt in document.ground_truth:
        v = iou(record.prediction.location, gt.location)
        if v > best_iou:
            best, best_iou = gt, v
    return best.key if best is not None else record.prediction.key


def true_text(record: FeatureRecord, document: Document) -> str:
    best, best_iou = None, 0.0
    for gt in document.ground_truth:
        v = iou(record.prediction.location, gt.location)
        if v > best_iou:
            best, best_iou = gt, v
    return best.text if best is not None else record.prediction.text


# generation ----------------------------------------------------------------


def _sample_text(key: str, rng: np.random.Generator) -> str:
    digits = lambda n: "".join(str(d) for d in rng.integers(0, 10, n))  # noqa: E731
    if key == "date":
        return f"{rng.integers(1, 29):02d}/{rng.integers(1, 13):02d}/{rng.integers(2010, 2024)}"
    if key in ("total", "tax"):
        return f"{rng.integers(1, 10)}{digits(int(rng.integers(0, 4)))}.{digits(2)}"
    if key == "invoice_no":
        return "inv-" + digits(int(rng.integers(4, 7)))
    if key == "phone":
        return f"{digits(3)}-{digits(3)}-{digits(4)}"
    if key == "address":
        words = [str(rng.integers(1, 300)), str(rng.choice(_STREETS))]
        words += [str(w) for w in rng.choice(_WORDS, int(rng.integers(1, 3)))]
        return " ".join(words)
    if key == "company":
        words = [str(w) for w in rng.choice(_WORDS, int(rng.integers(1, 3)))]
        return " ".join(words + [str(rng.choice(("ltd", "inc", "co")))])
    return " ".join(str(w) for w in rng.choice(_WORDS, int(rng.integers(1, 4))))


def _char_class(c: str) -> str:
    if c.isdigit():
        return "digit"
    if c.isalpha():
        return "letter"
    return "symbol"


def _degradation_scale(d: float) -> float:
    # E[3 d^2] = 1 for d ~ U(0, 1), so the configured rate stays the mean rate
    return 3.0 * d * d


def effective_rates(cfg: CorpusConfig, d: float, ood: bool = False) -> tuple[float, float]:
    """Per-document (char error rate, key error rate) at degradation ``d``."""
    mult = (1.0 - cfg.quality_coupling) + cfg.quality_coupling * _degradation_scale(d)
    if ood:
        mult *= cfg.ood_error_scale
    return min(1.0, cfg.ocr_error_rate * mult), min(1.0, cfg.kv_error_rate * mult)


def _peaked_logits(rng: np.random.Generator, n_classes: int, emitted: int, true: int) -> np.ndarray:
    """Logit row whose argmax is ``emitted``; a corrupted row keeps ``true`` close behind."""
    row = rng.normal(0.0, 1.0, n_classes)
    top = rng.normal(4.0, 1.0)
    row[emitted] = top
    if emitted != true:
        margin = max(0.05, rng.normal(1.0, 0.5))
        row[true] = top - margin
    others = np.ones(n_classes, dtype=bool)
    others[[emitted, true]] = False
    row[others] = np.minimum(row[others], top - 0.1)
    return row


class _Generator:
    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        base = np.random.default_rng([cfg.seed, 0])
        k, dim = cfg.n_layout_clusters, cfg.img_dim
        self.centroids = base.normal(0.0, cfg.centroid_scale, (k, dim))
        self.manifolds = base.normal(0.0, cfg.manifold_scale / np.sqrt(cfg.manifold_rank),
                                     (k, dim, cfg.manifold_rank))
        directions = base.normal(size=(k, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        self.ood_centroids = self.centroids + cfg.ood_shift * directions

        alpha = cfg.alphabet
        self.char_classes = [
            [i for i, c in enumerate(alpha) if _char_class(c) == _char_class(ch) and c != ch] for ch in alpha
        ]

    def substitute(self, rng: np.random.Generator, true_c: int) -> int:
        """A character different from ``true_c``; usually one of the same class (digit/letter)."""
        same = self.char_classes[true_c]
        if same and rng.uniform() < self.cfg.same_class_substitution:
            return int(same[rng.integers(len(same))])
        out = int(rng.integers(len(self.cfg.alphabet) - 1))
        return out + (out >= true_c)

    def document(self, rng: np.random.Generator, doc_id: str, ood: bool):
        cfg = self.cfg
        cat = int(rng.integers(cfg.n_layout_clusters))
        d = float(rng.uniform())
        centroid = (self.ood_centroids if ood else self.centroids)[cat]
        u = rng.normal(size=cfg.manifold_rank)
        noise = rng.normal(size=cfg.img_dim) * cfg.cluster_noise * (1.0 + cfg.degradation_noise * d)
        feature = centroid + self.manifolds[cat] @ u + noise
        p_char, p_key = effective_rates(cfg, d, ood)

        n_fields = int(rng.integers(cfg.min_fields, cfg.max_fields + 1))
        keys = rng.choice(len(cfg.keys), n_fields)
        alpha = cfg.alphabet
        lookup = {c: i for i, c in enumerate(alpha)}
        gts, preds, crnns, kvs = [], [], [], []
        for row, key_idx in enumerate(keys):
            key = cfg.keys[key_idx]
            text = _sample_text(key, rng)
            x1 = float(rng.integers(20, 400))
            y1 = float(40 + 60 * row)
            box = BBox(x1, y1, x1 + 14.0 * len(text), y1 + 30.0)
            gts.append(IeField(box, text, key, GROUND_TRUTH))

            emitted = []
            crnn = np.empty((len(text), len(alpha) + 1))
            for t, ch in enumerate(text):
                true_c = lookup[ch]
                out_c = true_c
                if rng.uniform() < p_char:
                    out_c = self.substitute(rng, true_c)
                crnn[t] = _peaked_logits(rng, len(alpha) + 1, out_c, true_c)
                emitted.append(alpha[out_c])
            pred_key = int(key_idx)
            if rng.uniform() < p_key:
                pred_key = int(rng.integers(len(cfg.keys) - 1))
                pred_key += pred_key >= key_idx
            kv = _peaked_logits(rng, len(cfg.keys), pred_key, int(key_idx))
            jitter = [float(v) for v in rng.integers(-3, 4, 4)]
            pbox = BBox(max(0.0, box.x1 + jitter[0]), max(0.0, box.y1 + jitter[1]),
                        box.x2 + jitter[2], box.y2 + jitter[3])
            preds.append(IeField(pbox, "".join(emitted), cfg.keys[pred_key], PREDICTION))
            crnns.append(np.round(crnn, LOGIT_DECIMALS))
            kvs.append(np.round(kv, LOGIT_DECIMALS))

        feature = np.round(feature, 6)
        doc = Document(doc_id, feature, gts, category=None if ood else cat)
        labels = label_predictions(preds, gts)
        records = [
            FeatureRecord(doc_id, i, p, c, k, feature, lab)
            for i, (p, c, k, lab) in enumerate(zip(preds, crnns, kvs, labels))
        ]
        return doc, records


def generate_corpus(cfg: CorpusConfig | None = None) -> dict[str, Split]:
    """Generate the four splits; each split draws from its own seeded stream."""
    cfg = (cfg or CorpusConfig()).validate()
    gen = _Generator(cfg)
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test, "ood": cfg.n_ood}
    out = {}
    for s_idx, name in enumerate(SPLITS):
        rng = np.random.default_rng([cfg.seed, 1 + s_idx])
        split = Split(name, tuple(cfg.keys), cfg.alphabet, config_hash=cfg.config_hash(),
                      shared_keys=tuple(cfg.shared_keys))
        for i in range(sizes[name]):
            doc, records = gen.document(rng, f"{name}-{i:04d}", ood=name == "ood")
            if name != "train":
                doc.category = None
            split.documents.append(doc)
            split.records.extend(records)
        out[name] = split
    return out


# persistence ---------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_split(split: Split, path: str | Path) -> None:
    by_doc: dict[str, list[FeatureRecord]] = {}
    for r in split.records:
        by_doc.setdefault(r.doc_id, []).append(r)
    lines = [_dumps({
        "schema_version": SCHEMA_VERSION,
        "config_hash": split.config_hash,
        "split": split.name,
        "keys": list(split.keys),
        "shared_keys": list(split.shared_keys),
        "alphabet": split.alphabet,
    })]
    for doc in split.documents:
        lines.append(_dumps({
            "type": "document",
            "doc_id": doc.doc_id,
            "category": doc.category,
            "doc_feature": doc.doc_feature.tolist(),
            "ground_truth": [f.to_json() for f in doc.ground_truth],
        }))
        for r in by_doc.get(doc.doc_id, []):
            lines.append(_dumps(record_to_json(r)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def record_to_json(r: FeatureRecord) -> dict:
    return {
        "type": "record",
        "doc_id": r.doc_id,
        "field_index": r.field_index,
        "prediction": r.prediction.to_json(),
        "crnn_logits": r.crnn_logits.tolist(),
        "kv_logits": r.kv_logits.tolist(),
        "label": r.label,
    }


def save_corpus(splits: dict[str, Split], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, split in splits.items():
        p = out_dir / f"{name}.jsonl"
        save_split(split, p)
        paths.append(p)
    return paths


def _float_matrix(value, name: str, line: int, ndim: int) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be numeric", field=name, line=line) from None
    if arr.ndim != ndim or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be a finite non-empty {ndim}-d array", field=name, line=line)
    return arr


def load_split(path: str | Path, name: str | None = None) -> Split:
    """Parse one split file, validating every record against the header."""
    path = Path(path)
    raw = path.read_text(encoding="utf-8")
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        return Split(name or path.stem, DEFAULT_KEYS, DEFAULT_ALPHABET)
    objs = []
    for no, text in enumerate(lines, start=1):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON ({exc.msg})", line=no) from None
        if not isinstance(obj, dict):
            raise ParseError("each line must be a JSON object", line=no)
        objs.append(obj)
    header = objs[0]
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {header.get('schema_version')!r}",
                              field="schema_version", line=1)
    keys = tuple(header.get("keys") or DEFAULT_KEYS)
    alphabet = header.get("alphabet") or DEFAULT_ALPHABET
    key_set = set(keys)
    shared = tuple(header.get("shared_keys") or ())
    if not set(shared) <= key_set:
        raise ValidationError("shared_keys must be a subset of keys", field="shared_keys", line=1)
    split = Split(name or header.get("split") or path.stem, keys, alphabet,
                  config_hash=header.get("config_hash", ""), shared_keys=shared)
    docs: dict[str, Document] = {}
    for no, obj in enumerate(objs[1:], start=2):
        kind = obj.get("type")
        if kind == "document":
            try:
                gts = [IeField.from_json(g, GROUND_TRUTH) for g in obj["ground_truth"]]
            except ValidationError as exc:
                raise ValidationError(str(exc), field=exc.field, line=no) from None
            except KeyError:
                raise ValidationError("document lacks ground_truth", field="ground_truth", line=no) from None
            for g in gts:
                if g.key not in key_set:
                    raise ValidationError(f"unknown key {g.key!r}", field="key", line=no)
            doc = Document(str(obj.get("doc_id")), _float_matrix(obj.get("doc_feature"), "doc_feature", no, 1),
                           gts, obj.get("category"))
            docs[doc.doc_id] = doc
            split.documents.append(doc)
        elif kind == "record":
            doc_id = obj.get("doc_id")
            if doc_id not in docs:
                raise ValidationError(f"record refers to unknown document {doc_id!r}", field="doc_id", line=no)
            try:
                pred = IeField.from_json(obj.get("prediction"), PREDICTION)
            except ValidationError as exc:
                raise ValidationError(str(exc), field=exc.field, line=no) from None
            if pred.key not in key_set:
                raise ValidationError(f"unknown key {pred.key!r}", field="key", line=no)
            bad = set(pred.text) - set(alphabet)
            if bad:
                raise ValidationError(f"text has characters outside the alphabet: {sorted(bad)}",
                                      field="text", line=no)
            crnn = _float_matrix(obj.get("crnn_logits"), "crnn_logits", no, 2)
            if crnn.shape[1] != len(alphabet) + 1:
                raise ValidationError(f"crnn_logits width must be {len(alphabet) + 1}",
                                      field="crnn_logits", line=no)
            kv = _float_matrix(obj.get("kv_logits"), "kv_logits", no, 1)
            if kv.shape[0] != len(keys):
                raise ValidationError(f"kv_logits length must be {len(keys)}", field="kv_logits", line=no)
            label = obj.get("label")
            if label not in (None, 0, 1):
                raise ValidationError("label must be 0, 1 or null", field="label", line=no)
            fi = obj.get("field_index")
            if not isinstance(fi, int):
                raise ValidationError("field_index must be an integer", field="field_index", line=no)
            split.records.append(FeatureRecord(doc_id, fi, pred, crnn, kv, docs[doc_id].doc_feature, label))
        else:
            raise ValidationError(f"unknown line type {kind!r}", field="type", line=no)
    return split


def load_dataset(data_dir: str | Path, splits: Iterable[str] = SPLITS) -> dict[str, Split]:
    data_dir = Path(data_dir)
    return {name: load_split(data_dir / f"{name}.jsonl", name) for name in splits}
