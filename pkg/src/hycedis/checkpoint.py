"""Binary checkpoint container for a trained confidence model and its VCAD.

Layout (little-endian)::

    b"HYCE" | u32 version | u32 len | config text (utf-8) | u32 n_arrays |
    n_arrays x (u32 len | name | u32 ndim | ndim x u64 dims | float64 data)

The config text is canonical ``key=value`` lines, values JSON-encoded. Model
arrays are named ``model/<param>``; VCAD arrays ``vcad/<param>`` and appear
only when a VCAD model is stored.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .confidence import ConfidenceModel, ModelConfig
from .errors import CheckpointError
from .features import CrnnStandardizer
from .vcad import VcadConfig, VcadModel

MAGIC = b"HYCE"
FORMAT_VERSION = 1


def config_text(values: dict) -> str:
    return "".join(f"{k}={json.dumps(values[k], sort_keys=True)}\n" for k in sorted(values))


def parse_config_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad config line {line!r}")
        out[key] = json.loads(value)
    return out


def pack(config: dict, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    text = config_text(config).encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.array(arrays[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", a.ndim)]
        parts += [struct.pack("<Q", d) for d in a.shape]
        parts.append(a.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def unpack(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    try:
        config = parse_config_text(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config section: {exc}") from None
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u64() for _ in range(r.u32()))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last array")
    return config, arrays


def save_checkpoint(path, model: ConfidenceModel, vcad: VcadModel | None, meta: dict) -> None:
    """Write ``model`` (and ``vcad`` when given) plus ``meta`` (alphabet, keys, ...)."""
    config = {f"model.{k}": v for k, v in model.config.to_dict().items()}
    config.update({f"meta.{k}": v for k, v in meta.items()})
    config.update({"shape.vis_in": model.vis_in, "shape.corpus_size": model.corpus_size,
                   "shape.num_keys": model.num_keys})
    arrays = {f"model/{k}": v for k, v in model.state_arrays().items()}
    if vcad is not None:
        config.update({f"vcad.{k}": v for k, v in asdict(vcad.config).items()})
        config["shape.img_dim"] = vcad.img_dim
        arrays.update({f"vcad/{k}": v for k, v in vcad.named_parameters().items()})
    Path(path).write_bytes(pack(config, arrays))


def _section(config: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in config.items() if k.startswith(prefix)}


def load_checkpoint(path) -> tuple[ConfidenceModel, VcadModel | None, dict]:
    config, arrays = unpack(Path(path).read_bytes())
    try:
        mcfg = ModelConfig.from_dict(_section(config, "model."))
        model = ConfidenceModel(mcfg, config["shape.vis_in"], config["shape.corpus_size"], config["shape.num_keys"])
        model.standardizer = CrnnStandardizer(np.zeros(model.vis_in), np.ones(model.vis_in))
        model.load_state_arrays(_section(arrays, "model/"))
        vcad = None
        vcad_arrays = _section(arrays, "vcad/")
        if vcad_arrays:
            vcad = VcadModel(config["shape.img_dim"], VcadConfig(**_section(config, "vcad.")))
            vcad.load_parameters(vcad_arrays)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"checkpoint does not match the model layout: {exc}") from None
    return model, vcad, _section(config, "meta.")
