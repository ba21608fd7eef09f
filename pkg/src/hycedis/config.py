"""Plain ``section.key = value`` run configuration with command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .confidence import ModelConfig
from .corpus import CorpusConfig
from .errors import ConfigError
from .vcad import VcadConfig

SECTIONS = ("corpus", "model", "vcad", "eval")
EVAL_DEFAULTS = {"n_bins": 10, "mc_passes": 20, "baseline_epochs": 60}


def parse_config(text: str, source: str = "<config>") -> dict[str, dict[str, str]]:
    """Parse ``section.key = value`` lines; ``#`` starts a comment line."""
    out: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        _set(out, line, f"{source}:{no}")
    return out


def _set(out: dict, assignment: str, where: str) -> None:
    key, sep, value = assignment.partition("=")
    if not sep:
        raise ConfigError(f"{where}: expected 'section.key = value', got {assignment!r}")
    section, dot, name = key.strip().partition(".")
    if not dot or section not in SECTIONS or not name:
        raise ConfigError(f"{where}: unknown setting {key.strip()!r} (sections: {', '.join(SECTIONS)})")
    out[section][name] = value.strip()


def dataclass_from_strings(cls, values: dict[str, str]):
    """Coerce string values to the field types of ``cls`` (bool, int, float, str)."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown setting {k!r} for {cls.__name__}")
        default = known[k].default
        try:
            if isinstance(default, bool):
                kwargs[k] = str(v).lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kwargs[k] = int(v)
            elif isinstance(default, float):
                kwargs[k] = float(v)
            else:
                kwargs[k] = v
        except ValueError:
            raise ConfigError(f"bad value for {k}: {v!r}") from None
    return cls(**kwargs)


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    vcad: VcadConfig = field(default_factory=VcadConfig)
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))

    @classmethod
    def from_sections(cls, sections: dict[str, dict[str, str]]) -> "RunConfig":
        ev = dict(EVAL_DEFAULTS)
        for k, v in sections.get("eval", {}).items():
            if k not in ev:
                raise ConfigError(f"unknown eval setting {k!r}")
            try:
                ev[k] = int(v)
            except ValueError:
                raise ConfigError(f"eval.{k} must be an integer, got {v!r}") from None
            if ev[k] < 1:
                raise ConfigError(f"eval.{k} must be positive")
        vcad = dataclass_from_strings(VcadConfig, sections.get("vcad", {}))
        if vcad.latent_dim >= vcad.emb_dim:
            raise ConfigError("vcad.latent_dim must be smaller than vcad.emb_dim")
        return cls(
            CorpusConfig.from_dict(sections.get("corpus", {})),
            ModelConfig.from_dict(sections.get("model", {})),
            vcad,
            ev,
        )


def load_run_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then each ``section.key=value`` override."""
    sections: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for s, values in parse_config(text, str(path)).items():
            sections[s].update(values)
    for item in overrides or []:
        _set(sections, item, "--set")
    return RunConfig.from_sections(sections)
