"""Run configuration: one JSON document with six sections.

Precedence is flags > file > defaults. Unknown keys are rejected, and the
merged effective config is echoed into every output directory so a run can
be reproduced from its artifacts alone.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import SceneSpec
from .metrics import EvalConfig
from .model import HeadConfig
from .neck import MfpConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


SECTION_TYPES = {
    "backbone": BackboneConfig,
    "mfp": MfpConfig,
    "head": HeadConfig,
    "data": SceneSpec,
    "train": TrainConfig,
    "eval": EvalConfig,
}

# Accepted spellings for fields whose natural name is reserved or abbreviated.
KEY_ALIASES = {"train": {"lambda": "lam"}}


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mfp: MfpConfig = field(default_factory=MfpConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    data: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self):
        return {
            **{name: dataclasses.asdict(getattr(self, name)) for name in SECTION_TYPES},
            "seed": self.seed,
        }

    def echo(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(
            json.dumps(self.to_dict(), indent=1, sort_keys=True)
        )


def _build_section(name, values):
    cls = SECTION_TYPES[name]
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    aliases = KEY_ALIASES.get(name, {})
    values = {aliases.get(k, k): v for k, v in values.items()}
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    unknown = set(doc) - set(SECTION_TYPES) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")

    sections = {}
    for name in SECTION_TYPES:
        values = dict(doc.get(name, {}))
        # The run seed feeds every section seed that is not set explicitly.
        fields = {f.name for f in dataclasses.fields(SECTION_TYPES[name])}
        if "seed" in fields and "seed" not in values:
            values["seed"] = seed
        sections[name] = _build_section(name, values)
    return RunConfig(**sections, seed=seed)


def load_config(path=None, overrides=()) -> RunConfig:
    """Build the effective config from an optional file plus dotted overrides.

    Overrides look like "train.total_iters=200" or "seed=7"; values parse as
    JSON with a fallback to plain strings.
    """
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.strip().split(".")
        if len(parts) == 1:
            doc[parts[0]] = value
        elif len(parts) == 2:
            doc.setdefault(parts[0], {})
            if not isinstance(doc[parts[0]], dict):
                raise ConfigError(f"cannot override inside non-object {parts[0]!r}")
            doc[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"override key {key!r} has too many dots")
    return from_dict(doc)
