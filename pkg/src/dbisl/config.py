"""Single JSON run configuration with materialized defaults.

Sections: ``train``, ``transform``, ``loss`` and ``synth``. Unknown sections
or keys are rejected, and every section validates its ranges on load.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dtrans import TransformConfig
from .engine import TrainConfig, make_weights
from .errors import ConfigError
from .losses import LossWeights
from .synth import SynthConfig

SECTIONS = {"train": TrainConfig, "transform": TransformConfig,
            "loss": LossWeights, "synth": SynthConfig}


def _build(cls, values, section):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad value in {section!r}: {exc}") from exc


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        return cls(**{name: _build(c, d.get(name, {}), name) for name, c in SECTIONS.items()})

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        text = Path(path).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def resolved(self):
        """Copy with derived values (ramp length) filled in."""
        return RunConfig(self.train, self.transform, make_weights(self.train, self.loss),
                         self.synth)

    def to_dict(self):
        return {name: getattr(self, name).to_dict() for name in SECTIONS}

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
