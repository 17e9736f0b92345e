"""Run configuration: nested dataclass sections, JSON files and flag overrides."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field

from .attacks import AttackConfig
from .data import PretrainConfig, SyntheticDatasetSpec
from .evaluation import ProbeConfig
from .training import TrainConfig
from .vit import ViTConfig

SECTIONS = {
    "vit": ViTConfig,
    "data": SyntheticDatasetSpec,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "attack": AttackConfig,
    "probe": ProbeConfig,
}


@dataclass
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    num_tokens: int = 10
    threads: int | None = None

    def apply_seed(self) -> "RunConfig":
        """Propagate the run seed to every stochastic section except the dataset."""
        self.pretrain.seed = self.train.seed = self.attack.seed = self.seed
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, value in raw.items():
            if name in SECTIONS:
                sec = SECTIONS[name]
                bad = set(value) - {f.name for f in dataclasses.fields(sec)}
                if bad:
                    raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
                kw[name] = sec(**{k: _coerce(v) for k, v in value.items()})
            else:
                kw[name] = value
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _coerce(v):
    return tuple(v) if isinstance(v, list) else v


def _base_type(tp):
    """Strip ``X | None`` down to X."""
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0]
    return tp


def parse_value(tp, text: str):
    tp = _base_type(tp)
    if text.lower() == "none":
        return None
    if tp is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typing.get_origin(tp) is tuple:
        return tuple(float(x) for x in text.split(","))
    if tp is float:
        # allow fractions such as 8/255
        if "/" in text:
            num, den = text.split("/")
            return float(num) / float(den)
        return float(text)
    return tp(text)


def override_flags() -> list[tuple[str, str, str, typing.Any]]:
    """(flag, section, field, type) for every overridable config field."""
    out = []
    for sec, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            out.append((f"--{sec}-{f.name.replace('_', '-')}", sec, f.name, hints[f.name]))
    return out


def apply_overrides(cfg: RunConfig, values: dict[tuple[str, str], str]) -> RunConfig:
    """Apply raw flag strings keyed by (section, field); sections are re-validated."""
    hints = {sec: typing.get_type_hints(cls) for sec, cls in SECTIONS.items()}
    for sec in SECTIONS:
        changes = {name: parse_value(hints[sec][name], raw) for (s, name), raw in values.items() if s == sec}
        if sec == "attack" and "eps_inf" in changes:
            # keep the derived default step (eps/10) tied to the new budget
            changes.setdefault("step_size", None)
        if changes:
            setattr(cfg, sec, dataclasses.replace(getattr(cfg, sec), **changes))
    return cfg
