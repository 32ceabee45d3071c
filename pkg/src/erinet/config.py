"""Run configuration: flat ``key=value`` text with dotted keys.

Sections map onto the model, training and synthetic-data dataclasses; the
``run`` section holds paths, split names and the feature combo. Lines
starting with ``#`` are comments. Command-line ``--set key=value`` overrides
are applied after the file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .features import ConfigError
from .model import ModelConfig
from .synth import SynthConfig
from .train import TrainConfig


@dataclass
class RunOptions:
    manifest: str = ""
    checkpoint: str = ""
    out_dir: str = "out"
    combo: str = "all"
    eval_split: str = "val"
    val_split: str = ""
    ablation: str = "modality"  # "modality" (feature groups) or "au" (AU types)
    seeds: str = "0,1,2"
    stream: str = "video"
    workers: int = 1
    max_plots: int = 8

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"run.seeds: expected comma-separated integers, got {self.seeds!r}") from None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def items(self) -> list[tuple[str, object]]:
        out = []
        for section in ("run", "model", "train", "synth"):
            obj = getattr(self, section)
            out += [(f"{section}.{f.name}", getattr(obj, f.name)) for f in fields(obj)]
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.items())

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        obj = getattr(self, section, None) if section in ("run", "model", "train", "synth") else None
        if obj is None or not name:
            raise ConfigError(f"unknown config key {key!r}")
        if name not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        setattr(obj, name, _parse(key, raw, current))

    def apply(self, pairs: Iterable[str], origin: str = "--set") -> "RunConfig":
        for n, line in enumerate(pairs, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{n}: expected key=value, got {line!r}")
            k, _, v = line.partition("=")
            self.set(k.strip(), v.strip())
        return self


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, raw: str, current):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        cfg.apply(p.read_text().splitlines(), str(p))
    cfg.apply(overrides)
    return cfg


def echo_config(cfg: RunConfig, out_dir) -> Path:
    """Write the effective configuration next to the run's artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.txt"
    path.write_text(cfg.to_text())
    return path
