"""Run configuration: one TOML file with [corpus], [model], [train] and [decode] tables."""

from __future__ import annotations

import dataclasses
import functools
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .decoding import DecodeConfig
from .errors import ConfigError
from .synthlang import CorpusConfig
from .trainer import TrainConfig

# ModelConfig minus vocab_size, which always comes from the corpus vocabulary
MODEL_DEFAULTS: dict[str, Any] = {
    "d_model": 64,
    "n_enc_layers": 2,
    "n_dec_layers": 2,
    "n_heads": 2,
    "d_ffn": 128,
    "max_len": 32,
    "dropout": 0.0,
    "init_std": 0.02,
}


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    split_ratios: tuple[float, float, float] = (0.90, 0.05, 0.05)
    # tables that explicitly set a seed; the CLI requires one for train/generate
    seeded: frozenset = frozenset()

    def to_dict(self) -> dict:
        return {
            "corpus": dataclasses.asdict(self.corpus),
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "decode": self.decode.to_dict(),
            "split_ratios": list(self.split_ratios),
        }


def _build(cls, table: Mapping, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}; valid: {', '.join(sorted(names))}")
    kwargs = {}
    for k, v in table.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def load_run_config(path: str | Path | None = None, overrides: Mapping[str, Mapping[str, Any]] | None = None) -> RunConfig:
    """Read ``path`` (if any) and apply ``overrides`` per table; overrides win."""
    raw: dict[str, dict] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    allowed = {"corpus", "model", "train", "decode", "split"}
    extra = sorted(set(raw) - allowed)
    if extra:
        raise ConfigError(f"unknown table(s) {', '.join(extra)}; expected {', '.join(sorted(allowed))}")
    tables = {k: dict(raw.get(k, {})) for k in allowed}
    for section, values in (overrides or {}).items():
        tables.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})

    seeded = frozenset(s for s in ("corpus", "train", "decode") if "seed" in tables[s])
    model = dict(MODEL_DEFAULTS)
    unknown = sorted(set(tables["model"]) - set(MODEL_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown key(s) in [model]: {', '.join(unknown)}")
    model.update(tables["model"])
    ratios = tuple(tables["split"].get("ratios", (0.90, 0.05, 0.05)))
    try:
        return RunConfig(
            corpus=_build(CorpusConfig, tables["corpus"], "corpus"),
            model=model,
            train=_build(TrainConfig, tables["train"], "train"),
            decode=_build(DecodeConfig, tables["decode"], "decode"),
            split_ratios=ratios,  # type: ignore[arg-type]
            seeded=seeded,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@functools.lru_cache(maxsize=None)
def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def provenance(run: RunConfig, **extra) -> dict:
    return {"version": version_string(), "run_config": run.to_dict(), **extra}
