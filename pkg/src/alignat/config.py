"""Run configuration: one flat key=value namespace covering model, training,
sampling, and corpus knobs.

Precedence, lowest to highest: built-in defaults, config file, ``--set``
overrides, dedicated subcommand flags. Every run writes its fully resolved
configuration next to its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import CorpusSpec
from .lattice import EsaConfig
from .model import ModelConfig
from .trainer import TrainConfig


def _defaults() -> dict[str, object]:
    values: dict[str, object] = {}
    for f in fields(ModelConfig):
        values[f.name] = getattr(ModelConfig(), f.name)
    tc = TrainConfig()
    for f in fields(TrainConfig):
        key = "train_seed" if f.name == "seed" else f.name
        values[key] = getattr(tc, f.name)
    values.update(threshold=0.7, samples=50, distribution="top2-uniform", esa_seed=-1)
    values.update(
        duration_min=8, duration_max=24, tokens_min=5, tokens_max=15,
        sigma=0.55, mean_scale=1.0, n_train=2000, n_dev=200, n_test=200,
        data_seed=2024, beam=10, at_steps=1000, workers=1,
    )
    return values


@dataclass
class RunConfig:
    values: dict[str, object]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(_defaults())

    # -- mutation -----------------------------------------------------------

    def set(self, key: str, raw: str) -> None:
        if key not in self.values:
            raise KeyError(f"unknown config key {key!r}")
        current = self.values[key]
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(f"{key}: expected a boolean, got {raw!r}")
            self.values[key] = low in ("true", "1")
        elif isinstance(current, int):
            self.values[key] = int(raw)
        elif isinstance(current, float):
            self.values[key] = float(raw)
        else:
            self.values[key] = raw

    def update_from_file(self, path: str | Path) -> None:
        for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value")
            key, _, raw = line.partition("=")
            self.set(key.strip(), raw.strip())

    def write(self, path: str | Path) -> None:
        lines = [f"{k}={self.values[k]}" for k in sorted(self.values)]
        Path(path).write_text("\n".join(lines) + "\n")

    # -- views ---------------------------------------------------------------

    def model_config(self) -> ModelConfig:
        kwargs = {f.name: self.values[f.name] for f in fields(ModelConfig)}
        return ModelConfig(**kwargs)

    def train_config(self) -> TrainConfig:
        kwargs = {}
        for f in fields(TrainConfig):
            key = "train_seed" if f.name == "seed" else f.name
            kwargs[f.name] = self.values[key]
        return TrainConfig(**kwargs)

    def esa_config(self) -> EsaConfig:
        seed = self.values["esa_seed"]
        if seed < 0:
            seed = self.values["train_seed"]
        return EsaConfig(
            threshold=self.values["threshold"],
            samples=self.values["samples"],
            distribution=self.values["distribution"],
            seed=seed,
        )

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(
            vocab=self.values["vocab"],
            d_feat=self.values["d_feat"],
            duration_min=self.values["duration_min"],
            duration_max=self.values["duration_max"],
            tokens_min=self.values["tokens_min"],
            tokens_max=self.values["tokens_max"],
            sigma=self.values["sigma"],
            mean_scale=self.values["mean_scale"],
            n_train=self.values["n_train"],
            n_dev=self.values["n_dev"],
            n_test=self.values["n_test"],
            seed=self.values["data_seed"],
            subsample_factor=self.values["subsample_factor"],
        )
