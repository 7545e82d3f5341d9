"""Strict JSON run configuration with a resolved-config echo."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import jsonschema

from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .training import SamplerConfig, Schedule


@dataclass
class OptimizerConfig:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-4


@dataclass
class DataConfig:
    """Synthetic dataset recipe; identities follow ``model.n_identities`` in CLI runs."""

    n_ids: int = 8
    seqs_per_id: int = 4
    seq_len: int = 16
    channels: int = 3
    height: int = 16
    width: int = 16
    noise_sigma: float = 0.1
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    steps: int = 300
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    schedule: Schedule = field(default_factory=Schedule)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss.margin, self.loss.epsilon, self.model.n_identities, self.loss.triplet_reduction)

    def resolved(self) -> dict:
        d = asdict(self)
        d["loss"].pop("n_classes")
        d["optimizer"]["betas"] = list(d["optimizer"]["betas"])
        return d


def schema() -> dict:
    return json.loads(resources.files("reid3d").joinpath("run_config.schema.json").read_text())


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        parts.append(extra[0] if extra else "?")
    return ".".join(parts) or "<root>"


def parse_run_config(doc: dict) -> RunConfig:
    """Validate against the shipped schema and fill defaults; raises ConfigError."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = _error_path(err)
        raise ConfigError(f"{path}: {err.message}", path)
    try:
        loss = doc.get("loss", {})
        opt = doc.get("optimizer", {})
        return RunConfig(
            seed=doc.get("seed", 0),
            steps=doc.get("steps", 300),
            model=ModelConfig(**doc.get("model", {})),
            sampler=SamplerConfig(**doc.get("sampler", {})),
            schedule=Schedule(**doc.get("schedule", {})),
            loss=LossConfig(**loss),
            optimizer=OptimizerConfig(**{**opt, **({"betas": tuple(opt["betas"])} if "betas" in opt else {})}),
            data=DataConfig(**doc.get("data", {})),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "<root>") from exc


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "<root>") from exc
    return parse_run_config(doc)
