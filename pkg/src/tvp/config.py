"""Run configuration: one versioned JSON document for every CLI command.

Unknown keys anywhere in the document are hard errors; silently ignored
hyperparameter typos are the main reproducibility hazard this guards
against. Cross-section consistency (canvas vs stride, prompt widths, vocab
coverage) is validated at load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from tvp.frames import PipelineConfig
from tvp.intervals import LossConfig
from tvp.model import ModelConfig
from tvp.prompts import PROMPT_MODES
from tvp.synthgen import SyntheticSpec
from tvp.trainer import STAGES, TrainConfig

__all__ = ["PromptConfig", "EvalConfig", "TrainSection", "BenchSection", "RunConfig", "load_config", "default_config"]

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _take(section: dict, name: str, known: set[str]) -> None:
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}' section: {sorted(unknown)}")


@dataclass(frozen=True)
class PromptConfig:
    width: int = 8
    n_text: int = 10
    mode: str = "replace"

    def __post_init__(self) -> None:
        if self.width < 0:
            raise ConfigError("prompt width must be >= 0")
        if self.n_text < 0:
            raise ConfigError("n_text must be >= 0")
        if self.mode not in PROMPT_MODES:
            raise ConfigError(f"prompt mode must be one of {PROMPT_MODES}")


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = (0.3, 0.5, 0.7)
    strict: bool = True

    def __post_init__(self) -> None:
        for m in self.thresholds:
            if not 0.0 < m < 1.0:
                raise ConfigError(f"eval threshold {m} outside (0, 1)")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 12
    batch_size: int = 16
    warmup_frac: float = 0.10
    weight_decay: float = 0.01
    seed: int = 0
    threads: int = 1
    peak_lr: dict = field(default_factory=dict)  # stage -> lr; missing = stage default
    stage_epochs: dict = field(default_factory=dict)  # stage -> epochs; missing = epochs

    def __post_init__(self) -> None:
        for d in (self.peak_lr, self.stage_epochs):
            for k in d:
                if k not in STAGES:
                    raise ConfigError(f"unknown stage {k!r} in train overrides")

    def build(self, stage: str, loss: LossConfig, seed: int | None = None, threads: int | None = None) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            epochs=int(self.stage_epochs.get(stage, self.epochs)),
            batch_size=self.batch_size,
            peak_lr=self.peak_lr.get(stage),
            warmup_frac=self.warmup_frac,
            weight_decay=self.weight_decay,
            seed=self.seed if seed is None else seed,
            threads=self.threads if threads is None else threads,
            loss=loss,
        )


@dataclass(frozen=True)
class BenchSection:
    n_frames: int = 8
    canvas: int = 64
    reps: int = 15
    warmup: int = 3
    seed: int = 0
    channels: tuple[int, ...] = (16, 32, 64)


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchSection = field(default_factory=BenchSection)

    def __post_init__(self) -> None:
        self.model.check_canvas(self.pipeline.canvas)
        if 2 * self.prompts.width > self.pipeline.canvas:
            raise ConfigError(
                f"prompt width {self.prompts.width} exceeds canvas/2 ({self.pipeline.canvas // 2})"
            )
        if self.prompts.n_text != self.model.n_text_prompts:
            raise ConfigError(
                "prompts.n_text must equal model.n_text_prompts "
                f"({self.prompts.n_text} vs {self.model.n_text_prompts})"
            )
        if self.synth.vocab > self.model.vocab_size:
            raise ConfigError(
                f"dataset vocab {self.synth.vocab} exceeds model vocab {self.model.vocab_size}"
            )
        if self.synth.query_len_range[1] > self.model.max_text_len:
            raise ConfigError(
                f"queries up to {self.synth.query_len_range[1]} tokens exceed "
                f"max_text_len {self.model.max_text_len}"
            )

    def to_json(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "pipeline": {"n_sam": self.pipeline.n_sam, "canvas": self.pipeline.canvas},
            "model": {
                "hidden_dim": self.model.hidden_dim,
                "conv_channels": list(self.model.conv_channels),
                "conv_strides": list(self.model.conv_strides),
                "n_layers": self.model.n_layers,
                "n_heads": self.model.n_heads,
                "vocab_size": self.model.vocab_size,
                "max_text_len": self.model.max_text_len,
                "grid_side": self.model.grid_side,
                "n_text_prompts": self.model.n_text_prompts,
                "dropout": self.model.dropout,
                "pre_norm": self.model.pre_norm,
            },
            "prompts": {
                "width": self.prompts.width,
                "n_text": self.prompts.n_text,
                "mode": self.prompts.mode,
            },
            "loss": {
                "alpha1": self.loss.alpha1,
                "alpha2": self.loss.alpha2,
                "beta1": self.loss.beta1,
                "beta2": self.loss.beta2,
                "dis_denom": self.loss.dis_denom,
            },
            "train": {
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "warmup_frac": self.train.warmup_frac,
                "weight_decay": self.train.weight_decay,
                "seed": self.train.seed,
                "threads": self.train.threads,
                "peak_lr": dict(self.train.peak_lr),
                "stage_epochs": dict(self.train.stage_epochs),
            },
            "synth": self.synth.to_json(),
            "eval": {"thresholds": list(self.eval.thresholds), "strict": self.eval.strict},
            "bench": {
                "n_frames": self.bench.n_frames,
                "canvas": self.bench.canvas,
                "reps": self.bench.reps,
                "warmup": self.bench.warmup,
                "seed": self.bench.seed,
                "channels": list(self.bench.channels),
            },
        }


def _parse_pipeline(d: dict) -> PipelineConfig:
    _take(d, "pipeline", {"n_sam", "canvas"})
    return PipelineConfig(n_sam=int(d.get("n_sam", 8)), canvas=int(d.get("canvas", 64)))


def _parse_model(d: dict) -> ModelConfig:
    known = {
        "hidden_dim", "conv_channels", "conv_strides", "n_layers", "n_heads",
        "vocab_size", "max_text_len", "grid_side", "n_text_prompts", "dropout",
        "pre_norm",
    }
    _take(d, "model", known)
    kwargs = dict(d)
    if "conv_channels" in kwargs:
        kwargs["conv_channels"] = tuple(int(c) for c in kwargs["conv_channels"])
    if "conv_strides" in kwargs:
        kwargs["conv_strides"] = tuple(int(s) for s in kwargs["conv_strides"])
    return ModelConfig(**kwargs)


def _parse_prompts(d: dict) -> PromptConfig:
    _take(d, "prompts", {"width", "n_text", "mode"})
    return PromptConfig(**d)


def _parse_loss(d: dict) -> LossConfig:
    _take(d, "loss", {"alpha1", "alpha2", "beta1", "beta2", "dis_denom"})
    return LossConfig(**d)


def _parse_train(d: dict) -> TrainSection:
    known = {
        "epochs", "batch_size", "warmup_frac", "weight_decay", "seed", "threads",
        "peak_lr", "stage_epochs",
    }
    _take(d, "train", known)
    return TrainSection(**d)


def _parse_synth(d: dict) -> SyntheticSpec:
    known = {
        "n_samples", "len_range", "height", "width", "n_classes", "dur_range",
        "vocab", "query_len_range", "noise", "seed",
    }
    _take(d, "synth", known)
    kwargs = dict(d)
    for key in ("len_range", "dur_range", "query_len_range"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return SyntheticSpec(**kwargs)


def _parse_eval(d: dict) -> EvalConfig:
    _take(d, "eval", {"thresholds", "strict"})
    kwargs = dict(d)
    if "thresholds" in kwargs:
        kwargs["thresholds"] = tuple(float(m) for m in kwargs["thresholds"])
    return EvalConfig(**kwargs)


def _parse_bench(d: dict) -> BenchSection:
    _take(d, "bench", {"n_frames", "canvas", "reps", "warmup", "seed", "channels"})
    kwargs = dict(d)
    if "channels" in kwargs:
        kwargs["channels"] = tuple(int(c) for c in kwargs["channels"])
    return BenchSection(**kwargs)


_SECTION_PARSERS = {
    "pipeline": _parse_pipeline,
    "model": _parse_model,
    "prompts": _parse_prompts,
    "loss": _parse_loss,
    "train": _parse_train,
    "synth": _parse_synth,
    "eval": _parse_eval,
    "bench": _parse_bench,
}


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _take(doc, "<root>", {"version", *_SECTION_PARSERS})
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version} (expected {CONFIG_VERSION})")
    kwargs = {}
    for name, parser in _SECTION_PARSERS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"'{name}' section must be a JSON object")
        try:
            kwargs[name] = parser(dict(section))
        except TypeError as exc:
            raise ConfigError(f"bad '{name}' section: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"bad '{name}' section: {exc}") from exc
    return RunConfig(**kwargs)


def load_config(path: Path | str) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def default_config() -> RunConfig:
    return RunConfig()
