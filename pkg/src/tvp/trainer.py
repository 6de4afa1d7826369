"""Staged training: base model fit, prompt tuning, model finetuning.

Stages and their trainable sets:

* ``base``     — all model parameters, no prompts (identity). Creates the
  model that prompt tuning presumes; the desk-scale stand-in for a
  pretrained checkpoint.
* ``prompt``   — only the visual/text prompt tensors; model frozen.
* ``finetune`` — model parameters again; prompts frozen and applied.

Updates are decoupled-weight-decay Adam (0.9/0.999, eps 1e-8); weight decay
applies to model parameters in base/finetune only, never to prompt tensors.
The learning rate ramps linearly to its peak over the first 10% of steps and
decays linearly to zero. Full-scale reference peaks are 1e-1 for prompt
training and 5e-7 for finetuning (which presumes a pretrained model); the
desk default finetune peak is 1e-4.

Checkpoints are single files: magic ``TVPCKPT1``, a u32-length-prefixed
canonical-JSON header (config echo, stage tag, step counter, rng state,
tensor directory), then raw little-endian float32 payloads in directory
order. Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from tvp.autodiff import Tensor, no_grad
from tvp.data import LoadedSample, canonical_json
from tvp.evaluator import DEFAULT_THRESHOLDS, report_from_pairs
from tvp.intervals import LossBreakdown, LossConfig
from tvp.model import GroundingModel, ModelConfig, PromptState

__all__ = [
    "STAGES",
    "TrainConfig",
    "TrainingDiverged",
    "Checkpoint",
    "OptState",
    "lr_at",
    "adamw_update",
    "Trainer",
]

log = logging.getLogger("tvp.train")

STAGES = ("base", "prompt", "finetune")
CKPT_MAGIC = b"TVPCKPT1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

STAGE_DEFAULT_LR = {"base": 3e-3, "prompt": 1e-1, "finetune": 1e-4}
# Full-scale reference finetune peak (presumes a pretrained model).
FULL_SCALE_FINETUNE_LR = 5e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "base"
    epochs: int = 12
    batch_size: int = 16
    peak_lr: float | None = None  # stage default when None
    warmup_frac: float = 0.10
    weight_decay: float = 0.01
    seed: int = 0
    threads: int = 1
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.threads < 1:
            raise ValueError("epochs, batch_size and threads must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")

    @property
    def lr(self) -> float:
        return STAGE_DEFAULT_LR[self.stage] if self.peak_lr is None else self.peak_lr

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "peak_lr": self.lr,
            "warmup_frac": self.warmup_frac,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "threads": self.threads,
            "loss": {
                "alpha1": self.loss.alpha1,
                "alpha2": self.loss.alpha2,
                "beta1": self.loss.beta1,
                "beta2": self.loss.beta2,
                "dis_denom": self.loss.dis_denom,
            },
        }


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp to the peak over the first ceil(warmup_frac*total) steps,
    then linear decay to zero at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warmup = math.ceil(cfg.warmup_frac * total_steps)
    peak = cfg.lr
    if step <= warmup and warmup > 0:
        return peak * step / warmup
    return peak * (total_steps - step) / (total_steps - warmup)


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def for_tensors(tensors: dict[str, Tensor]) -> "OptState":
        return OptState(
            m={k: np.zeros_like(t.data) for k, t in tensors.items()},
            v={k: np.zeros_like(t.data) for k, t in tensors.items()},
            t=0,
        )


def adamw_update(
    tensors: dict[str, Tensor],
    opt: OptState,
    lr: float,
    weight_decay: float,
    decay_keys: set[str] | None = None,
) -> None:
    """One decoupled-weight-decay adaptive-moment step on every tensor.

    ``decay_keys`` restricts weight decay to a subset (prompt tensors are
    never decayed); gradients must already be populated.
    """
    opt.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** opt.t
    bc2 = 1.0 - ADAM_BETA2 ** opt.t
    for name, tensor in tensors.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        m = opt.m[name]
        v = opt.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if weight_decay > 0.0 and (decay_keys is None or name in decay_keys):
            update = update + weight_decay * tensor.data
        tensor.data = tensor.data - lr * update


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    stage: str
    step: int
    rng_state: dict | None
    tensors: dict[str, np.ndarray]
    prompt_meta: dict | None = None  # {"width": int, "mode": str} when prompts exist

    def save(self, path: Path | str) -> None:
        directory = []
        payloads = []
        offset = 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            directory.append(
                {"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset}
            )
            payloads.append(arr.tobytes())
            offset += len(payloads[-1])
        header = canonical_json(
            {
                "config": self.config,
                "stage": self.stage,
                "step": self.step,
                "rng": self.rng_state,
                "prompt_meta": self.prompt_meta,
                "tensors": directory,
            }
        ).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for p in payloads:
                f.write(p)

    @staticmethod
    def load(path: Path | str) -> "Checkpoint":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != CKPT_MAGIC:
                raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode("utf-8"))
            payload = f.read()
        tensors = {}
        for entry in header["tensors"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = entry["offset"]
            arr = np.frombuffer(payload, dtype="<f4", count=size, offset=start)
            tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
        return Checkpoint(
            config=header["config"],
            stage=header["stage"],
            step=header["step"],
            rng_state=header["rng"],
            tensors=tensors,
            prompt_meta=header.get("prompt_meta"),
        )

    # -- model/prompt bridging ---------------------------------------------

    @staticmethod
    def from_state(
        config: dict,
        stage: str,
        step: int,
        rng_state: dict | None,
        model: GroundingModel,
        prompts: PromptState | None,
        opt: OptState | None,
    ) -> "Checkpoint":
        tensors: dict[str, np.ndarray] = {}
        for name, t in model.params.items():
            tensors[f"model.{name}"] = t.data
        prompt_meta = None
        if prompts is not None:
            if prompts.visual is not None:
                tensors["prompt.visual"] = prompts.visual.data
            if prompts.text is not None:
                tensors["prompt.text"] = prompts.text.data
            prompt_meta = {"width": prompts.width, "mode": prompts.mode}
        if opt is not None:
            for name, arr in opt.m.items():
                tensors[f"opt.m.{name}"] = arr
            for name, arr in opt.v.items():
                tensors[f"opt.v.{name}"] = arr
        return Checkpoint(
            config=config,
            stage=stage,
            step=step,
            rng_state=rng_state,
            tensors=tensors,
            prompt_meta=prompt_meta,
        )

    def restore_model(self, cfg: ModelConfig, dtype=np.float32) -> GroundingModel:
        from tvp.model import _param_shapes

        params: dict[str, Tensor] = {}
        for name, arr in self.tensors.items():
            if name.startswith("model."):
                params[name[len("model."):]] = Tensor.param(arr.astype(dtype))
        if not params:
            raise ValueError("checkpoint holds no model parameters")
        expected = _param_shapes(cfg)
        if set(expected) != set(params):
            raise ValueError("checkpoint parameter names do not match the model config")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(
                    f"checkpoint tensor {name} has shape {params[name].shape}, expected {shape}"
                )
        return GroundingModel(cfg, params)

    def restore_prompts(self, dtype=np.float32) -> PromptState | None:
        if "prompt.visual" not in self.tensors and "prompt.text" not in self.tensors:
            return None
        meta = self.prompt_meta or {"width": 0, "mode": "replace"}
        vis = self.tensors.get("prompt.visual")
        txt = self.tensors.get("prompt.text")
        return PromptState(
            visual=None if vis is None else Tensor(vis.astype(dtype), requires_grad=False),
            text=None if txt is None else Tensor(txt.astype(dtype), requires_grad=False),
            width=int(meta["width"]),
            mode=meta["mode"],
        )


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

def _rng_state_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))


class Trainer:
    """Runs one stage over a loaded dataset with per-epoch held-out metrics."""

    def __init__(
        self,
        model: GroundingModel,
        cfg: TrainConfig,
        prompts: PromptState | None = None,
        config_echo: dict | None = None,
    ):
        self.model = model
        self.cfg = cfg
        self.prompts = prompts
        self.config_echo = config_echo or {"train": cfg.to_json()}
        self._configure_stage()
        self.opt = OptState.for_tensors(self.trainable)
        self.history: list[dict] = []
        self.global_step = 0

    def _configure_stage(self) -> None:
        stage = self.cfg.stage
        for t in self.model.params.values():
            t.requires_grad = stage in ("base", "finetune")
        if stage == "base":
            if self.prompts is not None:
                raise ValueError("base stage trains without prompts; got a prompt set")
            self.trainable = dict(self.model.params)
            self.decay_keys = set(self.trainable)
            return
        if self.prompts is None:
            raise ValueError(f"{stage} stage requires a prompt set")
        prompt_trainable = stage == "prompt"
        for t in (self.prompts.visual, self.prompts.text):
            if t is not None:
                t.requires_grad = prompt_trainable
        if stage == "prompt":
            self.trainable = {}
            if self.prompts.visual is not None:
                self.trainable["prompt.visual"] = self.prompts.visual
            if self.prompts.text is not None:
                self.trainable["prompt.text"] = self.prompts.text
            if not self.trainable:
                raise ValueError("prompt stage has no prompt tensors to train")
            self.decay_keys = set()  # prompts are never weight-decayed
        else:  # finetune
            self.trainable = dict(self.model.params)
            self.decay_keys = set(self.trainable)

    # -- single update ---------------------------------------------------------

    def step(self, batch: list[LoadedSample], lr: float, rng: np.random.Generator) -> LossBreakdown:
        """One optimizer update on a batch; returns the mean loss breakdown.

        The batch is split into ``threads`` contiguous shards; each shard runs
        through one shared vision graph. Shard forwards may execute
        concurrently, but backward passes always run sequentially in shard
        order, so results are deterministic for a fixed thread count.
        """
        for t in self.trainable.values():
            t.zero_grad()
        n_shards = min(self.cfg.threads, len(batch))
        bounds = np.linspace(0, len(batch), n_shards + 1).astype(int)
        shards = [batch[a:b] for a, b in zip(bounds, bounds[1:]) if b > a]
        shard_rngs = rng.spawn(len(shards))

        def run_shard(arg):
            shard, shard_rng = arg
            return self.model.forward_batch(
                [s.batch for s in shard],
                [s.tokens for s in shard],
                prompts=self.prompts,
                gts=[s.gt for s in shard],
                loss_cfg=self.cfg.loss,
                rng=shard_rng,
                train=True,
            )

        try:
            if len(shards) > 1:
                with ThreadPoolExecutor(max_workers=len(shards)) as pool:
                    outputs = list(pool.map(run_shard, zip(shards, shard_rngs)))
            else:
                outputs = [run_shard((shards[0], shard_rngs[0]))]
        except FloatingPointError as exc:
            self._dump_divergence(None)
            raise TrainingDiverged(f"non-finite forward at step {self.global_step}: {exc}") from exc

        # Fixed-order reduction: backward passes run sequentially in shard
        # order no matter how the forwards were scheduled.
        results = []
        for shard, (shard_results, shard_loss) in zip(shards, outputs):
            shard_loss.backward(np.asarray(len(shard) / len(batch), dtype=shard_loss.dtype))
            results.extend(shard_results)

        scale = 1.0 / len(batch)
        mean = LossBreakdown(
            tiou_loss=sum(r.breakdown.tiou_loss for r in results) * scale,
            dis_loss=sum(r.breakdown.dis_loss for r in results) * scale,
            dur_loss=sum(r.breakdown.dur_loss for r in results) * scale,
            total=sum(r.breakdown.total for r in results) * scale,
        )
        if not math.isfinite(mean.total):
            self._dump_divergence(mean)
            raise TrainingDiverged(f"non-finite loss at step {self.global_step}: {mean}")
        adamw_update(self.trainable, self.opt, lr, self.cfg.weight_decay, self.decay_keys)
        return mean

    def _dump_divergence(self, mean: LossBreakdown | None) -> None:
        grad_norms = {
            k: float(np.linalg.norm(t.grad)) if t.grad is not None else 0.0
            for k, t in self.trainable.items()
        }
        param_norms = {k: float(np.linalg.norm(t.data)) for k, t in self.trainable.items()}
        dump = {
            "step": self.global_step,
            "loss": None
            if mean is None
            else {
                "tiou": mean.tiou_loss,
                "dis": mean.dis_loss,
                "dur": mean.dur_loss,
                "total": mean.total,
            },
            "grad_norms": grad_norms,
            "param_norms": param_norms,
        }
        print(json.dumps({"training_diverged": dump}), file=sys.stderr)

    def validate(
        self, val_samples: list[LoadedSample], thresholds=DEFAULT_THRESHOLDS
    ) -> tuple[dict, float]:
        """Held-out accuracies and mean loss under the stage's loss config."""
        pairs = []
        losses = []
        with no_grad():
            for start in range(0, len(val_samples), 64):
                chunk = val_samples[start : start + 64]
                results, _ = self.model.forward_batch(
                    [s.batch for s in chunk],
                    [s.tokens for s in chunk],
                    prompts=self.prompts,
                    gts=[s.gt for s in chunk],
                    loss_cfg=self.cfg.loss,
                )
                for s, r in zip(chunk, results):
                    pairs.append((s.record.id, r.interval, s.gt))
                    losses.append(r.breakdown.total)
        report = report_from_pairs(pairs, thresholds=thresholds)
        return report.accuracies, float(np.mean(losses))

    # -- full stage -------------------------------------------------------------

    def train(
        self,
        train_samples: list[LoadedSample],
        val_samples: list[LoadedSample] | None = None,
        thresholds=DEFAULT_THRESHOLDS,
    ) -> Checkpoint:
        if not train_samples:
            raise ValueError("training set is empty")
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        dropout_rng = np.random.default_rng([cfg.seed, 0xD0])
        steps_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
        total_steps = cfg.epochs * steps_per_epoch

        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_samples))
            epoch_losses: list[float] = []
            for b in range(steps_per_epoch):
                batch = [train_samples[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                lr = lr_at(self.global_step, total_steps, cfg)
                mean = self.step(batch, lr, dropout_rng)
                epoch_losses.append(mean.total)
                self.global_step += 1
            row = {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "lr_last": lr_at(self.global_step - 1, total_steps, cfg),
            }
            if val_samples:
                accs, val_loss = self.validate(val_samples, thresholds)
                row["val_loss"] = val_loss
                for m, v in accs.items():
                    row[f"val_acc@{m:g}"] = v
            self.history.append(row)
            log.info("stage=%s epoch=%d %s", cfg.stage, epoch, row)

        return Checkpoint.from_state(
            config=self.config_echo,
            stage=cfg.stage,
            step=self.global_step,
            rng_state=_rng_state_json(rng),
            model=self.model,
            prompts=self.prompts,
            opt=self.opt,
        )


def stage_config(cfg: TrainConfig, stage: str, **overrides) -> TrainConfig:
    """Derive a stage-specific config (stage default lr unless overridden)."""
    return replace(cfg, stage=stage, peak_lr=overrides.pop("peak_lr", None), **overrides)
