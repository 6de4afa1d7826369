"""Encoder cost accounting: analytic FLOPs and wall-clock comparison.

Compares a 2D per-frame conv encoder against a 3D conv stand-in that mirrors
it layer for layer with temporal kernel size 3 and no temporal striding, so
the measured difference isolates the temporal-kernel cost. The analytic FLOP
ratio is the primary result; wall-clock confirms the direction but depends
on hardware.

Counting conventions (documented so numbers are reproducible): convolutions
use same-padding, output spatial dims are input/stride (divisibility is
required), each conv costs ``2 * C_in * C_out * k_t*k_h*k_w`` FLOPs per
output element, and an activation adds 1 op per output element when the
layer declares one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

__all__ = ["ConvLayer", "EncoderSpec", "BenchConfig", "BenchReport", "count_flops", "run_bench", "desk_encoder_specs"]

MIN_STABLE_REPS = 10
NOISY_STD_FRACTION = 0.2


@dataclass(frozen=True)
class ConvLayer:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]  # (t, h, w)
    stride: tuple[int, int, int] = (1, 1, 1)
    activation: bool = True

    def __post_init__(self) -> None:
        if min(self.in_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError("kernel and stride entries must be >= 1")


@dataclass(frozen=True)
class EncoderSpec:
    kind: str  # "2d" | "3d"
    layers: tuple[ConvLayer, ...]

    def __post_init__(self) -> None:
        if self.kind not in ("2d", "3d"):
            raise ValueError("kind must be '2d' or '3d'")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError(
                    f"channel mismatch between layers: {prev.out_channels} -> {nxt.in_channels}"
                )
        if self.kind == "2d":
            for layer in self.layers:
                if layer.kernel[0] != 1 or layer.stride[0] != 1:
                    raise ValueError("2d encoders must use temporal kernel/stride 1")


def _out_dim(size: int, stride: int, what: str) -> int:
    if size % stride:
        raise ValueError(f"{what} size {size} not divisible by stride {stride}")
    return size // stride


def count_flops(spec: EncoderSpec, input_dims: tuple[int, int, int]) -> int:
    """Total FLOPs for one clip of (n_frames, H, W) through the encoder."""
    t, h, w = input_dims
    if min(input_dims) < 1:
        raise ValueError(f"invalid input dims {input_dims}")
    total = 0
    channels = spec.layers[0].in_channels
    for layer in spec.layers:
        if layer.in_channels != channels:
            raise ValueError(f"layer expects {layer.in_channels} channels, got {channels}")
        kt, kh, kw = layer.kernel
        t = _out_dim(t, layer.stride[0], "temporal")
        h = _out_dim(h, layer.stride[1], "height")
        w = _out_dim(w, layer.stride[2], "width")
        n_out = t * h * w * layer.out_channels
        total += 2 * layer.in_channels * layer.out_channels * kt * kh * kw * t * h * w
        if layer.activation:
            total += n_out
        channels = layer.out_channels
    return total


def desk_encoder_specs(channels: tuple[int, ...] = (16, 32, 64)) -> tuple[EncoderSpec, EncoderSpec]:
    """Matched 2D and 3D stacks; the 3D one differs only by temporal kernels."""
    layers2d = []
    layers3d = []
    cin = 3
    for cout in channels:
        layers2d.append(ConvLayer(cin, cout, kernel=(1, 3, 3), stride=(1, 2, 2)))
        layers3d.append(ConvLayer(cin, cout, kernel=(3, 3, 3), stride=(1, 2, 2)))
        cin = cout
    return EncoderSpec("2d", tuple(layers2d)), EncoderSpec("3d", tuple(layers3d))


# ---------------------------------------------------------------------------
# Reference forward passes (inference only)
# ---------------------------------------------------------------------------

def _conv_forward(x: np.ndarray, weights: np.ndarray, stride: tuple[int, int, int]) -> np.ndarray:
    """Same-padded conv over (C, T, H, W) input; weights (Cout, Cin, kt, kh, kw)."""
    cout, cin, kt, kh, kw = weights.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))
    win = win[:, :: stride[0], :: stride[1], :: stride[2]]
    out = np.tensordot(win, weights, axes=([0, 4, 5, 6], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(3, 0, 1, 2))


def _make_weights(spec: EncoderSpec, rng: np.random.Generator) -> list[np.ndarray]:
    return [
        (rng.standard_normal((l.out_channels, l.in_channels, *l.kernel)) * 0.05).astype(np.float32)
        for l in spec.layers
    ]


def _encoder_forward(spec: EncoderSpec, x: np.ndarray, weights: list[np.ndarray]) -> np.ndarray:
    """Run the stack on a (C, T, H, W) clip."""
    out = x
    for layer, w in zip(spec.layers, weights):
        out = _conv_forward(out, w, layer.stride)
        if layer.activation:
            out = np.maximum(out, 0.0)
    return out


@dataclass(frozen=True)
class BenchConfig:
    n_frames: int = 8
    canvas: int = 64
    reps: int = 15
    warmup: int = 3
    seed: int = 0
    channels: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self) -> None:
        if self.n_frames < 1 or self.canvas < 8:
            raise ValueError("need n_frames >= 1 and canvas >= 8")
        if self.reps < 1 or self.warmup < 0:
            raise ValueError("reps must be >= 1 and warmup >= 0")


@dataclass
class BenchReport:
    flops_2d: int
    flops_3d: int
    flops_per_frame_2d: float
    flops_per_frame_3d: float
    flop_ratio: float
    time_2d_mean: float
    time_2d_std: float
    time_3d_mean: float
    time_3d_std: float
    time_ratio: float
    noisy: bool
    reps: int
    warmup: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "flops": {
                "total_2d": self.flops_2d,
                "total_3d": self.flops_3d,
                "per_frame_2d": self.flops_per_frame_2d,
                "per_frame_3d": self.flops_per_frame_3d,
            },
            "flop_ratio": self.flop_ratio,
            "wall_clock_s": {
                "mean_2d": self.time_2d_mean,
                "std_2d": self.time_2d_std,
                "mean_3d": self.time_3d_mean,
                "std_3d": self.time_3d_std,
            },
            "time_ratio": self.time_ratio,
            "noisy": self.noisy,
            "reps": self.reps,
            "warmup": self.warmup,
            "config": self.config,
        }


def _time_encoder(spec: EncoderSpec, x: np.ndarray, cfg: BenchConfig) -> tuple[float, float]:
    weights = _make_weights(spec, np.random.default_rng([cfg.seed, 0xBE]))
    for _ in range(cfg.warmup):
        _encoder_forward(spec, x, weights)
    times = []
    for _ in range(cfg.reps):
        t0 = time.perf_counter()
        _encoder_forward(spec, x, weights)
        times.append(time.perf_counter() - t0)
    arr = np.asarray(times)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if cfg.reps > 1 else 0.0
    return mean, std


def run_bench(cfg: BenchConfig) -> BenchReport:
    """Analytic FLOP comparison first, then a pinned single-threaded timing run
    of both encoders on an identical random clip."""
    spec2d, spec3d = desk_encoder_specs(cfg.channels)
    dims = (cfg.n_frames, cfg.canvas, cfg.canvas)
    flops2 = count_flops(spec2d, dims)
    flops3 = count_flops(spec3d, dims)

    rng = np.random.default_rng(cfg.seed)
    clip = rng.uniform(0.0, 1.0, size=(3, cfg.n_frames, cfg.canvas, cfg.canvas)).astype(np.float32)

    with threadpool_limits(limits=1):
        mean2, std2 = _time_encoder(spec2d, clip, cfg)
        mean3, std3 = _time_encoder(spec3d, clip, cfg)

    noisy = (
        cfg.reps < MIN_STABLE_REPS
        or std2 > NOISY_STD_FRACTION * mean2
        or std3 > NOISY_STD_FRACTION * mean3
    )
    return BenchReport(
        flops_2d=flops2,
        flops_3d=flops3,
        flops_per_frame_2d=flops2 / cfg.n_frames,
        flops_per_frame_3d=flops3 / cfg.n_frames,
        flop_ratio=flops3 / flops2,
        time_2d_mean=mean2,
        time_2d_std=std2,
        time_3d_mean=mean3,
        time_3d_std=std3,
        time_ratio=mean3 / mean2,
        noisy=noisy,
        reps=cfg.reps,
        warmup=cfg.warmup,
        config={
            "n_frames": cfg.n_frames,
            "canvas": cfg.canvas,
            "reps": cfg.reps,
            "warmup": cfg.warmup,
            "seed": cfg.seed,
            "channels": list(cfg.channels),
        },
    )
