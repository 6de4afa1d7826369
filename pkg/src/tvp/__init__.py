"""Desk-scale 2D temporal video grounding with text-visual prompt tuning."""

from tvp.intervals import (
    LossBreakdown,
    LossConfig,
    TimeInterval,
    fd_grad_oracle,
    grad_tdiou,
    loss_dis,
    loss_dur,
    loss_tdiou,
    loss_tiou,
    tiou,
)

__version__ = "0.1.0"

__all__ = [
    "LossBreakdown",
    "LossConfig",
    "TimeInterval",
    "fd_grad_oracle",
    "grad_tdiou",
    "loss_dis",
    "loss_dur",
    "loss_tdiou",
    "loss_tiou",
    "tiou",
    "__version__",
]
