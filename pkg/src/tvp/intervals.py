"""Losses over normalized time intervals.

The training objective for interval regression combines three terms:

* a temporal IoU loss ``1 - |pred ∩ gt| / |pred ∪ gt|``,
* a clamped center-distance penalty (keeps gradients alive when the
  prediction does not overlap the target),
* a clamped duration-difference penalty.

All quantities are ratios of interval lengths, so the losses are invariant
under shifting both intervals by the same offset and under scaling both by
a common positive factor.

Every loss comes with a hand-derived analytic gradient with respect to the
predicted endpoints (:func:`grad_tdiou`) and an independent central
finite-difference oracle (:func:`fd_grad_oracle`) used to verify it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "TimeInterval",
    "LossConfig",
    "LossBreakdown",
    "tiou",
    "loss_tiou",
    "loss_dis",
    "loss_dur",
    "loss_tdiou",
    "grad_tdiou",
    "fd_grad_oracle",
    "near_kink",
]

# Minimum ground-truth duration accepted at dataset load.
MIN_GT_DURATION = 1e-4


@dataclass(frozen=True)
class TimeInterval:
    """A ``(start, end)`` pair as fractions of the video duration."""

    start: float
    end: float

    def __post_init__(self) -> None:
        s, e = float(self.start), float(self.end)
        if not (math.isfinite(s) and math.isfinite(e)):
            raise ValueError(f"non-finite interval ({self.start}, {self.end})")
        if not (0.0 <= s <= e <= 1.0):
            raise ValueError(f"invalid interval: need 0 <= start <= end <= 1, got ({s}, {e})")

    @property
    def duration(self) -> float:
        return float(self.end) - float(self.start)

    @property
    def center(self) -> float:
        return (float(self.start) + float(self.end)) / 2.0

    def as_tuple(self) -> tuple[float, float]:
        return (float(self.start), float(self.end))


@dataclass(frozen=True)
class LossConfig:
    """Clamp floors and term weights for the combined interval loss.

    ``dis_denom`` selects the denominator of the center-distance term:
    ``"union"`` (set-measure union, the default) or ``"hull"`` (enclosing
    interval, the convention used by distance-IoU losses for boxes).
    """

    alpha1: float = 0.2
    alpha2: float = 0.4
    beta1: float = 1.0
    beta2: float = 0.1
    dis_denom: str = "union"

    def __post_init__(self) -> None:
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("clamp floors alpha1/alpha2 must be >= 0")
        # beta == 0 is allowed so single-term ablations can be trained.
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("term weights beta1/beta2 must be >= 0")
        if self.dis_denom not in ("union", "hull"):
            raise ValueError(f"dis_denom must be 'union' or 'hull', got {self.dis_denom!r}")


@dataclass(frozen=True)
class LossBreakdown:
    tiou_loss: float
    dis_loss: float
    dur_loss: float
    total: float


def _sign(x: float) -> float:
    # sign(0) = 0 by convention; keeps subgradients on the zero branch.
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


def _inter_union_raw(ps: float, pe: float, gs: float, ge: float) -> tuple[float, float]:
    inter = max(0.0, min(pe, ge) - max(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    return inter, union


def tiou(a: TimeInterval, b: TimeInterval) -> float:
    """Temporal IoU of two intervals; 1.0 for two identical zero-length intervals."""
    inter, union = _inter_union_raw(a.start, a.end, b.start, b.end)
    if union == 0.0:
        return 1.0
    return inter / union


def loss_tiou(pred: TimeInterval, gt: TimeInterval) -> float:
    """``1 - tiou(pred, gt)``, in [0, 1]."""
    return 1.0 - tiou(pred, gt)


def _dis_denom_raw(ps: float, pe: float, gs: float, ge: float, cfg: LossConfig) -> float:
    if cfg.dis_denom == "hull":
        return max(pe, ge) - min(ps, gs)
    _, union = _inter_union_raw(ps, pe, gs, ge)
    return union


def _loss_dis_raw(ps: float, pe: float, gs: float, ge: float, cfg: LossConfig) -> float:
    denom = _dis_denom_raw(ps, pe, gs, ge, cfg)
    if denom == 0.0:
        # Two identical zero-length intervals: centers coincide, clamp floor.
        return cfg.alpha1
    num = abs((gs + ge) / 2.0 - (ps + pe) / 2.0)
    return max(num / denom, cfg.alpha1)


def loss_dis(pred: TimeInterval, gt: TimeInterval, cfg: LossConfig) -> float:
    """Normalized center distance, clamped below at ``alpha1``.

    May exceed 1 for far-apart disjoint intervals.
    """
    return _loss_dis_raw(pred.start, pred.end, gt.start, gt.end, cfg)


def _loss_dur_raw(ps: float, pe: float, gs: float, ge: float, cfg: LossConfig) -> float:
    gt_dur = ge - gs
    if gt_dur <= 0.0:
        raise ValueError("degenerate ground-truth interval: duration must be > 0")
    return max(abs(gt_dur - (pe - ps)) / gt_dur, cfg.alpha2)


def loss_dur(pred: TimeInterval, gt: TimeInterval, cfg: LossConfig) -> float:
    """Relative duration difference, clamped below at ``alpha2``."""
    return _loss_dur_raw(pred.start, pred.end, gt.start, gt.end, cfg)


def _breakdown_raw(ps: float, pe: float, gs: float, ge: float, cfg: LossConfig) -> LossBreakdown:
    inter, union = _inter_union_raw(ps, pe, gs, ge)
    lt = 1.0 - (1.0 if union == 0.0 else inter / union)
    ld = _loss_dis_raw(ps, pe, gs, ge, cfg)
    lu = _loss_dur_raw(ps, pe, gs, ge, cfg)
    total = lt + cfg.beta1 * ld + cfg.beta2 * lu
    return LossBreakdown(tiou_loss=lt, dis_loss=ld, dur_loss=lu, total=total)


def loss_tdiou(pred: TimeInterval, gt: TimeInterval, cfg: LossConfig) -> LossBreakdown:
    """Combined loss ``tiou + beta1*dis + beta2*dur`` with per-term breakdown."""
    return _breakdown_raw(pred.start, pred.end, gt.start, gt.end, cfg)


def _grad_raw(ps: float, pe: float, gs: float, ge: float, cfg: LossConfig) -> tuple[float, float]:
    """d(total)/d(ps, pe) with zero-branch subgradients at every kink."""
    dur_p = pe - ps
    dur_g = ge - gs
    lo = max(ps, gs)
    hi = min(pe, ge)
    m = hi - lo
    inter = max(0.0, m)
    union = dur_p + dur_g - inter

    # max(ps, gs) follows ps only when ps is strictly the larger endpoint;
    # ties take the other branch so the contribution is 0.
    dlo_dps = 1.0 if ps > gs else 0.0
    dhi_dpe = 1.0 if pe < ge else 0.0
    if m > 0.0:
        dinter_dps = -dlo_dps
        dinter_dpe = dhi_dpe
    else:
        dinter_dps = 0.0
        dinter_dpe = 0.0
    dunion_dps = -1.0 - dinter_dps
    dunion_dpe = 1.0 - dinter_dpe

    # tIoU term: L = 1 - inter/union.
    if union == 0.0:
        g1s = g1e = 0.0
    else:
        u2 = union * union
        g1s = -(dinter_dps * union - inter * dunion_dps) / u2
        g1e = -(dinter_dpe * union - inter * dunion_dpe) / u2

    # Distance term: L = max(|dc| / denom, alpha1).
    if cfg.dis_denom == "hull":
        denom = max(pe, ge) - min(ps, gs)
        ddenom_dps = -(1.0 if ps < gs else 0.0)
        ddenom_dpe = 1.0 if pe > ge else 0.0
    else:
        denom = union
        ddenom_dps = dunion_dps
        ddenom_dpe = dunion_dpe
    if denom == 0.0:
        g2s = g2e = 0.0
    else:
        dc = (gs + ge) / 2.0 - (ps + pe) / 2.0
        num = abs(dc)
        ratio = num / denom
        if ratio > cfg.alpha1:
            s = _sign(dc)
            dnum = -0.5 * s  # d|dc|/dps == d|dc|/dpe
            d2 = denom * denom
            g2s = (dnum * denom - num * ddenom_dps) / d2
            g2e = (dnum * denom - num * ddenom_dpe) / d2
        else:
            g2s = g2e = 0.0

    # Duration term: L = max(|dur_g - dur_p| / dur_g, alpha2).
    diff = dur_g - dur_p
    ratio = abs(diff) / dur_g
    if ratio > cfg.alpha2:
        s = _sign(diff)
        g3s = s / dur_g  # d(dur_g - dur_p)/dps = +1
        g3e = -s / dur_g
    else:
        g3s = g3e = 0.0

    return (
        g1s + cfg.beta1 * g2s + cfg.beta2 * g3s,
        g1e + cfg.beta1 * g2e + cfg.beta2 * g3e,
    )


def grad_tdiou(pred: TimeInterval, gt: TimeInterval, cfg: LossConfig) -> tuple[float, float]:
    """Analytic gradient of the combined loss w.r.t. ``(pred.start, pred.end)``.

    At clamp kinks (ratio equal to its floor) and absolute-value kinks the
    subgradient is the derivative of the clamped/zero branch, i.e. 0.
    """
    return _grad_raw(pred.start, pred.end, gt.start, gt.end, cfg)


def fd_grad_oracle(
    pred: TimeInterval, gt: TimeInterval, cfg: LossConfig, h: float = 1e-6
) -> tuple[float, float]:
    """Central finite differences of the combined loss total.

    Evaluates the loss on raw endpoint floats so perturbed points may step
    outside [0, 1] or momentarily invert the interval; callers must keep
    ``pred`` at least ``2h`` away from interval bounds and loss kinks.
    """
    if h <= 0.0:
        raise ValueError("h must be > 0")
    ps, pe = pred.start, pred.end
    gs, ge = gt.start, gt.end

    def total(a: float, b: float) -> float:
        return _breakdown_raw(a, b, gs, ge, cfg).total

    gs_fd = (total(ps + h, pe) - total(ps - h, pe)) / (2.0 * h)
    ge_fd = (total(ps, pe + h) - total(ps, pe - h)) / (2.0 * h)
    return (gs_fd, ge_fd)


def near_kink(pred: TimeInterval, gt: TimeInterval, cfg: LossConfig, tol: float = 1e-4) -> bool:
    """True when ``pred`` sits within ``tol`` of any non-smooth point of the loss.

    Used by gradient-verification harnesses to exclude points where analytic
    subgradients and central differences legitimately disagree.
    """
    ps, pe = pred.start, pred.end
    gs, ge = gt.start, gt.end
    # Endpoint ties (min/max branch switches) and overlap boundaries.
    for d in (ps - gs, pe - ge, ps - ge, pe - gs):
        if abs(d) < tol:
            return True
    # Degenerate prediction leaves no room for central differences.
    if pe - ps < tol:
        return True
    # Absolute-value kinks.
    if abs(((gs + ge) - (ps + pe)) / 2.0) < tol:
        return True
    if abs((ge - gs) - (pe - ps)) < tol:
        return True
    # Clamp boundaries.
    denom = _dis_denom_raw(ps, pe, gs, ge, cfg)
    if denom > 0.0 and abs(abs((gs + ge) / 2.0 - (ps + pe) / 2.0) / denom - cfg.alpha1) < tol:
        return True
    gt_dur = ge - gs
    if gt_dur > 0.0 and abs(abs(gt_dur - (pe - ps)) / gt_dur - cfg.alpha2) < tol:
        return True
    # Perturbed evaluations must stay inside [0, 1].
    if ps < tol or pe > 1.0 - tol:
        return True
    return False
