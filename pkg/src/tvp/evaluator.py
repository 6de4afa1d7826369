"""Evaluation protocol: top-1 accuracy at tIoU thresholds plus mean tIoU.

``Acc(R@1, IoU=m)`` is the fraction of samples whose single predicted
interval has tIoU with the ground truth larger than ``m`` (strictly, by
default; a flag switches to >= for comparison with conventions that differ).
One universal prompt set is applied to every sample in a run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from tvp.autodiff import no_grad
from tvp.data import LoadedSample
from tvp.intervals import TimeInterval, tiou
from tvp.model import GroundingModel, PromptState

__all__ = ["EvalReport", "DEFAULT_THRESHOLDS", "evaluate", "report_from_pairs", "write_per_sample_csv"]

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


@dataclass
class EvalReport:
    accuracies: dict[float, float]
    mean_tiou: float
    n_samples: int
    strict: bool
    per_sample: list[dict]

    def to_json(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "strict": self.strict,
            "mean_tiou": self.mean_tiou,
            "accuracies": {f"{m:g}": v for m, v in sorted(self.accuracies.items())},
        }


def _check_thresholds(thresholds) -> tuple[float, ...]:
    out = tuple(float(m) for m in thresholds)
    if not out:
        raise ValueError("need at least one threshold")
    for m in out:
        if not 0.0 < m < 1.0:
            raise ValueError(f"thresholds must lie in (0, 1), got {m}")
    return out


def report_from_pairs(
    pairs: list[tuple[str, TimeInterval, TimeInterval]],
    thresholds=DEFAULT_THRESHOLDS,
    strict: bool = True,
) -> EvalReport:
    """Build a report from (id, predicted, ground-truth) triples."""
    thresholds = _check_thresholds(thresholds)
    if not pairs:
        raise ValueError("cannot evaluate an empty dataset")
    rows = []
    for sample_id, pred, gt in pairs:
        rows.append(
            {
                "id": sample_id,
                "pred_start": pred.start,
                "pred_end": pred.end,
                "gt_start": gt.start,
                "gt_end": gt.end,
                "tiou": tiou(pred, gt),
            }
        )
    n = len(rows)
    accs = {}
    for m in thresholds:
        if strict:
            hits = sum(1 for r in rows if r["tiou"] > m)
        else:
            hits = sum(1 for r in rows if r["tiou"] >= m)
        accs[m] = hits / n
    mean_tiou = sum(r["tiou"] for r in rows) / n
    return EvalReport(
        accuracies=accs, mean_tiou=mean_tiou, n_samples=n, strict=strict, per_sample=rows
    )


def evaluate(
    model: GroundingModel,
    samples: list[LoadedSample],
    prompts: PromptState | None = None,
    thresholds=DEFAULT_THRESHOLDS,
    strict: bool = True,
    chunk_size: int = 64,
) -> EvalReport:
    """Run the model over the samples and score top-1 predictions.

    The same ``prompts`` argument is applied to every sample; per-sample
    prompt selection is structurally impossible here on purpose.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    pairs = []
    with no_grad():
        for start in range(0, len(samples), chunk_size):
            chunk = samples[start : start + chunk_size]
            results, _ = model.forward_batch(
                [s.batch for s in chunk], [s.tokens for s in chunk], prompts=prompts
            )
            pairs.extend(
                (s.record.id, r.interval, s.gt) for s, r in zip(chunk, results)
            )
    return report_from_pairs(pairs, thresholds=thresholds, strict=strict)


def write_per_sample_csv(report: EvalReport, path: Path | str) -> None:
    fields = ["id", "pred_start", "pred_end", "gt_start", "gt_end", "tiou"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in report.per_sample:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in fields})
