"""Dataset directory layout and binary frame format.

A dataset directory holds ``manifest.json`` plus one ``<id>.frames`` file per
sample. The frames file is:

* 8-byte magic ``TVPFRM1\\0``;
* four little-endian u32: n_vid, C, H, W;
* raw little-endian float32 pixel data in C order.

The manifest carries a spec echo, the per-sample records (token ids, ground
truth interval, split assignment) and the generator's self-check summary.
All JSON is written canonically (sorted keys, no whitespace) so identical
inputs produce byte-identical trees.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tvp.frames import FrameBatch, PipelineConfig, RawVideo, preprocess
from tvp.intervals import MIN_GT_DURATION, TimeInterval

__all__ = [
    "FRAMES_MAGIC",
    "SampleRecord",
    "Dataset",
    "LoadedSample",
    "write_frames_file",
    "read_frames_file",
    "canonical_json",
    "load_dataset",
    "load_split",
]

FRAMES_MAGIC = b"TVPFRM1\x00"
MANIFEST_NAME = "manifest.json"

# Nominal decode rate for synthetic clips; real adapters should supply the
# true duration.
NOMINAL_FPS = 8.0


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_frames_file(path: Path | str, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise ValueError(f"expected (n_vid, C, H, W) array, got shape {frames.shape}")
    n, c, h, w = frames.shape
    with open(path, "wb") as f:
        f.write(FRAMES_MAGIC)
        f.write(struct.pack("<4I", n, c, h, w))
        f.write(frames.tobytes())


def read_frames_file(path: Path | str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FRAMES_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        n, c, h, w = struct.unpack("<4I", f.read(16))
        payload = f.read(n * c * h * w * 4)
    if len(payload) != n * c * h * w * 4:
        raise ValueError(f"{path}: truncated pixel payload")
    return np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w).copy()


@dataclass(frozen=True)
class SampleRecord:
    """One (video, query, interval) triple plus manifest metadata.

    ``event_class`` is analysis metadata only and is never fed to the model.
    """

    id: str
    frames_file: str
    tokens: tuple[int, ...]
    gt: TimeInterval
    n_vid: int
    event_class: int
    split: str

    def __post_init__(self) -> None:
        if self.gt.duration < MIN_GT_DURATION:
            raise ValueError(
                f"sample {self.id}: degenerate ground truth (duration {self.gt.duration:.2e})"
            )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "frames_file": self.frames_file,
            "tokens": list(self.tokens),
            "gt": [self.gt.start, self.gt.end],
            "n_vid": self.n_vid,
            "event_class": self.event_class,
            "split": self.split,
        }

    @staticmethod
    def from_json(d: dict) -> "SampleRecord":
        return SampleRecord(
            id=d["id"],
            frames_file=d["frames_file"],
            tokens=tuple(int(t) for t in d["tokens"]),
            gt=TimeInterval(float(d["gt"][0]), float(d["gt"][1])),
            n_vid=int(d["n_vid"]),
            event_class=int(d["event_class"]),
            split=d["split"],
        )


@dataclass
class Dataset:
    root: Path
    spec_echo: dict
    records: list[SampleRecord]
    self_check: dict | None = None

    def split(self, name: str) -> list[SampleRecord]:
        out = [r for r in self.records if r.split == name]
        if not out:
            raise ValueError(f"split {name!r} is empty")
        return out

    def load_video(self, record: SampleRecord) -> RawVideo:
        frames = read_frames_file(self.root / record.frames_file)
        return RawVideo(frames=frames, duration_s=frames.shape[0] / NOMINAL_FPS)


def load_dataset(root: Path | str) -> Dataset:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    doc = json.loads(manifest_path.read_text())
    records = [SampleRecord.from_json(r) for r in doc["records"]]
    return Dataset(
        root=root,
        spec_echo=doc.get("spec", {}),
        records=records,
        self_check=doc.get("self_check"),
    )


@dataclass
class LoadedSample:
    """A record with its preprocessed frame batch resident in memory."""

    record: SampleRecord
    batch: FrameBatch

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.record.tokens

    @property
    def gt(self) -> TimeInterval:
        return self.record.gt


def load_split(dataset: Dataset, split: str, pipe_cfg: PipelineConfig) -> list[LoadedSample]:
    """Load and preprocess every sample of a split (deterministic order)."""
    out = []
    for record in dataset.split(split):
        video = dataset.load_video(record)
        out.append(LoadedSample(record=record, batch=preprocess(video, pipe_cfg)))
    return out
