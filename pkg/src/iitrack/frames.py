"""Frame records and their line-per-frame text format."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .decisions import DecisionKind, DecisionLabel
from .geometry import EgoState, OcclusionGrid, OrientedBox, Pose2D


@dataclass(frozen=True, eq=False)
class ObjectState:
    """Ground-truth object; ``box`` is in the world frame."""

    identity: int
    box: OrientedBox
    embedding: np.ndarray

    @property
    def pose(self) -> Pose2D:
        return Pose2D(self.box.x, self.box.y, self.box.theta)

    @property
    def velocity(self) -> tuple[float, float]:
        return (self.box.vx, self.box.vy)

    @property
    def dims(self) -> tuple[float, float, float]:
        return (self.box.h, self.box.l, self.box.w)

    def __eq__(self, other):
        if not isinstance(other, ObjectState):
            return NotImplemented
        return (self.identity == other.identity and self.box == other.box
                and np.array_equal(self.embedding, other.embedding))


@dataclass(frozen=True, eq=False)
class Detection:
    """Emulated detector output; ``box`` is in the ego frame at the frame's time."""

    box: OrientedBox
    score: float
    appearance: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Detection):
            return NotImplemented
        return (self.box == other.box and self.score == other.score
                and np.array_equal(self.appearance, other.appearance))


@dataclass(frozen=True, eq=False)
class FrameRecord:
    t: int
    ego: EgoState
    objects: tuple[ObjectState, ...]
    detections: tuple[Detection, ...]
    grid: OcclusionGrid
    association: tuple[int | None, ...]
    appearance_valid: tuple[bool, ...]
    bbox_valid: tuple[bool, ...]
    live_tracks: tuple[int, ...] = ()
    labels: tuple[DecisionLabel, ...] = ()

    def __post_init__(self):
        n = len(self.detections)
        if not (len(self.association) == len(self.appearance_valid) == len(self.bbox_valid) == n):
            raise ValueError("association/validity arrays must match the detection count")
        seen = [a for a in self.association if a is not None]
        if len(seen) != len(set(seen)):
            raise ValueError(f"frame {self.t}: an identity is associated with two detections")

    def object(self, identity: int) -> ObjectState:
        for o in self.objects:
            if o.identity == identity:
                return o
        raise KeyError(identity)

    def label_for(self, subject: tuple[str, int]) -> DecisionLabel:
        for lab in self.labels:
            if lab.subject == subject:
                return lab
        raise KeyError(subject)

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return to_line(self) == to_line(other)


# ------------------------------------------------------------ text format

def _floats(values) -> list[float]:
    return [float(v) for v in values]


def _pack_bits(cells: np.ndarray) -> str:
    return base64.b64encode(np.packbits(cells.ravel().astype(np.uint8)).tobytes()).decode("ascii")


def _unpack_bits(text: str, width: int, height: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(text.encode("ascii"), validate=True), dtype=np.uint8)
    if raw.size != (width * height + 7) // 8:
        raise ValueError(f"bitmask holds {raw.size} bytes, grid needs {(width * height + 7) // 8}")
    bits = np.unpackbits(raw, count=width * height).astype(bool)
    return bits.reshape(height, width)


def grid_to_dict(grid: OcclusionGrid) -> dict:
    return {
        "origin": _floats((grid.origin.x, grid.origin.y, grid.origin.theta)),
        "cell": float(grid.cell),
        "width": int(grid.width),
        "height": int(grid.height),
        "bits": _pack_bits(grid.cells),
    }


def grid_from_dict(d: dict) -> OcclusionGrid:
    w, h = int(d["width"]), int(d["height"])
    return OcclusionGrid(Pose2D(*map(float, d["origin"])), float(d["cell"]), w, h,
                         _unpack_bits(d["bits"], w, h))


def label_to_dict(lab: DecisionLabel) -> dict:
    return {"subject": [lab.subject[0], int(lab.subject[1])], "kind": lab.kind.value,
            "partner": lab.partner, "bbox_admissible": bool(lab.bbox_admissible)}


def label_from_dict(d: dict) -> DecisionLabel:
    return DecisionLabel((str(d["subject"][0]), int(d["subject"][1])), DecisionKind(d["kind"]),
                         None if d["partner"] is None else int(d["partner"]), bool(d["bbox_admissible"]))


def frame_to_dict(fr: FrameRecord) -> dict:
    e = fr.ego
    return {
        "t": int(fr.t),
        "ego": _floats((e.x, e.y, e.theta, e.vx, e.vy)),
        "objects": [{"id": int(o.identity), "box": _floats(o.box.as_tuple()), "app": _floats(o.embedding)}
                    for o in fr.objects],
        "detections": [{"box": _floats(d.box.as_tuple()), "score": float(d.score), "app": _floats(d.appearance)}
                       for d in fr.detections],
        "grid": grid_to_dict(fr.grid),
        "association": [None if a is None else int(a) for a in fr.association],
        "app_valid": [bool(v) for v in fr.appearance_valid],
        "bbox_valid": [bool(v) for v in fr.bbox_valid],
        "live_tracks": [int(i) for i in fr.live_tracks],
        "labels": [label_to_dict(lab) for lab in fr.labels],
    }


def frame_from_dict(d: dict) -> FrameRecord:
    ex, ey, eth, evx, evy = map(float, d["ego"])
    return FrameRecord(
        t=int(d["t"]),
        ego=EgoState(ex, ey, eth, evx, evy),
        objects=tuple(ObjectState(int(o["id"]), OrientedBox.from_tuple(o["box"]),
                                  np.array(o["app"], dtype=np.float64)) for o in d["objects"]),
        detections=tuple(Detection(OrientedBox.from_tuple(x["box"]), float(x["score"]),
                                   np.array(x["app"], dtype=np.float64)) for x in d["detections"]),
        grid=grid_from_dict(d["grid"]),
        association=tuple(None if a is None else int(a) for a in d["association"]),
        appearance_valid=tuple(bool(v) for v in d["app_valid"]),
        bbox_valid=tuple(bool(v) for v in d["bbox_valid"]),
        live_tracks=tuple(int(i) for i in d["live_tracks"]),
        labels=tuple(label_from_dict(x) for x in d["labels"]),
    )


def to_line(fr: FrameRecord) -> str:
    """Canonical single-line JSON encoding (no trailing newline)."""
    return json.dumps(frame_to_dict(fr), sort_keys=True, separators=(",", ":"), allow_nan=False)


def from_line(line: str) -> FrameRecord:
    return frame_from_dict(json.loads(line))


def write_sequence(path: str | Path, frames: Iterable[FrameRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for fr in frames:
            fh.write(to_line(fr))
            fh.write("\n")


def read_sequence(path: str | Path) -> list[FrameRecord]:
    with open(path, encoding="utf-8") as fh:
        return [from_line(line) for line in fh if line.strip()]


def sequence_name(index: int) -> str:
    return f"seq_{index:05d}.jsonl"


def read_dataset(directory: str | Path) -> list[list[FrameRecord]]:
    """All sequences listed in ``manifest.json``, in index order."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [read_sequence(directory / name) for name in manifest["sequences"]]


def iter_frames(dataset: list[list[FrameRecord]]) -> Iterator[tuple[int, int, FrameRecord]]:
    for s, seq in enumerate(dataset):
        for f, fr in enumerate(seq):
            yield s, f, fr
