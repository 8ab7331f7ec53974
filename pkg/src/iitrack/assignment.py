"""One decision per detection and per track: augmented decision matrix,
Hungarian selection and the margin training loss."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import kernels
from .decisions import DET, TRACK, DecisionKind, DecisionLabel

FORBIDDEN = -1.0e6
FILLER = 0.0


class Cell(IntEnum):
    APPEARANCE_MATCH = 0
    BBOX_MATCH = 1
    NEWBORN = 2
    FP_DETECTION = 3
    OUT_OF_RANGE = 4
    FP_TRACK = 5
    OCCLUDED = 6
    FILLER = 7
    FORBIDDEN = 8

    @property
    def kind(self) -> DecisionKind | None:
        return _CELL_KIND.get(self)


_CELL_KIND = {
    Cell.APPEARANCE_MATCH: DecisionKind.APPEARANCE_MATCH,
    Cell.BBOX_MATCH: DecisionKind.BBOX_MATCH,
    Cell.NEWBORN: DecisionKind.NEWBORN_TRACK,
    Cell.FP_DETECTION: DecisionKind.FALSE_POSITIVE_DETECTION,
    Cell.OUT_OF_RANGE: DecisionKind.OUT_OF_RANGE_TRACK,
    Cell.FP_TRACK: DecisionKind.FALSE_POSITIVE_TRACK,
    Cell.OCCLUDED: DecisionKind.OCCLUDED_TRACK,
}

# index of each kind inside a flat score layout
FAMILY = {
    DecisionKind.APPEARANCE_MATCH: 0,
    DecisionKind.BBOX_MATCH: 1,
    DecisionKind.NEWBORN_TRACK: 2,
    DecisionKind.FALSE_POSITIVE_DETECTION: 3,
    DecisionKind.OUT_OF_RANGE_TRACK: 4,
    DecisionKind.FALSE_POSITIVE_TRACK: 5,
    DecisionKind.OCCLUDED_TRACK: 6,
}


@dataclass
class ScoreFamilies:
    """The seven score families of one frame (D detections, K tracks)."""

    app: np.ndarray      # D x K
    bbox: np.ndarray     # D x K
    newborn: np.ndarray  # D
    fpdet: np.ndarray    # D
    oor: np.ndarray      # K
    fpt: np.ndarray      # K
    occ: np.ndarray      # K

    def __post_init__(self):
        d, k = len(self.newborn), len(self.oor)
        for name in ("app", "bbox"):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(d, k)
            setattr(self, name, a)
        if not (len(self.fpdet) == d and len(self.fpt) == len(self.occ) == k):
            raise ValueError("score family shapes disagree")

    @property
    def D(self) -> int:
        return len(self.newborn)

    @property
    def K(self) -> int:
        return len(self.oor)

    def flat(self) -> np.ndarray:
        """Concatenation in ``FAMILY`` order (pair scores row-major, det index major)."""
        return np.concatenate([self.app.ravel(), self.bbox.ravel(), self.newborn, self.fpdet,
                               self.oor, self.fpt, self.occ]).astype(np.float64)

    @classmethod
    def zeros(cls, d: int, k: int) -> "ScoreFamilies":
        return cls(np.zeros((d, k)), np.zeros((d, k)), np.zeros(d), np.zeros(d),
                   np.zeros(k), np.zeros(k), np.zeros(k))


def flat_offsets(d: int, k: int) -> list[int]:
    sizes = [d * k, d * k, d, d, k, k, k]
    return [int(v) for v in np.concatenate([[0], np.cumsum(sizes)[:-1]])]


@dataclass
class DecisionMatrix:
    scores: np.ndarray  # (D+K) x (D+K)
    tags: np.ndarray    # same shape, Cell codes
    D: int
    K: int


def _pick(values: Sequence[float], tags: Sequence[Cell]) -> tuple[float, Cell]:
    # first maximum wins, so the argument order is the tie preference
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return float(values[best]), tags[best]


def build_matrix(s: ScoreFamilies) -> DecisionMatrix:
    d, k = s.D, s.K
    n = d + k
    scores = np.full((n, n), FORBIDDEN)
    tags = np.full((n, n), int(Cell.FORBIDDEN), dtype=np.int8)
    for i in range(d):
        for j in range(k):
            v, t = _pick((s.app[i, j], s.bbox[i, j]), (Cell.APPEARANCE_MATCH, Cell.BBOX_MATCH))
            scores[i, j], tags[i, j] = v, t
        v, t = _pick((s.newborn[i], s.fpdet[i]), (Cell.NEWBORN, Cell.FP_DETECTION))
        scores[i, k + i], tags[i, k + i] = v, t
    for j in range(k):
        v, t = _pick((s.occ[j], s.oor[j], s.fpt[j]), (Cell.OCCLUDED, Cell.OUT_OF_RANGE, Cell.FP_TRACK))
        scores[d + j, j], tags[d + j, j] = v, t
        scores[d + j, k:] = FILLER
        tags[d + j, k:] = int(Cell.FILLER)
    return DecisionMatrix(scores, tags, d, k)


@dataclass
class MatchResult:
    """``detections[i]`` / ``tracks[j]`` = (kind, partner index or None)."""

    detections: list[tuple[DecisionKind, int | None]]
    tracks: list[tuple[DecisionKind, int | None]]
    objective: float
    columns: np.ndarray  # column chosen for each matrix row


def hungarian(m: DecisionMatrix) -> MatchResult:
    n = m.D + m.K
    if n == 0:
        return MatchResult([], [], 0.0, np.zeros(0, dtype=np.intp))
    cols = kernels.hungarian_max(m.scores)
    objective = 0.0
    for r in range(n):
        objective += float(m.scores[r, cols[r]])
    dets: list = [None] * m.D
    trks: list = [None] * m.K
    for r in range(n):
        c = int(cols[r])
        tag = Cell(int(m.tags[r, c]))
        if tag is Cell.FORBIDDEN:
            raise RuntimeError("assignment selected a forbidden cell")
        if tag is Cell.FILLER:
            continue
        if r < m.D and c < m.K:
            dets[r] = (tag.kind, c)
            trks[c] = (tag.kind, r)
        elif r < m.D:
            dets[r] = (tag.kind, None)
        else:
            trks[c] = (tag.kind, None)
    assert all(x is not None for x in dets) and all(x is not None for x in trks)
    return MatchResult(dets, trks, objective, np.asarray(cols, dtype=np.intp))


def decide_frame(s: ScoreFamilies) -> MatchResult:
    return hungarian(build_matrix(s))


# ------------------------------------------------------------- margin loss

def margin_index(d: int, k: int, labels: Sequence[DecisionLabel], track_ids: Sequence[int]):
    """Hinge terms of one frame as (family, local index) arrays.

    Returns ``(subject, correct_family, correct_local, wrong_family, wrong_local)``
    with one entry per (subject, wrong candidate); ``subject`` counts subjects
    in label order. Pair local index is ``det * K + track``.
    """
    col = {int(t): j for j, t in enumerate(track_ids)}
    by_subject = {lab.subject: lab for lab in labels}
    subj, cf, cl, wf, wl = [], [], [], [], []
    n_subjects = 0
    app, bbox = FAMILY[DecisionKind.APPEARANCE_MATCH], FAMILY[DecisionKind.BBOX_MATCH]
    subjects = [(DET, i) for i in range(d)] + [(TRACK, t) for t in track_ids]
    for side, sid in subjects:
        lab = by_subject.get((side, sid))
        if lab is None:
            raise KeyError(f"subject {(side, sid)} has no label")
        if side == DET:
            i = sid
            pairs = [i * k + j for j in range(k)]
            solo = [(FAMILY[DecisionKind.NEWBORN_TRACK], i), (FAMILY[DecisionKind.FALSE_POSITIVE_DETECTION], i)]
            partner = None if lab.partner is None else i * k + col[lab.partner]
        else:
            j = col[sid]
            pairs = [i * k + j for i in range(d)]
            solo = [(FAMILY[kd], j) for kd in (DecisionKind.OUT_OF_RANGE_TRACK, DecisionKind.FALSE_POSITIVE_TRACK,
                                                DecisionKind.OCCLUDED_TRACK)]
            partner = None if lab.partner is None else lab.partner * k + j
        cands = [(app, p) for p in pairs] + [(bbox, p) for p in pairs] + solo
        if lab.kind.is_pair:
            correct = (app, partner)
            excluded = {(bbox, partner)} if lab.bbox_admissible else set()
        else:
            correct = (FAMILY[lab.kind], sid if side == DET else col[sid])
            excluded = set()
        for c in cands:
            if c == correct or c in excluded:
                continue
            subj.append(n_subjects)
            cf.append(correct[0])
            cl.append(correct[1])
            wf.append(c[0])
            wl.append(c[1])
        n_subjects += 1
    arr = lambda v: np.asarray(v, dtype=np.intp)  # noqa: E731
    return arr(subj), arr(cf), arr(cl), arr(wf), arr(wl), n_subjects


def margin_loss(s: ScoreFamilies, labels: Sequence[DecisionLabel], track_ids: Sequence[int],
                margin: float) -> float:
    """Mean over subjects of the summed hinge max(0, m - (s_correct - s_wrong))."""
    _, cf, cl, wf, wl, n = margin_index(s.D, s.K, labels, track_ids)
    if n == 0:
        return 0.0
    flat = s.flat()
    off = np.asarray(flat_offsets(s.D, s.K))
    gap = flat[off[cf] + cl] - flat[off[wf] + wl]
    return float(np.maximum(0.0, margin - gap).sum() / n)


def label_matrix_choice(labels: Sequence[DecisionLabel], d: int, track_ids: Sequence[int]):
    """Per-detection and per-track (kind, partner) read off labels, in matrix order."""
    col = {int(t): j for j, t in enumerate(track_ids)}
    by_subject = {lab.subject: lab for lab in labels}
    dets = []
    for i in range(d):
        lab = by_subject[(DET, i)]
        dets.append((lab.kind, None if lab.partner is None else col[lab.partner]))
    trks = []
    for t in track_ids:
        lab = by_subject[(TRACK, t)]
        trks.append((lab.kind, lab.partner))
    return dets, trks


def decision_correct(chosen: tuple[DecisionKind, int | None], label: DecisionLabel, partner_col=None) -> bool:
    """A pair decision is right when the partner agrees and the tag is
    AppearanceMatch, or BboxMatch on an admissible pair."""
    kind, partner = chosen
    if label.kind.is_pair:
        want = label.partner if partner_col is None else partner_col
        if not kind.is_pair or partner != want:
            return False
        return kind is DecisionKind.APPEARANCE_MATCH or label.bbox_admissible
    return kind is label.kind
