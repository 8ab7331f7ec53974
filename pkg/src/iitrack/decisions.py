"""The seven tracking decisions and their labels."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class DecisionKind(str, Enum):
    APPEARANCE_MATCH = "AppearanceMatch"
    BBOX_MATCH = "BboxMatch"
    NEWBORN_TRACK = "NewbornTrack"
    FALSE_POSITIVE_DETECTION = "FalsePositiveDetection"
    OUT_OF_RANGE_TRACK = "OutOfRangeTrack"
    FALSE_POSITIVE_TRACK = "FalsePositiveTrack"
    OCCLUDED_TRACK = "OccludedTrack"

    @property
    def is_pair(self) -> bool:
        return self in PAIR_KINDS

    @property
    def is_track_only(self) -> bool:
        return self in TRACK_KINDS

    @property
    def is_detection_only(self) -> bool:
        return self in DETECTION_KINDS


PAIR_KINDS = (DecisionKind.APPEARANCE_MATCH, DecisionKind.BBOX_MATCH)
DETECTION_KINDS = (DecisionKind.NEWBORN_TRACK, DecisionKind.FALSE_POSITIVE_DETECTION)
# order doubles as the tag tie-break preference in the decision matrix
TRACK_KINDS = (
    DecisionKind.OCCLUDED_TRACK,
    DecisionKind.OUT_OF_RANGE_TRACK,
    DecisionKind.FALSE_POSITIVE_TRACK,
)
ALL_KINDS = PAIR_KINDS + DETECTION_KINDS + TRACK_KINDS

TRACK = "track"
DET = "det"


@dataclass(frozen=True, order=True)
class DecisionLabel:
    """Correct decision for one subject.

    ``subject`` is ``("track", identity)`` or ``("det", index)``. ``partner``
    is the counterpart (detection index for a track, track identity for a
    detection) and is set exactly for the two match kinds. ``bbox_admissible``
    records whether the BboxMatch SCM also holds for a matched pair.
    """

    subject: tuple[str, int]
    kind: DecisionKind
    partner: int | None = None
    bbox_admissible: bool = False

    def __post_init__(self):
        if (self.partner is not None) != self.kind.is_pair:
            raise ValueError(f"partner must be set iff kind is a match decision ({self})")
        if self.subject[0] not in (TRACK, DET):
            raise ValueError(f"bad subject {self.subject}")
