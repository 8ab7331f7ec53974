"""Decision SCMs for tracking and their shared structural-equation primitives.

Each of the seven decision kinds has a small causal graph whose inputs are
knowledge sources (boxes, appearance, ego state, occlusion map, thresholds,
and an optional oracle association) and whose output is the boolean
decision. With the oracle present the graphs reproduce the ground-truth
labels; without it they run on observable data only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Sequence

import numpy as np

from .decisions import DecisionKind
from .geometry import EgoState, OcclusionGrid, OrientedBox, Pose2D, iou_bev, rotate, wrap_angle
from .scm import CausalGraph, Node, Tag, forward

# input nodes
FORECAST = "Track Motion Forecast"
BOX_PREV = "Track BBOX at T-1"
EGO = "Ego State at T"
GRID = "Occluded Area"
DET_BOXES = "Detection BBOXes at T"
TRACK_APP = "Track Appearance"
DET_APPS = "Detection Appearances"
TRACK_APPS = "Track Appearances"
ORACLE = "Oracle Association"
DET_INDEX = "Detection Index"
R_MAX = "Range Threshold"
TAU_IOU = "IoU Threshold"
TAU_APP = "Appearance Threshold"
# intermediate nodes
PRED_BOX = "Predicted BBOX at T"
OCCLUDED = "Is Occluded"
OUT_OF_RANGE = "Is Out of Range"
MATCH_APP = "Matches Appearance"
MATCH_BOX = "Matches BBOX"
APP_VALID = "Appearance Valid"
BOX_VALID = "BBOX Valid"
MATCH_TRACK = "Matches Any Track"

OUTPUT_NAMES = {
    DecisionKind.APPEARANCE_MATCH: "Appearance Match",
    DecisionKind.BBOX_MATCH: "BBOX Match",
    DecisionKind.NEWBORN_TRACK: "Newborn Track",
    DecisionKind.FALSE_POSITIVE_DETECTION: "False Positive Detection",
    DecisionKind.OUT_OF_RANGE_TRACK: "Out of Range Track",
    DecisionKind.FALSE_POSITIVE_TRACK: "False Positive Track",
    DecisionKind.OCCLUDED_TRACK: "Occluded Track",
}

MATCHES_ANY_MODES = ("or", "appearance")

TAU_IOU_DEFAULT = 0.3
TAU_APP_DEFAULT = 0.5
R_MAX_DEFAULT = 50.0


@dataclass(frozen=True)
class OracleAssociation:
    """Ground-truth association available at training/eval time.

    ``detection_identities[i]`` is the object identity behind detection ``i``
    or ``None`` for clutter. ``track_identity`` is the identity of the track
    under consideration (``None`` for a track born from clutter).
    """

    detection_identities: tuple[int | None, ...]
    appearance_valid: tuple[bool, ...]
    bbox_valid: tuple[bool, ...]
    track_identity: int | None = None
    live_track_identities: tuple[int, ...] = ()

    def with_track(self, identity: int | None) -> "OracleAssociation":
        return OracleAssociation(self.detection_identities, self.appearance_valid,
                                 self.bbox_valid, identity, self.live_track_identities)


@dataclass(frozen=True, eq=False)
class ScmInputs:
    """Knowledge sources for one subject of one frame."""

    detection_boxes: tuple[OrientedBox, ...]
    detection_appearances: tuple[np.ndarray, ...]
    ego: EgoState
    grid: OcclusionGrid
    forecast: tuple[Pose2D, ...] = ()
    box_prev: OrientedBox | None = None
    track_appearance: np.ndarray | None = None
    detection_index: int | None = None
    track_appearances: tuple[np.ndarray, ...] = ()
    r_max: float = R_MAX_DEFAULT
    tau_iou: float = TAU_IOU_DEFAULT
    tau_app: float = TAU_APP_DEFAULT
    oracle: OracleAssociation | None = None

    def __post_init__(self):
        if len(self.detection_boxes) != len(self.detection_appearances):
            raise ValueError("detection boxes and appearances differ in length")
        if not 0.0 < self.tau_iou < 1.0:
            raise ValueError(f"tau_iou {self.tau_iou} outside (0, 1)")
        if not -1.0 < self.tau_app < 1.0:
            raise ValueError(f"tau_app {self.tau_app} outside (-1, 1)")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")


# ---------------------------------------------------------------- primitives

def predicted_bbox_at_t(forecast: Sequence[Pose2D], box_prev: OrientedBox, ego_t) -> OrientedBox:
    """Advance ``box_prev`` (world frame) by the first forecast step and express
    the result in the ego frame at T."""
    if not forecast:
        raise ValueError("empty forecast")
    step = forecast[0]
    wx = box_prev.x + step.x
    wy = box_prev.y + step.y
    px, py = rotate(wx - ego_t.x, wy - ego_t.y, -ego_t.theta)
    vx, vy = rotate(box_prev.vx, box_prev.vy, -ego_t.theta)
    theta = wrap_angle(box_prev.theta + step.theta - ego_t.theta)
    return OrientedBox(px, py, box_prev.z, box_prev.h, box_prev.l, box_prev.w, vx, vy, theta)


def is_occluded(box: OrientedBox, grid: OcclusionGrid) -> bool:
    return grid.occluded_at(box.x, box.y)


def is_out_of_range(box: OrientedBox, r_max: float) -> bool:
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    return math.sqrt(box.x * box.x + box.y * box.y) > r_max


def matches_bbox(
    pred: OrientedBox,
    detections: Sequence[OrientedBox],
    tau_iou: float,
    candidates: Sequence[int] | None = None,
) -> int | None:
    """Highest-IoU detection at or above ``tau_iou``; lowest index wins ties.

    ``candidates`` restricts the scan (the oracle's associated detection).
    """
    best, best_iou = None, -1.0
    idx = range(len(detections)) if candidates is None else sorted(candidates)
    for i in idx:
        v = iou_bev(pred, detections[i])
        if v > best_iou:
            best, best_iou = i, v
    if best is None or best_iou < tau_iou:
        return None
    return best


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def matches_appearance(
    track_app: np.ndarray | None,
    det_apps: Sequence[np.ndarray],
    oracle: OracleAssociation | None,
    tau_app: float,
) -> int | None:
    """Oracle mode: the track's true-positive detection. Otherwise the
    highest-cosine detection at or above ``tau_app``."""
    if oracle is not None:
        if oracle.track_identity is None:
            return None
        for i, ident in enumerate(oracle.detection_identities):
            if ident == oracle.track_identity and oracle.appearance_valid[i]:
                return i
        return None
    if track_app is None:
        return None
    best, best_cos = None, -2.0
    for i, app in enumerate(det_apps):
        c = cosine(track_app, app)
        if c > best_cos:
            best, best_cos = i, c
    if best is None or best_cos < tau_app:
        return None
    return best


def detection_validity(det_index: int, oracle: OracleAssociation | None) -> tuple[bool, bool]:
    if oracle is None:
        raise ValueError("detection validity needs the oracle association")
    return bool(oracle.appearance_valid[det_index]), bool(oracle.bbox_valid[det_index])


def _oracle_candidates(oracle: OracleAssociation | None) -> list[int] | None:
    if oracle is None:
        return None
    if oracle.track_identity is None:
        return []
    return [i for i, ident in enumerate(oracle.detection_identities) if ident == oracle.track_identity]


# ------------------------------------------------------------- equations

def _eq_pred(forecast, box_prev, ego):
    return predicted_bbox_at_t(forecast, box_prev, ego)


def _eq_match_app_any(track_app, det_apps, oracle, tau_app):
    return matches_appearance(track_app, det_apps, oracle, tau_app) is not None


def _eq_match_box_any(pred, dets, oracle, tau_iou):
    return matches_bbox(pred, dets, tau_iou, _oracle_candidates(oracle)) is not None


def _eq_match_app_pair(idx, track_app, det_apps, oracle, tau_app):
    return matches_appearance(track_app, det_apps, oracle, tau_app) == int(idx)


def _eq_match_box_pair(idx, pred, dets, oracle, tau_iou):
    return matches_bbox(pred, dets, tau_iou, _oracle_candidates(oracle)) == int(idx)


def _eq_app_valid(idx, det_apps, track_apps, oracle, tau_app):
    if oracle is not None:
        return detection_validity(int(idx), oracle)[0]
    raise ValueError("appearance validity has no observable equation; clamp it or supply the oracle")


def _eq_box_valid(idx, oracle):
    return detection_validity(int(idx), oracle)[1]


def _eq_match_track(idx, det_apps, track_apps, oracle, tau_app):
    idx = int(idx)
    if oracle is not None:
        ident = oracle.detection_identities[idx]
        return ident is not None and ident in oracle.live_track_identities
    app = det_apps[idx]
    return any(cosine(app, t) >= tau_app for t in track_apps)


def _occluded_track(occ, oor, ma, mb):
    return bool(occ and not oor and not (ma or mb))


def _occluded_track_app(occ, oor, ma):
    return bool(occ and not oor and not ma)


def _oor_track(oor, ma, mb):
    return bool(oor and not (ma or mb))


def _oor_track_app(oor, ma):
    return bool(oor and not ma)


def _fp_track(occ, oor, ma, mb):
    return bool(not occ and not oor and not (ma or mb))


def _fp_track_app(occ, oor, ma):
    return bool(not occ and not oor and not ma)


def _newborn(av, bv, mt):
    return bool((av or bv) and not mt)


def _fp_det(av, bv):
    return bool(not av and not bv)


def _identity(x):
    return bool(x)


def _track_nodes(with_occlusion: bool) -> list[Node]:
    nodes = [
        Node(FORECAST, Tag.POSE_LIST),
        Node(BOX_PREV, Tag.BOX),
        Node(EGO, Tag.POSE2D),
        Node(DET_BOXES, Tag.BOX_LIST),
        Node(TRACK_APP, Tag.FEATURE),
        Node(DET_APPS, Tag.FEATURE_LIST),
        Node(ORACLE, Tag.ORACLE),
        Node(R_MAX, Tag.SCALAR),
        Node(TAU_IOU, Tag.SCALAR),
        Node(TAU_APP, Tag.SCALAR),
        Node(PRED_BOX, Tag.BOX, (FORECAST, BOX_PREV, EGO), _eq_pred),
        Node(OUT_OF_RANGE, Tag.BOOL, (PRED_BOX, R_MAX), is_out_of_range),
        Node(MATCH_APP, Tag.BOOL, (TRACK_APP, DET_APPS, ORACLE, TAU_APP), _eq_match_app_any),
        Node(MATCH_BOX, Tag.BOOL, (PRED_BOX, DET_BOXES, ORACLE, TAU_IOU), _eq_match_box_any),
    ]
    if with_occlusion:
        nodes += [Node(GRID, Tag.GRID), Node(OCCLUDED, Tag.BOOL, (PRED_BOX, GRID), is_occluded)]
    return nodes


@lru_cache(maxsize=None)
def build_scm(kind: DecisionKind, matches_any: str = "or") -> CausalGraph:
    """Causal graph for one decision kind.

    ``matches_any`` selects how "matches any detection" is formed for the
    track-only decisions: ``"or"`` (appearance or bbox) or ``"appearance"``.
    """
    if matches_any not in MATCHES_ANY_MODES:
        raise ValueError(f"matches_any must be one of {MATCHES_ANY_MODES}")
    kind = DecisionKind(kind)
    out = OUTPUT_NAMES[kind]
    app_only = matches_any == "appearance"
    if kind is DecisionKind.OCCLUDED_TRACK:
        nodes = _track_nodes(True)
        if app_only:
            nodes.append(Node(out, Tag.BOOL, (OCCLUDED, OUT_OF_RANGE, MATCH_APP), _occluded_track_app))
        else:
            nodes.append(Node(out, Tag.BOOL, (OCCLUDED, OUT_OF_RANGE, MATCH_APP, MATCH_BOX), _occluded_track))
    elif kind is DecisionKind.FALSE_POSITIVE_TRACK:
        nodes = _track_nodes(True)
        if app_only:
            nodes.append(Node(out, Tag.BOOL, (OCCLUDED, OUT_OF_RANGE, MATCH_APP), _fp_track_app))
        else:
            nodes.append(Node(out, Tag.BOOL, (OCCLUDED, OUT_OF_RANGE, MATCH_APP, MATCH_BOX), _fp_track))
    elif kind is DecisionKind.OUT_OF_RANGE_TRACK:
        nodes = _track_nodes(False)
        if app_only:
            nodes.append(Node(out, Tag.BOOL, (OUT_OF_RANGE, MATCH_APP), _oor_track_app))
        else:
            nodes.append(Node(out, Tag.BOOL, (OUT_OF_RANGE, MATCH_APP, MATCH_BOX), _oor_track))
    elif kind in (DecisionKind.NEWBORN_TRACK, DecisionKind.FALSE_POSITIVE_DETECTION):
        nodes = [
            Node(DET_INDEX, Tag.SCALAR),
            Node(DET_APPS, Tag.FEATURE_LIST),
            Node(TRACK_APPS, Tag.FEATURE_LIST),
            Node(ORACLE, Tag.ORACLE),
            Node(TAU_APP, Tag.SCALAR),
            Node(APP_VALID, Tag.BOOL, (DET_INDEX, DET_APPS, TRACK_APPS, ORACLE, TAU_APP), _eq_app_valid),
            Node(BOX_VALID, Tag.BOOL, (DET_INDEX, ORACLE), _eq_box_valid),
        ]
        if kind is DecisionKind.NEWBORN_TRACK:
            nodes += [
                Node(MATCH_TRACK, Tag.BOOL, (DET_INDEX, DET_APPS, TRACK_APPS, ORACLE, TAU_APP), _eq_match_track),
                Node(out, Tag.BOOL, (APP_VALID, BOX_VALID, MATCH_TRACK), _newborn),
            ]
        else:
            nodes.append(Node(out, Tag.BOOL, (APP_VALID, BOX_VALID), _fp_det))
    elif kind is DecisionKind.APPEARANCE_MATCH:
        nodes = [
            Node(DET_INDEX, Tag.SCALAR),
            Node(TRACK_APP, Tag.FEATURE),
            Node(DET_APPS, Tag.FEATURE_LIST),
            Node(ORACLE, Tag.ORACLE),
            Node(TAU_APP, Tag.SCALAR),
            Node(MATCH_APP, Tag.BOOL, (DET_INDEX, TRACK_APP, DET_APPS, ORACLE, TAU_APP), _eq_match_app_pair),
            Node(out, Tag.BOOL, (MATCH_APP,), _identity),
        ]
    else:  # BBOX_MATCH
        nodes = [
            Node(DET_INDEX, Tag.SCALAR),
            Node(FORECAST, Tag.POSE_LIST),
            Node(BOX_PREV, Tag.BOX),
            Node(EGO, Tag.POSE2D),
            Node(DET_BOXES, Tag.BOX_LIST),
            Node(ORACLE, Tag.ORACLE),
            Node(TAU_IOU, Tag.SCALAR),
            Node(PRED_BOX, Tag.BOX, (FORECAST, BOX_PREV, EGO), _eq_pred),
            Node(MATCH_BOX, Tag.BOOL, (DET_INDEX, PRED_BOX, DET_BOXES, ORACLE, TAU_IOU), _eq_match_box_pair),
            Node(out, Tag.BOOL, (MATCH_BOX,), _identity),
        ]
    return CausalGraph(nodes, out)


def _field_values(inputs: ScmInputs) -> dict[str, Any]:
    return {
        FORECAST: tuple(inputs.forecast),
        BOX_PREV: inputs.box_prev,
        EGO: inputs.ego.pose,
        GRID: inputs.grid,
        DET_BOXES: tuple(inputs.detection_boxes),
        TRACK_APP: inputs.track_appearance,
        DET_APPS: tuple(inputs.detection_appearances),
        TRACK_APPS: tuple(inputs.track_appearances),
        ORACLE: inputs.oracle,
        DET_INDEX: inputs.detection_index,
        R_MAX: float(inputs.r_max),
        TAU_IOU: float(inputs.tau_iou),
        TAU_APP: float(inputs.tau_app),
    }


def assignment(kind: DecisionKind, inputs: ScmInputs, matches_any: str = "or") -> dict[str, Any]:
    """Input-node assignment of ``kind``'s graph drawn from ``inputs``."""
    graph = build_scm(kind, matches_any)
    values = _field_values(inputs)
    out = {}
    for name in graph.inputs:
        v = values[name]
        if v is None and name != ORACLE:
            raise ValueError(f"{kind.value} needs {name!r}, which these inputs do not provide")
        out[name] = v
    return out


def evaluate(kind: DecisionKind, inputs: ScmInputs, do: dict | None = None,
             matches_any: str = "or") -> dict[str, Any]:
    return forward(build_scm(kind, matches_any), assignment(kind, inputs, matches_any), do or {})


def decide(kind: DecisionKind, inputs: ScmInputs, matches_any: str = "or") -> bool:
    graph = build_scm(kind, matches_any)
    return bool(forward(graph, assignment(kind, inputs, matches_any))[graph.output])


def boolean_intermediates(kind: DecisionKind, matches_any: str = "or") -> list[str]:
    """Boolean parents of the output node, in declared order."""
    graph = build_scm(kind, matches_any)
    return list(graph.parents(graph.output))


def output_equation(kind: DecisionKind, matches_any: str = "or"):
    """``(parent names, equation)`` of ``kind``'s decision node."""
    graph = build_scm(kind, matches_any)
    return graph.parents(graph.output), graph._nodes[graph.output].equation
