"""Turn labeled frames into network inputs.

Tracks follow the oracle lifecycle recorded in each frame (``live_tracks``)
while their boxes, appearances and forecasts come from the network itself:
a track remembers the last detection it was matched with, and its predicted
box at time T is read off the forecast made at that match.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import scms
from .config import ScmConfig
from .decisions import DET, TRACK, DecisionKind, DecisionLabel
from .frames import FrameRecord
from .geometry import EgoState, OcclusionGrid, OrientedBox, ego_to_world, world_to_ego, wrap_angle
from .net import GraphInput, ParamStore, TrackerNet, frame_graph
from .sim import oracle_detection_inputs, oracle_track_inputs


@dataclass
class TrackMemory:
    """What the network knows about one live track (world frame)."""

    box: OrientedBox
    score: float
    appearance: np.ndarray
    hidden: np.ndarray
    cell: np.ndarray
    forecast: np.ndarray  # h x 3 cumulative poses
    t_last: int


def predicted_world_pose(mem: TrackMemory, t: int) -> tuple[float, float, float]:
    """Forecast pose ``t - t_last`` steps after the last match; beyond the
    horizon the last forecast increment is repeated."""
    steps = t - mem.t_last
    if steps <= 0:
        return mem.box.x, mem.box.y, mem.box.theta
    fc = mem.forecast
    h = len(fc)
    if steps <= h:
        x, y, th = fc[steps - 1]
    else:
        prev = fc[-2] if h > 1 else np.array([mem.box.x, mem.box.y, mem.box.theta])
        inc = fc[-1] - prev
        x, y, th = fc[-1] + (steps - h) * inc
    return float(x), float(y), wrap_angle(float(th))


def predicted_box(mem: TrackMemory, t: int, ego: EgoState) -> OrientedBox:
    x, y, th = predicted_world_pose(mem, t)
    return world_to_ego(replace(mem.box, x=x, y=y, theta=th), ego)


def track_aux(box: OrientedBox, grid: OcclusionGrid, r_max: float) -> np.ndarray:
    """[occluded bit at the predicted centre, normalized range excess]."""
    occ = 1.0 if grid.occluded_at(box.x, box.y) else 0.0
    return np.array([occ, math.hypot(box.x, box.y) / r_max - 1.0])


def build_graph(frame: FrameRecord, boxes: Sequence[OrientedBox], memories: Sequence[TrackMemory],
                net: TrackerNet) -> GraphInput:
    a = net.cfg.appearance_dim
    aux = [track_aux(b, frame.grid, net.r_max) for b in boxes]
    return frame_graph(
        [d.box for d in frame.detections], [d.score for d in frame.detections],
        np.array([d.appearance for d in frame.detections]).reshape(-1, a),
        list(boxes), [m.score for m in memories], np.array([m.appearance for m in memories]).reshape(-1, a),
        np.array(aux).reshape(-1, 2), a, net.r_max)


@dataclass
class ForecastEvent:
    """One recurrent update with its ground-truth future (for the forecast loss)."""

    hidden: np.ndarray
    cell: np.ndarray
    det_x: np.ndarray
    start: np.ndarray   # world (x, y, theta) of the matched detection
    velocity: np.ndarray
    target: np.ndarray  # h x 2 ground-truth world positions
    mask: np.ndarray    # h, which future steps exist


@dataclass
class PreparedFrame:
    seq: int
    t: int
    graph: GraphInput
    track_ids: tuple[int, ...]
    labels: tuple[DecisionLabel, ...]
    pred_boxes: tuple[OrientedBox, ...]
    events: list = field(default_factory=list)


def _update(net: TrackerNet, params: ParamStore, items: list, t: int, frame: FrameRecord,
            det_feats: np.ndarray, memories: dict, det_x: np.ndarray):
    """Batched LSTM step for ``items`` = [(identity, det index)]; returns events."""
    if not items:
        return []
    L = net.cfg.lstm_dim
    h0 = np.array([memories[i].hidden if i in memories else np.zeros(L) for i, _ in items])
    c0 = np.array([memories[i].cell if i in memories else np.zeros(L) for i, _ in items])
    x = det_feats[[d for _, d in items]]
    h, c = net.lstm_step(params, x, h0, c0)
    off = net.forecast_offsets(params, h).data
    boxes = [ego_to_world(frame.detections[d].box, frame.ego) for _, d in items]
    vel = np.array([[b.vx, b.vy] for b in boxes])
    start = np.array([[b.x, b.y, b.theta] for b in boxes])
    fc = start[:, None, :] + np.cumsum(off + net.prior_offsets(vel), axis=1)
    events = []
    for n, (ident, d) in enumerate(items):
        det = frame.detections[d]
        events.append((ident, h0[n], c0[n], det_x[d], start[n], vel[n]))
        memories[ident] = TrackMemory(boxes[n], float(det.score), np.asarray(det.appearance), h.data[n],
                                      c.data[n], fc[n], t)
    return events


def teacher_forced_sequence(net: TrackerNet, params: ParamStore, frames: Sequence[FrameRecord],
                            seq: int = 0) -> list[PreparedFrame]:
    """Network inputs for every frame under the recorded (oracle) lifecycle."""
    memories: dict[int, TrackMemory] = {}
    out: list[PreparedFrame] = []
    h = net.cfg.horizon
    for t, frame in enumerate(frames):
        memories = {i: memories[i] for i in frame.live_tracks}
        mems = [memories[i] for i in frame.live_tracks]
        boxes = tuple(predicted_box(m, t, frame.ego) for m in mems)
        graph = build_graph(frame, boxes, mems, net)
        prepared = PreparedFrame(seq, t, graph, tuple(frame.live_tracks), frame.labels, boxes)
        det_x = graph.det_x
        items = []
        for lab in frame.labels:
            if lab.subject[0] != DET:
                continue
            if lab.kind.is_pair:
                items.append((lab.partner, lab.subject[1]))
            elif lab.kind is DecisionKind.NEWBORN_TRACK:
                items.append((frame.association[lab.subject[1]], lab.subject[1]))
        if items:
            feats = net.encode_detection(params, det_x).data
            for ident, h0, c0, x, start, vel in _update(net, params, items, t, frame, feats, memories, det_x):
                target = np.zeros((h, 2))
                mask = np.zeros(h, dtype=bool)
                for k in range(h):
                    if t + k + 1 < len(frames):
                        o = frames[t + k + 1].object(ident).box
                        target[k] = (o.x, o.y)
                        mask[k] = True
                prepared.events.append(ForecastEvent(h0, c0, x, start, vel, target, mask))
        out.append(prepared)
    return out


def teacher_forced(net: TrackerNet, params: ParamStore, dataset: Sequence[Sequence[FrameRecord]],
                   seq_ids: Sequence[int] | None = None) -> list[list[PreparedFrame]]:
    ids = range(len(dataset)) if seq_ids is None else seq_ids
    return [teacher_forced_sequence(net, params, dataset[s], s) for s in ids]


# --------------------------------------------------------------- oracle values

@dataclass
class OracleFrame:
    """Ground-truth SCM node values for every subject of one frame.

    Track arrays are indexed by track column (``live_tracks`` order), pair
    arrays by ``det * K + track``.
    """

    occluded: np.ndarray
    out_of_range: np.ndarray
    track_ma: np.ndarray
    track_mb: np.ndarray
    pred_xy: np.ndarray  # K x 2, ego frame, divided by r_max
    app_valid: np.ndarray
    box_valid: np.ndarray
    matches_track: np.ndarray
    pair_ma: np.ndarray
    pair_mb: np.ndarray


def oracle_frame(frame: FrameRecord, prev: FrameRecord | None, scm: ScmConfig) -> OracleFrame:
    d, k = len(frame.detections), len(frame.live_tracks)
    mode = scm.matches_any
    occ, oor, ma, mb = (np.zeros(k, bool) for _ in range(4))
    pred = np.zeros((k, 2))
    pair_ma, pair_mb = np.zeros(d * k, bool), np.zeros(d * k, bool)
    dets = tuple(x.box for x in frame.detections)
    for j, ident in enumerate(frame.live_tracks):
        inp = oracle_track_inputs(frame, prev, ident, scm)
        v = scms.evaluate(DecisionKind.OCCLUDED_TRACK, inp, matches_any=mode)
        occ[j], oor[j] = v[scms.OCCLUDED], v[scms.OUT_OF_RANGE]
        ma[j], mb[j] = v[scms.MATCH_APP], v[scms.MATCH_BOX]
        box = v[scms.PRED_BOX]
        pred[j] = (box.x / scm.r_max, box.y / scm.r_max)
        hit_app = scms.matches_appearance(inp.track_appearance, inp.detection_appearances, inp.oracle, scm.tau_app)
        for i in range(d):
            pair_ma[i * k + j] = hit_app == i
            pair_mb[i * k + j] = scms.matches_bbox(box, dets, scm.tau_iou, [i] if frame.association[i] == ident
                                                   else []) == i
    av, bv, mt = (np.zeros(d, bool) for _ in range(3))
    for i in range(d):
        v = scms.evaluate(DecisionKind.NEWBORN_TRACK, oracle_detection_inputs(frame, i, scm), matches_any=mode)
        av[i], bv[i], mt[i] = v[scms.APP_VALID], v[scms.BOX_VALID], v[scms.MATCH_TRACK]
    return OracleFrame(occ, oor, ma, mb, pred, av, bv, mt, pair_ma, pair_mb)


def oracle_values(dataset: Sequence[Sequence[FrameRecord]], scm: ScmConfig,
                  seq_ids: Sequence[int] | None = None) -> dict[tuple[int, int], OracleFrame]:
    ids = range(len(dataset)) if seq_ids is None else seq_ids
    out = {}
    for s in ids:
        prev = None
        for t, fr in enumerate(dataset[s]):
            out[(s, t)] = oracle_frame(fr, prev, scm)
            prev = fr
    return out


def subject_label(frame_labels: Sequence[DecisionLabel], side: str, sid: int) -> DecisionLabel:
    for lab in frame_labels:
        if lab.subject == (side, sid):
            return lab
    raise KeyError((side, sid))


__all__ = ["TrackMemory", "PreparedFrame", "ForecastEvent", "OracleFrame", "teacher_forced",
           "teacher_forced_sequence", "oracle_values", "oracle_frame", "predicted_box", "track_aux",
           "build_graph", "subject_label", "TRACK", "DET"]
