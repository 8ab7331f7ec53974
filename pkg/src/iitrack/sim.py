"""Synthetic BEV world, emulated detector and oracle decision labeler."""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels, scms
from .config import RunConfig, ScmConfig, SensorModel, WorldConfig
from .decisions import DET, TRACK, DecisionKind, DecisionLabel, TRACK_KINDS
from .frames import Detection, FrameRecord, ObjectState, sequence_name, write_sequence
from .geometry import EgoState, OcclusionGrid, OrientedBox, Pose2D, iou_bev, rotate, wrap_angle, world_to_ego

CAR_DIMS = (1.6, 4.5, 1.9)  # h, l, w
TRUCK_H, TRUCK_W = 3.2, 2.5
TRUCK_L = (8.0, 10.0)
VEL_NOISE_FACTOR = 2.0  # velocity noise sigma = factor * sigma_pos (m/s)
CLUTTER_SPEED = 15.0
# confidence falls off with the normalized perturbation magnitude
CONF_SCALE_POS, CONF_SCALE_DIM, CONF_SCALE_THETA = 0.5, 0.25, 0.1
CONF_MIN = 0.05


class InconsistentOracle(ValueError):
    pass


def unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def sample_dims(rng: np.random.Generator, truck_fraction: float) -> tuple[float, float, float]:
    if rng.random() < truck_fraction:
        return (TRUCK_H, float(rng.uniform(*TRUCK_L)), TRUCK_W)
    return CAR_DIMS


def spawn_objects(world: WorldConfig, ego: EgoState, rng: np.random.Generator) -> tuple[ObjectState, ...]:
    """Random lane traffic around the ego; boxes in the world frame."""
    n = int(rng.integers(world.min_objects, world.max_objects + 1))
    objects: list[ObjectState] = []
    placed: dict[int, list[float]] = {}
    for identity in range(n):
        for _ in range(50):
            lane = int(rng.integers(len(world.lanes)))
            x = float(rng.uniform(*world.spawn_x_range))
            taken = placed.get(lane, [])
            if abs(x) < world.min_gap and world.lanes[lane][0] == 0.0:
                continue  # keep the ego's own slot free
            if all(abs(x - other) >= world.min_gap for other in taken):
                break
        else:
            continue
        placed.setdefault(lane, []).append(x)
        offset, direction = world.lanes[lane]
        speed = float(rng.uniform(*world.speed_range))
        h, l, w = sample_dims(rng, world.truck_fraction)
        heading = 0.0 if direction > 0 else math.pi
        lx, ly = rotate(x, offset, ego.theta)
        vx, vy = rotate(direction * speed, 0.0, ego.theta)
        box = OrientedBox(ego.x + lx, ego.y + ly, 0.5 * h, h, l, w, vx, vy, wrap_angle(heading + ego.theta))
        emb = unit(rng.normal(size=world.appearance_dim))
        objects.append(ObjectState(identity, box, emb))
    return tuple(objects)


def step_world(
    objects: Sequence[ObjectState],
    ego: EgoState,
    dt: float,
    rng: np.random.Generator | None = None,
    heading_noise: float = 0.0,
) -> tuple[tuple[ObjectState, ...], EgoState]:
    """Constant-velocity step; optional heading jitter turns the velocity with it."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = []
    for o in objects:
        b = o.box
        x = b.x + b.vx * dt
        y = b.y + b.vy * dt
        vx, vy, th = b.vx, b.vy, b.theta
        if heading_noise > 0.0 and rng is not None:
            d = float(rng.normal(0.0, heading_noise))
            vx, vy = rotate(vx, vy, d)
            th = wrap_angle(th + d)
        out.append(ObjectState(o.identity, replace(b, x=x, y=y, vx=vx, vy=vy, theta=th), o.embedding))
    ego2 = EgoState(ego.x + ego.vx * dt, ego.y + ego.vy * dt, ego.theta, ego.vx, ego.vy)
    return tuple(out), ego2


def grid_origin(sensor: SensorModel) -> Pose2D:
    half = 0.5 * sensor.grid_cells * sensor.cell
    return Pose2D(-half, -half, 0.0)


def raycast_occlusion(ego: EgoState, objects: Sequence[ObjectState], sensor: SensorModel) -> OcclusionGrid:
    """Ego-frame occlusion raster cast from the ego position."""
    n = sensor.grid_cells
    origin = grid_origin(sensor)
    boxes = np.array([world_to_ego(o.box, ego).bev() for o in objects], dtype=np.float64).reshape(-1, 5)
    cells = kernels.raycast_grid(0.0, 0.0, boxes, origin.x, origin.y, origin.theta, sensor.cell, n, n)
    return OcclusionGrid(origin, sensor.cell, n, n, cells)


def confidence(d_pos: float, d_dim: float, d_theta: float) -> float:
    mag2 = (d_pos / CONF_SCALE_POS) ** 2 + (d_dim / CONF_SCALE_DIM) ** 2 + (d_theta / CONF_SCALE_THETA) ** 2
    return float(min(1.0, max(CONF_MIN, math.exp(-0.5 * mag2))))


def _noisy_box(gt: OrientedBox, sensor: SensorModel, rng: np.random.Generator) -> tuple[OrientedBox, float]:
    n = rng.normal(size=9)
    dx, dy = sensor.sigma_pos * n[0], sensor.sigma_pos * n[1]
    dh, dl, dw = sensor.sigma_dim * n[2], sensor.sigma_dim * n[3], sensor.sigma_dim * n[4]
    dvx = VEL_NOISE_FACTOR * sensor.sigma_pos * n[5]
    dvy = VEL_NOISE_FACTOR * sensor.sigma_pos * n[6]
    dth = sensor.sigma_theta * n[7]
    dz = sensor.sigma_dim * n[8]
    box = OrientedBox(gt.x + dx, gt.y + dy, gt.z + dz, max(0.1, gt.h + dh), max(0.1, gt.l + dl),
                      max(0.1, gt.w + dw), gt.vx + dvx, gt.vy + dvy, wrap_angle(gt.theta + dth))
    score = confidence(math.hypot(dx, dy), math.sqrt(dh * dh + dl * dl + dw * dw), abs(dth))
    return box, score


def _clutter(sensor: SensorModel, world: WorldConfig, rng: np.random.Generator) -> Detection:
    r = sensor.r_max * math.sqrt(float(rng.random()))
    phi = float(rng.uniform(-math.pi, math.pi))
    h, l, w = sample_dims(rng, world.truck_fraction)
    vx, vy = (float(v) for v in rng.uniform(-CLUTTER_SPEED, CLUTTER_SPEED, 2))
    theta = wrap_angle(float(rng.uniform(-math.pi, math.pi)))
    box = OrientedBox(r * math.cos(phi), r * math.sin(phi), 0.5 * h, h, l, w, vx, vy, theta)
    app = unit(rng.normal(size=world.appearance_dim))
    return Detection(box, float(rng.uniform(CONF_MIN, 0.5)), app)


def emulate_detector(
    objects: Sequence[ObjectState],
    ego: EgoState,
    grid: OcclusionGrid,
    sensor: SensorModel,
    world: WorldConfig,
    rng: np.random.Generator,
    tau_iou: float = scms.TAU_IOU_DEFAULT,
):
    """Detections (ego frame) plus the oracle association and validity flags.

    Real detections come first in identity order, clutter after.
    """
    dets: list[Detection] = []
    assoc: list[int | None] = []
    av: list[bool] = []
    bv: list[bool] = []
    for o in objects:
        gt = world_to_ego(o.box, ego)
        if math.hypot(gt.x, gt.y) > sensor.r_max or grid.occluded_at(gt.x, gt.y):
            continue
        if sensor.p_miss > 0.0 and rng.random() < sensor.p_miss:
            continue
        box, score = _noisy_box(gt, sensor, rng)
        app = o.embedding + sensor.sigma_app * rng.normal(size=o.embedding.shape)
        dets.append(Detection(box, score, unit(app)))
        assoc.append(o.identity)
        av.append(True)
        bv.append(iou_bev(box, gt) >= tau_iou)
    n_clutter = int(rng.poisson(sensor.clutter_rate)) if sensor.clutter_rate > 0 else 0
    for _ in range(n_clutter):
        dets.append(_clutter(sensor, world, rng))
        assoc.append(None)
        av.append(False)
        bv.append(False)
    return tuple(dets), tuple(assoc), tuple(av), tuple(bv)


# ------------------------------------------------------------ oracle inputs

def oracle_association(frame: FrameRecord, track_identity: int | None = None) -> scms.OracleAssociation:
    return scms.OracleAssociation(frame.association, frame.appearance_valid, frame.bbox_valid,
                                  track_identity, tuple(frame.live_tracks))


def oracle_track_inputs(frame: FrameRecord, prev: FrameRecord, identity: int, scm: ScmConfig,
                        detection_index: int | None = None) -> scms.ScmInputs:
    """Ground-truth knowledge sources for the track of ``identity`` at ``frame``."""
    before = prev.object(identity).box
    now = frame.object(identity).box
    step = Pose2D(now.x - before.x, now.y - before.y, wrap_angle(now.theta - before.theta))
    return scms.ScmInputs(
        detection_boxes=tuple(d.box for d in frame.detections),
        detection_appearances=tuple(d.appearance for d in frame.detections),
        ego=frame.ego,
        grid=frame.grid,
        forecast=(step,),
        box_prev=before,
        track_appearance=frame.object(identity).embedding,
        detection_index=detection_index,
        track_appearances=tuple(frame.object(i).embedding for i in frame.live_tracks),
        r_max=scm.r_max, tau_iou=scm.tau_iou, tau_app=scm.tau_app,
        oracle=oracle_association(frame, identity),
    )


def oracle_detection_inputs(frame: FrameRecord, index: int, scm: ScmConfig) -> scms.ScmInputs:
    return scms.ScmInputs(
        detection_boxes=tuple(d.box for d in frame.detections),
        detection_appearances=tuple(d.appearance for d in frame.detections),
        ego=frame.ego,
        grid=frame.grid,
        detection_index=index,
        track_appearances=tuple(frame.object(i).embedding for i in frame.live_tracks),
        r_max=scm.r_max, tau_iou=scm.tau_iou, tau_app=scm.tau_app,
        oracle=oracle_association(frame),
    )


def label_decisions(frame: FrameRecord, prev: FrameRecord | None, scm: ScmConfig) -> tuple[DecisionLabel, ...]:
    """Seven-way labels for the frame's live tracks (``frame.live_tracks``) and detections."""
    if len(set(frame.live_tracks)) != len(frame.live_tracks):
        raise InconsistentOracle("duplicate live track identity")
    if frame.live_tracks and prev is None:
        raise InconsistentOracle("live tracks need the previous frame")
    by_identity: dict[int, int] = {}
    for i, ident in enumerate(frame.association):
        if ident is None:
            continue
        if ident in by_identity:
            raise InconsistentOracle(f"identity {ident} matched by detections {by_identity[ident]} and {i}")
        by_identity[ident] = i
    mode = scm.matches_any
    labels: list[DecisionLabel] = []
    partner_of_det: dict[int, tuple[int, bool]] = {}
    for ident in frame.live_tracks:
        i = by_identity.get(ident)
        if i is not None and frame.appearance_valid[i]:
            inp = oracle_track_inputs(frame, prev, ident, scm, detection_index=i)
            if not scms.decide(DecisionKind.APPEARANCE_MATCH, inp, mode):
                raise InconsistentOracle(f"track {ident} and detection {i} share identity but do not match")
            admissible = scms.decide(DecisionKind.BBOX_MATCH, inp, mode)
            labels.append(DecisionLabel((TRACK, ident), DecisionKind.APPEARANCE_MATCH, i, admissible))
            partner_of_det[i] = (ident, admissible)
            continue
        inp = oracle_track_inputs(frame, prev, ident, scm)
        hits = [k for k in TRACK_KINDS if scms.decide(k, inp, mode)]
        if len(hits) != 1:
            raise InconsistentOracle(f"track {ident} admits {len(hits)} track-only decisions")
        labels.append(DecisionLabel((TRACK, ident), hits[0]))
    for i in range(len(frame.detections)):
        if i in partner_of_det:
            ident, admissible = partner_of_det[i]
            labels.append(DecisionLabel((DET, i), DecisionKind.APPEARANCE_MATCH, ident, admissible))
            continue
        inp = oracle_detection_inputs(frame, i, scm)
        if scms.decide(DecisionKind.NEWBORN_TRACK, inp, mode):
            labels.append(DecisionLabel((DET, i), DecisionKind.NEWBORN_TRACK))
        elif scms.decide(DecisionKind.FALSE_POSITIVE_DETECTION, inp, mode):
            labels.append(DecisionLabel((DET, i), DecisionKind.FALSE_POSITIVE_DETECTION))
        else:
            raise InconsistentOracle(f"detection {i} admits no detection decision")
    return tuple(labels)


def advance_live(live: dict[int, int], frame: FrameRecord, labels: Sequence[DecisionLabel],
                 persistence: int) -> dict[int, int]:
    """Track lifecycle: identity -> consecutive occluded frames so far.

    Matches keep a track, occlusion keeps it for up to ``persistence``
    consecutive frames (retired on the next one), out-of-range and
    false-positive tracks are retired, newborn detections open a track.
    """
    out: dict[int, int] = {}
    for lab in labels:
        side, ident = lab.subject
        if side == TRACK:
            if lab.kind.is_pair:
                out[ident] = 0
            elif lab.kind is DecisionKind.OCCLUDED_TRACK:
                streak = live.get(ident, 0) + 1
                if streak <= persistence:
                    out[ident] = streak
        elif lab.kind is DecisionKind.NEWBORN_TRACK:
            born = frame.association[ident]
            if born is not None:
                out[born] = 0
    return dict(sorted(out.items()))


# ------------------------------------------------------------ sequences

def sequence_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def simulate_sequence(
    cfg: RunConfig,
    index: int,
    seed: int | None = None,
    objects: Sequence[ObjectState] | None = None,
    ego: EgoState | None = None,
) -> list[FrameRecord]:
    """One labeled sequence. ``objects``/``ego`` override the random spawn."""
    world, sensor, scm = cfg.world, cfg.sensor, cfg.scm
    rng = sequence_rng(cfg.seed if seed is None else seed, index)
    ego = ego or EgoState(0.0, 0.0, 0.0, world.ego_speed, 0.0)
    objs = tuple(objects) if objects is not None else spawn_objects(world, ego, rng)
    frames: list[FrameRecord] = []
    live: dict[int, int] = {}
    prev: FrameRecord | None = None
    for t in range(world.n_frames):
        if t > 0:
            objs, ego = step_world(objs, ego, world.dt, rng, world.heading_noise)
        grid = raycast_occlusion(ego, objs, sensor)
        dets, assoc, av, bv = emulate_detector(objs, ego, grid, sensor, world, rng, scm.tau_iou)
        frame = FrameRecord(t, ego, objs, dets, grid, assoc, av, bv, tuple(live))
        labels = label_decisions(frame, prev, scm)
        frame = replace(frame, labels=labels)
        frames.append(frame)
        live = advance_live(live, frame, labels, world.occlusion_persistence)
        prev = frame
    return frames


def truck_and_car_objects(world: WorldConfig, ego: EgoState) -> tuple[ObjectState, ...]:
    """A truck and a car driving side by side behind the ego, plus a car that
    crosses the region the truck hides."""
    rng = np.random.default_rng(0)
    speed = ego.vx
    truck = OrientedBox(ego.x - 12.0, ego.y - 3.5, 1.6, TRUCK_H, 9.0, TRUCK_W, speed, 0.0, 0.0)
    car = OrientedBox(ego.x - 12.0, ego.y + 0.0, 0.8, CAR_DIMS[0], CAR_DIMS[1], CAR_DIMS[2], speed, 0.0, 0.0)
    # cuts across the shadow wedge diagonally, hidden for a few frames
    passer = OrientedBox(ego.x - 25.0, ego.y - 22.0, 0.8, CAR_DIMS[0], CAR_DIMS[1], CAR_DIMS[2],
                         speed, 18.0, math.atan2(18.0, speed))
    return tuple(ObjectState(i, b, unit(rng.normal(size=world.appearance_dim)))
                 for i, b in enumerate((truck, car, passer)))


def truck_and_car_sequence(cfg: RunConfig, seed: int = 0) -> list[FrameRecord]:
    ego = EgoState(0.0, 0.0, 0.0, cfg.world.ego_speed, 0.0)
    return simulate_sequence(cfg, 0, seed, truck_and_car_objects(cfg.world, ego), ego)


def _simulate_to_file(args) -> tuple[str, int, dict]:
    cfg_dict, index, seed, directory = args
    from .config import from_dict

    cfg = from_dict(cfg_dict)
    frames = simulate_sequence(cfg, index, seed)
    name = sequence_name(index)
    write_sequence(Path(directory) / name, frames)
    counts = {"frames": len(frames), "detections": sum(len(f.detections) for f in frames),
              "clutter": sum(a is None for f in frames for a in f.association),
              "labels": sum(len(f.labels) for f in frames)}
    return name, index, counts


def generate_dataset(cfg: RunConfig, directory: str | Path, seed: int | None = None,
                     threads: int = 1, force: bool = False) -> dict:
    """Write ``cfg.world.n_sequences`` sequence files plus ``manifest.json``."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not force:
        raise FileExistsError(f"{directory} is not empty (use force to overwrite)")
    directory.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else int(seed)
    cfg_dict = cfg.to_dict()
    jobs = [(cfg_dict, i, seed, str(directory)) for i in range(cfg.world.n_sequences)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_simulate_to_file, jobs))
    else:
        results = [_simulate_to_file(j) for j in jobs]
    results.sort(key=lambda r: r[1])
    totals = {k: sum(r[2][k] for r in results) for k in ("frames", "detections", "clutter", "labels")}
    manifest = {
        "config_hash": cfg.digest(),
        "seed": seed,
        "n_sequences": len(results),
        "counts": totals,
        "sequences": [r[0] for r in results],
        "config": cfg_dict,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest
