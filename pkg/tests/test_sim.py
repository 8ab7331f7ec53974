import math
from dataclasses import replace

import numpy as np
import pytest

from iitrack import scms, sim
from iitrack.config import RunConfig, WorldConfig
from iitrack.decisions import DET, TRACK, DecisionKind as K, TRACK_KINDS
from iitrack.frames import FrameRecord, ObjectState
from iitrack.geometry import EgoState, OrientedBox, Pose2D, box_corners, world_to_ego

from conftest import noiseless_sensor


def obj(i, x, y, vx=0.0, vy=0.0, l=4.5, w=1.9, theta=0.0, dim=8):
    emb = np.zeros(dim)
    emb[i % dim] = 1.0
    return ObjectState(i, OrientedBox(x, y, 0.8, 1.6, l, w, vx, vy, theta), emb)


EGO0 = EgoState(0.0, 0.0, 0.0, 0.0, 0.0)


def test_step_world_trivial():
    (o,), _ = sim.step_world([obj(0, 0.0, 0.0, vx=1.0)], EGO0, 1.0)
    assert (o.box.x, o.box.y) == (1.0, 0.0)
    (o,), _ = sim.step_world([obj(0, 3.0, -2.0)], EGO0, 7.5)
    assert (o.box.x, o.box.y, o.box.theta) == (3.0, -2.0, 0.0)
    with pytest.raises(ValueError):
        sim.step_world([], EGO0, 0.0)


def test_step_world_linear_motion():
    objs = [obj(0, 1.0, 2.0, vx=3.3, vy=-1.7)]
    ego = EgoState(0.0, 0.0, 0.0, 9.0, 0.0)
    a, ea = objs, ego
    for _ in range(100):
        a, ea = sim.step_world(a, ea, 0.1)
    b, eb = sim.step_world(objs, ego, 10.0)
    assert abs(a[0].box.x - b[0].box.x) < 1e-9 and abs(a[0].box.y - b[0].box.y) < 1e-9
    assert abs(ea.x - eb.x) < 1e-9


def test_step_world_heading_noise_keeps_speed(rng):
    objs = [obj(0, 0.0, 0.0, vx=10.0)]
    for _ in range(20):
        objs, _ = sim.step_world(objs, EGO0, 0.2, rng, 0.05)
    b = objs[0].box
    assert math.hypot(b.vx, b.vy) == pytest.approx(10.0)
    assert math.atan2(b.vy, b.vx) == pytest.approx(b.theta)


# ---- occlusion raycast

def _seg_hits_rect(p, q, corners):
    def inside(pt):
        # point in convex polygon (counter-clockwise corners)
        for k in range(4):
            a, b = corners[k], corners[(k + 1) % 4]
            if (b[0] - a[0]) * (pt[1] - a[1]) - (b[1] - a[1]) * (pt[0] - a[0]) < 0:
                return False
        return True

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def seg_x(a, b, c, d):
        d1, d2 = cross(c, d, a), cross(c, d, b)
        d3, d4 = cross(a, b, c), cross(a, b, d)
        return (d1 * d2 <= 0) and (d3 * d4 <= 0)

    if inside(p) or inside(q):
        return True
    return any(seg_x(p, q, corners[k], corners[(k + 1) % 4]) for k in range(4))


def raycast_oracle(objs, sensor):
    n = sensor.grid_cells
    half = 0.5 * n * sensor.cell
    out = np.zeros((n, n), dtype=bool)
    polys = [box_corners(world_to_ego(o.box, EGO0))[[3, 0, 1, 2]] for o in objs]
    for r in range(n):
        for c in range(n):
            cc = (-half + (c + 0.5) * sensor.cell, -half + (r + 0.5) * sensor.cell)
            for poly in polys:
                if _point_in(cc, poly):
                    continue
                if _seg_hits_rect((0.0, 0.0), cc, poly):
                    out[r, c] = True
                    break
    return out


def _point_in(pt, poly):
    for k in range(4):
        a, b = poly[k], poly[(k + 1) % 4]
        if (b[0] - a[0]) * (pt[1] - a[1]) - (b[1] - a[1]) * (pt[0] - a[0]) < 0:
            return False
    return True


def test_raycast_empty_scene():
    g = sim.raycast_occlusion(EGO0, [], noiseless_sensor())
    assert not g.cells.any()
    assert g.width == g.height == 100


def test_raycast_shadow_behind_box():
    sensor = noiseless_sensor()
    g = sim.raycast_occlusion(EGO0, [obj(0, 10.0, 0.0, l=2.0, w=2.0)], sensor)
    assert g.occluded_at(20.5, 0.2) and g.occluded_at(40.0, 0.0)
    assert not g.occluded_at(10.0, 4.0) and not g.occluded_at(10.0, -4.0)
    assert not g.occluded_at(5.0, 0.0)  # in front of the box
    assert not g.occluded_at(10.2, 0.3)  # inside the casting box itself
    # wedge: widens with distance
    assert g.occluded_at(45.0, 3.5) and not g.occluded_at(15.0, 3.5)


def test_raycast_matches_independent_oracle():
    sensor = replace(noiseless_sensor(), grid_extent=40.0)
    rng = np.random.default_rng(8)
    for _ in range(3):
        objs = [obj(i, *rng.uniform(-15, 15, 2), l=rng.uniform(2, 8), w=rng.uniform(1, 3),
                    theta=rng.uniform(-3, 3)) for i in range(3)]
        got = sim.raycast_occlusion(EGO0, objs, sensor).cells
        want = raycast_oracle(objs, sensor)
        assert np.mean(got != want) == 0.0


def test_raycast_uses_ego_frame():
    sensor = noiseless_sensor()
    ego = EgoState(100.0, 50.0, math.pi / 2)
    # object 10 m ahead of an ego heading north sits at world (100, 60)
    g = sim.raycast_occlusion(ego, [obj(0, 100.0, 60.0, l=2.0, w=2.0)], sensor)
    assert g.occluded_at(25.0, 0.0) and not g.occluded_at(0.0, 25.0)


# ---- detector

def test_noiseless_detector_reproduces_ground_truth(rng):
    sensor = noiseless_sensor()
    world = WorldConfig()
    objs = [obj(0, 10.0, 0.0), obj(1, -20.0, 3.5), obj(2, 5.0, -7.0)]
    ego = EgoState(1.0, 0.0, 0.0)
    grid = sim.raycast_occlusion(ego, objs, sensor)
    dets, assoc, av, bv = sim.emulate_detector(objs, ego, grid, sensor, world, rng)
    assert assoc == (0, 1, 2) and all(av) and all(bv)
    for d, o in zip(dets, objs):
        assert d.box == world_to_ego(o.box, ego)
        assert d.score == 1.0
        assert np.allclose(d.appearance, o.embedding)


def test_object_behind_truck_absent(rng):
    sensor = noiseless_sensor()
    truck = obj(0, 10.0, 0.0, l=9.0, w=2.5)
    car = obj(1, 25.0, 0.0)
    grid = sim.raycast_occlusion(EGO0, [truck, car], sensor)
    dets, assoc, _, _ = sim.emulate_detector([truck, car], EGO0, grid, sensor, WorldConfig(), rng)
    assert assoc == (0,)


def test_out_of_range_dropped(rng):
    sensor = noiseless_sensor()
    objs = [obj(0, 50.5, 0.0), obj(1, 30.0, 40.0)]
    grid = sim.raycast_occlusion(EGO0, objs, sensor)
    _, assoc, _, _ = sim.emulate_detector(objs, EGO0, grid, sensor, WorldConfig(), rng)
    assert assoc == (1,)


def test_clutter_poisson_mean(rng):
    sensor = noiseless_sensor(clutter_rate=2.0)
    grid = sim.raycast_occlusion(EGO0, [], sensor)
    counts = [len(sim.emulate_detector([], EGO0, grid, sensor, WorldConfig(), rng)[0]) for _ in range(10000)]
    assert abs(np.mean(counts) - 2.0) < 3 * math.sqrt(2.0 / 10000)


def test_clutter_properties(rng):
    sensor = noiseless_sensor(clutter_rate=5.0)
    grid = sim.raycast_occlusion(EGO0, [], sensor)
    dets, assoc, av, bv = sim.emulate_detector([], EGO0, grid, sensor, WorldConfig(), rng)
    for d in dets:
        assert math.hypot(d.box.x, d.box.y) <= sensor.r_max
        assert np.linalg.norm(d.appearance) == pytest.approx(1.0)
        assert 0.05 <= d.score <= 0.5
    assert all(a is None for a in assoc) and not any(av) and not any(bv)


def test_perturbed_box_below_iou_is_bbox_invalid():
    sensor = noiseless_sensor(sigma_pos=3.0)
    rng = np.random.default_rng(0)
    objs = [obj(0, 10.0, 0.0)]
    grid = sim.raycast_occlusion(EGO0, objs, sensor)
    seen = set()
    for _ in range(50):
        dets, _, av, bv = sim.emulate_detector(objs, EGO0, grid, sensor, WorldConfig(), rng)
        from iitrack.geometry import iou_bev
        assert bv[0] == (iou_bev(dets[0].box, objs[0].box) >= 0.3) and av[0]
        seen.add(bv[0])
    assert seen == {True, False}


def test_confidence_monotone():
    assert sim.confidence(0, 0, 0) == 1.0
    assert sim.confidence(0.1, 0, 0) > sim.confidence(0.3, 0, 0) > sim.confidence(0.6, 0, 0)
    assert sim.confidence(100, 0, 0) == 0.05


# ---- labels

def test_noiseless_all_detected_only_matches():
    cfg = RunConfig(world=WorldConfig(n_frames=6), sensor=noiseless_sensor())
    objs = [obj(0, 20.0, 3.5, vx=9.0), obj(1, -15.0, -3.5, vx=9.0)]
    frames = sim.simulate_sequence(cfg, 0, 0, objs, EgoState(0.0, 0.0, 0.0, 9.0, 0.0))
    assert [lab.kind for lab in frames[0].labels] == [K.NEWBORN_TRACK] * 2
    for f in frames[1:]:
        assert f.labels and all(lab.kind is K.APPEARANCE_MATCH and lab.bbox_admissible for lab in f.labels)


def test_leaving_range_yields_out_of_range():
    cfg = RunConfig(world=WorldConfig(n_frames=10), sensor=noiseless_sensor())
    objs = [obj(0, 45.0, 0.0, vx=14.0)]  # pulls away from the ego at 5 m/s
    frames = sim.simulate_sequence(cfg, 0, 0, objs, EgoState(0.0, 0.0, 0.0, 9.0, 0.0))
    kinds = [f.labels[0].kind if f.labels else None for f in frames]
    first = kinds.index(K.OUT_OF_RANGE_TRACK)
    assert all(k is K.APPEARANCE_MATCH for k in kinds[1:first])
    assert all(k is None for k in kinds[first + 1:])


def _partition_ok(f):
    tracks = [lab for lab in f.labels if lab.subject[0] == TRACK]
    dets = [lab for lab in f.labels if lab.subject[0] == DET]
    assert sorted(lab.subject[1] for lab in tracks) == sorted(f.live_tracks)
    assert sorted(lab.subject[1] for lab in dets) == list(range(len(f.detections)))
    fp = {lab.subject[1] for lab in dets if lab.kind is K.FALSE_POSITIVE_DETECTION}
    assert not fp & {lab.partner for lab in tracks if lab.partner is not None}


def test_labels_agree_with_decide_on_random_frames():
    cfg = RunConfig(world=WorldConfig(n_frames=10), seed=5)
    checked = 0
    for s in range(10):
        frames = sim.simulate_sequence(cfg, s)
        for prev, f in zip([None] + frames[:-1], frames):
            _partition_ok(f)
            for lab in f.labels:
                side, sid = lab.subject
                if side == TRACK:
                    if lab.kind.is_pair:
                        inp = sim.oracle_track_inputs(f, prev, sid, cfg.scm, lab.partner)
                        assert scms.decide(K.APPEARANCE_MATCH, inp)
                        assert scms.decide(K.BBOX_MATCH, inp) == lab.bbox_admissible
                    else:
                        inp = sim.oracle_track_inputs(f, prev, sid, cfg.scm)
                        for k in TRACK_KINDS:
                            assert scms.decide(k, inp) == (k is lab.kind)
                elif not lab.kind.is_pair:
                    inp = sim.oracle_detection_inputs(f, sid, cfg.scm)
                    assert scms.decide(K.NEWBORN_TRACK, inp) == (lab.kind is K.NEWBORN_TRACK)
                    assert scms.decide(K.FALSE_POSITIVE_DETECTION, inp) == (lab.kind is K.FALSE_POSITIVE_DETECTION)
            checked += 1
    assert checked == 100


def test_noise_off_yields_no_false_positive_labels():
    cfg = RunConfig(world=WorldConfig(n_frames=20, heading_noise=0.0), sensor=noiseless_sensor(), seed=2)
    for s in range(10):
        for f in sim.simulate_sequence(cfg, s):
            kinds = {lab.kind for lab in f.labels}
            assert K.FALSE_POSITIVE_TRACK not in kinds and K.FALSE_POSITIVE_DETECTION not in kinds


def test_inconsistent_oracle_raises(small_cfg):
    frames = sim.simulate_sequence(small_cfg, 0)
    f = next(f for f in frames if len(f.live_tracks) >= 1)
    with pytest.raises(sim.InconsistentOracle):
        sim.label_decisions(replace(f, live_tracks=f.live_tracks + f.live_tracks[:1]), f, small_cfg.scm)
    with pytest.raises(ValueError):
        FrameRecord(0, EGO0, (), f.detections[:1] * 2, f.grid, (1, 1), (True, True), (True, True))


def test_advance_live_lifecycle():
    from iitrack.decisions import DecisionLabel
    f = FrameRecord(0, EGO0, (), (), sim.raycast_occlusion(EGO0, [], noiseless_sensor()), (), (), ())
    occ = [DecisionLabel((TRACK, 4), K.OCCLUDED_TRACK)]
    live = {4: 0}
    for _ in range(5):
        live = sim.advance_live(live, f, occ, 5)
        assert 4 in live
    assert sim.advance_live(live, f, occ, 5) == {}
    assert sim.advance_live({4: 0}, f, [DecisionLabel((TRACK, 4), K.OUT_OF_RANGE_TRACK)], 5) == {}


# ---- datasets

def test_generate_dataset_deterministic(tmp_path, small_cfg):
    m1 = sim.generate_dataset(small_cfg, tmp_path / "a")
    m2 = sim.generate_dataset(small_cfg, tmp_path / "b", threads=2)
    for name in m1["sequences"] + ["manifest.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert m1["n_sequences"] == 4 and m1["seed"] == 3
    with pytest.raises(FileExistsError):
        sim.generate_dataset(small_cfg, tmp_path / "a")
    sim.generate_dataset(small_cfg, tmp_path / "a", force=True)
    other = sim.generate_dataset(small_cfg, tmp_path / "c", seed=4)
    assert (tmp_path / "c" / other["sequences"][0]).read_bytes() != (tmp_path / "a" / m1["sequences"][0]).read_bytes()


def test_sequences_independent_of_order():
    cfg = RunConfig(world=WorldConfig(n_frames=4), seed=9)
    a = sim.simulate_sequence(cfg, 3)
    sim.simulate_sequence(cfg, 1)
    assert a == sim.simulate_sequence(cfg, 3)


def test_zero_objects_only_clutter():
    cfg = RunConfig(world=WorldConfig(n_frames=10, min_objects=0, max_objects=0), sensor=replace(
        noiseless_sensor(), clutter_rate=1.0), seed=1)
    frames = sim.simulate_sequence(cfg, 0)
    assert all(not f.objects and not f.live_tracks for f in frames)
    assert all(lab.kind is K.FALSE_POSITIVE_DETECTION for f in frames for lab in f.labels)
    assert sum(len(f.detections) for f in frames) > 0


def test_truck_and_car_scene():
    cfg = RunConfig(world=WorldConfig(n_frames=20, heading_noise=0.0), sensor=noiseless_sensor())
    frames = sim.truck_and_car_sequence(cfg)
    f0 = frames[0]
    # region behind the truck (ego frame x < -17, same lane) is occluded; the car is visible
    assert f0.grid.occluded_at(-25.0, -5.5) and f0.grid.occluded_at(-30.0, -7.0)
    assert not f0.grid.occluded_at(-12.0, 0.0)
    assert f0.association[:2] == (0, 1)
    kinds = [next((lab.kind for lab in f.labels if lab.subject == (TRACK, 2)), None) for f in frames]
    assert K.OCCLUDED_TRACK in kinds
    gap = [i for i, k in enumerate(kinds) if k is K.OCCLUDED_TRACK]
    assert gap == list(range(gap[0], gap[-1] + 1)) and len(gap) <= 5
    assert kinds[gap[-1] + 1] is K.APPEARANCE_MATCH
