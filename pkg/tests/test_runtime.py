import dataclasses
import itertools
from types import SimpleNamespace

import numpy as np
import pytest

from iitrack import iit, runtime, scms
from iitrack.config import NetConfig, RunConfig, TrainConfig, WorldConfig
from iitrack.decisions import ALL_KINDS, DecisionKind as K
from iitrack.prepare import teacher_forced
from iitrack.sim import truck_and_car_sequence, simulate_sequence

from conftest import noiseless_sensor

H = 8


def cfg_for(sensor=None, n=4, frames=8):
    kw = {} if sensor is None else {"sensor": sensor}
    return RunConfig(world=WorldConfig(n_sequences=n, n_frames=frames),
                     net=NetConfig(bbox_dim=6, hidden_dim=H, lstm_dim=4, horizon=2),
                     train=TrainConfig(pool_per_label=30), seed=9, **kw)


@pytest.fixture(scope="module")
def noisy():
    cfg = cfg_for()
    return cfg, [simulate_sequence(cfg, i) for i in range(cfg.world.n_sequences)]


def forced_probes(values: dict, kind):
    """A trained probe set whose reading for ``kind`` is fixed by ``values``."""
    probes = iit.ProbeSet(iit.default_alignment(H), 0)
    for node in probes.alignment.nodes(kind):
        key = probes.key(kind, node)
        probes.store[key + ".W"].data[...] = 0.0
        if node == scms.PRED_BOX:
            probes.store[key + ".b"].data[...] = 0.3
        else:
            probes.store[key + ".b"].data[...] = 1.0 if values[node] else -1.0
    probes.trained = True
    return probes


# ---- explanation traces

CLOSED_FORM = {
    K.OCCLUDED_TRACK: lambda v: v[scms.OCCLUDED] and not v[scms.OUT_OF_RANGE]
    and not (v[scms.MATCH_APP] or v[scms.MATCH_BOX]),
    K.OUT_OF_RANGE_TRACK: lambda v: v[scms.OUT_OF_RANGE] and not (v[scms.MATCH_APP] or v[scms.MATCH_BOX]),
    K.FALSE_POSITIVE_TRACK: lambda v: not v[scms.OCCLUDED] and not v[scms.OUT_OF_RANGE]
    and not (v[scms.MATCH_APP] or v[scms.MATCH_BOX]),
    K.NEWBORN_TRACK: lambda v: (v[scms.APP_VALID] or v[scms.BOX_VALID]) and not v[scms.MATCH_TRACK],
    K.FALSE_POSITIVE_DETECTION: lambda v: not v[scms.APP_VALID] and not v[scms.BOX_VALID],
    K.APPEARANCE_MATCH: lambda v: v[scms.MATCH_APP],
    K.BBOX_MATCH: lambda v: v[scms.MATCH_BOX],
}


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_explain_truth_table(kind):
    nodes = [n for n in iit.default_alignment(H).nodes(kind) if n != scms.PRED_BOX]
    for bits in itertools.product((False, True), repeat=len(nodes)):
        values = dict(zip(nodes, bits))
        probes = forced_probes(values, kind)
        want = bool(CLOSED_FORM[kind](values))
        for score in (-0.7, 0.9):
            tr = runtime.explain(runtime.ExplainInput(("track", 0), kind, score, np.zeros(H)), probes)
            assert tr.scm_decision == want
            assert tr.network_decision == (score > 0)
            assert tr.agreement == (want == (score > 0))
            assert runtime.uncertainty_flag(tr) == (not tr.agreement)
            assert set(tr.probed) == set(probes.alignment.nodes(kind))
            for n in nodes:
                assert tr.probed[n] == values[n]


def test_occluded_row_agrees_when_network_says_occluded():
    values = {scms.OCCLUDED: True, scms.OUT_OF_RANGE: False, scms.MATCH_APP: False, scms.MATCH_BOX: False}
    probes = forced_probes(values, K.OCCLUDED_TRACK)
    tr = runtime.explain(runtime.ExplainInput(("track", 3), K.OCCLUDED_TRACK, 0.4, np.zeros(H)), probes)
    assert tr.agreement is True and not runtime.uncertainty_flag(tr)
    np.testing.assert_allclose(tr.probed[scms.PRED_BOX], [0.3, 0.3])
    d = tr.to_dict()
    assert d["probed"][scms.OCCLUDED] is True and d["agreement"] is True


def test_untrained_probes_always_flag():
    probes = iit.ProbeSet(iit.default_alignment(H), 0)
    tr = runtime.explain(runtime.ExplainInput(("det", 0), K.NEWBORN_TRACK, 1.0, np.zeros(H)), probes)
    assert tr.agreement is None and tr.scm_decision is None and not tr.probes_trained
    assert all(v is None for v in tr.probed.values())
    assert runtime.uncertainty_flag(tr)


def test_explain_input_carries_no_ground_truth():
    # the runtime explainer is fed network-side quantities only
    names = {f.name for f in dataclasses.fields(runtime.ExplainInput)}
    assert names == {"subject", "kind", "score", "aggregate"}


# ---- oracle scorer and metrics

def test_oracle_scorer_reproduces_every_label(noisy):
    cfg, data = noisy
    net = iit.make_net(cfg)
    report, records = runtime.evaluate(cfg, net, net.init_params(0), None, data, range(len(data)),
                                       iit.default_alignment(H), oracle=True, with_iia=False, free_run=False)
    assert report["accuracy"] == 1.0
    assert len(records) == sum(len(fr.labels) for seq in data for fr in seq)
    for kind, v in report["per_kind"].items():
        assert v["precision"] == 1.0 and v["recall"] == 1.0


def test_report_has_all_fields_and_is_reproducible(noisy):
    cfg, data = noisy
    net = iit.make_net(cfg)
    p = net.init_params(2)
    probes = iit.ProbeSet(iit.default_alignment(H), 2)
    a, ra = runtime.evaluate(cfg, net, p, probes, data, [0, 1], probes.alignment)
    b, rb = runtime.evaluate(cfg, net, p, probes, data, [0, 1], probes.alignment)
    assert set(runtime.METRIC_FIELDS) <= set(a)
    assert a == b
    assert [r.to_dict() for r in ra] == [r.to_dict() for r in rb]


def test_decision_metrics_by_hand():
    lab = SimpleNamespace(kind=K.NEWBORN_TRACK)
    fp = SimpleNamespace(kind=K.FALSE_POSITIVE_DETECTION)
    recs = [SimpleNamespace(label=lab, kind=K.NEWBORN_TRACK, correct=True),
            SimpleNamespace(label=lab, kind=K.FALSE_POSITIVE_DETECTION, correct=False),
            SimpleNamespace(label=fp, kind=K.FALSE_POSITIVE_DETECTION, correct=True)]
    m = runtime.decision_metrics(recs)
    assert m["accuracy"] == pytest.approx(2 / 3)
    assert m["per_kind"]["NewbornTrack"] == {"precision": 1.0, "recall": 0.5, "support": 2}
    assert m["per_kind"]["FalsePositiveDetection"]["precision"] == 0.5


def test_flag_metrics_by_hand():
    recs = [SimpleNamespace(flagged=True, correct=False), SimpleNamespace(flagged=True, correct=True),
            SimpleNamespace(flagged=False, correct=True), SimpleNamespace(flagged=False, correct=True)]
    m = runtime.flag_metrics(recs)
    assert m["flag_rate"] == 0.5 and m["flagged_error"] == 0.5 and m["unflagged_error"] == 0.0


# ---- IIA

def _bank_and_pools(cfg, data, per_label=30):
    bank = iit.FrameBank(data, cfg.scm)
    pools = iit.build_pools(bank, iit.default_alignment(H), per_label, np.random.default_rng(1))
    return bank, pools


def test_oracle_iia_is_one(noisy):
    cfg, data = noisy
    bank, pools = _bank_and_pools(cfg, data)
    res = runtime.compute_iia(runtime.oracle_cf_scorer(bank), pools)
    assert res["overall"] == 1.0 and all(v == 1.0 for v in res["per_kind"].values())


def test_constant_scorer_sits_at_chance(noisy):
    # balanced pools: a scorer that ignores its input gets exactly half right
    cfg, data = noisy
    _, pools = _bank_and_pools(cfg, data)
    res = runtime.compute_iia(lambda pairs: np.ones(len(pairs)), pools)
    assert res["overall"] == pytest.approx(0.5)


def test_untrained_network_iia_near_chance(noisy):
    cfg, data = noisy
    bank, pools = _bank_and_pools(cfg, data, 60)
    net = iit.make_net(cfg)
    accs = []
    for seed in range(3):
        p = net.init_params(seed)
        prepared = {bank.index[(pf.seq, pf.t)]: pf for seq in teacher_forced(net, p, data) for pf in seq}
        fn = runtime.network_cf_scorer(net, p, prepared, iit.default_alignment(H))
        accs.append(runtime.compute_iia(fn, pools)["overall"])
    assert abs(np.mean(accs) - 0.5) < 0.15


def test_empty_pool_set_raises():
    with pytest.raises(ValueError):
        runtime.compute_iia(lambda pairs: np.zeros(len(pairs)), {})


# ---- free-running tracker

def fake_frames(assocs):
    return [SimpleNamespace(association=a) for a in assocs]


def test_id_switch_three_frames():
    frames = fake_frames([(7, 8), (7, 8), (7, 8)])
    outs = [SimpleNamespace(det_tracks=d) for d in [(0, 1), (0, 1), (2, 1)]]
    assert runtime.id_switches(frames, outs) == 1
    outs[1] = SimpleNamespace(det_tracks=(1, 0))
    assert runtime.id_switches(frames, outs) == 4


def test_id_switch_ignores_clutter_and_unmatched():
    frames = fake_frames([(None, 3), (None, 3), (None, 3)])
    outs = [SimpleNamespace(det_tracks=d) for d in [(5, 0), (6, None), (7, 0)]]
    assert runtime.id_switches(frames, outs) == 0


def test_displacement_zero_for_perfect_forecast():
    poses = [(float(t), 2.0 * t) for t in range(5)]
    frames = [SimpleNamespace(object=lambda g, t=t: SimpleNamespace(box=SimpleNamespace(x=poses[t][0],
                                                                                        y=poses[t][1])))
              for t in range(5)]
    fc = np.array([[poses[k][0], poses[k][1], 0.0] for k in (1, 2)])
    outs = [SimpleNamespace(t=0, forecasts=[(0, 4, fc)]),
            SimpleNamespace(t=3, forecasts=[(0, 4, np.array([[4.0, 8.0, 0.0], [9.0, 9.0, 0.0]]))]),
            SimpleNamespace(t=1, forecasts=[(1, None, fc)])]
    ade, fde = runtime.displacement_errors(frames, outs)
    assert ade == [0.0, 0.0] and fde == [0.0]


def test_displacement_known_offset():
    frames = [SimpleNamespace(object=lambda g: SimpleNamespace(box=SimpleNamespace(x=0.0, y=0.0)))] * 3
    outs = [SimpleNamespace(t=0, forecasts=[(0, 1, np.array([[3.0, 4.0, 0.0], [0.0, 1.0, 0.0]]))])]
    ade, fde = runtime.displacement_errors(frames, outs)
    assert ade == [3.0] and fde == [1.0]


def _tracks_per_identity(frames, outs):
    seen = {}
    for fr, oc in zip(frames, outs):
        for gid, tid in zip(fr.association, oc.det_tracks):
            if gid is not None and tid is not None:
                seen.setdefault(gid, set()).add(tid)
    return seen


def test_noiseless_oracle_tracking_has_no_switches():
    cfg = cfg_for(noiseless_sensor(), n=3, frames=12)
    net = iit.make_net(cfg)
    for s in range(3):
        frames = simulate_sequence(cfg, s)
        outs = runtime.run_tracker(frames, net, None, cfg.world.occlusion_persistence, cfg.scm, oracle=True)
        assert runtime.id_switches(frames, outs) == 0
        for fr, oc in zip(frames, outs):
            # every detection is of a real object and lands on a track
            assert all(t is not None for t in oc.det_tracks)
            assert len(oc.result.detections) == len(fr.detections)


def test_truck_and_car_identities_survive_occlusion():
    cfg = cfg_for(noiseless_sensor(), frames=20)
    frames = truck_and_car_sequence(cfg)
    net = iit.make_net(cfg)
    outs = runtime.run_tracker(frames, net, None, cfg.world.occlusion_persistence, cfg.scm, oracle=True)
    assert runtime.id_switches(frames, outs) == 0
    per = _tracks_per_identity(frames, outs)
    assert all(len(v) == 1 for v in per.values())
    # the two side-by-side vehicles never share a track
    assert per[0].isdisjoint(per[1])
    occluded = [any(k is K.OCCLUDED_TRACK for k, _ in oc.result.tracks) for oc in outs]
    assert any(occluded)


def test_network_tracker_is_deterministic(noisy):
    cfg, data = noisy
    net = iit.make_net(cfg)
    p = net.init_params(3)
    a = runtime.run_tracker(data[0], net, p, cfg.world.occlusion_persistence)
    b = runtime.run_tracker(data[0], net, p, cfg.world.occlusion_persistence)
    assert [o.det_tracks for o in a] == [o.det_tracks for o in b]
    for oa, ob in zip(a, b):
        for (ta, ga, fa), (tb, gb, fb) in zip(oa.forecasts, ob.forecasts):
            assert ta == tb and ga == gb and np.array_equal(fa, fb)


def test_tracker_handles_empty_frames():
    cfg = cfg_for(noiseless_sensor(), n=1, frames=3)
    frames = simulate_sequence(cfg, 0)
    empty = [dataclasses.replace(fr, objects=(), detections=(), association=(), appearance_valid=(),
                                 bbox_valid=(), labels=(), live_tracks=()) for fr in frames]
    outs = runtime.run_tracker(empty, iit.make_net(cfg), None, 5)
    assert all(o.det_tracks == () and o.track_ids == () for o in outs)
