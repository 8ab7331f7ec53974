import math
from types import SimpleNamespace

import numpy as np
import pytest

from iitrack import autograd as ag
from iitrack.config import NetConfig
from iitrack.decisions import ALL_KINDS, TRACK_KINDS, DecisionKind
from iitrack.geometry import OrientedBox
from iitrack.net import (REGISTRY, ParamStore, TrackerNet, accumulate_poses, agg_name, batch_graphs,
                         box_features, frame_graph, optimizer_step, update_track_state)


def random_boxes(rng, n):
    return [OrientedBox(*rng.uniform(-30, 30, 2), 0.8, 1.6, 4.5, 1.9, *rng.normal(0, 5, 2),
                        rng.uniform(-math.pi, math.pi)) for _ in range(n)]


def random_graph(rng, d, k, a=4):
    return frame_graph(random_boxes(rng, d), rng.random(d), rng.normal(size=(d, a)),
                       random_boxes(rng, k), rng.random(k), rng.normal(size=(k, a)),
                       rng.random((k, 2)), a)


def small_net(**kw):
    cfg = NetConfig(appearance_dim=4, bbox_dim=5, hidden_dim=8, rounds=kw.pop("rounds", 1), horizon=2,
                    lstm_dim=3, **kw)
    return TrackerNet(cfg)


def test_zero_params_zero_everything():
    net = small_net()
    p = net.zero_params()
    g = random_graph(np.random.default_rng(0), 3, 2)
    assert np.all(net.encode_detection(p, g.det_x).data == 0)
    fw = net.forward(p, g)
    for k in ALL_KINDS:
        assert np.all(fw.scores[k].data == 0)


def test_encoder_matches_matmul_chain():
    rng = np.random.default_rng(1)
    net = small_net()
    p = net.init_params(3)
    box = OrientedBox(3.0, -4.0, 0.8, 1.6, 4.5, 1.9, 2.0, 0.5, 0.3)
    x = box_features(box, 0.7, 50.0)
    assert x.shape == (11,)
    np.testing.assert_allclose(x[[0, 1, 8, 9, 10]], [0.06, -0.08, math.sin(0.3), math.cos(0.3), 0.7])
    v = {n: p[n].data for n in p.names()}
    h1 = np.maximum(0, x @ v["det_bbox.l1.W"] + v["det_bbox.l1.b"])
    want = np.maximum(0, h1 @ v["det_bbox.l2.W"] + v["det_bbox.l2.b"])
    np.testing.assert_allclose(net.encode_detection(p, x[None]).data[0], want, rtol=1e-12)
    del rng


def test_theta_wrap_invariance():
    # boxes normalize headings on construction, so feed the raw fields directly
    fields = dict(x=1, y=2, z=0, h=1, l=4, w=2, vx=0, vy=0)
    a = SimpleNamespace(theta=0.4, **fields)
    b = SimpleNamespace(theta=0.4 + 2 * math.pi, **fields)
    np.testing.assert_allclose(box_features(a, 0.5), box_features(b, 0.5), atol=1e-12)


def test_message_pass_no_detections_is_identity():
    net = small_net(rounds=2)
    p = net.init_params(0)
    t = ag.Tensor(np.random.default_rng(2).normal(size=(3, 8)))
    d = ag.Tensor(np.zeros((0, 8)))
    t2, d2 = net.message_pass(p, "box", t, d, np.zeros((0, 2)), np.zeros(0, np.intp), np.zeros(0, np.intp))
    assert np.array_equal(t2.data, t.data) and d2.data.shape == (0, 8)


@pytest.mark.parametrize("aggregation", ["sum", "mean"])
def test_message_pass_hand_computed(aggregation):
    rng = np.random.default_rng(3)
    net = small_net(aggregation=aggregation)
    p = net.init_params(5)
    K = D = 2
    t0, d0 = rng.normal(size=(K, 8)), rng.normal(size=(D, 8))
    e = rng.normal(size=(D * K, 2))
    ed, et = np.repeat(np.arange(D), K), np.tile(np.arange(K), D)
    t1, d1 = net.message_pass(p, "box", ag.Tensor(t0), ag.Tensor(d0), e, ed, et)
    v = lambda n: p[n].data  # noqa: E731
    want_t, want_d = t0.copy(), d0.copy()
    for i in range(D):
        for j in range(K):
            row = e[i * K + j]
            pre = "mp0.box.to_track"
            mt = np.maximum(0, t0[j] @ v(pre + ".Wt") + d0[i] @ v(pre + ".Wd") + row @ v(pre + ".We") + v(pre + ".b"))
            pre = "mp0.box.to_det"
            md = np.maximum(0, t0[j] @ v(pre + ".Wt") + d0[i] @ v(pre + ".Wd") + row @ v(pre + ".We") + v(pre + ".b"))
            scale_t = 1.0 / D if aggregation == "mean" else 1.0
            scale_d = 1.0 / K if aggregation == "mean" else 1.0
            want_t[j] += scale_t * mt
            want_d[i] += scale_d * md
    np.testing.assert_allclose(t1.data, want_t, rtol=1e-12)
    np.testing.assert_allclose(d1.data, want_d, rtol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    net = small_net(rounds=2)
    p = net.init_params(seed)
    d, k, a = 4, 3, 4
    db, tb = random_boxes(rng, d), random_boxes(rng, k)
    ds, ts = rng.random(d), rng.random(k)
    da, ta = rng.normal(size=(d, a)), rng.normal(size=(k, a))
    aux = rng.random((k, 2))
    base = net.forward(p, frame_graph(db, ds, da, tb, ts, ta, aux, a)).frame_scores()[0]
    pd, pk = rng.permutation(d), rng.permutation(k)
    g2 = frame_graph([db[i] for i in pd], ds[pd], da[pd], [tb[j] for j in pk], ts[pk], ta[pk], aux[pk], a)
    perm = net.forward(p, g2).frame_scores()[0]
    np.testing.assert_allclose(perm.app, base.app[np.ix_(pd, pk)], atol=1e-12)
    np.testing.assert_allclose(perm.bbox, base.bbox[np.ix_(pd, pk)], atol=1e-12)
    np.testing.assert_allclose(perm.newborn, base.newborn[pd], atol=1e-12)
    np.testing.assert_allclose(perm.fpdet, base.fpdet[pd], atol=1e-12)
    for name in ("oor", "fpt", "occ"):
        np.testing.assert_allclose(getattr(perm, name), getattr(base, name)[pk], atol=1e-12)


def test_cache_registry_and_determinism():
    rng = np.random.default_rng(9)
    net = small_net()
    p = net.init_params(1)
    g = random_graph(rng, 3, 2)
    f1, f2 = net.forward(p, g), net.forward(p, g)
    assert set(f1.cache) == set(REGISTRY)
    assert f1.cache["Track Aggregated Features[OccludedTrack]"].data.shape == (2, 8)
    for k in TRACK_KINDS:
        assert f1.cache[agg_name(k)].data.shape == (2, 8)
    assert f1.cache[agg_name(DecisionKind.NEWBORN_TRACK)].data.shape == (3, 8)
    assert f1.cache[agg_name(DecisionKind.BBOX_MATCH)].data.shape == (6, 8)
    for name in REGISTRY:
        assert np.array_equal(f1.cache[name].data, f2.cache[name].data)
    assert np.array_equal(f1.flat().data, f2.flat().data)


def test_degenerate_frames():
    net = small_net()
    p = net.init_params(0)
    rng = np.random.default_rng(0)
    for d, k in ((0, 0), (0, 3), (2, 0)):
        s = net.forward(p, random_graph(rng, d, k)).frame_scores()[0]
        assert s.app.shape == (d, k) and s.newborn.shape == (d,) and s.occ.shape == (k,)


def test_batched_equals_single_frames():
    rng = np.random.default_rng(11)
    net = small_net()
    p = net.init_params(2)
    graphs = [random_graph(rng, d, k) for d, k in ((2, 3), (0, 2), (3, 0), (1, 1))]
    batched = net.forward(p, batch_graphs(graphs)).frame_scores()
    for g, b in zip(graphs, batched):
        s = net.forward(p, g).frame_scores()[0]
        np.testing.assert_allclose(b.flat(), s.flat(), atol=1e-12)


def test_patch_overwrites_aggregate():
    rng = np.random.default_rng(12)
    net = small_net()
    p = net.init_params(2)
    g = random_graph(rng, 2, 3)
    base = net.forward(p, g)
    name = agg_name(DecisionKind.OCCLUDED_TRACK)
    mask = np.zeros((1, 8), bool)
    mask[0, :4] = True
    src = base.cache[name].data[2:3]
    patched = net.forward(p, g, {name: (np.array([0]), mask, src)})
    got = patched.cache[name].data
    assert np.array_equal(got[0, :4], src[0, :4])
    assert np.array_equal(got[0, 4:], base.cache[name].data[0, 4:])
    assert np.array_equal(got[1:], base.cache[name].data[1:])


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_lstm_zero_and_scalar_oracle():
    cfg = NetConfig(appearance_dim=4, bbox_dim=4, hidden_dim=4, lstm_dim=2, horizon=1)
    net = TrackerNet(cfg)
    z = net.zero_params()
    h, c = net.lstm_step(z, np.ones((1, 4)), np.zeros((1, 2)), np.zeros((1, 2)))
    assert np.all(h.data == 0) and np.all(c.data == 0)

    p = net.init_params(4)
    rng = np.random.default_rng(4)
    x, h0, c0 = rng.normal(size=4), rng.normal(size=2), rng.normal(size=2)
    Wx, Wh, b = p["lstm.Wx"].data, p["lstm.Wh"].data, p["lstm.b"].data
    want_h, want_c = [], []
    for u in range(2):
        gates = []
        for gate in range(4):
            col = gate * 2 + u
            zz = b[col] + sum(x[i] * Wx[i, col] for i in range(4)) + sum(h0[i] * Wh[i, col] for i in range(2))
            gates.append(zz)
        i_, f_, g_, o_ = _sig(gates[0]), _sig(gates[1]), math.tanh(gates[2]), _sig(gates[3])
        cu = f_ * c0[u] + i_ * g_
        want_c.append(cu)
        want_h.append(o_ * math.tanh(cu))
    h, c = net.lstm_step(p, x[None], h0[None], c0[None])
    np.testing.assert_allclose(h.data[0], want_h, rtol=1e-12)
    np.testing.assert_allclose(c.data[0], want_c, rtol=1e-12)
    h2, _ = net.lstm_step(p, x[None], h0[None], c0[None])
    assert np.array_equal(h.data, h2.data)


def test_forecast_zero_head_repeats_pose():
    cfg = NetConfig(appearance_dim=4, bbox_dim=4, hidden_dim=4, lstm_dim=2, horizon=3, forecast_prior="none")
    net = TrackerNet(cfg)
    p = net.zero_params()
    box = OrientedBox(5, 6, 0.8, 1.6, 4.5, 1.9, 3, 1, 0.2)
    st = update_track_state(net, p, None, 7, np.zeros(4), box, np.zeros(4), 0.9)
    assert st.forecast.shape == (3, 3)
    np.testing.assert_array_equal(st.forecast, np.tile([5.0, 6.0, 0.2], (3, 1)))


def test_constant_velocity_prior():
    cfg = NetConfig(appearance_dim=4, bbox_dim=4, hidden_dim=4, lstm_dim=2, horizon=2)
    net = TrackerNet(cfg, dt=0.5)
    st = update_track_state(net, net.zero_params(), None, 0, np.zeros(4),
                            OrientedBox(0, 0, 0, 1, 1, 1, 2, -4, 0), np.zeros(4), 1.0)
    np.testing.assert_allclose(st.forecast[:, :2], [[1, -2], [2, -4]])


def test_accumulate_poses_prefix_sum():
    rng = np.random.default_rng(5)
    start, off = rng.normal(size=(4, 3)), rng.normal(size=(4, 5, 3))
    got = accumulate_poses(start, off)
    for n in range(4):
        pose = start[n].copy()
        for k in range(5):
            pose = pose + off[n, k]
            np.testing.assert_allclose(got[n, k], pose, rtol=1e-12)
    assert accumulate_poses(start, off[:, :1]).shape == (4, 1, 3)


def test_update_state_rejects_bad_dim():
    net = small_net()
    with pytest.raises(ValueError):
        update_track_state(net, net.zero_params(), None, 0, np.zeros(3), OrientedBox(0, 0, 0, 1, 1, 1, 0, 0, 0),
                           np.zeros(4), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_forward_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    cfg = NetConfig(appearance_dim=int(rng.integers(2, 5)), bbox_dim=int(rng.integers(2, 6)), hidden_dim=4,
                    rounds=int(rng.integers(1, 3)), horizon=2, lstm_dim=2,
                    aggregation=("sum", "mean")[seed % 2])
    net = TrackerNet(cfg)
    p = net.init_params(seed)
    g = random_graph(rng, 2, 2, cfg.appearance_dim)
    wts = rng.normal(size=g.E * 2 + g.D * 2 + g.K * 3)

    def loss():
        flat = net.forward(p, g).flat()
        return ag.sum_all(ag.mul(ag.tanh(flat), wts))

    p.zero_grad()
    ag.backward(loss())
    eps, worst = 1e-5, 0.0
    for name in p.names():
        t = p[name]
        for idx in np.ndindex(t.data.shape):
            old = t.data[idx]
            t.data[idx] = old + eps
            up = float(loss().data)
            t.data[idx] = old - eps
            dn = float(loss().data)
            t.data[idx] = old
            num = (up - dn) / (2 * eps)
            ana = t.grad[idx] if t.grad is not None else 0.0
            err = abs(ana - num) / max(1e-4, abs(ana) + abs(num))
            worst = max(worst, err)
    assert worst < 1e-3


def test_optimizer_steps():
    s = ParamStore()
    w = s.add("w", np.array([1.0]))
    w.grad = 2 * w.data
    optimizer_step(s, 0.1, "sgd")
    np.testing.assert_allclose(w.data, [0.8])
    before = w.data.copy()
    w.grad = 2 * w.data
    optimizer_step(s, 0.0, "momentum")
    assert np.array_equal(w.data, before)
    with pytest.raises(ValueError):
        optimizer_step(s, 0.1, "adam")


def test_small_batch_loss_decreases():
    rng = np.random.default_rng(13)
    net = small_net()
    p = net.init_params(0)
    g = random_graph(rng, 3, 3)
    target = rng.choice([-1.0, 1.0], size=2 * g.E + 2 * g.D + 3 * g.K)

    def loss():
        return ag.sum_all(ag.relu(ag.add(ag.neg(ag.mul(net.forward(p, g).flat(), target)), 1.0)))

    values = []
    for _ in range(10):
        p.zero_grad()
        L = loss()
        values.append(float(L.data))
        ag.backward(L)
        optimizer_step(p, 1e-3, "sgd")
    assert all(b < a for a, b in zip(values, values[1:]))


def test_param_store_helpers():
    net = small_net()
    p = net.init_params(0)
    q = net.init_params(0)
    assert p.checksum() == q.checksum()
    assert p.checksum() != net.init_params(1).checksum()
    c = p.copy()
    c["app_proj.b"].data += 1
    assert p.checksum() != c.checksum()
    with pytest.raises(KeyError):
        p.add("app_proj.b", np.zeros(8))
    with pytest.raises(ValueError):
        p.load({"app_proj.b": np.zeros(3)})
