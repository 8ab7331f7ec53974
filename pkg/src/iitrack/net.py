"""Differentiable base tracker: encoders, bipartite message passing, the seven
decision heads with named activation slices, an LSTM track updater and an
h-step motion forecaster."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import kernels
from .assignment import ScoreFamilies
from .autograd import Tensor
from .config import NetConfig
from .decisions import ALL_KINDS, DETECTION_KINDS, PAIR_KINDS, TRACK_KINDS, DecisionKind
from .geometry import OrientedBox

BOX_INPUTS = 11
POS_SCALE_DEFAULT = 50.0
DIM_SCALE = 5.0
VEL_SCALE = 15.0
PROX_SCALE = 2.0  # metres, edge proximity feature exp(-dist / PROX_SCALE)
THETA_STEP_SCALE = 0.1  # radians per forecast step at unit output

TRACK_BOX_FEATS = "Track Informed BBOX Features"
TRACK_APP_FEATS = "Track Informed Appearance Features"
DET_BOX_FEATS = "Detection Informed BBOX Features"
DET_APP_FEATS = "Detection Informed Appearance Features"


def agg_name(kind: DecisionKind) -> str:
    kind = DecisionKind(kind)
    if kind in TRACK_KINDS:
        return f"Track Aggregated Features[{kind.value}]"
    if kind in DETECTION_KINDS:
        return f"Detection Aggregated Features[{kind.value}]"
    return f"Pair Aggregated Features[{kind.value}]"


REGISTRY = tuple(agg_name(k) for k in ALL_KINDS) + (TRACK_BOX_FEATS, TRACK_APP_FEATS, DET_BOX_FEATS, DET_APP_FEATS)


# ------------------------------------------------------------------ params

class ParamStore:
    """Named parameters, their gradients and optimizer state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n in self.names():
            out.add(n, self.params[n].data.copy())
        out.state = {k: v.copy() for k, v in self.state.items()}
        return out

    def load(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            if self.params[n].data.shape != np.shape(v):
                raise ValueError(f"shape mismatch for {n}: {self.params[n].data.shape} vs {np.shape(v)}")
            self.params[n].data = np.array(v, dtype=np.float64)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for n in self.names():
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()


def optimizer_step(store: ParamStore, lr: float, kind: str = "sgd", momentum: float = 0.9,
                   clip: float | None = None) -> None:
    """Gradient descent (``sgd``) or heavy-ball momentum, in name order.

    ``clip`` rescales the global gradient norm when it exceeds the value.
    """
    names = store.names()
    grads = store.grads()
    scale = 1.0
    if clip is not None:
        norm = math.sqrt(sum(float(np.sum(grads[n] * grads[n])) for n in names))
        if norm > clip:
            scale = clip / norm
    for n in names:
        g = grads[n] if scale == 1.0 else grads[n] * scale
        p = store.params[n]
        if kind == "momentum":
            v = store.state.get(n)
            v = g.copy() if v is None else momentum * v + g
            store.state[n] = v
            p.data = p.data - lr * v
        elif kind == "sgd":
            p.data = p.data - lr * g
        else:
            raise ValueError(f"unknown optimizer {kind!r}")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear(p: ParamStore, name: str, x: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, p[name + ".W"]), p[name + ".b"])


# ------------------------------------------------------------------ inputs

def box_features(box: OrientedBox, score: float, r_max: float = POS_SCALE_DEFAULT) -> np.ndarray:
    return np.array([box.x / r_max, box.y / r_max, box.z / DIM_SCALE, box.h / DIM_SCALE, box.l / DIM_SCALE,
                     box.w / DIM_SCALE, box.vx / VEL_SCALE, box.vy / VEL_SCALE, math.sin(box.theta),
                     math.cos(box.theta), score], dtype=np.float64)


def edge_features(det_boxes: Sequence[OrientedBox], det_apps: np.ndarray, trk_boxes: Sequence[OrientedBox],
                  trk_apps: np.ndarray) -> np.ndarray:
    """(D*K) x 3 rows ordered det-major: [BEV IoU, proximity, appearance cosine]."""
    d, k = len(det_boxes), len(trk_boxes)
    if d == 0 or k == 0:
        return np.zeros((d * k, 3))
    a = np.array([b.bev() for b in det_boxes])
    b = np.array([t.bev() for t in trk_boxes])
    iou = kernels.iou_matrix(a, b)
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    da = det_apps / np.maximum(np.linalg.norm(det_apps, axis=1, keepdims=True), 1e-12)
    ta = trk_apps / np.maximum(np.linalg.norm(trk_apps, axis=1, keepdims=True), 1e-12)
    cos = da @ ta.T
    return np.stack([iou, np.exp(-dist / PROX_SCALE), cos], axis=-1).reshape(d * k, 3)


@dataclass
class GraphInput:
    """Network inputs for one or more frames stacked block-diagonally."""

    det_x: np.ndarray
    det_app: np.ndarray
    trk_x: np.ndarray
    trk_app: np.ndarray
    trk_aux: np.ndarray
    edge_det: np.ndarray
    edge_trk: np.ndarray
    edge_x: np.ndarray
    n_det: list = field(default_factory=list)
    n_trk: list = field(default_factory=list)

    @property
    def D(self) -> int:
        return len(self.det_x)

    @property
    def K(self) -> int:
        return len(self.trk_x)

    @property
    def E(self) -> int:
        return len(self.edge_det)

    def offsets(self):
        """Per-frame (det, track, edge) start offsets."""
        nd = np.asarray(self.n_det, dtype=np.intp)
        nk = np.asarray(self.n_trk, dtype=np.intp)
        od = np.concatenate([[0], np.cumsum(nd)[:-1]]).astype(np.intp)
        ok = np.concatenate([[0], np.cumsum(nk)[:-1]]).astype(np.intp)
        oe = np.concatenate([[0], np.cumsum(nd * nk)[:-1]]).astype(np.intp)
        return od, ok, oe


def frame_graph(det_boxes, det_scores, det_apps, trk_boxes, trk_scores, trk_apps, trk_aux,
                appearance_dim: int, r_max: float = POS_SCALE_DEFAULT) -> GraphInput:
    d, k = len(det_boxes), len(trk_boxes)
    det_apps = np.asarray(det_apps, dtype=np.float64).reshape(d, appearance_dim)
    trk_apps = np.asarray(trk_apps, dtype=np.float64).reshape(k, appearance_dim)
    det_x = np.array([box_features(b, s, r_max) for b, s in zip(det_boxes, det_scores)]).reshape(d, BOX_INPUTS)
    trk_x = np.array([box_features(b, s, r_max) for b, s in zip(trk_boxes, trk_scores)]).reshape(k, BOX_INPUTS)
    return GraphInput(
        det_x, det_apps, trk_x, trk_apps, np.asarray(trk_aux, dtype=np.float64).reshape(k, 2),
        np.repeat(np.arange(d, dtype=np.intp), k), np.tile(np.arange(k, dtype=np.intp), d),
        edge_features(det_boxes, det_apps, trk_boxes, trk_apps), [d], [k])


def batch_graphs(graphs: Sequence[GraphInput]) -> GraphInput:
    ed, et = [], []
    od = ok = 0
    for g in graphs:
        ed.append(g.edge_det + od)
        et.append(g.edge_trk + ok)
        od += g.D
        ok += g.K
    cat = lambda xs, w: np.concatenate(xs) if xs else np.zeros((0, w))  # noqa: E731
    a = graphs[0].det_app.shape[1] if graphs else 0
    return GraphInput(
        cat([g.det_x for g in graphs], BOX_INPUTS), cat([g.det_app for g in graphs], a),
        cat([g.trk_x for g in graphs], BOX_INPUTS), cat([g.trk_app for g in graphs], a),
        cat([g.trk_aux for g in graphs], 2),
        np.concatenate(ed).astype(np.intp) if ed else np.zeros(0, np.intp),
        np.concatenate(et).astype(np.intp) if et else np.zeros(0, np.intp),
        cat([g.edge_x for g in graphs], 3),
        [n for g in graphs for n in g.n_det], [n for g in graphs for n in g.n_trk])


# ------------------------------------------------------------------ network

@dataclass
class Forward:
    scores: dict  # DecisionKind -> Tensor (E, D or K entries)
    cache: dict   # registry name -> Tensor
    graph: GraphInput

    def flat(self) -> Tensor:
        """All scores concatenated in family order (app, bbox, nb, fpd, oor, fpt, occ)."""
        return ag.concat([self.scores[k] for k in ALL_KINDS], axis=0)

    def family_offsets(self) -> list[int]:
        g = self.graph
        sizes = [g.E, g.E, g.D, g.D, g.K, g.K, g.K]
        return [int(v) for v in np.concatenate([[0], np.cumsum(sizes)[:-1]])]

    def frame_scores(self) -> list[ScoreFamilies]:
        g = self.graph
        od, ok, oe = g.offsets()
        s = {k: v.data for k, v in self.scores.items()}
        out = []
        for f, (d, k) in enumerate(zip(g.n_det, g.n_trk)):
            e = slice(oe[f], oe[f] + d * k)
            dd = slice(od[f], od[f] + d)
            kk = slice(ok[f], ok[f] + k)
            out.append(ScoreFamilies(
                s[DecisionKind.APPEARANCE_MATCH][e].reshape(d, k), s[DecisionKind.BBOX_MATCH][e].reshape(d, k),
                s[DecisionKind.NEWBORN_TRACK][dd], s[DecisionKind.FALSE_POSITIVE_DETECTION][dd],
                s[DecisionKind.OUT_OF_RANGE_TRACK][kk], s[DecisionKind.FALSE_POSITIVE_TRACK][kk],
                s[DecisionKind.OCCLUDED_TRACK][kk]))
        return out


class TrackerNet:
    def __init__(self, cfg: NetConfig, r_max: float = POS_SCALE_DEFAULT, dt: float = 0.2):
        cfg.validate()
        self.cfg = cfg
        self.r_max = float(r_max)
        self.dt = float(dt)
        self.forecast_prior = cfg.forecast_prior

    # -- parameters
    def shapes(self) -> dict[str, tuple[tuple[int, ...], int]]:
        """name -> (shape, fan_in)."""
        c = self.cfg
        A, B, H, L, h = c.appearance_dim, c.bbox_dim, c.hidden_dim, c.lstm_dim, c.horizon
        out: dict[str, tuple[tuple[int, ...], int]] = {}

        def lin(name, i, o):
            out[name + ".W"] = ((i, o), i)
            out[name + ".b"] = ((o,), i)

        for enc in ("det_bbox", "trk_bbox"):
            lin(enc + ".l1", BOX_INPUTS, B)
            lin(enc + ".l2", B, H)
        lin("app_proj", A, H)
        for r in range(c.rounds):
            for stream, e in (("box", 2), ("app", 1)):
                for direction in ("to_track", "to_det"):
                    pre = f"mp{r}.{stream}.{direction}"
                    out[pre + ".Wt"] = ((H, H), 2 * H + e)
                    out[pre + ".Wd"] = ((H, H), 2 * H + e)
                    out[pre + ".We"] = ((e, H), 2 * H + e)
                    out[pre + ".b"] = ((H,), 2 * H + e)
        widths = {**{k: 2 * H + 2 for k in TRACK_KINDS}, **{k: 2 * H + 1 for k in DETECTION_KINDS},
                  **{k: 4 * H + 3 for k in PAIR_KINDS}}
        for k in ALL_KINDS:
            lin(f"head.{k.value}.agg", widths[k], H)
            lin(f"head.{k.value}.out", H, 1)
        out["lstm.Wx"] = ((H, 4 * L), H + L)
        out["lstm.Wh"] = ((L, 4 * L), H + L)
        out["lstm.b"] = ((4 * L,), H + L)
        lin("forecast", L, 3 * h)
        return out

    def init_params(self, seed: int) -> ParamStore:
        rng = np.random.default_rng([int(seed), 7919])
        store = ParamStore()
        for name, (shape, fan_in) in sorted(self.shapes().items()):
            store.add(name, _uniform(rng, fan_in, shape))
        return store

    def zero_params(self) -> ParamStore:
        store = ParamStore()
        for name, (shape, _) in sorted(self.shapes().items()):
            store.add(name, np.zeros(shape))
        return store

    # -- encoders
    def encode_detection(self, p: ParamStore, x) -> Tensor:
        """Two-layer perceptron over the normalized 11-vector (box + score)."""
        return ag.relu(linear(p, "det_bbox.l2", ag.relu(linear(p, "det_bbox.l1", ag.as_tensor(x)))))

    def encode_track(self, p: ParamStore, x) -> Tensor:
        return ag.relu(linear(p, "trk_bbox.l2", ag.relu(linear(p, "trk_bbox.l1", ag.as_tensor(x)))))

    def project_appearance(self, p: ParamStore, a) -> Tensor:
        return linear(p, "app_proj", ag.as_tensor(a))

    # -- message passing
    def _messages(self, p, pre, t, d, e, edge_det, edge_trk):
        tw = ag.matmul(t, p[pre + ".Wt"])
        dw = ag.matmul(d, p[pre + ".Wd"])
        ew = ag.matmul(ag.as_tensor(e), p[pre + ".We"])
        return ag.relu(ag.add(ag.add(ag.add(ag.take_rows(tw, edge_trk), ag.take_rows(dw, edge_det)), ew),
                              p[pre + ".b"]))

    def message_pass(self, p: ParamStore, stream: str, t: Tensor, d: Tensor, e: np.ndarray,
                     edge_det: np.ndarray, edge_trk: np.ndarray) -> tuple[Tensor, Tensor]:
        """R rounds of residual sum (or mean) aggregation over the det-track edges.

        Both directions of a round read the previous round's features. With no
        edges the aggregate is zero and features pass through unchanged.
        """
        K, D = t.data.shape[0], d.data.shape[0]
        mean = self.cfg.aggregation == "mean"
        if mean:
            deg_t = np.maximum(np.bincount(edge_trk, minlength=K), 1).astype(np.float64)[:, None]
            deg_d = np.maximum(np.bincount(edge_det, minlength=D), 1).astype(np.float64)[:, None]
        for r in range(self.cfg.rounds):
            if len(edge_det) == 0:
                break
            m_t = self._messages(p, f"mp{r}.{stream}.to_track", t, d, e, edge_det, edge_trk)
            m_d = self._messages(p, f"mp{r}.{stream}.to_det", t, d, e, edge_det, edge_trk)
            agg_t = ag.segment_sum(m_t, edge_trk, K)
            agg_d = ag.segment_sum(m_d, edge_det, D)
            if mean:
                agg_t = ag.mul(agg_t, 1.0 / deg_t)
                agg_d = ag.mul(agg_d, 1.0 / deg_d)
            t, d = ag.add(t, agg_t), ag.add(d, agg_d)
        return t, d

    # -- heads
    def head(self, p: ParamStore, kind: DecisionKind, x: Tensor, patch=None) -> tuple[Tensor, Tensor]:
        """(aggregate features, scalar scores). ``patch`` = (rows, mask, values)
        overwrites masked entries of the aggregate before the output layer."""
        agg = ag.relu(linear(p, f"head.{kind.value}.agg", x))
        if patch is not None:
            rows, mask, values = patch
            n, width = agg.data.shape
            rows = np.asarray(rows, dtype=np.intp)
            full_mask = np.zeros((n, width), dtype=bool)
            full_mask[rows] = mask
            scattered = ag.segment_sum(ag.as_tensor(values), rows, n)
            agg = ag.where_rows(agg, scattered, full_mask)
        return agg, self.head_output(p, kind, agg)

    def head_output(self, p: ParamStore, kind: DecisionKind, agg: Tensor) -> Tensor:
        out = linear(p, f"head.{kind.value}.out", agg)
        return ag.reshape(out, (out.data.shape[0],))

    def forward(self, p: ParamStore, g: GraphInput, patches: dict | None = None) -> Forward:
        """Scores for every family plus the activation cache.

        ``patches`` maps a registry aggregate name to ``(rows, mask, values)``.
        """
        patches = patches or {}
        db = self.encode_detection(p, g.det_x)
        tb = self.encode_track(p, g.trk_x)
        da = self.project_appearance(p, g.det_app)
        ta = self.project_appearance(p, g.trk_app)
        tb, db = self.message_pass(p, "box", tb, db, g.edge_x[:, :2], g.edge_det, g.edge_trk)
        ta, da = self.message_pass(p, "app", ta, da, g.edge_x[:, 2:], g.edge_det, g.edge_trk)
        cache = {TRACK_BOX_FEATS: tb, TRACK_APP_FEATS: ta, DET_BOX_FEATS: db, DET_APP_FEATS: da}
        x_t = ag.concat([tb, ta, ag.as_tensor(g.trk_aux)], axis=1)
        x_d = ag.concat([db, da, ag.as_tensor(g.det_x[:, BOX_INPUTS - 1:])], axis=1)
        x_p = ag.concat([ag.take_rows(db, g.edge_det), ag.take_rows(da, g.edge_det),
                         ag.take_rows(tb, g.edge_trk), ag.take_rows(ta, g.edge_trk), ag.as_tensor(g.edge_x)],
                        axis=1)
        inputs = {**{k: x_t for k in TRACK_KINDS}, **{k: x_d for k in DETECTION_KINDS},
                  **{k: x_p for k in PAIR_KINDS}}
        scores = {}
        for k in ALL_KINDS:
            name = agg_name(k)
            agg, s = self.head(p, k, inputs[k], patches.get(name))
            cache[name] = agg
            scores[k] = s
        return Forward(scores, cache, g)

    # -- recurrent state and forecasting
    def lstm_step(self, p: ParamStore, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        L = self.cfg.lstm_dim
        z = ag.add(ag.add(ag.matmul(ag.as_tensor(x), p["lstm.Wx"]), ag.matmul(ag.as_tensor(h), p["lstm.Wh"])),
                   p["lstm.b"])
        i = ag.sigmoid(z[:, 0:L])
        f = ag.sigmoid(z[:, L:2 * L])
        gg = ag.tanh(z[:, 2 * L:3 * L])
        o = ag.sigmoid(z[:, 3 * L:4 * L])
        c2 = ag.add(ag.mul(f, c), ag.mul(i, gg))
        h2 = ag.mul(o, ag.tanh(c2))
        return h2, c2

    def forecast_offsets(self, p: ParamStore, h: Tensor) -> Tensor:
        """Learned per-step (dx, dy, dtheta) world-frame offsets, shape N x h x 3."""
        n = h.data.shape[0]
        raw = linear(p, "forecast", ag.as_tensor(h))
        step = self.dt * VEL_SCALE
        scale = np.tile(np.array([step, step, THETA_STEP_SCALE]), self.cfg.horizon)
        return ag.reshape(ag.mul(raw, scale), (n, self.cfg.horizon, 3))

    def prior_offsets(self, vel_world: np.ndarray) -> np.ndarray:
        """Constant-velocity prior, N x h x 3 (zero under ``forecast_prior='none'``)."""
        vel_world = np.asarray(vel_world, dtype=np.float64).reshape(-1, 2)
        out = np.zeros((len(vel_world), self.cfg.horizon, 3))
        if self.forecast_prior == "constant_velocity":
            out[:, :, 0] = vel_world[:, :1] * self.dt
            out[:, :, 1] = vel_world[:, 1:] * self.dt
        return out


def accumulate_poses(start: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """pose_k = pose_{k-1} + offset_k from ``start`` (N x 3); returns N x h x 3."""
    return np.asarray(start)[:, None, :] + np.cumsum(offsets, axis=1)


# ------------------------------------------------------------------ track state

@dataclass
class TrackNetState:
    """Runtime state of one track (world-frame boxes)."""

    identity: int
    hidden: np.ndarray
    cell: np.ndarray
    feature: np.ndarray
    boxes: list
    forecast: np.ndarray  # h x 3 cumulative world poses from the last box
    appearance: np.ndarray
    score: float
    coasted: int = 0

    @property
    def last_box(self) -> OrientedBox:
        return self.boxes[-1]


def update_track_state(net: TrackerNet, p: ParamStore, state: TrackNetState | None, identity: int,
                       det_feature: np.ndarray, box_world: OrientedBox, appearance: np.ndarray,
                       score: float) -> TrackNetState:
    """One recurrent step with a matched (or newborn) detection's encoding."""
    L = net.cfg.lstm_dim
    det_feature = np.asarray(det_feature, dtype=np.float64).reshape(1, -1)
    if det_feature.shape[1] != net.cfg.hidden_dim:
        raise ValueError(f"feature dim {det_feature.shape[1]} != {net.cfg.hidden_dim}")
    h0 = np.zeros((1, L)) if state is None else state.hidden.reshape(1, L)
    c0 = np.zeros((1, L)) if state is None else state.cell.reshape(1, L)
    h, c = net.lstm_step(p, det_feature, h0, c0)
    off = net.forecast_offsets(p, h).data + net.prior_offsets(np.array([[box_world.vx, box_world.vy]]))
    start = np.array([[box_world.x, box_world.y, box_world.theta]])
    fc = accumulate_poses(start, off)[0]
    boxes = ([] if state is None else list(state.boxes)) + [box_world]
    return TrackNetState(identity, h.data[0], c.data[0], det_feature[0], boxes, fc, np.asarray(appearance),
                         float(score), 0)
