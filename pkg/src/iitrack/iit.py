"""Interchange intervention training.

An alignment map ties SCM nodes to column ranges of the decision heads'
aggregate features. Training pairs (base, source) are drawn from oracle
frames; the SCM's interchange gives the counterfactual label and the network
is asked to produce the same decision after the aligned columns of the base
subject are overwritten with the source subject's.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import scms
from .assignment import margin_index
from .autograd import Tensor
from .config import RunConfig, ScmConfig, TrainConfig
from .decisions import ALL_KINDS, DETECTION_KINDS, TRACK_KINDS, DecisionKind
from .frames import FrameRecord
from .net import REGISTRY, Forward, GraphInput, ParamStore, TrackerNet, agg_name, batch_graphs, optimizer_step
from .prepare import OracleFrame, oracle_frame, teacher_forced
from .scm import interchange
from .sim import oracle_detection_inputs, oracle_track_inputs

PRED = scms.PRED_BOX


class TrainingDiverged(FloatingPointError):
    pass


def side_of(kind: DecisionKind) -> str:
    kind = DecisionKind(kind)
    if kind in TRACK_KINDS:
        return "track"
    if kind in DETECTION_KINDS:
        return "det"
    return "pair"


# ------------------------------------------------------------------ alignment

@dataclass(frozen=True)
class SliceRef:
    name: str
    start: int
    stop: int

    @property
    def width(self) -> int:
        return self.stop - self.start

    def mask(self, hidden_dim: int) -> np.ndarray:
        m = np.zeros(hidden_dim, dtype=bool)
        m[self.start:self.stop] = True
        return m


class AlignmentMap:
    """Per decision kind: SCM node name -> activation slice."""

    def __init__(self, table: dict):
        self.table = {DecisionKind(k): dict(v) for k, v in table.items()}

    def kinds(self) -> list[DecisionKind]:
        return [k for k in ALL_KINDS if k in self.table]

    def nodes(self, kind: DecisionKind) -> list[str]:
        return list(self.table.get(DecisionKind(kind), {}))

    def slice(self, kind: DecisionKind, node: str) -> SliceRef:
        return self.table[DecisionKind(kind)][node]

    def items(self):
        for k in self.kinds():
            for n, s in self.table[k].items():
                yield k, n, s

    def validate(self, hidden_dim: int, matches_any: str = "or") -> None:
        for kind, node, s in self.items():
            if s.name not in REGISTRY:
                raise KeyError(f"{s.name!r} is not an activation name")
            if not 0 <= s.start < s.stop <= hidden_dim:
                raise ValueError(f"slice {s} outside [0, {hidden_dim})")
            if node not in scms.build_scm(kind, matches_any):
                raise KeyError(f"{node!r} is not a node of the {kind.value} SCM")
        for kind in self.kinds():
            boolean = [self.table[kind][n] for n in self.nodes(kind) if n != PRED]
            for i, a in enumerate(boolean):
                for b in boolean[i + 1:]:
                    if a.name == b.name and a.start < b.stop and b.start < a.stop:
                        raise ValueError(f"{kind.value}: slices {a} and {b} overlap")


def default_alignment(hidden_dim: int, matches_any: str = "or") -> AlignmentMap:
    """Quarters of each head's aggregate features.

    Track heads: q0 = Is Occluded, q1 = Is Out of Range, q2 = Matches BBOX,
    q3 = Matches Appearance; the predicted box spans the two geometric
    quarters it drives (q0..q1, only q1 for the out-of-range head).
    Detection heads: q0 = Appearance Valid, q1 = BBOX Valid, q2 = Matches Any
    Track. Pair heads: the first half carries the single match node.
    """
    q = hidden_dim // 4
    table: dict = {}
    for kind in TRACK_KINDS:
        name = agg_name(kind)
        parents = scms.boolean_intermediates(kind, matches_any)
        quarter = {scms.OCCLUDED: 0, scms.OUT_OF_RANGE: 1, scms.MATCH_BOX: 2, scms.MATCH_APP: 3}
        entry = {PRED: SliceRef(name, 0 if scms.OCCLUDED in parents else q, 2 * q)}
        for node in parents:
            entry[node] = SliceRef(name, quarter[node] * q, (quarter[node] + 1) * q)
        table[kind] = entry
    for kind in DETECTION_KINDS:
        name = agg_name(kind)
        quarter = {scms.APP_VALID: 0, scms.BOX_VALID: 1, scms.MATCH_TRACK: 2}
        table[kind] = {n: SliceRef(name, quarter[n] * q, (quarter[n] + 1) * q)
                       for n in scms.boolean_intermediates(kind, matches_any)}
    table[DecisionKind.APPEARANCE_MATCH] = {scms.MATCH_APP: SliceRef(agg_name(DecisionKind.APPEARANCE_MATCH), 0, 2 * q)}
    table[DecisionKind.BBOX_MATCH] = {scms.MATCH_BOX: SliceRef(agg_name(DecisionKind.BBOX_MATCH), 0, 2 * q)}
    amap = AlignmentMap(table)
    amap.validate(hidden_dim, matches_any)
    return amap


# ------------------------------------------------------------------ frame bank

class FrameBank:
    """Oracle frames addressable by position, with per-subject SCM access."""

    def __init__(self, dataset: Sequence[Sequence[FrameRecord]], scm: ScmConfig,
                 seq_ids: Sequence[int] | None = None, oracle: dict | None = None):
        ids = list(range(len(dataset)) if seq_ids is None else seq_ids)
        self.scm = scm
        self.keys: list[tuple[int, int]] = []
        self.frames: list[FrameRecord] = []
        self.prev: list[FrameRecord | None] = []
        self.oracle: list[OracleFrame] = []
        for s in ids:
            prev = None
            for t, fr in enumerate(dataset[s]):
                self.keys.append((s, t))
                self.frames.append(fr)
                self.prev.append(prev)
                self.oracle.append(oracle[(s, t)] if oracle and (s, t) in oracle else oracle_frame(fr, prev, scm))
                prev = fr
        self.index = {k: i for i, k in enumerate(self.keys)}

    def __len__(self) -> int:
        return len(self.frames)

    def n_subjects(self, kind: DecisionKind, f: int) -> int:
        d, k = len(self.frames[f].detections), len(self.frames[f].live_tracks)
        return {"track": k, "det": d, "pair": d * k}[side_of(kind)]

    def scm_inputs(self, kind: DecisionKind, f: int, local: int) -> scms.ScmInputs:
        fr, side = self.frames[f], side_of(kind)
        if side == "det":
            return oracle_detection_inputs(fr, local, self.scm)
        k = len(fr.live_tracks)
        if side == "track":
            return oracle_track_inputs(fr, self.prev[f], fr.live_tracks[local], self.scm)
        i, j = divmod(local, k)
        return oracle_track_inputs(fr, self.prev[f], fr.live_tracks[j], self.scm, detection_index=i)

    def node_values(self, kind: DecisionKind, node: str, f: int) -> np.ndarray:
        """Oracle values of a boolean node for every subject of the frame."""
        o = self.oracle[f]
        side = side_of(kind)
        if side == "track":
            return {scms.OCCLUDED: o.occluded, scms.OUT_OF_RANGE: o.out_of_range, scms.MATCH_APP: o.track_ma,
                    scms.MATCH_BOX: o.track_mb}[node]
        if side == "det":
            return {scms.APP_VALID: o.app_valid, scms.BOX_VALID: o.box_valid, scms.MATCH_TRACK: o.matches_track}[node]
        return {scms.MATCH_APP: o.pair_ma, scms.MATCH_BOX: o.pair_mb}[node]

    def assignment(self, kind: DecisionKind, f: int, local: int) -> dict:
        return scms.assignment(kind, self.scm_inputs(kind, f, local), self.scm.matches_any)


# ------------------------------------------------------------------ pairs

@dataclass(frozen=True)
class InterventionPair:
    kind: DecisionKind
    base: tuple[int, int]    # (frame position, local subject index)
    source: tuple[int, int]
    nodes: tuple[str, ...]

    def __post_init__(self):
        if self.base == self.source:
            raise ValueError("base and source must differ")


def sample_pairs(bank: FrameBank, kind: DecisionKind, count: int, rng: np.random.Generator,
                 within_ratio: float = 0.5, nodes: Sequence[str] | None = None) -> list[InterventionPair]:
    """Uniform ordered (base, source) pairs; with probability ``within_ratio``
    the pair is drawn uniformly from same-frame pairs, otherwise uniformly
    from all pairs."""
    if count == 0:
        return []
    kind = DecisionKind(kind)
    nodes = tuple(nodes) if nodes is not None else (scms.boolean_intermediates(kind, bank.scm.matches_any)[0],)
    sizes = np.array([bank.n_subjects(kind, f) for f in range(len(bank))], dtype=np.int64)
    total = int(sizes.sum())
    if total < 2:
        raise ValueError(f"fewer than two eligible subjects for {kind.value}")
    within_w = sizes * (sizes - 1)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    out = []
    for _ in range(count):
        if within_w.sum() > 0 and rng.random() < within_ratio:
            f = int(rng.choice(len(sizes), p=within_w / within_w.sum()))
            a, b = rng.choice(int(sizes[f]), size=2, replace=False)
            out.append(InterventionPair(kind, (f, int(a)), (f, int(b)), nodes))
        else:
            a, b = rng.choice(total, size=2, replace=False)
            fa = int(np.searchsorted(starts, a, side="right") - 1)
            fb = int(np.searchsorted(starts, b, side="right") - 1)
            out.append(InterventionPair(kind, (fa, int(a - starts[fa])), (fb, int(b - starts[fb])), nodes))
    return out


def counterfactual_label(kind: DecisionKind, base: scms.ScmInputs, source: scms.ScmInputs,
                         nodes: Sequence[str], matches_any: str = "or") -> bool:
    graph = scms.build_scm(kind, matches_any)
    return bool(interchange(graph, scms.assignment(kind, base, matches_any),
                            scms.assignment(kind, source, matches_any), list(nodes)))


def pair_label(bank: FrameBank, pair: InterventionPair) -> bool:
    return counterfactual_label(pair.kind, bank.scm_inputs(pair.kind, *pair.base),
                                bank.scm_inputs(pair.kind, *pair.source), pair.nodes, bank.scm.matches_any)


@dataclass
class PairPool:
    kind: DecisionKind
    node: str
    pairs: list
    labels: np.ndarray
    factual: np.ndarray

    def __len__(self) -> int:
        return len(self.pairs)


def _subject_table(bank: FrameBank, kind: DecisionKind):
    parents, eq = scms.output_equation(kind, bank.scm.matches_any)
    rows = []
    for f in range(len(bank)):
        n = bank.n_subjects(kind, f)
        if n == 0:
            continue
        vals = {p: bank.node_values(kind, p, f) for p in parents}
        for local in range(n):
            rows.append((f, local, {p: bool(vals[p][local]) for p in parents}))
    return parents, eq, rows


def balanced_pool(bank: FrameBank, kind: DecisionKind, node: str, per_label: int, rng: np.random.Generator,
                  within_ratio: float = 0.5) -> PairPool:
    """Pairs whose counterfactual labels are balanced (``per_label`` each),
    split evenly across the base's factual label where the data allows.

    Boolean nodes are intervened from any frame; the predicted box only
    within a frame, since its occlusion reading is tied to the frame's grid.
    """
    kind = DecisionKind(kind)
    parents, eq, rows = _subject_table(bank, kind)
    picked: list[tuple[InterventionPair, bool, bool]] = []
    if node == PRED:
        candidates = []
        by_frame: dict[int, list[int]] = {}
        for r, (f, _, _) in enumerate(rows):
            by_frame.setdefault(f, []).append(r)
        for f, rs in by_frame.items():
            for a in rs:
                for b in rs:
                    if a != b:
                        candidates.append((a, b))
        cells: dict[tuple[bool, bool], list] = {}
        for a, b in candidates:
            fa, la, va = rows[a]
            pair = InterventionPair(kind, (fa, la), (rows[b][0], rows[b][1]), (node,))
            cells.setdefault((eq(*[va[p] for p in parents]), pair_label(bank, pair)), []).append(pair)
        for c in (False, True):
            want = per_label
            groups = [cells.get((f, c), []) for f in (False, True)]
            quota = _split_quota(want, [len(g) for g in groups])
            for fac, g, q in zip((False, True), groups, quota):
                for idx in rng.permutation(len(g))[:q]:
                    picked.append((g[int(idx)], c, fac))
    else:
        by_value: dict[bool, list[int]] = {False: [], True: []}
        by_frame_value: dict[tuple[int, bool], list[int]] = {}
        for r, (f, _, v) in enumerate(rows):
            by_value[v[node]].append(r)
            by_frame_value.setdefault((f, v[node]), []).append(r)
        options: dict[tuple[bool, bool], list[tuple[int, bool]]] = {}
        for r, (_, _, v) in enumerate(rows):
            fac = eq(*[v[p] for p in parents])
            for val in (False, True):
                if any(x != r for x in by_value[val][:2]):
                    cf = eq(*[val if p == node else v[p] for p in parents])
                    options.setdefault((fac, cf), []).append((r, val))
        for c in (False, True):
            groups = [options.get((f, c), []) for f in (False, True)]
            quota = _split_quota(per_label, [len(g) and per_label for g in groups])
            for fac, g, q in zip((False, True), groups, quota):
                for _ in range(q if g else 0):
                    r, val = g[int(rng.integers(len(g)))]
                    f, local, _ = rows[r]
                    same = [x for x in by_frame_value.get((f, val), []) if x != r]
                    if same and rng.random() < within_ratio:
                        s = same[int(rng.integers(len(same)))]
                    else:
                        pool = by_value[val]
                        s = pool[int(rng.integers(len(pool)))]
                        while s == r:
                            s = pool[int(rng.integers(len(pool)))]
                    pair = InterventionPair(kind, (f, local), (rows[s][0], rows[s][1]), (node,))
                    label = pair_label(bank, pair)
                    if label != c:
                        raise AssertionError(f"pool construction disagrees with interchange for {pair}")
                    picked.append((pair, c, fac))
    # balance exactly on the counterfactual label
    n_true = sum(1 for _, c, _ in picked if c)
    n = min(n_true, len(picked) - n_true)
    keep, seen = [], {False: 0, True: 0}
    for item in picked:
        if seen[item[1]] < n:
            keep.append(item)
            seen[item[1]] += 1
    order = rng.permutation(len(keep))
    keep = [keep[int(i)] for i in order]
    return PairPool(kind, node, [k[0] for k in keep], np.array([k[1] for k in keep], dtype=bool),
                    np.array([k[2] for k in keep], dtype=bool))


def _split_quota(total: int, capacity: Sequence[int]) -> list[int]:
    """Split ``total`` evenly over groups, moving the share of a group that
    cannot supply it to the others."""
    n = len(capacity)
    quota = [0] * n
    remaining = total
    open_ = [i for i in range(n) if capacity[i] > 0]
    while remaining > 0 and open_:
        share = max(1, remaining // len(open_))
        nxt = []
        for i in open_:
            take = min(share, capacity[i] - quota[i], remaining)
            quota[i] += take
            remaining -= take
            if quota[i] < capacity[i]:
                nxt.append(i)
        open_ = nxt
    return quota


def build_pools(bank: FrameBank, alignment: AlignmentMap, per_label: int, rng: np.random.Generator,
                within_ratio: float = 0.5) -> dict:
    pools = {}
    for kind, node, _ in alignment.items():
        pool = balanced_pool(bank, kind, node, per_label, rng, within_ratio)
        if len(pool):
            pools[(kind, node)] = pool
    return pools


# ------------------------------------------------------------------ network side

@dataclass
class BatchLayout:
    """Where each frame of a stacked graph starts in every score family."""

    positions: dict
    od: np.ndarray
    ok: np.ndarray
    oe: np.ndarray
    n_trk: list

    def row(self, kind: DecisionKind, f: int, local: int) -> int:
        pos = self.positions[f]
        side = side_of(kind)
        if side == "track":
            return int(self.ok[pos] + local)
        if side == "det":
            return int(self.od[pos] + local)
        return int(self.oe[pos] + local)


def stack_frames(graphs: dict) -> tuple[GraphInput, BatchLayout]:
    """``graphs`` maps a frame position to its graph; order is insertion order."""
    keys = list(graphs)
    g = batch_graphs([graphs[k] for k in keys])
    od, ok, oe = g.offsets()
    return g, BatchLayout({k: i for i, k in enumerate(keys)}, od, ok, oe, g.n_trk)


def counterfactual_scores(net: TrackerNet, p: ParamStore, fw: Forward, layout: BatchLayout,
                          pairs: Sequence[InterventionPair], alignment: AlignmentMap) -> Tensor:
    """Scores after overwriting each base subject's aligned columns with the
    source subject's; gradients reach both runs."""
    H = net.cfg.hidden_dim
    out = []
    for kind in ALL_KINDS:
        sel = [pr for pr in pairs if pr.kind is kind]
        if not sel:
            continue
        agg = fw.cache[agg_name(kind)]
        base_rows = np.array([layout.row(kind, *pr.base) for pr in sel], dtype=np.intp)
        src_rows = np.array([layout.row(kind, *pr.source) for pr in sel], dtype=np.intp)
        mask = np.zeros((len(sel), H), dtype=bool)
        for n, pr in enumerate(sel):
            for node in pr.nodes:
                s = alignment.slice(kind, node)
                if s.name != agg_name(kind):
                    raise ValueError(f"{s.name} is not the {kind.value} aggregate")
                mask[n, s.start:s.stop] = True
        mixed = ag.where_rows(ag.take_rows(agg, base_rows), ag.take_rows(agg, src_rows), mask)
        out.append((sel, net.head_output(p, kind, mixed)))
    if not out:
        return Tensor(np.zeros(0))
    # scores were grouped by kind; put them back in the caller's pair order
    grouped = [n for kind in ALL_KINDS for n, pr in enumerate(pairs) if pr.kind is kind]
    back = np.empty(len(pairs), dtype=np.intp)
    back[np.array(grouped, dtype=np.intp)] = np.arange(len(pairs))
    return ag.take_rows(ag.concat([s for _, s in out], axis=0), back)


def interchange_forward(net: TrackerNet, p: ParamStore, base_graph: GraphInput, base_local: int,
                        source_graph: GraphInput, source_local: int, alignment: AlignmentMap,
                        kind: DecisionKind, nodes: Sequence[str]):
    """Two-pass interchange: capture the source subject's aligned slices, then
    rerun the base with them patched in. Returns (score, base forward)."""
    kind = DecisionKind(kind)
    name = agg_name(kind)
    src = net.forward(p, source_graph)
    H = net.cfg.hidden_dim
    mask = np.zeros((1, H), dtype=bool)
    for node in nodes:
        s = alignment.slice(kind, node)
        if s.name != name:
            raise ValueError(f"{s.name} is not the {kind.value} aggregate")
        mask[0, s.start:s.stop] = True
    values = ag.take_rows(src.cache[name], np.array([source_local], dtype=np.intp))
    if values.data.shape != (1, H):
        raise ValueError("slice shape mismatch")
    fw = net.forward(p, base_graph, {name: (np.array([base_local]), mask, values)})
    return fw.scores[kind][base_local], fw


def iit_loss(scores, labels, margin: float):
    """Mean hinge max(0, m - y * score) with y = +1 for a true label, -1 otherwise."""
    y = np.where(np.asarray(labels, dtype=bool), 1.0, -1.0)
    if isinstance(scores, Tensor):
        if len(y) == 0:
            return Tensor(np.asarray(0.0))
        return ag.mul(ag.sum_all(ag.relu(ag.add(ag.neg(ag.mul(scores, y)), margin))), 1.0 / len(y))
    s = np.asarray(scores, dtype=np.float64)
    return float(np.mean(np.maximum(0.0, margin - y * s))) if len(y) else 0.0


# ------------------------------------------------------------------ probes

class ProbeSet:
    """Linear read-outs from aligned slices: one scalar per boolean node
    (positive = true) and (x, y) / r_max for the predicted box."""

    def __init__(self, alignment: AlignmentMap, seed: int = 0, store: ParamStore | None = None):
        self.alignment = alignment
        if store is None:
            rng = np.random.default_rng([int(seed), 104729])
            store = ParamStore()
            for kind, node, s in alignment.items():
                out = 2 if node == PRED else 1
                bound = 1.0 / math.sqrt(s.width)
                store.add(self.key(kind, node) + ".W", rng.uniform(-bound, bound, (s.width, out)))
                store.add(self.key(kind, node) + ".b", np.zeros(out))
        self.store = store
        self.trained = False

    @staticmethod
    def key(kind: DecisionKind, node: str) -> str:
        return f"probe.{DecisionKind(kind).value}.{node}"

    def apply(self, kind: DecisionKind, node: str, x) -> Tensor:
        k = self.key(kind, node)
        out = ag.add(ag.matmul(ag.as_tensor(x), self.store[k + ".W"]), self.store[k + ".b"])
        return out if node == PRED else ag.reshape(out, (out.data.shape[0],))

    def read(self, kind: DecisionKind, node: str, agg: np.ndarray):
        """Probed value(s) from aggregate rows (numpy in, numpy out)."""
        s = self.alignment.slice(kind, node)
        v = self.apply(kind, node, np.atleast_2d(agg)[:, s.start:s.stop]).data
        return v if node == PRED else v > 0.0


def probe_targets(bank: FrameBank, f: int, kind: DecisionKind, node: str) -> np.ndarray:
    if node == PRED:
        return bank.oracle[f].pred_xy
    return bank.node_values(kind, node, f)


def probe_loss(cache: dict, rows: dict, targets: dict, probes: ProbeSet, margin: float = 1.0) -> Tensor:
    """Mean over aligned nodes of the probe's loss on its (detached) slice.

    ``rows[(kind, node)]`` are cache rows, ``targets[(kind, node)]`` the oracle
    values: booleans use a hinge with ``margin``, the box a squared error.
    """
    terms = []
    for key, r in rows.items():
        if len(r) == 0:
            continue
        kind, node = key
        s = probes.alignment.slice(kind, node)
        x = ag.detach(ag.take_rows(cache[s.name], r))
        x = Tensor(x.data[:, s.start:s.stop])
        out = probes.apply(kind, node, x)
        tgt = targets[key]
        if node == PRED:
            diff = ag.add(out, -np.asarray(tgt, dtype=np.float64))
            terms.append(ag.mul(ag.sum_all(ag.mul(diff, diff)), 1.0 / len(r)))
        else:
            y = np.where(np.asarray(tgt, dtype=bool), 1.0, -1.0)
            terms.append(ag.mul(ag.sum_all(ag.relu(ag.add(ag.neg(ag.mul(out, y)), margin))), 1.0 / len(r)))
    if not terms:
        return Tensor(np.asarray(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    return ag.mul(total, 1.0 / len(terms))


# ------------------------------------------------------------------ task + forecast losses

def task_loss(fw: Forward, layout: BatchLayout, frames: Sequence[tuple[int, tuple]], margin: float) -> Tensor:
    """Margin loss averaged over all subjects of ``frames`` = [(position, margin index)]."""
    fo = fw.family_offsets()
    flat = fw.flat()
    good, bad = [], []
    n_subjects = 0
    for f, (_, cf, cl, wf, wl, n) in frames:
        pos = layout.positions[f]
        base = np.array([layout.oe[pos], layout.oe[pos], layout.od[pos], layout.od[pos],
                         layout.ok[pos], layout.ok[pos], layout.ok[pos]])
        off = np.asarray(fo) + base
        good.append(off[cf] + cl)
        bad.append(off[wf] + wl)
        n_subjects += n
    if n_subjects == 0:
        return Tensor(np.asarray(0.0))
    g = np.concatenate(good).astype(np.intp)
    b = np.concatenate(bad).astype(np.intp)
    gap = ag.add(ag.take_rows(flat, g), ag.neg(ag.take_rows(flat, b)))
    return ag.mul(ag.sum_all(ag.relu(ag.add(ag.neg(gap), margin))), 1.0 / n_subjects)


def _cumulative_matrix(h: int) -> np.ndarray:
    c = np.zeros((3 * h, 3 * h))
    for m in range(h):
        for k in range(m, h):
            for ch in range(3):
                c[3 * m + ch, 3 * k + ch] = 1.0
    return c


def forecast_loss(net: TrackerNet, p: ParamStore, events: Sequence) -> Tensor:
    """Squared world-position error over the available future steps, in units
    of the distance covered at 15 m/s in one step; one recurrent step is
    differentiated (the stored state before the update is a constant)."""
    events = [e for e in events if e.mask.any()]
    if not events:
        return Tensor(np.asarray(0.0))
    h = net.cfg.horizon
    hid = np.array([e.hidden for e in events])
    cel = np.array([e.cell for e in events])
    x = np.array([e.det_x for e in events])
    feats = net.encode_detection(p, x)
    hn, _ = net.lstm_step(p, feats, hid, cel)
    off = ag.reshape(net.forecast_offsets(p, hn), (len(events), 3 * h))
    cum = ag.matmul(off, _cumulative_matrix(h))
    prior = np.cumsum(net.prior_offsets(np.array([e.velocity for e in events])), axis=1).reshape(len(events), 3 * h)
    start = np.tile(np.array([e.start for e in events]), (1, h))
    pred = ag.add(cum, prior + start)
    target = start.copy()
    weight = np.zeros((len(events), 3 * h))
    for n, e in enumerate(events):
        for k in range(h):
            if e.mask[k]:
                target[n, 3 * k:3 * k + 2] = e.target[k]
                weight[n, 3 * k:3 * k + 2] = 1.0
    scale = 1.0 / (VEL_STEP * net.dt)
    diff = ag.mul(ag.add(pred, -target), weight * scale)
    return ag.mul(ag.sum_all(ag.mul(diff, diff)), 1.0 / (weight.sum() / 2.0))


VEL_STEP = 15.0


# ------------------------------------------------------------------ training

@dataclass
class TraceRow:
    epoch: int
    step: int
    task: float
    iit: float
    probe: float
    forecast: float
    total: float

    FIELDS = ("epoch", "step", "task", "iit", "probe", "forecast", "total")

    def to_line(self) -> str:
        return "\t".join([str(self.epoch), str(self.step)] + [repr(float(getattr(self, k)))
                                                              for k in self.FIELDS[2:]])


def write_trace(path, rows: Sequence[TraceRow], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        if not append:
            fh.write("\t".join(TraceRow.FIELDS) + "\n")
        for r in rows:
            fh.write(r.to_line() + "\n")


def read_trace(path) -> list[TraceRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            v = line.rstrip("\n").split("\t")
            rows.append(TraceRow(int(v[0]), int(v[1]), *map(float, v[2:])))
    return rows


def split_sequences(n: int, holdout_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic (train, held-out) split of sequence indices."""
    order = np.random.default_rng([int(seed), 31337]).permutation(n)
    n_hold = int(round(n * holdout_fraction))
    if n > 1:
        n_hold = min(max(n_hold, 1 if holdout_fraction > 0 else 0), n - 1)
    hold = sorted(int(i) for i in order[:n_hold])
    train = sorted(int(i) for i in order[n_hold:])
    return train, hold


@dataclass
class TrainState:
    params: ParamStore
    probes: ProbeSet
    epoch: int = 0
    step: int = 0
    trace: list = field(default_factory=list)


@dataclass
class TrainResult:
    net: TrackerNet
    params: ParamStore
    probes: ProbeSet
    trace: list
    train_ids: list
    holdout_ids: list
    alignment: AlignmentMap
    epoch: int
    step: int
    seconds: float = 0.0


def make_net(cfg: RunConfig) -> TrackerNet:
    return TrackerNet(cfg.net, cfg.scm.r_max, cfg.world.dt)


class Trainer:
    """Seeded training loop over a fixed dataset split."""

    def __init__(self, cfg: RunConfig, dataset: Sequence[Sequence[FrameRecord]],
                 train_ids: Sequence[int] | None = None, log: Callable[[str], None] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.tc: TrainConfig = cfg.train
        self.dataset = dataset
        if train_ids is None:
            train_ids, hold = split_sequences(len(dataset), self.tc.holdout_fraction, self.tc.seed)
        else:
            hold = [i for i in range(len(dataset)) if i not in set(train_ids)]
        self.train_ids, self.holdout_ids = list(train_ids), list(hold)
        self.net = make_net(cfg)
        self.alignment = default_alignment(cfg.net.hidden_dim, cfg.scm.matches_any)
        self.bank = FrameBank(dataset, cfg.scm, self.train_ids)
        self.log = log or (lambda msg: None)
        self.margin_idx = {}
        for f, fr in enumerate(self.bank.frames):
            self.margin_idx[f] = margin_index(len(fr.detections), len(fr.live_tracks), fr.labels, fr.live_tracks)
        self.active = [f for f in range(len(self.bank)) if self.margin_idx[f][5] > 0]
        self.pools = {}
        if self.tc.w_iit > 0:
            self.pools = build_pools(self.bank, self.alignment, self.tc.pool_per_label,
                                     np.random.default_rng([self.tc.seed, 2]), self.tc.within_frame_ratio)
        self.pool_keys = list(self.pools)
        self.probe_keys = [(k, n) for k, n, _ in self.alignment.items()]

    def init_state(self) -> TrainState:
        return TrainState(self.net.init_params(self.tc.seed), ProbeSet(self.alignment, self.tc.seed))

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.active) / self.tc.frames_per_step)

    def _probe_batch(self, layout: BatchLayout, frames: Sequence[int]):
        rows, targets = {}, {}
        for key in self.probe_keys:
            kind, node = key
            r, t = [], []
            for f in frames:
                n = self.bank.n_subjects(kind, f)
                if n == 0:
                    continue
                base = layout.row(kind, f, 0)
                r.append(np.arange(base, base + n))
                t.append(probe_targets(self.bank, f, kind, node))
            if r:
                rows[key] = np.concatenate(r).astype(np.intp)
                targets[key] = np.concatenate(t)
        return rows, targets

    def losses(self, state: TrainState, prepared: dict, frames: Sequence[int],
               pairs: Sequence[InterventionPair], labels: np.ndarray) -> tuple[Tensor, dict]:
        """Weighted total loss of one step and its unweighted parts."""
        tc = self.tc
        graphs = {f: prepared[f].graph for f in frames}
        for pr in pairs:
            for f in (pr.base[0], pr.source[0]):
                if f not in graphs:
                    graphs[f] = prepared[f].graph
        g, layout = stack_frames(graphs)
        p = state.params
        fw = self.net.forward(p, g)
        parts = {"task": task_loss(fw, layout, [(f, self.margin_idx[f]) for f in frames], tc.margin)}
        total = ag.mul(parts["task"], tc.w_task)
        if tc.w_iit > 0 and pairs:
            cf = counterfactual_scores(self.net, p, fw, layout, pairs, self.alignment)
            parts["iit"] = iit_loss(cf, labels, tc.margin)
            total = ag.add(total, ag.mul(parts["iit"], tc.w_iit))
        if tc.w_probe > 0:
            rows, targets = self._probe_batch(layout, frames)
            parts["probe"] = probe_loss(fw.cache, rows, targets, state.probes, tc.probe_margin)
            total = ag.add(total, ag.mul(parts["probe"], tc.w_probe))
        if tc.w_forecast > 0:
            events = [e for f in frames for e in prepared[f].events]
            parts["forecast"] = forecast_loss(self.net, p, events)
            total = ag.add(total, ag.mul(parts["forecast"], tc.w_forecast))
        return total, parts

    def step(self, state: TrainState, prepared: dict, frames: Sequence[int], pairs: Sequence[InterventionPair],
             labels: np.ndarray) -> dict:
        tc = self.tc
        total, parts = self.losses(state, prepared, frames, pairs, labels)
        p = state.params
        value = float(total.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {state.step}")
        p.zero_grad()
        state.probes.store.zero_grad()
        ag.backward(total)
        optimizer_step(p, tc.lr, tc.optimizer, tc.momentum)
        optimizer_step(state.probes.store, tc.lr, tc.optimizer, tc.momentum)
        state.step += 1
        out = {k: float(v.data) for k, v in parts.items()}
        out["total"] = value
        return out

    def prepare(self, state: TrainState) -> dict:
        """Teacher-forced network inputs for every training frame, by bank position."""
        prepared = {}
        for seq in teacher_forced(self.net, state.params, self.dataset, self.train_ids):
            for pf in seq:
                prepared[self.bank.index[(pf.seq, pf.t)]] = pf
        return prepared

    def epoch(self, state: TrainState) -> TraceRow:
        tc = self.tc
        epoch = state.epoch
        prepared = self.prepare(state)
        order_rng = np.random.default_rng([tc.seed, epoch, 0])
        pair_rng = np.random.default_rng([tc.seed, epoch, 1])
        order = [self.active[int(i)] for i in order_rng.permutation(len(self.active))]
        sums = {k: 0.0 for k in TraceRow.FIELDS[2:]}
        n_steps = 0
        for s in range(0, len(order), tc.frames_per_step):
            frames = order[s:s + tc.frames_per_step]
            pairs, labels = [], []
            if self.pool_keys:
                for b in range(tc.batch_size):
                    key = self.pool_keys[(state.step * tc.batch_size + b) % len(self.pool_keys)]
                    pool = self.pools[key]
                    i = int(pair_rng.integers(len(pool)))
                    pairs.append(pool.pairs[i])
                    labels.append(bool(pool.labels[i]))
            parts = self.step(state, prepared, frames, pairs, np.array(labels, dtype=bool))
            for k, v in parts.items():
                sums[k] += v
            n_steps += 1
        state.epoch += 1
        state.probes.trained = True
        row = TraceRow(state.epoch, state.step, *[sums[k] / max(n_steps, 1) for k in TraceRow.FIELDS[2:]])
        state.trace.append(row)
        self.log(f"epoch {row.epoch} step {row.step} task {row.task:.4f} iit {row.iit:.4f} "
                 f"probe {row.probe:.4f} forecast {row.forecast:.4f} total {row.total:.4f}")
        return row

    def run(self, state: TrainState | None = None, epochs: int | None = None) -> TrainState:
        state = state or self.init_state()
        target = self.tc.epochs if epochs is None else epochs
        while state.epoch < target:
            self.epoch(state)
        return state


def train(cfg: RunConfig, dataset: Sequence[Sequence[FrameRecord]], state: TrainState | None = None,
          log: Callable[[str], None] | None = None, epochs: int | None = None) -> TrainResult:
    import time

    t0 = time.perf_counter()
    trainer = Trainer(cfg, dataset, log=log)
    state = trainer.run(state, epochs)
    return TrainResult(trainer.net, state.params, state.probes, state.trace, trainer.train_ids,
                       trainer.holdout_ids, trainer.alignment, state.epoch, state.step, time.perf_counter() - t0)
