"""Online tracking, explanation traces, uncertainty flags and metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import scms
from .assignment import MatchResult, ScoreFamilies, decide_frame, decision_correct
from .config import RunConfig, ScmConfig
from .decisions import ALL_KINDS, DET, PAIR_KINDS, TRACK, TRACK_KINDS, DecisionKind, DecisionLabel
from .frames import FrameRecord
from .geometry import ego_to_world
from .iit import PRED, AlignmentMap, FrameBank, PairPool, ProbeSet, build_pools, counterfactual_scores, pair_label, \
    side_of, stack_frames
from .net import Forward, ParamStore, TrackerNet, agg_name
from .prepare import PreparedFrame, TrackMemory, build_graph, predicted_box, teacher_forced
from .sim import oracle_track_inputs


# ------------------------------------------------------------------ explanations

@dataclass(frozen=True)
class ExplainInput:
    """Network-side record of one decision: nothing here comes from ground truth."""

    subject: tuple[str, int]
    kind: DecisionKind
    score: float
    aggregate: np.ndarray  # the decision head's aggregate features for the subject


@dataclass
class ExplanationTrace:
    subject: tuple[str, int]
    kind: DecisionKind
    score: float
    probed: dict
    scm_decision: bool | None
    network_decision: bool
    agreement: bool | None
    probes_trained: bool = True

    def to_dict(self) -> dict:
        probed = {}
        for k, v in self.probed.items():
            if v is None:
                probed[k] = None
            elif isinstance(v, (bool, np.bool_)):
                probed[k] = bool(v)
            else:
                probed[k] = [float(x) for x in np.ravel(v)]
        return {"subject": [self.subject[0], int(self.subject[1])], "kind": self.kind.value,
                "score": float(self.score), "probed": probed,
                "scm_decision": None if self.scm_decision is None else bool(self.scm_decision),
                "network_decision": bool(self.network_decision),
                "agreement": None if self.agreement is None else bool(self.agreement),
                "probes_trained": bool(self.probes_trained)}


def explain(item: ExplainInput, probes: ProbeSet | None, matches_any: str = "or") -> ExplanationTrace:
    """Probe every aligned node of the decision, re-decide with the SCM's
    output equation over the probed booleans and compare with the network
    (score > 0 means the decision holds)."""
    kind = DecisionKind(item.kind)
    network = bool(item.score > 0.0)
    parents, eq = scms.output_equation(kind, matches_any)
    if probes is None or not probes.trained:
        nodes = probes.alignment.nodes(kind) if probes is not None else list(parents)
        return ExplanationTrace(item.subject, kind, item.score, {n: None for n in nodes}, None, network, None, False)
    probed = {}
    for node in probes.alignment.nodes(kind):
        v = probes.read(kind, node, item.aggregate)
        probed[node] = v[0] if node == PRED else bool(v[0])
    decision = bool(eq(*[probed[p] for p in parents]))
    return ExplanationTrace(item.subject, kind, item.score, probed, decision, network, decision == network)


def uncertainty_flag(trace: ExplanationTrace) -> bool:
    """Disagreement between the network and the SCM over probed values (an
    untrained probe set cannot vouch for anything and always flags)."""
    return trace.agreement is not True


# ------------------------------------------------------------------ oracle scorer

def oracle_scores(frame: FrameRecord, prev: FrameRecord | None, track_gids: Sequence[int | None],
                  scm: ScmConfig) -> ScoreFamilies:
    """+1 / -1 scores that reproduce every SCM decision from oracle inputs.

    ``track_gids`` are the ground-truth identities behind the columns; a
    ``None`` column (a track born from clutter) matches nothing.
    """
    d, k = len(frame.detections), len(track_gids)
    mode = scm.matches_any
    s = ScoreFamilies.zeros(d, k)
    sign = lambda b: 1.0 if b else -1.0  # noqa: E731
    dets = tuple(x.box for x in frame.detections)
    live = tuple(g for g in track_gids if g is not None)
    for j, gid in enumerate(track_gids):
        if gid is None or prev is None:
            s.oor[j], s.fpt[j], s.occ[j] = -1.0, 1.0, -1.0
            s.app[:, j] = s.bbox[:, j] = -1.0
            continue
        inp = oracle_track_inputs(frame, prev, gid, scm)
        inp = scms.ScmInputs(**{**inp.__dict__, "oracle": inp.oracle.__class__(
            inp.oracle.detection_identities, inp.oracle.appearance_valid, inp.oracle.bbox_valid, gid, live)})
        v = scms.evaluate(DecisionKind.OCCLUDED_TRACK, inp, matches_any=mode)
        for kind, arr in ((DecisionKind.OCCLUDED_TRACK, s.occ), (DecisionKind.OUT_OF_RANGE_TRACK, s.oor),
                          (DecisionKind.FALSE_POSITIVE_TRACK, s.fpt)):
            parents, eq = scms.output_equation(kind, mode)
            arr[j] = sign(eq(*[v[p] for p in parents]))
        for i in range(d):
            same = frame.association[i] == gid
            s.app[i, j] = sign(same and frame.appearance_valid[i])
            s.bbox[i, j] = sign(scms.matches_bbox(v[scms.PRED_BOX], dets, scm.tau_iou, [i] if same else []) == i)
    for i in range(d):
        av, bv = frame.appearance_valid[i], frame.bbox_valid[i]
        mt = frame.association[i] is not None and frame.association[i] in live
        s.newborn[i] = sign((av or bv) and not mt)
        s.fpdet[i] = sign(not av and not bv)
    return s


# ------------------------------------------------------------------ teacher-forced evaluation

@dataclass
class SubjectRecord:
    seq: int
    t: int
    subject: tuple[str, int]
    kind: DecisionKind
    partner: int | None
    label: DecisionLabel
    correct: bool
    score: float
    trace: ExplanationTrace | None = None

    @property
    def flagged(self) -> bool:
        return self.trace is not None and uncertainty_flag(self.trace)

    def to_dict(self) -> dict:
        d = {"seq": self.seq, "t": self.t, "subject": [self.subject[0], int(self.subject[1])],
             "kind": self.kind.value, "partner": self.partner, "label": self.label.kind.value,
             "label_partner": self.label.partner, "correct": bool(self.correct), "score": float(self.score)}
        if self.trace is not None:
            d["agreement"] = self.trace.agreement
            d["flag"] = uncertainty_flag(self.trace)
        return d


def _frame_records(pf: PreparedFrame, scores: ScoreFamilies, cache: dict | None, result: MatchResult,
                   probes: ProbeSet | None, matches_any: str) -> list[SubjectRecord]:
    k = len(pf.track_ids)
    recs = []
    for side, n in ((DET, scores.D), (TRACK, k)):
        for x in range(n):
            kind, partner = (result.detections if side == DET else result.tracks)[x]
            sid = x if side == DET else pf.track_ids[x]
            label = next(lab for lab in pf.labels if lab.subject == (side, sid))
            if side == DET:
                chosen_partner = None if partner is None else pf.track_ids[partner]
                label_partner = label.partner
                correct = decision_correct((kind, chosen_partner), label, label_partner)
                i, j = x, partner
            else:
                chosen_partner = partner
                correct = decision_correct((kind, partner), label)
                i, j = partner, x
            if kind.is_pair:
                local = i * k + j
                score = float((scores.app if kind is DecisionKind.APPEARANCE_MATCH else scores.bbox)[i, j])
            elif side == DET:
                local = x
                score = float((scores.newborn if kind is DecisionKind.NEWBORN_TRACK else scores.fpdet)[x])
            else:
                local = x
                score = float({DecisionKind.OUT_OF_RANGE_TRACK: scores.oor, DecisionKind.FALSE_POSITIVE_TRACK: scores.fpt,
                               DecisionKind.OCCLUDED_TRACK: scores.occ}[kind][x])
            trace = None
            if cache is not None:
                agg = cache[agg_name(kind)][local]
                trace = explain(ExplainInput((side, sid), kind, score, agg), probes, matches_any)
            recs.append(SubjectRecord(pf.seq, pf.t, (side, sid), kind, chosen_partner, label, correct, score, trace))
    return recs


def evaluate_frames(net: TrackerNet, params: ParamStore, prepared: Sequence[Sequence[PreparedFrame]],
                    probes: ProbeSet | None = None, matches_any: str = "or",
                    scorer: Callable[[PreparedFrame], ScoreFamilies] | None = None,
                    chunk: int = 32) -> list[SubjectRecord]:
    """Hungarian decisions for every prepared frame, one record per subject."""
    flat = [pf for seq in prepared for pf in seq]
    records: list[SubjectRecord] = []
    for s in range(0, len(flat), chunk):
        part = flat[s:s + chunk]
        if scorer is not None:
            per_frame = [(scorer(pf), None) for pf in part]
        else:
            g, layout = stack_frames({n: pf.graph for n, pf in enumerate(part)})
            fw = net.forward(params, g)
            fams = fw.frame_scores()
            per_frame = []
            for n, pf in enumerate(part):
                pos = layout.positions[n]
                d, k = pf.graph.D, pf.graph.K
                cache = {}
                for kind in ALL_KINDS:
                    name = agg_name(kind)
                    side = side_of(kind)
                    lo = {"track": layout.ok, "det": layout.od, "pair": layout.oe}[side][pos]
                    size = {"track": k, "det": d, "pair": d * k}[side]
                    cache[name] = fw.cache[name].data[lo:lo + size]
                per_frame.append((fams[n], cache))
        for pf, (scores, cache) in zip(part, per_frame):
            result = decide_frame(scores)
            if len(result.detections) != scores.D or len(result.tracks) != scores.K:
                raise AssertionError("a subject received no decision or two")
            records.extend(_frame_records(pf, scores, cache, result, probes, matches_any))
    return records


def decision_metrics(records: Sequence[SubjectRecord]) -> dict:
    """Accuracy plus per-kind precision / recall.

    A correct BboxMatch on an admissible pair is credited to the label's kind.
    """
    n = len(records)
    correct = sum(r.correct for r in records)
    per = {}
    for kind in ALL_KINDS:
        labeled = [r for r in records if r.label.kind is kind]
        tp = sum(r.correct for r in labeled)
        predicted = sum(1 for r in records if (r.label.kind if r.correct else r.kind) is kind)
        per[kind.value] = {"precision": tp / predicted if predicted else 1.0,
                           "recall": tp / len(labeled) if labeled else 1.0,
                           "support": len(labeled)}
    return {"accuracy": correct / n if n else 1.0, "n_subjects": n, "per_kind": per}


def flag_metrics(records: Sequence[SubjectRecord]) -> dict:
    flagged = [r for r in records if r.flagged]
    clear = [r for r in records if not r.flagged]
    err = lambda rs: (sum(not r.correct for r in rs) / len(rs)) if rs else 0.0  # noqa: E731
    return {"flag_rate": len(flagged) / len(records) if records else 0.0,
            "flagged_error": err(flagged), "unflagged_error": err(clear),
            "n_flagged": len(flagged), "n_unflagged": len(clear),
            "flagged_wrong": sum(not r.correct for r in flagged),
            "unflagged_wrong": sum(not r.correct for r in clear)}


# ------------------------------------------------------------------ IIA

def network_cf_scorer(net: TrackerNet, params: ParamStore, prepared: dict, alignment: AlignmentMap,
                      chunk: int = 256) -> Callable:
    """Counterfactual network scores for a pair list; ``prepared`` maps a bank
    position to its PreparedFrame."""

    def score(pairs):
        out = []
        for s in range(0, len(pairs), chunk):
            part = pairs[s:s + chunk]
            graphs = {}
            for pr in part:
                for f in (pr.base[0], pr.source[0]):
                    if f not in graphs:
                        graphs[f] = prepared[f].graph
            g, layout = stack_frames(graphs)
            fw = net.forward(params, g)
            out.append(counterfactual_scores(net, params, fw, layout, part, alignment).data)
        return np.concatenate(out) if out else np.zeros(0)
    return score


def oracle_cf_scorer(bank: FrameBank) -> Callable:
    """Scores computed by running the SCM interchange itself."""
    return lambda pairs: np.array([1.0 if pair_label(bank, pr) else -1.0 for pr in pairs])


def compute_iia(score_fn: Callable, pools: dict) -> dict:
    """Fraction of pairs whose counterfactual sign (score > 0) equals the SCM
    label, per kind and averaged over kinds."""
    if not pools or all(len(p) == 0 for p in pools.values()):
        raise ValueError("empty pair set")
    hits: dict = {}
    for (kind, node), pool in pools.items():
        if not len(pool):
            continue
        s = np.asarray(score_fn(pool.pairs))
        ok = (s > 0.0) == pool.labels
        h = hits.setdefault(kind.value, [0, 0])
        h[0] += int(ok.sum())
        h[1] += len(ok)
    per = {k: v[0] / v[1] for k, v in hits.items()}
    return {"per_kind": per, "overall": float(np.mean(list(per.values()))),
            "pairs": int(sum(v[1] for v in hits.values()))}


# ------------------------------------------------------------------ free-running tracker

@dataclass
class LiveTrack:
    track_id: int
    memory: TrackMemory
    gid: int | None  # identity of the birth detection; used by metrics and the oracle scorer only
    coasted: int = 0


@dataclass
class FrameOutcome:
    t: int
    result: MatchResult
    track_ids: tuple[int, ...]
    det_tracks: tuple[int | None, ...]
    forecasts: list = field(default_factory=list)  # (track_id, gid, h x 3 world poses)


def run_tracker(frames: Sequence[FrameRecord], net: TrackerNet, params: ParamStore | None,
                persistence: int = 5, scm: ScmConfig | None = None, oracle: bool = False) -> list[FrameOutcome]:
    """Network-driven tracking: each frame is scored, assigned with the
    Hungarian method and the decisions update the track set. With
    ``oracle=True`` the scores come from the SCMs instead of the network."""
    tracks: list[LiveTrack] = []
    next_id = 0
    out: list[FrameOutcome] = []
    prev = None
    L = net.cfg.lstm_dim
    p = params if params is not None else net.zero_params()
    for t, frame in enumerate(frames):
        mems = [tr.memory for tr in tracks]
        boxes = [predicted_box(m, t, frame.ego) for m in mems]
        graph = build_graph(frame, boxes, mems, net)
        if oracle:
            scores = oracle_scores(frame, prev, [tr.gid for tr in tracks], scm or ScmConfig())
        else:
            scores = net.forward(p, graph).frame_scores()[0]
        result = decide_frame(scores)
        if len(result.detections) != scores.D or len(result.tracks) != scores.K:
            raise AssertionError("a subject received no decision or two")
        det_tracks: list[int | None] = [None] * scores.D
        items = []
        for i, (kind, partner) in enumerate(result.detections):
            if kind.is_pair:
                items.append((tracks[partner], i))
                det_tracks[i] = tracks[partner].track_id
        survivors = []
        for j, (kind, _) in enumerate(result.tracks):
            tr = tracks[j]
            if kind.is_pair:
                tr.coasted = 0
                survivors.append(tr)
            elif kind is DecisionKind.OCCLUDED_TRACK:
                tr.coasted += 1
                if tr.coasted <= persistence:
                    survivors.append(tr)
        outcome = FrameOutcome(t, result, tuple(tr.track_id for tr in tracks), (), [])
        for i, (kind, _) in enumerate(result.detections):
            if kind is DecisionKind.NEWBORN_TRACK:
                tr = LiveTrack(next_id, None, frame.association[i])  # type: ignore[arg-type]
                det_tracks[i] = next_id
                next_id += 1
                items.append((tr, i))
                survivors.append(tr)
        if items:
            feats = net.encode_detection(p, graph.det_x[[i for _, i in items]])
            h0 = np.array([tr.memory.hidden if tr.memory is not None else np.zeros(L) for tr, _ in items])
            c0 = np.array([tr.memory.cell if tr.memory is not None else np.zeros(L) for tr, _ in items])
            h, c = net.lstm_step(p, feats, h0, c0)
            off = net.forecast_offsets(p, h).data
            wboxes = [ego_to_world(frame.detections[i].box, frame.ego) for _, i in items]
            vel = np.array([[b.vx, b.vy] for b in wboxes])
            start = np.array([[b.x, b.y, b.theta] for b in wboxes])
            fc = start[:, None, :] + np.cumsum(off + net.prior_offsets(vel), axis=1)
            for n, (tr, i) in enumerate(items):
                det = frame.detections[i]
                tr.memory = TrackMemory(wboxes[n], float(det.score), np.asarray(det.appearance), h.data[n],
                                        c.data[n], fc[n], t)
                outcome.forecasts.append((tr.track_id, frame.association[i], fc[n]))
        outcome.det_tracks = tuple(det_tracks)
        out.append(outcome)
        tracks = sorted(survivors, key=lambda tr: tr.track_id)
        prev = frame
    return out


def id_switches(frames: Sequence[FrameRecord], outcomes: Sequence[FrameOutcome]) -> int:
    """Times a ground-truth identity's assigned track id changes."""
    last: dict[int, int] = {}
    switches = 0
    for fr, oc in zip(frames, outcomes):
        for i, tid in enumerate(oc.det_tracks):
            gid = fr.association[i]
            if gid is None or tid is None:
                continue
            if gid in last and last[gid] != tid:
                switches += 1
            last[gid] = tid
    return switches


def displacement_errors(frames: Sequence[FrameRecord], outcomes: Sequence[FrameOutcome]) -> tuple[list, list]:
    """Per-forecast average and final displacement (metres) against ground truth."""
    ade, fde = [], []
    for oc in outcomes:
        for _, gid, fc in oc.forecasts:
            if gid is None:
                continue
            errs = []
            for k in range(len(fc)):
                t = oc.t + k + 1
                if t >= len(frames):
                    break
                o = frames[t].object(gid).box
                errs.append(math.hypot(fc[k][0] - o.x, fc[k][1] - o.y))
            if errs:
                ade.append(float(np.mean(errs)))
                if len(errs) == len(fc):
                    fde.append(errs[-1])
    return ade, fde


# ------------------------------------------------------------------ full report

METRIC_FIELDS = ("accuracy", "per_kind", "iia", "id_switches", "ade", "fde", "flag_rate", "flagged_error",
                 "unflagged_error")


def evaluate(cfg: RunConfig, net: TrackerNet, params: ParamStore, probes: ProbeSet | None,
             dataset: Sequence[Sequence[FrameRecord]], seq_ids: Sequence[int], alignment: AlignmentMap,
             oracle: bool = False, with_iia: bool = True, free_run: bool = True):
    """(metrics report, per-subject records) over ``seq_ids``."""
    prepared = teacher_forced(net, params, dataset, seq_ids)
    bank = FrameBank(dataset, cfg.scm, seq_ids)
    if oracle:
        def scorer(pf):
            f = bank.index[(pf.seq, pf.t)]
            return oracle_scores(bank.frames[f], bank.prev[f], list(pf.track_ids), cfg.scm)
        records = evaluate_frames(net, params, prepared, None, cfg.scm.matches_any, scorer)
    else:
        records = evaluate_frames(net, params, prepared, probes, cfg.scm.matches_any)
    report = decision_metrics(records)
    if with_iia:
        pools = build_pools(bank, alignment, max(1, cfg.train.pool_per_label // 3),
                            np.random.default_rng([cfg.train.seed, 3]), cfg.train.within_frame_ratio)
        by_pos = {bank.index[(pf.seq, pf.t)]: pf for seq in prepared for pf in seq}
        fn = oracle_cf_scorer(bank) if oracle else network_cf_scorer(net, params, by_pos, alignment)
        report["iia"] = compute_iia(fn, pools)
    else:
        report["iia"] = None
    switches, ade, fde = 0, [], []
    if free_run:
        for s in seq_ids:
            outs = run_tracker(dataset[s], net, params, cfg.world.occlusion_persistence, cfg.scm, oracle)
            switches += id_switches(dataset[s], outs)
            a, f = displacement_errors(dataset[s], outs)
            ade += a
            fde += f
    report["id_switches"] = switches
    report["ade"] = float(np.mean(ade)) if ade else 0.0
    report["fde"] = float(np.mean(fde)) if fde else 0.0
    report.update(flag_metrics(records))
    return report, records


__all__ = ["ExplainInput", "ExplanationTrace", "explain", "uncertainty_flag", "oracle_scores", "evaluate_frames",
           "decision_metrics", "flag_metrics", "compute_iia", "network_cf_scorer", "oracle_cf_scorer",
           "run_tracker", "id_switches", "displacement_errors", "evaluate", "SubjectRecord", "METRIC_FIELDS",
           "PAIR_KINDS", "TRACK_KINDS", "asdict"]
