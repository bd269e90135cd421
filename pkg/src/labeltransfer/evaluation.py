"""Label and depth metrics, and the evaluation report of a trained run."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.spatial.distance import cdist

from .camera import unproject
from .fields import ClassTable

VOID = -1
MC_RADIUS = 0.1
MIN_SEGMENT_AREA = 100


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# semantic metrics

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``cm[g, p]`` counts; void ground-truth pixels are skipped."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    ok = gt != VOID
    if np.any((pred[ok] < 0) | (pred[ok] >= num_classes)) or np.any(gt[ok] >= num_classes):
        raise EvaluationError("label outside the class range")
    return np.bincount(gt[ok] * num_classes + pred[ok], minlength=num_classes ** 2).reshape(num_classes, num_classes)


@dataclass
class SemanticScores:
    iou: dict[int, float]
    miou: float
    acc: float


def scores_from_confusion(cm: np.ndarray) -> SemanticScores:
    total = cm.sum()
    if total == 0:
        raise EvaluationError("no valid pixels to evaluate")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    present = np.flatnonzero(cm.sum(axis=0) + cm.sum(axis=1) > 0)
    iou = {int(k): float(tp[k] / (tp[k] + fp[k] + fn[k])) for k in present}
    return SemanticScores(iou, float(np.mean(list(iou.values()))), float(tp.sum() / total))


def miou_acc(pred: np.ndarray, gt: np.ndarray, num_classes: int | None = None) -> SemanticScores:
    """IoU per class, mIoU over classes present in gt or prediction, pixel accuracy."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvaluationError(f"shape mismatch: prediction {pred.shape}, ground truth {gt.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    return scores_from_confusion(confusion_matrix(pred, gt, num_classes))


# ---------------------------------------------------------------------------
# multi-view consistency

def _nearest(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Index in ``b`` of the nearest point to each point of ``a`` (lowest index on ties) and its distance."""
    idx = np.empty(len(a), dtype=np.int64)
    dist = np.empty(len(a))
    for lo in range(0, len(a), chunk):
        d = cdist(a[lo:lo + chunk], b)
        j = np.argmin(d, axis=1)
        idx[lo:lo + chunk] = j
        dist[lo:lo + chunk] = d[np.arange(len(j)), j]
    return idx, dist


def match_points(points_a: np.ndarray, points_b: np.ndarray, radius: float = MC_RADIUS) -> np.ndarray:
    """Mutual nearest-neighbour pairs closer than ``radius``; (K, 2) index array."""
    points_a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    points_b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(points_a) == 0 or len(points_b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    ab, dab = _nearest(points_a, points_b)
    ba, _ = _nearest(points_b, points_a)
    i = np.flatnonzero((ba[ab] == np.arange(len(points_a))) & (dab < radius))
    return np.stack([i, ab[i]], axis=1)


def multiview_consistency(labels_a: np.ndarray, labels_b: np.ndarray, points_a: np.ndarray,
                          points_b: np.ndarray, radius: float = MC_RADIUS) -> tuple[float | None, int]:
    """Fraction of matched 3D point pairs whose labels agree, and the pair count.

    Each mutual pair is counted once; with no pairs the ratio is ``None``.
    """
    pairs = match_points(points_a, points_b, radius)
    if len(pairs) == 0:
        return None, 0
    la = np.asarray(labels_a).reshape(-1)[pairs[:, 0]]
    lb = np.asarray(labels_b).reshape(-1)[pairs[:, 1]]
    return float(np.mean(la == lb)), len(pairs)


# ---------------------------------------------------------------------------
# panoptic quality

@dataclass
class PQClass:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int


@dataclass
class PQReport:
    per_class: dict[int, PQClass]
    all: tuple[float, float, float]
    things: tuple[float, float, float]
    stuff: tuple[float, float, float]

    @property
    def pq(self) -> float:
        return self.all[0]


def _segments(sem: np.ndarray, inst: np.ndarray) -> tuple[np.ndarray, dict[int, tuple[int, int]]]:
    """Map every pixel to a segment id, one per (class, instance) pair; void gets -1."""
    key = np.where(sem == VOID, -1, sem.astype(np.int64) * (1 << 32) + inst.astype(np.int64))
    uniq, seg = np.unique(key, return_inverse=True)
    seg = seg.reshape(sem.shape)
    info = {}
    for s, k in enumerate(uniq):
        if k >= 0:
            info[s] = (int(k >> 32), int(k & 0xFFFFFFFF))
    if uniq[0] == -1:
        seg = seg - 1  # void becomes -1, other ids shift down by one
        info = {s - 1: v for s, v in info.items()}
    return seg, info


def small_segments_filter(sem: np.ndarray, inst: np.ndarray, min_area: int, fill: int,
                          fill_inst: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Relabel (class, instance) groups smaller than ``min_area`` pixels."""
    sem = np.array(sem, dtype=np.int64)
    inst = np.array(inst, dtype=np.int64)
    seg, info = _segments(sem, inst)
    areas = np.bincount(seg[seg >= 0], minlength=len(info))
    small = np.isin(seg, np.flatnonzero(areas < min_area)) & (seg >= 0)
    sem[small] = fill
    inst[small] = fill_inst
    return sem, inst


def pq_stats(pred_sem: np.ndarray, pred_inst: np.ndarray, gt_sem: np.ndarray, gt_inst: np.ndarray,
             classes: ClassTable, min_area: int = MIN_SEGMENT_AREA, iou_threshold: float = 0.5,
             void_fp_fraction: float = 0.5) -> np.ndarray:
    """Per-class ``[iou_sum, tp, fp, fn]`` rows for one image, with the small-segment rules.

    Ground-truth segments under ``min_area`` pixels become void; predicted
    segments under ``min_area`` become sky. Segments are (class, instance)
    groups. An unmatched prediction is not a false positive when more than
    ``void_fp_fraction`` of it lies in void. Rows of several images add up.
    """
    gt_sem = np.asarray(gt_sem)
    if np.asarray(pred_sem).shape != gt_sem.shape:
        raise EvaluationError("prediction and ground truth differ in shape")
    # stuff classes carry no instance
    pred_inst = np.where(classes.is_thing(pred_sem), pred_inst, 0)
    gt_inst = np.where(classes.is_thing(gt_sem), gt_inst, 0)
    if min_area > 0:
        gt_sem, gt_inst = small_segments_filter(gt_sem, gt_inst, min_area, VOID)
        pred_sem, pred_inst = small_segments_filter(pred_sem, pred_inst, min_area, classes.sky)
    ps, pinfo = _segments(np.asarray(pred_sem), np.asarray(pred_inst))
    gs, ginfo = _segments(np.asarray(gt_sem), np.asarray(gt_inst))
    void = gs < 0
    n_p, n_g = len(pinfo), len(ginfo)
    p_area = np.bincount(ps[ps >= 0], minlength=n_p)
    g_area = np.bincount(gs[gs >= 0], minlength=n_g)
    p_void = np.bincount(ps[void & (ps >= 0)], minlength=n_p)
    both = (ps >= 0) & (gs >= 0)
    inter = np.zeros((n_p, n_g), dtype=np.int64)
    np.add.at(inter, (ps[both], gs[both]), 1)
    stats = np.zeros((classes.num_classes, 4))
    p_matched = np.zeros(n_p, bool)
    g_matched = np.zeros(n_g, bool)
    for pi, gi in zip(*np.nonzero(inter)):
        if pinfo[pi][0] != ginfo[gi][0]:
            continue
        union = p_area[pi] - p_void[pi] + g_area[gi] - inter[pi, gi]
        iou = inter[pi, gi] / union
        if iou > iou_threshold:
            c = ginfo[gi][0]
            stats[c, 0] += iou
            stats[c, 1] += 1
            p_matched[pi] = g_matched[gi] = True
    for gi, (c, _) in ginfo.items():
        if not g_matched[gi]:
            stats[c, 3] += 1
    for pi, (c, _) in pinfo.items():
        if not p_matched[pi] and p_void[pi] / p_area[pi] <= void_fp_fraction:
            stats[c, 2] += 1
    return stats


def pq_from_stats(stats: np.ndarray, classes: ClassTable) -> PQReport:
    per_class = {}
    for c, (iou_sum, tp, fp, fn) in enumerate(stats):
        if tp + fp + fn == 0:
            continue
        tp, fp, fn = int(tp), int(fp), int(fn)
        sq = iou_sum / tp if tp else 0.0
        rq = tp / (tp + 0.5 * fp + 0.5 * fn)
        per_class[c] = PQClass(sq * rq, sq, rq, tp, fp, fn)

    def agg(keys):
        rows = [per_class[k] for k in keys if k in per_class]
        if not rows:
            return (float("nan"),) * 3
        return (float(np.mean([r.pq for r in rows])), float(np.mean([r.sq for r in rows])),
                float(np.mean([r.rq for r in rows])))

    things = [c for c in per_class if c in classes.things]
    stuff = [c for c in per_class if c not in classes.things]
    return PQReport(per_class, agg(per_class), agg(things), agg(stuff))


def panoptic_quality(pred_sem: np.ndarray, pred_inst: np.ndarray, gt_sem: np.ndarray, gt_inst: np.ndarray,
                     classes: ClassTable, min_area: int = MIN_SEGMENT_AREA, iou_threshold: float = 0.5,
                     void_fp_fraction: float = 0.5) -> PQReport:
    """PQ, SQ and RQ per class and averaged over all / thing / stuff classes for one image."""
    return pq_from_stats(pq_stats(pred_sem, pred_inst, gt_sem, gt_inst, classes, min_area, iou_threshold,
                                  void_fp_fraction), classes)


# ---------------------------------------------------------------------------
# depth

@dataclass
class DepthScores:
    rmse: float
    delta: float
    median_abs: float
    count: int


def depth_metrics(pred: np.ndarray, gt: np.ndarray, max_range: float = 100.0, threshold: float = 1.25) -> DepthScores:
    """RMSE, threshold accuracy and median absolute error over ground truth in ``(0, max_range]``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise EvaluationError("prediction and ground truth differ in shape")
    ok = np.isfinite(gt) & (gt > 0) & (gt <= max_range)
    if not ok.any():
        raise EvaluationError("no valid depth pixels in range")
    p, g = pred[ok], gt[ok]
    err = p - g
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, np.where(p > 0, g / p, np.inf))
    return DepthScores(float(np.sqrt(np.mean(err ** 2))), float(np.mean(ratio < threshold)),
                       float(np.median(np.abs(err))), int(ok.sum()))


def panoptic_violations(sem: np.ndarray, inst: np.ndarray, classes: ClassTable) -> int:
    """Pixels whose nonzero instance id belongs to a different class than the pixel's semantic label."""
    inst = np.asarray(inst).reshape(-1)
    sem = np.asarray(sem).reshape(-1)
    owner = dict(classes.instances)
    bad = 0
    for i in np.unique(inst[inst != 0]):
        c = owner.get(int(i), -2)
        bad += int(np.sum((inst == i) & (sem != c)))
    return bad


# ---------------------------------------------------------------------------
# run report

@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    semantic: SemanticScores
    fixed_semantic: SemanticScores | None = None
    pseudo: SemanticScores | None = None
    ambiguous_accuracy: float | None = None
    mc: float | None = None
    mc_pairs: int = 0
    panoptic: PQReport | None = None
    panoptic_violations: int = 0
    depth: DepthScores | None = None
    frames: list[int] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str, float]]:
        """(metric, scope, value) rows in a fixed order."""
        out: list[tuple[str, str, float]] = [("miou", "learned", self.semantic.miou), ("acc", "learned", self.semantic.acc)]
        for k, v in sorted(self.semantic.iou.items()):
            out.append(("iou", self.class_names[k], v))
        if self.fixed_semantic is not None:
            out += [("miou", "fixed", self.fixed_semantic.miou), ("acc", "fixed", self.fixed_semantic.acc)]
        if self.pseudo is not None:
            out += [("miou", "pseudo", self.pseudo.miou), ("acc", "pseudo", self.pseudo.acc)]
        if self.ambiguous_accuracy is not None:
            out.append(("overlap_acc", "learned", self.ambiguous_accuracy))
        out.append(("mc", "learned", float("nan") if self.mc is None else self.mc))
        out.append(("mc_pairs", "learned", float(self.mc_pairs)))
        if self.panoptic is not None:
            for scope, vals in (("all", self.panoptic.all), ("things", self.panoptic.things),
                                ("stuff", self.panoptic.stuff)):
                out += [("pq", scope, vals[0]), ("sq", scope, vals[1]), ("rq", scope, vals[2])]
        out.append(("panoptic_violations", "learned", float(self.panoptic_violations)))
        if self.depth is not None:
            out += [("depth_rmse", "0-100m", self.depth.rmse), ("depth_delta1.25", "0-100m", self.depth.delta),
                    ("depth_median_abs", "0-100m", self.depth.median_abs)]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["metric", "scope", "value"])
        for m, s, v in self.rows():
            wr.writerow([m, s, repr(float(v))])
        return buf.getvalue()

    def table(self) -> str:
        rows = self.rows()
        w1 = max(len(r[0]) for r in rows)
        w2 = max(len(r[1]) for r in rows)
        lines = [f"{'metric':<{w1}}  {'scope':<{w2}}  value"]
        lines += [f"{m:<{w1}}  {s:<{w2}}  {v:.4f}" for m, s, v in rows]
        return "\n".join(lines)

    def value(self, metric: str, scope: str) -> float:
        for m, s, v in self.rows():
            if m == metric and s == scope:
                return v
        raise KeyError((metric, scope))


def evaluate_run(dataset, params, cfg, frames: list[int] | None = None, n_per_interval: int = 8,
                 renders: dict[int, Any] | None = None) -> tuple[EvalReport, dict[int, Any]]:
    """Render the evaluation frames and score them against the dataset's ground truth.

    Evaluation frames default to the left camera of every stereo pair.
    Returns the report and the rendered label maps by frame id.
    """
    from .rendering import render_frame

    if not dataset.has_gt():
        raise EvaluationError(f"{dataset.root}: dataset has no ground truth")
    scene = dataset.scene
    sf = scene.scene_frame()
    m = scene.classes.num_classes
    frame_ids = frames if frames is not None else [f.id for f in scene.left_frames()]
    renders = dict(renders or {})
    cm_l = np.zeros((m, m), np.int64)
    cm_f = np.zeros((m, m), np.int64)
    cm_p = np.zeros((m, m), np.int64)
    have_pseudo = False
    amb_hit = amb_n = 0
    stats = np.zeros((m, 4))
    pred_d, gt_d = [], []
    violations = 0
    points = {}
    for fid in frame_ids:
        frame = scene.frame(fid)
        if fid not in renders:
            renders[fid] = render_frame(scene.intrinsics, frame, sf, params, cfg, table=dataset.intervals(fid),
                                        n_per_interval=n_per_interval)
        r = renders[fid]
        gt = dataset.gt(fid)
        cm_l += confusion_matrix(r.semantic, gt.semantic, m)
        cm_f += confusion_matrix(r.semantic_fixed, gt.semantic, m)
        ps = dataset.pseudo_semantic(fid)
        if ps is not None:
            have_pseudo = True
            cm_p += confusion_matrix(np.where(ps < 0, scene.classes.sky, ps), gt.semantic, m)
        amb_hit += int(np.sum((r.semantic == gt.semantic) & gt.ambiguous))
        amb_n += int(gt.ambiguous.sum())
        violations += panoptic_violations(r.semantic, r.instance, scene.classes)
        stats += pq_stats(r.semantic, r.instance, gt.semantic, gt.instance, scene.classes)
        pred_d.append(r.depth)
        gt_d.append(gt.depth)
        pts, flat = unproject(scene.intrinsics, frame, gt.depth)
        points[fid] = (pts, r.semantic.reshape(-1)[flat])
    agree = pairs = 0
    for a, b in zip(frame_ids, frame_ids[1:]):
        ratio, n = multiview_consistency(points[a][1], points[b][1], points[a][0], points[b][0])
        if n:
            agree += ratio * n
            pairs += n
    pq = pq_from_stats(stats, scene.classes)
    report = EvalReport(
        scene.classes.names, scores_from_confusion(cm_l), scores_from_confusion(cm_f),
        scores_from_confusion(cm_p) if have_pseudo else None,
        amb_hit / amb_n if amb_n else None, agree / pairs if pairs else None, pairs, pq, violations,
        depth_metrics(np.concatenate([d.reshape(-1) for d in pred_d]), np.concatenate([d.reshape(-1) for d in gt_d])),
        list(frame_ids))
    return report, renders


def write_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    txt_path = out_dir / "metrics.txt"
    csv_path.write_text(report.to_csv())
    txt_path.write_text(report.table() + "\n")
    return csv_path, txt_path
