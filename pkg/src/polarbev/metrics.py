"""Evaluation KPIs for obstacles, freespace RDMs and parking spaces.

Precision and recall are computed per confidence threshold with the
matching redone at every threshold: for threshold ``tau`` each scene keeps
its detections with confidence ``>= tau`` and is matched from scratch.
AP is the 101-point interpolated area under that precision/recall set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import angle_diff, rotation_error
from .heads import FREESPACE_CLASSES, PARKING_PROFILES, oriented_iou

RADIAL_GATE = 0.10
AZIMUTH_GATE = math.radians(2.0)
IOU_GATE = 0.70
MIN_RADIUS = 1.0
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SAFETY_ZONE = (-100.0, 100.0, -10.0, 10.0)


@dataclass
class MatchResult:
    tp: list[tuple[int, int]]
    fp: list[int]
    fn: list[int]


def _xyz(c):
    return np.array([c.r * math.cos(c.a), c.r * math.sin(c.a), c.e])


def eval_gate(gt, det) -> bool:
    rel = abs(det.r - gt.r) / max(gt.r, MIN_RADIUS)
    return rel < RADIAL_GATE and abs(float(angle_diff(det.a, gt.a))) < AZIMUTH_GATE


def match_for_eval(gts, dets) -> MatchResult:
    """Greedy one-to-one matching by centroid distance among gate-passing pairs.

    ``gts`` and ``dets`` are cuboids of a single class.
    """
    pairs = []
    for i, g in enumerate(gts):
        gx = _xyz(g)
        for j, d in enumerate(dets):
            if eval_gate(g, d):
                pairs.append((float(np.linalg.norm(_xyz(d) - gx)), i, j))
    pairs.sort()
    used_g, used_d, tp = set(), set(), []
    for _, i, j in pairs:
        if i in used_g or j in used_d:
            continue
        used_g.add(i)
        used_d.add(j)
        tp.append((i, j))
    return MatchResult(sorted(tp), [j for j in range(len(dets)) if j not in used_d],
                       [i for i in range(len(gts)) if i not in used_g])


def interpolated_ap(recall, precision) -> float:
    """101-point interpolation: mean over recall levels of the best precision at recall >= level."""
    recall = np.asarray(recall, dtype=float)
    precision = np.asarray(precision, dtype=float)
    total = 0.0
    for level in RECALL_POINTS:
        ok = recall >= level - 1e-12
        total += precision[ok].max() if ok.any() else 0.0
    return total / len(RECALL_POINTS)


@dataclass
class ThresholdCurve:
    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_gt: int

    @property
    def precision(self):
        n = self.tp + self.fp
        return np.where(n > 0, self.tp / np.maximum(n, 1), 1.0)

    @property
    def recall(self):
        return self.tp / self.n_gt if self.n_gt else np.zeros_like(self.tp, dtype=float)

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return np.where(p + r > 0, 2 * p * r / np.maximum(p + r, 1e-300), 0.0)

    def ap(self) -> float:
        if len(self.thresholds) == 0:
            return 0.0
        return interpolated_ap(self.recall, self.precision)

    def best(self):
        """``(threshold, precision, recall, f1)`` at the F1-maximizing threshold."""
        if len(self.thresholds) == 0:
            return math.inf, 1.0, 0.0, 0.0
        k = int(np.argmax(self.f1))
        return float(self.thresholds[k]), float(self.precision[k]), float(self.recall[k]), float(self.f1[k])


def threshold_curve(scenes, matcher) -> ThresholdCurve:
    """Per-threshold TP/FP totals.

    ``scenes`` is a list of ``(gts, dets, confidences)``.  A scene's
    detection subset at any threshold is a prefix of its confidence-sorted
    list, so each scene is matched once per prefix and the totals are
    assembled by sweeping thresholds in descending order.
    """
    n_gt = sum(len(g) for g, _, _ in scenes)
    events = []
    for si, (gts, dets, conf) in enumerate(scenes):
        conf = np.asarray(conf, dtype=float)
        order = np.argsort(-conf, kind="stable")
        prev_tp = 0
        for k in range(1, len(order) + 1):
            if k < len(order) and conf[order[k]] == conf[order[k - 1]]:
                continue
            sub = [dets[i] for i in order[:k]]
            tp = len(matcher(gts, sub).tp)
            # group boundary: all detections with this confidence enter together
            start = k - 1
            while start > 0 and conf[order[start - 1]] == conf[order[k - 1]]:
                start -= 1
            events.append((conf[order[k - 1]], tp - prev_tp, k - start))
            prev_tp = tp
    if not events:
        return ThresholdCurve(np.zeros(0), np.zeros(0), np.zeros(0), n_gt)
    events.sort(key=lambda e: -e[0])
    th, tp, fp = [], [], []
    cur_tp = cur_n = 0
    i = 0
    while i < len(events):
        c = events[i][0]
        while i < len(events) and events[i][0] == c:
            cur_tp += events[i][1]
            cur_n += events[i][2]
            i += 1
        th.append(c)
        tp.append(cur_tp)
        fp.append(cur_n - cur_tp)
    return ThresholdCurve(np.array(th), np.array(tp, dtype=float), np.array(fp, dtype=float), n_gt)


def brute_force_curve(scenes, matcher) -> ThresholdCurve:
    """Rematch every scene at every distinct threshold; the reference for :func:`threshold_curve`."""
    n_gt = sum(len(g) for g, _, _ in scenes)
    ths = sorted({float(c) for _, _, conf in scenes for c in conf}, reverse=True)
    tp, fp = [], []
    for t in ths:
        a = b = 0
        for gts, dets, conf in scenes:
            sub = [d for d, c in zip(dets, conf) if c >= t]
            m = matcher(gts, sub)
            a += len(m.tp)
            b += len(m.fp)
        tp.append(a)
        fp.append(b)
    return ThresholdCurve(np.array(ths), np.array(tp, dtype=float), np.array(fp, dtype=float), n_gt)


@dataclass
class ClassKpis:
    name: str
    n_gt: int
    ap: float
    precision: float
    recall: float
    f1: float
    threshold: float


@dataclass
class DetectionKpis:
    per_class: dict[str, ClassKpis]
    mAP: float
    safety_mAP: float
    radial_error_pct: float = math.nan
    azimuth_error_deg: float = math.nan
    elevation_error_m: float = math.nan
    orientation_error_deg: float = math.nan
    shape_error_pct: tuple[float, float, float] = (math.nan, math.nan, math.nan)
    n_tp: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def best_f1(self) -> float:
        """Mean best-threshold F1 over classes that have ground truth."""
        vals = [c.f1 for c in self.per_class.values() if c.n_gt > 0]
        return float(np.mean(vals)) if vals else 0.0

    def as_dict(self):
        return {
            "per_class": {k: vars(v) for k, v in self.per_class.items()},
            "mAP": self.mAP, "safety_mAP": self.safety_mAP,
            "radial_error_pct": self.radial_error_pct, "azimuth_error_deg": self.azimuth_error_deg,
            "elevation_error_m": self.elevation_error_m, "orientation_error_deg": self.orientation_error_deg,
            "shape_error_pct": list(self.shape_error_pct), "n_tp": self.n_tp, "flags": list(self.flags),
        }


def in_zone(c, zone) -> bool:
    x0, x1, y0, y1 = zone
    x, y = c.r * math.cos(c.a), c.r * math.sin(c.a)
    return x0 <= x <= x1 and y0 <= y <= y1


def _class_scenes(frames, label, zone=None):
    out = []
    for gts, dets in frames:
        g = [c for c in gts if c.label == label and (zone is None or in_zone(c, zone))]
        d = [(p.cuboid, p.confidence) for p in dets
             if p.cuboid.label == label and (zone is None or in_zone(p.cuboid, zone))]
        out.append((g, [x for x, _ in d], [c for _, c in d]))
    return out


def class_curve(frames, label: int, zone=None) -> ThresholdCurve:
    """Threshold sweep for one class over ``(gt cuboids, ObstaclePrediction list)`` frames."""
    return threshold_curve(_class_scenes(frames, label, zone), match_for_eval)


def detection_kpis(frames, class_names, safety_zone=SAFETY_ZONE) -> DetectionKpis:
    """KPIs over ``frames``: a list of ``(gt cuboids, ObstaclePrediction list)`` per scene."""
    per_class, aps, safety_aps, flags = {}, [], [], []
    rad, azi, ele, ori, shp = [], [], [], [], []
    for label, name in enumerate(class_names):
        scenes = _class_scenes(frames, label)
        n_gt = sum(len(g) for g, _, _ in scenes)
        curve = threshold_curve(scenes, match_for_eval)
        tau, p, r, f1 = curve.best()
        if n_gt == 0:
            flags.append(f"class {name} has no ground truth; excluded from mAP")
            per_class[name] = ClassKpis(name, 0, math.nan, p, r, f1, tau)
            continue
        ap = curve.ap()
        aps.append(ap)
        per_class[name] = ClassKpis(name, n_gt, ap, p, r, f1, tau)
        s_scenes = _class_scenes(frames, label, safety_zone)
        if sum(len(g) for g, _, _ in s_scenes):
            safety_aps.append(threshold_curve(s_scenes, match_for_eval).ap())
        for gts, dets, conf in scenes:
            sub = [d for d, c in zip(dets, conf) if c >= tau]
            for gi, di in match_for_eval(gts, sub).tp:
                g, d = gts[gi], sub[di]
                rad.append(abs(d.r - g.r) / max(g.r, MIN_RADIUS) * 100)
                azi.append(abs(math.degrees(float(angle_diff(d.a, g.a)))))
                ele.append(abs(d.e - g.e))
                ori.append(math.degrees(rotation_error(g.rotation, d.rotation)))
                shp.append([abs(d.dims[k] - g.dims[k]) / g.dims[k] * 100 for k in range(3)])

    def mean(v):
        return float(np.mean(v)) if len(v) else math.nan

    return DetectionKpis(
        per_class, mean(aps), mean(safety_aps), mean(rad), mean(azi), mean(ele), mean(ori),
        tuple(np.mean(shp, axis=0).tolist()) if shp else (math.nan,) * 3, len(rad), flags,
    )


# ---------------------------------------------------------------------------
# freespace
# ---------------------------------------------------------------------------

@dataclass
class FreespaceKpis:
    relative_gap_pct: float
    absolute_gap_m: float
    success_rate_pct: float
    smoothness_m: float
    precision: dict[str, float]
    recall: dict[str, float]
    n_bins: int

    def as_dict(self):
        return dict(vars(self))


def sector_mask(n_bins: int, gt_radii, radial=None, angular_deg=None) -> np.ndarray:
    """Bins whose GT radius lies in ``radial = (lo, hi)`` and whose center
    azimuth lies in ``angular_deg = (lo, hi)`` measured from +x, in [-180, 180)."""
    keep = np.ones(n_bins, dtype=bool)
    if radial is not None:
        r = np.asarray(gt_radii)
        keep &= (r >= radial[0]) & (r < radial[1])
    if angular_deg is not None:
        ang = np.degrees(angle_diff((np.arange(n_bins) + 0.5) * 2 * math.pi / n_bins, 0.0))
        keep &= (ang >= angular_deg[0]) & (ang <= angular_deg[1])
    return keep


def freespace_kpis(pairs, gt=None, radial=None, angular_deg=None, eps: float = 1e-6) -> FreespaceKpis:
    """``pairs`` is a list of ``(pred RDM, gt RDM)``; ``freespace_kpis(pred, gt)`` also works."""
    if gt is not None:
        pairs = [(pairs, gt)]
    elif not isinstance(pairs, list):
        pairs = [pairs]
    rel, ab, smooth = [], [], []
    tp = np.zeros(len(FREESPACE_CLASSES))
    fp = np.zeros(len(FREESPACE_CLASSES))
    fn = np.zeros(len(FREESPACE_CLASSES))
    for pred, gt in pairs:
        p, g = np.asarray(pred.radii, float), np.asarray(gt.radii, float)
        keep = sector_mask(len(g), g, radial, angular_deg)
        err = np.abs(p - g)
        rel.extend((err / np.maximum(g, eps) * 100)[keep])
        ab.extend(err[keep])
        smooth.append(float(np.abs(p - np.roll(p, 1)).sum()))
        pl, gl = np.asarray(pred.labels)[keep], np.asarray(gt.labels)[keep]
        for c in range(len(FREESPACE_CLASSES)):
            tp[c] += np.sum((pl == c) & (gl == c))
            fp[c] += np.sum((pl == c) & (gl != c))
            fn[c] += np.sum((pl != c) & (gl == c))
    rel = np.asarray(rel)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(tp + fp > 0, tp / (tp + fp), math.nan)
        rec = np.where(tp + fn > 0, tp / (tp + fn), math.nan)
    return FreespaceKpis(
        float(rel.mean()) if len(rel) else math.nan,
        float(np.mean(ab)) if len(ab) else math.nan,
        float(np.mean(rel < RADIAL_GATE * 100) * 100) if len(rel) else math.nan,
        float(np.mean(smooth)) if smooth else math.nan,
        dict(zip(FREESPACE_CLASSES, prec.tolist())),
        dict(zip(FREESPACE_CLASSES, rec.tolist())),
        int(len(rel)),
    )


# ---------------------------------------------------------------------------
# parking
# ---------------------------------------------------------------------------

def match_parking(gts, dets) -> MatchResult:
    """Greedy one-to-one matching by descending IoU, valid at IoU >= 0.7."""
    pairs = []
    for i, g in enumerate(gts):
        for j, d in enumerate(dets):
            iou = oriented_iou(g, d)
            if iou >= IOU_GATE:
                pairs.append((-iou, i, j))
    pairs.sort()
    used_g, used_d, tp = set(), set(), []
    for _, i, j in pairs:
        if i in used_g or j in used_d:
            continue
        used_g.add(i)
        used_d.add(j)
        tp.append((i, j))
    return MatchResult(sorted(tp), [j for j in range(len(dets)) if j not in used_d],
                       [i for i in range(len(gts)) if i not in used_g])


@dataclass
class ParkingKpis:
    ap: dict[str, float]
    mean_iou: float
    f1: float
    precision: float
    recall: float
    threshold: float

    def as_dict(self):
        return dict(vars(self))


def parking_kpis(frames) -> ParkingKpis:
    """``frames``: list of ``(gt ParkingSpace list, predicted ParkingSpace list)``.

    AP is per profile; F1 and mean IoU use profile-agnostic matching at the
    F1-maximizing threshold.
    """
    aps = {}
    for k, name in enumerate(PARKING_PROFILES):
        scenes = [([g for g in gts if g.profile == k],
                   [d for d in dets if d.profile == k],
                   [d.confidence for d in dets if d.profile == k]) for gts, dets in frames]
        if sum(len(s[0]) for s in scenes):
            aps[name] = threshold_curve(scenes, match_parking).ap()
    scenes = [(gts, dets, [d.confidence for d in dets]) for gts, dets in frames]
    curve = threshold_curve(scenes, match_parking)
    tau, p, r, f1 = curve.best()
    ious = []
    for gts, dets, conf in scenes:
        sub = [d for d, c in zip(dets, conf) if c >= tau]
        ious += [oriented_iou(gts[i], sub[j]) for i, j in match_parking(gts, sub).tp]
    return ParkingKpis(aps, float(np.mean(ious)) if ious else math.nan, f1, p, r, tau)
