import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarbev import metrics as M
from polarbev.heads import OBSTACLE_CLASSES, Cuboid, ObstaclePrediction, ParkingSpace, RadialDistanceMap

DIMS = (4.5, 1.9, 1.6)


def cub(r, a_deg, label=0, e=0.8):
    return Cuboid.from_euler(r, math.radians(a_deg), e, DIMS, label=label)


def det(c, conf):
    probs = np.zeros(len(OBSTACLE_CLASSES))
    probs[c.label] = 1.0
    return ObstaclePrediction(0, conf, probs, c, np.ones(5))


def ap_oracle(scenes):
    """Rematch at every threshold, then integrate the 101-point interpolated curve."""
    n_gt = sum(len(g) for g, _, _ in scenes)
    ths = sorted({c for _, _, cs in scenes for c in cs}, reverse=True)
    pts = []
    for t in ths:
        tp = fp = 0
        for gts, dets, cs in scenes:
            m = M.match_for_eval(gts, [d for d, c in zip(dets, cs) if c >= t])
            tp += len(m.tp)
            fp += len(m.fp)
        pts.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        level = k / 100
        ok = [p for r, p in pts if r >= level - 1e-12]
        total += max(ok) if ok else 0.0
    return total / 101


# ---------------------------------------------------------------------------
# gates and matching
# ---------------------------------------------------------------------------

def test_exact_detection_is_tp():
    g = cub(12, 30)
    assert M.match_for_eval([g], [g]).tp == [(0, 0)]


def test_fifteen_percent_radial_error_is_fp_and_fn():
    m = M.match_for_eval([cub(10, 0)], [cub(11.5, 0)])
    assert m.tp == [] and m.fp == [0] and m.fn == [0]


@pytest.mark.parametrize("r, a_deg, ok", [
    (10.99, 0.0, True), (11.0, 0.0, False), (9.01, 0.0, True), (9.0, 0.0, False),
    (10.0, 1.99, True), (10.0, 2.0, False), (10.0, -1.99, True), (10.0, -2.000001, False),
])
def test_gate_boundaries(r, a_deg, ok):
    assert M.eval_gate(cub(10, 0), cub(r, a_deg)) is ok


def test_gate_across_angle_seam():
    assert M.eval_gate(cub(10, 359.0), cub(10, 0.5))


def test_radial_denominator_floor():
    assert M.eval_gate(cub(0.5, 0), cub(0.59, 0))
    assert not M.eval_gate(cub(0.5, 0), cub(0.61, 0))


def exhaustive_match(gts, dets):
    """Max-cardinality, then min-total-distance one-to-one matching among gate-valid pairs."""
    best = None
    for perm in itertools.permutations(range(len(dets)), len(gts)):
        pairs = [(i, j) for i, j in enumerate(perm) if M.eval_gate(gts[i], dets[j])]
        cost = sum(np.linalg.norm(M._xyz(gts[i]) - M._xyz(dets[j])) for i, j in pairs)
        key = (-len(pairs), cost)
        if best is None or key < best[0]:
            best = (key, sorted(pairs))
    return best[1]


def test_crossing_case_matches_exhaustive():
    gts = [cub(10.0, 0.0), cub(10.0, 1.5), cub(10.6, 0.75)]
    dets = [cub(10.05, 1.3), cub(10.5, 0.9), cub(9.9, 0.2)]
    assert M.match_for_eval(gts, dets).tp == exhaustive_match(gts, dets) == [(0, 2), (1, 0), (2, 1)]


def test_greedy_takes_nearest_first():
    gts = [cub(10, 0), cub(10.4, 0)]
    dets = [cub(10.2, 0)]
    # both gates pass; the nearer GT (distance 0.2 each: tie broken by gt index) wins
    assert M.match_for_eval(gts, dets).tp == [(0, 0)]
    assert M.match_for_eval(gts, [cub(10.3, 0)]).tp == [(1, 0)]


# ---------------------------------------------------------------------------
# AP and threshold curves
# ---------------------------------------------------------------------------

def test_interpolated_ap_hand_value():
    # ranking TP, FP, TP, FP, TP against three GTs
    g = [cub(10, 0), cub(10, 40), cub(10, 80)]
    d = [g[0], cub(30, 200), g[1], cub(30, 250), g[2]]
    conf = [0.9, 0.8, 0.7, 0.6, 0.5]
    curve = M.threshold_curve([(g, d, conf)], M.match_for_eval)
    expected = (34 * 1.0 + 33 * (2 / 3) + 34 * 0.6) / 101
    assert curve.ap() == pytest.approx(expected, abs=1e-12)
    assert curve.ap() == pytest.approx(ap_oracle([(g, d, conf)]), abs=1e-9)


def test_five_detection_fixtures_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        scenes = []
        for _ in range(int(rng.integers(1, 4))):
            gts = [cub(rng.uniform(5, 30), rng.uniform(0, 360)) for _ in range(int(rng.integers(0, 4)))]
            dets = []
            for _ in range(5):
                if gts and rng.random() < 0.6:
                    g = gts[int(rng.integers(len(gts)))]
                    dets.append(cub(g.r * (1 + rng.normal(0, 0.05)), math.degrees(g.a) + rng.normal(0, 1.5)))
                else:
                    dets.append(cub(rng.uniform(5, 30), rng.uniform(0, 360)))
            conf = rng.choice([0.2, 0.4, 0.6, 0.8], size=5).tolist()
            scenes.append((gts, dets, conf))
        if not sum(len(s[0]) for s in scenes):
            continue
        fast = M.threshold_curve(scenes, M.match_for_eval)
        slow = M.brute_force_curve(scenes, M.match_for_eval)
        np.testing.assert_array_equal(fast.tp, slow.tp)
        np.testing.assert_array_equal(fast.fp, slow.fp)
        assert fast.ap() == pytest.approx(ap_oracle(scenes), abs=1e-9)


def frames_of(pairs):
    return [(gts, [det(c, p) for c, p in dets]) for gts, dets in pairs]


def test_perfect_detector():
    gts = [cub(8, 10), cub(20, 200)]
    k = M.detection_kpis(frames_of([(gts, [(g, 0.9) for g in gts])]), ["Vehicle"])
    c = k.per_class["Vehicle"]
    assert (c.precision, c.recall, c.f1, c.ap) == (1.0, 1.0, 1.0, 1.0)
    assert k.mAP == 1.0 and k.radial_error_pct == 0.0 and k.orientation_error_deg == 0.0


def test_tp_and_fp_at_same_confidence():
    g = cub(10, 0)
    k = M.detection_kpis(frames_of([([g], [(g, 0.5), (cub(30, 90), 0.5)])]), ["Vehicle"])
    c = k.per_class["Vehicle"]
    assert c.precision == 0.5 and c.recall == 1.0


def test_class_without_gt_flagged():
    g = cub(10, 0)
    k = M.detection_kpis(frames_of([([g], [(g, 0.9)])]), OBSTACLE_CLASSES)
    assert k.mAP == 1.0 and math.isnan(k.per_class["Truck"].ap) and len(k.flags) == 3


def test_errors_averaged_over_tps():
    g = [cub(10, 0), cub(20, 90)]
    d = [(cub(10.5, 1.0), 0.9), (cub(20, 90.5), 0.8)]
    k = M.detection_kpis(frames_of([(g, d)]), ["Vehicle"])
    assert k.radial_error_pct == pytest.approx(2.5)
    assert k.azimuth_error_deg == pytest.approx(0.75)


def test_safety_zone_restricts():
    inside, outside = cub(20, 0), cub(20, 90)   # (20, 0) vs (0, 20): |y| > 10
    k = M.detection_kpis(frames_of([([inside, outside], [(inside, 0.9)])]), ["Vehicle"])
    assert k.safety_mAP == 1.0 and k.mAP < 1.0


def random_frames(rng, n_scenes=4):
    frames = []
    for _ in range(n_scenes):
        gts = [cub(rng.uniform(3, 40), rng.uniform(0, 360), label=int(rng.integers(2)))
               for _ in range(int(rng.integers(1, 4)))]
        dets = []
        for g in gts:
            if rng.random() < 0.7:
                dets.append((cub(g.r * (1 + rng.normal(0, 0.04)), math.degrees(g.a) + rng.normal(0, 1), g.label),
                             float(rng.uniform(0.1, 1))))
        for _ in range(int(rng.integers(0, 3))):
            dets.append((cub(rng.uniform(3, 40), rng.uniform(0, 360), label=int(rng.integers(2))),
                         float(rng.uniform(0.1, 1))))
        frames.append((gts, dets))
    return frames


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_duplicate_never_increases_ap(seed):
    rng = np.random.default_rng(seed)
    frames = random_frames(rng)
    base = M.detection_kpis(frames_of(frames), ["A", "B"])
    for gts, dets in frames:
        m = M.match_for_eval(gts, [c for c, _ in dets])
        if m.tp:
            _, j = m.tp[0]
            c, p = dets[j]
            dets.append((c, p * 0.5))
            break
    dup = M.detection_kpis(frames_of(frames), ["A", "B"])
    assert dup.mAP <= base.mAP + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_whole_grid_zone_equals_map_and_permutation(seed):
    rng = np.random.default_rng(seed)
    frames = random_frames(rng)
    k = M.detection_kpis(frames_of(frames), ["A", "B"], safety_zone=(-100, 100, -100, 100))
    assert k.safety_mAP == pytest.approx(k.mAP, abs=1e-12)
    shuffled = [(list(g), list(d)) for g, d in frames]
    rng.shuffle(shuffled)
    for g, d in shuffled:
        rng.shuffle(g)
        rng.shuffle(d)
    k2 = M.detection_kpis(frames_of(shuffled), ["A", "B"], safety_zone=(-100, 100, -100, 100))
    assert k2.mAP == pytest.approx(k.mAP, abs=1e-12) and k2.best_f1 == pytest.approx(k.best_f1, abs=1e-12)


# ---------------------------------------------------------------------------
# freespace
# ---------------------------------------------------------------------------

def rdm(radii, labels=None):
    radii = np.asarray(radii, float)
    return RadialDistanceMap(radii, np.zeros(len(radii), int) if labels is None else np.asarray(labels))


def test_freespace_identical_and_constant():
    k = M.freespace_kpis(rdm([5.0] * 8), rdm([5.0] * 8))
    assert k.relative_gap_pct == 0 and k.absolute_gap_m == 0 and k.success_rate_pct == 100
    assert k.smoothness_m == 0


def test_freespace_hand_example():
    k = M.freespace_kpis([(rdm([9.5, 12.0]), rdm([10.0, 10.0]))])
    assert k.absolute_gap_m == pytest.approx(1.25)
    assert k.success_rate_pct == pytest.approx(50.0)
    assert k.relative_gap_pct == pytest.approx(12.5)
    assert k.smoothness_m == pytest.approx(5.0)   # circular: |12 - 9.5| + |9.5 - 12|


def test_freespace_success_is_strict():
    # a bin exactly 10% off is not a success
    k = M.freespace_kpis(rdm([9.0, 12.0]), rdm([10.0, 10.0]))
    assert k.absolute_gap_m == pytest.approx(1.5)
    assert k.success_rate_pct == 0.0


def test_freespace_class_precision_recall():
    k = M.freespace_kpis(rdm([5] * 4, [0, 0, 1, 2]), rdm([5] * 4, [0, 1, 1, 2]))
    assert k.precision["Vehicle"] == 0.5 and k.recall["Vehicle"] == 1.0
    assert k.precision["VRU"] == 1.0 and k.recall["VRU"] == 0.5


def test_freespace_sectors():
    # 4 bins at 45, 135, 225, 315 degrees
    mask = M.sector_mask(4, [5, 15, 25, 35], angular_deg=(-90, 90))
    assert mask.tolist() == [True, False, False, True]
    mask = M.sector_mask(4, [5, 15, 25, 35], radial=(10, 30))
    assert mask.tolist() == [False, True, True, False]
    k = M.freespace_kpis(rdm([5, 0, 0, 35]), rdm([5, 15, 25, 35]), angular_deg=(-90, 90))
    assert k.relative_gap_pct == 0 and k.n_bins == 2


# ---------------------------------------------------------------------------
# parking
# ---------------------------------------------------------------------------

def space(cx, conf=None, cy=5.0, theta=0.0, profile=0):
    return ParkingSpace(cx, cy, 5.0, 2.5, theta, profile, () if conf is None else (conf,))


def test_parking_perfect():
    g = [space(5), space(15, theta=1.0)]
    k = M.parking_kpis([(g, [space(5, 0.9), space(15, 0.8, theta=1.0)])])
    assert k.f1 == 1.0 and k.mean_iou == pytest.approx(1.0) and k.ap == {"angled": 1.0}


def test_parking_iou_065_rejected():
    # shift along the length: IoU = (5 - s) / (5 + s) = 0.65 at s = 0.35 / 1.65 * 5
    s = 5 * 0.35 / 1.65
    g, d = space(0), space(s, 0.9)
    assert M.oriented_iou(g, d) == pytest.approx(0.65, abs=1e-12)
    assert M.match_parking([g], [d]).tp == []
    for iou, ok in ((0.70001, True), (0.69999, False)):
        s = 5 * (1 - iou) / (1 + iou)
        assert (M.match_parking([g], [space(s, 0.9)]).tp == [(0, 0)]) is ok


def test_parking_mixed_set_of_four():
    gts = [space(0), space(10), space(20), space(30)]
    dets = [space(0, 0.9), space(10.5, 0.8), space(21.0, 0.7), space(60, 0.6)]
    k = M.parking_kpis([(gts, dets)])
    # IoUs: 1, 4.5/5.5, 4/6 (rejected), far miss
    assert k.threshold == 0.8
    assert k.precision == 1.0 and k.recall == 0.5 and k.f1 == pytest.approx(2 / 3)
    assert k.mean_iou == pytest.approx((1 + 9 / 11) / 2)
    assert k.ap["angled"] == pytest.approx(51 / 101)
