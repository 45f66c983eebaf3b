import csv
import json

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

import oracles
from lesionloc.label_correction import correct_by_count, no_correction
from lesionloc.lesion_ops import LesionComponent, mask_components
from lesionloc.metrics import (
    ANY_OVERLAP,
    DetectionTally,
    FrocCurve,
    MatchCriterion,
    default_thresholds,
    detection_sweep,
    dsc,
    froc,
    froc_to_json,
    iou_above,
    match_detections,
    pseudo_label_quality,
    save_froc_csv,
    save_froc_svg,
    threshold_at_sensitivity,
)
from lesionloc.volume import Volume3D, VolumeKind


def mask(data, spacing=(1.0, 1.0, 1.0)):
    return Volume3D(np.asarray(data, dtype=np.uint8), spacing, VolumeKind.BINARY_MASK)


def prob(data, spacing=(1.0, 1.0, 1.0)):
    return Volume3D(np.asarray(data, dtype=np.float64), spacing,
                    VolumeKind.PROBABILITY_MAP)


def comp(voxels, peak=0.8):
    voxels = frozenset(voxels)
    arr = np.array(sorted(voxels), dtype=float)
    return LesionComponent(voxels=voxels, peak_prob=peak,
                           centroid=tuple(arr.mean(axis=0)),
                           volume_mm3=float(len(voxels)))


def line_comp(x0, x1, peak=0.8):
    return comp([(x, 0, 0) for x in range(x0, x1)], peak)


# --- DSC ---------------------------------------------------------------------

def test_dsc_identical_masks():
    rng = np.random.default_rng(0)
    m = mask(rng.integers(0, 2, size=(6, 6, 6)))
    assert dsc(m, m) == 1.0


def test_dsc_disjoint_masks():
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    a[0, 0, 0] = 1
    b[3, 3, 3] = 1
    assert dsc(mask(a), mask(b)) == 0.0


def test_dsc_both_empty_is_one():
    z = mask(np.zeros((4, 4, 4)))
    assert dsc(z, z) == 1.0


def test_dsc_hand_counted():
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    a[0, 0, 0] = a[0, 0, 1] = 1            # |A| = 2
    b[0, 0, 1] = b[1, 1, 1] = b[2, 2, 2] = 1  # |B| = 3, intersection 1
    assert dsc(mask(a), mask(b)) == pytest.approx(2 / 5)


def test_dsc_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(60):
        a = rng.integers(0, 2, size=(8, 8, 8))
        b = rng.integers(0, 2, size=(8, 8, 8))
        got = dsc(mask(a), mask(b))
        assert abs(got - oracles.brute_dsc(a, b)) <= 1e-12
        assert got == dsc(mask(b), mask(a))


def test_dsc_rejects_mismatch():
    with pytest.raises(ValueError, match="dims"):
        dsc(mask(np.zeros((4, 4, 4))), mask(np.zeros((4, 4, 5))))
    with pytest.raises(ValueError, match="mask"):
        dsc(prob(np.zeros((4, 4, 4))), mask(np.zeros((4, 4, 4))))


# --- match criteria -------------------------------------------------------------

def test_any_overlap_needs_one_voxel():
    a = frozenset({(0, 0, 0), (1, 0, 0)})
    assert ANY_OVERLAP.hits(a, frozenset({(1, 0, 0)}))
    assert not ANY_OVERLAP.hits(a, frozenset({(2, 0, 0)}))
    assert ANY_OVERLAP.name == "any_overlap"


def test_iou_criterion_is_strict():
    # 5 and 6 voxels sharing exactly one: IoU = 1/10, not above 0.1
    a = frozenset((x, 0, 0) for x in range(5))
    b = frozenset((x, 0, 0) for x in range(4, 10))
    assert oracles.brute_iou(a, b) == pytest.approx(0.1)
    assert not iou_above(0.1).hits(a, b)
    # 4 and 6 sharing one: IoU = 1/9 > 0.1
    c = frozenset((x, 0, 0) for x in range(1, 5))
    assert iou_above(0.1).hits(c, b)
    assert iou_above(0.1).name == "iou_above_0.1"


def test_criterion_bounds():
    with pytest.raises(ValueError):
        MatchCriterion(min_iou=1.0)
    with pytest.raises(ValueError):
        MatchCriterion(min_iou=-0.1)


# --- detection tallies ---------------------------------------------------------------

def test_identical_lists_tally_clean():
    gt = [line_comp(0, 3), line_comp(10, 12)]
    t = match_detections(gt, gt)
    assert (t.tp, t.fn, t.fp) == (2, 0, 0)
    assert t.sensitivity == 1.0 and t.fp_per_case == 0.0


def test_small_overlap_flips_under_strict_criterion():
    gt = [line_comp(0, 10)]
    pred = [line_comp(9, 19)]  # shares one voxel, IoU = 1/19
    loose = match_detections(gt, pred, ANY_OVERLAP)
    assert (loose.tp, loose.fn, loose.fp) == (1, 0, 0)
    strict = match_detections(gt, pred, iou_above(0.1))
    assert (strict.tp, strict.fn, strict.fp) == (0, 1, 1)


def test_one_prediction_may_confirm_two_lesions():
    gt = [line_comp(0, 2), line_comp(4, 6)]
    pred = [line_comp(0, 6)]  # spans both
    t = match_detections(gt, pred)
    assert (t.tp, t.fn, t.fp) == (2, 0, 0)


def test_empty_sides():
    gt = [line_comp(0, 2)]
    t = match_detections(gt, [])
    assert (t.tp, t.fn, t.fp) == (0, 1, 0)
    t = match_detections([], gt)
    assert (t.tp, t.fn, t.fp) == (0, 0, 1)
    t = match_detections([], [])
    assert t.sensitivity == 1.0  # nothing to find


def random_components(rng, n_max=4):
    comps = []
    for _ in range(int(rng.integers(0, n_max + 1))):
        k = int(rng.integers(1, 6))
        vox = {tuple(int(x) for x in v) for v in rng.integers(0, 6, size=(k, 3))}
        comps.append(comp(vox, float(rng.uniform(0.5, 1.0))))
    return comps


@pytest.mark.parametrize("min_iou", [None, 0.1, 0.3])
def test_match_detections_against_recount(min_iou):
    rng = np.random.default_rng(17)
    criterion = ANY_OVERLAP if min_iou is None else iou_above(min_iou)
    for _ in range(80):
        gt = random_components(rng)
        pred = random_components(rng)
        t = match_detections(gt, pred, criterion)
        want = oracles.recount_case([c.voxels for c in gt],
                                    [c.voxels for c in pred], min_iou)
        assert (t.tp, t.fn, t.fp) == want


def test_strict_tp_never_exceeds_loose_tp():
    rng = np.random.default_rng(23)
    for _ in range(40):
        gt = random_components(rng)
        pred = random_components(rng)
        loose = match_detections(gt, pred, ANY_OVERLAP)
        strict = match_detections(gt, pred, iou_above(0.1))
        assert strict.tp <= loose.tp


def test_removing_a_prediction_moves_counts_one_way():
    rng = np.random.default_rng(29)
    for _ in range(40):
        gt = random_components(rng)
        pred = random_components(rng)
        if not pred:
            continue
        full = match_detections(gt, pred)
        drop = int(rng.integers(len(pred)))
        fewer = match_detections(gt, pred[:drop] + pred[drop + 1:])
        assert fewer.fn >= full.fn
        assert fewer.fp <= full.fp


def test_tally_addition_and_validation():
    a = DetectionTally(tp=2, fn=1, fp=3, per_case_fp=(3,))
    b = DetectionTally(tp=1, fn=0, fp=0, per_case_fp=(0,))
    c = a + b
    assert (c.tp, c.fn, c.fp) == (3, 1, 3)
    assert c.per_case_fp == (3, 0)
    assert c.n_cases == 2
    assert c.sensitivity == pytest.approx(3 / 4)
    assert c.fp_per_case == pytest.approx(1.5)
    with pytest.raises(ValueError, match="non-negative"):
        DetectionTally(tp=-1, fn=0, fp=0, per_case_fp=())
    with pytest.raises(ValueError, match="per-case"):
        DetectionTally(tp=0, fn=0, fp=2, per_case_fp=(1,))


# --- fROC curves -----------------------------------------------------------------------

def test_curve_accessors():
    curve = FrocCurve([(0.1, 0.9, 2.0), (0.3, 0.7, 1.0), (0.5, 0.5, 0.5)])
    assert len(curve) == 3
    assert curve.thresholds == (0.1, 0.3, 0.5)
    assert curve.sensitivities == (0.9, 0.7, 0.5)
    assert curve.fp_rates == (2.0, 1.0, 0.5)
    assert curve == FrocCurve(list(curve))


@pytest.mark.parametrize(
    "points, msg",
    [
        ([], "at least one"),
        ([(0.0, 0.5, 1.0)], "threshold"),
        ([(1.2, 0.5, 1.0)], "threshold"),
        ([(0.5, 1.5, 1.0)], "sensitivity"),
        ([(0.5, 0.5, -1.0)], "negative"),
        ([(0.3, 0.5, 1.0), (0.3, 0.5, 1.0)], "increasing"),
        ([(0.3, 0.5, 1.0), (0.4, 0.6, 1.0)], "sensitivity increased"),
        ([(0.3, 0.5, 1.0), (0.4, 0.5, 2.0)], "fp_per_case increased"),
    ],
)
def test_curve_rejects_bad_points(points, msg):
    with pytest.raises(ValueError, match=msg):
        FrocCurve(points)


def blobby_cases(n_cases=4, dims=(24, 24, 12)):
    """Separated single-peak blobs; any-overlap sweeps over them are monotone."""
    centers = [(5, 5, 3), (16, 17, 8), (18, 5, 4)]
    cases = []
    for i in range(n_cases):
        data = np.zeros(dims)
        gt = np.zeros(dims, dtype=np.uint8)
        for j, c in enumerate(centers):
            imp = np.zeros(dims)
            imp[c] = 1.0
            blob = gaussian_filter(imp, sigma=1.5)
            blob /= blob.max()
            blob[blob < 0.05] = 0.0
            peak = 0.55 + 0.1 * j + 0.02 * i
            data = np.maximum(data, blob * peak)
            if j < 2:  # third blob is a planted false positive
                gt[blob * peak >= 0.3] = 1
        cases.append((mask(gt), prob(data)))
    return cases


def test_perfect_predictor_sweep():
    gt = np.zeros((10, 10, 5), dtype=np.uint8)
    gt[2:4, 2:4, 1:3] = 1
    gt[7:9, 7:9, 2:4] = 1
    cases = [(mask(gt), prob(gt.astype(np.float64)))]
    curve = froc(cases, [0.25, 0.5, 1.0])
    for _, s, f in curve:
        assert s == 1.0 and f == 0.0


def test_all_zero_maps_sweep():
    gt = np.zeros((8, 8, 4), dtype=np.uint8)
    gt[1:3, 1:3, 1:3] = 1
    cases = [(mask(gt), prob(np.zeros((8, 8, 4))))]
    curve = froc(cases, [0.2, 0.6])
    for _, s, f in curve:
        assert s == 0.0 and f == 0.0


def test_sweep_matches_recount_oracle():
    cases = blobby_cases()
    thresholds = [0.2, 0.4, 0.6, 0.8]
    rows = detection_sweep(cases, thresholds)
    for (t, s, f) in rows:
        tp = fn = fp = 0
        for gt_vol, prob_vol in cases:
            gt_sets = oracles.flood_components(gt_vol.data, 1)
            pred_sets = oracles.flood_components(prob_vol.data, t)
            dtp, dfn, dfp = oracles.recount_case(gt_sets, pred_sets, None)
            tp, fn, fp = tp + dtp, fn + dfn, fp + dfp
        assert s == pytest.approx(tp / (tp + fn))
        assert f == pytest.approx(fp / len(cases))


def test_froc_on_blobs_is_monotone_and_fp_decays():
    curve = froc(blobby_cases(), [0.1, 0.3, 0.5, 0.7, 0.9])
    assert isinstance(curve, FrocCurve)
    assert curve.fp_rates[0] >= 1.0       # planted FP blob present at low threshold
    assert curve.fp_rates[-1] == 0.0      # gone above its peak
    assert curve.sensitivities[0] == 1.0


def test_strict_sweep_returns_raw_rows():
    rows = detection_sweep(blobby_cases(), [0.2, 0.5, 0.8], criterion=iou_above(0.1))
    assert isinstance(rows, list)
    assert all(len(r) == 3 for r in rows)


def test_sweep_input_validation():
    cases = blobby_cases(n_cases=1)
    with pytest.raises(ValueError, match="case"):
        detection_sweep([], [0.5])
    with pytest.raises(ValueError, match="threshold"):
        detection_sweep(cases, [])
    with pytest.raises(ValueError, match="increasing"):
        detection_sweep(cases, [0.5, 0.5])


# --- operating point ----------------------------------------------------------------------

def test_threshold_at_sensitivity_rule_trace():
    curve = FrocCurve([(0.1, 0.9, 2.0), (0.3, 0.7, 1.0), (0.5, 0.5, 0.5)])
    assert threshold_at_sensitivity(curve, 0.6) == 0.3
    assert threshold_at_sensitivity(curve, 0.0) == 0.5
    assert threshold_at_sensitivity(curve, 0.9) == 0.1
    with pytest.raises(ValueError, match="unreachable"):
        threshold_at_sensitivity(curve, 0.95)


def test_threshold_selection_agrees_with_linear_scan():
    rng = np.random.default_rng(31)
    for _ in range(30):
        n = int(rng.integers(2, 8))
        ts = np.sort(rng.uniform(0.05, 0.95, size=n))
        ts = np.unique(np.round(ts, 3))
        sens = np.sort(rng.uniform(0, 1, size=len(ts)))[::-1]
        fps = np.sort(rng.uniform(0, 3, size=len(ts)))[::-1]
        curve = FrocCurve(list(zip(ts, sens, fps)))
        target = float(rng.uniform(0, 1))
        want = [t for t, s, _ in curve.points if s >= target]
        if want:
            assert threshold_at_sensitivity(curve, target) == want[-1]
        else:
            with pytest.raises(ValueError):
                threshold_at_sensitivity(curve, target)


# --- pseudo-label quality summary -----------------------------------------------------------

def test_quality_perfect_corrections():
    gt = [line_comp(0, 3), line_comp(8, 11)]
    cases = [(gt, no_correction(gt)) for _ in range(4)]
    out = pseudo_label_quality(cases)
    assert out["criterion"] == "iou_above_0.1"
    assert out["sensitivity"] == 1.0
    assert out["fp_per_case"] == 0.0
    assert out["excluded_fraction"] == 0.0
    assert out["sensitivity_all_cases"] == 1.0
    assert out["n_cases"] == 4 and out["n_retained"] == 4


def test_quality_half_excluded():
    gt = [line_comp(0, 3)]
    good = (gt, no_correction(gt))
    # excluded case whose correction kept nothing
    bad = (gt, correct_by_count([], 1))
    out = pseudo_label_quality([good, bad])
    assert out["excluded_fraction"] == 0.5
    assert out["sensitivity"] == 1.0
    # the excluded case's missed lesion drags the all-case number down
    assert out["sensitivity_all_cases"] == pytest.approx(0.5)


def test_quality_counts_fp_on_retained_only():
    gt = [line_comp(0, 3)]
    stray = line_comp(20, 23)
    noisy = (gt, no_correction(gt + [stray]))
    out = pseudo_label_quality([noisy])
    assert out["fp_per_case"] == 1.0
    assert out["sensitivity"] == 1.0


def test_quality_errors():
    with pytest.raises(ValueError, match="no cases"):
        pseudo_label_quality([])
    gt = [line_comp(0, 3)]
    with pytest.raises(ValueError, match="excluded"):
        pseudo_label_quality([(gt, correct_by_count([], 1))])


# --- threshold ladders and export -------------------------------------------------------------

def test_default_ladder():
    ts = default_thresholds()
    assert ts == [round(0.05 * k, 2) for k in range(1, 20)]


def test_ladder_merges_small_value_sets():
    m = prob(np.array([[[0.0, 0.62], [0.3, 0.3]]]))
    ts = default_thresholds([m])
    assert 0.62 in ts and 0.3 in ts
    assert ts == sorted(ts)


def test_ladder_ignores_large_value_sets():
    rng = np.random.default_rng(7)
    m = prob(rng.random((8, 8, 8)))
    assert default_thresholds([m]) == default_thresholds()


def test_csv_round_trip(tmp_path):
    curve = FrocCurve([(0.1, 0.9, 2.0), (0.3, 0.7, 1.0)])
    path = tmp_path / "curve.csv"
    save_froc_csv(curve, path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["threshold", "sensitivity", "fp_per_case"]
    assert [[float(x) for x in r] for r in rows[1:]] == [[0.1, 0.9, 2.0], [0.3, 0.7, 1.0]]


def test_json_export():
    curve = FrocCurve([(0.1, 0.9, 2.0)])
    doc = froc_to_json(curve)
    assert doc == {"points": [{"threshold": 0.1, "sensitivity": 0.9, "fp_per_case": 2.0}]}
    json.dumps(doc)  # must be serializable as-is


def test_svg_write_is_deterministic(tmp_path):
    curves = {
        "corrected": FrocCurve([(0.1, 0.9, 1.0), (0.5, 0.7, 0.2)]),
        "raw": FrocCurve([(0.1, 0.95, 2.5), (0.5, 0.8, 1.5)]),
    }
    p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
    save_froc_svg(curves, p1)
    save_froc_svg(curves, p2)
    b1, b2 = p1.read_bytes(), p2.read_bytes()
    assert b1 == b2
    assert b"<svg" in b1 and b"sensitivity" in b1
