import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from aeris.datagen import Dataset, build_degraded_set, gen_shapes, preset_config
from aeris.detcodec import BoundingBox, Detection
from aeris.evaluation import (
    EmptyDetector,
    EvalConfig,
    ModelDetector,
    OracleDetector,
    compute_ap,
    evaluate,
    fps_benchmark,
    iou,
    iou_matrix,
    match_and_ap,
    read_results,
    scale_curve,
)
from aeris.model import ModelConfig, build_model
from oracles import ap_101_bruteforce, box_iou


def det(x, y, w, h, score, cls=0):
    return Detection(x, y, w, h, cls, score)


@pytest.fixture(scope="module")
def degraded():
    return build_degraded_set(gen_shapes(40, (128, 128), seed=11), preset_config("multi"), 4)


class TestIoU:
    def test_values(self):
        a = BoundingBox(0, 0, 2, 2)
        assert iou(a, a) == 1.0
        assert iou(a, BoundingBox(5, 5, 1, 1)) == 0.0
        assert iou(a, BoundingBox(1, 0, 2, 2)) == pytest.approx(1 / 3)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 10, size=(5, 4))
        b = rng.uniform(0, 10, size=(4, 4))
        m = iou_matrix(a, b)
        for i in range(5):
            for j in range(4):
                assert m[i, j] == pytest.approx(box_iou(a[i], b[j]), abs=1e-12)


class TestAP:
    def test_exact_detections(self):
        gts = [[BoundingBox(0, 0, 10, 10, 0), BoundingBox(20, 20, 5, 5, 1)]]
        dets = [[det(0, 0, 10, 10, 0.9), det(20, 20, 5, 5, 0.8, 1)]]
        assert match_and_ap(dets, gts, 0.5) == 1.0
        assert compute_ap(dets, gts).AP == 1.0

    def test_no_detections(self):
        assert match_and_ap([[]], [[BoundingBox(0, 0, 10, 10)]], 0.5) == 0.0

    def test_one_hit_one_false_positive(self):
        gts = [[BoundingBox(0, 0, 10, 10), BoundingBox(50, 50, 10, 10)]]
        dets = [[det(0, 0, 10, 10, 0.9), det(100, 100, 10, 10, 0.8)]]
        expected = ap_101_bruteforce([(0.9, True), (0.8, False)], 2)
        assert expected == pytest.approx(51 / 101)
        assert match_and_ap(dets, gts, 0.5) == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=80, deadline=None)
    @given(seed=st.integers(0, 10**6), thresh=st.sampled_from([0.5, 0.75]))
    def test_matches_greedy_oracle(self, seed, thresh):
        rng = np.random.default_rng(seed)
        gts, dets, hits = [], [], []
        for _ in range(3):
            g = [BoundingBox(*rng.uniform(0, 40, 2), *rng.uniform(4, 20, 2)) for _ in range(rng.integers(0, 4))]
            d = []
            for b in g:
                if rng.random() < 0.8:
                    d.append(det(b.x + rng.normal(0, 2), b.y + rng.normal(0, 2), b.w, b.h, rng.uniform()))
            d += [det(*rng.uniform(0, 40, 2), *rng.uniform(4, 20, 2), rng.uniform()) for _ in range(rng.integers(0, 3))]
            taken = set()
            for x in sorted(d, key=lambda t: -t.score):
                cands = [(box_iou((x.x, x.y, x.w, x.h), (b.x, b.y, b.w, b.h)), j) for j, b in enumerate(g)
                         if j not in taken]
                cands = [c for c in cands if c[0] >= thresh]
                if cands:
                    taken.add(max(cands)[1])
                hits.append((x.score, bool(cands)))
            gts.append(g)
            dets.append(d)
        n_pos = sum(len(g) for g in gts)
        got = match_and_ap(dets, gts, thresh)
        if n_pos == 0:
            assert got == 0.0
        else:
            assert got == pytest.approx(ap_101_bruteforce(hits, n_pos), abs=1e-12)

    def test_buckets_partition(self):
        gts = [[BoundingBox(0, 0, 31, 33), BoundingBox(0, 0, 32, 32), BoundingBox(0, 0, 96, 96),
                BoundingBox(0, 0, 95, 97), BoundingBox(0, 0, 2, 3)]]
        res = compute_ap([[]], gts)
        assert res.counts == {"all": 5, "small": 2, "medium": 2, "large": 1}

    def test_empty_bucket_is_nan(self):
        gts = [[BoundingBox(0, 0, 10, 10)]]
        res = compute_ap([[det(0, 0, 10, 10, 0.9)]], gts)
        assert res.AP_s == 1.0 and math.isnan(res.AP_m) and math.isnan(res.AP_l)

    def test_max_dets(self):
        gts = [[BoundingBox(10 * i, 0, 8, 8) for i in range(3)]]
        dets = [[det(10 * i, 0, 8, 8, 0.9 - 0.1 * i) for i in range(3)]]
        assert compute_ap(dets, gts, EvalConfig(max_dets=1)).AP == pytest.approx(34 / 101)

    def test_per_class_average(self):
        gts = [[BoundingBox(0, 0, 10, 10, 0), BoundingBox(30, 30, 10, 10, 1)]]
        res = compute_ap([[det(0, 0, 10, 10, 0.9, 0)]], gts)
        assert res.per_class == {0: 1.0, 1: 0.0} and res.AP == 0.5

    def test_thresholds_must_ascend(self):
        with pytest.raises(ValueError):
            EvalConfig(iou_thresholds=(0.75, 0.5))


class TestEvaluate:
    def test_oracle_is_perfect(self, degraded):
        res = evaluate(OracleDetector(), degraded)
        for k in ("AP", "AP_s", "AP_m", "AP_l"):
            v = getattr(res, k)
            assert v == 1.0 or (math.isnan(v) and res.counts[{"AP_s": "small", "AP_m": "medium",
                                                                "AP_l": "large"}[k]] == 0)

    def test_empty_detector(self, degraded):
        res = evaluate(EmptyDetector(), degraded)
        assert res.AP == 0 and res.AP50 == 0

    def test_unit_upscale_is_plain(self, degraded):
        model = build_model(ModelConfig(num_classes=3), seed=0)
        sub = Dataset(degraded.records[:5], degraded.class_names, degraded.manifest)
        sub.manifest = None
        a = evaluate(ModelDetector(model), sub, EvalConfig(upscale=1), require_manifest=False)
        b = evaluate(ModelDetector(model), sub, EvalConfig(), require_manifest=False)
        assert a.as_dict() == pytest.approx(b.as_dict(), nan_ok=True)

    def test_manifest_required(self, degraded):
        bare = Dataset(degraded.records, degraded.class_names, None)
        with pytest.raises(ValueError):
            evaluate(OracleDetector(), bare)
        mismatched = Dataset(degraded.records[:3], degraded.class_names, degraded.manifest)
        with pytest.raises(ValueError, match="manifest"):
            evaluate(OracleDetector(), mismatched)

    def test_upscaled_detections_mapped_back(self, degraded):
        seen = []

        class Echo:
            def __call__(self, image):
                seen.append(image.shape)
                h, w = image.shape[:2]
                return [det(0, 0, w, h, 1.0)]

        rec = degraded.records[0]
        one = Dataset([rec], degraded.class_names, None)
        r1 = evaluate(Echo(), one, EvalConfig(upscale=1), require_manifest=False)
        r3 = evaluate(Echo(), one, EvalConfig(upscale=3), require_manifest=False)
        assert seen[1][:2] == (3 * seen[0][0], 3 * seen[0][1])
        assert r1.as_dict() == pytest.approx(r3.as_dict(), nan_ok=True)


class TestScaleCurve:
    def test_single_ratio(self, degraded, tmp_path):
        rows = scale_curve(OracleDetector(), degraded, [1], out_dir=tmp_path)
        assert len(rows) == 1
        assert rows[0][1].as_dict() == pytest.approx(evaluate(OracleDetector(), degraded).as_dict(), nan_ok=True)
        assert (tmp_path / "scale_curve.svg").read_text().lstrip().startswith("<?xml")

    def test_oracle_curve_is_flat(self, degraded, tmp_path):
        rows = scale_curve(OracleDetector(), degraded, [1, 2, 4], out_dir=tmp_path, seed=9)
        assert [r.AP for _, r in rows] == [1.0, 1.0, 1.0]
        table = read_results(tmp_path / "scale_curve.csv")
        assert {(r["metric"], r["ratio"]) for r in table} >= {("AP", 1), ("AP_s", 4), ("AP_l", 2)}
        assert all(r["seed"] == 9 for r in table)
        assert [r["value"] for r in table if r["metric"] == "AP"] == [1.0, 1.0, 1.0]


@pytest.fixture(scope="module")
def small():
    return build_model(ModelConfig(backbone_channels=(8, 8, 16, 16, 32), blocks_per_stage=1,
                                   up_channels=(16, 16, 16), head_channels=16), seed=0)


class TestFPS:
    def test_single_run(self, small):
        r = fps_benchmark(small, (64, 64), n_runs=1)
        assert r["n_runs"] == 1 and 0 < r["median"] < float("inf")

    def test_bigger_input_is_slower(self, small):
        torch.set_num_threads(1)
        a = fps_benchmark(small, (128, 128), n_runs=15)
        b = fps_benchmark(small, (256, 256), n_runs=15)
        assert b["median"] < a["median"]
        assert a["p5"] <= a["median"] <= a["p95"]

    def test_no_arrd_work(self, small):
        fps_benchmark(small, (64, 64), n_runs=3, warmup=2)
        assert small.arrd_calls == 0
