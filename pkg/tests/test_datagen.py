import json

import numpy as np
import pytest

from aeris.datagen import (
    PRESETS,
    CocoFormatError,
    Dataset,
    DatasetManifest,
    build_degraded_set,
    draw_shape,
    gen_shapes,
    load_coco_json,
    load_dataset,
    load_manifest,
    parse_coco,
    preset_config,
    replay_manifest,
    save_dataset,
    shape_coverage,
    to_coco_json,
)
from aeris.degradation import DegradationConfig, identity_config
from aeris.detcodec import BoundingBox


@pytest.fixture(scope="module")
def small_set():
    return gen_shapes(30, (128, 128), seed=3)


class TestShapes:
    def test_circle_extent(self):
        img, box = draw_shape(np.zeros((64, 64, 3), np.float32), "circle", (32, 32), 10, (1, 1, 1))
        assert (box.x, box.y, box.w, box.h) == (22, 22, 20, 20)
        ys, xs = np.nonzero(img[:, :, 0])
        assert (xs.min(), xs.max() + 1, ys.min(), ys.max() + 1) == (22, 42, 22, 42)

    @pytest.mark.parametrize("kind", ["circle", "square", "triangle"])
    def test_coverage_fills_its_box(self, kind):
        for variant in range(4):
            cov = shape_coverage(kind, 10, 12, 16, (40, 40), variant)
            ys, xs = np.nonzero(cov)
            assert (xs.min(), xs.max(), ys.min(), ys.max()) == (10, 25, 12, 27)
            assert cov.max() == 1.0

    def test_coverage_areas(self):
        assert shape_coverage("square", 0, 0, 16, (32, 32)).sum() == 256
        assert shape_coverage("circle", 0, 0, 32, (40, 40)).sum() == pytest.approx(np.pi * 256, rel=0.01)
        assert shape_coverage("triangle", 0, 0, 32, (40, 40)).sum() == pytest.approx(512, rel=0.03)

    def test_unknown_shape(self):
        with pytest.raises(ValueError):
            shape_coverage("hexagon", 0, 0, 8, (16, 16))

    def test_seeded_generation_is_bit_identical(self):
        a, b = gen_shapes(5, (64, 64), seed=8), gen_shapes(5, (64, 64), seed=8)
        for ra, rb in zip(a.records, b.records):
            assert np.array_equal(ra.image, rb.image) and ra.boxes == rb.boxes
        c = gen_shapes(5, (64, 64), seed=9)
        assert not np.array_equal(a.records[0].image, c.records[0].image)

    def test_images_independent_of_count(self):
        a, b = gen_shapes(3, (64, 64), seed=1), gen_shapes(6, (64, 64), seed=1)
        assert np.array_equal(a.records[2].image, b.records[2].image)

    def test_records_are_valid(self, small_set):
        for rec in small_set.records:
            assert rec.image.shape == (128, 128, 3) and rec.image.dtype == np.float32
            assert 0 <= rec.image.min() and rec.image.max() <= 1
            assert 1 <= len(rec.boxes) <= 6
            for b in rec.boxes:
                assert b.x >= 0 and b.y >= 0 and b.x + b.w <= 128 and b.y + b.h <= 128
                assert b.class_id in (0, 1, 2)

    def test_every_bucket_populated(self):
        ds = gen_shapes(2000, (128, 128), seed=1000)
        areas = np.array([b.area for r in ds.records for b in r.boxes])
        assert (areas < 32**2).any() and ((areas >= 32**2) & (areas < 96**2)).any() and (areas >= 96**2).any()

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            gen_shapes(0)


class TestDegradedSets:
    def test_identity_config_keeps_dataset(self, small_set):
        out = build_degraded_set(small_set, identity_config(), seed=1)
        for a, b in zip(small_set.records, out.records):
            assert np.array_equal(a.image, b.image) and a.boxes == b.boxes

    def test_replay_is_bit_identical(self, small_set):
        out = build_degraded_set(small_set, preset_config("multi"), seed=7)
        again = replay_manifest(small_set, DatasetManifest.from_json(json.loads(json.dumps(out.manifest.to_json()))))
        for a, b in zip(out.records, again.records):
            assert np.array_equal(a.image, b.image) and a.boxes == b.boxes

    def test_scale_distribution(self):
        ds = gen_shapes(100, (32, 32), seed=2)
        out = build_degraded_set(ds, DegradationConfig(), seed=0)
        s = np.array([p.scale for p in out.manifest.params.values()])
        assert abs(s.mean() - 2.5) <= 0.3 and s.min() >= 1 and s.max() <= 4

    def test_boxes_follow_scale(self, small_set):
        out = build_degraded_set(small_set, preset_config("down4"), seed=0)
        for a, b in zip(small_set.records, out.records):
            assert b.image.shape == (32, 32, 3)
            assert [(x.x, x.w) for x in b.boxes] == [(x.x / 4, x.w / 4) for x in a.boxes]

    @pytest.mark.parametrize("name,sigma", [("noise15", 15 / 255), ("noise25", 25 / 255), ("noise50", 50 / 255)])
    def test_fixed_noise_presets(self, small_set, name, sigma):
        out = build_degraded_set(small_set, preset_config(name), seed=0)
        assert {p.sigma for p in out.manifest.params.values()} == {sigma}
        assert {p.scale for p in out.manifest.params.values()} == {1.0}

    def test_multi_preset_always_blurs(self, small_set):
        out = build_degraded_set(small_set, preset_config("multi"), seed=0)
        assert {p.kernel.kind for p in out.manifest.params.values()} <= {"isotropic", "anisotropic"}

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            preset_config("fog")
        assert set(PRESETS) >= {"multi", "noise25", "down4"}

    def test_replay_rejects_foreign_manifest(self, small_set):
        out = build_degraded_set(small_set, preset_config("multi"), seed=0)
        other = Dataset(small_set.records[:5], small_set.class_names, small_set.manifest)
        with pytest.raises(ValueError):
            replay_manifest(other, out.manifest)


class TestCoco:
    def test_roundtrip_records(self, small_set):
        ds, report = parse_coco(json.loads(json.dumps(to_coco_json(small_set))))
        assert not report.dropped
        assert ds.class_names == small_set.class_names
        for a, b in zip(small_set.records, ds.records):
            assert (a.image_id, a.file_name, a.width, a.height, a.boxes) == (b.image_id, b.file_name, b.width,
                                                                            b.height, b.boxes)

    def test_disk_roundtrip(self, small_set, tmp_path):
        out = build_degraded_set(small_set, preset_config("multi"), seed=2)
        save_dataset(out, tmp_path)
        back = load_dataset(tmp_path)
        assert back.manifest.params == out.manifest.params
        for a, b in zip(out.records, back.records):
            assert a.boxes == b.boxes
            assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6
        assert load_manifest(tmp_path / "manifest.json").seed == 2

    def test_empty_annotations(self):
        data = {"images": [{"id": 1, "file_name": "a.png", "width": 4, "height": 4}], "annotations": [],
                "categories": [{"id": 1, "name": "x"}]}
        ds, report = parse_coco(data)
        assert len(ds) == 1 and ds.records[0].boxes == [] and not report.dropped

    def test_zero_width_dropped(self):
        data = {"images": [{"id": 1, "file_name": "a.png", "width": 40, "height": 40}],
                "annotations": [{"image_id": 1, "category_id": 1, "bbox": [1, 1, 0, 5]},
                                {"image_id": 1, "category_id": 1, "bbox": [1, 1, 5, 5]},
                                {"image_id": 1, "category_id": 1, "bbox": [1, 1, 5, 5], "iscrowd": 1}],
                "categories": [{"id": 1, "name": "x"}]}
        ds, report = parse_coco(data)
        assert ds.records[0].boxes == [BoundingBox(1, 1, 5, 5, 0)]
        assert [i for i, _ in report.dropped] == [0] and report.crowd == 1

    @pytest.mark.parametrize("data,where", [
        ({"images": [], "annotations": {}}, "annotations"),
        ({"images": [{"id": 1}], "annotations": [], "categories": []}, r"images\[0\]"),
        ({"images": [], "annotations": [{"image_id": 1, "category_id": 1, "bbox": [1, 2]}],
          "categories": []}, r"annotations\[0\]\.bbox"),
    ])
    def test_malformed_reports_location(self, data, where):
        with pytest.raises(CocoFormatError, match=where):
            parse_coco(data)

    def test_bad_json_location(self, tmp_path):
        f = tmp_path / "a.json"
        f.write_text('{"images": [\n  1,,\n]}')
        with pytest.raises(CocoFormatError, match=r"a\.json:2:"):
            load_coco_json(f)

    def test_missing_image_file_reported(self, small_set, tmp_path):
        sub = Dataset(small_set.records[:3], small_set.class_names, None)
        save_dataset(sub, tmp_path)
        (tmp_path / "images" / sub.records[1].file_name).unlink()
        ds, report = load_coco_json(tmp_path / "annotations.json", load_images=True)
        assert report.missing_images == [sub.records[1].file_name] and len(ds) == 2
