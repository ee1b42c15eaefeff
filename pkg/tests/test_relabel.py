import numpy as np
import pytest

from fkd.core import bilinear_sample, cross_entropy
from fkd.label_store import AugRecord, CropBox
from fkd.pipeline import CropSamplerConfig, apply_crop, sample_crop_params
from fkd.relabel import (LabelMap, build_label_map, cell_box, relabel_soft_label, roi_align)
from fkd.teacher import Teacher, TeacherSpec, build_teacher
from fkd.world import WorldSpec, make_image

SPEC = TeacherSpec(seed=2, num_classes=6, resolution=8)


def image(seed=0, size=24):
    return np.random.default_rng(seed).standard_normal((size, size, 3)).astype(np.float32)


class TestBuildLabelMap:
    def test_single_cell_is_full_image(self):
        img = image()
        lm = build_label_map(SPEC, img, 1)
        whole = apply_crop(img, AugRecord(CropBox(0, 0, 1, 1), False), 8)
        assert lm.grid[0, 0].tobytes() == build_teacher(SPEC).logits(whole).tobytes()

    def test_constant_image(self):
        lm = build_label_map(SPEC, np.full((24, 24, 3), 0.7, np.float32), 5)
        assert np.all(lm.grid == lm.grid[0, 0])

    def test_cells_match_direct_calls(self):
        img = image(1, 30)
        lm = build_label_map(SPEC, img, 15)
        t = build_teacher(SPEC)
        for i in (0, 7, 14):
            for j in (0, 3, 14):
                region = apply_crop(img, AugRecord(cell_box(i, j, 15), False), 8)
                assert lm.grid[i, j].tobytes() == t.logits(region).tobytes()

    def test_save_load(self, tmp_path):
        lm = build_label_map(SPEC, image(), 3)
        lm.save(tmp_path / "map.fkdl")
        assert np.array_equal(LabelMap.load(tmp_path / "map.fkdl").grid, lm.grid)


class TestRoiAlign:
    def test_constant_map(self):
        lm = LabelMap(np.full((5, 5, 3), 2.5))
        assert np.all(roi_align(lm, cell_box(2, 3, 5)) == 2.5)
        assert np.all(roi_align(lm, CropBox(0, 0, 1, 1)) == 2.5)

    def test_centered_cell_box_single_sample(self):
        g = np.random.default_rng(40).standard_normal((6, 6, 4))
        lm = LabelMap(g)
        for i in range(6):
            for j in range(6):
                got = roi_align(lm, cell_box(i, j, 6), sampling_ratio=1)
                assert np.allclose(got, g[i, j], rtol=0, atol=1e-9)

    def test_centered_cell_box_on_linear_map(self):
        # 2x2 sub-samples are symmetric about the center; exact wherever the map is affine
        ii, jj = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
        g = np.stack([0.3 * ii - 1.1 * jj + 2.0, 0.5 * jj], axis=-1)
        lm = LabelMap(g)
        for i in range(1, 5):
            for j in range(1, 5):
                assert np.allclose(roi_align(lm, cell_box(i, j, 6)), g[i, j], rtol=0, atol=1e-9)

    @staticmethod
    def _monte_carlo(g, box, rng, n=100_000):
        s = g.shape[0]
        u = rng.random((n, 2))
        xs = (box.x + u[:, 0] * box.w) * s
        ys = (box.y + u[:, 1] * box.h) * s
        return bilinear_sample(g, xs, ys).mean(axis=0)

    def test_matches_monte_carlo(self):
        # four samples track the box average to 2% when cells vary a few percent
        rng = np.random.default_rng(41)
        for _ in range(50):
            g = 10.0 + 0.3 * rng.standard_normal((6, 6, 2))
            w, h = rng.uniform(1 / 6, 2 / 6, 2)
            box = CropBox(rng.uniform(0, 1 - w), rng.uniform(0, 1 - h), w, h)
            mc = self._monte_carlo(g, box, rng)
            assert np.all(np.abs(roi_align(LabelMap(g), box) - mc) / np.abs(mc) < 0.02)

    def test_dense_sampling_converges_on_rough_maps(self):
        rng = np.random.default_rng(45)
        for _ in range(10):
            g = rng.uniform(1.0, 3.0, (6, 6, 2))
            w, h = rng.uniform(0.2, 0.8, 2)
            box = CropBox(rng.uniform(0, 1 - w), rng.uniform(0, 1 - h), w, h)
            mc = self._monte_carlo(g, box, rng)
            dense = roi_align(LabelMap(g), box, sampling_ratio=64)
            assert np.all(np.abs(dense - mc) / mc < 0.003)

    def test_linear_in_map(self):
        rng = np.random.default_rng(42)
        a, b = rng.standard_normal((2, 4, 4, 3))
        box = CropBox(0.1, 0.2, 0.5, 0.6)
        lhs = roi_align(LabelMap(2 * a - 3 * b), box)
        rhs = 2 * roi_align(LabelMap(a), box) - 3 * roi_align(LabelMap(b), box)
        assert np.allclose(lhs, rhs, rtol=0, atol=1e-12)

    def test_degenerate_box_rejected(self):
        box = CropBox(0.1, 0.1, 0.5, 0.5)
        object.__setattr__(box, "w", 0.0)
        with pytest.raises(ValueError, match="degenerate"):
            roi_align(LabelMap(np.zeros((2, 2, 2))), box)


class TestRelabelLabel:
    def test_constant_map_uniform(self):
        p = relabel_soft_label(LabelMap(np.full((3, 3, 4), 1.3)), CropBox(0.2, 0.2, 0.5, 0.5))
        assert np.allclose(p, 0.25, rtol=0, atol=1e-15)

    def test_single_cell_map_ignores_box(self):
        lm = LabelMap(np.random.default_rng(43).standard_normal((1, 1, 5)))
        a = relabel_soft_label(lm, CropBox(0, 0, 0.3, 0.3))
        b = relabel_soft_label(lm, CropBox(0.5, 0.4, 0.5, 0.6))
        assert a.tobytes() == b.tobytes()

    def test_box_inside_class_field(self):
        spec = TeacherSpec(seed=2, num_classes=4, resolution=8)
        fields = np.zeros((4,) + spec.region_shape)
        fields[2] = 1.0
        fields[0] = 0.2
        teacher = Teacher(spec, fields)
        img = np.ones((16, 16, 3), np.float32)
        grid = np.stack([teacher.logits(apply_crop(img, AugRecord(cell_box(i, j, 4), False), 8))
                         for i in range(4) for j in range(4)]).reshape(4, 4, 4)
        p = relabel_soft_label(LabelMap(grid), CropBox(0.3, 0.3, 0.3, 0.3))
        assert int(np.argmax(p)) == 2

    def test_mismatch_on_off_grid_boxes(self):
        world = WorldSpec(seed=4, num_images=5, num_classes=6)
        t = build_teacher(SPEC)
        cfg = CropSamplerConfig(resolution=8)
        rng = np.random.default_rng(44)
        hits = total = 0
        for i in range(5):
            img, _ = make_image(world, i)
            lm = build_label_map(SPEC, img, 15)
            for _ in range(20):
                aug = sample_crop_params(cfg, rng, img.shape)
                exact = t.soft_label(apply_crop(img, aug, 8))
                gap = cross_entropy(exact, relabel_soft_label(lm, aug.box)) - \
                    cross_entropy(exact, exact)
                hits += gap > 0
                total += 1
        assert hits / total >= 0.95
