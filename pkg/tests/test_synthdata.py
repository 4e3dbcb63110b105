import numpy as np
import pytest

from freg import synthdata as sd
from freg.synthdata import (DegradationError, GenSpec, build_dataset,
                            degrade_mask, gen_ideal_mask, load_dataset,
                            load_png, quantize, rasterize_quads, rect_quad,
                            render_image, save_png)

SPEC = GenSpec(image_size=48)
NO_DEGRADE = GenSpec(image_size=48, jitter_sigma=0.0, blob_count=0, smooth_size=1)
CLEAN_RENDER = GenSpec(image_size=48, texture_contrast=0.0, noise_sigma=0.0)


def iou(a, b):
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    return np.logical_and(a, b).sum() / max(1, np.logical_or(a, b).sum())


def corner_zone_pixels(mask, x0, y0, x1, y1, k=4):
    """Mask pixels inside the four k x k zones at a rectangle's corners."""
    m = np.asarray(mask) > 0.5
    zones = [m[y0:y0 + k, x0:x0 + k], m[y0:y0 + k, x1 - k:x1],
             m[y1 - k:y1, x0:x0 + k], m[y1 - k:y1, x1 - k:x1]]
    return int(sum(z.sum() for z in zones))


class TestIdealMask:
    def test_axis_aligned_rectangle_area_exact(self):
        quad = rect_quad(5, 7, 20, 19)
        mask = rasterize_quads([quad], 48)
        assert mask.sum() == (20 - 5) * (19 - 7)

    def test_union_inclusion_exclusion(self):
        a = rect_quad(4, 4, 20, 16)
        b = rect_quad(12, 10, 30, 28)
        mask = rasterize_quads([a, b], 48)
        area_a = (20 - 4) * (16 - 4)
        area_b = (30 - 12) * (28 - 10)
        overlap = (20 - 12) * (16 - 10)
        assert mask.sum() == area_a + area_b - overlap

    def test_same_seed_identical(self):
        m1, q1 = gen_ideal_mask(SPEC, 123)
        m2, q2 = gen_ideal_mask(SPEC, 123)
        np.testing.assert_array_equal(m1, m2)
        assert all(np.array_equal(a, b) for a, b in zip(q1, q2))

    def test_mask_is_binary_single_component(self):
        from scipy import ndimage
        for seed in range(12):
            mask, _ = gen_ideal_mask(SPEC, seed)
            assert set(np.unique(mask)) <= {0.0, 1.0}
            _, n = ndimage.label(mask > 0.5)
            assert n == 1
            fill = mask.mean()
            assert SPEC.fill_min <= fill <= SPEC.fill_max


class TestDegrade:
    def test_zero_strength_identity(self):
        mask, _ = gen_ideal_mask(NO_DEGRADE, 5)
        out = degrade_mask(mask, NO_DEGRADE, 6)
        np.testing.assert_array_equal(out, mask)

    def test_jitter_only_iou_over_100_seeds(self):
        spec = GenSpec(image_size=48, jitter_sigma=1.0, blob_count=0, smooth_size=1)
        square = rasterize_quads([rect_quad(4, 4, 44, 44)], 48)
        vals = [iou(degrade_mask(square, spec, s), square) for s in range(100)]
        assert min(vals) > 0.8

    def test_corner_rounding(self):
        spec = GenSpec(image_size=48, jitter_sigma=0.0, blob_count=0, smooth_size=5)
        square = rasterize_quads([rect_quad(8, 8, 40, 40)], 48)
        out = degrade_mask(square, spec, 7)
        before = corner_zone_pixels(square, 8, 8, 40, 40)
        after = corner_zone_pixels(quantize(out) >= 128, 8, 8, 40, 40)
        assert after < before
        assert iou(out, square) >= spec.iou_floor

    def test_iou_floor_enforced(self):
        for seed in range(15):
            mask, _ = gen_ideal_mask(SPEC, seed)
            out = degrade_mask(mask, SPEC, seed + 1000)
            assert iou(quantize(out) >= 128, mask) >= SPEC.iou_floor
            assert 0.0 <= out.min() and out.max() <= 1.0

    def test_unsatisfiable_floor_raises(self):
        # obliterating degradation cannot keep half the footprint
        spec = GenSpec(image_size=48, jitter_sigma=24.0, blob_count=24,
                       blob_radius=12.0, iou_floor=0.98)
        mask, _ = gen_ideal_mask(spec, 3)
        with pytest.raises(DegradationError):
            degrade_mask(mask, spec, 4)

    def test_non_binary_input_rejected(self):
        with pytest.raises(ValueError):
            degrade_mask(np.full((8, 8), 0.5, np.float32), SPEC, 0)


class TestRender:
    def test_two_tone_when_noiseless(self):
        mask, _ = gen_ideal_mask(CLEAN_RENDER, 9)
        img = render_image(mask, CLEAN_RENDER, 10)
        inside = img[:, mask > 0.5]
        outside = img[:, mask <= 0.5]
        for c in range(3):
            assert set(np.unique(inside[c])) == {np.float32(CLEAN_RENDER.roof[c])}
            assert set(np.unique(outside[c])) == {np.float32(CLEAN_RENDER.ground[c])}

    def test_roof_mean_statistics(self):
        spec = GenSpec(image_size=48, texture_contrast=0.0, noise_sigma=0.04)
        mask, _ = gen_ideal_mask(spec, 11)
        img = render_image(mask, spec, 12)
        n = int((mask > 0.5).sum())
        for c in range(3):
            m = img[c, mask > 0.5].mean(dtype=np.float64)
            assert abs(m - spec.roof[c]) < 2 * spec.noise_sigma / np.sqrt(n) + 1e-3

    def test_seeded_determinism(self):
        mask, _ = gen_ideal_mask(SPEC, 13)
        a = render_image(mask, SPEC, 14)
        b = render_image(mask, SPEC, 14)
        np.testing.assert_array_equal(a, b)

    def test_boundary_gradient_dominates(self):
        from scipy import ndimage
        spec = GenSpec(image_size=48, noise_sigma=0.03)
        for seed in range(5):
            mask, _ = gen_ideal_mask(spec, seed)
            img = render_image(mask, spec, seed + 50)
            lum = img.mean(axis=0)
            gy, gx = np.gradient(lum.astype(np.float64))
            mag = np.hypot(gy, gx)
            m = mask > 0.5
            boundary = m ^ ndimage.binary_erosion(m)
            boundary |= ndimage.binary_dilation(m) ^ m
            assert mag[boundary].mean() > 3.0 * mag[~boundary].mean()


class TestTripleInvariants:
    def test_triples_hold_floor_and_types(self):
        for seeds in sd._sample_seeds(99, 8):
            t = sd.make_triple(SPEC, seeds)
            assert t.x.shape == (1, 48, 48) and t.z.shape == (3, 48, 48)
            assert set(np.unique(t.y)) <= {0.0, 1.0}
            assert 0.0 <= t.x.min() and t.x.max() <= 1.0
            assert iou(t.x[0], t.y[0]) >= 0.5


class TestPngIO:
    def test_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        gray = rng.random((1, 8, 8)).astype(np.float32)
        rgb = rng.random((3, 8, 8)).astype(np.float32)
        save_png(tmp_path / "g.png", gray)
        save_png(tmp_path / "c.png", rgb)
        back_g = load_png(tmp_path / "g.png")
        back_c = load_png(tmp_path / "c.png")
        np.testing.assert_array_equal(quantize(back_g), quantize(gray))
        np.testing.assert_array_equal(quantize(back_c), quantize(rgb))
        assert back_g.shape == (1, 8, 8) and back_c.shape == (3, 8, 8)


class TestDataset:
    def test_build_and_split(self, tmp_path):
        out = build_dataset(10, SPEC, seed=1, out_dir=tmp_path / "ds")
        ds = load_dataset(out)
        assert len(ds) == 10
        assert len(ds.train_idx) == 8 and len(ds.val_idx) == 1 and len(ds.test_idx) == 1
        assert (out / "manifest.txt").exists()
        assert len(list(out.glob("*.png"))) == 30

    def test_checksums_verify_and_detect(self, tmp_path):
        out = build_dataset(3, SPEC, seed=2, out_dir=tmp_path / "ds")
        load_dataset(out, verify=True)
        target = out / "sample_00001_x.png"
        raw = bytearray(target.read_bytes())
        raw[-1] ^= 0x01
        target.write_bytes(bytes(raw))
        with pytest.raises(sd.DatasetError, match="checksum"):
            load_dataset(out, verify=True)

    def test_regeneration_bit_identical(self, tmp_path):
        a = build_dataset(4, SPEC, seed=3, out_dir=tmp_path / "a")
        manifest = sd.read_manifest(a)
        spec = GenSpec.from_manifest(manifest)
        assert spec == SPEC
        b = build_dataset(int(manifest["count"]), spec,
                          seed=int(manifest["seed"]), out_dir=tmp_path / "b")
        for png in sorted(p.name for p in a.glob("*.png")):
            assert (a / png).read_bytes() == (b / png).read_bytes()

    def test_split_sizes_scale(self):
        assert sd.split_sizes(500) == (400, 50, 50)
        assert sd.split_sizes(10) == (8, 1, 1)
