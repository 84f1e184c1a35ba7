import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softseg.errors import FormatError, ShapeError, StateError
from softseg.phantom import Ellipse, soft_fraction
from softseg.volio import (
    Kind,
    Provenance,
    SoftMask,
    Subject,
    Volume,
    center_crop,
    center_crop_array,
    load_volume,
    preprocess,
    reassemble,
    resample,
    resample_array,
    resampled_dims,
    save_volume,
    slices,
    to_native,
    uncrop_array,
    zscore_array,
    zscore_normalize,
)


class TestVolumeTypes:
    def test_two_dimensional_data_is_promoted(self):
        assert Volume(np.zeros((4, 5))).dims == (4, 5, 1)

    @pytest.mark.parametrize("spacing", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0)])
    def test_bad_spacing(self, spacing):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2, 2)), spacing)

    def test_soft_mask_clamps(self):
        m = SoftMask(np.array([[[-0.2, 0.5, 1.3]]]))
        np.testing.assert_array_equal(m.data.ravel(), [0.0, 0.5, 1.0])

    def test_subject_grid_must_match(self):
        gt = SoftMask(np.zeros((4, 4, 2)), (1.0, 1.0, 2.0))
        with pytest.raises(ShapeError):
            Subject("s", [Volume(np.zeros((4, 4, 2)), (0.5, 1.0, 2.0))], gt)

    def test_hard_gt_threshold(self):
        gt = SoftMask(np.array([[[0.49, 0.5, 0.9]]]))
        s = Subject("s", [Volume(np.zeros((1, 1, 3)))], gt)
        np.testing.assert_array_equal(s.hard_gt.ravel(), [0, 1, 1])


class TestContainer:
    def test_round_trip_is_bitwise(self, tmp_path, rng):
        v = Volume(rng.normal(size=(3, 4, 5)).astype(np.float32), (0.25, 0.5, 2.0), contrast_id="T2s")
        save_volume(v, tmp_path / "img")
        back = load_volume(tmp_path / "img.vol")
        assert back.dims == v.dims and back.spacing_mm == v.spacing_mm
        assert back.orientation == "RPI" and back.contrast_id == "T2s"
        assert back.data.tobytes() == v.data.tobytes()

    def test_x_fastest_layout(self, tmp_path):
        data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        save_volume(Volume(data), tmp_path / "v")
        raw = np.frombuffer((tmp_path / "v.vol").read_bytes(), dtype="<f4")
        assert raw[:2].tolist() == [data[0, 0, 0], data[1, 0, 0]]

    def test_soft_mask_kind_survives(self, tmp_path):
        save_volume(SoftMask(np.full((2, 2, 1), 0.3)), tmp_path / "gt")
        assert isinstance(load_volume(tmp_path / "gt"), SoftMask)

    def test_short_payload(self, tmp_path):
        save_volume(Volume(np.zeros((4, 4, 4))), tmp_path / "v")
        (tmp_path / "v.vol").write_bytes(np.zeros(63, "<f4").tobytes())
        with pytest.raises(FormatError) as exc:
            load_volume(tmp_path / "v")
        assert exc.value.field == "payload"

    @pytest.mark.parametrize(
        "line,field",
        [("spacing_mm=0 1 1", "spacing_mm"), ("spacing_mm=a b c", "spacing_mm"), ("dims=4 4", "dims"), ("nonsense", "header")],
    )
    def test_malformed_header(self, tmp_path, line, field):
        save_volume(Volume(np.zeros((4, 4, 4))), tmp_path / "v")
        hdr = tmp_path / "v.volhdr"
        key = line.split("=")[0]
        lines = [ln for ln in hdr.read_text().splitlines() if not ln.startswith(key + "=")]
        hdr.write_text("\n".join(lines + [line]) + "\n")
        with pytest.raises(FormatError) as exc:
            load_volume(tmp_path / "v")
        assert exc.value.field == field


class TestResample:
    @pytest.mark.parametrize("kind", [Kind.IMAGE, Kind.GROUND_TRUTH])
    @pytest.mark.parametrize("target", [(0.3, 0.7, 2.0), (1.7, 0.25, 1.0)])
    def test_constants_preserved(self, kind, target):
        c = 0.375
        out = resample_array(np.full((9, 7, 3), c), (0.5, 0.5, 2.0), target, kind)
        np.testing.assert_allclose(out, c, atol=1e-6)

    def test_linear_step_midpoint(self):
        step = np.array([0.0, 0.0, 1.0, 1.0]).reshape(4, 1, 1)
        out = resample_array(step, (1.0, 1.0, 1.0), (0.5, 1.0, 1.0), Kind.GROUND_TRUTH)
        assert out.shape == (8, 1, 1)
        assert out[3, 0, 0] == 0.5
        np.testing.assert_allclose(out.ravel(), [0, 0, 0, 0.5, 1, 1, 1, 1])

    def test_linear_kind_exact_on_ramps(self):
        ramp = np.linspace(0.0, 1.0, 11).reshape(11, 1, 1)
        out = resample_array(ramp, (1.0, 1.0, 1.0), (0.5, 1.0, 1.0), Kind.GROUND_TRUTH)
        np.testing.assert_allclose(out[:21, 0, 0], np.linspace(0.0, 1.0, 21), atol=1e-6)

    def test_quadratic_spline_interpolates_samples(self, rng):
        data = rng.normal(size=(10, 8, 2))
        out = resample_array(data, (1.0, 1.0, 2.0), (0.5, 0.5, 2.0), Kind.IMAGE)
        np.testing.assert_allclose(out[::2, ::2], data, atol=1e-5)

    def test_output_dims_rule(self):
        assert resampled_dims((10, 10, 3), (0.5, 0.5, 2.0), (0.3, 0.3, 2.0)) == (17, 17, 3)
        v = resample(Volume(np.zeros((10, 10, 3)), (0.5, 0.5, 2.0)), (0.3, 0.3, None))
        assert v.dims == (17, 17, 3) and v.spacing_mm == (0.3, 0.3, 2.0)

    def test_single_voxel_axis_replicates(self):
        out = resample_array(np.full((4, 4, 1), 0.7), (1.0, 1.0, 2.0), (1.0, 1.0, 0.5), Kind.GROUND_TRUTH)
        assert out.shape == (4, 4, 4)
        np.testing.assert_allclose(out, 0.7, atol=1e-6)

    def test_soft_mask_defaults_to_linear_and_clamps(self, rng):
        m = SoftMask((rng.uniform(size=(6, 6, 2)) > 0.5).astype(float), (1.0, 1.0, 2.0))
        out = resample(m, (0.37, 0.41, 2.0))
        assert isinstance(out, SoftMask)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.2, 2.0), st.floats(0.2, 2.0), st.integers(0, 2**31))
    def test_masks_stay_in_unit_interval(self, sx, sy, seed):
        r = np.random.default_rng(seed)
        mask = (r.uniform(size=(7, 6, 2)) > 0.5).astype(float)
        out = resample_array(mask, (1.0, 1.0, 2.0), (sx, sy, 2.0), Kind.GROUND_TRUTH)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_disk_fractions_between_close_resolutions(self):
        # linear resampling point-samples, so it only tracks exact area
        # fractions when source and target resolutions are close
        disk = Ellipse(8.03, 7.91, 4.1, 4.1)
        src = soft_fraction([disk], (32, 32, 1), (0.5, 0.5, 2.0), 8)
        oracle = soft_fraction([disk], (27, 27, 1), (0.6, 0.6, 2.0), 32)
        out = resample_array(src, (0.5, 0.5, 2.0), (0.6, 0.6, 2.0), Kind.GROUND_TRUTH, out_shape=(27, 27, 1))
        boundary = (oracle > 0) & (oracle < 1)
        assert np.abs(out - oracle)[boundary].mean() < 0.08
        assert abs(out.sum() - oracle.sum()) / oracle.sum() < 0.02


class TestCrop:
    def test_center_arithmetic(self):
        data = np.arange(64).reshape(8, 8)
        crop, offsets = center_crop_array(data, (4, 4))
        assert offsets == (2, 2)
        np.testing.assert_array_equal(crop, data[2:6, 2:6])

    def test_equal_size_is_identity(self, rng):
        data = rng.normal(size=(5, 6, 2))
        np.testing.assert_array_equal(center_crop_array(data, (5, 6))[0], data)

    def test_smaller_volume_is_zero_padded(self):
        crop, offsets = center_crop_array(np.ones((2, 3)), (6, 6))
        assert offsets == (-2, -2)
        assert crop.sum() == 6 and crop[2:4, 2:5].all()

    @pytest.mark.parametrize("dims,size", [((9, 7), (4, 5)), ((3, 4), (6, 6)), ((8, 3), (5, 5))])
    def test_uncrop_then_crop_is_identity(self, dims, size, rng):
        crop = rng.normal(size=size)
        offsets = tuple((d - s) // 2 for d, s in zip(dims, size))
        full = uncrop_array(crop, dims, offsets)
        assert full.shape == dims
        back, _ = center_crop_array(full, size)
        inside = uncrop_array(np.ones(size), dims, offsets)
        region, _ = center_crop_array(inside, size)
        np.testing.assert_array_equal(back[region > 0], crop[region > 0])

    def test_volume_wrapper_keeps_trailing_axis(self):
        v = center_crop(Volume(np.ones((10, 10, 3))), (4, 4))
        assert v.dims == (4, 4, 3)


class TestNormalize:
    def test_standardises(self, rng):
        out = zscore_array(rng.normal(10.0, 2.0, size=(20, 20, 3)))
        assert abs(out.mean()) < 1e-6 and abs(out.std() - 1.0) < 1e-5

    def test_constant_gives_zeros(self):
        assert not zscore_array(np.full((3, 3, 3), 7.0)).any()

    def test_affine_invariance(self, rng):
        x = rng.normal(size=(6, 6, 2))
        np.testing.assert_allclose(zscore_array(3.0 * x + 5.0), zscore_array(x), atol=1e-5)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            zscore_array(np.array([1.0, np.nan, 2.0]))

    def test_volume_wrapper(self, rng):
        v = zscore_normalize(Volume(rng.normal(5, 2, size=(4, 4, 2))))
        assert abs(float(v.data.mean())) < 1e-6

    def test_contrasts_normalised_independently(self, rng):
        gt = SoftMask(np.zeros((8, 8, 2)), (1.0, 1.0, 2.0))
        a = Volume(rng.normal(size=(8, 8, 2)), (1.0, 1.0, 2.0))
        b = Volume(rng.normal(50, 9, size=(8, 8, 2)), (1.0, 1.0, 2.0))
        b2 = Volume(rng.permutation(b.data.ravel()).reshape(b.dims), (1.0, 1.0, 2.0))
        p1 = preprocess(Subject("s", [a, b], gt), (1.0, 1.0, None), (8, 8))
        p2 = preprocess(Subject("s", [a, b2], gt), (1.0, 1.0, None), (8, 8))
        np.testing.assert_array_equal(p1.images[0], p2.images[0])


class TestSlices:
    def test_decomposition_order_and_round_trip(self, rng):
        v = Volume(rng.normal(size=(4, 4, 3)))
        parts = slices(v)
        assert len(parts) == 3 and parts[0].shape == (4, 4)
        np.testing.assert_array_equal(parts[2], v.data[:, :, 2])
        np.testing.assert_array_equal(reassemble(parts, like=v).data, v.data)

    def test_count_mismatch(self, rng):
        v = Volume(rng.normal(size=(4, 4, 3)))
        with pytest.raises(ShapeError):
            reassemble(slices(v)[:2], like=v)


class TestNativeMapping:
    def _subject(self, spacing, dims=(40, 36, 3)):
        x = (np.arange(dims[0]) - dims[0] / 2) * spacing[0]
        y = (np.arange(dims[1]) - dims[1] / 2) * spacing[1]
        blob = np.exp(-(x[:, None] ** 2 + y[None, :] ** 2) / (2 * 4.0**2))
        gt = SoftMask(np.repeat(blob[:, :, None], dims[2], axis=2), spacing)
        return Subject("s", [Volume(gt.data * 50 + 100, spacing)], gt)

    def test_identity_preprocessing(self, rng):
        s = self._subject((0.5, 0.5, 2.0))
        p = preprocess(s, (0.5, 0.5, None), s.gt.dims[:2])
        pred = rng.uniform(size=p.gt.shape)
        back = to_native(pred, p)
        np.testing.assert_allclose(back.data, pred, atol=1e-6)
        assert back.spacing_mm == s.gt.spacing_mm

    def test_constant_prediction(self):
        s = self._subject((0.6, 0.6, 2.0))
        p = preprocess(s, (0.5, 0.5, None), (48, 48))
        back = to_native(np.full(p.gt.shape, 0.4), p)
        assert back.dims == s.gt.dims
        np.testing.assert_allclose(back.data, 0.4, atol=1e-6)

    @pytest.mark.parametrize("spacing", [(0.6, 0.6, 2.0), (1.0, 1.0, 2.0), (0.8, 0.7, 2.0)])
    def test_round_trip_of_smooth_mask(self, spacing):
        s = self._subject(spacing)
        p = preprocess(s, (0.5, 0.5, None), (96, 96))
        back = to_native(p.gt, p)
        assert back.dims == s.gt.dims
        assert np.abs(back.data - s.gt.data).mean() < 0.03

    def test_needs_provenance(self):
        with pytest.raises(StateError):
            to_native(np.zeros((4, 4, 1)), None)

    def test_provenance_recorded(self):
        s = self._subject((0.6, 0.6, 2.0))
        p = preprocess(s, (0.5, 0.5, None), (32, 32))
        assert isinstance(p.provenance, Provenance)
        assert p.provenance.native_dims == s.gt.dims
        assert p.provenance.resampled_dims == (48, 43, 3)
        assert p.images.shape == (1, 32, 32, 3)
