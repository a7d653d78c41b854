import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psflens.depth import (
    CameraFocusSpec,
    DefocusMap,
    DepthMap,
    defocus_from_distance,
    defocus_map,
    encode_zbuffer,
    gradient_defocus,
    linearize_zbuffer,
    load_depth,
    read_depth_header,
    thin_lens_image_distance,
    write_depth_header,
)
from psflens.errors import FormatError, ObjectInsideFocal, ValueOutOfRange
from psflens.imageio import write_pfm, write_pgm16


class TestThinLens:
    def test_infinity(self):
        assert thin_lens_image_distance(6.0, math.inf) == 6.0

    def test_two_f(self):
        assert thin_lens_image_distance(6.0, 0.012) == pytest.approx(12.0, abs=1e-12)

    def test_one_meter(self):
        assert thin_lens_image_distance(6.0, 1.0) == pytest.approx(6.036217, abs=1e-6)

    def test_inside_focal(self):
        with pytest.raises(ObjectInsideFocal):
            thin_lens_image_distance(6.0, 0.006)
        with pytest.raises(ObjectInsideFocal):
            thin_lens_image_distance(6.0, 0.003)

    @given(st.floats(0.0061, 1e4), st.floats(1.0001, 10.0))
    def test_strictly_decreasing(self, o, k):
        assert thin_lens_image_distance(6.0, o * k) < thin_lens_image_distance(6.0, o)

    def test_limit(self):
        assert abs(thin_lens_image_distance(6.0, 1e9) - 6.0) < 1e-9


class TestDefocus:
    def test_at_focus_is_zero(self):
        for o in (0.5, 1.0, 7.3, math.inf):
            assert defocus_from_distance(CameraFocusSpec(o_focus=o), o) == 0.0

    def test_near_object_positive(self):
        dz = defocus_from_distance(CameraFocusSpec(f=6.0, o_focus=math.inf), 1.0)
        assert dz == pytest.approx(36.217, abs=1e-3)

    def test_antisymmetric(self):
        dz = defocus_from_distance(CameraFocusSpec(f=6.0, o_focus=1.0), math.inf)
        assert dz == pytest.approx(-36.217, abs=1e-3)

    def test_camera_validation(self):
        with pytest.raises(ObjectInsideFocal):
            CameraFocusSpec(f=6.0, o_focus=0.005)
        with pytest.raises(ValueError):
            CameraFocusSpec(near=2.0, far=1.0)


class TestZBuffer:
    def test_planes(self):
        z = linearize_zbuffer([[0.0, 1.0]], 0.1, 100.0).values
        assert z[0, 0] == pytest.approx(0.1, rel=1e-15)
        assert z[0, 1] == pytest.approx(100.0, rel=1e-15)

    def test_round_trip(self):
        v = np.random.default_rng(0).random((1, 1000))
        back = encode_zbuffer(linearize_zbuffer(v, 0.1, 1000.0).values, 0.1, 1000.0)
        assert np.max(np.abs(back - v)) <= 1e-9

    def test_increasing(self):
        v = np.linspace(0, 1, 1001)[None, :]
        assert np.all(np.diff(linearize_zbuffer(v, 0.5, 50.0).values[0]) > 0)

    def test_out_of_range(self):
        with pytest.raises(ValueOutOfRange):
            linearize_zbuffer([[1.2]], 0.1, 10.0)
        with pytest.raises(ValueOutOfRange):
            linearize_zbuffer([[-0.1]], 0.1, 10.0)


class TestDefocusMap:
    def test_constant_focus_plane(self):
        spec = CameraFocusSpec(o_focus=2.5)
        m = defocus_map(spec, DepthMap(np.full((4, 5), 2.5)))
        assert np.all(m.values == 0.0) and not m.clamped.any()

    def test_two_planes_match_scalar(self):
        spec = CameraFocusSpec(f=6.0, o_focus=1.0)
        depth = np.array([[0.5, math.inf], [math.inf, 0.5]])
        m = defocus_map(spec, DepthMap(depth))
        near = defocus_from_distance(spec, 0.5)
        far = defocus_from_distance(spec, math.inf)
        assert near != far
        assert m.values[0, 0] == pytest.approx(near, rel=1e-12)
        assert m.values[0, 1] == pytest.approx(far, rel=1e-12)
        assert not m.clamped.any()

    def test_inside_focal_flagged(self):
        spec = CameraFocusSpec(f=6.0, o_focus=1.0)
        depth = np.array([[0.003, 2.0, 0.003]])
        m = defocus_map(spec, DepthMap(depth))
        assert m.invalid.tolist() == [[True, False, True]]
        assert m.values[0, 1] == pytest.approx(defocus_from_distance(spec, 2.0), rel=1e-12)
        assert np.all(np.isfinite(m.values))

    def test_clamped(self):
        spec = CameraFocusSpec(f=6.0, o_focus=math.inf)
        m = defocus_map(spec, DepthMap(np.array([[0.2, 5.0]])), (-50.0, 50.0))
        # o = 0.2 m is ~186 um of defocus
        assert m.values[0, 0] == 50.0 and m.clamped[0, 0] and not m.clamped[0, 1]


class TestGradient:
    def test_endpoints_midpoint_monotone(self):
        g = gradient_defocus(9, 4, 50.0, -50.0).values
        assert g.shape == (4, 9)
        assert np.all(g[:, 0] == 50.0) and np.all(g[:, -1] == -50.0)
        assert g[0, 4] == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.diff(g, axis=1) <= 0)
        assert np.all(g == g[0])

    def test_constant_helper(self):
        assert np.all(DefocusMap.constant(2, 3, 4.5).values == 4.5)


class TestDepthFiles:
    def test_pfm_linear_meters(self, tmp_path):
        path = tmp_path / "d.pfm"
        depth = np.array([[0.5, 1.0], [2.0, 4.0]])
        write_pfm(path, depth)
        write_depth_header(path, "linear_meters")
        assert np.array_equal(load_depth(path).values, depth)

    def test_pgm_zbuffer(self, tmp_path):
        path = tmp_path / "d.pgm"
        counts = np.array([[0, 65535], [32768, 1000]])
        write_pgm16(path, counts)
        write_depth_header(path, "zbuffer", near=0.1, far=100.0)
        hdr = read_depth_header(path)
        assert hdr["v_convention"].startswith("v=0 at near")
        z = load_depth(path).values
        expected = linearize_zbuffer(counts / 65535, 0.1, 100.0).values
        np.testing.assert_allclose(z, expected, rtol=1e-15)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "d.pfm"
        write_pfm(path, np.ones((2, 2)))
        with pytest.raises(FormatError):
            load_depth(path)

    def test_zbuffer_header_needs_planes(self, tmp_path):
        path = tmp_path / "d.pfm"
        write_pfm(path, np.ones((2, 2)))
        (tmp_path / "d.pfm.hdr").write_text("encoding = zbuffer\n")
        with pytest.raises(FormatError):
            load_depth(path)

    def test_unknown_encoding(self, tmp_path):
        path = tmp_path / "d.pfm"
        write_pfm(path, np.ones((2, 2)))
        (tmp_path / "d.pfm.hdr").write_text("encoding = disparity\n")
        with pytest.raises(FormatError):
            load_depth(path)
