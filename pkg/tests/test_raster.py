import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swirseg.raster import (DemGrid, GrayImage, HyperCube, RasterFormatError, band_average, extract_band,
                            nearest_band_index, read_cube, read_grid, read_pgm, read_pgm_codes, read_ppm,
                            write_cube, write_grid, write_pgm, write_ppm)

from conftest import make_cube

WL_260 = np.linspace(0.9, 2.5, 260)


def _header(lines, samples, bands, wavelengths, data_file="cube.raw"):
    wl = ", ".join(repr(float(w)) for w in wavelengths)
    return (f"ENVI\nsamples = {samples}\nlines = {lines}\nbands = {bands}\nheader offset = 0\n"
            f"data type = 4\ninterleave = bsq\nbyte order = 0\ndata file = {data_file}\n"
            f"wavelength units = Micrometers\nwavelength = {{{wl}}}\n")


def test_full_size_header_dimensions(tmp_path):
    hdr = tmp_path / "cube.hdr"
    hdr.write_text(_header(1163, 829, 260, WL_260))
    with open(tmp_path / "cube.raw", "wb") as fh:
        fh.truncate(1163 * 829 * 260 * 4)  # sparse file
    cube = read_cube(hdr)
    assert (cube.lines, cube.samples, cube.bands) == (1163, 829, 260)
    assert cube.wavelengths[0] == pytest.approx(0.9)
    assert cube.wavelengths[-1] == pytest.approx(2.5)


def test_single_band_cube_accepted(tmp_path):
    cube = make_cube(np.arange(6).reshape(1, 2, 3), [1.2])
    write_cube(tmp_path / "one.hdr", cube)
    back = read_cube(tmp_path / "one.hdr")
    assert back.bands == 1
    np.testing.assert_array_equal(back.data, cube.data)


def test_cube_round_trip_bit_exact(tmp_path, rng):
    cube = make_cube(rng.normal(size=(7, 5, 4)))
    write_cube(tmp_path / "a.hdr", cube)
    first = read_cube(tmp_path / "a.hdr")
    write_cube(tmp_path / "b.hdr", first)
    second = read_cube(tmp_path / "b.hdr")
    assert second.data.tobytes() == cube.data.tobytes()
    np.testing.assert_array_equal(second.wavelengths, cube.wavelengths)


def test_cube_size_mismatch(tmp_path):
    (tmp_path / "cube.hdr").write_text(_header(2, 2, 2, [1.0, 2.0]))
    (tmp_path / "cube.raw").write_bytes(b"\0" * 12)
    with pytest.raises(RasterFormatError, match="bytes"):
        read_cube(tmp_path / "cube.hdr")


@pytest.mark.parametrize("text, match", [
    ("ENVI\nsamples = 2\nbands = 1\nwavelength = {1.0}\n", "lines"),
    ("ENVI\nsamples = 2\nlines = x\nbands = 1\nwavelength = {1.0}\n", "integer"),
    ("ENVI\nsamples = 1\nlines = 1\nbands = 2\nwavelength = {2.0, 1.0}\n", "increasing"),
    ("ENVI\nsamples = 1\nlines = 1\nbands = 2\nwavelength = {1.0}\n", "wavelengths declared"),
    ("not a header\n", "ENVI"),
])
def test_garbled_headers(tmp_path, text, match):
    (tmp_path / "cube.hdr").write_text(text)
    (tmp_path / "cube.raw").write_bytes(b"\0" * 8)
    with pytest.raises(RasterFormatError, match=match):
        read_cube(tmp_path / "cube.hdr")


def test_non_increasing_wavelengths_rejected_in_memory():
    with pytest.raises(ValueError):
        HyperCube(np.zeros((2, 1, 1), np.float32), np.array([1.0, 1.0]))


def test_quality_report_flags_negatives():
    cube = make_cube(np.array([[[-0.1, 0.2]], [[0.3, 0.4]]]))
    report = cube.quality_report()
    assert report["n_negative"] == 1
    assert report["all_finite"]


class TestNearestBand:
    cube = make_cube(np.zeros((260, 1, 1)), WL_260)

    def test_endpoint(self):
        assert nearest_band_index(self.cube, 0.9) == 0

    def test_near_1_2_um(self):
        scan = min(range(260), key=lambda i: (abs(WL_260[i] - 1.2), i))
        assert scan == 49
        assert nearest_band_index(self.cube, 1.2) == 49

    def test_beyond_axis(self):
        assert nearest_band_index(self.cube, 3.0) == 259

    def test_exact_hits(self):
        for i, w in enumerate(self.cube.wavelengths):
            assert nearest_band_index(self.cube, w) == i

    def test_tie_goes_low(self):
        cube = make_cube(np.zeros((2, 1, 1)), [1.0, 2.0])
        assert nearest_band_index(cube, 1.5) == 0


def test_extract_band_ramp():
    ramp = np.arange(12, dtype=np.float64).reshape(3, 4)
    cube = make_cube(np.stack([np.zeros((3, 4)), ramp]))
    np.testing.assert_allclose(extract_band(cube, 1).pixels, ramp / 11.0, atol=1e-7)


def test_extract_band_constant_is_half():
    cube = make_cube(np.full((2, 3, 3), 7.0))
    assert np.all(extract_band(cube, 0).pixels == 0.5)


def test_extract_band_matches_direct_indexing(scene):
    cube = scene.cube
    b = 14
    ref = np.empty((cube.lines, cube.samples))
    for line in range(cube.lines):
        for sample in range(cube.samples):
            ref[line, sample] = cube.data[b, line, sample]
    ref = (ref - ref.min()) / (ref.max() - ref.min())
    np.testing.assert_allclose(extract_band(cube, b).pixels, ref, rtol=0, atol=1e-12)


def test_extract_band_out_of_range():
    with pytest.raises(IndexError):
        extract_band(make_cube(np.zeros((2, 2, 2))), 2)


def test_band_average_single_band_identity(rng):
    cube = make_cube(rng.random((1, 4, 5)))
    np.testing.assert_array_equal(band_average(cube).pixels, extract_band(cube, 0).pixels)


def test_band_average_cancellation(rng):
    v = rng.random((4, 5))
    cube = make_cube(np.stack([v, -v]))
    assert np.all(band_average(cube).pixels == 0.5)


def test_band_average_naive_loop(rng):
    cube = make_cube(rng.random((3, 4, 5)))
    ref = np.zeros((4, 5))
    for line in range(4):
        for sample in range(5):
            ref[line, sample] = sum(float(cube.data[b, line, sample]) for b in range(3)) / 3
    ref = (ref - ref.min()) / (ref.max() - ref.min())
    np.testing.assert_allclose(band_average(cube).pixels, ref, atol=1e-12)
    assert band_average(cube).pixels.shape == (4, 5)


def test_grid_round_trip(tmp_path, rng):
    dem = DemGrid(rng.normal(100, 5, size=(6, 9)).astype(np.float32), pixel_size=2.5, origin=(10.0, -4.0))
    write_grid(tmp_path / "dem.f32", dem)
    meta = json.loads((tmp_path / "dem.f32.json").read_text())
    assert meta == {"width": 9, "height": 6, "pixel_size_m": 2.5, "origin_x": 10.0, "origin_y": -4.0}
    back = read_grid(tmp_path / "dem.f32")
    assert back.elevations.tobytes() == dem.elevations.tobytes()
    assert (back.pixel_size, back.origin) == (2.5, (10.0, -4.0))


def test_grid_rejects_bad_pixel_size():
    with pytest.raises(ValueError):
        DemGrid(np.zeros((2, 2)), pixel_size=0.0)


def test_grid_pixel_world_conversion():
    dem = DemGrid(np.zeros((4, 4)), pixel_size=2.0, origin=(100.0, 50.0))
    x, y = dem.pixel_to_world(3, 1)
    assert (x, y) == (106.0, 52.0)
    assert dem.world_to_pixel(x, y) == pytest.approx((3, 1))


def test_pgm_sixteen_bit_layout(tmp_path):
    img = GrayImage(np.array([[0.0, 1.0]]))
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 1\n65535\n")
    assert raw.endswith(b"\x00\x00\xff\xff")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_pgm_round_trip_codes(tmp_path_factory, h, w, seed):
    codes = np.random.default_rng(seed).integers(0, 65536, size=(h, w))
    path = tmp_path_factory.mktemp("pgm") / "img.pgm"
    write_pgm(path, GrayImage(codes / 65535.0))
    back, maxval = read_pgm_codes(path)
    assert maxval == 65535
    np.testing.assert_array_equal(back, codes)
    np.testing.assert_allclose(read_pgm(path).pixels, codes / 65535.0)


def test_label_pgm_eight_bit(tmp_path):
    codes = np.array([[0, 1, 2], [3, 4, 255]])
    write_pgm(tmp_path / "l.pgm", codes, maxval=255)
    back, maxval = read_pgm_codes(tmp_path / "l.pgm")
    assert maxval == 255
    np.testing.assert_array_equal(back, codes)


def test_ppm_round_trip(tmp_path, rng):
    rgb = rng.integers(0, 256, size=(3, 4, 3)).astype(np.uint8)
    write_ppm(tmp_path / "c.ppm", rgb)
    np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm"), rgb)


def test_loaded_rasters_are_read_only(rng):
    cube = make_cube(rng.random((2, 2, 2)))
    with pytest.raises(ValueError):
        cube.data[0, 0, 0] = 1.0
