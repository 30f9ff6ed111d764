import hashlib
from pathlib import Path

import numpy as np
import pytest

from hsipest.hypercube import (STANDARD_WAVELENGTHS, BandSet, CalibrationError, ClassMask,
                               Hypercube, HypercubeError, Label, calibrate_reflectance,
                               crop_spectral, dark_background_mask, load_cube, load_mask,
                               restrict_bands, save_cube, save_mask)
from hsipest.softplsda import selection_1

DATA = Path(__file__).parent / "data"
FIXTURE_DIGEST = "97bf031c24e40faad35cc5258a0262b526e8d06f424e6c78661bb313963a6ef7"


def cube(data, wl=None, **meta):
    data = np.asarray(data, dtype=float)
    if wl is None:
        wl = 980.0 + 5.0 * np.arange(data.shape[2])
    return Hypercube(data, wl, meta)


def test_calibration_endpoints():
    rng = np.random.default_rng(0)
    white = rng.uniform(800, 1000, 7)
    dark = rng.uniform(10, 50, 7)
    shape = (3, 4, 7)
    wl = np.arange(7.0)
    zero = calibrate_reflectance(np.broadcast_to(dark, shape), white, dark, wavelengths=wl)
    one = calibrate_reflectance(np.broadcast_to(white, shape), white, dark, wavelengths=wl)
    half = calibrate_reflectance(np.broadcast_to((white + dark) / 2, shape), white, dark,
                                 wavelengths=wl)
    np.testing.assert_allclose(zero.data, 0.0, atol=1e-12)
    np.testing.assert_allclose(one.data, 1.0, rtol=1e-12)
    np.testing.assert_allclose(half.data, 0.5, rtol=1e-12)


def test_calibration_rejects_white_below_dark():
    with pytest.raises(CalibrationError, match="band 1"):
        calibrate_reflectance(np.ones((1, 1, 3)), [5, 1, 5], [1, 2, 1], wavelengths=[1, 2, 3])


def test_crop_to_standard_range():
    wl = np.arange(900.0, 1700.0 + 1e-9, 5.0)
    assert wl.size == 161
    hc = cube(np.zeros((2, 2, 161)), wl)
    out = crop_spectral(hc, 980, 1660)
    assert out.n_bands == 137
    np.testing.assert_array_equal(out.wavelengths, STANDARD_WAVELENGTHS)
    assert crop_spectral(hc, 900, 1700) == hc
    point = crop_spectral(hc, 1000, 1000)
    assert point.n_bands == 1 and point.wavelengths[0] == 1000.0


def test_dark_background_mask():
    wl = STANDARD_WAVELENGTHS
    low = dark_background_mask(cube(np.full((4, 4, wl.size), 0.29), wl))
    high = dark_background_mask(cube(np.full((4, 4, wl.size), 0.31), wl))
    assert np.all(low.labels == Label.EXCLUDED)
    assert not np.any(high.labels == Label.EXCLUDED)
    data = np.full((6, 6, wl.size), 0.8)
    data[:, :3] = 0.1
    m = dark_background_mask(cube(data, wl))
    assert np.all(m.labels[:, :3] == Label.EXCLUDED)
    assert np.all(m.labels[:, 3:] == Label.BACKGROUND)


def test_restrict_bands():
    wl = STANDARD_WAVELENGTHS
    hc = cube(np.random.default_rng(1).random((2, 3, wl.size)), wl)
    assert restrict_bands(hc, BandSet.full(wl.size)) == hc
    sel = restrict_bands(hc, selection_1(wl))
    assert sel.n_bands == 38
    # interval-to-index oracle: idx = (nm - 980) / 5, inclusive ends
    expected = sorted({int((nm - 980) // 5) for lo, hi in
                       ((1220, 1295), (1370, 1410), (1420, 1480))
                       for nm in range(lo, hi + 1, 5)})
    assert list(selection_1(wl).indices) == expected
    with pytest.raises(HypercubeError):
        restrict_bands(hc, BandSet(()))


def test_bandset_describe_runs():
    bs = BandSet((5, 1, 2, 3, 3))
    assert bs.indices == (1, 2, 3, 5)
    assert bs.describe(np.arange(10) * 10.0) == [(10.0, 30.0), (50.0, 50.0)]


def test_cube_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    hc = cube(rng.random((5, 7, 11)).astype(np.float32), image_id="x", background="grass",
              group="G3")
    save_cube(hc, tmp_path / "x")
    assert load_cube(tmp_path / "x.hdr") == hc


def test_short_payload_is_rejected(tmp_path):
    hc = cube(np.ones((2, 2, 137), dtype=np.float32), STANDARD_WAVELENGTHS)
    save_cube(hc, tmp_path / "c")
    bil = tmp_path / "c.bil"
    bil.write_bytes(bil.read_bytes()[:-4])
    with pytest.raises(HypercubeError, match="payload"):
        load_cube(tmp_path / "c")


def test_fixture_checksum():
    hc = load_cube(DATA / "fixture")
    assert hc.data.shape == (6, 5, 8)
    assert hc.meta == {"image_id": "fixture", "background": "bark", "group": "G1"}
    digest = hashlib.sha256(np.ascontiguousarray(hc.data, "<f4").tobytes()).hexdigest()
    assert digest == FIXTURE_DIGEST
    i = np.arange(6 * 5 * 8).reshape(6, 5, 8)
    np.testing.assert_array_equal(hc.data, ((i * 7) % 23 / 22.0).astype(np.float32))


def test_mask_round_trip(tmp_path):
    lab = np.random.default_rng(3).integers(0, 4, (9, 13)).astype(np.uint8)
    save_mask(ClassMask(lab), tmp_path / "m.pgm")
    assert load_mask(tmp_path / "m.pgm") == ClassMask(lab)
    fixture = load_mask(DATA / "fixture.pgm")
    np.testing.assert_array_equal(fixture.labels, (np.arange(30).reshape(6, 5) * 8) % 4)


def test_invalid_inputs():
    with pytest.raises(HypercubeError):
        Hypercube(np.zeros((2, 2)), [1.0, 2.0])
    with pytest.raises(HypercubeError):
        Hypercube(np.zeros((1, 1, 2)), [2.0, 1.0])
    with pytest.raises(HypercubeError):
        cube(np.full((1, 1, 2), np.nan))
    with pytest.raises(HypercubeError):
        ClassMask(np.full((2, 2), 7))
