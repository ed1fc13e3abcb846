import numpy as np
import pytest

from incsplat.errors import BadFormat
from incsplat.imageio import (read_pfm, read_ply_points, read_ppm, write_pfm,
                              write_ply_points, write_ppm)


def test_ppm_round_trip_quantized(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (12, 10, 3))
    path = tmp_path / "a.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    # 8-bit quantization: exact on the quantized lattice
    assert np.allclose(back, np.round(img * 255) / 255.0, atol=1e-12)
    write_ppm(path, back)
    assert np.array_equal(read_ppm(path), back)


def test_ppm_clips_out_of_range(tmp_path):
    img = np.array([[[1.5, -0.2, 0.5]]])
    path = tmp_path / "b.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    assert back[0, 0, 0] == 1.0 and back[0, 0, 1] == 0.0


def test_pfm_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    depth = rng.uniform(0, 10, (9, 13)).astype(np.float32)
    path = tmp_path / "d.pfm"
    write_pfm(path, depth)
    back = read_pfm(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, depth)


def test_pfm_bad_magic(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"PX\n1 1\n-1.0\n\x00\x00\x00\x00")
    with pytest.raises(BadFormat):
        read_pfm(path)


def test_ppm_bad_magic(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(BadFormat):
        read_ppm(path)


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(17, 3))
    path = tmp_path / "p.ply"
    write_ply_points(path, pts)
    back = read_ply_points(path)
    assert np.allclose(back, pts, atol=1e-6)  # f32 storage
