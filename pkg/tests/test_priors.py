import filecmp
import shutil

import numpy as np
import pytest

from incsplat.errors import BadFormat, MissingFile, ShapeMismatch
from incsplat.priors import (Dataset, SyntheticSceneSpec, build_ground_truth,
                             generate_synthetic, load_dataset,
                             read_matches_csv, render_ground_truth,
                             write_matches_csv)

SPEC = SyntheticSceneSpec(n_primitives=120, seed=3, width=48, height=36,
                          focal=40.0, matches_per_frame=200)


@pytest.fixture(scope="module")
def clean_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "clean"
    generate_synthetic(SPEC, 8, root)
    return root


def test_matches_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = rng.uniform(0, 50, (17, 5))
    path = tmp_path / "m.csv"
    write_matches_csv(path, m)
    back = read_matches_csv(path)
    assert np.array_equal(back, m)  # repr round trip is exact


def test_matches_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(BadFormat):
        read_matches_csv(path)


def test_generator_deterministic(tmp_path, clean_dataset):
    other = tmp_path / "again"
    generate_synthetic(SPEC, 8, other)
    cmp = filecmp.dircmp(clean_dataset, other)
    for sub in ("frames", "depth", "conf", "matches"):
        a = sorted(p.name for p in (clean_dataset / sub).iterdir())
        for name in a:
            assert (clean_dataset / sub / name).read_bytes() == \
                (other / sub / name).read_bytes(), f"{sub}/{name}"
    for name in ("intrinsics.txt", "gt_poses.txt", "init_poses.txt"):
        assert (clean_dataset / name).read_bytes() == (other / name).read_bytes()


def test_prior_depth_bitwise_matches_render(clean_dataset):
    # zero depth noise: the stored prior is the ground-truth render in f32
    ds = load_dataset(clean_dataset)
    gt = build_ground_truth(SPEC, 8)
    for i in (0, 3, 5):
        _, depth, _ = render_ground_truth(gt, gt.trajectory[i])
        stored = ds.frame(i).prior_depth
        assert np.array_equal(stored.astype(np.float32),
                              depth.astype(np.float32))


def test_zero_noise_matches_reproject_exactly(clean_dataset):
    ds = load_dataset(clean_dataset)
    gt = build_ground_truth(SPEC, 8)
    K = ds.intrinsics
    for i in (1, 2, 4):
        matches = ds.frame(i).matches
        assert len(matches) > 10
        pose_prev, pose_cur = gt.trajectory[i - 1], gt.trajectory[i]
        _, depth_prev, _ = render_ground_truth(gt, pose_prev)
        col = matches[:, 0].astype(int)
        row = matches[:, 1].astype(int)
        d = depth_prev[row, col]
        xc = (matches[:, 0] - K.cx) / K.fx * d
        yc = (matches[:, 1] - K.cy) / K.fy * d
        X = pose_prev.t + np.stack([xc, yc, d], axis=1) @ pose_prev.R.T
        pc = (X - pose_cur.t) @ pose_cur.R
        u = K.fx * pc[:, 0] / pc[:, 2] + K.cx
        v = K.fy * pc[:, 1] / pc[:, 2] + K.cy
        assert np.max(np.abs(u - matches[:, 2])) < 1e-9
        assert np.max(np.abs(v - matches[:, 3])) < 1e-9


def test_outlier_count_exact(tmp_path):
    spec = SyntheticSceneSpec(n_primitives=120, seed=3, width=48, height=36,
                              focal=40.0, matches_per_frame=200,
                              outlier_fraction=0.4)
    root = tmp_path / "out"
    generate_synthetic(spec, 3, root)
    clean = load_dataset(tmp_path / "out")
    gt = build_ground_truth(spec, 3)
    K = clean.intrinsics
    for i in (1, 2):
        matches = clean.frame(i).matches
        n = len(matches)
        pose_prev, pose_cur = gt.trajectory[i - 1], gt.trajectory[i]
        _, depth_prev, _ = render_ground_truth(gt, pose_prev)
        d = depth_prev[matches[:, 1].astype(int), matches[:, 0].astype(int)]
        xc = (matches[:, 0] - K.cx) / K.fx * d
        yc = (matches[:, 1] - K.cy) / K.fy * d
        X = pose_prev.t + np.stack([xc, yc, d], axis=1) @ pose_prev.R.T
        pc = (X - pose_cur.t) @ pose_cur.R
        u = K.fx * pc[:, 0] / pc[:, 2] + K.cx
        v = K.fy * pc[:, 1] / pc[:, 2] + K.cy
        err = np.hypot(u - matches[:, 2], v - matches[:, 3])
        # outliers are resampled uniformly; exact non-reprojection marks them
        assert int(np.sum(err > 1e-6)) == int(np.floor(0.4 * n))


def test_dataset_frame_fields(clean_dataset):
    ds = load_dataset(clean_dataset)
    assert ds.n_frames == 8
    f0 = ds.frame(0)
    assert f0.image.shape == (36, 48, 3)
    assert f0.prior_depth.shape == (36, 48)
    assert f0.confidence.shape == (36, 48)
    assert len(f0.matches) == 0
    assert f0.init_pose is not None          # generator writes 4 init poses
    assert ds.frame(7).init_pose is None
    assert set(np.unique(f0.confidence)) <= {0.0, 1.0}


def test_dataset_missing_frame_gap(clean_dataset, tmp_path):
    root = tmp_path / "gap"
    shutil.copytree(clean_dataset, root)
    (root / "frames" / "000002.ppm").unlink()
    with pytest.raises(MissingFile, match="000002"):
        load_dataset(root)


def test_dataset_missing_sidecar(clean_dataset, tmp_path):
    root = tmp_path / "nosidecar"
    shutil.copytree(clean_dataset, root)
    (root / "depth" / "000003.pfm").unlink()
    with pytest.raises(MissingFile, match="000003"):
        load_dataset(root)


def test_dataset_shape_mismatch_names_frame(clean_dataset, tmp_path):
    from incsplat.imageio import write_pfm
    root = tmp_path / "badshape"
    shutil.copytree(clean_dataset, root)
    write_pfm(root / "depth" / "000001.pfm", np.ones((5, 5), np.float32))
    ds = load_dataset(root)
    with pytest.raises(ShapeMismatch, match="000001"):
        ds.frame(1)


def test_dataset_out_of_range(clean_dataset):
    ds = load_dataset(clean_dataset)
    with pytest.raises(MissingFile):
        ds.frame(8)


def test_spec_from_file(tmp_path):
    p = tmp_path / "scene.txt"
    p.write_text("n_primitives = 42\nseed=9\ndepth_noise = 0.05  # sigma\n"
                 "\n# comment line\nfocal = 30\n")
    spec = SyntheticSceneSpec.from_file(p)
    assert spec.n_primitives == 42
    assert spec.seed == 9
    assert spec.depth_noise == 0.05
    assert spec.focal == 30.0
    assert spec.orbit_radius == 4.0  # untouched default


def test_spec_from_file_unknown_key(tmp_path):
    p = tmp_path / "scene.txt"
    p.write_text("not_a_field = 1\n")
    with pytest.raises(BadFormat):
        SyntheticSceneSpec.from_file(p)
