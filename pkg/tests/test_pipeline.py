import numpy as np
import pytest

from incsplat.errors import BadFormat
from incsplat.pipeline import (HOLDOUT_EVERY, Pipeline, PipelineConfig,
                               select_covisible)
from incsplat.priors import SyntheticSceneSpec, generate_synthetic, load_dataset

SPEC = SyntheticSceneSpec(n_primitives=120, seed=7, width=48, height=36,
                          focal=40.0, matches_per_frame=250)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeds")
    generate_synthetic(SPEC, 8, root)
    return load_dataset(root)


@pytest.fixture(scope="module")
def initialized(dataset):
    cfg = PipelineConfig(seed=7, k_local=25, k_global=40, k_refine=20)
    pipe = Pipeline(dataset, cfg)
    pipe.initialize()
    pipe.global_optimize(40)
    return pipe


# ---------------------------------------------------------------------------
# window selection
# ---------------------------------------------------------------------------

def brute_force_window(frames, t, visible, tau):
    """Longest suffix of `frames` whose members all reach IoU >= tau with t."""
    def iou(a, b):
        union = len(visible[a] | visible[b])
        return len(visible[a] & visible[b]) / union if union else 0.0
    for start in range(len(frames)):
        suffix = frames[start:]
        if all(f == t or iou(f, t) >= tau for f in suffix):
            return suffix
    return [t]


def test_select_covisible_matches_brute_force_200_configs():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(2, 12))
        frames = list(range(n))
        t = n - 1
        universe = int(rng.integers(5, 60))
        visible = {f: set(np.nonzero(rng.random(universe) < rng.uniform(0.1, 0.9))[0].tolist())
                   for f in frames}
        tau = float(rng.uniform(0.05, 0.6))
        got = select_covisible(frames, t, visible, tau)
        assert got == brute_force_window(frames, t, visible, tau)
        # postcondition: every retained frame covisible with t
        for f in got:
            if f == t:
                continue
            union = len(visible[f] | visible[t])
            assert len(visible[f] & visible[t]) / union >= tau
        assert t in got


def test_select_window_modes(initialized):
    pipe = initialized
    t = pipe.frame_ids[-1]
    old = pipe.config.window_mode
    try:
        pipe.config.window_mode = "1"
        assert pipe.select_window(t) == [t]
        pipe.config.window_mode = "5"
        assert pipe.select_window(t) == pipe.frame_ids[-5:]
        pipe.config.window_mode = "all"
        assert pipe.select_window(t) == list(pipe.frame_ids)
        pipe.config.window_mode = "adaptive"
        win = pipe.select_window(t)
        assert t in win and set(win) <= set(pipe.frame_ids)
    finally:
        pipe.config.window_mode = old


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_loss_log_linearity_machine_precision(initialized):
    cfg = initialized.config
    assert len(initialized.loss_log) > 10
    for it, stage, frame, photo, depth, reproj, total in initialized.loss_log:
        assert total == photo + cfg.lambda_depth * depth + \
            cfg.lambda_reproj * reproj


def test_compute_losses_zero_lambdas(dataset):
    cfg = PipelineConfig(seed=7, lambda_depth=0.0, lambda_reproj=0.0)
    pipe = Pipeline(dataset, cfg)
    pipe.initialize()
    lb = pipe.compute_losses([0, 1])
    assert lb.total == lb.photo


def test_compute_losses_nonnegative(initialized):
    lb = initialized.compute_losses(list(initialized.frame_ids))
    assert lb.photo >= 0 and lb.depth >= 0 and lb.reproj >= 0


# ---------------------------------------------------------------------------
# optimization masking and gauge
# ---------------------------------------------------------------------------

def test_local_optimize_masks_anchor_rows(dataset):
    cfg = PipelineConfig(seed=7)
    pipe = Pipeline(dataset, cfg)
    pipe.initialize()
    t = pipe.frame_ids[-1]
    # plant an anchor far outside every frustum so the mask has a complement
    pipe._add_anchors(np.array([[80.0, 80.0, 80.0]]),
                      np.array([0], dtype=np.uint32))
    vis = pipe.scene.gather_visible(pipe.pose_of(t))
    outside = np.setdiff1d(np.arange(pipe.scene.num_anchors), vis)
    assert len(outside) > 0
    feat_before = pipe.scene.features[outside].copy()
    off_before = pipe.scene.offsets[outside].copy()
    pipe.local_optimize(t, [t], 10)
    assert np.array_equal(pipe.scene.features[outside], feat_before)
    assert np.array_equal(pipe.scene.offsets[outside], off_before)


def test_first_frame_pose_frozen(initialized):
    pipe = initialized
    f0 = pipe.frame_ids[0]
    gt = pipe.dataset.frame(f0).init_pose.to_array()
    assert np.array_equal(pipe.pose_of(f0).to_array(), gt)


def test_disable_pose_estimation_freezes_all(dataset):
    cfg = PipelineConfig(seed=7, disable_pose_estimation=True, k_global=10)
    pipe = Pipeline(dataset, cfg)
    pipe.initialize()
    before = pipe.opt.params["poses"].copy()
    pipe.global_optimize(10)
    assert np.array_equal(pipe.opt.params["poses"], before)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_from_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("k_local = 17\ntau_iou=0.3\nholdout = true\n"
                 "window_mode = 5\n# comment\n\nseed=9\n")
    cfg = PipelineConfig.from_file(p)
    assert cfg.k_local == 17
    assert cfg.tau_iou == 0.3
    assert cfg.holdout is True
    assert cfg.window_mode == "5"
    assert cfg.seed == 9
    assert cfg.k_global == 900  # untouched default


def test_config_unknown_key(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("no_such_field = 1\n")
    with pytest.raises(BadFormat):
        PipelineConfig.from_file(p)


def test_config_defaults_match_stated_schedule():
    cfg = PipelineConfig()
    assert (cfg.n_init, cfg.k_local, cfg.k_global, cfg.k_refine) == \
        (3, 400, 900, 10000)
    assert cfg.lambda_depth == 0.1 and cfg.lambda_reproj == 0.01
    assert cfg.tau_iou == 0.2


# ---------------------------------------------------------------------------
# holdout protocol and determinism
# ---------------------------------------------------------------------------

def test_training_frames_holdout(dataset):
    pipe = Pipeline(dataset, PipelineConfig(seed=7, holdout=True))
    frames = pipe.training_frames()
    assert all(f % HOLDOUT_EVERY != 0 for f in frames)
    full = Pipeline(dataset, PipelineConfig(seed=7)).training_frames()
    assert full == list(range(dataset.n_frames))


def test_small_run_deterministic(dataset, tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = PipelineConfig(seed=7, k_local=15, k_global=20, k_refine=15,
                             pose_refine_iters=5)
        pipe = Pipeline(dataset, cfg)
        pipe.run()
        out = tmp_path / name
        out.mkdir()
        pipe.write_outputs(out)
        outs.append(out)
    a, b = outs
    assert (a / "traj_est.txt").read_bytes() == (b / "traj_est.txt").read_bytes()
    assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()
    assert (a / "losses.csv").read_bytes() == (b / "losses.csv").read_bytes()


def test_losses_csv_header(dataset, tmp_path):
    cfg = PipelineConfig(seed=7, k_local=5, k_global=5, k_refine=5,
                         pose_refine_iters=2)
    pipe = Pipeline(dataset, cfg)
    pipe.initialize()
    pipe.global_optimize(5)
    pipe.write_outputs(tmp_path)
    first = (tmp_path / "losses.csv").read_text().splitlines()[0]
    assert first == "iter,stage,frame,photo,depth,reproj,total"
