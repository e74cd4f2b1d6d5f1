import json

import numpy as np
import pytest

from physrep.selftest import advdiff_mass_drift, grayscott_fixed_point, taylor_green_decay
from physrep.simulate import (
    CorruptHeaderError,
    DatasetError,
    MissingFileError,
    ShapeMismatchError,
    StabilityError,
    SystemSpec,
    Trajectory,
    TruncatedFileError,
    check_manifest,
    default_spec,
    generate_dataset,
    ingest_trajectory,
    kinetic_energy,
    load_split,
    read_dataset,
    read_manifest,
    read_trajectory,
    sample_parameters,
    simulate,
    simulate_advdiff,
    simulate_batch,
    simulate_grayscott,
    simulate_shearvort,
    write_dataset,
    write_trajectory,
)


def advdiff_spec(timesteps=9, save_every=4):
    return SystemSpec("advdiff", 32, timesteps, dt=0.5, save_every=save_every, param_names=("velocity", "diffusivity"),
                      param_ranges=((0.0, 1.0), (0.0, 0.2)), channels=("concentration",))


# --- advection-diffusion -----------------------------------------------------


def test_advdiff_identity_dynamics():
    frames = simulate_advdiff({"velocity": 0.0, "diffusivity": 0.0}, advdiff_spec(), seed=1).frames
    assert np.array_equal(frames, np.broadcast_to(frames[0], frames.shape))


def test_advdiff_mass_conserved():
    assert advdiff_mass_drift() < 1e-8


def test_advdiff_one_domain_advection_returns_to_start():
    # u = 1 cell per unit time, 64 steps of dt 0.5 -> one 32-cell domain length
    spec = advdiff_spec(timesteps=17, save_every=4)
    x = np.arange(32)
    bump = np.exp(-((x - 16.0) ** 2) / 18.0)[None, :] * np.ones((32, 1))
    frames = simulate_advdiff({"velocity": 1.0, "diffusivity": 0.0}, spec, seed=0, initial=bump).frames
    rms = np.sqrt(np.mean((frames[-1] - frames[0]) ** 2))
    assert rms < 1e-3
    assert np.abs(frames[8] - frames[0]).max() > 0.1  # halfway it has actually moved


def test_advdiff_stability_errors_name_the_bound():
    with pytest.raises(StabilityError, match="diffusion bound"):
        simulate_advdiff({"velocity": 0.1, "diffusivity": 0.9}, advdiff_spec(), seed=0)
    with pytest.raises(StabilityError, match="advection bound"):
        simulate_advdiff({"velocity": 3.0, "diffusivity": 0.01}, advdiff_spec(), seed=0)


# --- Gray-Scott ----------------------------------------------------------------


def test_grayscott_fixed_point_exact():
    assert grayscott_fixed_point() == 0.0


def test_grayscott_bounded_over_parameter_grid():
    spec = default_spec("grayscott", timesteps=32)
    grid = [{"feed": f, "kill": k} for f in np.linspace(0.01, 0.08, 4) for k in np.linspace(0.04, 0.07, 4)]
    for traj in simulate_batch(spec, grid, list(range(len(grid)))):
        assert traj.frames.min() >= -0.1 and traj.frames.max() <= 1.5, traj.params


def test_grayscott_seed_changes_frames_not_labels():
    spec = default_spec("grayscott", timesteps=4)
    p = {"feed": 0.04, "kill": 0.06}
    a, b = simulate_grayscott(p, spec, seed=1), simulate_grayscott(p, spec, seed=2)
    assert not np.array_equal(a.frames, b.frames)
    assert a.params == b.params == p


def test_grayscott_rejects_out_of_range():
    with pytest.raises(StabilityError):
        simulate_grayscott({"feed": 0.2, "kill": 0.06}, default_spec("grayscott", timesteps=2), seed=0)


# --- shear flow ------------------------------------------------------------------


def test_shearvort_zero_vorticity_stays_zero():
    spec = default_spec("shearvort", timesteps=5)
    init = np.zeros((2, 32, 32))
    frames = simulate_shearvort({"reynolds": 100.0, "schmidt": 100.0}, spec, seed=0, initial=init).frames
    assert np.array_equal(frames, np.zeros_like(frames))


def test_taylor_green_decay_within_one_percent():
    assert taylor_green_decay() < 0.01


def test_kinetic_energy_non_increasing():
    spec = default_spec("shearvort", timesteps=16)
    for re in (20.0, 500.0):
        w = simulate_shearvort({"reynolds": re, "schmidt": 50.0}, spec, seed=3).frames[:, 0]
        ke = kinetic_energy(w)
        assert np.all(np.diff(ke) <= 1e-12 * ke[0]), re


# --- shared behaviour ------------------------------------------------------------


@pytest.mark.parametrize("system", ["advdiff", "grayscott", "shearvort"])
def test_batch_matches_single_runs_bitwise(system):
    spec = default_spec(system, timesteps=6)
    params = sample_parameters(spec, 3, seed=5)
    batch = simulate_batch(spec, params, [10, 11, 12])
    for p, s, traj in zip(params, [10, 11, 12], batch):
        assert np.array_equal(simulate(spec, p, s).frames, traj.frames)
        assert np.all(np.isfinite(traj.frames))
        assert traj.frames.shape == (6, *spec.frame_shape)


def test_simulation_is_deterministic():
    spec = default_spec("shearvort", timesteps=4)
    p = {"reynolds": 80.0, "schmidt": 40.0}
    assert np.array_equal(simulate(spec, p, 9).frames, simulate(spec, p, 9).frames)


def test_sample_parameters_degenerate_range():
    spec = SystemSpec("advdiff", param_names=("velocity", "diffusivity"), param_ranges=((0.5, 0.5), (0.1, 0.1)))
    draws = sample_parameters(spec, 20, seed=0)
    assert all(d == {"velocity": 0.5, "diffusivity": 0.1} for d in draws)


def test_sample_parameters_uniform_mean_and_reproducible():
    spec = SystemSpec("advdiff", param_names=("velocity", "diffusivity"), param_ranges=((0.0, 1.0), (0.0, 1.0)))
    draws = sample_parameters(spec, 1000, seed=4)
    assert abs(np.mean([d["velocity"] for d in draws]) - 0.5) < 0.03
    assert draws == sample_parameters(spec, 1000, seed=4)


def test_sample_parameters_log_uniform_stays_in_range():
    spec = default_spec("shearvort")
    vals = np.array([d["reynolds"] for d in sample_parameters(spec, 2000, seed=1)])
    assert vals.min() >= 20.0 and vals.max() <= 500.0
    # log-uniform: the log-midpoint splits the draws evenly
    assert abs(np.mean(vals < np.sqrt(20.0 * 500.0)) - 0.5) < 0.05


def test_sample_parameters_errors():
    spec = SystemSpec("advdiff", param_names=("a", "b"), param_ranges=((1.0, 0.0), (0.0, 1.0)))
    with pytest.raises(ValueError, match="empty range"):
        sample_parameters(spec, 3, seed=0)
    with pytest.raises(ValueError):
        sample_parameters(default_spec("advdiff"), 0, seed=0)


# --- file format -------------------------------------------------------------------


def _random_traj(rng, shape=(5, 2, 8, 8)):
    return Trajectory(rng.normal(size=shape).astype(np.float32), {"feed": 0.03, "kill": 0.061}, 3, "grayscott",
                      ("u", "v"), 1.0)


def test_trajectory_round_trip_bitwise(tmp_path, rng):
    traj = _random_traj(rng)
    write_trajectory(tmp_path / "t.bin", traj)
    back = read_trajectory(tmp_path / "t.bin")
    assert back.frames.dtype == np.float32
    assert back.frames.tobytes() == traj.frames.tobytes()
    assert back.params == traj.params and back.seed == 3 and back.channels == ("u", "v")


def test_trajectory_errors_are_distinct(tmp_path, rng):
    path = tmp_path / "t.bin"
    write_trajectory(path, _random_traj(rng))
    raw = path.read_bytes()

    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CorruptHeaderError):
        read_trajectory(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-10])
    with pytest.raises(TruncatedFileError):
        read_trajectory(tmp_path / "short.bin")
    with pytest.raises(ShapeMismatchError):
        read_trajectory(path, expect_shape=(5, 1, 8, 8))
    with pytest.raises(MissingFileError):
        read_trajectory(tmp_path / "nope.bin")


def _write_small_dataset(tmp_path, rng, n=10):
    spec = SystemSpec("grayscott", grid=8, timesteps=5, param_names=("feed", "kill"), channels=("u", "v"))
    trajs = [_random_traj(rng) for _ in range(n)]
    splits = ["pretrain"] * (n - 3) + ["train", "val", "test"]
    return write_dataset(tmp_path / "ds", trajs, splits, spec), trajs


def test_dataset_round_trip(tmp_path, rng):
    manifest, trajs = _write_small_dataset(tmp_path, rng)
    back, read = read_dataset(tmp_path / "ds")
    assert back.entries == manifest.entries
    for a, b in zip(trajs, read):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.params == b.params


def test_normalization_from_pretrain_split_only(tmp_path, rng):
    manifest, trajs = _write_small_dataset(tmp_path, rng)
    pre = np.stack([t.frames for t in trajs[:7]])
    np.testing.assert_allclose(manifest.norm_mean, pre.mean(axis=(0, 1, 3, 4), dtype=np.float64), rtol=1e-10)
    frames, entries = load_split(tmp_path / "ds", "pretrain")
    assert frames.dtype == np.float32 and len(entries) == 7
    np.testing.assert_allclose(frames.mean(axis=(0, 1, 3, 4)), 0.0, atol=1e-5)


def test_missing_file_named_in_error(tmp_path, rng):
    manifest, _ = _write_small_dataset(tmp_path, rng)
    victim = manifest.entries[4]["file"]
    (tmp_path / "ds" / victim).unlink()
    with pytest.raises(MissingFileError, match=victim):
        check_manifest(tmp_path / "ds")


def test_corrupted_manifest(tmp_path, rng):
    _write_small_dataset(tmp_path, rng)
    (tmp_path / "ds" / "manifest.json").write_text("{broken")
    with pytest.raises(DatasetError):
        read_manifest(tmp_path / "ds")


def test_ingest_external_trajectory(tmp_path, rng):
    _write_small_dataset(tmp_path, rng)
    ext = tmp_path / "external.bin"
    write_trajectory(ext, _random_traj(rng))
    entry = ingest_trajectory(tmp_path / "ds", ext, "test")
    manifest = check_manifest(tmp_path / "ds")
    assert manifest.entries[-1] == entry and entry["split"] == "test"

    bad = tmp_path / "wrong.bin"
    write_trajectory(bad, _random_traj(rng, shape=(5, 2, 4, 4)))
    with pytest.raises(ShapeMismatchError):
        ingest_trajectory(tmp_path / "ds", bad, "test")


def test_generate_dataset_splits(tmp_path):
    spec = default_spec("advdiff", timesteps=16)
    manifest = generate_dataset(tmp_path / "g", spec, n_pretrain=6, n_labeled=10, seed=2, config_hash="feed")
    counts = {s: len(manifest.split(s)) for s in ("pretrain", "train", "val", "test")}
    assert counts == {"pretrain": 6, "train": 6, "val": 2, "test": 2}
    files = [e["file"] for e in manifest.entries]
    assert len(set(files)) == len(files)
    d = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert d["config_hash"] == "feed" and d["normalization"]["computed_on"] == "pretrain"
