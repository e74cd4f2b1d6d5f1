import logging

import numpy as np
import pytest

from physrep import ssl
from physrep import tensor as T
from physrep.nn import read_checkpoint
from physrep.selftest import mae_oracle, vicreg_bruteforce, vicreg_oracle
from physrep.simulate import default_spec, sample_parameters, simulate_batch
from physrep.ssl import (
    JepaPair,
    PretrainConfig,
    TrainingError,
    TubeMask,
    VicregWeights,
    build_model,
    mae_loss,
    make_jepa_pairs,
    pretrain,
    tube_mask,
    vicreg_loss,
)

from conftest import small_encoder, small_mae, small_predictor

# --- VICReg ------------------------------------------------------------------


@pytest.mark.parametrize(
    "z, expected",
    [
        ([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]], 0.0),
        ([[0.0, 0.0], [0.0, 0.0]], 79.2),
        ([[0.0, 0.0], [2.0, 0.0]], 39.6),
    ],
)
def test_vicreg_worked_examples(z, expected):
    z = np.array(z)
    loss, terms = vicreg_loss(z, z.copy(), VicregWeights())
    assert terms.s == 0.0 and terms.c_a == 0.0
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_vicreg_matches_bruteforce():
    assert vicreg_oracle(100) < 1e-10


def test_vicreg_single_instance_terms(rng):
    za, zb = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    w = VicregWeights(lam=1.3, mu=0.7, nu=2.1)
    assert vicreg_loss(za, zb, w)[0].item() == pytest.approx(vicreg_bruteforce(za, zb, w), abs=1e-10)


def test_vicreg_symmetric_in_branches(rng):
    za, zb = rng.normal(size=(5, 4)), rng.normal(scale=0.3, size=(5, 4))
    assert vicreg_loss(za, zb)[1].loss == pytest.approx(vicreg_loss(zb, za)[1].loss, abs=1e-12)


def test_vicreg_gradcheck(rng):
    zb = rng.normal(size=(5, 3))
    assert T.grad_check(lambda z: vicreg_loss(z, zb)[0], rng.normal(scale=0.5, size=(5, 3))) < 1e-4


def test_vicreg_errors(rng):
    with pytest.raises(ValueError, match="n >= 2"):
        vicreg_loss(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(T.ShapeError):
        vicreg_loss(np.ones((4, 3)), np.ones((4, 2)))
    bad = rng.normal(size=(4, 2))
    bad[1, 1] = np.inf
    with pytest.raises(FloatingPointError):
        vicreg_loss(bad, bad)
    with pytest.raises(ValueError):
        VicregWeights(mu=-1.0)
    with pytest.raises(ValueError):
        VicregWeights(eps=0.0)


# --- JEPA pairs ----------------------------------------------------------------


def test_pairs_with_exactly_two_windows_start_at_zero():
    pairs = make_jepa_pairs([16] * 5, k=8, seed=0)
    assert {p.offset for p in pairs} == {0}


def test_pair_offsets_cover_valid_range():
    pairs = make_jepa_pairs([32] * 400, k=8, seed=1)
    assert {p.offset for p in pairs} == set(range(17))
    for p in pairs:
        assert p.target.start == p.context.stop and p.target.stop - p.target.start == 8


def test_pairs_cover_every_trajectory_and_are_seeded():
    a = make_jepa_pairs([20] * 10, k=4, seed=3, per_traj=2)
    assert sorted(p.traj for p in a) == sorted(list(range(10)) * 2)
    assert a == make_jepa_pairs([20] * 10, k=4, seed=3, per_traj=2)
    assert a != make_jepa_pairs([20] * 10, k=4, seed=3, epoch=1, per_traj=2)


def test_short_trajectories_skipped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        pairs = make_jepa_pairs([20, 6, 20], k=4, seed=0)
    assert {p.traj for p in pairs} == {0, 2}
    assert "trajectory 1" in caplog.text


# --- tube masks and the reconstruction loss -----------------------------------------


def test_tube_mask_count_and_reuse():
    m = tube_mask((4, 4), 0.75, np.random.default_rng(0))
    assert m.num_masked == 12
    for t in range(8):
        assert np.array_equal(m.at_frame(t), m.spatial)
    again = tube_mask((4, 4), 0.75, np.random.default_rng(0))
    assert np.array_equal(again.spatial, m.spatial)


def test_tube_mask_positions_uniform():
    rng = np.random.default_rng(7)
    counts = sum(tube_mask((4, 4), 0.75, rng).spatial.astype(int) for _ in range(1000))
    assert np.all(np.abs(counts - 750) <= 50), counts


def test_tube_mask_degenerate_ratios():
    with pytest.raises(ValueError):
        tube_mask((4, 4), 0.01, np.random.default_rng(0))
    with pytest.raises(ValueError):
        tube_mask((4, 4), 1.0, np.random.default_rng(0))


def test_mae_loss_definitions(rng):
    target = rng.normal(size=(2, 5, 3))
    mask = rng.random((2, 5, 1)) < 0.5
    mask[0, 0] = True
    assert mae_loss(target, target, mask).item() == 0.0
    pred = target + 1.0
    pred[~np.broadcast_to(mask, target.shape)] = rng.normal(size=int((~np.broadcast_to(mask, target.shape)).sum()))
    assert mae_loss(pred, target, mask).item() == pytest.approx(1.0, abs=1e-12)


def test_mae_loss_ignores_unmasked_entries(rng):
    target = rng.normal(size=(3, 4))
    mask = np.array([[True], [False], [True]])
    pred = rng.normal(size=(3, 4))
    other = pred.copy()
    other[1] += 100.0
    assert mae_loss(pred, target, mask).item() == mae_loss(other, target, mask).item()


def test_mae_loss_matches_bruteforce_and_rejects_empty_mask():
    assert mae_oracle(100) < 1e-10
    with pytest.raises(ValueError):
        mae_loss(np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 1), dtype=bool))


# --- pretraining -----------------------------------------------------------------


def small_cfg(method="jepa", **kw):
    base = dict(method=method, epochs=2, batch_size=8, context_frames=4, windows_per_traj=1, lr=3e-3,
                encoder=small_encoder(), predictor=small_predictor(), mae=small_mae())
    base.update(kw)
    return PretrainConfig(**base)


@pytest.fixture(scope="module")
def frames():
    spec = default_spec("advdiff", grid=16, timesteps=12)
    trajs = simulate_batch(spec, sample_parameters(spec, 16, seed=0), list(range(16)))
    return np.stack([t.frames for t in trajs]).astype(np.float32)


def test_epochs_zero_checkpoint_equals_init(tmp_path, frames):
    cfg = small_cfg(epochs=0)
    res = pretrain("jepa", frames, cfg, seed=4, out_dir=tmp_path)
    _, state = read_checkpoint(res.checkpoint)
    init = build_model(cfg, 1, 4)
    for name, p in init.named_parameters():
        np.testing.assert_array_equal(state[name], p.data.astype(np.float32))


@pytest.mark.parametrize("method", ["jepa", "mae"])
def test_pretrain_reruns_identically(tmp_path, frames, method):
    a = pretrain(method, frames, small_cfg(method), seed=1, out_dir=tmp_path / "a")
    b = pretrain(method, frames, small_cfg(method), seed=1, out_dir=tmp_path / "b")
    assert [r["loss"] for r in a.losses] == [r["loss"] for r in b.losses]
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert a.loss_log.read_text() == b.loss_log.read_text()


def test_resume_after_interruption_matches_uninterrupted(tmp_path, frames, monkeypatch):
    cfg = small_cfg(epochs=3)
    full = pretrain("jepa", frames, cfg, seed=2, out_dir=tmp_path / "full")

    original = ssl._save_resume

    def crash_after_first(path, model, opt, epoch, rows, digest):
        original(path, model, opt, epoch, rows, digest)
        if epoch == 1:
            raise KeyboardInterrupt

    monkeypatch.setattr(ssl, "_save_resume", crash_after_first)
    with pytest.raises(KeyboardInterrupt):
        pretrain("jepa", frames, cfg, seed=2, out_dir=tmp_path / "cut")
    monkeypatch.setattr(ssl, "_save_resume", original)
    resumed = pretrain("jepa", frames, cfg, seed=2, out_dir=tmp_path / "cut")
    assert [r["loss"] for r in resumed.losses] == [r["loss"] for r in full.losses]
    assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()


def test_jepa_loss_decreases_over_first_100_steps(tmp_path, frames):
    cfg = small_cfg(epochs=50, batch_size=8, windows_per_traj=1)  # 2 steps per epoch
    losses = [r["loss"] for r in pretrain("jepa", frames, cfg, seed=0, out_dir=tmp_path).losses]
    assert len(losses) == 100
    assert np.mean(losses[-10:]) < 0.8 * np.mean(losses[:10])


def test_loss_csv_columns(tmp_path, frames):
    res = pretrain("jepa", frames, small_cfg(epochs=1), seed=0, out_dir=tmp_path)
    assert res.loss_log.read_text().splitlines()[0] == "step,epoch,lr,loss,s,v,c"


def test_non_finite_batch_aborts(tmp_path, frames):
    bad = frames.copy()
    bad[:, :, :, 3, 3] = np.nan
    with pytest.raises((TrainingError, FloatingPointError)):
        pretrain("jepa", bad, small_cfg(epochs=1), seed=0, out_dir=tmp_path)


def test_pretrain_input_errors(tmp_path, frames):
    with pytest.raises(ValueError, match="frames"):
        pretrain("jepa", frames[:, :6], small_cfg(), seed=0, out_dir=tmp_path)
    with pytest.raises(ValueError):
        PretrainConfig(method="simclr")


def test_jepa_pair_slices():
    p = JepaPair(traj=0, offset=3, k=4)
    assert (p.context.start, p.context.stop, p.target.start, p.target.stop) == (3, 7, 7, 11)


def test_tubemask_is_frozen():
    m = TubeMask(np.zeros((2, 2), dtype=bool), 0.5)
    with pytest.raises(AttributeError):
        m.ratio = 0.1
