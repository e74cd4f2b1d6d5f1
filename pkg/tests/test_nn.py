import numpy as np
import pytest

from physrep import tensor as T
from physrep.nn import (
    AttentiveProbe,
    CheckpointError,
    Encoder,
    MaeConfig,
    MaskedAutoencoder,
    Predictor,
    ProbeConfig,
    read_checkpoint,
    save_checkpoint,
)
from physrep.optim import AdamW
from physrep.rng import make_rng
from physrep.ssl import JepaModel, mae_batch_loss, mae_train_step, tube_mask
from physrep.tensor import ShapeError, Tensor

from conftest import small_encoder, small_mae, small_predictor


def test_encoder_output_shape(rng):
    enc = Encoder(small_encoder(in_channels=2), seed=0)
    z = enc(Tensor(rng.normal(size=(3, 2, 4, 16, 16))))
    assert z.shape == (3, 4, 4, 16)


def test_default_encoder_shape(rng):
    from physrep.nn import EncoderConfig

    enc = Encoder(EncoderConfig(), seed=0)
    with T.no_grad():
        z = enc(Tensor(rng.normal(size=(1, 1, 8, 32, 32))))
    assert z.shape == (1, 4, 4, 64)


def test_encoder_rejects_wrong_frames(rng):
    enc = Encoder(small_encoder(), seed=0)
    with pytest.raises(ShapeError):
        enc(Tensor(rng.normal(size=(1, 1, 6, 16, 16))))


def test_encoder_is_deterministic(rng):
    clip = Tensor(rng.normal(size=(2, 1, 4, 16, 16)))
    a = Encoder(small_encoder(), seed=3)(clip).data
    b = Encoder(small_encoder(), seed=3)(clip).data
    assert np.array_equal(a, b)


def test_predictor_preserves_shape_and_zero_projection_is_identity(rng):
    pred = Predictor(small_predictor(16), seed=0)
    z = Tensor(rng.normal(size=(2, 4, 4, 16)))
    assert pred(z).shape == z.shape
    for block in pred.blocks:
        block.pw2.weight.data[:] = 0.0
        block.pw2.bias.data[:] = 0.0
    np.testing.assert_array_equal(pred(z).data, z.data)


def test_jepa_gradients_reach_encoder_and_predictor(rng):
    from physrep.ssl import VicregWeights, jepa_loss

    model = JepaModel(small_encoder(), small_predictor(), seed=0)
    ctx, tgt = rng.normal(size=(4, 1, 4, 16, 16)), rng.normal(size=(4, 1, 4, 16, 16))
    loss, _ = jepa_loss(model, ctx, tgt, VicregWeights())
    T.backward(loss)
    assert np.any(model.encoder.stem.weight.grad != 0)
    assert np.any(model.predictor.block0.pw1.weight.grad != 0)


def test_mae_reconstruction_shape_and_visible_count(rng):
    cfg = small_mae()
    cfg.context_frames = 8
    cfg.tubelet = 1
    mae = MaskedAutoencoder(cfg, seed=0)
    clip = Tensor(rng.normal(size=(1, 1, 8, 32, 32)))
    mask = tube_mask((8, 8), 0.75, make_rng(0, "m")).spatial
    assert mae.forward(clip, mask).shape == (1, 1, 8, 32, 32)
    tmask = mae.token_mask(mask, 1, mae.grid(clip.shape))
    latent, _ = mae.encode_visible(clip, tmask)
    assert latent.shape[1] == 8 * 16  # 16 visible patches in each of 8 frames


def test_mae_mask_shape_mismatch(rng):
    mae = MaskedAutoencoder(small_mae(), seed=0)
    clip = Tensor(rng.normal(size=(1, 1, 4, 16, 16)))
    with pytest.raises(ShapeError):
        mae.forward(clip, np.zeros((3, 3), dtype=bool))


def test_mae_patchify_round_trip(rng):
    mae = MaskedAutoencoder(small_mae(in_channels=2), seed=0)
    clip = rng.normal(size=(2, 2, 4, 16, 16))
    back = mae.unpatchify(Tensor(mae.patchify(clip)), clip.shape).data
    np.testing.assert_array_equal(back, clip)


def test_mae_overfits_single_clip(rng):
    cfg = MaeConfig(in_channels=1, context_frames=4, patch_size=4, tubelet=2, enc_dim=32, enc_depth=1, enc_heads=2,
                    dec_dim=32, dec_depth=1, dec_heads=2, norm_pix_loss=False)
    mae = MaskedAutoencoder(cfg, seed=0)
    clip = rng.normal(size=(1, 1, 4, 16, 16))
    mask = tube_mask((4, 4), 0.75, make_rng(0, "overfit")).spatial[None]
    start = mae_batch_loss(mae, clip, mask).item()
    opt = AdamW(mae.parameters(), weight_decay=0.0)
    for _ in range(300):
        end = mae_train_step(mae, clip, mask, opt, 3e-3)
    assert start > 0.5
    assert end < 0.01


def test_probe_output_shape(rng):
    probe = AttentiveProbe(ProbeConfig(token_dim=64, num_outputs=2), seed=0)
    assert probe(Tensor(rng.normal(size=(1, 4, 4, 64)))).shape == (1, 2)


def test_probe_rejects_empty_token_set():
    probe = AttentiveProbe(ProbeConfig(token_dim=8), seed=0)
    with pytest.raises(ShapeError):
        probe(Tensor(np.zeros((2, 0, 8))))


def test_probe_identical_tokens_reduce_to_value_projection(rng):
    probe = AttentiveProbe(ProbeConfig(token_dim=8, probe_dim=8, num_outputs=3), seed=0)
    probe.head.weight.data = rng.normal(size=probe.head.weight.shape)
    token = rng.normal(size=8)
    out = probe(Tensor(np.tile(token, (1, 5, 1)))).data
    value = probe.value(Tensor(token[None])).data
    np.testing.assert_allclose(out, probe.head(Tensor(value)).data, atol=1e-12)


def test_probe_params_exclude_encoder():
    probe = AttentiveProbe(ProbeConfig(token_dim=8), seed=0)
    names = [n for n, _ in probe.named_parameters()]
    assert names and not any(n.startswith(("encoder", "stem")) for n in names)


def test_checkpoint_round_trip(tmp_path, rng):
    model = JepaModel(small_encoder(), small_predictor(), seed=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"step": 5, "config_hash": "abc"})
    header, state = read_checkpoint(path)
    assert header["step"] == 5 and header["config_hash"] == "abc"
    for name, p in model.named_parameters():
        np.testing.assert_array_equal(state[name], p.data.astype(np.float32).astype(np.float64))


def test_checkpoint_truncated(tmp_path):
    model = Predictor(small_predictor(), seed=0)
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, model, {})
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
