import numpy as np
import pytest
import yaml

from physrep.nn import EncoderConfig, MaeConfig, PredictorConfig

TINY_RUN = {
    "seed": 7,
    "dataset": {"n_pretrain": 32, "n_labeled": 20, "timesteps": 16},
    "pretrain": {"epochs": 1, "windows_per_traj": 1, "batch_size": 16},
    "probe": {"epochs": 3, "seeds": [0, 1]},
}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config(tmp_path):
    """A config small enough for a full generate/pretrain/probe/report pass in seconds."""
    cfg = dict(TINY_RUN, out=str(tmp_path / "run"))
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def small_encoder(in_channels=1, frames=4, widths=(8, 16)):
    return EncoderConfig(in_channels=in_channels, context_frames=frames, widths=widths, depths=(1, 1),
                         downsample=4, embed_dim=widths[-1])


def small_predictor(dim=16):
    return PredictorConfig(embed_dim=dim, expansion=2, depth=1)


def small_mae(in_channels=1, frames=4):
    return MaeConfig(in_channels=in_channels, context_frames=frames, patch_size=4, tubelet=2, enc_dim=16,
                     enc_depth=1, enc_heads=2, dec_dim=16, dec_depth=1, dec_heads=2)
