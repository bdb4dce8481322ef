import numpy as np
import pytest
import torch

from modules.codec import DisentangledCodec
from modules.corpus import make_synthetic_corpus
from utils.config_utils import config_from_flat

# -------------------------------
# Tiny run config shared by the suite
# -------------------------------
TINY_FLAT = {
    "model.strides": [2, 4, 5, 8],
    "model.base_channels": 4,
    "model.encoder_out_dim": 16,
    "model.speaker_dim": 8,
    "model.speaker_channels": 16,
    "model.num_quantizers": 3,
    "model.codebook_size": 8,
    "model.teacher_vocab": 8,
    "model.lstm_layers": 1,
    "model.discriminator_channels": 4,
    "model.discriminator_scales": 2,
    "data.segment_seconds": 0.64,
    "data.batch_size": 2,
    "train.steps": 2,
    "train.seed": 5,
    "train.log_every": 1,
    "train.checkpoint_every": 1,
    "train.progress": False,
    "anon.num_selected": 1,
    "anon.num_trials": 12,
}


@pytest.fixture
def tiny_flat():
    return dict(TINY_FLAT)


@pytest.fixture(scope="session")
def tiny_run_flat():
    return dict(TINY_FLAT)


@pytest.fixture
def tiny_cfg():
    return config_from_flat(dict(TINY_FLAT))


@pytest.fixture
def tiny_codec(tiny_cfg):
    torch.manual_seed(0)
    return DisentangledCodec(tiny_cfg.model, num_speakers=2).double().eval()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """2 speakers x 3 utterances of 1 s, rendered once per session."""
    out_dir = tmp_path_factory.mktemp("corpus")
    manifest = make_synthetic_corpus(out_dir, num_speakers=2, utts_per_speaker=3, seed=3, duration_s=1.0)
    return out_dir, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
