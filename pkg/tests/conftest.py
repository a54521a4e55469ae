import numpy as np
import pytest
import torch

from gtloc.data_pipeline import SynthSpec, generate_synth
from gtloc.gtformer import GTFormer, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    # smallest config exercising every piece: 16 patches + 4 globals + class
    return ModelConfig(
        image_size=32,
        patch_size=8,
        embed_dim=8,
        num_heads=1,
        num_blocks=2,
        num_gta_blocks=1,
        num_global_tokens=4,
        num_classes=3,
        downsample_size=8,
    )


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    model = GTFormer(tiny_config)
    model.eval()
    return model


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Small synthetic corpus shared by provider/CLI tests (not the desk run)."""
    root = tmp_path_factory.mktemp("mini_synth")
    spec = SynthSpec(num_classes=2, train_per_class=4, test_per_class=3, canvas=32, seed=7)
    generate_synth(spec, root)
    return root
