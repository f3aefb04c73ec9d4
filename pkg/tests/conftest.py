import numpy as np
import pytest
import torch

from backbone import BackboneConfig, build_backbone
from benchmark_data import ManifestImages, generate_benchmark
from quality_gate import QualityGate, SharpnessEstimator


@pytest.fixture
def tiny_config():
    return BackboneConfig(image_size=32, channels=1, patch_size=8, embed_dim=16, attention_dim=8,
                          num_heads=2, mlp_ratio=2.0, depth=2, embedding_dim=12)


@pytest.fixture
def tiny_backbone(tiny_config):
    return build_backbone(tiny_config, seed=0)


@pytest.fixture
def tiny_images():
    generator = torch.Generator()
    generator.manual_seed(123)
    return torch.rand(4, 1, 32, 32, generator=generator)


@pytest.fixture(scope='session')
def tiny_benchmark(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp('benchmark')
    return generate_benchmark(out_dir, n_identities=4,
                              per_identity_counts={'train': 4, 'gallery': 2, 'probe': 4},
                              seed=0, image_size=32, n_unknown_identities=2,
                              train_degraded_fraction=0.5)


@pytest.fixture(scope='session')
def tiny_gate(tiny_benchmark):
    return QualityGate(SharpnessEstimator()).calibrated(ManifestImages(tiny_benchmark, 'train'), 16, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
