import json
import os

import numpy as np
import pytest
import torch

from t2vface.data import ImageTensor, PairedSample, synthesize_toy_dataset
from t2vface.networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    PatchNetSpec,
    build_discriminator,
    build_generator,
    build_patch_transformer,
)

torch.set_num_threads(max(1, os.cpu_count() or 1))


def random_image(rng, resolution=16, channels=3):
    data = rng.uniform(-1.0, 1.0, size=(resolution, resolution, channels)).astype(np.float32)
    return ImageTensor(data)


def make_sample(rng, subject, resolution=16, pose="frontal", attributes=()):
    return PairedSample(
        thermal=random_image(rng, resolution, 1),
        visible=random_image(rng, resolution, 3),
        subject_id=subject,
        pose_tag=pose,
        attributes=frozenset(attributes),
    )


@pytest.fixture(scope="session")
def toy_samples():
    # small shared toy set: 4 subjects x 4 pairs at the minimum resolution
    return synthesize_toy_dataset(4, 4, 64, seed=11)


@pytest.fixture
def tiny_generator():
    return build_generator(GeneratorSpec(resolution=16, depth=2, base_channels=4), seed=0)


@pytest.fixture
def tiny_discriminator():
    return build_discriminator(
        DiscriminatorSpec(resolution=16, n_identities=3, trunk_layers=2, base_channels=4),
        seed=1,
    )


@pytest.fixture
def tiny_patch_net():
    return build_patch_transformer(
        PatchNetSpec(patch_size=16, layers=4, channels=4), seed=2
    )


def write_manifest(tmp_path, rows, name="manifest.json"):
    path = tmp_path / name
    path.write_text(json.dumps(rows))
    return str(path)
