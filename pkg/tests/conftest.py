import pytest
import torch

import milexplain as mx


def tiny_dataset(num_bags=12, bag_size=4, image_size=16, num_classes=3, seed=0):
    return mx.generate_synthetic(mx.SynthConfig(
        num_bags=num_bags, bag_size=bag_size, image_size=image_size,
        num_classes=num_classes, rng_seed=seed))


@pytest.fixture()
def tiny_set():
    return tiny_dataset()


@pytest.fixture()
def tiny_model():
    torch.manual_seed(0)
    return mx.MILModel(num_classes=3, embed_dim=16, attention_dim=8, base_width=4)
