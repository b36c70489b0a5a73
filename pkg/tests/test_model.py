import math

import numpy as np
import pytest
import torch

import milexplain as mx
from milexplain.errors import FormatVersionError, ShapeError
from milexplain.model import bag_to_tensor, checkpoint_digest


def test_attention_pool_hand_oracle():
    H = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    V = torch.eye(2, dtype=torch.float64)
    w = torch.tensor([1.0, 0.0], dtype=torch.float64)
    z, alpha = mx.attention_pool(H, V, w)
    # direct scalar evaluation: scores = [tanh(1), tanh(0)] @ [1, 0]
    s0, s1 = math.tanh(1.0), 0.0
    e0, e1 = math.exp(s0), math.exp(s1)
    a0, a1 = e0 / (e0 + e1), e1 / (e0 + e1)
    assert abs(alpha[0].item() - a0) < 1e-9
    assert abs(alpha[1].item() - a1) < 1e-9
    assert torch.allclose(z, torch.tensor([a0, a1], dtype=torch.float64),
                          atol=1e-9)


def test_attention_pool_uniform_cases():
    H = torch.ones(4, 3)
    V = torch.randn(5, 3)
    w = torch.randn(5)
    _, alpha = mx.attention_pool(H, V, w)
    assert torch.allclose(alpha, torch.full((4,), 0.25), atol=1e-7)
    H = torch.randn(4, 3)
    _, alpha = mx.attention_pool(H, V, torch.zeros(5))
    assert torch.allclose(alpha, torch.full((4,), 0.25), atol=1e-7)


def test_attention_pool_shape_error():
    with pytest.raises(ShapeError):
        mx.attention_pool(torch.randn(2, 3), torch.randn(5, 4), torch.randn(5))


def test_forward_contract(tiny_model, tiny_set):
    out = tiny_model.forward_bag(tiny_set.bags[0])
    assert abs(out.probs.sum().item() - 1.0) < 1e-6
    assert out.attention.min().item() >= 0
    assert abs(out.attention.sum().item() - 1.0) < 1e-6
    assert torch.allclose(out.bag_embedding, out.attention @ out.embeddings,
                          atol=1e-5)


def test_single_instance_attention(tiny_model, tiny_set):
    bag = tiny_set.bags[0]
    single = mx.Bag(instances=bag.instances[:1], label=bag.label, bag_id="b")
    out = tiny_model.forward_bag(single)
    assert out.attention.item() == pytest.approx(1.0, abs=1e-12)


def test_identical_instances_share_attention(tiny_model, tiny_set):
    inst = tiny_set.bags[0].instances[0]
    pair = mx.Bag(instances=[inst, inst], label=0, bag_id="b")
    out = tiny_model.forward_bag(pair)
    assert torch.allclose(out.attention, torch.tensor([0.5, 0.5]), atol=1e-6)


def test_permutation_invariance(tiny_model, tiny_set):
    for bag in tiny_set.bags[:5]:
        x = bag_to_tensor(bag)
        perm = torch.randperm(x.shape[0])
        logits, alpha, _ = tiny_model(x)
        logits_p, alpha_p, _ = tiny_model(x[perm])
        assert torch.allclose(logits, logits_p, atol=1e-5)
        assert torch.allclose(alpha[perm], alpha_p, atol=1e-5)


def test_bag_to_tensor_shape_error(tiny_set):
    bag = tiny_set.bags[0]
    bad = mx.Instance(pixels=np.zeros((3, 8, 8), dtype=np.float32),
                      ground_truth_mask=None, instance_id="bad")
    mixed = mx.Bag(instances=[bag.instances[0], bad], label=0, bag_id="b")
    with pytest.raises(ShapeError, match="bad"):
        bag_to_tensor(mixed)


def test_capture_and_registry(tiny_model, tiny_set):
    x = bag_to_tensor(tiny_set.bags[0])
    with tiny_model.capture(["block2", "embed_fc"]) as acts:
        tiny_model(x)
    assert acts["block2"].shape[0] == x.shape[0]
    assert acts["block2"].ndim == 4
    assert acts["embed_fc"].shape == (x.shape[0], 16)
    with pytest.raises(ShapeError):
        with tiny_model.capture(["nope"]):
            pass


def test_checkpoint_roundtrip(tiny_model, tiny_set, tmp_path):
    x = bag_to_tensor(tiny_set.bags[0])
    path = mx.save_checkpoint(tiny_model, tmp_path / "m.pt")
    clone = mx.load_checkpoint(path)
    with torch.no_grad():
        a, _, _ = tiny_model(x)
        b, _, _ = clone(x)
    assert torch.allclose(a, b, atol=0)
    assert len(checkpoint_digest(path)) == 64


def test_checkpoint_version_check(tiny_model, tmp_path):
    path = mx.save_checkpoint(tiny_model, tmp_path / "m.pt")
    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(FormatVersionError):
        mx.load_checkpoint(path)
