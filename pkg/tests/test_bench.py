import math

import numpy as np
import pytest

import milexplain as mx
from milexplain.attribution.base import AttributionResult
from milexplain.bench import pixel_ranking, remove_top_pixels
from milexplain.errors import ShapeError


class MeanModel:
    """Duck-typed scorer: class-0 probability is the mean pixel value."""

    def bag_probs(self, pixels):
        m = float(np.mean(pixels))
        return np.array([m, 1.0 - m])


def _two_pixel_bag():
    pixels = np.zeros((3, 1, 2), dtype=np.float32)
    pixels[:, 0, 0] = 1.0
    inst = mx.Instance(pixels=pixels, ground_truth_mask=None, instance_id="i0")
    return mx.Bag(instances=[inst], label=0, bag_id="b0")


def _two_pixel_result():
    return AttributionResult(method="gradcam", target_class=0,
                             maps=np.array([[[1.0, 0.0]]]), signed=False,
                             metadata={})


def test_insertion_toy_oracle():
    curve = mx.insertion_curve(MeanModel(), _two_pixel_bag(),
                               _two_pixel_result(), steps=2)
    assert [p[1] for p in curve.points] == pytest.approx([0.0, 0.5, 0.5])
    assert curve.auc == pytest.approx(0.375, abs=1e-12)
    curve.validate()


def test_deletion_toy_oracle():
    curve = mx.deletion_curve(MeanModel(), _two_pixel_bag(),
                              _two_pixel_result(), steps=2)
    assert [p[1] for p in curve.points] == pytest.approx([0.5, 0.0, 0.0])
    assert curve.auc == pytest.approx(0.125, abs=1e-12)
    curve.validate()


def test_curve_endpoints_general():
    rng = np.random.default_rng(0)
    pixels = rng.random((2, 3, 4, 4)).astype(np.float32)
    insts = [mx.Instance(pixels=pixels[k], ground_truth_mask=None,
                         instance_id=f"i{k}") for k in range(2)]
    bag = mx.Bag(instances=insts, label=0, bag_id="b")
    result = AttributionResult(method="gradcam", target_class=0,
                               maps=rng.random((2, 4, 4)), signed=False,
                               metadata={})
    model = MeanModel()
    ins = mx.insertion_curve(model, bag, result, steps=4)
    dele = mx.deletion_curve(model, bag, result, steps=4)
    orig = model.bag_probs(pixels)[0]
    assert ins.points[0][1] == pytest.approx(0.0)
    assert ins.points[-1][1] == pytest.approx(orig)
    assert dele.points[0][1] == pytest.approx(orig)
    assert dele.points[-1][1] == pytest.approx(0.0)
    # linear-model duality: insertion(t) + deletion(t) = orig + baseline
    for (_, yi), (_, yd) in zip(ins.points, dele.points):
        assert yi + yd == pytest.approx(orig, abs=1e-5)


def test_ranking_stable_tie_break():
    maps = np.zeros((2, 2, 2))
    order = pixel_ranking(maps)
    assert np.array_equal(order, np.arange(8))
    maps[1, 0, 1] = 1.0
    order = pixel_ranking(maps)
    assert order[0] == 5
    assert np.array_equal(order[1:], [0, 1, 2, 3, 4, 6, 7])


def test_shape_mismatch_error():
    bad = AttributionResult(method="gradcam", target_class=0,
                            maps=np.zeros((1, 3, 3)), signed=False, metadata={})
    with pytest.raises(ShapeError):
        mx.insertion_curve(MeanModel(), _two_pixel_bag(), bad, steps=2)


def test_curve_validation_rejects_bad_auc():
    curve = mx.insertion_curve(MeanModel(), _two_pixel_bag(),
                               _two_pixel_result(), steps=2)
    curve.auc += 1e-3
    with pytest.raises(ShapeError):
        curve.validate()


def test_aggregate_single_bag(tmp_path):
    dataset = mx.Dataset(bags=[_two_pixel_bag()], num_classes=2)
    out = mx.aggregate_auc(MeanModel(), dataset, lambda b: _two_pixel_result(),
                           steps=2, cache_dir=tmp_path)
    assert out["insertion"]["mean_auc"] == pytest.approx(0.375)
    assert out["insertion"]["std_auc"] == 0.0
    assert out["deletion"]["mean_auc"] == pytest.approx(0.125)
    assert out["failures"] == []
    # cache hit: a provider that now raises must not be consulted
    def boom(bag):
        raise RuntimeError("should not be called")
    cached = mx.aggregate_auc(MeanModel(), dataset, boom, steps=2,
                              cache_dir=tmp_path)
    assert cached["insertion"]["mean_auc"] == pytest.approx(0.375)


def test_aggregate_isolates_failures():
    bags = [_two_pixel_bag(),
            mx.Bag(instances=_two_pixel_bag().instances, label=0, bag_id="b1")]
    dataset = mx.Dataset(bags=bags, num_classes=2)

    def flaky(bag):
        if bag.bag_id == "b1":
            raise RuntimeError("boom")
        return _two_pixel_result()

    out = mx.aggregate_auc(MeanModel(), dataset, flaky, steps=2)
    assert len(out["failures"]) == 1 and "b1" in out["failures"][0]
    assert out["num_bags"]["insertion"] == 1


def test_remove_top_pixels():
    bag = _two_pixel_bag()
    dataset = mx.Dataset(bags=[bag], num_classes=2)
    maps = {"b0": np.array([[[1.0, 0.0]]])}
    out = remove_top_pixels(dataset, maps, 50.0)
    assert np.allclose(out.bags[0].instances[0].pixels, 0.0)  # top pixel zeroed
    assert np.allclose(out.bags[0].instances[0].pixels[:, 0, 1], 0.0)
    untouched = remove_top_pixels(dataset, maps, 0.0)
    assert np.array_equal(untouched.bags[0].instances[0].pixels,
                          bag.instances[0].pixels)


def test_roar_tiny_smoke():
    from conftest import tiny_dataset
    splits = mx.stratified_split(tiny_dataset(), (0.6, 0.2, 0.2))
    cfg = mx.TrainConfig(max_epochs=1)
    report = mx.roar(splits, {}, [0, 100], cfg, seeds=(0,),
                     model_kwargs={"embed_dim": 16, "attention_dim": 8,
                                   "base_width": 4})
    assert set(report.curves) == {"random"}
    points = dict(report.curves["random"])
    assert points[0.0] == report.baseline_accuracy
    assert 0.0 <= points[100.0] <= 1.0
    assert report.failures == []


def _mask_bag():
    pixels = np.zeros((3, 2, 2), dtype=np.float32)
    mask = np.array([[True, False], [False, False]])
    inst = mx.Instance(pixels=pixels, ground_truth_mask=mask, instance_id="i0")
    nomask = mx.Instance(pixels=pixels, ground_truth_mask=None, instance_id="i1")
    return mx.Bag(instances=[inst, nomask], label=0, bag_id="b")


def test_localization_trivial_cases():
    bag = _mask_bag()
    mask = bag.instances[0].ground_truth_mask

    exact = AttributionResult("gradcam", 0, np.stack([mask.astype(float)] * 2),
                              False, {})
    scores = mx.localization_score(exact, bag)
    assert scores[0]["pointing_hit"] is True
    assert scores[0]["mass_fraction"] == pytest.approx(1.0)
    assert scores[1]["skipped"] is True

    outside = np.zeros((2, 2, 2))
    outside[:, 1, 1] = 1.0
    scores = mx.localization_score(
        AttributionResult("gradcam", 0, outside, False, {}), bag)
    assert scores[0]["pointing_hit"] is False
    assert scores[0]["mass_fraction"] == pytest.approx(0.0)

    uniform = np.ones((2, 2, 2))
    scores = mx.localization_score(
        AttributionResult("gradcam", 0, uniform, False, {}), bag)
    assert scores[0]["mass_fraction"] == pytest.approx(0.25, abs=1e-9)

    zero = np.zeros((2, 2, 2))
    scores = mx.localization_score(
        AttributionResult("gradcam", 0, zero, False, {}), bag)
    assert math.isnan(scores[0]["mass_fraction"])


def test_localization_shape_error():
    bag = _mask_bag()
    wrong = AttributionResult("gradcam", 0, np.zeros((2, 3, 3)), False, {})
    with pytest.raises(ShapeError):
        mx.localization_score(wrong, bag)
