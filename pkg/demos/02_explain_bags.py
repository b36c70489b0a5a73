"""Attribution demo: explain bag decisions with all four methods.

Loads the checkpoint and dataset produced by 01_train_model.py, runs
GradCAM, LRP, IBA and InputIBA on a couple of test bags, renders heatmap
overlays, and scores each map against the generator's ground-truth masks.

Run from the repository root (after demo 01):

    python3 demos/02_explain_bags.py
"""

from pathlib import Path

import milexplain as mx
from milexplain.viz import save_overlays

TRAIN_OUT = Path(__file__).parent / "out" / "train"
OUT = Path(__file__).parent / "out" / "explain"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    model = mx.load_checkpoint(TRAIN_OUT / "checkpoint.pt")
    data = mx.load_dataset(TRAIN_OUT / "dataset")
    train_set, _, test_set = mx.stratified_split(data, (0.6, 0.2, 0.2),
                                                 rng_seed=7)
    bags = test_set.bags[:2]

    # IBA variants need per-layer noise statistics calibrated on clean
    # training bags before any mask can be optimized.
    stats = mx.estimate_noise_stats(model, train_set.bags[:16])

    configs = {
        "gradcam": mx.GradCAMConfig(),
        "lrp": mx.LRPRuleAssignment(),
        "iba": mx.IBAConfig(noise_stats=stats),
        "input_iba": mx.InputIBAConfig(
            deep_bottleneck=mx.IBAConfig(noise_stats=stats,
                                         mask_init_logit=3.0,
                                         optimization_steps=300)),
    }

    for bag in bags:
        print(f"\n{bag.bag_id} (label {bag.label})")
        for method, cfg in configs.items():
            result = mx.explain(model, bag, bag.label, method, cfg)
            loc = mx.localization_score(result, bag)
            hits = [s["pointing_hit"] for s in loc if not s["skipped"]]
            mass = [s["mass_fraction"] for s in loc if not s["skipped"]]
            print(f"  {method:>9}: pointing {sum(hits)}/{len(hits)}, "
                  f"mean in-mask mass {sum(mass) / len(mass):.3f}")
            save_overlays(result, bag, OUT / bag.bag_id / method)

    print(f"\noverlays written to {OUT}")


if __name__ == "__main__":
    main()
