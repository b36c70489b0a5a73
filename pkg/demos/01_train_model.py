"""End-to-end training demo.

Synthesizes a bag dataset with known discriminative pixels, trains the
attention-MIL classifier with early stopping, and reports test metrics.
Artifacts land in demos/out/train so the later demos can reuse them.

Run from the repository root:

    python3 demos/01_train_model.py
"""

from pathlib import Path

import torch

import milexplain as mx

OUT = Path(__file__).parent / "out" / "train"


def main():
    OUT.mkdir(parents=True, exist_ok=True)

    # One colored motif per class, painted into a fraction of each bag's
    # instances; the remaining instances are pure clutter. Ground-truth
    # masks are stored alongside the pixels.
    data = mx.generate_synthetic(mx.SynthConfig(num_bags=300, rng_seed=7))
    train_set, val_set, test_set = mx.stratified_split(
        data, (0.6, 0.2, 0.2), rng_seed=7)
    print(f"bags: {len(train_set.bags)} train / {len(val_set.bags)} val / "
          f"{len(test_set.bags)} test")

    torch.manual_seed(0)
    model = mx.MILModel(num_classes=data.num_classes)
    model, log = mx.train(model, train_set, val_set,
                          mx.TrainConfig(rng_seed=0))
    print(f"trained for {len(log)} epochs, "
          f"final val loss {log[-1]['val_loss']:.4f}")

    report = mx.evaluate(model, test_set)
    print(f"test accuracy {report.accuracy:.3f}, "
          f"macro F1 {report.macro_f1:.3f}")
    print("confusion matrix:")
    print(report.confusion_matrix)

    mx.save_dataset(data, OUT / "dataset", force=True)
    mx.save_checkpoint(model, OUT / "checkpoint.pt")
    report.save(OUT / "metrics.json")
    print(f"artifacts written to {OUT}")


if __name__ == "__main__":
    main()
