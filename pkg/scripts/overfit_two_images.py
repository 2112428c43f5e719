"""Fit the network to two fixed synthetic images with plain SGD and print the loss curve.

    python scripts/overfit_two_images.py --steps 200 --lr 1e-4
"""

import argparse

import numpy as np

from hierseg.data import SynthConfig, examples_for, synth_generate
from hierseg.hierarchy import default_occlusal_hierarchy
from hierseg.loss import LossConfig, combined_loss
from hierseg.model import DualBranchNet, backward
from hierseg.training import sgd_step


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=3)
    args = p.parse_args()

    h = default_occlusal_hierarchy()
    ex = examples_for(synth_generate(SynthConfig(patients=1, size=args.size, seed=args.seed)))[:2]
    images = np.stack([e.image for e in ex])
    labels = np.stack([e.labels for e in ex])
    net = DualBranchNet(seed=0)
    per_pixel = LossConfig(reduction="mean")

    for step in range(1, args.steps + 1):
        grads, total = backward(net, images, labels, h)
        for g in grads.values():
            g /= len(images)
        sgd_step(net, grads, args.lr)
        if step == 1 or step % 20 == 0:
            mean_form = np.mean([combined_loss(net.forward(i), l, h, per_pixel) for i, l in zip(images, labels)])
            print(f"step={step} loss_pixel_sum={total / len(images):.3f} loss_per_pixel={mean_form:.4f}")


if __name__ == "__main__":
    main()
