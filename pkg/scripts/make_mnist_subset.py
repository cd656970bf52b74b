"""Build a 10k-example MNIST subset in IDX format from the npm ``mnist`` package.

The package ships per-digit JSON files whose ``data`` arrays hold 28x28
images as floats rounded to three decimals, so ``round(v * 255)`` recovers
the original bytes.  Fetch it with ``npm pack mnist`` and extract, then:

    python3 scripts/make_mnist_subset.py /path/to/package data/mnist10k

Each digit contributes 500 training images and up to 500 test images chosen
by a seeded shuffle.  Some digits have fewer than 1000 images in the package,
so the default run gives 5000 training and 4756 test examples, disjoint.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from orthonet.data import write_idx


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("package", type=Path)
    parser.add_argument("out", type=Path)
    parser.add_argument("--per-class", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    parts = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        flat = json.loads((args.package / "src" / "digits" / f"{digit}.json").read_text())["data"]
        images = np.rint(np.asarray(flat, dtype=np.float64).reshape(-1, 28, 28) * 255)
        images = images.astype(np.uint8)
        order = rng.permutation(len(images))
        n = args.per_class
        for split, pick in (("train", order[:n]), ("t10k", order[n:2 * n])):
            parts[split][0].append(images[pick])
            parts[split][1].append(np.full(len(pick), digit, dtype=np.uint8))

    args.out.mkdir(parents=True, exist_ok=True)
    for split, (imgs, labels) in parts.items():
        imgs = np.concatenate(imgs)
        labels = np.concatenate(labels)
        order = rng.permutation(len(labels))
        write_idx(args.out / f"{split}-images-idx3-ubyte.gz", imgs[order])
        write_idx(args.out / f"{split}-labels-idx1-ubyte.gz", labels[order])
        print(f"{split}: {len(labels)} examples")


if __name__ == "__main__":
    main()
