"""Convert the handwritten-digit JSON files of the npm ``mnist`` package to gzipped IDX.

The package ships 10,000 28x28 digits as ``src/digits/<label>.json`` with
flat float pixel lists in [0, 1]. Usage::

    cd /tmp && npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/fetch_digits.py /tmp/package/src/digits data/digits

The first 80% of each class (in file order) becomes the train split, the
rest the test split; both are shuffled with a fixed seed.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from cfsnn.data import make_rng, write_idx


def convert(source: Path, dest: Path, train_fraction: float = 0.8, seed: int = 0) -> dict:
    parts = {"train": ([], []), "test": ([], [])}
    for label in range(10):
        flat = np.asarray(json.loads((source / f"{label}.json").read_text())["data"], dtype=float)
        images = np.clip(np.rint(flat.reshape(-1, 28, 28) * 255.0), 0, 255).astype(np.uint8)
        cut = int(round(train_fraction * len(images)))
        for split, chunk in (("train", images[:cut]), ("test", images[cut:])):
            parts[split][0].append(chunk)
            parts[split][1].append(np.full(len(chunk), label, dtype=np.uint8))
    dest.mkdir(parents=True, exist_ok=True)
    counts = {}
    for i, (split, (imgs, labels)) in enumerate(parts.items()):
        imgs, labels = np.concatenate(imgs), np.concatenate(labels)
        order = make_rng(seed, i).permutation(len(labels))
        prefix = "train" if split == "train" else "t10k"
        write_idx(imgs[order], labels[order], dest / f"{prefix}-images-idx3-ubyte.gz",
                  dest / f"{prefix}-labels-idx1-ubyte.gz", compress=True)
        counts[split] = len(labels)
    return counts


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", type=Path, help="directory holding 0.json ... 9.json")
    parser.add_argument("dest", type=Path)
    parser.add_argument("--train-fraction", type=float, default=0.8)
    args = parser.parse_args()
    print(convert(args.source, args.dest, args.train_fraction))


if __name__ == "__main__":
    main()
