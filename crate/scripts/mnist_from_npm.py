"""Build gzipped IDX files from the digits bundled in the npm `mnist` package.

The package stores 10,000 MNIST digits as JSON arrays of x/255 rounded to
three decimals; round(x * 255) recovers the original bytes. The digits are
split per class into train and test parts with a fixed seed.

usage: python3 scripts/mnist_from_npm.py <package>/src/digits data/mnist10k
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path

TEST_FRACTION = 0.2
SEED = 0


def load_digit(path):
    flat = json.loads(path.read_text())["data"]
    assert len(flat) % 784 == 0, path
    pixels = bytes(round(v * 255) for v in flat)
    return [pixels[i : i + 784] for i in range(0, len(pixels), 784)]


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(img)


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    rng = random.Random(SEED)
    train, test = [], []
    for digit in range(10):
        images = load_digit(Path(src) / f"{digit}.json")
        rng.shuffle(images)
        cut = round(len(images) * TEST_FRACTION)
        test += [(img, digit) for img in images[:cut]]
        train += [(img, digit) for img in images[cut:]]
    rng.shuffle(train)
    rng.shuffle(test)
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train", train), ("test", test)):
        write_images(out / f"{name}-images-idx3-ubyte.gz", [r[0] for r in rows])
        write_labels(out / f"{name}-labels-idx1-ubyte.gz", [r[1] for r in rows])
        print(f"{name}: {len(rows)}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
