"""Write a stratified MNIST subset as IDX files.

Source: the 5000-sample MNIST extract bundled with the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz, 500 images per digit). Usage:

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist-subset
"""

import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 50


def read_csv(source: Path) -> np.ndarray:
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as z:
            raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = source.read_bytes()
    return np.loadtxt(io.TextIOWrapper(gzip.GzipFile(fileobj=io.BytesIO(raw))), delimiter=",")


def write_idx(path: Path, array: np.ndarray, magic: int) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.astype(np.uint8).tobytes())


def main() -> None:
    source, out = Path(sys.argv[1]), Path(sys.argv[2])
    table = read_csv(source)
    images, labels = table[:, :-1], table[:, -1].astype(int)
    rng = np.random.default_rng(0)
    train, test = [], []
    for k in range(10):
        idx = rng.permutation(np.flatnonzero(labels == k))
        train.extend(idx[:TRAIN_PER_CLASS])
        test.extend(idx[TRAIN_PER_CLASS:TRAIN_PER_CLASS + TEST_PER_CLASS])
    out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", rng.permutation(train)), ("t10k", rng.permutation(test))):
        write_idx(out / f"{prefix}-images-idx3-ubyte", images[idx].reshape(-1, 28, 28), 0x803)
        write_idx(out / f"{prefix}-labels-idx1-ubyte", labels[idx], 0x801)
        print(prefix, len(idx))


if __name__ == "__main__":
    main()
