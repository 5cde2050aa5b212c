#!/usr/bin/env python3
"""Turn the CIFAR-10 python batches into the 8x8 matrices the acceptance run reads.

usage: cifar_to_ntkm.py CIFAR_DIR OUT_DIR [--train 1000] [--test 2000]

CIFAR_DIR is the extracted `cifar-10-batches-py`. Images are averaged over
4x4 blocks down to 8x8x3, flattened in HWC order and standardized per channel
with training-set statistics. Labels are one-hot. Point TANGENT_KERNELS_CIFAR
at OUT_DIR (or use data/cifar8 in the repository root).
"""

import argparse
import pathlib
import pickle
import struct

import numpy as np


def write_ntkm(path, m):
    m = np.ascontiguousarray(m, dtype="<f8")
    with open(path, "wb") as f:
        f.write(b"NTKM")
        f.write(struct.pack("<IQQ", 1, m.shape[0], m.shape[1]))
        f.write(m.tobytes())


def load(paths):
    xs, ys = [], []
    for p in paths:
        with open(p, "rb") as f:
            d = pickle.load(f, encoding="bytes")
        xs.append(d[b"data"])
        ys.extend(d[b"labels"])
    x = np.concatenate(xs).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return x, np.array(ys)


def downsample(x):
    return x.reshape(len(x), 8, 4, 8, 4, 3).mean(axis=(2, 4))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("cifar_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--train", type=int, default=1000)
    ap.add_argument("--test", type=int, default=2000)
    args = ap.parse_args()

    x_train, y_train = load(sorted(args.cifar_dir.glob("data_batch_*")))
    x_test, y_test = load([args.cifar_dir / "test_batch"])
    x_train, y_train = downsample(x_train[: args.train]), y_train[: args.train]
    x_test, y_test = downsample(x_test[: args.test]), y_test[: args.test]

    mean = x_train.mean(axis=(0, 1, 2))
    std = x_train.std(axis=(0, 1, 2))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, x, y in [("train", x_train, y_train), ("test", x_test, y_test)]:
        write_ntkm(args.out_dir / f"{name}_x.ntkm", ((x - mean) / std).reshape(len(x), -1))
        write_ntkm(args.out_dir / f"{name}_y.ntkm", np.eye(10)[y])


if __name__ == "__main__":
    main()
