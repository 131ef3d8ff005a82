#!/usr/bin/env python3
"""Convert the PNG sprite sheets shipped by the `tfjs-cifar10` npm package into
the standard CIFAR-10 binary batches (1 label byte + 1024 R + 1024 G + 1024 B).

Each sheet is 1024 px wide and one image per row, with pixels stored
row-major and RGB interleaved. Labels come from the accompanying JSON lists.

usage: png_sheets_to_cifar_bin.py <unpacked npm package dir> <output dir>
"""
import json
import os
import sys

import numpy as np
from PIL import Image


def convert(sheet, labels, out_path):
    px = np.asarray(Image.open(sheet).convert("RGB"), dtype=np.uint8)
    assert px.shape == (len(labels), 1024, 3), px.shape
    planes = px.transpose(0, 2, 1).reshape(len(labels), 3072)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
    rec.tofile(out_path)


def main():
    src, dst = sys.argv[1], sys.argv[2]
    os.makedirs(dst, exist_ok=True)
    train = json.load(open(os.path.join(src, "train_lables.json")))
    test = json.load(open(os.path.join(src, "test_lables.json")))
    for i in range(5):
        convert(
            os.path.join(src, f"data_batch_{i + 1}.png"),
            train[i * 10000:(i + 1) * 10000],
            os.path.join(dst, f"data_batch_{i + 1}.bin"),
        )
    convert(os.path.join(src, "test_batch.png"), test, os.path.join(dst, "test_batch.bin"))


if __name__ == "__main__":
    main()
