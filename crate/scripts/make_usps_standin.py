#!/usr/bin/env python3
"""Build a USPS-format stand-in dataset from the digits bundled in the npm `mnist` package.

Each 28x28 digit is cropped to its ink bounding box, scaled (aspect preserved)
to fit a 16x16 frame, centred, and written in the classic USPS text layout:
one sample per line, the label followed by 256 row-major pixel values in
[-1, 1]. 7291 samples go to the train file and 2007 to the test file,
matching the canonical USPS split sizes.

usage: make_usps_standin.py PATH/TO/mnist/package/src/digits OUT_DIR
"""
import gzip
import json
import random
import sys
from pathlib import Path

import numpy as np
from PIL import Image

N_TRAIN, N_TEST, SIDE = 7291, 2007, 16


def to_usps(flat):
    img = np.asarray(flat, dtype=np.float64).reshape(28, 28)
    rows = np.where(img.max(axis=1) > 0.05)[0]
    cols = np.where(img.max(axis=0) > 0.05)[0]
    if len(rows) == 0:
        return np.full((SIDE, SIDE), -1.0)
    crop = img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    h, w = crop.shape
    scale = SIDE / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    resized = Image.fromarray((crop * 255).astype(np.uint8)).resize((nw, nh), Image.LANCZOS)
    out = np.zeros((SIDE, SIDE))
    top, left = (SIDE - nh) // 2, (SIDE - nw) // 2
    out[top:top + nh, left:left + nw] = np.asarray(resized, dtype=np.float64) / 255.0
    out = out / max(out.max(), 1e-9)
    return np.clip(out, 0.0, 1.0) * 2.0 - 1.0


def main():
    src, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    samples = []
    for label in range(10):
        flat = json.loads((src / f"{label}.json").read_text())["data"]
        for i in range(len(flat) // 784):
            samples.append((label, flat[i * 784:(i + 1) * 784]))
    random.Random(7291).shuffle(samples)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {"zip.train.gz": samples[:N_TRAIN], "zip.test.gz": samples[N_TRAIN:N_TRAIN + N_TEST]}
    for name, rows in splits.items():
        with gzip.open(out_dir / name, "wt") as fh:
            for label, flat in rows:
                px = to_usps(flat).ravel()
                fh.write(f"{label:.4f} " + " ".join(f"{v:.4f}" for v in px) + "\n")
        print(f"{name}: {len(rows)} samples")


if __name__ == "__main__":
    main()
