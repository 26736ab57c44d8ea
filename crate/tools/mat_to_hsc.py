#!/usr/bin/env python3
"""Convert a MATLAB hyperspectral scene and its ground truth to .hsc.

    python tools/mat_to_hsc.py Indian_pines_corrected.mat Indian_pines_gt.mat ip.hsc

The cube variable is the only 3-D array in the first file and the label
variable the only 2-D integer array in the second, unless named with
--cube-key / --gt-key. Labels 0 mean unlabeled; K is the largest label.
"""

import argparse
import struct
import sys

import numpy as np
from scipy.io import loadmat


def pick(mat, key, ndim, what):
    if key:
        return np.asarray(mat[key])
    found = [k for k, v in mat.items() if not k.startswith("__") and getattr(v, "ndim", 0) == ndim]
    if len(found) != 1:
        sys.exit(f"cannot pick the {what}: candidates {found}; pass the key explicitly")
    return np.asarray(mat[found[0]])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("cube")
    p.add_argument("gt")
    p.add_argument("out")
    p.add_argument("--cube-key")
    p.add_argument("--gt-key")
    p.add_argument("--names", help="comma-separated class names, one per class")
    a = p.parse_args()

    cube = pick(loadmat(a.cube), a.cube_key, 3, "cube").astype("<f4")
    labels = pick(loadmat(a.gt), a.gt_key, 2, "ground truth").astype("<i4")
    h, w, b = cube.shape
    if labels.shape != (h, w):
        sys.exit(f"label raster {labels.shape} does not match cube {(h, w)}")
    if labels.min() < 0:
        sys.exit("negative labels")
    k = int(labels.max())
    names = a.names.split(",") if a.names else []
    if names and len(names) != k:
        sys.exit(f"{len(names)} names for {k} classes")

    with open(a.out, "wb") as f:
        f.write(b"HSC1")
        f.write(struct.pack("<4I", h, w, b, k))
        f.write(np.ascontiguousarray(cube).tobytes())
        f.write(np.ascontiguousarray(labels).tobytes())
        f.write(struct.pack("<I", len(names)))
        for n in names:
            raw = n.encode()
            f.write(struct.pack("<I", len(raw)) + raw)
    print(f"{a.out}: {h}x{w}x{b}, {k} classes, {int((labels > 0).sum())} labeled pixels")


if __name__ == "__main__":
    main()
