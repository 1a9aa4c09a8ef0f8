#!/usr/bin/env python3
"""Writes the synthetic fixture images, masks and benchmark manifests.

    python3 tools/make_fixture_images.py fixtures/
"""

import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

W, H = 40, 32


def scene(kind):
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    bg = np.stack([0.2 + 0.4 * x / W, 0.3 + 0.3 * y / H, 0.6 - 0.2 * x / W], axis=-1)
    if kind == "disc":
        mask = (x - 24.5) ** 2 + (y - 13.5) ** 2 <= 7.0**2
        color = [0.9, 0.2, 0.1]
    elif kind == "square":
        mask = (x >= 10) & (x < 22) & (y >= 12) & (y < 26)
        color = [0.1, 0.8, 0.2]
    else:
        mask = ((x.astype(int) // 3) % 2 == 0) & (y >= 6) & (y < 20)
        color = [0.95, 0.95, 0.2]
    img = np.where(mask[..., None], np.array(color), bg)
    return (img * 255).round().astype(np.uint8), mask


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "fixtures")
    (out / "images").mkdir(parents=True, exist_ok=True)
    labels = {"disc": "cat", "square": "dog", "stripes": "car"}
    seg, points, perturb = [], [], []
    for kind, label in labels.items():
        img, mask = scene(kind)
        Image.fromarray(img, "RGB").save(out / "images" / f"{kind}.png", optimize=False)
        Image.fromarray((mask * 255).astype(np.uint8), "L").save(out / "images" / f"{kind}_mask.png", optimize=False)
        inside = np.zeros_like(mask)
        inside[:, 5:35] = True
        ys, xs = np.nonzero(mask & inside)
        pos = [[float(xs[i]), float(ys[i])] for i in (0, len(xs) // 2, len(xs) - 1)]
        neg = [[5.0, 2.0], [34.0, 30.0]]
        seg.append({"image": f"images/{kind}.png", "mask": f"images/{kind}_mask.png", "label": label})
        points.append({"image": f"images/{kind}.png", "points": {label: {"pos": pos, "neg": neg}}})
        perturb.append({"image": f"images/{kind}.png", "label": label})
    for name, rows in [("seg", seg), ("points", points), ("perturb", perturb)]:
        with open(out / f"manifest_{name}.jsonl", "w") as f:
            for r in rows:
                f.write(json.dumps(r) + "\n")


if __name__ == "__main__":
    main()
