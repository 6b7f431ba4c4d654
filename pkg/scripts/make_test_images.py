"""Regenerate the bundled 256x256 test images from scikit-image's sample data.

Sources (all CC0 / public domain / no known copyright restrictions):
camera (Lav Varshney, CC0), astronaut (NASA, public domain, converted to
gray), coins (Brooklyn Museum, no known restrictions), grass (CC0).
"""

from pathlib import Path

import numpy as np
from skimage import color, data

from lksvd.imageops import save_image

OUT = Path(__file__).resolve().parents[1] / "src" / "lksvd" / "data"

CROPS = {
    "astronaut": (lambda: color.rgb2gray(data.astronaut()) * 255.0, (30, 130)),
    "camera": (data.camera, (60, 150)),
    "coins": (data.coins, (20, 60)),
    "grass": (data.grass, (0, 0)),
}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, (load, (r, c)) in CROPS.items():
        img = np.asarray(load(), dtype=np.float64)[r:r + 256, c:c + 256]
        save_image(img, OUT / f"{name}.pgm")
        print(name, img.shape)


if __name__ == "__main__":
    main()
