"""Convert a local copy of the BSD68 test set to 8-bit PGM for ``lksvd eval``.

BSD68 cannot be redistributed here, so bring your own copy. The usual
distribution is a folder of 68 grayscale PNGs named ``test001.png`` to
``test068.png`` (481x321 or 321x481 pixels). Usage::

    python scripts/prepare_bsd68.py /path/to/BSD68 data/bsd68
    LKSVD_BSD68=data/bsd68 pytest tests/test_acceptance.py -k bsd68

The script writes ``SHA256SUMS`` next to the converted files, listing the
source PNGs, so later runs can confirm that they use the same copy. No
reference checksums ship with the repository because they could not be
verified against an authoritative source.
"""

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from lksvd.imageops import save_image

EXPECTED = [f"test{i:03d}.png" for i in range(1, 69)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path, help="folder holding test001.png ... test068.png")
    ap.add_argument("dst", type=Path, help="output folder for .pgm files")
    args = ap.parse_args(argv)

    missing = [name for name in EXPECTED if not (args.src / name).exists()]
    if missing:
        print(f"missing {len(missing)} files, e.g. {missing[:3]}", file=sys.stderr)
        return 2
    args.dst.mkdir(parents=True, exist_ok=True)
    sums = []
    for name in EXPECTED:
        raw = (args.src / name).read_bytes()
        sums.append(f"{hashlib.sha256(raw).hexdigest()}  {name}")
        with Image.open(args.src / name) as im:
            img = np.asarray(im.convert("L"), dtype=np.float64)
        save_image(img, args.dst / name.replace(".png", ".pgm"))
    (args.dst / "SHA256SUMS").write_text("\n".join(sums) + "\n")
    print(f"wrote {len(EXPECTED)} images to {args.dst}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
