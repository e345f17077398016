"""Write a marker-free clutter corpus for the false-positive scan.

Images are mosaics of the scikit-image sample photographs plus flat
rectangles and frames, so they contain plenty of straight edges and corners.

    python scripts/build_corpus.py --out data/corpus --count 520
"""

import argparse
from pathlib import Path

from stagmark.bench import build_clutter_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data/corpus"))
    ap.add_argument("--count", type=int, default=520)
    ap.add_argument("--size", type=int, nargs=2, default=(640, 480), metavar=("W", "H"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    files = build_clutter_corpus(args.out, args.count, tuple(args.size), args.seed)
    print(f"{len(files)} images in {args.out}")


if __name__ == "__main__":
    main()
