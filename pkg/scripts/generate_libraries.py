"""Regenerate the shipped 48-bit marker libraries (HD 11 to 23).

HD 11 takes about a minute; the others take seconds.

    python scripts/generate_libraries.py [--hd 13 15] [--out src/stagmark/libraries]
"""

import argparse
import time
from pathlib import Path

from stagmark.codec import check_library, generate_library

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "stagmark" / "libraries"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hd", type=int, nargs="*", default=[11, 13, 15, 17, 19, 21, 23])
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for d in args.hd:
        t0 = time.perf_counter()
        lib = generate_library(48, d)
        ok = check_library(lib)
        path = args.out / f"hd{d}.staglib"
        lib.save(path)
        print(f"HD{d}: {len(lib)} codewords, verified={ok}, {time.perf_counter() - t0:.1f}s -> {path}")


if __name__ == "__main__":
    main()
