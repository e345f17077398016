"""Run every experiment and write CSV reports plus manifests to one directory.

    python scripts/run_experiments.py --out results [--quick]

``--quick`` shrinks trial counts for a smoke run (minutes instead of the
better part of an hour).
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from stagmark import bench
from stagmark.libraries import load_library
from stagmark.render import NoiseSpec

log = logging.getLogger("experiments")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--corpus", type=Path, default=None, help="existing corpus; built under --out otherwise")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = args.out
    trials = 20 if args.quick else 200
    t0 = time.perf_counter()

    def done(rep, name=None):
        csv_path, _ = rep.write(out, name)
        log.info("wrote %s (%.0fs elapsed)", csv_path, time.perf_counter() - t0)

    done(bench.run_localization_sim(trials=1000 if args.quick else 10_000, seed=args.seed))
    done(bench.ExperimentReport("vfp_reference", bench.reference_vfp_comparison(), bench.provenance()))

    lib = load_library(11)
    noise = NoiseSpec(sigma=2.0)
    angle = bench.ExperimentConfig(sweep="angle", values=tuple(range(0, 90, 5)), trials=trials, noise=noise,
                                   seed=args.seed)
    done(bench.run_stability_sweep(angle, lib))
    dist = bench.ExperimentConfig(sweep="distance", values=tuple(float(d) for d in range(3, 17)),
                                  trials=trials, noise=noise, seed=args.seed)
    done(bench.run_stability_sweep(dist, lib))

    corpus = args.corpus
    if corpus is None:
        corpus = out / "corpus"
        bench.build_clutter_corpus(corpus, count=60 if args.quick else 520, seed=args.seed)
    scan = bench.run_false_positive_scan(corpus)
    scan.report.provenance["validated_subset_of_unvalidated"] = scan.subset_holds
    scan.report.provenance["candidates_per_image_median"] = float(np.median(scan.candidates_per_image))
    done(scan.report)

    scene, tlib = bench.cluttered_scene(seed=args.seed)
    img = scene.noisy(np.random.default_rng(args.seed))
    stages = bench.run_timing_profile(img, tlib, runs=50)
    done(bench.ExperimentReport("timing", [{f"{k}_ms": v for k, v in stages.items()}],
                                bench.provenance(seed=args.seed, image_size=[img.shape[1], img.shape[0]])))


if __name__ == "__main__":
    main()
