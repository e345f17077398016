"""Command-line entry point: ``stagmark {generate,render,detect,bench}``.

Machine-readable output (JSON, CSV paths) goes to stdout; logs and the
effective-config echo go to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .codec import MarkerLibrary, check_library, generate_library, max_ber_correction
from .detect import DetectorConfig, detect_markers, detections_to_json, draw_overlay
from .libraries import ENV_VAR, default_library_path
from .pose import pose_from_unit_homography
from .render import CameraIntrinsics, NoiseSpec, read_image, render_marker, render_sheet, write_image

log = logging.getLogger("stagmark")


class UsageError(Exception):
    pass


def _echo(args: argparse.Namespace) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    log.info("effective config: %s", json.dumps(cfg, sort_keys=True, default=str))


def _load_library(path) -> MarkerLibrary:
    p = Path(path) if path else default_library_path()
    if not p.exists():
        raise FileNotFoundError(f"library not found: {p} (set --library or ${ENV_VAR})")
    return MarkerLibrary.load(p)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    if args.bits <= 0 or args.bits % 4:
        raise UsageError("--bits must be a positive multiple of 4")
    if args.mode == "hierarchical" and args.bits != 48:
        raise UsageError("hierarchical mode builds 48-bit libraries; use --mode direct for other lengths")
    lib = generate_library(args.bits, args.min_hd, mode=args.mode, sub_min_hd=args.sub_min_hd)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lib.save(out)
    ber = max_ber_correction(lib) if len(lib) else 0.0
    log.info("library size %d, max BER correction %.4f, verified %s", len(lib), ber, check_library(lib))
    print(json.dumps({"path": str(out), "size": len(lib), "min_hd": args.min_hd, "max_ber_correction": ber}))
    return 0


def cmd_render(args) -> int:
    lib = _load_library(args.library)
    if args.side < 64:
        raise UsageError("--side must be at least 64 pixels")
    if args.sheet is not None:
        if args.sheet <= 0:
            raise UsageError("--sheet must be positive")
        ids = [(args.id + k) % len(lib) for k in range(args.sheet)]
        img = render_sheet(lib, ids, side=args.side)
    else:
        if not 0 <= args.id < len(lib):
            log.error("marker id %d out of range for library of %d", args.id, len(lib))
            return 2
        img = render_marker(lib, args.id, side=args.side).pixels
    write_image(args.out, img)
    print(json.dumps({"path": str(args.out), "shape": list(img.shape)}))
    return 0


def _detector_config(args) -> DetectorConfig:
    base = DetectorConfig()
    edge = dataclasses.replace(
        base.edge,
        **{k: v for k, v in (("gradient_threshold", args.gradient_threshold),
                             ("validation_threshold", args.edge_validation)) if v is not None},
    )
    over = {"edge": edge, "refine": not args.no_refine}
    if args.alpha_rel_max is not None:
        over["alpha_rel_max"] = args.alpha_rel_max
    if args.max_correct is not None:
        over["max_correct"] = args.max_correct
    if args.no_validation:
        over["validate_perspective"] = False
    return dataclasses.replace(base, **over)


def cmd_detect(args) -> int:
    img = read_image(args.image)
    lib = _load_library(args.library)
    cfg = _detector_config(args)
    dets = detect_markers(img, lib, cfg)
    h, w = img.shape
    cam = CameraIntrinsics.for_image(w, h, args.fov) if args.fov else None
    if cam is not None:
        for i, d in enumerate(dets):
            try:
                dets[i] = dataclasses.replace(d, pose=pose_from_unit_homography(d.H_refined, cam, args.marker_side))
            except Exception as exc:  # pose is optional output
                log.warning("pose failed for marker %d: %s", d.marker_id, exc)
    extra = {"image": str(args.image)}
    report = detections_to_json(dets, cfg, **extra)
    if args.out:
        Path(args.out).write_text(report)
    else:
        print(report)
    if args.overlay:
        vis = draw_overlay(img, dets, cam.K if cam is not None else None)
        import cv2  # only needed for color output

        cv2.imwrite(str(args.overlay), vis)
    log.info("%d marker(s) detected", len(dets))
    return 0 if dets else 1


def cmd_bench(args) -> int:
    out = Path(args.out)
    exp = args.experiment
    if exp == "localization-sim":
        rep = bench.run_localization_sim(trials=args.trials or 10_000, seed=args.seed)
    elif exp == "stability":
        values = tuple(args.values) if args.values else (
            tuple(range(0, 90, 5)) if args.sweep == "angle" else tuple(np.round(np.arange(3.0, 12.5, 1.0), 2)))
        cfg = bench.ExperimentConfig(sweep=args.sweep, values=values, trials=args.trials or 200,
                                     noise=NoiseSpec(sigma=args.noise, blur_sigma=args.blur), seed=args.seed,
                                     library_hd=args.hd)
        rep = bench.run_stability_sweep(cfg)
    elif exp == "false-positives":
        if not args.corpus:
            raise UsageError("false-positives needs --corpus")
        scan = bench.run_false_positive_scan(args.corpus)
        rep = scan.report
        rep.provenance["validated_subset_of_unvalidated"] = scan.subset_holds
    elif exp == "timing":
        scene, lib = bench.cluttered_scene(seed=args.seed)
        img = scene.noisy(np.random.default_rng(args.seed))
        stages = bench.run_timing_profile(img, lib, runs=max(args.trials or 50, 50))
        rep = bench.ExperimentReport("timing", [{f"{k}_ms": v for k, v in stages.items()}],
                                     bench.provenance(seed=args.seed, image_size=list(img.shape[::-1])))
    elif exp == "vfp-reference":
        rep = bench.ExperimentReport("vfp_reference", bench.reference_vfp_comparison(), bench.provenance())
    else:  # argparse restricts choices; kept for direct calls
        raise UsageError(f"unknown experiment {exp!r}")
    csv_path, man = rep.write(out)
    print(json.dumps({"csv": str(csv_path), "manifest": str(man), "rows": len(rep.rows)}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stagmark", description="Fiducial marker libraries, rendering and detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a rotation-closed marker library")
    g.add_argument("--bits", type=int, default=48)
    g.add_argument("--min-hd", type=int, required=True)
    g.add_argument("--mode", choices=("hierarchical", "direct"), default="hierarchical")
    g.add_argument("--sub-min-hd", type=int, default=None, help="12-bit block distance (hierarchical mode)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("render", help="render a marker or a printable sheet")
    r.add_argument("--library", default=None, help=f"library file (default ${ENV_VAR} or the HD11 library)")
    r.add_argument("--id", type=int, default=0)
    r.add_argument("--side", type=int, default=512)
    r.add_argument("--sheet", type=int, default=None, help="render N consecutive ids in a grid")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    d = sub.add_parser("detect", help="detect markers in a grayscale image")
    d.add_argument("image")
    d.add_argument("--library", default=None)
    d.add_argument("--out", default=None, help="write the JSON report here instead of stdout")
    d.add_argument("--overlay", default=None, help="write an overlay image")
    d.add_argument("--no-refine", action="store_true", help="skip ellipse-based homography refinement")
    d.add_argument("--no-validation", action="store_true", help="skip perspective validation")
    d.add_argument("--alpha-rel-max", type=float, default=None)
    d.add_argument("--max-correct", type=int, default=None)
    d.add_argument("--gradient-threshold", type=float, default=None)
    d.add_argument("--edge-validation", type=float, default=None, help="minimum mean gradient of an edge segment")
    d.add_argument("--fov", type=float, default=None, help="horizontal field of view in degrees; enables pose")
    d.add_argument("--marker-side", type=float, default=1.0)
    d.set_defaults(func=cmd_detect)

    b = sub.add_parser("bench", help="run an experiment and write CSV + manifest")
    b.add_argument("experiment", choices=("localization-sim", "stability", "false-positives", "timing", "vfp-reference"))
    b.add_argument("--out", default="results")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--trials", type=int, default=None)
    b.add_argument("--sweep", choices=("angle", "distance"), default="angle")
    b.add_argument("--values", type=float, nargs="+", default=None)
    b.add_argument("--noise", type=float, default=2.0)
    b.add_argument("--blur", type=float, default=0.0)
    b.add_argument("--hd", type=int, default=11)
    b.add_argument("--corpus", default=None)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    _echo(args)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (FileNotFoundError, IndexError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
