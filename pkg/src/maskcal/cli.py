"""Command-line surface binding the library into pipelines:
synth -> calibrate -> evaluate, plus superpixels and selftrain.

Exit codes: 0 success, 2 usage (argparse), 3 malformed file, 4 validation,
5 I/O failure. Diagnostics go to stderr prefixed with the category.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import adapt, io, synth
from .core import FeatureMap
from .hmc import (
    HmcConfig,
    calibrate_mask_set,
    init_centroids,
    parse_stage_order,
    update_centroids,
)
from .metrics import compute_pq, match_segments, resolve_overlaps
from .superpixel import SlicConfig, compute_superpixels
from .core import PseudoMask


def max_workers() -> int:
    """Parallelism cap for per-image work, from MASKCAL_THREADS (default 1)."""
    raw = os.environ.get("MASKCAL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"MASKCAL_THREADS must be an integer, got {raw!r}")


def _map_images(fn, items):
    workers = max_workers()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _add_synth(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("synth", help="generate a synthetic scene (and optional perturbed predictions)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", choices=[synth.DOMAIN_SOURCE, synth.DOMAIN_TARGET],
                   default=synth.DOMAIN_TARGET)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--categories", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=4)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--noise-sigma", type=float, default=0.5)
    p.add_argument("--shift", type=float, nargs="*", default=None,
                   help="per-channel target-domain feature offset")
    p.add_argument("--count", type=int, default=1, help="number of scenes (consecutive seeds)")
    p.add_argument("--perturb", action="store_true",
                   help="also write perturbed pseudo masks for each scene")
    p.add_argument("--flip-rate", type=float, default=0.3)
    p.add_argument("--boundary-radius", type=int, default=1)
    p.add_argument("--impostor-rate", type=float, default=0.2)
    p.set_defaults(run=_run_synth)


def _run_synth(args: argparse.Namespace) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = synth.SceneConfig(
        height=args.height,
        width=args.width,
        num_categories=args.categories,
        feature_dim=args.feature_dim,
        class_signature_separation=args.separation,
        noise_sigma=args.noise_sigma,
        domain_shift=tuple(args.shift) if args.shift else None,
        seed=args.seed,
    )

    def emit(index: int):
        scene_cfg = dataclasses.replace(cfg, seed=cfg.seed + index)
        scene = synth.generate_scene(scene_cfg, args.domain)
        stem = f"scene{index:04d}"
        io.write_feature_map(out / f"{stem}.features.udtf", scene.features)
        io.write_feature_map(out / f"{stem}.image.udtf", scene.image)
        io.write_label(out / f"{stem}.gt.udtf", scene.gt)
        if args.perturb:
            masks = synth.perturb_predictions(
                scene.gt, scene,
                flip_rate=args.flip_rate,
                boundary_erode_dilate=args.boundary_radius,
                impostor_rate=args.impostor_rate,
                seed=scene_cfg.seed,
            )
            doc = io.document_from_pseudo_masks(
                masks, scene_cfg.height, scene_cfg.width, scene_cfg.num_categories
            )
            io.write_maskset(out / f"{stem}.predictions.json", doc)
        return stem

    stems = _map_images(emit, list(range(args.count)))
    meta = {
        "format": "synth-meta",
        "version": 1,
        "prng": synth.PRNG_ALGORITHM,
        "domain": args.domain,
        "seed": args.seed,
        "count": args.count,
        "scene": {
            "height": cfg.height,
            "width": cfg.width,
            "num_categories": cfg.num_categories,
            "stuff_categories": list(cfg.stuff_categories),
            "feature_dim": cfg.feature_dim,
            "class_signature_separation": cfg.class_signature_separation,
            "noise_sigma": cfg.noise_sigma,
            "domain_shift": list(cfg.domain_shift),
        },
        "scenes": stems,
    }
    io.atomic_write_bytes(out / "meta.json", (json.dumps(meta, indent=2) + "\n").encode())
    return 0


def _add_superpixels(sub) -> None:
    p = sub.add_parser("superpixels", help="compute a SLIC partition of an image")
    p.add_argument("--image", required=True, help="UDTF tensor, 1 or 3 channels")
    p.add_argument("--out", required=True, help="output label map (UDTF uint32)")
    p.add_argument("--count", type=int, default=None, help="target superpixel count")
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--min-region-fraction", type=float, default=0.25)
    p.add_argument("--raw-channels", action="store_true",
                   help="treat 3-channel input as raw features, not sRGB")
    p.add_argument("--overlay", default=None,
                   help="optional boundary overlay (UDTF uint8, 3xHxW)")
    p.set_defaults(run=_run_superpixels)


def _run_superpixels(args) -> int:
    image = io.read_feature_map(args.image)
    cfg = SlicConfig(
        target_count=args.count,
        compactness=args.compactness,
        iterations=args.iterations,
        min_region_fraction=args.min_region_fraction,
    )
    sp = compute_superpixels(image, cfg, convert_rgb_to_lab=not args.raw_channels)
    io.write_tensor(args.out, sp.labels.astype(np.uint32))
    if args.overlay:
        io.write_tensor(args.overlay, _boundary_overlay(image, sp.labels))
    return 0


def _boundary_overlay(image: FeatureMap, labels: np.ndarray) -> np.ndarray:
    rgb = image.values
    if rgb.shape[0] == 1:
        rgb = np.repeat(rgb, 3, axis=0)
    out = np.clip(rgb, 0.0, 1.0) * 255.0
    boundary = np.zeros(labels.shape, dtype=bool)
    boundary[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    boundary[:-1, :] |= labels[:-1, :] != labels[1:, :]
    out[0][boundary] = 255.0
    out[1][boundary] = 0.0
    out[2][boundary] = 0.0
    return out.astype(np.uint8)


def _add_calibrate(sub) -> None:
    p = sub.add_parser("calibrate", help="hierarchically calibrate a pseudo mask set")
    p.add_argument("--features", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--centroids", default=None, help="centroid store JSON")
    p.add_argument("--init-from", default=None,
                   help="initialize centroids from this prediction mask set")
    p.add_argument("--order", default="RSP", help="stage order, e.g. RSP, R, PSR, none")
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--vote", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--gamma-prime", type=float, default=0.9)
    p.add_argument("--policy", choices=["neutral", "exclude"], default="neutral")
    p.add_argument("--superpixels", type=int, default=None, help="target superpixel count")
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--out", required=True, help="calibrated mask set JSON")
    p.add_argument("--out-centroids", default=None, help="updated centroid store JSON")
    p.set_defaults(run=_run_calibrate)


def _run_calibrate(args) -> int:
    features = io.read_feature_map(args.features)
    image = io.read_feature_map(args.image)
    doc = io.read_maskset(args.masks)
    ms = doc.to_pseudo_masks()
    cfg = HmcConfig(
        stage_order=parse_stage_order(args.order),
        overlap_ratio_threshold=args.rho,
        vote_majority=args.vote,
        temperature=args.tau,
        invalid_centroid_policy=args.policy,
    )
    slic = SlicConfig(target_count=args.superpixels, compactness=args.compactness)

    if args.centroids and args.init_from:
        raise ValueError("pass either --centroids or --init-from, not both")
    if args.centroids:
        store = io.read_centroids(args.centroids)
    else:
        init_doc = io.read_maskset(args.init_from) if args.init_from else doc
        pairs = [(pm, features) for pm in init_doc.to_pseudo_masks()]
        store = init_centroids(
            pairs, doc.num_categories, features.channels, args.gamma_prime
        )

    calibrated = calibrate_mask_set(ms, features, image, store, cfg, slic=slic)
    out_doc = io.document_from_calibrated(
        calibrated, doc.height, doc.width, doc.num_categories, doc.category_names
    )
    io.write_maskset(args.out, out_doc)

    if args.out_centroids:
        pairs = []
        for cm in calibrated:
            if cm.dropped:
                continue
            probs = np.zeros(doc.num_categories)
            probs[cm.corrected_category] = 1.0
            pairs.append(
                (PseudoMask(cm.corrected_category,
                            _distribution(probs), cm.corrected_mask), features)
            )
        updated = update_centroids(store, pairs) if pairs else store
        io.write_centroids(args.out_centroids, updated)
    return 0


def _distribution(probs: np.ndarray):
    from .core import CategoryDistribution

    return CategoryDistribution(probs)


def _add_evaluate(sub) -> None:
    p = sub.add_parser("evaluate", help="panoptic quality of a prediction label map")
    p.add_argument("--pred", required=True,
                   help="prediction label (UDTF) or mask set document (JSON)")
    p.add_argument("--gt", required=True, help="ground-truth label (UDTF)")
    p.add_argument("--categories", type=int, required=True)
    p.add_argument("--names", default=None, help="comma-separated category names")
    p.add_argument("--ignore-void", action="store_true",
                   help="discount ground-truth void pixels from prediction IoU")
    p.add_argument("--out", default=None, help="write the text report here (default stdout)")
    p.add_argument("--json", dest="json_out", default=None, help="machine-readable report")
    p.set_defaults(run=_run_evaluate)


def _read_prediction_label(path):
    """Accept either a panoptic label tensor or a mask set document (the
    latter is resolved to a label, preferring corrected fields)."""
    blob = Path(path).read_bytes()
    if blob[:4] == io.MAGIC:
        return io.label_from_tensor(io.tensor_from_bytes(blob))
    doc = io.maskset_from_text(blob.decode("utf-8"))
    if doc.entries and doc.entries[0].corrected_category is not None:
        masks = list(doc.to_calibrated())
    else:
        masks = list(doc.to_pseudo_masks())
    return resolve_overlaps(masks, doc.height, doc.width)


def _run_evaluate(args) -> int:
    pred = _read_prediction_label(args.pred)
    gt = io.read_label(args.gt)
    match = match_segments(pred, gt, ignore_void=args.ignore_void)
    report = compute_pq(match, args.categories)
    names = args.names.split(",") if args.names else None
    text = report.format_text(names)
    if args.out:
        io.atomic_write_bytes(args.out, (text + "\n").encode())
    else:
        print(text)
    if args.json_out:
        io.atomic_write_bytes(
            args.json_out, (json.dumps(report.to_dict(), indent=2) + "\n").encode()
        )
    return 0


def _add_selftrain(sub) -> None:
    p = sub.add_parser("selftrain", help="run the toy two-domain self-training benchmark")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(run=_run_selftrain)


def _selftrain_config(path: str) -> dict:
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise io.DocumentError(
            f"{path}:{exc.lineno}: invalid JSON: {exc.msg}"
        ) from exc
    if not isinstance(body, dict):
        raise io.DocumentError(f"{path}: config must be a JSON object")
    return body


def _run_selftrain(args) -> int:
    raw = _selftrain_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    scene_kwargs = dict(raw.get("scene", {}))
    if "domain_shift" in scene_kwargs and scene_kwargs["domain_shift"] is not None:
        scene_kwargs["domain_shift"] = tuple(scene_kwargs["domain_shift"])
    if "stuff_categories" in scene_kwargs and scene_kwargs["stuff_categories"] is not None:
        scene_kwargs["stuff_categories"] = tuple(scene_kwargs["stuff_categories"])
    if "blobs_per_thing" in scene_kwargs:
        scene_kwargs["blobs_per_thing"] = tuple(scene_kwargs["blobs_per_thing"])
    try:
        scene_cfg = synth.SceneConfig(**scene_kwargs)
    except TypeError as exc:
        raise io.DocumentError(f"{args.config}: bad scene config: {exc}") from exc

    hmc_raw = dict(raw.get("hmc", {}))
    order = parse_stage_order(hmc_raw.pop("order", "RSP"))
    hmc_cfg = HmcConfig(stage_order=order, **hmc_raw)
    slic_raw = dict(raw.get("slic", {}))
    slic_cfg = SlicConfig(**slic_raw)
    aug_raw = dict(raw.get("augment", {}))
    if "scales" in aug_raw:
        aug_raw["scales"] = tuple(aug_raw["scales"])
    aug_cfg = adapt.AugmentConfig(**aug_raw)
    cfg = adapt.AdaptConfig(
        eta=float(raw.get("eta", 0.1)),
        hmc=hmc_cfg,
        slic=slic_cfg,
        augment=aug_cfg,
        group_centroids_by_raw=bool(raw.get("group_centroids_by_raw", False)),
    )

    seeds = [int(s) for s in raw.get("seeds", [0])]
    steps = int(raw.get("steps", 100))
    gamma = float(raw.get("gamma", 0.999))
    gamma_prime = float(raw.get("gamma_prime", 0.9))
    n_source = int(raw.get("n_source", 4))
    n_target = int(raw.get("n_target", 4))
    log_every = int(raw.get("log_every", 10))

    records = []
    source_reports = {}
    target_reports = {}
    for seed in seeds:
        base = dataclasses.replace(scene_cfg, seed=scene_cfg.seed + 1000 * seed)
        sources = synth.generate_pool(base, synth.DOMAIN_SOURCE, n_source)
        targets = synth.generate_pool(
            dataclasses.replace(base, seed=base.seed + 500), synth.DOMAIN_TARGET, n_target
        )
        result = adapt.run_self_training(
            sources, targets, steps=steps, cfg=cfg, gamma=gamma,
            gamma_prime=gamma_prime, seed=seed, log_every=log_every,
        )
        for row in result.history:
            records.append({"seed": seed, **row})
        source_reports[str(seed)] = adapt.evaluate_model(
            result.model, sources, scene_cfg.num_categories
        ).to_dict()
        target_reports[str(seed)] = adapt.evaluate_model(
            result.model, targets, scene_cfg.num_categories
        ).to_dict()

    log_lines = "".join(json.dumps(r) + "\n" for r in records)
    io.atomic_write_bytes(out / "log.jsonl", log_lines.encode())
    for name, reports in (("source", source_reports), ("target", target_reports)):
        mpqs = sorted(r["mpq"] for r in reports.values())
        if not mpqs:
            med = 0.0
        elif len(mpqs) % 2:
            med = mpqs[len(mpqs) // 2]
        else:
            med = 0.5 * (mpqs[len(mpqs) // 2 - 1] + mpqs[len(mpqs) // 2])
        summary = {
            "domain": name,
            "per_seed": reports,
            "median_mpq": med,
        }
        io.atomic_write_bytes(
            out / f"report_{name}.json", (json.dumps(summary, indent=2) + "\n").encode()
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskcal",
        description="Hierarchical calibration of panoptic pseudo masks, "
        "superpixels, PQ evaluation and the toy self-training benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_superpixels(sub)
    _add_calibrate(sub)
    _add_evaluate(sub)
    _add_selftrain(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args)
    except io.FormatError as exc:
        print(f"maskcal: format error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"maskcal: validation error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"maskcal: i/o error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
