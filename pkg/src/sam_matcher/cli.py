"""Command-line entry point: ``sam-matcher <subcommand> ...``.

Exit codes: 0 ok, 2 I/O, 3 shape, 4 numeric (including a failed gradient
check), 5 schema.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from . import __version__
from .evaluation import (
    DEFAULT_AUC_THRESHOLDS,
    DEFAULT_ETAS,
    EvalPair,
    EvalSchemaError,
    HomographyCase,
    compute_metrics,
    emit_report,
    evaluate_model,
)
from .features import grid_queries
from .io import (
    SchemaError,
    load_checkpoint,
    meta_path,
    read_ground_truth,
    read_homographies,
    read_image,
    read_matches,
    read_queries,
    save_checkpoint,
    write_ground_truth,
    write_homographies,
    write_image,
    write_matches,
    write_meta,
)
from .model import average_latent_map, match_pair, render_map
from .numeric import NumericError, ShapeError
from .synthetic import TextureParams, gen_synthetic_pair
from .training import (
    EXPORT_SEED_OFFSET,
    VARIANTS,
    AblationVariant,
    TrainConfig,
    benchmark_pairs,
    gradcheck_model,
    stream_seed,
    train,
)

EXIT_OK, EXIT_IO, EXIT_SHAPE, EXIT_NUMERIC, EXIT_SCHEMA = 0, 2, 3, 4, 5

log = logging.getLogger("sam_matcher")


def resolve_seed(args) -> int:
    """``--seed`` if given, else ``SAM_SEED``, else 0."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SAM_SEED")
    return int(env) if env not in (None, "") else 0


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _require_parent(path) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {p.parent}")
    return p


# -- subcommands -----------------------------------------------------------------------


def cmd_match(args) -> int:
    src = read_image(_require_file(args.source))
    tgt = read_image(_require_file(args.target))
    out = _require_parent(args.out)
    model, header = load_checkpoint(_require_file(args.checkpoint))
    queries = read_queries(_require_file(args.queries)) if args.queries else grid_queries(*src.shape[:2])
    seed = resolve_seed(args)
    records = match_pair(model, src, tgt, queries, batch_size=args.batch_size, coarse_only=args.coarse_only)
    write_matches(out, {args.pair_id: records}, coarse_only=args.coarse_only)
    write_meta(meta_path(out), command="match", seed=seed, coarse_only=args.coarse_only,
               batch_size=args.batch_size, checkpoint=str(args.checkpoint), config=header["config"])
    print(f"wrote {len(records)} matches to {out}")
    return EXIT_OK


def _train_config(args, seed: int) -> TrainConfig:
    kw = dict(variant=AblationVariant.parse(args.variant).value, seed=seed)
    for name in ("steps", "refiner_steps", "warmup_steps", "pairs_per_step"):
        if getattr(args, name, None) is not None:
            kw[name] = getattr(args, name)
    return TrainConfig.for_profile(args.profile, **kw)


def cmd_train(args) -> int:
    out = _require_parent(args.out)
    seed = resolve_seed(args)
    config = _train_config(args, seed)
    model, match_log, ref_log = train(config, stage=args.stage)
    save_checkpoint(out, model, extra={"train_steps": config.steps})
    log_path = Path(args.log) if args.log else out.with_suffix(".loss.csv")
    log_path.write_text(match_log.to_csv())
    if ref_log.rows:
        log_path.with_name(log_path.stem + ".refiner.csv").write_text(ref_log.to_csv())
    write_meta(meta_path(out), command="train", seed=seed, stage=args.stage,
               train_config={k: v for k, v in vars(config).items() if k != "texture"},
               model_config=model.config.to_dict())
    final = match_log.losses[-1] if match_log.rows else float("nan")
    print(f"wrote {out} (final matcher loss {final:.4f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = read_matches(_require_file(args.pred))
    gts = read_ground_truth(_require_file(args.gt))
    if set(preds) != set(gts):
        raise EvalSchemaError("prediction and ground-truth pair ids differ")
    images = Path(args.images) if args.images else None
    pairs = []
    for pair_id in sorted(gts):
        (pq, pp), (gq, gg) = preds[pair_id], gts[pair_id]
        lookup = {tuple(q): i for i, q in enumerate(pq.tolist())}
        missing = [tuple(q) for q in gq.tolist() if tuple(q) not in lookup]
        if missing:
            raise EvalSchemaError(f"pair {pair_id}: no prediction for query {missing[0]}")
        # predictions for queries without ground truth do not enter the metrics
        pp = pp[[lookup[tuple(q)] for q in gq.tolist()]]
        source = read_image(_require_file(images / f"{pair_id}_source.png")) if images else None
        pairs.append(EvalPair(pair_id, gq, pp, gg, source))
    cases = None
    if args.homographies:
        hs = read_homographies(_require_file(args.homographies))
        if set(hs) != set(gts):
            raise EvalSchemaError("homography pair ids differ from ground truth")
        cases = []
        for p in pairs:
            if p.source is not None:
                h, w = p.source.shape[:2]
            elif args.image_size:
                h = w = args.image_size
            else:
                raise EvalSchemaError("AUC needs --images or --image-size")
            cases.append(HomographyCase(p.pair_id, p.queries, p.predictions, hs[p.pair_id], w, h))
    metrics = compute_metrics(pairs, etas=args.etas, textured=images is not None, patch=args.patch,
                              tau=args.tau, homographies=cases, auc_thresholds=args.auc)
    out = _require_parent(args.out)
    overlays = []
    if args.overlays:
        if images is None:
            raise EvalSchemaError("--overlays needs --images")
        overlays = [(p.pair_id, p, read_image(_require_file(images / f"{p.pair_id}_target.png"))) for p in pairs]
    meta = {"seed": resolve_seed(args), "pairs": len(pairs), "pred": str(args.pred), "gt": str(args.gt)}
    emit_report(metrics, out, meta=meta, overlays=overlays, eta=args.overlay_eta)
    print(json.dumps(metrics["MA"], sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck_model(seed=resolve_seed(args), image_size=args.image_size,
                             samples_per_group=args.samples or None, corrupt=args.corrupt)
    for name, err in report.group_errors.items():
        print(f"{name:48s} {err:.3e}")
    ok = report.passed(args.tol)
    print(f"max relative error {report.max_error:.3e} over {report.checked} coordinates: "
          f"{'PASS' if ok else 'FAIL'}")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"max_error": report.max_error, "group_errors": report.group_errors,
             "checked": report.checked, "passed": ok, "tol": args.tol, "seed": resolve_seed(args),
             "image_size": args.image_size, "samples": args.samples}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    out = _require_parent(args.out)
    seed = resolve_seed(args)
    variants = [AblationVariant.parse(v) for v in args.variants.split(",")] if args.variants else VARIANTS
    bench = benchmark_pairs(seed, args.pairs)
    rows = []
    for v in variants:
        args.variant = v.value
        model, _, _ = train(_train_config(args, seed))
        m = compute_metrics(evaluate_model(model, bench), etas=args.etas)
        rows.append((v.value, [m["MA_text"][f"{e:g}"] for e in args.etas]))
        log.info("%s done", v.value)
    lines = ["variant," + ",".join(f"MA_text@{e:g}" for e in args.etas)]
    lines += [name + "," + ",".join("nan" if x is None else f"{x:.6f}" for x in vals) for name, vals in rows]
    out.write_text("\n".join(lines) + "\n")
    write_meta(meta_path(out), command="ablate", seed=seed, pairs=args.pairs, profile=args.profile,
               variants=[v.value for v in variants])
    print("\n".join(lines))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = resolve_seed(args)
    tex = TextureParams(uniform_patches=args.uniform_patches)
    gts, hs = {}, {}
    for i in range(args.n):
        pair = gen_synthetic_pair(stream_seed(seed, EXPORT_SEED_OFFSET, i), args.size, tex)
        pid = f"pair{i:04d}"
        write_image(out / f"{pid}_source.png", pair.source)
        write_image(out / f"{pid}_target.png", pair.target)
        gts[pid] = (pair.queries, pair.correspondents)
        hs[pid] = pair.homography
    write_ground_truth(out / "gt.csv", gts)
    write_homographies(out / "homographies.csv", hs)
    write_meta(out / "meta.json", command="gen-data", seed=seed, n=args.n, size=args.size,
               uniform_patches=args.uniform_patches)
    print(f"wrote {args.n} pairs to {out}")
    return EXIT_OK


def cmd_latent_map(args) -> int:
    src = read_image(_require_file(args.source))
    tgt = read_image(_require_file(args.target))
    out = _require_parent(args.out)
    model, header = load_checkpoint(_require_file(args.checkpoint))
    img = render_map(average_latent_map(model, src, tgt))
    big = np.kron(img, np.ones((4, 4), dtype=np.uint8))
    Image.fromarray(big).save(out)
    write_meta(meta_path(out), command="latent-map", seed=resolve_seed(args), checkpoint=str(args.checkpoint),
               config=header["config"])
    print(f"wrote {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sam-matcher", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="overrides SAM_SEED")

    def training(sp):
        sp.add_argument("--profile", choices=["toy", "paper"], default="toy")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--refiner-steps", type=int)
        sp.add_argument("--warmup-steps", type=int)
        sp.add_argument("--pairs-per-step", type=int)

    sp = sub.add_parser("match", help="match a source image into a target image")
    common(sp)
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="match CSV")
    sp.add_argument("--queries", help="CSV of qx,qy (default: stride-8 grid)")
    sp.add_argument("--pair-id", default="pair")
    sp.add_argument("--batch-size", type=int, default=1024)
    sp.add_argument("--coarse-only", action="store_true")
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("train", help="train on synthetic homography pairs")
    common(sp)
    training(sp)
    sp.add_argument("--variant", default=AblationVariant.FULL.value)
    sp.add_argument("--stage", choices=["both", "matcher", "refiner"], default="both")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="loss CSV (default: <out>.loss.csv)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    common(sp)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--images", help="directory with <pair_id>_source.png, enables MA_text")
    sp.add_argument("--homographies", help="CSV of ground-truth homographies, enables AUC")
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--etas", type=_float_list, default=list(DEFAULT_ETAS))
    sp.add_argument("--auc", type=_float_list, default=list(DEFAULT_AUC_THRESHOLDS))
    sp.add_argument("--patch", type=int, default=8)
    sp.add_argument("--tau", type=float, default=0.05)
    sp.add_argument("--overlays", action="store_true",
                    help="also write <out>_<pair_id>.png match overlays (needs --images)")
    sp.add_argument("--overlay-eta", type=float, default=2.0, help="green/red distance threshold for overlays")
    sp.add_argument("--out", required=True, help="report JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the toy matcher")
    common(sp)
    sp.add_argument("--image-size", type=int, default=16)
    sp.add_argument("--samples", type=int, default=16, help="coordinates per group, 0 for all")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--corrupt", help="parameter group whose gradient is deliberately broken")
    sp.add_argument("--out", help="JSON report")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train and score every ablation variant")
    common(sp)
    training(sp)
    sp.add_argument("--variants", help="comma-separated subset")
    sp.add_argument("--pairs", type=int, default=20)
    sp.add_argument("--etas", type=_float_list, default=list(DEFAULT_ETAS))
    sp.add_argument("--out", required=True, help="table CSV")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gen-data", help="write synthetic pairs and their ground truth")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--uniform-patches", type=int, default=3)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("latent-map", help="render the mean learned-latent correspondence map")
    common(sp)
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="PNG path")
    sp.set_defaults(func=cmd_latent_map)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads or os.cpu_count() or 1)
    try:
        return args.func(args)
    except (SchemaError, EvalSchemaError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except ShapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, UnidentifiedImageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
