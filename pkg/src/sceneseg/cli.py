"""Command line: ``sceneseg train | segment | eval``."""
import argparse
import json
import logging
import os
import sys
from pathlib import Path


from . import evaluator, sceneio
from ._accel import set_threads
from .errors import InputError, NonFiniteError, ScenesegError
from .segnet import segment_scene
from .trainer import TrainConfig, train, write_log

log = logging.getLogger("sceneseg")

EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _patch(value):
    parts = value.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad patch size {value!r}, use N or HxW") from None
    if len(dims) == 1:
        dims *= 2
    if len(dims) != 2:
        raise argparse.ArgumentTypeError(f"bad patch size {value!r}, use N or HxW")
    return tuple(dims)


def _seeds(value):
    try:
        return [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {value!r}") from None


def build_parser():
    d = TrainConfig()
    p = argparse.ArgumentParser(prog="sceneseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on one scene")
    t.add_argument("--image", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path, help="model file to write")
    t.add_argument("--K", type=int, default=d.K)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--inner-iters", type=int, default=d.inner_iters)
    t.add_argument("--batch", type=int, default=d.batch_size)
    t.add_argument("--patch", type=_patch, default=(d.patch_height, d.patch_width))
    t.add_argument("--stride", type=int, default=d.extraction_stride)
    t.add_argument("--lr", type=float, default=d.learning_rate)
    t.add_argument("--momentum", type=float, default=d.momentum)
    t.add_argument("--ratio", type=int, default=d.attention_ratio)
    g = t.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--seeds", type=_seeds, help="comma separated; one model per seed")

    s = sub.add_parser("segment", help="segment a scene with a trained model")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--image", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path, help="cluster-index PNG")
    s.add_argument("--mapping", type=Path, help="JSON cluster->class mapping (or an eval report)")
    s.add_argument("--binary", action="store_true", help="also write the building/other map")
    s.add_argument("--palette", type=Path, help="class palette JSON (default: ISPRS)")
    s.add_argument("--tile", type=_patch, default=(d.patch_height, d.patch_width))

    e = sub.add_parser("eval", help="score cluster maps against references")
    e.add_argument("--pred", required=True, type=Path, action="append")
    e.add_argument("--ref", required=True, type=Path, action="append")
    e.add_argument("--palette", type=Path, help="class palette JSON (default: ISPRS)")
    e.add_argument("--runs", type=int, default=1,
                   help="--pred lists RUNS groups of len(--ref) maps; reports are averaged")
    e.add_argument("--K", type=int, help="cluster count (default: inferred)")
    e.add_argument("--out", type=Path, help="also write the JSON report here")
    return p


def _seeded(path, seed, multi):
    if not multi:
        return path
    return path.with_name(f"{path.stem}_seed{seed}{path.suffix}")


def cmd_train(args):
    seeds = args.seeds if args.seeds else [args.seed]
    scene = sceneio.load_scene(args.image)
    for seed in seeds:
        cfg = TrainConfig(
            epochs=args.epochs, inner_iters=args.inner_iters, batch_size=args.batch, K=args.K,
            patch_height=args.patch[0], patch_width=args.patch[1], extraction_stride=args.stride,
            learning_rate=args.lr, momentum=args.momentum, seed=seed, attention_ratio=args.ratio,
        )
        out = _seeded(args.out, seed, args.seeds is not None)
        log.info("training seed %d -> %s", seed, out)
        params, records = train(scene, cfg)
        sceneio.save_model(params, out)
        write_log(records, out.with_suffix(".log"))
        print(out)
    return 0


def _load_mapping(path):
    with open(path) as f:
        doc = json.load(f)
    raw = doc.get("mapping", doc) if isinstance(doc, dict) else None
    if not isinstance(raw, dict):
        raise InputError(f"{path}: expected a JSON object mapping cluster ids to classes")
    return {int(k): v for k, v in raw.items()}


def cmd_segment(args):
    if args.binary and args.mapping is None:
        raise InputError("--binary needs --mapping to know which clusters are buildings")
    params = sceneio.load_model(args.model)
    scene = sceneio.load_scene(args.image)
    seg = segment_scene(scene, params, args.tile)
    sceneio.write_segmentation(seg, args.out)
    print(args.out)
    if args.mapping is None:
        return 0
    palette = sceneio.load_palette(args.palette) if args.palette else sceneio.isprs_palette()
    mapping = _load_mapping(args.mapping)
    classes_out = args.out.with_name(f"{args.out.stem}_classes{args.out.suffix}")
    sceneio.write_segmentation(seg, classes_out, palette, mapping)
    print(classes_out)
    if args.binary:
        index = {k: (None if v is None else palette.index(v) if isinstance(v, str) else int(v))
                 for k, v in mapping.items()}
        binary = evaluator.binarize(seg, palette.index("building"), index)
        binary_out = args.out.with_name(f"{args.out.stem}_binary{args.out.suffix}")
        sceneio.write_segmentation(binary, binary_out, sceneio.Palette(sceneio.BINARY_PALETTE),
                                   {0: 0, 1: 1})
        print(binary_out)
    return 0


def cmd_eval(args):
    palette = sceneio.load_palette(args.palette) if args.palette else sceneio.isprs_palette()
    if args.runs < 1 or len(args.pred) != args.runs * len(args.ref):
        raise InputError(
            f"got {len(args.pred)} --pred for {len(args.ref)} --ref and --runs {args.runs}"
        )
    refs = []
    for path in args.ref:
        ref = sceneio.read_reference(path, palette)
        if ref.warning:
            log.warning(ref.warning)
        refs.append(ref.labels)
    preds = [sceneio.read_segmentation(p, args.K) for p in args.pred]
    K = args.K or max(p.K for p in preds)
    n = len(refs)
    reports = [evaluator.evaluate(preds[i * n : (i + 1) * n], refs, K, palette.names)
               for i in range(args.runs)]
    report = reports[0] if args.runs == 1 else evaluator.average_runs(reports)
    doc = report.to_json()
    if args.runs > 1:
        doc["runs"] = [r.to_json() for r in reports]
    text = json.dumps(doc, indent=2)
    if args.out:
        args.out.write_text(text + "\n")
    print(text)
    return 0


COMMANDS = {"train": cmd_train, "segment": cmd_segment, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SCENESEG_THREADS")
    limiter = None
    if threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(int(threads))
        set_threads(int(threads))
    try:
        return COMMANDS[args.command](args)
    except NonFiniteError as exc:
        print(f"sceneseg: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ScenesegError, OSError) as exc:
        print(f"sceneseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
