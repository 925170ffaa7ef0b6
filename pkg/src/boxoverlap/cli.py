"""Command-line entry point.

Subcommands compose into a pipeline:

    synth -> nso -> train -> eval / query / scale

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import boxes, dataset_io, retrieval, synth
from .boxes import SmoothingConfig
from .geometry import NSOConfig, backproject, nso_from_clouds
from .training import (
    PairDataset,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _default_seed() -> int:
    env = os.environ.get("BOXOVERLAP_SEED")
    return int(env) if env else 0


def _nso_config(args) -> NSOConfig:
    return NSOConfig(
        radius=args.radius,
        n_sub=args.n_sub,
        seed=args.seed,
        weighted=not args.unweighted,
    )


def _load_views(dataset_dir):
    views = dataset_io.read_scene(dataset_dir)
    if not views:
        raise DataError(f"dataset {dataset_dir} holds no views")
    return views


def cmd_synth(args) -> int:
    if args.pattern == "default":
        surface = synth.default_surface(args.seed)
        script = synth.default_script(args.seed)
    elif args.pattern.startswith("grid:"):
        surface = synth.default_surface(args.seed)
        script = synth.grid_script(int(args.pattern.split(":", 1)[1]), seed=args.seed)
    else:
        raise UsageError(f"unknown pattern {args.pattern!r} (use default or grid:N)")
    synth.generate_dataset(
        surface, script, args.out, args.seed,
        nso_cfg=_nso_config(args), oracle=args.oracle, threads=args.threads,
    )
    return EXIT_OK


def cmd_nso(args) -> int:
    views = _load_views(args.dataset)
    by_id = {v.id: v for v in views}
    cfg = _nso_config(args)
    if args.pairs:
        wanted = []
        with open(args.pairs, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0] == "id_x":
                    continue
                wanted.append((row[0], row[1]))
        for id_x, id_y in wanted:
            for img_id in (id_x, id_y):
                if img_id not in by_id:
                    raise UsageError(f"unknown image id: {img_id}")
        clouds = {}
        records = []
        for id_x, id_y in wanted:
            for img_id in (id_x, id_y):
                if img_id not in clouds:
                    clouds[img_id] = backproject(by_id[img_id])
            rec = nso_from_clouds(clouds[id_x], clouds[id_y], id_x, id_y, cfg)
            if args.oracle:
                ref = nso_from_clouds(clouds[id_x], clouds[id_y], id_x, id_y, cfg,
                                      brute_force=True)
                if (rec.nso_xy, rec.nso_yx) != (ref.nso_xy, ref.nso_yx):
                    raise DataError(f"oracle mismatch on pair ({id_x}, {id_y})")
            records.append(rec)
    else:
        records = synth.all_pairs_nso(views, cfg, oracle=args.oracle,
                                      threads=args.threads)
    dataset_io.write_overlaps(args.output, records)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        dim=args.dim, rho=args.rho, lr=args.lr, steps=args.steps,
        batch_size=args.batch_size, seed=args.seed,
    )


def cmd_train(args) -> int:
    records = dataset_io.read_overlaps(args.pairs)
    dataset = PairDataset(records)
    cfg = _train_config(args)
    table, trace = train(dataset, cfg, kind=args.kind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", table, cfg, step=cfg.steps)
    if table.kind == "box":
        lowers, uppers = table.bounds()
        centers, size_raws = table.centers_sizes()
        boxes.save_box_table(out / "boxes.bin", table.ids, lowers, uppers,
                             centers, size_raws)
        (out / "boxes.json").write_text(
            boxes.box_table_to_json(table.ids, lowers, uppers))
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(trace):
            writer.writerow([step, repr(float(loss))])
    return EXIT_OK


def cmd_eval(args) -> int:
    table, cfg, _ = load_checkpoint(args.checkpoint)
    records = dataset_io.read_overlaps(args.pairs)
    metrics = evaluate(table, records, cfg)
    payload = json.dumps(metrics, indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(payload + "\n")
    else:
        print(payload)
    return EXIT_OK


def _pixel_counts(args, ids):
    if args.dataset:
        views = {v.id: v for v in _load_views(args.dataset)}
        counts = {}
        for img_id in ids:
            if img_id not in views:
                raise UsageError(f"unknown image id: {img_id}")
            counts[img_id] = views[img_id].n_valid
        return counts
    return {img_id: 1 for img_id in ids}


def cmd_query(args) -> int:
    table, cfg, _ = load_checkpoint(args.checkpoint)
    if table.kind != "box":
        raise UsageError("query requires a box-kind checkpoint")
    if args.query_id not in table.row:
        raise UsageError(f"unknown image id: {args.query_id}")
    index = retrieval.BoxIndex.build(table)
    smoothing = SmoothingConfig(0.0 if args.hard else cfg.rho)
    q = table.box(args.query_id)
    results = index.query_topk(q, args.k, smoothing)
    counts = _pixel_counts(args, [args.query_id] + [r.id for r in results])
    out = sys.stdout if not args.output else open(args.output, "w")
    try:
        for res in results:
            relation = retrieval.classify_relation(res.enclosure, res.concentration)
            scale = (
                retrieval.estimate_scale(res.enclosure, res.concentration,
                                         counts[args.query_id], counts[res.id])
                if res.enclosure > 0 else None
            )
            out.write(json.dumps({
                "query_id": args.query_id,
                "retrieved_id": res.id,
                "enclosure": res.enclosure,
                "concentration": res.concentration,
                "score": res.score,
                "relation": relation.label,
                "scale": scale,
            }, sort_keys=True) + "\n")
    finally:
        if args.output:
            out.close()
    return EXIT_OK


def cmd_scale(args) -> int:
    table, cfg, _ = load_checkpoint(args.checkpoint)
    if table.kind != "box":
        raise UsageError("scale requires a box-kind checkpoint")
    smoothing = SmoothingConfig(cfg.rho)
    with open(args.pairs, newline="") as fh:
        pairs = [
            (row[0], row[1]) for row in csv.reader(fh)
            if row and row[0] != "id_x"
        ]
    ids = sorted({i for p in pairs for i in p})
    for img_id in ids:
        if img_id not in table.row:
            raise UsageError(f"unknown image id: {img_id}")
    counts = _pixel_counts(args, ids)
    out = sys.stdout if not args.output else open(args.output, "w")
    try:
        for id_x, id_y in pairs:
            qr = boxes.nbo(table.box(id_x), table.box(id_y), smoothing)
            rq = boxes.nbo(table.box(id_y), table.box(id_x), smoothing)
            scale = (retrieval.estimate_scale(qr, rq, counts[id_x], counts[id_y])
                     if qr > 0 else None)
            out.write(json.dumps({
                "id_x": id_x, "id_y": id_y,
                "nbo_xy": qr, "nbo_yx": rq, "scale": scale,
            }, sort_keys=True) + "\n")
    finally:
        if args.output:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxoverlap",
        description="Surface-overlap ground truth, box embeddings and retrieval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=_default_seed())
        p.add_argument("--threads", type=int, default=1)

    def add_geometry(p):
        p.add_argument("--radius", type=float, default=0.1)
        p.add_argument("--n-sub", type=int, default=5000)
        p.add_argument("--unweighted", action="store_true")
        p.add_argument("--oracle", action="store_true",
                       help="cross-check against the brute-force oracle")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--pattern", default="default")
    add_common(p)
    add_geometry(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("nso", help="compute directed surface overlaps")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pairs", help="CSV of id pairs; omit for all pairs")
    p.add_argument("--output", required=True)
    add_common(p)
    add_geometry(p)
    p.set_defaults(func=cmd_nso)

    p = sub.add_parser("train", help="fit embeddings to overlap pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("box", "vector"), default="box")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--rho", type=float, default=5.0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=40000)
    p.add_argument("--batch-size", type=int, default=32)
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint against pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--output")
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("query", help="top-k retrieval from a box checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--hard", action="store_true",
                   help="rank with hard (rho = 0) overlaps")
    p.add_argument("--dataset", help="dataset dir for true pixel counts")
    p.add_argument("--output")
    add_common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("scale", help="relative scale estimates for id pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--dataset", help="dataset dir for true pixel counts")
    p.add_argument("--output")
    add_common(p)
    p.set_defaults(func=cmd_scale)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dataset_io.DatasetFormatError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
