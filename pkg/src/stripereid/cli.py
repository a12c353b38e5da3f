"""Command-line entry point.

Subcommands: train, extract, eval, heatmap, synth. Anything that affects
the science lives in the JSON run config; flags only carry paths and
toggles. Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .configs import RunConfig
from .data import load_image, load_market_layout, normalize_image, split_records
from .errors import ConfigError, DataError, TrainingAborted
from .evaluation import evaluate_features
from .infer import FeatureMatrix, extract, render_heatmap, response_map
from .train import make_ablation_config, model_from_checkpoint, train

log = logging.getLogger("stripereid")


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.variant:
        cfg = make_ablation_config(args.variant, base=cfg)
    if args.dataset:
        cfg.dataset_root = args.dataset
    if args.output:
        cfg.output_dir = args.output
    result = train(cfg, resume=args.resume)
    print(f"run dir:    {result.run_dir}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"steps:      {result.steps_run}  "
          f"loss {result.first_total:.4f} -> {result.last_total:.4f}")
    return 0


def cmd_extract(args) -> int:
    model, sidecar = model_from_checkpoint(args.checkpoint)
    run_cfg = RunConfig.from_dict(sidecar["config"])
    records, _ = load_market_layout(args.dataset)
    selected = split_records(records, args.split)
    if not selected:
        log.warning("split '%s' of %s holds no records; writing an empty "
                    "feature file", args.split, args.dataset)
    fm = extract(model, selected, run_cfg.data, batch_size=args.batch_size)
    bin_path, json_path = fm.save(args.out)
    print(f"wrote {fm.features.shape[0]} x {fm.features.shape[1]} features to "
          f"{bin_path} (+ {json_path.name})")
    return 0


def cmd_eval(args) -> int:
    query = FeatureMatrix.load(args.query)
    gallery = FeatureMatrix.load(args.gallery)
    report = evaluate_features(
        query, gallery,
        multi_query=args.multi_query, pool=args.pool,
        use_rerank=args.rerank, k1=args.k1, k2=args.k2,
        lambda_value=args.rerank_lambda,
    )
    print(report.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json(indent=1))
        print(f"report written to {args.out}")
    return 0


def cmd_heatmap(args) -> int:
    from PIL.PngImagePlugin import PngInfo

    model, sidecar = model_from_checkpoint(args.checkpoint)
    run_cfg = RunConfig.from_dict(sidecar["config"])
    raw = load_image(args.image, size=model.config.input_size)
    tensor = normalize_image(raw, run_cfg.data.mean, run_cfg.data.std)
    branches = list(model.branches) if args.branch == "all" else [args.branch]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = PngInfo()
    meta.add_text("config_hash", sidecar["model_config_hash"])
    written = []
    for branch in branches:
        grid = response_map(model, tensor, branch)
        img = render_heatmap(raw, grid)
        path = out if (args.branch != "all") else \
            out.with_name(f"{out.stem}_{branch}{out.suffix or '.png'}")
        img.save(path, pnginfo=meta if path.suffix.lower() == ".png" else None)
        written.append(str(path))
    print("wrote: " + ", ".join(written))
    return 0


def cmd_synth(args) -> int:
    from .data import generate_synthetic

    counts = generate_synthetic(
        args.out, num_ids=args.ids, imgs_per_id=args.imgs_per_id,
        image_size=(args.height, args.width), seed=args.seed,
        query_per_id=args.query_per_id, gallery_per_id=args.gallery_per_id,
        junk_images=args.junk,
    )
    print(f"synthetic dataset at {args.out}: " +
          ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stripereid",
        description="multi-granularity stripe embeddings for person re-id")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop from a config file")
    p.add_argument("--config", required=True, help="JSON run config path")
    p.add_argument("--variant", default=None,
                   help="ablation variant (canonical, 'w/o Part-3', 'w/ Part-4', "
                        "'Part2+4', 'Part3+4', 'w/o TP')")
    p.add_argument("--dataset", default=None, help="override dataset root")
    p.add_argument("--output", default=None, help="override output dir")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("extract", help="extract features for a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "query", "gallery"),
                   default="query")
    p.add_argument("--out", required=True, help="output prefix (.feat.bin/.json)")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("eval", help="score query features against a gallery")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=6)
    p.add_argument("--rerank-lambda", type=float, default=0.3)
    p.add_argument("--multi-query", action="store_true")
    p.add_argument("--pool", choices=("avg", "max"), default="avg")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("heatmap", help="render response-map overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--branch", default="all",
                   help="branch name, or 'all' for one file per branch")
    p.add_argument("--out", required=True, help="output image path")
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("synth", help="generate a synthetic Market-layout dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--imgs-per-id", type=int, default=16)
    p.add_argument("--height", type=int, default=384)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--query-per-id", type=int, default=2)
    p.add_argument("--gallery-per-id", type=int, default=4)
    p.add_argument("--junk", type=int, default=2)
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
