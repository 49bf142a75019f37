"""Command line entry points: gen-data, train, eval, visualize.

Every command writes its artifacts under --out and finishes by writing a
run manifest (command, config, seed, version, output paths). Exit codes:
0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .config import apply_overrides, dump_config, load_config, train_config_from_tree
from .datasets import (
    ArmSceneSpec,
    exclude_overlap,
    generate_arm_dataset,
    load_arm_dataset,
    load_face_dataset,
    save_arm_dataset,
)
from .errors import ConfigurationError, DataError, NumericalError
from .evalkit import (
    HeadConfig,
    limited_annotation_study,
    matching_benchmark,
    regression_benchmark,
    save_match_report,
    train_regressor,
)
from .trainer import TrainConfig, finetune_unsupervised, train

log = logging.getLogger("dve")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _default_out(command: str, seed: int) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return os.path.join("runs", f"{stamp}-{command}-seed{seed}")


def write_manifest(out_dir: str, command: str, seed: int,
                   config_path: str | None, outputs: list) -> str:
    for p in outputs:
        if not os.path.exists(p):
            raise DataError(f"declared output missing: {p}")
    manifest = {
        "command": command,
        "config": config_path,
        "seed": seed,
        "version": __version__,
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return path


def _load_split(path: str, input_size: int, split: str):
    """Dataset directory -> one split; arm sets carry their own frame size."""
    if os.path.isfile(os.path.join(path, "meta.json")):
        bundle = load_arm_dataset(path)
        if split not in ("train", "test"):
            raise ConfigurationError(f"arm datasets have train/test splits, not '{split}'")
        return getattr(bundle, split)
    if os.path.isdir(os.path.join(path, "annotations")):
        name = os.path.basename(os.path.normpath(path))
        root = os.path.dirname(os.path.normpath(path))
        bundle = load_face_dataset(name, root, input_size)
        if split not in bundle.splits:
            raise DataError(f"dataset {name} has no '{split}' split")
        return bundle.splits[split]
    raise DataError(f"no dataset found at {path}")


def cmd_gen_data(args) -> int:
    out = args.out or _default_out("gen-data", args.seed)
    spec = ArmSceneSpec(
        n_instances=args.instances,
        frames_per_instance=args.frames,
        image_size=args.image_size,
        seed=args.seed,
        train_fraction=args.train_fraction,
    )
    bundle = generate_arm_dataset(spec)
    save_arm_dataset(bundle, out)
    print(f"generated {len(bundle.train)} train / {len(bundle.test)} test frames -> {out}")
    write_manifest(out, "gen-data", args.seed, None,
                   [os.path.join(out, "meta.json"),
                    os.path.join(out, "annotations", "train.csv"),
                    os.path.join(out, "annotations", "test.csv")])
    return 0


def _train_config(args) -> TrainConfig:
    if args.config:
        cfg = train_config_from_tree(load_config(args.config))
    else:
        cfg = TrainConfig()
    overrides = {
        "epochs": args.epochs,
        "seed": args.seed,
        "arch": args.arch,
        "embed_dim": args.embed_dim,
        "steps_per_epoch": args.steps_per_epoch,
        "pairs_per_batch": args.pairs_per_batch,
        "aux_pool_size": args.aux_pool_size,
        "aux_per_pair": args.aux_per_pair,
        "lr": args.lr,
        "pair_source": args.pair_source,
    }
    if args.no_dve:
        overrides["use_dve"] = False
    if args.identity_warp:
        overrides["identity_warp"] = True
    return apply_overrides(cfg, overrides)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = args.out or _default_out("train", cfg.seed)
    os.makedirs(out, exist_ok=True)
    dataset = _load_split(args.data, cfg.input_size or 70, args.split)
    if cfg.input_size is None:
        cfg.input_size = dataset.input_size
    if hasattr(dataset, "identifiers") and args.exclude_split:
        other = _load_split(args.data, cfg.input_size, args.exclude_split)
        dataset = exclude_overlap(dataset, other)
    if args.init_checkpoint:
        result = finetune_unsupervised(args.init_checkpoint, dataset, cfg, out)
    else:
        result = train(dataset, cfg, out, resume=args.resume)
    cfg_path = os.path.join(out, "config_used.ini")
    dump_config(cfg, cfg_path)
    summary = {
        "epochs": cfg.epochs,
        "loss_curve": result.loss_curve,
        "final_epoch_mean_loss": result.loss_curve[-1] if result.loss_curve else None,
        "checkpoint": os.path.abspath(result.checkpoint_path),
    }
    summary_path = os.path.join(out, "train_summary.json")
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    print(f"trained {cfg.arch} C={cfg.embed_dim} for {cfg.epochs} epochs -> {result.checkpoint_path}")
    outputs = [result.checkpoint_path, summary_path, cfg_path]
    if result.log_path:
        outputs.append(result.log_path)
    write_manifest(out, "train", cfg.seed, args.config, outputs)
    return 0


def _eye_indices(dataset) -> tuple:
    pts, _ = dataset.landmarks(0)
    k = len(pts)
    if k == 68:
        return (36, 45)  # outer eye corners
    if k == 5:
        return (0, 1)  # eye centers
    return (0, min(2, k - 1))


def cmd_eval(args) -> int:
    from .embedder import load_checkpoint

    model, meta = load_checkpoint(args.checkpoint)
    out = args.out or _default_out("eval", args.seed)
    os.makedirs(out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    outputs = []
    if args.protocol in ("match-same", "match-diff"):
        split = args.split or "test"
        dataset = _load_split(args.data, meta["input_size"], split)
        protocol = "same_identity" if args.protocol == "match-same" else "different_identity"
        report = matching_benchmark(model, dataset, args.n_pairs, protocol, rng=rng)
        paths = save_match_report(report, out, name=args.protocol.replace("-", "_"))
        outputs += [paths["csv"], paths["summary"]]
        mean = report.mean_error
        print(f"{protocol}: mean error "
              f"{'undefined (no pairs)' if mean is None else f'{mean:.3f} px'} "
              f"over {report.n_pairs} pairs (frame {report.frame_size}px)")
    elif args.protocol == "regress":
        train_ds = _load_split(args.data, meta["input_size"], args.split or "train")
        test_ds = _load_split(args.data, meta["input_size"], "test")
        head_cfg = HeadConfig(epochs=args.head_epochs, seed=args.seed)
        head = train_regressor(model, train_ds, head_cfg)
        result = regression_benchmark(model, head, test_ds, _eye_indices(test_ds))
        path = os.path.join(out, "regress_summary.json")
        with open(path, "w") as f:
            json.dump({k: v for k, v in result.items() if k != "per_image"}, f,
                      indent=1, sort_keys=True)
        csv_path = os.path.join(out, "regress_errors.csv")
        with open(csv_path, "w") as f:
            f.write("image_index,iod_pct\n")
            for i, e in enumerate(result["per_image"]):
                f.write(f"{i},{e:.6f}\n")
        outputs += [path, csv_path]
        print(f"regression probe: {result['mean_iod_pct']:.3f}% of normalizing distance")
    elif args.protocol == "limited":
        train_ds = _load_split(args.data, meta["input_size"], args.split or "train")
        test_ds = _load_split(args.data, meta["input_size"], "test")
        counts = [c if c == "all" else int(c) for c in args.counts.split(",")]
        head_cfg = HeadConfig(epochs=args.head_epochs, seed=args.seed)
        result = limited_annotation_study(
            model, train_ds, test_ds, counts=counts, n_seeds=args.n_seeds,
            head_cfg=head_cfg, out_dir=out, eye_indices=_eye_indices(test_ds),
        )
        outputs += [os.path.join(out, "limited_annotation.csv"),
                    os.path.join(out, "limited_annotation_summary.json")]
        for count, agg in result["aggregates"].items():
            print(f"count={count}: {agg['mean']:.3f}% +/- {agg['std']:.3f}")
    else:
        raise ConfigurationError(f"unknown protocol '{args.protocol}'")
    write_manifest(out, "eval", args.seed, None, outputs)
    return 0


def cmd_visualize(args) -> int:
    from .embedder import load_checkpoint
    from .visualize import render_match_figure

    model, meta = load_checkpoint(args.checkpoint)
    out = args.out or _default_out("visualize", args.seed)
    os.makedirs(out, exist_ok=True)
    dataset = _load_split(args.data, meta["input_size"], args.split or "test")
    rng = np.random.default_rng(args.seed)
    i = args.index_a if args.index_a is not None else int(rng.integers(len(dataset)))
    j = args.index_b if args.index_b is not None else int(rng.integers(len(dataset)))
    pts, vis = dataset.landmarks(i)
    queries = pts[vis]
    fig_path = os.path.join(out, f"match_{i}_{j}.png")
    render_match_figure(model, dataset.image(i), dataset.image(j), queries, fig_path)
    print(f"wrote {fig_path}")
    write_manifest(out, "visualize", args.seed, None, [fig_path])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dve",
        description="dense embeddings with descriptor vector exchange",
    )
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic arm dataset")
    g.add_argument("--out", default=None)
    g.add_argument("--instances", type=int, default=310)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=0.85)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train an embedder")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--config", default=None)
    t.add_argument("--split", default="train")
    t.add_argument("--exclude-split", default=None,
                   help="drop training rows overlapping this split")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--arch", default=None,
                   choices=["smallnet", "smallnet_plus", "hourglass"])
    t.add_argument("--embed-dim", type=int, default=None)
    t.add_argument("--steps-per-epoch", type=int, default=None)
    t.add_argument("--pairs-per-batch", type=int, default=None)
    t.add_argument("--aux-pool-size", type=int, default=None)
    t.add_argument("--aux-per-pair", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--pair-source", default=None, choices=["auto", "warp", "flow"])
    t.add_argument("--no-dve", action="store_true")
    t.add_argument("--identity-warp", action="store_true")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--init-checkpoint", default=None,
                   help="start from these weights (unsupervised finetuning)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", required=True,
                   choices=["match-same", "match-diff", "regress", "limited"])
    e.add_argument("--out", default=None)
    e.add_argument("--split", default=None)
    e.add_argument("--n-pairs", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--head-epochs", type=int, default=120)
    e.add_argument("--counts", default="1,5,10,20,all")
    e.add_argument("--n-seeds", type=int, default=3)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="render matched points for a pair")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", default=None)
    v.add_argument("--split", default=None)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--index-a", type=int, default=None)
    v.add_argument("--index-b", type=int, default=None)
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
