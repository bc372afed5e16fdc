"""Command-line entry point: make-splits, discover, train, translate,
evaluate, sweep-k.

Every command resolves its configuration from `--config` plus flag overrides
(flags win), seeds from `--seed` or the BALAGAN_SEED environment variable
(flag wins), logs to stderr, and writes artifacts to disk only. Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluation, modality, training
from .config import RunConfig
from .data import AugmentationConfig, SplitManifest, build_imbalanced_split, index_from_directories
from .errors import BalaganError, ConfigError

logger = logging.getLogger("balagan")

ABLATION_VARIANTS = {
    "none": {"use_dcls": True, "include_target": True},
    "no-dcls": {"use_dcls": False, "include_target": True},
    "no-dcls-no-target": {"use_dcls": False, "include_target": False},
}


def _resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("BALAGAN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"BALAGAN_SEED must be an integer, got {env!r}")
    return None


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        overrides[key] = value
    if overrides:
        cfg = cfg.apply_overrides(overrides)
    seed = _resolve_seed(args)
    if seed is not None:
        cfg = cfg.apply_overrides({"trainer.seed": str(seed)})
    return cfg


def _plan(lines) -> int:
    print("dry run; would execute:")
    for line in lines:
        print(f"  - {line}")
    return 0


def cmd_make_splits(args) -> int:
    index = index_from_directories(args.source, args.target)
    seed = _resolve_seed(args) or 0
    if args.dry_run:
        return _plan([f"index {len(index)} files from {args.source} and {args.target}",
                      f"sample {args.n_source} source + {args.n_target} target items (seed {seed})",
                      f"write manifest to {args.out}"])
    manifest = build_imbalanced_split(index, args.n_source, args.n_target, seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    manifest.save(args.out)
    if manifest.degenerate:
        logger.warning("manifest is degenerate (an empty domain)")
    logger.info("wrote %s: |A|=%d, |B|=%d", args.out, manifest.n_source, manifest.n_target)
    return 0


def cmd_discover(args) -> int:
    cfg = _load_config(args)
    manifest_path = args.manifest or cfg.data.manifest
    if not manifest_path:
        raise ConfigError("no manifest given (use --manifest or data.manifest)")
    manifest = SplitManifest.load(manifest_path)
    k_raw = args.k if args.k is not None else cfg.modalities.k
    if args.mode == "imbalanced":
        if k_raw == "auto":
            k = modality.choose_k(manifest.n_source, manifest.n_target)
        else:
            k = modality.choose_k(manifest.n_source, manifest.n_target, override=int(k_raw),
                                  allow_invalid=cfg.modalities.allow_invalid_k)
    else:
        if args.k_s is None or args.k_t is None:
            raise ConfigError("balanced mode needs --k-s and --k-t")
        k = None
    out = Path(args.out or cfg.modalities.assignment or "modalities/discovered.assign")
    if args.dry_run:
        what = f"k={k}" if k is not None else f"k_s={args.k_s}, k_t={args.k_t}"
        return _plan([f"train style encoder for {cfg.modalities.steps} steps "
                      f"(seed {cfg.trainer.seed})",
                      f"cluster {manifest.n_source} source items ({what})",
                      f"write assignment to {out} and encoder to {out.with_suffix('.encoder.pt')}"])

    hyper = {"temperature": cfg.modalities.temperature,
             "batch_size": cfg.modalities.batch_size,
             "steps": cfg.modalities.steps,
             "learning_rate": cfg.modalities.learning_rate,
             "seed": cfg.trainer.seed,
             "embedding_dim": cfg.modalities.embedding_dim,
             "projection_dim": cfg.modalities.projection_dim}
    aug = AugmentationConfig.contrastive_default(cfg.trainer.seed)
    items = manifest.source_items if args.mode == "imbalanced" else manifest.all_items()
    encoder, log = modality.train_style_encoder(manifest, aug, hyper, items=items,
                                                resolution=cfg.data.resolution)
    if log:
        logger.info("style encoder trained: loss %.4f -> %.4f", log[0], log[-1])
    if args.mode == "imbalanced":
        assignment = modality.assign_modalities(manifest, encoder, k, seed=cfg.trainer.seed,
                                                resolution=cfg.data.resolution)
    else:
        assignment = modality.assign_modalities_balanced(
            manifest, encoder, args.k_s, args.k_t, seed=cfg.trainer.seed,
            resolution=cfg.data.resolution)
    out.parent.mkdir(parents=True, exist_ok=True)
    assignment.save(out)
    import torch
    torch.save(encoder.state_dict(), out.with_suffix(".encoder.pt"))
    cfg.to_yaml(out.with_suffix(".config.yaml"))
    logger.info("wrote %s (%d classes)", out, assignment.n_classes)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.run_name:
        cfg = cfg.apply_overrides({"name": args.run_name})
    if args.steps is not None:
        cfg = cfg.apply_overrides({"trainer.steps": str(args.steps)})
    if args.ablation:
        variant = ABLATION_VARIANTS[args.ablation]
        cfg = cfg.apply_overrides({"ablation.use_dcls": str(variant["use_dcls"]),
                                   "ablation.include_target": str(variant["include_target"])})
    if not cfg.data.manifest:
        raise ConfigError("data.manifest is required to train")
    if not cfg.modalities.assignment:
        raise ConfigError("modalities.assignment is required to train")
    if args.dry_run:
        return _plan([f"load manifest {cfg.data.manifest} and assignment "
                      f"{cfg.modalities.assignment}",
                      f"train for {cfg.trainer.steps} steps (seed {cfg.trainer.seed}, "
                      f"ablation use_dcls={cfg.ablation.use_dcls}, "
                      f"include_target={cfg.ablation.include_target})",
                      f"write artifacts under {Path(args.workdir) / 'runs' / cfg.name}"])
    run_dir = training.train(cfg, workdir=args.workdir, resume_from=args.resume_from)
    print(run_dir)
    return 0


def _save_image(tensor, value_range, path) -> None:
    lo, hi = value_range
    array = ((tensor - lo) / (hi - lo)).clamp(0, 1).permute(1, 2, 0).numpy()
    Image.fromarray((array * 255.0).round().astype(np.uint8)).save(path)


def cmd_translate(args) -> int:
    cfg = _load_config(args)
    manifest = SplitManifest.load(args.manifest or cfg.data.manifest)
    out_dir = Path(args.out)
    sources = list(manifest.source_items)
    if args.limit:
        sources = sources[:args.limit]
    if args.dry_run:
        return _plan([f"load checkpoint {args.checkpoint}",
                      f"translate {len(sources)} source images with references from "
                      f"{manifest.n_target} target images (pairing seed {cfg.eval.pairing_seed})",
                      f"write images and pairs.tsv to {out_dir}"])
    state = training.load_checkpoint(args.checkpoint)
    loader = training.CachedLoader(manifest, cfg.data.resolution, cfg.data.value_range)
    pairs, stream = evaluation.translate_dataset(
        state.g, loader, sources, list(manifest.target_items), cfg.eval.pairing_seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    i = 0
    for batch in stream:
        for img in batch.data:
            _save_image(img, batch.value_range, out_dir / f"{i:05d}.png")
            i += 1
    with open(out_dir / "pairs.tsv", "w") as fh:
        fh.write("output\tsource\treference\n")
        for j, (src, ref) in enumerate(pairs):
            fh.write(f"{j:05d}.png\t{src}\t{ref}\n")
    if args.grid:
        m, n = args.grid
        grid = evaluation.diversity_grid(
            state.g, loader.load(sources[:m]),
            loader.load(list(manifest.target_items)[:n]))
        evaluation.save_grid(grid, out_dir / "grid.png")
        logger.info("wrote %dx%d diversity grid", m, n)
    logger.info("wrote %d translations to %s", i, out_dir)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    manifest = SplitManifest.load(args.manifest or cfg.data.manifest)
    if args.dry_run:
        return _plan([f"load checkpoint {args.checkpoint}",
                      f"translate up to {cfg.eval.n_eval} sources and score against "
                      f"{manifest.n_target} real target images "
                      f"(extractor {cfg.eval.extractor})",
                      f"write report to {args.out}"])
    report = evaluation.evaluate_checkpoint(args.checkpoint, manifest, cfg)
    report["config_hash"] = cfg.content_hash()
    report["config"] = cfg.to_dict()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_fid_report(report, args.out)
    print(f"FID {report['fid']:.6f} ({report['extractor_id']}, "
          f"n_fake={report['n_fake']}, n_real={report['n_real']})")
    return 0


def cmd_sweep_k(args) -> int:
    cfg = _load_config(args)
    k_values = [int(v) for v in args.k_values.split(",") if v.strip()]
    if args.dry_run:
        return _plan([f"train one style encoder (seed {cfg.trainer.seed})",
                      f"for each k in {k_values}: assign modalities, train "
                      f"{cfg.trainer.steps} steps, compute FID",
                      f"write sweep.csv under runs/{cfg.name}-sweep/"])
    rows = evaluation.k_sweep(cfg, k_values, workdir=args.workdir)
    for row in rows:
        fid_text = "failed" if row["fid"] is None else f"{row['fid']:.6f}"
        print(f"k={row['k']}\tFID={fid_text}" + (f"\t{row['error']}" if row["error"] else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balagan",
        description="Reference-guided image translation between imbalanced domains.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, help="master seed (overrides BALAGAN_SEED and config)")
        p.add_argument("--dry-run", action="store_true",
                       help="validate inputs and print the plan without side effects")
        if config:
            p.add_argument("--config", help="YAML run configuration")
            p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                           help="override a config value (repeatable; flags win)")

    p = sub.add_parser("make-splits", help="sample an imbalanced source/target split")
    p.add_argument("--source", required=True, help="source-domain image directory")
    p.add_argument("--target", required=True, help="target-domain image directory")
    p.add_argument("--n-source", type=int, required=True)
    p.add_argument("--n-target", type=int, required=True)
    p.add_argument("--out", default="splits/split.manifest")
    common(p, config=False)
    p.set_defaults(func=cmd_make_splits)

    p = sub.add_parser("discover", help="train the style encoder and assign modalities")
    p.add_argument("--manifest", help="split manifest (default: data.manifest)")
    p.add_argument("--k", help='modality count or "auto" for the minimal balance rule')
    p.add_argument("--mode", choices=["imbalanced", "balanced"], default="imbalanced")
    p.add_argument("--k-s", type=int, help="source modalities (balanced mode)")
    p.add_argument("--k-t", type=int, help="target modalities (balanced mode)")
    p.add_argument("--out", help="assignment file (default: modalities.assignment)")
    common(p)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("train", help="train the translation network")
    p.add_argument("--run-name", help="override the run name")
    p.add_argument("--steps", type=int, help="override trainer.steps")
    p.add_argument("--ablation", choices=sorted(ABLATION_VARIANTS),
                   help="ablation variant (no-dcls drops the classification head; "
                        "no-dcls-no-target additionally excludes target images)")
    p.add_argument("--resume-from", help="checkpoint to resume from")
    p.add_argument("--workdir", default=".", help="directory holding runs/")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate source images with target references")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="split manifest (default: data.manifest)")
    p.add_argument("--limit", type=int, help="translate only the first N sources")
    p.add_argument("--grid", type=int, nargs=2, metavar=("M", "N"),
                   help="also write an M-sources x N-references diversity grid")
    p.add_argument("--out", required=True, help="output image directory")
    common(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="FID of a checkpoint against the real target set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="split manifest (default: data.manifest)")
    p.add_argument("--out", default="fid-report.json")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-k", help="train and score one model per modality count")
    p.add_argument("--k-values", required=True, help="comma-separated list, e.g. 1,2,4")
    p.add_argument("--workdir", default=".", help="directory holding runs/")
    common(p)
    p.set_defaults(func=cmd_sweep_k)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BalaganError as exc:
        logger.error("%s", exc)
        return 1
    except FileNotFoundError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
