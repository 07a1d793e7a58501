"""Command-line surface: precompute, train, eval, ablate, sweep, report.

The DESAM_CACHE_DIR environment variable supplies the default embedding
cache location when --cache / --out is omitted.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import evaluate as ev
from .data import load_manifest, load_sample
from .encoder_cache import EncoderSpec, StandinEncoder, precompute_embeddings, read_cache_index
from .training import freeze_audit, load_checkpoint, load_config, save_checkpoint, train
from .data import leave_one_site_out

CACHE_ENV = "DESAM_CACHE_DIR"
DEFAULT_CACHE_NAME = "embeddings.dsec"


def _default_cache_path(explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env) / DEFAULT_CACHE_NAME
    raise SystemExit(f"no cache path given and {CACHE_ENV} is not set")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _merge(args: argparse.Namespace) -> ev.MergeStrategy:
    return ev.MergeStrategy(kind=args.merge, threshold=args.threshold)


def _add_merge_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--merge", default="mean_probability", choices=ev.MERGE_KINDS,
                   help="how per-point grid predictions are combined")
    p.add_argument("--threshold", type=float, default=0.5)


def cmd_precompute(args: argparse.Namespace) -> int:
    spec = EncoderSpec(
        name=args.encoder,
        tap_layers=_int_tuple(args.tap_layers),
        tap_channels=args.tap_channels,
        final_channels=args.final_channels,
        grid=args.grid,
    )
    if spec.name != "standin":
        raise SystemExit(
            f"unknown encoder {spec.name!r}: only the bundled 'standin' encoder ships "
            "with this package; plug real encoders in through the Python API"
        )
    manifest = load_manifest(args.manifest)
    out = _default_cache_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    encoder = StandinEncoder(spec, seed=args.seed)
    samples = (load_sample(rec, args.image_size) for rec in manifest.records)
    index = precompute_embeddings(encoder, samples, out)
    print(f"cached {len(index.entries)} embedding sets -> {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    manifest = load_manifest(args.manifest)
    cache = read_cache_index(_default_cache_path(args.cache))
    plan = leave_one_site_out(manifest, args.site, seed=config.seed)
    result = train(config, plan, cache, manifest)
    if not freeze_audit(result.initial, result.best):
        raise SystemExit("freeze audit failed: frozen parameters or cache changed during training")
    save_checkpoint(result.best, args.out)
    best = result.best
    print(
        f"trained on site {args.site}: best epoch {best.epoch}, "
        f"val dice {max(best.val_dice_history):.4f} -> {args.out}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    cache = read_cache_index(_default_cache_path(args.cache))
    predictor = ev.Predictor.from_checkpoint(ckpt)
    merge = _merge(args)
    targets = sorted(s for s in manifest.sites if s != ckpt.source_site)
    if not targets:
        raise SystemExit(f"manifest has no sites other than the source {ckpt.source_site!r}")
    lines = ["site,mean_dice"]
    means = []
    for site in targets:
        records = [r for r in manifest.records if r.site == site]
        report = ev.evaluate_site(predictor, records, cache, merge, grid_n=args.grid)
        means.append(report.mean_percent)
        lines.append(f"{site},{report.mean_percent:.2f}")
        print(f"site {site}: dice {report.mean_percent:.2f}")
    overall = ev.overall_mean(means)
    lines.append(f"Overall,{overall:.2f}")
    print(f"overall: {overall:.2f}")
    if args.report:
        Path(args.report).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    manifest = load_manifest(args.manifest)
    cache = read_cache_index(_default_cache_path(args.cache))
    report = ev.run_ablation(config, args.variant, manifest, cache,
                             label=args.label, merge=_merge(args))
    ev.emit_report(report, args.report)
    if args.json:
        ev.report_to_json(report, args.json)
    print(f"{report.method}: overall {report.overall:.2f} -> {args.report}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    paths: list[Path] = []
    for item in args.checkpoints.split(","):
        p = Path(item)
        paths.extend(sorted(p.glob("*.ckpt")) if p.is_dir() else [p])
    checkpoints = {}
    for p in paths:
        ckpt = load_checkpoint(p)
        if ckpt.source_site in checkpoints:
            raise SystemExit(f"duplicate checkpoint for source site {ckpt.source_site!r}")
        checkpoints[ckpt.source_site] = ckpt
    if not checkpoints:
        raise SystemExit("no checkpoints found for the sweep")
    manifest = load_manifest(args.manifest)
    cache = read_cache_index(_default_cache_path(args.cache))
    reports = ev.grid_sweep(checkpoints, manifest, cache, _int_tuple(args.sizes), _merge(args))
    ev.emit_sweep_report(reports, args.report)
    for n in sorted(reports):
        print(f"grid {n}x{n}: overall {reports[n].overall:.2f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    if args.format != "csv":
        raise SystemExit(f"unsupported report format {args.format!r}")
    report = ev.report_from_json(args.infile)
    ev.emit_report(report, args.out)
    print(f"{report.method}: wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptseg",
        description="Promptable segmentation: embedding cache, decoder training, cross-site eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="encode a dataset into the embedding cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", default="standin")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help=f"cache path (default: ${CACHE_ENV}/{DEFAULT_CACHE_NAME})")
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--tap-layers", default="8,16,24")
    p.add_argument("--tap-channels", type=int, default=1024)
    p.add_argument("--final-channels", type=int, default=256)
    p.add_argument("--image-size", type=int, default=288)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("train", help="train the decoder branches on one site")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--site", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", default=None)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on every non-source site")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", default=None)
    p.add_argument("--grid", type=int, default=None, help="override the grid size")
    _add_merge_flags(p)
    p.add_argument("--report", default=None, help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="leave-one-site-out run for a decoder ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", default=None)
    p.add_argument("--variant", required=True,
                   choices=("pimm_only", "no_iou_head", "no_mask_fusion", "full"))
    p.add_argument("--label", default=None)
    _add_merge_flags(p)
    p.add_argument("--report", required=True)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="evaluation-only sweep over grid sizes")
    p.add_argument("--checkpoints", required=True,
                   help="directory of .ckpt files or comma-separated paths")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", default=None)
    p.add_argument("--sizes", default="1,5,9,11,15,21,25")
    _add_merge_flags(p)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="format a stored experiment report")
    p.add_argument("--in", dest="infile", required=True, help="report JSON")
    p.add_argument("--format", default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
