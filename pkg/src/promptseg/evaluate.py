"""Inference-time merging, cross-site evaluation, ablations, and reports.

Grid-mode prediction runs one forward pass per lattice point and merges the
per-point probability maps (mean probability by default, then threshold);
whole-box prediction is a single pass. Leave-one-site-out experiments train
on each site in turn and average dice over the remaining sites, mirroring
the "X to Rest ... Overall" table layout in the emitted CSV.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import DatasetManifest, SampleRecord, SegmentationSample, leave_one_site_out, load_mask
from .encoder_cache import CacheIndex, load_embeddings
from .losses import dice_score
from .prompts import GRID_POINTS, PromptSet
from .training import (
    Checkpoint,
    ModelBundle,
    TrainConfig,
    inference_prompts,
    load_bundle,
    predict_probabilities,
    single_point_instances,
    train,
)

MERGE_KINDS = ("mean_probability", "max_probability", "union_binary", "iou_weighted")


class ModeMismatchError(ValueError):
    """Prompt mode does not match the mode the checkpoint was trained for."""


@dataclass(frozen=True)
class MergeStrategy:
    kind: str = "mean_probability"
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in MERGE_KINDS:
            raise ValueError(f"merge kind must be one of {MERGE_KINDS}, got {self.kind!r}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")


def merge_probabilities(
    probs: np.ndarray, merge: MergeStrategy, ious: np.ndarray | None = None
) -> np.ndarray:
    """Collapse (P, H, W) per-prompt probability maps into one binary mask.

    The opt-in iou_weighted kind averages maps weighted by their predicted
    IoU; predictions are recorded per prompt but never filter masks by
    default.
    """
    if probs.ndim != 3 or probs.shape[0] < 1:
        raise ValueError(f"expected (P, H, W) probability maps, got shape {probs.shape}")
    if merge.kind == "mean_probability":
        return (probs.mean(axis=0) > merge.threshold).astype(np.uint8)
    if merge.kind == "max_probability":
        return (probs.max(axis=0) > merge.threshold).astype(np.uint8)
    if merge.kind == "iou_weighted":
        if ious is None or len(ious) != probs.shape[0]:
            raise ValueError("iou_weighted merge needs one IoU prediction per prompt")
        w = np.clip(np.asarray(ious, dtype=np.float64), 1e-6, None)
        merged = np.tensordot(w / w.sum(), probs, axes=1)
        return (merged > merge.threshold).astype(np.uint8)
    return (probs > merge.threshold).any(axis=0).astype(np.uint8)


class Predictor:
    """A loaded checkpoint ready for repeated inference."""

    def __init__(self, bundle: ModelBundle, config: TrainConfig) -> None:
        self.bundle = bundle.eval()
        self.config = config

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Predictor":
        return cls(load_bundle(ckpt), ckpt.config)

    def predict(
        self,
        emb,
        prompts: PromptSet,
        merge: MergeStrategy = MergeStrategy(),
    ) -> np.ndarray:
        if prompts.mode != self.config.mode:
            raise ModeMismatchError(
                f"prompts are {prompts.mode!r} but checkpoint was trained in "
                f"{self.config.mode!r} mode"
            )
        if prompts.mode == GRID_POINTS:
            instances = single_point_instances(prompts)
        else:
            instances = [prompts]
        probs, ious = predict_probabilities(self.bundle, self.config, emb, instances)
        return merge_probabilities(probs, merge, ious)

    def predict_auto(self, emb, grid_n: int | None = None,
                     merge: MergeStrategy = MergeStrategy()) -> np.ndarray:
        """Fully automatic prediction with the configured prompt mode."""
        instances = inference_prompts(self.config, grid_n)
        probs, ious = predict_probabilities(self.bundle, self.config, emb, instances)
        return merge_probabilities(probs, merge, ious)


def predict_sample(
    predictor: Predictor,
    embeddings,
    prompts: PromptSet,
    merge: MergeStrategy = MergeStrategy(),
) -> np.ndarray:
    """Binary H x W mask for one sample's embeddings and prompt set."""
    return predictor.predict(embeddings, prompts, merge)


@dataclass(frozen=True)
class SiteReport:
    site: str
    dice_scores: tuple[float, ...]
    mean_percent: float

    @classmethod
    def from_scores(cls, site: str, scores: Sequence[float]) -> "SiteReport":
        scores = tuple(float(s) for s in scores)
        return cls(site=site, dice_scores=scores, mean_percent=100.0 * float(np.mean(scores)))


def overall_mean(values: Iterable[float]) -> float:
    """Arithmetic mean used for every Overall column."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("cannot aggregate an empty collection of site values")
    return float(np.mean(vals))


@dataclass(frozen=True)
class ExperimentReport:
    method: str
    site_means: dict[str, float]  # source site -> mean dice over target sites, percent
    overall: float

    @classmethod
    def from_site_means(cls, method: str, site_means: Mapping[str, float]) -> "ExperimentReport":
        means = {site: float(v) for site, v in site_means.items()}
        return cls(method=method, site_means=means, overall=overall_mean(means.values()))


def evaluate_site(
    predictor: Predictor,
    records: Sequence[SampleRecord],
    cache: CacheIndex,
    merge: MergeStrategy = MergeStrategy(),
    grid_n: int | None = None,
) -> SiteReport:
    """Per-sample dice of automatic predictions against one site's masks."""
    if not records:
        raise ValueError("evaluate_site needs at least one record")
    sites = {r.site for r in records}
    if len(sites) != 1:
        raise ValueError(f"records span multiple sites: {sorted(sites)}")
    scores = []
    image_size = predictor.config.image_size
    for rec in records:
        emb = load_embeddings(cache, rec.sample_id)
        pred = predictor.predict_auto(emb, grid_n=grid_n, merge=merge)
        scores.append(dice_score(pred, load_mask(rec, image_size)))
    return SiteReport.from_scores(sites.pop(), scores)


def _site_records(manifest: DatasetManifest, site: str) -> list[SampleRecord]:
    return [r for r in manifest.records if r.site == site]


def _target_mean(
    predictor: Predictor,
    manifest: DatasetManifest,
    target_sites: Iterable[str],
    cache: CacheIndex,
    merge: MergeStrategy,
    grid_n: int | None = None,
) -> float:
    reports = [
        evaluate_site(predictor, _site_records(manifest, site), cache, merge, grid_n)
        for site in target_sites
    ]
    return overall_mean(r.mean_percent for r in reports)


def run_experiment(
    config: TrainConfig,
    manifest: DatasetManifest,
    cache: CacheIndex,
    label: str | None = None,
    merge: MergeStrategy = MergeStrategy(),
) -> ExperimentReport:
    """Leave-one-site-out loop: train on each site, test on all the others."""
    site_means: dict[str, float] = {}
    for source in sorted(manifest.sites):
        plan = leave_one_site_out(manifest, source, seed=config.seed)
        result = train(config, plan, cache, manifest)
        predictor = Predictor.from_checkpoint(result.best)
        site_means[source] = _target_mean(
            predictor, manifest, sorted(plan.target_sites), cache, merge
        )
    method = label if label is not None else f"{config.variant} ({config.mode})"
    return ExperimentReport.from_site_means(method, site_means)


def run_ablation(
    config: TrainConfig,
    variant: str,
    manifest: DatasetManifest,
    cache: CacheIndex,
    label: str | None = None,
    merge: MergeStrategy = MergeStrategy(),
) -> ExperimentReport:
    """Train and evaluate one decoder ablation across all source sites."""
    ablated = replace(config, variant=variant)
    return run_experiment(ablated, manifest, cache, label=label or variant, merge=merge)


def grid_sweep(
    checkpoints: Mapping[str, Checkpoint],
    manifest: DatasetManifest,
    cache: CacheIndex,
    sizes: Sequence[int],
    merge: MergeStrategy = MergeStrategy(),
) -> dict[int, ExperimentReport]:
    """Evaluation-only sweep over grid sizes using already-trained checkpoints."""
    predictors: dict[str, Predictor] = {}
    for site, ckpt in checkpoints.items():
        if ckpt.config.mode != GRID_POINTS:
            raise ModeMismatchError(f"checkpoint for site {site!r} is not a grid_points model")
        predictors[site] = Predictor.from_checkpoint(ckpt)
    reports: dict[int, ExperimentReport] = {}
    for n in sizes:
        site_means = {
            source: _target_mean(
                predictors[source],
                manifest,
                sorted(s for s in manifest.sites if s != source),
                cache,
                merge,
                grid_n=n,
            )
            for source in sorted(predictors)
        }
        reports[n] = ExperimentReport.from_site_means(f"grid {n}x{n}", site_means)
    return reports


def emit_report(report: ExperimentReport, path: str | Path) -> None:
    """Comma-separated row: method, per-site means, overall (two decimals)."""
    sites = sorted(report.site_means)
    header = ["method"] + [f"{s} to Rest" for s in sites] + ["Overall"]
    values = [report.method] + [f"{report.site_means[s]:.2f}" for s in sites]
    values.append(f"{report.overall:.2f}")
    Path(path).write_text(
        ",".join(header) + "\n" + ",".join(values) + "\n", encoding="utf-8"
    )


def emit_sweep_report(reports: Mapping[int, ExperimentReport], path: str | Path) -> None:
    """One CSV row per grid size, same column layout as emit_report."""
    if not reports:
        raise ValueError("no sweep reports to emit")
    sizes = sorted(reports)
    sites = sorted(reports[sizes[0]].site_means)
    lines = [",".join(["grid_points"] + [f"{s} to Rest" for s in sites] + ["Overall"])]
    for n in sizes:
        rep = reports[n]
        row = [str(n)] + [f"{rep.site_means[s]:.2f}" for s in sites] + [f"{rep.overall:.2f}"]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def report_to_json(report: ExperimentReport, path: str | Path) -> None:
    payload = {
        "method": report.method,
        "site_means": report.site_means,
        "overall": report.overall,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def report_from_json(path: str | Path) -> ExperimentReport:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return ExperimentReport.from_site_means(payload["method"], payload["site_means"])


PRED_COLOR = (255, 165, 0)   # prediction: orange
GT_COLOR = (0, 0, 255)       # ground truth: blue
BLEND_COLOR = tuple((a + b) // 2 for a, b in zip(PRED_COLOR, GT_COLOR))


def emit_overlay(sample: SegmentationSample, pred_mask: np.ndarray, path: str | Path) -> None:
    """Portable pixmap with prediction and ground truth painted over the image."""
    if pred_mask.shape != sample.mask.shape:
        raise ValueError(
            f"prediction shape {pred_mask.shape} != mask shape {sample.mask.shape}"
        )
    gray = np.clip(sample.image * 255.0, 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    pred = pred_mask.astype(bool)
    gt = sample.mask.astype(bool)
    rgb[pred & ~gt] = PRED_COLOR
    rgb[gt & ~pred] = GT_COLOR
    rgb[gt & pred] = BLEND_COLOR
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
