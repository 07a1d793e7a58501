"""Dataset manifests, raster I/O, and train/eval split planning.

A dataset is described by a plain-text manifest (one ``sample_id,site,
image_path,mask_path`` line per slice) pointing at binary raster files.
Relative resource paths are resolved against the manifest's directory.
Splits are seeded and deterministic; manifests and samples are immutable
values safe to share across workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

RASTER_MAGIC = b"DSIM"
RASTER_VERSION = 1
KIND_IMAGE = 0
KIND_MASK = 1

DEFAULT_IMAGE_SIZE = 288
DEFAULT_SPLIT_RATIO = (9, 1)


class ManifestError(ValueError):
    """Malformed or inconsistent dataset manifest."""


class RasterError(ValueError):
    """Malformed raster file or sample violating its invariants."""


class SplitError(ValueError):
    """Invalid split request (unknown site, too few samples, ...)."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    site: str
    image_path: str
    mask_path: str

    def __post_init__(self) -> None:
        for name in ("sample_id", "site", "image_path", "mask_path"):
            if not getattr(self, name):
                raise ManifestError(f"record field {name!r} must be non-empty")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    sites: frozenset[str]

    def site_ids(self, site: str) -> list[str]:
        """Sample ids of one site, in manifest order."""
        if site not in self.sites:
            raise SplitError(f"unknown site {site!r}; manifest has {sorted(self.sites)}")
        return [r.sample_id for r in self.records if r.site == site]

    def record(self, sample_id: str) -> SampleRecord:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise ManifestError(f"unknown sample_id {sample_id!r}") from None

    @cached_property
    def _by_id(self) -> dict[str, SampleRecord]:
        return {r.sample_id: r for r in self.records}


@dataclass(frozen=True)
class SegmentationSample:
    image: np.ndarray  # H x W float32 in [0, 1]
    mask: np.ndarray   # H x W uint8 in {0, 1}
    sample_id: str
    site: str


@dataclass(frozen=True)
class EvalPlan:
    source_site: str
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    target_sites: dict[str, tuple[str, ...]] = field(default_factory=dict)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest file.

    Raises ManifestError on missing files, malformed lines, duplicate
    sample ids, or records pointing at nonexistent rasters.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    records: list[SampleRecord] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 comma-separated fields, got {len(parts)}")
        rec = SampleRecord(*parts)
        if rec.sample_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate sample_id {rec.sample_id!r}")
        seen.add(rec.sample_id)
        for res in (rec.image_path, rec.mask_path):
            if not _resolve(base, res).is_file():
                raise ManifestError(f"{path}:{lineno}: resource does not exist: {res}")
        records.append(
            SampleRecord(
                rec.sample_id,
                rec.site,
                str(_resolve(base, rec.image_path)),
                str(_resolve(base, rec.mask_path)),
            )
        )
    if not records:
        raise ManifestError(f"manifest {path} contains no records")
    return DatasetManifest(records=tuple(records), sites=frozenset(r.site for r in records))


def _resolve(base: Path, resource: str) -> Path:
    p = Path(resource)
    return p if p.is_absolute() else base / p


def split_train_val(
    manifest: DatasetManifest,
    site: str,
    ratio: tuple[int, int] = DEFAULT_SPLIT_RATIO,
    seed: int = 0,
) -> tuple[list[str], list[str]]:
    """Seeded train/validation partition of one site's sample ids.

    The validation share is ``max(1, floor(n * val / (train + val)))`` so
    tiny sites always keep a non-empty validation set.
    """
    if ratio[0] <= 0 or ratio[1] <= 0:
        raise SplitError(f"ratio components must be positive, got {ratio}")
    ids = manifest.site_ids(site)
    n = len(ids)
    if n < 2:
        raise SplitError(f"site {site!r} has {n} samples; need at least 2 to split")
    n_val = max(1, (n * ratio[1]) // (ratio[0] + ratio[1]))
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [ids[i] for i in order]
    return shuffled[n_val:], shuffled[:n_val]


def leave_one_site_out(
    manifest: DatasetManifest,
    source_site: str,
    seed: int = 0,
    ratio: tuple[int, int] = DEFAULT_SPLIT_RATIO,
) -> EvalPlan:
    """Train/val on one site, all remaining sites as evaluation targets."""
    if len(manifest.sites) < 2:
        raise SplitError("leave-one-site-out needs at least 2 sites")
    train_ids, val_ids = split_train_val(manifest, source_site, ratio=ratio, seed=seed)
    targets = {
        site: tuple(manifest.site_ids(site))
        for site in sorted(manifest.sites)
        if site != source_site
    }
    return EvalPlan(
        source_site=source_site,
        train_ids=tuple(train_ids),
        val_ids=tuple(val_ids),
        target_sites=targets,
    )


def write_raster(path: str | Path, array: np.ndarray, kind: int) -> None:
    """Write a 2D array as a DSIM raster (image: float32 LE, mask: u8)."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise RasterError(f"raster payload must be 2D, got shape {arr.shape}")
    h, w = arr.shape
    if kind == KIND_IMAGE:
        payload = arr.astype("<f4").tobytes()
    elif kind == KIND_MASK:
        payload = arr.astype(np.uint8).tobytes()
    else:
        raise RasterError(f"unknown raster kind {kind}")
    header = RASTER_MAGIC + struct.pack("<IIIB", RASTER_VERSION, h, w, kind)
    Path(path).write_bytes(header + payload)


def read_raster(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a DSIM raster, returning (array, kind)."""
    data = Path(path).read_bytes()
    if len(data) < 17 or data[:4] != RASTER_MAGIC:
        raise RasterError(f"{path}: not a DSIM raster")
    version, h, w, kind = struct.unpack("<IIIB", data[4:17])
    if version != RASTER_VERSION:
        raise RasterError(f"{path}: unsupported raster version {version}")
    if kind == KIND_IMAGE:
        expected = 17 + 4 * h * w
        if len(data) != expected:
            raise RasterError(f"{path}: payload size {len(data) - 17} != {4 * h * w}")
        arr = np.frombuffer(data[17:], dtype="<f4").reshape(h, w)
    elif kind == KIND_MASK:
        expected = 17 + h * w
        if len(data) != expected:
            raise RasterError(f"{path}: payload size {len(data) - 17} != {h * w}")
        arr = np.frombuffer(data[17:], dtype=np.uint8).reshape(h, w)
    else:
        raise RasterError(f"{path}: unknown raster kind {kind}")
    return arr.copy(), kind


def load_sample(record: SampleRecord, expected_size: int = DEFAULT_IMAGE_SIZE) -> SegmentationSample:
    """Load and validate a (image, mask) pair for one record."""
    image, kind = read_raster(record.image_path)
    if kind != KIND_IMAGE:
        raise RasterError(f"{record.image_path}: expected image raster, got kind {kind}")
    mask = load_mask(record, expected_size)
    if image.shape != (expected_size, expected_size):
        raise RasterError(
            f"{record.sample_id}: image shape {image.shape} != ({expected_size}, {expected_size})"
        )
    if not np.isfinite(image).all() or image.min() < 0.0 or image.max() > 1.0:
        raise RasterError(f"{record.sample_id}: image intensities outside [0, 1]")
    return SegmentationSample(
        image=image.astype(np.float32),
        mask=mask,
        sample_id=record.sample_id,
        site=record.site,
    )


def load_mask(record: SampleRecord, expected_size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Load only the ground-truth mask; training after precompute never needs the image."""
    mask, kind = read_raster(record.mask_path)
    if kind != KIND_MASK:
        raise RasterError(f"{record.mask_path}: expected mask raster, got kind {kind}")
    if mask.shape != (expected_size, expected_size):
        raise RasterError(
            f"{record.sample_id}: mask shape {mask.shape} != ({expected_size}, {expected_size})"
        )
    bad = np.setdiff1d(np.unique(mask), [0, 1])
    if bad.size:
        raise RasterError(f"{record.sample_id}: mask contains non-binary values {bad.tolist()}")
    return mask.astype(np.uint8)
