"""Frozen multi-scale image embeddings: stand-in encoder and binary cache.

Embeddings are computed once before training (the encoders stay frozen)
and served from an append-only cache file. Each record carries a CRC32 so
corruption surfaces as an error instead of garbage tensors. The bundled
stand-in encoder is a seeded random patch projection: cheap, deterministic,
and image-dependent, standing in for a heavyweight pretrained backbone
behind the same interface.

Cache layout (`DSEC`): magic, u32 LE version, a canonical key=value text
block describing the encoder spec, then per-sample records
``u16 id_len | id | u32 n_payloads | u64 lengths[] | payloads | u32 crc32``.
The companion ``<path>.idx`` file lists ``sample_id,offset,length`` lines.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .data import SegmentationSample

CACHE_MAGIC = b"DSEC"
CACHE_VERSION = 1

DEFAULT_TAP_LAYERS = (8, 16, 24)
DEFAULT_TAP_CHANNELS = 1024
DEFAULT_FINAL_CHANNELS = 256
DEFAULT_GRID = 64


class CacheError(ValueError):
    """Cache file cannot be written or parsed."""


class CacheCorruptionError(CacheError):
    """Record failed its checksum or structural bounds check."""


class CacheKeyError(KeyError):
    """Requested sample_id is not in the cache index."""


class EmbeddingShapeError(ValueError):
    """Embedding set does not match the encoder spec."""


@dataclass(frozen=True)
class EncoderSpec:
    name: str = "standin"
    tap_layers: tuple[int, ...] = DEFAULT_TAP_LAYERS
    tap_channels: int = DEFAULT_TAP_CHANNELS
    final_channels: int = DEFAULT_FINAL_CHANNELS
    grid: int = DEFAULT_GRID

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("encoder name must be non-empty")
        if not self.tap_layers or any(b <= a for a, b in zip(self.tap_layers, self.tap_layers[1:])):
            raise ValueError(f"tap_layers must be non-empty and strictly increasing, got {self.tap_layers}")
        for label, v in (("tap_channels", self.tap_channels),
                         ("final_channels", self.final_channels),
                         ("grid", self.grid)):
            if v <= 0:
                raise ValueError(f"{label} must be positive, got {v}")

    def to_text(self) -> str:
        return (
            f"final_channels = {self.final_channels}\n"
            f"grid = {self.grid}\n"
            f"name = {self.name}\n"
            f"tap_channels = {self.tap_channels}\n"
            f"tap_layers = {','.join(str(t) for t in self.tap_layers)}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "EncoderSpec":
        fields: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        try:
            return cls(
                name=fields["name"],
                tap_layers=tuple(int(t) for t in fields["tap_layers"].split(",")),
                tap_channels=int(fields["tap_channels"]),
                final_channels=int(fields["final_channels"]),
                grid=int(fields["grid"]),
            )
        except (KeyError, ValueError) as exc:
            raise CacheError(f"bad encoder spec block: {exc}") from exc


@dataclass(frozen=True)
class ImageEmbeddingSet:
    sample_id: str
    taps: tuple[np.ndarray, ...]  # each tap_channels x grid x grid, float32
    final: np.ndarray             # final_channels x grid x grid, float32


def validate_embedding_set(emb: ImageEmbeddingSet, spec: EncoderSpec) -> None:
    if len(emb.taps) != len(spec.tap_layers):
        raise EmbeddingShapeError(
            f"{emb.sample_id}: expected {len(spec.tap_layers)} tap embeddings, got {len(emb.taps)}"
        )
    tap_shape = (spec.tap_channels, spec.grid, spec.grid)
    for k, tap in enumerate(emb.taps):
        if tap.shape != tap_shape:
            raise EmbeddingShapeError(f"{emb.sample_id}: tap {k} shape {tap.shape} != {tap_shape}")
        if not np.isfinite(tap).all():
            raise EmbeddingShapeError(f"{emb.sample_id}: tap {k} contains non-finite values")
    final_shape = (spec.final_channels, spec.grid, spec.grid)
    if emb.final.shape != final_shape:
        raise EmbeddingShapeError(f"{emb.sample_id}: final shape {emb.final.shape} != {final_shape}")
    if not np.isfinite(emb.final).all():
        raise EmbeddingShapeError(f"{emb.sample_id}: final embedding contains non-finite values")


class Encoder(Protocol):
    """Anything that turns a sample into frozen embeddings for a fixed spec."""

    spec: EncoderSpec

    def encode(self, sample: SegmentationSample) -> ImageEmbeddingSet: ...


def _adaptive_mean_pool(x: np.ndarray, out: int) -> np.ndarray:
    """Channel-wise adaptive average pooling, same windowing as torch."""
    c, h, w = x.shape
    if h == out and w == out:
        return x
    pooled = np.empty((c, out, out), dtype=x.dtype)
    row = [(int(np.floor(i * h / out)), int(np.ceil((i + 1) * h / out))) for i in range(out)]
    col = [(int(np.floor(j * w / out)), int(np.ceil((j + 1) * w / out))) for j in range(out)]
    for i, (r0, r1) in enumerate(row):
        for j, (c0, c1) in enumerate(col):
            pooled[:, i, j] = x[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return pooled


def _projection(seed: int, domain: int, n_in: int, n_out: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, domain, n_in, n_out]))
    return (rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(np.float32)


def standin_encode(sample: SegmentationSample, spec: EncoderSpec, seed: int) -> ImageEmbeddingSet:
    """Deterministic surrogate encoding of one sample.

    The image is cut into non-overlapping patches covering every pixel,
    each patch is projected by a fixed seeded Gaussian matrix (one per tap
    layer plus one for the final head), and the patch grid is average-pooled
    to the spec's grid resolution. Pure function of (image bytes, spec, seed).
    """
    img = np.asarray(sample.image, dtype=np.float32)
    h, w = img.shape
    p = max(1, -(-h // spec.grid))
    n_r, n_c = -(-h // p), -(-w // p)
    padded = np.zeros((n_r * p, n_c * p), dtype=np.float32)
    padded[:h, :w] = img
    patches = (
        padded.reshape(n_r, p, n_c, p)
        .transpose(0, 2, 1, 3)
        .reshape(n_r * n_c, p * p)
    )

    def head(domain: int, channels: int) -> np.ndarray:
        proj = patches @ _projection(seed, domain, p * p, channels)
        grid_map = proj.reshape(n_r, n_c, channels).transpose(2, 0, 1)
        return np.ascontiguousarray(_adaptive_mean_pool(grid_map, spec.grid))

    taps = tuple(head(100 + layer, spec.tap_channels) for layer in spec.tap_layers)
    final = head(0, spec.final_channels)
    emb = ImageEmbeddingSet(sample_id=sample.sample_id, taps=taps, final=final)
    validate_embedding_set(emb, spec)
    return emb


@dataclass(frozen=True)
class StandinEncoder:
    spec: EncoderSpec
    seed: int = 0

    def encode(self, sample: SegmentationSample) -> ImageEmbeddingSet:
        return standin_encode(sample, self.spec, self.seed)


@dataclass(frozen=True)
class CacheIndex:
    spec: EncoderSpec
    cache_path: str
    entries: dict[str, tuple[int, int]]  # sample_id -> (offset, length)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.entries

    def sample_ids(self) -> list[str]:
        return list(self.entries)


def _index_path(cache_path: str | Path) -> Path:
    return Path(str(cache_path) + ".idx")


def _encode_record(emb: ImageEmbeddingSet) -> bytes:
    id_bytes = emb.sample_id.encode("utf-8")
    payloads = [np.ascontiguousarray(t, dtype="<f4").tobytes() for t in emb.taps]
    payloads.append(np.ascontiguousarray(emb.final, dtype="<f4").tobytes())
    body = struct.pack("<H", len(id_bytes)) + id_bytes + struct.pack("<I", len(payloads))
    body += b"".join(struct.pack("<Q", len(p)) for p in payloads)
    body += b"".join(payloads)
    return body + struct.pack("<I", zlib.crc32(body))


def precompute_embeddings(
    encoder: Encoder,
    samples: Iterable[SegmentationSample],
    cache_path: str | Path,
) -> CacheIndex:
    """Encode every sample once and persist the results plus an index.

    Re-running with a deterministic encoder reproduces the cache file byte
    for byte. Embeddings that do not match the encoder's spec are rejected.
    """
    cache_path = Path(cache_path)
    spec_block = encoder.spec.to_text().encode("utf-8")
    entries: dict[str, tuple[int, int]] = {}
    with open(cache_path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<I", CACHE_VERSION))
        fh.write(struct.pack("<I", len(spec_block)) + spec_block)
        for sample in samples:
            emb = encoder.encode(sample)
            validate_embedding_set(emb, encoder.spec)
            if emb.sample_id in entries:
                raise CacheError(f"duplicate sample_id {emb.sample_id!r} during precompute")
            record = _encode_record(emb)
            entries[emb.sample_id] = (fh.tell(), len(record))
            fh.write(record)
    index_lines = [f"{sid},{off},{length}" for sid, (off, length) in entries.items()]
    _index_path(cache_path).write_text("\n".join(index_lines) + "\n", encoding="utf-8")
    return CacheIndex(spec=encoder.spec, cache_path=str(cache_path), entries=entries)


def read_cache_index(cache_path: str | Path) -> CacheIndex:
    """Reload a CacheIndex from a cache file and its .idx companion."""
    cache_path = Path(cache_path)
    if not cache_path.is_file():
        raise CacheError(f"cache file not found: {cache_path}")
    with open(cache_path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12 or header[:4] != CACHE_MAGIC:
            raise CacheError(f"{cache_path}: not a DSEC cache")
        version, spec_len = struct.unpack("<II", header[4:12])
        if version != CACHE_VERSION:
            raise CacheError(f"{cache_path}: unsupported cache version {version}")
        spec = EncoderSpec.from_text(fh.read(spec_len).decode("utf-8"))
    idx = _index_path(cache_path)
    if not idx.is_file():
        raise CacheError(f"cache index not found: {idx}")
    entries: dict[str, tuple[int, int]] = {}
    for line in idx.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        sid, off, length = line.rsplit(",", 2)
        entries[sid] = (int(off), int(length))
    return CacheIndex(spec=spec, cache_path=str(cache_path), entries=entries)


def load_embeddings(index: CacheIndex, sample_id: str) -> ImageEmbeddingSet:
    """Read one record back, bit-for-bit, verifying its checksum."""
    if sample_id not in index.entries:
        raise CacheKeyError(sample_id)
    offset, length = index.entries[sample_id]
    with open(index.cache_path, "rb") as fh:
        fh.seek(offset)
        record = fh.read(length)
    if len(record) != length or length < 10:
        raise CacheCorruptionError(f"{sample_id}: truncated cache record")
    body, (crc,) = record[:-4], struct.unpack("<I", record[-4:])
    if zlib.crc32(body) != crc:
        raise CacheCorruptionError(f"{sample_id}: cache record checksum mismatch")
    try:
        (id_len,) = struct.unpack_from("<H", body, 0)
        pos = 2 + id_len
        stored_id = body[2:pos].decode("utf-8")
        (n_payloads,) = struct.unpack_from("<I", body, pos)
        pos += 4
        lengths = struct.unpack_from(f"<{n_payloads}Q", body, pos)
        pos += 8 * n_payloads
        payloads = []
        for plen in lengths:
            payloads.append(body[pos:pos + plen])
            if len(payloads[-1]) != plen:
                raise CacheCorruptionError(f"{sample_id}: payload overruns record")
            pos += plen
    except struct.error as exc:
        raise CacheCorruptionError(f"{sample_id}: malformed cache record: {exc}") from exc
    if stored_id != sample_id:
        raise CacheCorruptionError(f"index points at record for {stored_id!r}, not {sample_id!r}")
    spec = index.spec
    if n_payloads != len(spec.tap_layers) + 1:
        raise CacheCorruptionError(f"{sample_id}: expected {len(spec.tap_layers) + 1} payloads, got {n_payloads}")
    tap_shape = (spec.tap_channels, spec.grid, spec.grid)
    final_shape = (spec.final_channels, spec.grid, spec.grid)
    try:
        taps = tuple(
            np.frombuffer(p, dtype="<f4").reshape(tap_shape).copy() for p in payloads[:-1]
        )
        final = np.frombuffer(payloads[-1], dtype="<f4").reshape(final_shape).copy()
    except ValueError as exc:
        raise CacheCorruptionError(f"{sample_id}: payload size does not match spec: {exc}") from exc
    emb = ImageEmbeddingSet(sample_id=sample_id, taps=taps, final=final)
    validate_embedding_set(emb, spec)
    return emb


def cache_file_hash(cache_path: str | Path) -> str:
    """SHA-256 of the cache file; the freezing contract asserts it never changes."""
    digest = hashlib.sha256()
    with open(cache_path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
