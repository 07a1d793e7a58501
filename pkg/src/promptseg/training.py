"""Training loop, run configuration, and checkpoints.

Only the two decoder branches are optimized; image embeddings come from the
pre-populated cache and prompt encoding parameters are fixed, so a run never
touches an image after precompute (masks excepted). Checkpoints freeze the
full configuration, the trainable tensors of the best validation epoch, the
frozen prompt arrays, and the cache hash, which lets `freeze_audit` prove
after the fact that nothing frozen ever moved.

Checkpoint layout (`DSCK`): magic, u32 LE version, canonical key=value meta
block, then named tensors ``u16 name_len | name | u8 ndim | u32 dims[] |
u64 payload_len | float32 LE payload | u32 crc32``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from math import ceil, isfinite
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .data import DatasetManifest, EvalPlan, load_mask
from .encoder_cache import (
    CacheIndex,
    EncoderSpec,
    ImageEmbeddingSet,
    cache_file_hash,
    load_embeddings,
)
from .losses import LossWeights, ce_loss, dice_loss, dice_score, iou_target, mse_loss
from .mask_decoder import DEFAULT_STAGE_WIDTHS, MaskDecoder
from .prompt_iou import PromptIoUModule, extract_mask_embeddings
from .prompts import (
    GRID_POINTS,
    WHOLE_BOX,
    FrozenPromptParams,
    PromptSet,
    encode_prompts,
    grid_points,
    grid_position_encoding,
    sample_training_points,
    whole_image_box,
)

CHECKPOINT_MAGIC = b"DSCK"
CHECKPOINT_VERSION = 1

MODES = (GRID_POINTS, WHOLE_BOX)
VARIANTS = ("full", "pimm_only", "no_iou_head", "no_mask_fusion")
LR_DECAYS = ("poly", "none")
POLY_POWER = 0.9

_PREDICT_CHUNK = 32


class ConfigError(ValueError):
    """Bad or unknown configuration key/value."""


class TrainError(ValueError):
    """Training preconditions violated (cache miss, spec mismatch, ...)."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; aborts with the offending step's breakdown."""


class CheckpointError(ValueError):
    """Checkpoint file cannot be parsed or failed its checksums."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = GRID_POINTS
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    lr_decay: str = "poly"
    n_pos: int = 1
    n_neg: int = 1
    eval_grid: int = 9
    variant: str = "full"
    token_dim: int = 256
    n_layers: int = 2
    n_heads: int = 8
    stage_widths: tuple[int, ...] = DEFAULT_STAGE_WIDTHS
    blocks_per_stage: int = 2
    se_reduction: int = 16
    image_size: int = 288
    encoder: EncoderSpec = field(default_factory=EncoderSpec)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lr_decay not in LR_DECAYS:
            raise ConfigError(f"lr_decay must be one of {LR_DECAYS}, got {self.lr_decay!r}")
        positive = {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "eval_grid": self.eval_grid,
            "token_dim": self.token_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "blocks_per_stage": self.blocks_per_stage,
            "se_reduction": self.se_reduction,
            "image_size": self.image_size,
        }
        for name, v in positive.items():
            if v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.n_pos < 0 or self.n_neg < 0 or self.n_pos + self.n_neg == 0:
            raise ConfigError("n_pos/n_neg must be non-negative with at least one point")
        if self.token_dim % self.n_heads != 0 or self.token_dim % 2 != 0:
            raise ConfigError(f"token_dim {self.token_dim} must be even and divisible by n_heads")
        if self.encoder.final_channels != self.token_dim:
            raise ConfigError(
                f"encoder.final_channels ({self.encoder.final_channels}) must equal "
                f"token_dim ({self.token_dim}): the attention branch consumes the final embedding"
            )
        if len(self.stage_widths) != len(self.encoder.tap_layers) + 1:
            raise ConfigError(
                f"stage_widths needs {len(self.encoder.tap_layers) + 1} entries, "
                f"got {self.stage_widths}"
            )


def config_to_text(config: TrainConfig) -> str:
    """Canonical `key = value` block (sorted keys, round-trip exact)."""
    items = {
        "mode": config.mode,
        "learning_rate": repr(config.learning_rate),
        "batch_size": str(config.batch_size),
        "epochs": str(config.epochs),
        "lambda1": repr(config.weights.lambda1),
        "lambda2": repr(config.weights.lambda2),
        "lambda3": repr(config.weights.lambda3),
        "seed": str(config.seed),
        "lr_decay": config.lr_decay,
        "n_pos": str(config.n_pos),
        "n_neg": str(config.n_neg),
        "eval_grid": str(config.eval_grid),
        "variant": config.variant,
        "token_dim": str(config.token_dim),
        "n_layers": str(config.n_layers),
        "n_heads": str(config.n_heads),
        "stage_widths": ",".join(str(w) for w in config.stage_widths),
        "blocks_per_stage": str(config.blocks_per_stage),
        "se_reduction": str(config.se_reduction),
        "image_size": str(config.image_size),
        "encoder.name": config.encoder.name,
        "encoder.tap_layers": ",".join(str(t) for t in config.encoder.tap_layers),
        "encoder.tap_channels": str(config.encoder.tap_channels),
        "encoder.final_channels": str(config.encoder.final_channels),
        "encoder.grid": str(config.encoder.grid),
    }
    return "".join(f"{k} = {items[k]}\n" for k in sorted(items))


_INT_KEYS = {
    "batch_size", "epochs", "seed", "n_pos", "n_neg", "eval_grid", "token_dim",
    "n_layers", "n_heads", "blocks_per_stage", "se_reduction", "image_size",
    "encoder.tap_channels", "encoder.final_channels", "encoder.grid",
}
_FLOAT_KEYS = {"learning_rate", "lambda1", "lambda2", "lambda3"}
_TUPLE_KEYS = {"stage_widths", "encoder.tap_layers"}
_STR_KEYS = {"mode", "lr_decay", "variant", "encoder.name"}


def parse_config_items(text: str) -> dict[str, object]:
    """Parse a key=value block into typed values; unknown keys are errors."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        try:
            if key in _INT_KEYS:
                out[key] = int(value)
            elif key in _FLOAT_KEYS:
                out[key] = float(value)
            elif key in _TUPLE_KEYS:
                out[key] = tuple(int(v) for v in value.split(","))
            elif key in _STR_KEYS:
                out[key] = value
            else:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return out


def config_from_text(text: str) -> TrainConfig:
    """Build a TrainConfig from a key=value block, defaults filling the gaps."""
    items = parse_config_items(text)
    enc_kwargs = {}
    for enc_key, spec_field in (
        ("encoder.name", "name"), ("encoder.tap_layers", "tap_layers"),
        ("encoder.tap_channels", "tap_channels"),
        ("encoder.final_channels", "final_channels"), ("encoder.grid", "grid"),
    ):
        if enc_key in items:
            enc_kwargs[spec_field] = items.pop(enc_key)
    weights = LossWeights(
        lambda1=float(items.pop("lambda1", 1.0)),
        lambda2=float(items.pop("lambda2", 1.0)),
        lambda3=float(items.pop("lambda3", 10.0)),
    )
    try:
        encoder = EncoderSpec(**enc_kwargs) if enc_kwargs else EncoderSpec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return TrainConfig(weights=weights, encoder=encoder, **items)  # type: ignore[arg-type]


def load_config(path: str | Path) -> TrainConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


def lr_schedule(step: int, config: TrainConfig, total_steps: int) -> float:
    """Per-step learning rate; polynomial decay to zero by default."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if config.lr_decay == "none":
        return config.learning_rate
    frac = min(1.0, step / max(1, total_steps))
    return config.learning_rate * (1.0 - frac) ** POLY_POWER


@dataclass
class ModelBundle:
    prompt_iou: PromptIoUModule
    mask_decoder: MaskDecoder
    frozen: FrozenPromptParams

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        params = list(self.prompt_iou.parameters()) + list(self.mask_decoder.parameters())
        return [p for p in params if p.requires_grad]

    def eval(self) -> "ModelBundle":
        self.prompt_iou.eval()
        self.mask_decoder.eval()
        return self


def build_models(config: TrainConfig) -> ModelBundle:
    """Construct the two decoder branches with a seeded initialization."""
    torch.manual_seed(config.seed)
    prim = PromptIoUModule(config.token_dim, config.n_layers, config.n_heads)
    pimm = MaskDecoder(
        config.encoder,
        token_dim=config.token_dim,
        image_size=config.image_size,
        stage_widths=config.stage_widths,
        blocks_per_stage=config.blocks_per_stage,
        se_reduction=config.se_reduction,
    )
    frozen = FrozenPromptParams.create(config.token_dim, config.seed)
    return ModelBundle(prompt_iou=prim, mask_decoder=pimm, frozen=frozen)


def apply_variant(bundle: ModelBundle, variant: str) -> None:
    """Structural ablations that change the modules rather than the loss."""
    if variant == "no_mask_fusion":
        with torch.no_grad():
            bundle.mask_decoder.fuse_proj.weight.zero_()
        bundle.mask_decoder.fuse_proj.weight.requires_grad_(False)


@dataclass(frozen=True)
class Checkpoint:
    config: TrainConfig
    epoch: int
    source_site: str
    cache_sha256: str
    val_dice_history: tuple[float, ...]
    loss_history: dict[str, tuple[float, ...]]
    tensors: dict[str, np.ndarray]


def bundle_tensors(bundle: ModelBundle) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for prefix, module in (("prompt_iou", bundle.prompt_iou), ("mask_decoder", bundle.mask_decoder)):
        for name, t in module.state_dict().items():
            out[f"{prefix}.{name}"] = t.detach().cpu().numpy().astype(np.float32, copy=True)
    for name, arr in bundle.frozen.named_arrays().items():
        out[f"frozen.{name}"] = np.asarray(arr, dtype=np.float32).copy()
    return out


def make_checkpoint(
    bundle: ModelBundle,
    config: TrainConfig,
    *,
    epoch: int,
    source_site: str,
    cache_sha256: str,
    val_dice_history: Sequence[float] = (),
    loss_history: dict[str, Sequence[float]] | None = None,
    tensors: dict[str, np.ndarray] | None = None,
) -> Checkpoint:
    return Checkpoint(
        config=config,
        epoch=epoch,
        source_site=source_site,
        cache_sha256=cache_sha256,
        val_dice_history=tuple(float(v) for v in val_dice_history),
        loss_history={k: tuple(float(x) for x in v) for k, v in (loss_history or {}).items()},
        tensors=tensors if tensors is not None else bundle_tensors(bundle),
    )


def _meta_text(ckpt: Checkpoint) -> str:
    lines = [config_to_text(ckpt.config)]
    lines.append(f"run.epoch = {ckpt.epoch}\n")
    lines.append(f"run.source_site = {ckpt.source_site}\n")
    lines.append(f"run.cache_sha256 = {ckpt.cache_sha256}\n")
    lines.append(f"run.val_dice = {','.join(repr(v) for v in ckpt.val_dice_history)}\n")
    for key in sorted(ckpt.loss_history):
        joined = ",".join(repr(v) for v in ckpt.loss_history[key])
        lines.append(f"run.loss.{key} = {joined}\n")
    return "".join(lines)


def _meta_parse(text: str) -> tuple[TrainConfig, dict[str, str]]:
    config_lines, run_items = [], {}
    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("run."):
            key, _, value = line.partition("=")
            run_items[key.strip()[4:]] = value.strip()
        elif line:
            config_lines.append(line)
    return config_from_text("\n".join(config_lines)), run_items


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = _meta_text(ckpt).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta)) + meta)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            name_b = name.encode("utf-8")
            payload = arr32.tobytes()
            fh.write(struct.pack("<H", len(name_b)) + name_b)
            fh.write(struct.pack("<B", arr32.ndim))
            fh.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
            fh.write(struct.pack("<Q", len(payload)) + payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a DSCK checkpoint")
    version, meta_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    try:
        meta = data[pos:pos + meta_len].decode("utf-8")
        pos += meta_len
        (n_tensors,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            (payload_len,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            payload = data[pos:pos + payload_len]
            pos += payload_len
            (crc,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if len(payload) != payload_len or zlib.crc32(payload) != crc:
                raise CheckpointError(f"{path}: tensor {name!r} failed its checksum")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint: {exc}") from exc
    config, run_items = _meta_parse(meta)
    val_hist = tuple(
        float(v) for v in run_items.get("val_dice", "").split(",") if v
    )
    loss_history = {
        key[5:]: tuple(float(v) for v in value.split(",") if v)
        for key, value in run_items.items()
        if key.startswith("loss.")
    }
    return Checkpoint(
        config=config,
        epoch=int(run_items.get("epoch", "-1")),
        source_site=run_items.get("source_site", ""),
        cache_sha256=run_items.get("cache_sha256", ""),
        val_dice_history=val_hist,
        loss_history=loss_history,
        tensors=tensors,
    )


def load_bundle(ckpt: Checkpoint) -> ModelBundle:
    """Rebuild modules from a checkpoint, restoring every tensor exactly."""
    bundle = build_models(ckpt.config)
    for prefix, module in (("prompt_iou", bundle.prompt_iou), ("mask_decoder", bundle.mask_decoder)):
        state = {
            name[len(prefix) + 1:]: torch.from_numpy(arr.copy())
            for name, arr in ckpt.tensors.items()
            if name.startswith(prefix + ".")
        }
        module.load_state_dict(state)
    frozen_arrays = {
        name[len("frozen."):]: arr.copy()
        for name, arr in ckpt.tensors.items()
        if name.startswith("frozen.")
    }
    frozen = FrozenPromptParams(
        token_dim=ckpt.config.token_dim,
        seed=ckpt.config.seed,
        freq=frozen_arrays["freq"],
        label_embed={
            "positive": frozen_arrays["label_positive"],
            "negative": frozen_arrays["label_negative"],
        },
        corner_embed=np.stack([frozen_arrays["corner0"], frozen_arrays["corner1"]]),
        no_mask=frozen_arrays["no_mask"],
    )
    bundle.frozen = frozen
    return bundle.eval()


def freeze_audit(before: Checkpoint, after: Checkpoint) -> bool:
    """True iff the frozen prompt arrays and the cache hash never changed."""
    keys_b = {k for k in before.tensors if k.startswith("frozen.")}
    keys_a = {k for k in after.tensors if k.startswith("frozen.")}
    if keys_b != keys_a or not keys_b:
        return False
    if before.cache_sha256 != after.cache_sha256 or not before.cache_sha256:
        return False
    return all(
        before.tensors[k].tobytes() == after.tensors[k].tobytes() for k in sorted(keys_b)
    )


def encode_prompt_instances(
    frozen: FrozenPromptParams, prompt_sets: Sequence[PromptSet], grid: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack per-instance prompt tokens: (P, T, D) plus the dense map (D, g, g)."""
    encoded = [encode_prompts(ps, frozen, grid) for ps in prompt_sets]
    tokens = torch.from_numpy(np.stack([e.tokens for e in encoded]))
    dense = torch.from_numpy(encoded[0].dense_embedding.copy())
    return tokens, dense


def run_decoder(
    bundle: ModelBundle,
    config: TrainConfig,
    taps: Sequence[torch.Tensor],
    final: torch.Tensor,
    tokens: torch.Tensor | None,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """One decode of (B, H, W) logits plus IoU predictions where applicable.

    The attention branch is skipped entirely for the pimm_only variant and
    the IoU head is not evaluated when its supervision is ablated.
    """
    b = final.shape[0]
    grid = config.encoder.grid
    if config.variant == "pimm_only":
        mask_emb = final.new_zeros((b, config.token_dim, grid, grid))
        iou = None
    else:
        if tokens is None:
            raise TrainError(f"variant {config.variant!r} needs prompt tokens")
        dense = torch.from_numpy(
            np.broadcast_to(
                bundle.frozen.no_mask[:, None, None], (config.token_dim, grid, grid)
            ).copy()
        ).to(final.dtype)
        pe = torch.from_numpy(grid_position_encoding(bundle.frozen, grid)).to(final.dtype)
        tokens_out, image_out = bundle.prompt_iou.two_way_attention(
            tokens.to(final.dtype), final + dense, pe
        )
        mask_emb = extract_mask_embeddings(image_out)
        iou = (
            bundle.prompt_iou.predict_iou(tokens_out)
            if config.variant in ("full", "no_mask_fusion")
            else None
        )
    logits = bundle.mask_decoder(list(taps), final, mask_emb)
    return logits, iou


def _embedding_batch(
    embs: ImageEmbeddingSet, repeats: int
) -> tuple[list[torch.Tensor], torch.Tensor]:
    taps = [
        torch.from_numpy(t).unsqueeze(0).repeat(repeats, 1, 1, 1) for t in embs.taps
    ]
    final = torch.from_numpy(embs.final).unsqueeze(0).repeat(repeats, 1, 1, 1)
    return taps, final


def predict_probabilities(
    bundle: ModelBundle,
    config: TrainConfig,
    emb: ImageEmbeddingSet,
    prompt_sets: Sequence[PromptSet],
) -> tuple[np.ndarray, np.ndarray | None]:
    """(P, H, W) per-prompt probability maps for one sample, without gradients.

    Also returns the per-prompt IoU predictions (None when the checkpoint's
    variant has no trained IoU head).
    """
    if config.variant == "pimm_only":
        prompt_sets = prompt_sets[:1]  # prediction cannot depend on prompts
    probs: list[np.ndarray] = []
    ious: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(prompt_sets), _PREDICT_CHUNK):
            chunk = prompt_sets[start:start + _PREDICT_CHUNK]
            taps, final = _embedding_batch(emb, len(chunk))
            tokens = None
            if config.variant != "pimm_only":
                tokens, _ = encode_prompt_instances(bundle.frozen, chunk, config.encoder.grid)
            logits, iou = run_decoder(bundle, config, taps, final, tokens)
            probs.append(torch.sigmoid(logits).cpu().numpy())
            if iou is not None:
                ious.append(iou.cpu().numpy())
    return np.concatenate(probs, axis=0), (np.concatenate(ious) if ious else None)


def single_point_instances(prompts: PromptSet) -> list[PromptSet]:
    """Split a points-mode prompt set into independent one-point prompts."""
    return [
        PromptSet(points=(pt,), boxes=(), mode=GRID_POINTS, image_size=prompts.image_size)
        for pt in prompts.points
    ]


def inference_prompts(config: TrainConfig, grid_n: int | None = None) -> list[PromptSet]:
    """Automatic prompt instances for the configured mode."""
    if config.mode == GRID_POINTS:
        n = config.eval_grid if grid_n is None else grid_n
        return single_point_instances(grid_points(n, config.image_size))
    return [whole_image_box(config.image_size)]


def _predict_binary_mean(
    bundle: ModelBundle, config: TrainConfig, emb: ImageEmbeddingSet
) -> np.ndarray:
    """Validation-time prediction: configured grid, mean-probability merge."""
    probs, _ = predict_probabilities(bundle, config, emb, inference_prompts(config))
    return (probs.mean(axis=0) > 0.5).astype(np.uint8)


class TrainResult(NamedTuple):
    initial: Checkpoint
    best: Checkpoint


def train(
    config: TrainConfig,
    plan: EvalPlan,
    cache: CacheIndex,
    manifest: DatasetManifest,
) -> TrainResult:
    """Optimize the decoder branches on one site's training split.

    Grid-points mode draws fresh labelled points each step, every point
    forming an independent prompt instance supervised toward the full
    ground-truth mask (plus the IoU regression). Whole-box mode supervises
    the mask only. Returns both the pre-training snapshot and the
    checkpoint of the best validation-dice epoch; deterministic per seed.
    """
    if cache.spec != config.encoder:
        raise TrainError(
            f"cache was built with {cache.spec}, config expects {config.encoder}"
        )
    needed = list(plan.train_ids) + list(plan.val_ids)
    missing = [sid for sid in needed if sid not in cache.entries]
    if missing:
        raise TrainError(f"cache is missing embeddings for {missing}")

    masks = {sid: load_mask(manifest.record(sid), config.image_size) for sid in needed}
    embs = {sid: load_embeddings(cache, sid) for sid in needed}
    cache_hash = cache_file_hash(cache.cache_path)

    bundle = build_models(config)
    apply_variant(bundle, config.variant)
    initial = make_checkpoint(
        bundle, config, epoch=-1, source_site=plan.source_site, cache_sha256=cache_hash
    )

    optimizer = torch.optim.Adam(bundle.trainable_parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed & 0xFFFFFFFF, 0xA11]))
    train_ids = list(plan.train_ids)
    steps_per_epoch = ceil(len(train_ids) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    component_history: dict[str, list[float]] = {}
    val_history: list[float] = []
    best_val, best_epoch, best_tensors = -1.0, -1, None
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_ids))
        epoch_parts: dict[str, list[float]] = {}
        for b0 in range(0, len(train_ids), config.batch_size):
            batch_ids = [train_ids[i] for i in order[b0:b0 + config.batch_size]]
            lr = lr_schedule(step, config, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            total, parts = _train_step(bundle, config, batch_ids, masks, embs, rng)
            if not isfinite(parts["total"]):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (epoch {epoch}): {parts}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            for key, value in parts.items():
                epoch_parts.setdefault(key, []).append(value)
            step += 1
        for key, values in epoch_parts.items():
            component_history.setdefault(key, []).append(float(np.mean(values)))
        val_dice = _validate(bundle, config, plan.val_ids, masks, embs)
        val_history.append(val_dice)
        if val_dice > best_val:
            best_val, best_epoch = val_dice, epoch
            best_tensors = bundle_tensors(bundle)

    assert best_tensors is not None
    best = make_checkpoint(
        bundle,
        config,
        epoch=best_epoch,
        source_site=plan.source_site,
        cache_sha256=cache_file_hash(cache.cache_path),
        val_dice_history=val_history,
        loss_history={k: tuple(v) for k, v in component_history.items()},
        tensors=best_tensors,
    )
    return TrainResult(initial=initial, best=best)


def _validate(bundle, config, val_ids, masks, embs) -> float:
    scores = []
    for sid in val_ids:
        pred = _predict_binary_mean(bundle, config, embs[sid])
        scores.append(dice_score(pred, masks[sid]))
    return float(np.mean(scores))


def _training_instances(
    config: TrainConfig,
    batch_ids: list[str],
    masks: dict[str, np.ndarray],
    rng: np.random.Generator,
) -> tuple[list[PromptSet] | None, list[str]]:
    """Prompt instances and their owning sample ids for one step."""
    if config.variant == "pimm_only":
        return None, list(batch_ids)
    owners: list[str] = []
    instances: list[PromptSet] = []
    for sid in batch_ids:
        if config.mode == WHOLE_BOX:
            instances.append(whole_image_box(config.image_size))
            owners.append(sid)
            continue
        mask = masks[sid]
        n_fg = int(mask.sum())
        n_pos = config.n_pos if n_fg > 0 else 0
        n_neg = config.n_neg if n_fg < mask.size else 0
        sampled = sample_training_points(mask, n_pos, n_neg, rng)
        for instance in single_point_instances(sampled):
            instances.append(instance)
            owners.append(sid)
    return instances, owners


def _train_step(
    bundle: ModelBundle,
    config: TrainConfig,
    batch_ids: list[str],
    masks: dict[str, np.ndarray],
    embs: dict[str, ImageEmbeddingSet],
    rng: np.random.Generator,
) -> tuple[torch.Tensor, dict[str, float]]:
    instances, owners = _training_instances(config, batch_ids, masks, rng)
    taps = [
        torch.stack([torch.from_numpy(embs[sid].taps[k]) for sid in owners])
        for k in range(len(config.encoder.tap_layers))
    ]
    final = torch.stack([torch.from_numpy(embs[sid].final) for sid in owners])
    tokens = None
    if instances is not None:
        tokens, _ = encode_prompt_instances(bundle.frozen, instances, config.encoder.grid)
    gt_np = np.stack([masks[sid] for sid in owners])
    gt = torch.from_numpy(gt_np.astype(np.float32))

    logits, iou_pred = run_decoder(bundle, config, taps, final, tokens)
    dice = dice_loss(logits, gt)
    ce = ce_loss(logits, gt)
    parts = {"dice": float(dice.detach()), "ce": float(ce.detach())}
    w = config.weights
    use_mse = (
        config.mode == GRID_POINTS
        and config.variant in ("full", "no_mask_fusion")
        and iou_pred is not None
    )
    if use_mse:
        with torch.no_grad():
            pred_bin = (logits > 0).cpu().numpy()
        targets = torch.tensor(
            [iou_target(pred_bin[i], gt_np[i]) for i in range(len(owners))],
            dtype=logits.dtype,
        )
        mse = mse_loss(iou_pred, targets)
        total = w.lambda1 * dice + w.lambda2 * ce + w.lambda3 * mse
        parts["mse"] = float(mse.detach())
    elif config.mode == GRID_POINTS:
        total = w.lambda1 * dice + w.lambda2 * ce
    else:
        total = dice + ce
    parts["total"] = float(total.detach())
    return total, parts
