"""Prompt-invariant mask decoding from multi-scale frozen embeddings.

A classic encoder-decoder: the final image embedding forms the bottleneck,
which is fused (additively, after a learned 1x1 projection) with the mask
embeddings coming from the attention branch, then repeatedly refined by
squeeze-and-excitation residual blocks, upsampled, and merged with skip
connections from the intermediate tap embeddings until image resolution is
reached. A 1x1 head emits single-channel mask logits.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoder_cache import EncoderSpec

DEFAULT_STAGE_WIDTHS = (256, 128, 64, 32)


def _norm_groups(channels: int) -> int:
    # batch-size independent normalization; keeps a small group count
    g = 8
    while channels % g:
        g -= 1
    return g


class SqueezeExcite(nn.Module):
    """Channel gating by a sigmoid excitation of the pooled descriptor."""

    def __init__(self, channels: int, reduction: int = 16) -> None:
        super().__init__()
        hidden = max(1, channels // reduction)
        self.reduce = nn.Linear(channels, hidden)
        self.expand = nn.Linear(hidden, channels)

    def forward(self, x: Tensor) -> Tensor:
        gate = torch.sigmoid(self.expand(F.relu(self.reduce(x.mean(dim=(2, 3))))))
        return x * gate[:, :, None, None]


class SEResBlock(nn.Module):
    """Residual conv block with squeeze-and-excitation on the residual path.

    y = proj(x) + SE(conv2(relu(norm(conv1(x))))), spatial dims preserved;
    proj is a 1x1 convolution only when the channel count changes.
    """

    def __init__(self, c_in: int, c_out: int, reduction: int = 16) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(_norm_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.se = SqueezeExcite(c_out, reduction)
        self.proj = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(F.relu(self.norm(self.conv1(x))))
        return self.proj(x) + self.se(h)


class _Stage(nn.Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        out_size: int,
        tap_channels: int | None,
        blocks: int,
        reduction: int,
    ) -> None:
        super().__init__()
        layers = [SEResBlock(c_in, c_out, reduction)]
        layers += [SEResBlock(c_out, c_out, reduction) for _ in range(blocks - 1)]
        self.blocks = nn.Sequential(*layers)
        self.up_conv = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip_proj = None if tap_channels is None else nn.Conv2d(tap_channels, c_out, 1)
        self.out_size = out_size

    def forward(self, x: Tensor, tap: Tensor | None) -> Tensor:
        x = self.blocks(x)
        x = F.interpolate(x, size=(self.out_size, self.out_size), mode="bilinear", align_corners=False)
        x = self.up_conv(x)
        if self.skip_proj is not None:
            skip = F.interpolate(
                self.skip_proj(tap), size=(self.out_size, self.out_size),
                mode="bilinear", align_corners=False,
            )
            x = x + skip
        return x


class MaskDecoder(nn.Module):
    """Encoder-decoder from frozen embeddings (plus fused mask embeddings) to logits.

    Stage s doubles the spatial resolution (capped at the image size, which
    the last stage always reaches) and receives a skip connection from the
    tap embeddings in deepest-first order; the final stage has no skip.
    """

    def __init__(
        self,
        spec: EncoderSpec,
        token_dim: int,
        image_size: int,
        stage_widths: tuple[int, ...] = DEFAULT_STAGE_WIDTHS,
        blocks_per_stage: int = 2,
        se_reduction: int = 16,
    ) -> None:
        super().__init__()
        n_stages = len(spec.tap_layers) + 1
        if len(stage_widths) != n_stages:
            raise ValueError(
                f"need {n_stages} stage widths for {len(spec.tap_layers)} tap layers, "
                f"got {stage_widths}"
            )
        if any(w <= 0 for w in stage_widths) or any(
            nxt > cur for cur, nxt in zip(stage_widths, stage_widths[1:])
        ):
            raise ValueError(f"stage widths must be positive and non-increasing, got {stage_widths}")
        if blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        self.spec = spec
        self.image_size = image_size
        self.bottleneck_proj = nn.Conv2d(spec.final_channels, stage_widths[0], 1)
        # bias-free so zeroing the weight exactly disconnects the attention branch
        self.fuse_proj = nn.Conv2d(token_dim, stage_widths[0], 1, bias=False)
        stages = []
        c_prev, size = stage_widths[0], spec.grid
        n_taps = len(spec.tap_layers)
        for s, width in enumerate(stage_widths):
            size = image_size if s == n_stages - 1 else min(size * 2, image_size)
            stages.append(
                _Stage(
                    c_prev,
                    width,
                    out_size=size,
                    tap_channels=spec.tap_channels if s < n_taps else None,
                    blocks=blocks_per_stage,
                    reduction=se_reduction,
                )
            )
            c_prev = width
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(stage_widths[-1], 1, 1)

    def fuse_bottleneck(self, final_emb: Tensor, mask_emb: Tensor) -> Tensor:
        """bottleneck + 1x1-projected mask embeddings; gradients reach both branches."""
        if final_emb.shape[-2:] != mask_emb.shape[-2:]:
            raise ValueError(
                f"grid mismatch: bottleneck {tuple(final_emb.shape[-2:])} vs "
                f"mask embeddings {tuple(mask_emb.shape[-2:])}"
            )
        return self.bottleneck_proj(final_emb) + self.fuse_proj(mask_emb)

    def forward(self, taps: list[Tensor], final_emb: Tensor, mask_emb: Tensor) -> Tensor:
        """Decode (B, H, W) mask logits from embeddings.

        `taps` follows the encoder's tap order (shallow to deep); skips are
        consumed deepest-first.
        """
        if len(taps) != len(self.spec.tap_layers):
            raise ValueError(f"expected {len(self.spec.tap_layers)} taps, got {len(taps)}")
        x = self.fuse_bottleneck(final_emb, mask_emb)
        n_taps = len(taps)
        for s, stage in enumerate(self.stages):
            tap = taps[n_taps - 1 - s] if s < n_taps else None
            x = stage(x, tap)
        return self.head(x).squeeze(1)
