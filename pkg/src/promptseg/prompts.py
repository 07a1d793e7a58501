"""Prompt generation and frozen prompt encoding.

Prompts come in two fully automatic flavours: an n-by-n lattice of positive
points (plus randomly sampled labelled points at training time) and a single
box covering the whole image. Prompt encoding is a fixed seeded
random-Fourier positional map plus per-label offset vectors; nothing in here
is ever trained, so the encoding is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POSITIVE = "positive"
NEGATIVE = "negative"
GRID_POINTS = "grid_points"
WHOLE_BOX = "whole_box"

Point = tuple[float, float, str]
Box = tuple[float, float, float, float]


class PromptError(ValueError):
    """Prompt set violating its mode or bounds invariants."""


@dataclass(frozen=True)
class PromptSet:
    points: tuple[Point, ...]
    boxes: tuple[Box, ...]
    mode: str
    image_size: int

    def __post_init__(self) -> None:
        s = float(self.image_size)
        if self.image_size < 1:
            raise PromptError(f"image_size must be >= 1, got {self.image_size}")
        if self.mode == GRID_POINTS:
            if not self.points or self.boxes:
                raise PromptError("grid_points mode requires >= 1 point and no boxes")
        elif self.mode == WHOLE_BOX:
            if self.points or len(self.boxes) != 1:
                raise PromptError("whole_box mode requires exactly 1 box and no points")
        else:
            raise PromptError(f"unknown prompt mode {self.mode!r}")
        for x, y, label in self.points:
            if label not in (POSITIVE, NEGATIVE):
                raise PromptError(f"unknown point label {label!r}")
            if not (0.0 <= x <= s and 0.0 <= y <= s):
                raise PromptError(f"point ({x}, {y}) outside image of size {self.image_size}")
        for x0, y0, x1, y1 in self.boxes:
            if not (x0 < x1 and y0 < y1):
                raise PromptError(f"degenerate box ({x0}, {y0}, {x1}, {y1})")
            if min(x0, y0) < 0.0 or max(x1, y1) > s:
                raise PromptError(f"box ({x0}, {y0}, {x1}, {y1}) outside image of size {self.image_size}")


def grid_points(n_per_side: int, image_size: int) -> PromptSet:
    """n x n lattice of positive points at centered offsets ((i + 0.5) / n) * size."""
    if n_per_side < 1:
        raise PromptError(f"n_per_side must be >= 1, got {n_per_side}")
    coords = (np.arange(n_per_side) + 0.5) / n_per_side * image_size
    pts = tuple((float(x), float(y), POSITIVE) for y in coords for x in coords)
    return PromptSet(points=pts, boxes=(), mode=GRID_POINTS, image_size=image_size)


def whole_image_box(image_size: int) -> PromptSet:
    """A single box spanning the full image."""
    box = (0.0, 0.0, float(image_size), float(image_size))
    return PromptSet(points=(), boxes=(box,), mode=WHOLE_BOX, image_size=image_size)


def sample_training_points(
    mask: np.ndarray,
    n_pos: int,
    n_neg: int,
    rng: np.random.Generator,
) -> PromptSet:
    """Sample labelled points inside and outside the ground-truth mask.

    Positive points land on mask==1 pixels, negative points on mask==0
    pixels (pixel centers). Defaults upstream keep n_pos == n_neg, the
    1:1 ratio used during training.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise PromptError(f"mask must be 2D, got shape {mask.shape}")
    h, w = mask.shape
    fg = np.flatnonzero(mask)
    bg = np.flatnonzero(mask == 0)
    if n_pos > 0 and fg.size == 0:
        raise PromptError("cannot sample positive points from an empty mask")
    if n_neg > 0 and bg.size == 0:
        raise PromptError("cannot sample negative points from a full mask")
    points: list[Point] = []
    for region, count, label in ((fg, n_pos, POSITIVE), (bg, n_neg, NEGATIVE)):
        if count <= 0:
            continue
        flat = region[rng.integers(0, region.size, size=count)]
        rows, cols = np.divmod(flat, w)
        points.extend((float(c) + 0.5, float(r) + 0.5, label) for r, c in zip(rows, cols))
    return PromptSet(points=tuple(points), boxes=(), mode=GRID_POINTS, image_size=max(h, w))


@dataclass(frozen=True)
class FrozenPromptParams:
    """Fixed random-Fourier positional encoding plus label/corner offsets.

    Built once from a seed and never updated; training runs audit that
    these arrays stay bit-identical from start to finish.
    """

    token_dim: int
    seed: int
    freq: np.ndarray = field(repr=False)         # (token_dim/2, 2)
    label_embed: dict = field(repr=False)        # label -> (token_dim,)
    corner_embed: np.ndarray = field(repr=False)  # (2, token_dim)
    no_mask: np.ndarray = field(repr=False)      # (token_dim,)

    @classmethod
    def create(cls, token_dim: int, seed: int) -> "FrozenPromptParams":
        if token_dim < 2 or token_dim % 2 != 0:
            raise ValueError(f"token_dim must be a positive even number, got {token_dim}")
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xF0E1]))
        return cls(
            token_dim=token_dim,
            seed=seed,
            freq=rng.standard_normal((token_dim // 2, 2)).astype(np.float32),
            label_embed={
                POSITIVE: rng.standard_normal(token_dim).astype(np.float32),
                NEGATIVE: rng.standard_normal(token_dim).astype(np.float32),
            },
            corner_embed=rng.standard_normal((2, token_dim)).astype(np.float32),
            no_mask=rng.standard_normal(token_dim).astype(np.float32),
        )

    def position_encoding(self, xy: np.ndarray) -> np.ndarray:
        """Map (..., 2) coordinates in [0, 1] to (..., token_dim) features."""
        phases = (2.0 * np.asarray(xy, dtype=np.float32) - 1.0) @ self.freq.T
        phases = 2.0 * np.pi * phases
        return np.concatenate([np.sin(phases), np.cos(phases)], axis=-1)

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Flat view used for checkpointing and freeze audits."""
        return {
            "freq": self.freq,
            "label_positive": self.label_embed[POSITIVE],
            "label_negative": self.label_embed[NEGATIVE],
            "corner0": self.corner_embed[0],
            "corner1": self.corner_embed[1],
            "no_mask": self.no_mask,
        }


@dataclass(frozen=True)
class PromptEmbeddings:
    tokens: np.ndarray           # (n_tokens, token_dim) float32
    dense_embedding: np.ndarray  # (token_dim, grid, grid) float32


def encode_prompts(prompts: PromptSet, params: FrozenPromptParams, grid: int) -> PromptEmbeddings:
    """Deterministically embed a prompt set.

    Points become positional encodings of their normalized coordinates plus
    the matching label vector; each box becomes two corner tokens. The dense
    embedding is the frozen no-prompt-mask default broadcast over the grid.
    """
    s = float(prompts.image_size)
    tokens: list[np.ndarray] = []
    for x, y, label in prompts.points:
        pe = params.position_encoding(np.array([x / s, y / s], dtype=np.float32))
        tokens.append(pe + params.label_embed[label])
    for x0, y0, x1, y1 in prompts.boxes:
        corners = np.array([[x0 / s, y0 / s], [x1 / s, y1 / s]], dtype=np.float32)
        pe = params.position_encoding(corners)
        tokens.append(pe[0] + params.corner_embed[0])
        tokens.append(pe[1] + params.corner_embed[1])
    dense = np.broadcast_to(
        params.no_mask[:, None, None], (params.token_dim, grid, grid)
    ).astype(np.float32)
    return PromptEmbeddings(
        tokens=np.stack(tokens).astype(np.float32),
        dense_embedding=dense,
    )


def grid_position_encoding(params: FrozenPromptParams, grid: int) -> np.ndarray:
    """(token_dim, grid, grid) positional encoding of cell centers."""
    centers = (np.arange(grid, dtype=np.float32) + 0.5) / grid
    xx, yy = np.meshgrid(centers, centers)
    pe = params.position_encoding(np.stack([xx, yy], axis=-1))
    return np.ascontiguousarray(pe.transpose(2, 0, 1))
