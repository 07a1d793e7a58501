"""Prompt-conditioned two-way attention with an IoU regression head.

This decoder branch runs prompt tokens and the image embedding through
pre-norm two-way attention blocks (token self-attention, token-to-image
cross-attention, feed-forward, image-to-token cross-attention) and predicts
a single mask-quality score from a dedicated query token. There is
deliberately no mask prediction head here: the image-path output is handed
over as mask embeddings and masks are generated elsewhere, so poor prompts
cannot steer the mask directly.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

DEFAULT_TOKEN_DIM = 256
DEFAULT_LAYERS = 2
DEFAULT_HEADS = 8


class TwoWayAttentionBlock(nn.Module):
    """One pre-norm block updating both token and image streams.

    With every attention/FFN weight zeroed the residual paths pass both
    streams through unchanged.
    """

    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_t2i = nn.LayerNorm(dim)
        self.cross_t2i = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim)
        )
        self.norm_i2t = nn.LayerNorm(dim)
        self.cross_i2t = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, tokens: Tensor, image: Tensor, image_pe: Tensor) -> tuple[Tensor, Tensor]:
        q = self.norm_self(tokens)
        tokens = tokens + self.self_attn(q, q, q, need_weights=False)[0]
        q = self.norm_t2i(tokens)
        tokens = tokens + self.cross_t2i(q, image + image_pe, image, need_weights=False)[0]
        tokens = tokens + self.ffn(self.norm_ffn(tokens))
        kv = self.norm_i2t(tokens)
        image = image + self.cross_i2t(image + image_pe, kv, kv, need_weights=False)[0]
        return tokens, image


class PromptIoUModule(nn.Module):
    """Two-way transformer over prompt tokens plus an IoU head.

    A learned query token is prepended to the prompt tokens; after the
    attention stack its output feeds a 3-layer MLP that regresses the
    predicted mask's IoU against ground truth.
    """

    def __init__(
        self,
        token_dim: int = DEFAULT_TOKEN_DIM,
        n_layers: int = DEFAULT_LAYERS,
        n_heads: int = DEFAULT_HEADS,
    ) -> None:
        super().__init__()
        if token_dim % n_heads != 0:
            raise ValueError(f"token_dim {token_dim} not divisible by n_heads {n_heads}")
        self.token_dim = token_dim
        self.iou_token = nn.Parameter(torch.randn(token_dim) * 0.1)
        self.blocks = nn.ModuleList(
            TwoWayAttentionBlock(token_dim, n_heads) for _ in range(n_layers)
        )
        self.iou_head = nn.Sequential(
            nn.Linear(token_dim, token_dim),
            nn.ReLU(),
            nn.Linear(token_dim, token_dim),
            nn.ReLU(),
            nn.Linear(token_dim, 1),
        )

    def two_way_attention(
        self, prompt_tokens: Tensor, image_emb: Tensor, image_pe: Tensor
    ) -> tuple[Tensor, Tensor]:
        """Run the attention stack.

        Args:
            prompt_tokens: (B, T, D) encoded prompts.
            image_emb: (B, D, g, g) image embedding (dense prompt already added).
            image_pe: (D, g, g) positional encoding of the embedding grid.

        Returns:
            tokens_out (B, 1 + T, D) with the IoU query at index 0, and
            image_out (B, D, g, g).
        """
        b, d, gh, gw = image_emb.shape
        if d != self.token_dim or prompt_tokens.shape[-1] != self.token_dim:
            raise ValueError(
                f"channel mismatch: image {d}, tokens {prompt_tokens.shape[-1]}, "
                f"expected {self.token_dim}"
            )
        tokens = torch.cat(
            [self.iou_token.to(prompt_tokens.dtype).expand(b, 1, d), prompt_tokens], dim=1
        )
        image = image_emb.flatten(2).transpose(1, 2)  # (B, g*g, D)
        pe = image_pe.to(image.dtype).flatten(1).transpose(0, 1).unsqueeze(0)
        for block in self.blocks:
            tokens, image = block(tokens, image, pe)
        image_out = image.transpose(1, 2).reshape(b, d, gh, gw)
        return tokens, image_out

    def predict_iou(self, tokens_out: Tensor) -> Tensor:
        """Scalar IoU prediction per prompt instance from the query token."""
        if tokens_out.shape[-1] != self.token_dim:
            raise ValueError(f"token dim {tokens_out.shape[-1]} != {self.token_dim}")
        return self.iou_head(tokens_out[:, 0, :]).squeeze(-1)

    def forward(
        self, prompt_tokens: Tensor, image_emb: Tensor, image_pe: Tensor
    ) -> tuple[Tensor, Tensor, Tensor]:
        tokens_out, image_out = self.two_way_attention(prompt_tokens, image_emb, image_pe)
        return extract_mask_embeddings(image_out), self.predict_iou(tokens_out), tokens_out


def extract_mask_embeddings(image_out: Tensor) -> Tensor:
    """Hand the transformer's image-path output to the mask decoder.

    Pure pass-through with no weights of its own; it exists so the tap
    point between the two decoder branches is explicit.
    """
    return image_out
