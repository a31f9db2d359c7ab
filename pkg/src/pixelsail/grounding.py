"""Pixel-grounding pieces around the transformer: visual prompt injection
before it, the learnable upsampler and mask decoding after it, and the
pooling-based object representation kept for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError
from .model import ModelConfig
from .tokenizer import Tokenizer

F32 = np.float32


@dataclass
class VisualPrompt:
    """A prompt index plus its binary mask at patch-grid resolution."""

    index: int
    mask: np.ndarray  # uint8 [grid_h, grid_w], entries 0/1

    def validate(self, grid_h: int, grid_w: int, n_prompts: int) -> None:
        if self.mask.shape != (grid_h, grid_w):
            raise DataError(
                f"prompt {self.index}: mask {self.mask.shape} != grid {(grid_h, grid_w)}"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"prompt {self.index}: mask entries must be 0/1")
        if not 1 <= self.index <= n_prompts:
            raise DataError(f"prompt index {self.index} outside [1, {n_prompts}]")


@dataclass
class MaskLogits:
    logits: Tensor  # [K, H/4, W/4]
    seg_token_positions: np.ndarray  # K sequence indices


def inject_visual_prompts(
    vision_tokens: Tensor,
    prompts: list[VisualPrompt],
    tok_emb: Tensor,
    tok: Tokenizer,
) -> Tensor:
    """Add each prompt token's text embedding onto every vision token its
    mask covers. Overlaps sum; prompts are applied in ascending index order
    so the result is bit-identical under any input ordering."""
    if not prompts:
        return vision_tokens
    n_patches = vision_tokens.shape[0]
    ordered = sorted(prompts, key=lambda p: p.index)
    seen = set()
    cols = []
    ids = []
    for p in ordered:
        if p.index in seen:
            raise DataError(f"duplicate visual prompt index {p.index}")
        seen.add(p.index)
        flat = p.mask.reshape(-1).astype(F32)
        if flat.shape[0] != n_patches:
            raise DataError(
                f"prompt {p.index}: mask has {flat.shape[0]} cells, expected {n_patches}"
            )
        if p.index > tok.n_visual_prompts:
            raise DataError(f"prompt index {p.index} exceeds the {tok.n_visual_prompts} reserved tokens")
        cols.append(flat)
        ids.append(tok.vp_id(p.index))
    coverage = Tensor(np.stack(cols, axis=1))  # [n_patches, n_prompts]
    rows = ad.embedding(tok_emb, np.asarray(ids, dtype=np.intp))  # [n_prompts, C]
    return ad.add(vision_tokens, ad.matmul(coverage, rows))


def reshape_vision_hidden(hidden_vision: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """[(H/S)(W/S), C] -> [C, H/S, W/S]; inverse of the raster flattening."""
    n, c = hidden_vision.shape
    if n != grid_h * grid_w:
        raise ShapeError(f"{n} vision tokens cannot fill a {grid_h}x{grid_w} grid")
    return ad.reshape(ad.transpose2(hidden_vision), (c, grid_h, grid_w))


def flatten_vision_grid(fmap: Tensor) -> Tensor:
    """[C, h, w] -> [h*w, C]; inverse of reshape_vision_hidden."""
    c, h, w = fmap.shape
    return ad.transpose2(ad.reshape(fmap, (c, h * w)))


def upsample_module(f_l: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Upscale [C, H/S, W/S] to [C, H/4, W/4] through log2(S/4) blocks of
    stride-2 transposed conv -> 3x3 depthwise conv -> GELU."""
    n_blocks = cfg.n_upsample_blocks
    x = f_l
    for b in range(n_blocks):
        x = ad.conv_transpose2d(x, params[f"up{b}.convt_w"], stride=2)
        x = ad.add_channel_bias(x, params[f"up{b}.convt_b"])
        x = ad.depthwise_conv2d(x, params[f"up{b}.dw_w"])
        x = ad.add_channel_bias(x, params[f"up{b}.dw_b"])
        x = ad.gelu(x)
    expect = (cfg.channels, cfg.image_h // 4, cfg.image_w // 4)
    if x.shape != expect:
        raise ShapeError(f"upsampler produced {x.shape}, expected {expect}")
    return x


def predict_masks(seg_hidden: Tensor, f_h: Tensor, seg_positions: np.ndarray) -> MaskLogits:
    """logits[k, y, x] = dot(seg_hidden[k], f_h[:, y, x]); no bias, no scaling."""
    c, h, w = f_h.shape
    if seg_hidden.shape[0] == 0:
        return MaskLogits(Tensor(np.zeros((0, h, w), dtype=F32)), seg_positions)
    if seg_hidden.shape[1] != c:
        raise ShapeError(f"seg hidden C={seg_hidden.shape[1]} vs feature C={c}")
    flat = ad.matmul(seg_hidden, ad.reshape(f_h, (c, h * w)))
    return MaskLogits(ad.reshape(flat, (seg_hidden.shape[0], h, w)), seg_positions)


def mask_pool(patch_embeddings: Tensor, prompts: list[VisualPrompt]) -> Tensor:
    """Mean of patch embeddings over each prompt's mask (plain-baseline path)."""
    n_patches = patch_embeddings.shape[0]
    rows = []
    for p in prompts:
        flat = p.mask.reshape(-1).astype(F32)
        area = flat.sum()
        if area == 0:
            raise DataError(f"visual prompt {p.index} has an empty mask; cannot pool")
        if flat.shape[0] != n_patches:
            raise DataError(f"prompt {p.index}: mask has {flat.shape[0]} cells, expected {n_patches}")
        rows.append(flat / area)
    weights = Tensor(np.stack(rows, axis=0))  # [M, n_patches]
    return ad.matmul(weights, patch_embeddings)


def binarize_masks(
    logits: MaskLogits, out_h: int | None = None, out_w: int | None = None
) -> np.ndarray:
    """Threshold in logit space: foreground iff logit > 0 (exact zero is
    background). Optionally bilinearly upsample the logits first."""
    t = logits.logits
    if out_h is not None:
        k = t.shape[0]
        if k == 0:
            return np.zeros((0, out_h, out_w), dtype=np.uint8)
        t = ad.bilinear_resize(t, out_h, out_w)
    return (t.data > 0).astype(np.uint8)
