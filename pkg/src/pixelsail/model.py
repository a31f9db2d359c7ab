"""Joint vision+text token sequence and the decoder-only transformer.

The sequence layout is [<bos>] [vision block] [turn 1 Q] [turn 1 A] <eos>
[turn 2 Q] ... Vision tokens attend bidirectionally among themselves (when
enabled); everything else is causal. Blocks are pre-norm: RMS norm ->
multi-head attention -> RMS norm -> 2-layer GELU MLP, residual around each.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .errors import ConfigError, ShapeError
from .tokenizer import Tokenizer

ROLE_VISION = 0
ROLE_TEXT = 1
ROLE_SEG = 2
ROLE_PROMPT_REF = 3

ATTN_NEG = np.float32(-1e9)


@dataclass
class ModelConfig:
    image_h: int = 64
    image_w: int = 64
    patch: int = 8  # equals the feature stride
    channels: int = 64
    layers: int = 2
    heads: int = 4
    vocab_size: int = 512
    max_seq_len: int = 512
    n_visual_prompts: int = 8
    mlp_ratio: int = 4
    vision_full_attention: bool = True
    m2f_channels: int = 16
    sam2_channels: int = 12

    def validate(self) -> None:
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}"
            )
        p = self.patch
        if p < 8 or p & (p - 1):
            raise ConfigError(f"patch/stride must be a power of two >= 8, got {p}")
        if self.max_seq_len < self.n_vision_tokens + 2:
            raise ConfigError("max_seq_len leaves no budget for text after the vision block")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch

    @property
    def n_vision_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def n_upsample_blocks(self) -> int:
        return int(math.log2(self.patch // 4))


@dataclass
class TokenSequence:
    """Interleaved vision/text sequence with per-position role tags."""

    ids: np.ndarray  # intp [T]
    roles: np.ndarray  # uint8 [T]
    vision_span: tuple[int, int]
    loss_mask: np.ndarray  # bool [T]; True on answer tokens
    embeddings: Tensor | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def seg_positions(self) -> np.ndarray:
        return np.where(self.roles == ROLE_SEG)[0]

    def validate(self, tok: Tokenizer) -> None:
        vs, ve = self.vision_span
        if not (0 <= vs <= ve <= len(self.ids)):
            raise ShapeError(f"vision span {self.vision_span} outside sequence of {len(self.ids)}")
        if np.any(self.roles[vs:ve] != ROLE_VISION) or np.any(
            np.delete(self.roles, np.arange(vs, ve)) == ROLE_VISION
        ):
            raise ShapeError("vision role tags must cover exactly the vision span")
        seg = self.seg_positions()
        if np.any(self.ids[seg] != tok.seg_id):
            raise ShapeError("a seg-slot position does not hold the [SEG] id")


def assemble_sequence(
    tok: Tokenizer,
    cfg: ModelConfig,
    turns: list[tuple[list[int], list[int]]],
    include_answers: bool = True,
) -> TokenSequence:
    """Build the training sequence for a conversation.

    turns: (question ids, answer ids) per round. With include_answers=False the
    final turn's answer is omitted (generation prefix); earlier turns keep
    their ground-truth answers as context.
    """
    ids: list[int] = [tok.bos_id] + [tok.img_id] * cfg.n_vision_tokens
    roles: list[int] = [ROLE_TEXT] + [ROLE_VISION] * cfg.n_vision_tokens
    loss: list[bool] = [False] * len(ids)
    vision_span = (1, 1 + cfg.n_vision_tokens)

    def _role(i: int, in_answer: bool) -> int:
        # [SEG] is a seg-slot only inside answers; a literal [SEG] in a
        # question is plain text and owns no ground-truth mask
        if i == tok.seg_id and in_answer:
            return ROLE_SEG
        return ROLE_PROMPT_REF if tok.vp_index(i) is not None else ROLE_TEXT

    for t, (q_ids, a_ids) in enumerate(turns):
        ids += q_ids
        roles += [_role(i, False) for i in q_ids]
        loss += [False] * len(q_ids)
        if not include_answers and t == len(turns) - 1:
            break
        ids += a_ids + [tok.eos_id]
        roles += [_role(i, True) for i in a_ids] + [ROLE_TEXT]
        loss += [True] * (len(a_ids) + 1)

    return TokenSequence(
        ids=np.asarray(ids, dtype=np.intp),
        roles=np.asarray(roles, dtype=np.uint8),
        vision_span=vision_span,
        loss_mask=np.asarray(loss, dtype=bool),
    )


def build_attention_mask(seq: TokenSequence, vision_full_attention: bool = True) -> np.ndarray:
    """allowed[i, j]: j <= i, or i and j both inside the vision block."""
    n = len(seq.ids)
    idx = np.arange(n)
    allowed = idx[None, :] <= idx[:, None]
    if vision_full_attention:
        vs, ve = seq.vision_span
        inside = (idx >= vs) & (idx < ve)
        allowed |= inside[:, None] & inside[None, :]
    return allowed


def attention_bias(mask: np.ndarray) -> Tensor:
    return Tensor(np.where(mask, np.float32(0.0), ATTN_NEG))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Parameter store in checkpoint order. All trainable, float32."""

    def normal(shape, std=0.02):
        return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    c = cfg.channels
    p: dict[str, Tensor] = {}
    p["tok_emb"] = normal((cfg.vocab_size, c))
    p["pos_emb"] = normal((cfg.max_seq_len, c))
    p["patch_proj"] = normal((3 * cfg.patch * cfg.patch, c))
    for i in range(cfg.layers):
        p[f"blk{i}.attn_norm"] = ones((c,))
        p[f"blk{i}.wq"] = normal((c, c))
        p[f"blk{i}.wk"] = normal((c, c))
        p[f"blk{i}.wv"] = normal((c, c))
        p[f"blk{i}.wo"] = normal((c, c))
        p[f"blk{i}.mlp_norm"] = ones((c,))
        p[f"blk{i}.w1"] = normal((c, cfg.mlp_ratio * c))
        p[f"blk{i}.w2"] = normal((cfg.mlp_ratio * c, c))
    p["lm_head"] = normal((c, cfg.vocab_size))
    for b in range(cfg.n_upsample_blocks):
        p[f"up{b}.convt_w"] = normal((c, c, 2, 2), std=0.05)
        p[f"up{b}.convt_b"] = zeros((c,))
        delta = np.zeros((c, 3, 3), dtype=np.float32)
        delta[:, 1, 1] = 1.0  # start as identity so features pass through
        p[f"up{b}.dw_w"] = Tensor(
            delta + rng.normal(0.0, 0.02, size=(c, 3, 3)).astype(np.float32), requires_grad=True
        )
        p[f"up{b}.dw_b"] = zeros((c,))
    p["align_m2f_w"] = normal((c, cfg.m2f_channels), std=0.05)
    p["align_m2f_b"] = zeros((cfg.m2f_channels,))
    p["align_sam2_w"] = normal((c, cfg.sam2_channels), std=0.05)
    p["align_sam2_b"] = zeros((cfg.sam2_channels,))
    return p


def patchify_project(image: np.ndarray, proj: Tensor, patch: int) -> Tensor:
    """image (3,H,W) float32 -> (HW/P^2, C) vision tokens in raster order.

    Patches are flattened row-major as (channel, dy, dx) blocks before the
    linear projection.
    """
    c, h, w = image.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    blocks = image.reshape(c, gh, patch, gw, patch)
    flat = blocks.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)
    return ad.matmul(Tensor(np.ascontiguousarray(flat)), proj)


@dataclass
class ForwardResult:
    hidden: Tensor  # [T, C]
    logits: Tensor  # [T, vocab]
    vision_hidden: Tensor  # [n_vision, C]
    seg_hidden: Tensor | None  # [K, C]
    seg_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))


def embed_sequence(params: dict[str, Tensor], cfg: ModelConfig, seq: TokenSequence,
                   vision_tokens: Tensor | None) -> Tensor:
    """Assemble input embeddings: token table rows, the vision block spliced
    in, plus learned absolute position rows."""
    vs, ve = seq.vision_span
    n = len(seq.ids)
    if vision_tokens is None:
        emb = ad.embedding(params["tok_emb"], seq.ids)
    else:
        if vision_tokens.shape != (ve - vs, cfg.channels):
            raise ShapeError(
                f"vision block {vision_tokens.shape} vs span of {ve - vs} and C={cfg.channels}"
            )
        parts = []
        if vs > 0:
            parts.append(ad.embedding(params["tok_emb"], seq.ids[:vs]))
        parts.append(vision_tokens)
        if ve < n:
            parts.append(ad.embedding(params["tok_emb"], seq.ids[ve:]))
        emb = ad.concat0(parts)
    return ad.add(emb, ad.embedding(params["pos_emb"], np.arange(n, dtype=np.intp)))


def forward(params: dict[str, Tensor], cfg: ModelConfig, seq: TokenSequence) -> ForwardResult:
    """Run the transformer over an assembled sequence. seq.embeddings must be set."""
    if seq.embeddings is None:
        raise ShapeError("sequence embeddings not assembled")
    n = len(seq.ids)
    if n > cfg.max_seq_len:
        raise ShapeError(f"sequence of {n} exceeds max_seq_len {cfg.max_seq_len}; truncate upstream")

    bias = attention_bias(build_attention_mask(seq, cfg.vision_full_attention))
    d = cfg.channels // cfg.heads
    scale = 1.0 / math.sqrt(d)

    x = seq.embeddings
    for i in range(cfg.layers):
        xn = ad.rmsnorm(x, params[f"blk{i}.attn_norm"])
        q = ad.matmul(xn, params[f"blk{i}.wq"])
        k = ad.matmul(xn, params[f"blk{i}.wk"])
        v = ad.matmul(xn, params[f"blk{i}.wv"])
        heads = []
        for h in range(cfg.heads):
            qh = ad.slice_cols(q, h * d, (h + 1) * d)
            kh = ad.slice_cols(k, h * d, (h + 1) * d)
            vh = ad.slice_cols(v, h * d, (h + 1) * d)
            scores = ad.add(ad.mul(ad.matmul(qh, ad.transpose2(kh)), scale), bias)
            heads.append(ad.matmul(ad.softmax(scores), vh))
        x = ad.add(x, ad.matmul(ad.concat1(heads), params[f"blk{i}.wo"]))
        xn2 = ad.rmsnorm(x, params[f"blk{i}.mlp_norm"])
        hmid = ad.gelu(ad.matmul(xn2, params[f"blk{i}.w1"]))
        x = ad.add(x, ad.matmul(hmid, params[f"blk{i}.w2"]))

    logits = ad.matmul(x, params["lm_head"])
    vs, ve = seq.vision_span
    vision_hidden = ad.gather_rows(x, np.arange(vs, ve, dtype=np.intp))
    seg_pos = seq.seg_positions()
    seg_hidden = ad.gather_rows(x, seg_pos) if seg_pos.size else None
    return ForwardResult(x, logits, vision_hidden, seg_hidden, seg_pos)


def generate(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    tok: Tokenizer,
    prefix: TokenSequence,
    vision_tokens: Tensor | None,
    max_new: int,
    force_seg: bool = False,
) -> TokenSequence:
    """Greedy decoding until <eos> or max_new tokens; optionally force one
    [SEG] at the end if none was emitted."""
    ids = list(prefix.ids)
    roles = list(prefix.roles)
    seq = prefix
    emitted: list[int] = []

    def _extend(token_id: int) -> TokenSequence:
        role = ROLE_SEG if token_id == tok.seg_id else (
            ROLE_PROMPT_REF if tok.vp_index(token_id) is not None else ROLE_TEXT
        )
        ids.append(token_id)
        roles.append(role)
        return TokenSequence(
            ids=np.asarray(ids, dtype=np.intp),
            roles=np.asarray(roles, dtype=np.uint8),
            vision_span=prefix.vision_span,
            loss_mask=np.zeros(len(ids), dtype=bool),
        )

    for _ in range(max_new):
        if len(ids) >= cfg.max_seq_len:
            break
        seq.embeddings = embed_sequence(params, cfg, seq, vision_tokens)
        out = forward(params, cfg, seq)
        nxt = int(np.argmax(out.logits.data[-1]))
        if nxt == tok.eos_id:
            break
        seq = _extend(nxt)
        emitted.append(nxt)

    if force_seg and tok.seg_id not in emitted and len(ids) < cfg.max_seq_len:
        seq = _extend(tok.seg_id)
    seq.embeddings = None
    return seq
