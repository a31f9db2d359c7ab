"""End-to-end glue: a Model bundles config, tokenizer, and parameters, and
exposes the training loss components and the evaluation respond() contract
used by the benchmark harness."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import grounding, losses, model as backbone, ppm
from .autodiff import Tensor
from .data import SampleRecord, truncate
from .errors import DataError
from .losses import LossWeights, TeacherFeatures
from .model import ModelConfig, TokenSequence
from .tokenizer import Tokenizer

F32 = np.float32

ZERO = lambda: Tensor(np.asarray(0.0, dtype=F32))  # noqa: E731


def image_to_float(image: np.ndarray) -> np.ndarray:
    """uint8 (3,H,W) -> float32 in [-1, 1]."""
    return (image.astype(F32) / 127.5 - 1.0).astype(F32)


def teacher_seed_for(record_id: str) -> int:
    """Stable per-record seed for synthetic teachers (crc32 of the id)."""
    return zlib.crc32(record_id.encode("utf-8")) & 0x7FFFFFFF


@dataclass
class LossParts:
    ntp: Tensor
    ce: Tensor
    dice: Tensor
    distill: Tensor
    n_seg: int


class Model:
    def __init__(self, cfg: ModelConfig, tok: Tokenizer, params: dict[str, Tensor]):
        self.cfg = cfg
        self.tok = tok
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "Model":
        cfg.validate()
        tok = Tokenizer(cfg.vocab_size, cfg.n_visual_prompts)
        rng = np.random.default_rng(np.random.PCG64(seed))
        return cls(cfg, tok, backbone.init_params(cfg, rng))

    # ------------------------------------------------------------------
    # assembly
    # ------------------------------------------------------------------

    def record_image(self, rec: SampleRecord) -> np.ndarray:
        if isinstance(rec.image, str):
            return ppm.read_ppm(rec.image)
        return rec.image

    def vision_tokens(self, image_u8: np.ndarray, prompts) -> Tensor:
        tokens = backbone.patchify_project(
            image_to_float(image_u8), self.params["patch_proj"], self.cfg.patch
        )
        return grounding.inject_visual_prompts(tokens, list(prompts), self.params["tok_emb"], self.tok)

    def encode_turns(self, rec: SampleRecord) -> list[tuple[list[int], list[int]]]:
        return [(self.tok.encode(q), self.tok.encode(a)) for q, a in rec.conversations]

    def training_sequence(self, rec: SampleRecord) -> TokenSequence:
        seq = backbone.assemble_sequence(self.tok, self.cfg, self.encode_turns(rec))
        return truncate(seq, self.cfg.max_seq_len)

    # ------------------------------------------------------------------
    # training losses
    # ------------------------------------------------------------------

    def grounding_features(self, vision_hidden: Tensor) -> tuple[Tensor, Tensor]:
        """(low-resolution map, upsampled map) from the vision hidden rows."""
        f_l = grounding.reshape_vision_hidden(vision_hidden, self.cfg.grid_h, self.cfg.grid_w)
        f_h = grounding.upsample_module(f_l, self.params, self.cfg)
        return f_l, f_h

    def loss_parts(
        self,
        rec: SampleRecord,
        distill_on: bool = False,
        teacher: TeacherFeatures | None = None,
    ) -> LossParts:
        """Forward one record and return the unweighted loss components."""
        image = self.record_image(rec)
        seq = self.training_sequence(rec)
        seq.embeddings = backbone.embed_sequence(
            self.params, self.cfg, seq, self.vision_tokens(image, rec.visual_prompts)
        )
        out = backbone.forward(self.params, self.cfg, seq)
        l_ntp = losses.ntp_loss(out.logits, seq.ids, seq.loss_mask)

        n_seg = len(out.seg_positions)
        need_features = distill_on or n_seg > 0
        f_l = f_h = None
        if need_features:
            f_l, f_h = self.grounding_features(out.vision_hidden)

        if n_seg > 0:
            if n_seg > len(rec.gt_masks):
                raise DataError(f"record {rec.id}: more [SEG] slots than ground-truth masks")
            mask_logits = grounding.predict_masks(out.seg_hidden, f_h, out.seg_positions)
            up = ad.bilinear_resize(mask_logits.logits, self.cfg.image_h, self.cfg.image_w)
            gt = np.stack(rec.gt_masks[:n_seg]).astype(F32)
            l_ce, l_dice = losses.seg_loss_terms(up, gt)
        else:
            l_ce, l_dice = ZERO(), ZERO()

        if distill_on:
            if teacher is None:
                teacher = losses.make_teacher_features(
                    image_to_float(image), self.cfg, teacher_seed_for(rec.id)
                )
            l_distill = losses.distill_loss(f_h, f_l, teacher, self.params)
        else:
            l_distill = ZERO()

        return LossParts(ntp=l_ntp, ce=l_ce, dice=l_dice, distill=l_distill, n_seg=n_seg)

    def total_loss(self, parts: LossParts, w: LossWeights) -> Tensor:
        seg = ad.add(ad.mul(parts.ce, w.lam), ad.mul(parts.dice, w.beta))
        return losses.total_loss(parts.ntp, seg, parts.distill, w)

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def generate_turn(
        self,
        rec: SampleRecord,
        turn_index: int,
        force_seg: bool,
        max_new: int = 24,
    ) -> tuple[str, np.ndarray]:
        """Greedy answer for one turn (earlier turns teacher-forced as
        context). Returns (text, masks [K,H,W] uint8) for the generated
        [SEG] slots."""
        image = self.record_image(rec)
        turns = self.encode_turns(rec)[: turn_index + 1]
        prefix = backbone.assemble_sequence(self.tok, self.cfg, turns, include_answers=False)
        prefix = truncate(prefix, self.cfg.max_seq_len - max_new - 1)
        vision = self.vision_tokens(image, rec.visual_prompts)
        gen = backbone.generate(
            self.params, self.cfg, self.tok, prefix, vision, max_new, force_seg=force_seg
        )
        new_ids = [i for i in gen.ids[len(prefix.ids):] if i != self.tok.eos_id]
        text = self.tok.decode(new_ids)

        gen_seg = gen.seg_positions()
        gen_seg = gen_seg[gen_seg >= len(prefix.ids)]
        if gen_seg.size == 0:
            return text, np.zeros((0, self.cfg.image_h, self.cfg.image_w), dtype=np.uint8)
        gen.embeddings = backbone.embed_sequence(self.params, self.cfg, gen, vision)
        out = backbone.forward(self.params, self.cfg, gen)
        _, f_h = self.grounding_features(out.vision_hidden)
        keep = np.isin(out.seg_positions, gen_seg)
        seg_hidden = ad.gather_rows(out.seg_hidden, np.where(keep)[0])
        mask_logits = grounding.predict_masks(seg_hidden, f_h, out.seg_positions[keep])
        masks = grounding.binarize_masks(mask_logits, self.cfg.image_h, self.cfg.image_w)
        return text, masks

    def respond(self, rec: SampleRecord, force_seg: bool, max_new: int = 24):
        """Benchmark contract: one (text, masks) per conversation turn."""
        return [
            self.generate_turn(rec, t, force_seg, max_new)
            for t in range(len(rec.conversations))
        ]
