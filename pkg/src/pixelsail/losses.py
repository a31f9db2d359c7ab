"""Training objectives: next-token prediction, the weighted mask loss
(pixel cross-entropy + dice), dense feature distillation against teacher
feature maps, and their aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

F32 = np.float32


@dataclass
class LossWeights:
    """alpha scales distillation, lam the mask cross-entropy, beta the dice term."""

    alpha: float = 0.5
    lam: float = 2.0
    beta: float = 0.5

    def validate(self) -> None:
        if min(self.alpha, self.lam, self.beta) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class TeacherFeatures:
    """Frozen distillation targets; channel/spatial dims may differ from the student."""

    m2f: np.ndarray  # [C_t1, h1, w1], target for the upsampled features
    sam2: np.ndarray  # [C_t2, h2, w2], target for the low-resolution features
    source: str = "synthetic"  # or "file"


def ntp_loss(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean cross-entropy of predicting each masked token from the previous
    position's logits; 0 when nothing is masked."""
    pos = np.where(np.asarray(loss_mask, dtype=bool))[0]
    pos = pos[pos > 0]  # position 0 has no predictor
    if pos.size == 0:
        return Tensor(np.asarray(0.0, dtype=F32))
    return ad.cross_entropy_rows(logits, pos - 1, np.asarray(targets)[pos])


def seg_loss_terms(mask_logits: Tensor, gt: np.ndarray) -> tuple[Tensor, Tensor]:
    """(pixel BCE mean, dice) on upsampled logits vs binary ground truth.

    dice = 1 - (2*sum(p*g) + 1) / (sum(p) + sum(g) + 1), summed over the
    whole [K,H,W] block, p = sigmoid(logit).
    """
    gt = np.asarray(gt, dtype=F32)
    if tuple(mask_logits.shape) != gt.shape:
        raise ShapeError(f"seg loss: logits {mask_logits.shape} vs ground truth {gt.shape}")
    ce = ad.bce_with_logits(mask_logits, gt)
    p = ad.sigmoid(mask_logits)
    num = ad.add(ad.mul(ad.sum_all(ad.mul(p, Tensor(gt))), 2.0), 1.0)
    den = ad.add(ad.add(ad.sum_all(p), float(gt.sum())), 1.0)
    dice = ad.sub(1.0, ad.div(num, den))
    return ce, dice


def seg_loss(mask_logits: Tensor, gt: np.ndarray, w: LossWeights) -> Tensor:
    """lam * BCE + beta * dice."""
    ce, dice = seg_loss_terms(mask_logits, gt)
    return ad.add(ad.mul(ce, w.lam), ad.mul(dice, w.beta))


def _align_and_mse(student: Tensor, teacher: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """Resize the teacher to the student grid, project student channels to
    the teacher's with the learnable linear map, MSE-mean."""
    c, h, wd = student.shape
    target = teacher
    if teacher.shape[1:] != (h, wd):
        target = kernels.bilinear_resize_fwd(np.ascontiguousarray(teacher, dtype=F32), h, wd)
    flat = ad.transpose2(ad.reshape(student, (c, h * wd)))  # [n, C]
    proj = ad.add(ad.matmul(flat, w), b)  # [n, C_t]
    diff = ad.sub(proj, Tensor(target.reshape(target.shape[0], h * wd).T))
    return ad.mean_all(ad.mul(diff, diff))


def distill_loss(
    student_f_h: Tensor,
    student_f_l: Tensor,
    teachers: TeacherFeatures,
    params: dict[str, Tensor],
) -> Tensor:
    """Sum of the two feature-matching MSEs (the alpha weight is applied in
    total_loss, not here)."""
    hi = _align_and_mse(student_f_h, teachers.m2f, params["align_m2f_w"], params["align_m2f_b"])
    lo = _align_and_mse(student_f_l, teachers.sam2, params["align_sam2_w"], params["align_sam2_b"])
    return ad.add(hi, lo)


def total_loss(l_ntp: Tensor, l_seg: Tensor, l_distill: Tensor, w: LossWeights) -> Tensor:
    """l_ntp + l_seg + alpha * l_distill; l_seg already folds lam and beta."""
    return ad.add(ad.add(l_ntp, l_seg), ad.mul(l_distill, w.alpha))


def synthesize_teacher(
    image: np.ndarray, kind: str, seed: int, grid_hw: tuple[int, int], channels: int
) -> np.ndarray:
    """Deterministic stand-in for real expert features: a seeded random
    linear filter bank over block-pooled pixels plus one edge-magnitude
    channel. Same (image, seed) -> bit-identical output."""
    if kind not in ("m2f-like", "sam2-like"):
        raise ConfigError(f"unknown teacher kind {kind!r}")
    c, h, w = image.shape
    gh, gw = grid_hw
    if h % gh or w % gw:
        raise ConfigError(f"teacher grid {grid_hw} must divide image {h}x{w}")
    pooled = image.reshape(c, gh, h // gh, gw, w // gw).mean(axis=(2, 4))
    rng = np.random.default_rng(np.random.PCG64(seed))
    bank = rng.normal(0.0, 1.0, size=(channels - 1, c)).astype(F32)
    feats = np.einsum("fc,cij->fij", bank, pooled.astype(F32))
    gray = pooled.mean(axis=0)
    gy, gx = np.gradient(gray)
    edge = np.sqrt(gx * gx + gy * gy)[None].astype(F32)
    return np.concatenate([feats, edge], axis=0)


def make_teacher_features(image: np.ndarray, cfg, seed: int) -> TeacherFeatures:
    """Both synthetic teacher maps for one image; grids chosen off the
    student lattices so the bilinear alignment path is exercised."""
    m2f = synthesize_teacher(
        image, "m2f-like", seed, (cfg.image_h // 2, cfg.image_w // 2), cfg.m2f_channels
    )
    sam2 = synthesize_teacher(
        image, "sam2-like", seed + 1, (cfg.image_h // 16, cfg.image_w // 16), cfg.sam2_channels
    )
    return TeacherFeatures(m2f=m2f, sam2=sam2, source="synthetic")
