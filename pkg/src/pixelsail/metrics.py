"""Segmentation and benchmark metrics, three-task scoring with the overall
score, and the PCA feature-image emitter."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import porter
from .errors import DataError, ShapeError

F32 = np.float32

SEG_TASKS = ("refseg", "panoptic-template", "vt-res")


def _pair_counts(preds, gts) -> list[tuple[int, int]]:
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    out = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        if p.shape != g.shape:
            raise ShapeError(f"pair {i}: prediction {p.shape} vs ground truth {g.shape}")
        pb = p.astype(bool)
        gb = g.astype(bool)
        out.append((int((pb & gb).sum()), int((pb | gb).sum())))
    return out


def ciou(preds, gts) -> float:
    """Cumulative IoU: total intersection over total union across the set.
    Pairs where both masks are empty are skipped from both sums."""
    inter = 0
    union = 0
    for i, u in _pair_counts(preds, gts):
        inter += i
        union += u
    return inter / union if union else 0.0


def giou(preds, gts) -> float:
    """Mean of per-sample IoUs; an empty-vs-empty pair scores 1.0."""
    scores = [(i / u if u else 1.0) for i, u in _pair_counts(preds, gts)]
    return float(np.mean(scores)) if scores else 0.0


_LETTER_RE = re.compile(r"\b([ABCDabcd])\b")


def extract_choice(response: str) -> str | None:
    """First standalone letter A-D (word boundary, case-insensitive)."""
    m = _LETTER_RE.search(response)
    return m.group(1).upper() if m else None


def mcq_accuracy(responses: list[str], keys: list[str]) -> float:
    if not keys:
        raise DataError("mcq_accuracy needs at least one key")
    if len(responses) != len(keys):
        raise ShapeError(f"{len(responses)} responses vs {len(keys)} keys")
    for k in keys:
        if k not in ("A", "B", "C", "D"):
            raise DataError(f"mcq key must be one of A-D, got {k!r}")
    correct = sum(1 for r, k in zip(responses, keys) if extract_choice(r) == k)
    return correct / len(keys)


_WORD_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")

METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_THETA = 3.0


def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Two-stage unigram alignment: exact matches first, Porter-stem matches
    among the leftovers. Within a stage, candidate words scan left to right
    and take the earliest unmatched reference occurrence."""
    pairs: list[tuple[int, int]] = []
    used_c = [False] * len(cand)
    used_r = [False] * len(ref)
    for keyed in (
        (cand, ref),
        ([porter.stem(w) for w in cand], [porter.stem(w) for w in ref]),
    ):
        kc, kr = keyed
        for i, w in enumerate(kc):
            if used_c[i]:
                continue
            for j, r in enumerate(kr):
                if not used_r[j] and r == w:
                    pairs.append((i, j))
                    used_c[i] = True
                    used_r[j] = True
                    break
    return sorted(pairs)


def meteor_lite(candidate: str, reference: str) -> float:
    """Exact+stem METEOR without the synonym stage.

    F = P*R / (alpha*P + (1-alpha)*R); penalty = gamma*(chunks/matches)^theta;
    score = F * (1 - penalty). Zero matches score 0.
    """
    ref = _words(reference)
    if not ref:
        raise DataError("meteor_lite: reference has no words")
    cand = _words(candidate)
    if not cand:
        return 0.0
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    precision = m / len(cand)
    recall = m / len(ref)
    f = (precision * recall) / (METEOR_ALPHA * precision + (1 - METEOR_ALPHA) * recall)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_THETA
    return f * (1.0 - penalty)


def perbench_overall(meteor_pct: float, accuracy_pct: float, ciou_pct: float, giou_pct: float) -> float:
    """Average of the three normalized task scores; the segmentation task
    contributes the mean of its two metrics."""
    for name, v in (
        ("meteor", meteor_pct), ("accuracy", accuracy_pct), ("ciou", ciou_pct), ("giou", giou_pct)
    ):
        if not 0.0 <= v <= 100.0:
            raise DataError(f"perbench_overall: {name}={v} outside [0, 100]")
    return (meteor_pct + accuracy_pct + (ciou_pct + giou_pct) / 2.0) / 3.0


def _dilate(mask: np.ndarray, times: int) -> np.ndarray:
    out = mask.astype(bool)
    for _ in range(times):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def boundary_band_iou(preds, gts, width: int = 2) -> float:
    """IoU restricted to a band around each ground-truth boundary (the
    dilation of the mask minus its erosion); measures edge quality for the
    distillation ablation. Pairs whose band is empty are skipped."""
    inter = 0
    union = 0
    for i, u in _band_counts(preds, gts, width):
        inter += i
        union += u
    return inter / union if union else 0.0


def _band_counts(preds, gts, width: int):
    for p, g in zip(preds, gts):
        gb = g.astype(bool)
        band = _dilate(gb, width) & _dilate(~gb, width)
        pb = p.astype(bool) & band
        tb = gb & band
        yield int((pb & tb).sum()), int((pb | tb).sum())


# ---------------------------------------------------------------------------
# PCA feature visualization
# ---------------------------------------------------------------------------


def _power_iteration(cov: np.ndarray, rng: np.random.Generator, iters: int = 100, tol: float = 1e-6):
    v = rng.normal(size=cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        nv = cov @ v
        norm = np.linalg.norm(nv)
        if norm < 1e-12:
            return 0.0, np.zeros_like(v)
        nv /= norm
        if np.linalg.norm(nv - v) < tol:
            v = nv
            break
        v = nv
    lam = float(v @ cov @ v)
    return lam, v


def pca_feature_image(features: np.ndarray) -> np.ndarray:
    """Project per-pixel feature vectors onto the top-3 principal components
    and min-max scale each to [0, 255]. Returns uint8 (3,h,w).

    Deterministic: power iteration (100 iterations, tol 1e-6) from a fixed
    seeded start, with deflation between components. Missing components
    (rank < 3) are zero; a zero-range channel maps to 0.
    """
    c, h, w = features.shape
    if h * w < 3:
        raise DataError(f"pca_feature_image needs >= 3 pixels, got {h}x{w}")
    x = features.reshape(c, h * w).T.astype(np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    cov = (x.T @ x) / x.shape[0]
    rng = np.random.default_rng(np.random.PCG64(0))
    out = np.zeros((3, h, w), dtype=np.uint8)
    for comp in range(3):
        lam, v = _power_iteration(cov, rng)
        if lam <= 1e-12:
            continue  # rank deficit: leave the channel at 0
        proj = (x @ v).reshape(h, w)
        cov = cov - lam * np.outer(v, v)
        lo, hi = proj.min(), proj.max()
        if hi - lo < 1e-12:
            continue
        out[comp] = np.round((proj - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# benchmark harness
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-task scores as fractions in [0,1]; overall on the 0-100 scale."""

    meteor: float = 0.0
    mcq_accuracy: float = 0.0
    ciou: float = 0.0
    giou: float = 0.0
    overall: float = 0.0
    per_sample: list[dict] = field(default_factory=list)
    warnings: int = 0
    counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "meteor": self.meteor,
            "mcq_accuracy": self.mcq_accuracy,
            "ciou": self.ciou,
            "giou": self.giou,
            "overall": self.overall,
            "warnings": self.warnings,
            "counts": self.counts,
            "per_sample": self.per_sample,
        }

    def table(self) -> str:
        rows = [
            ("METEOR", f"{self.meteor * 100:.1f}"),
            ("MCQ accuracy", f"{self.mcq_accuracy * 100:.1f}"),
            ("cIoU", f"{self.ciou * 100:.1f}"),
            ("gIoU", f"{self.giou * 100:.1f}"),
            ("overall", f"{self.overall:.1f}"),
        ]
        width = max(len(n) for n, _ in rows)
        lines = [f"{n:<{width}}  {v:>6}" for n, v in rows]
        if self.warnings:
            lines.append(f"{'warnings':<{width}}  {self.warnings:>6}")
        return "\n".join(lines)


def _pad_mask_pairs(preds: list[np.ndarray], gts: list[np.ndarray], hw: tuple[int, int]):
    """Equalize prediction/ground-truth counts with empty masks so missing
    or extra detections are punished rather than dropped."""
    empty = np.zeros(hw, dtype=np.uint8)
    n = max(len(preds), len(gts))
    p = list(preds) + [empty] * (n - len(preds))
    g = list(gts) + [empty] * (n - len(gts))
    return p, g


def run_benchmark(model, dataset, tasks: tuple[str, ...]) -> MetricReport:
    """Score a model over the tagged dataset.

    The model contract is respond(record, force_seg) -> [(text, masks)] per
    conversation turn. Segmentation tasks run with forced [SEG] emission.
    """
    report = MetricReport()
    seg_preds: list[np.ndarray] = []
    seg_gts: list[np.ndarray] = []
    meteor_scores: list[float] = []
    mcq_resp: list[str] = []
    mcq_keys: list[str] = []

    for rec in dataset:
        if rec.task not in tasks:
            continue
        force = rec.task in SEG_TASKS
        try:
            turns = model.respond(rec, force_seg=force)
        except Exception:
            report.warnings += 1
            continue
        if len(turns) != len(rec.conversations):
            report.warnings += 1
            continue
        entry: dict = {"id": rec.id, "task": rec.task}
        if rec.task in SEG_TASKS:
            hw = rec.gt_masks[0].shape if rec.gt_masks else None
            consumed = 0
            rec_scores = []
            for (q, a), (text, masks) in zip(rec.conversations, turns):
                n_gt = a.count("[SEG]")
                gts = rec.gt_masks[consumed : consumed + n_gt]
                consumed += n_gt
                if not gts:
                    continue
                p, g = _pad_mask_pairs(list(masks), gts, gts[0].shape)
                seg_preds += p
                seg_gts += g
                rec_scores.append(giou(p, g))
            entry["giou"] = float(np.mean(rec_scores)) if rec_scores else None
        elif rec.task == "region-caption":
            scores = []
            for (q, a), (text, _) in zip(rec.conversations, turns):
                scores.append(meteor_lite(text, a))
            meteor_scores += scores
            entry["meteor"] = float(np.mean(scores)) if scores else None
        elif rec.task == "mcq":
            for (q, a), (text, _) in zip(rec.conversations, turns):
                if a in ("A", "B", "C", "D"):
                    mcq_resp.append(text)
                    mcq_keys.append(a)
                    entry["choice"] = extract_choice(text)
                    entry["key"] = a
        else:
            entry["text"] = turns[0][0] if turns else ""
        report.per_sample.append(entry)

    if seg_preds:
        report.ciou = ciou(seg_preds, seg_gts)
        report.giou = giou(seg_preds, seg_gts)
    if meteor_scores:
        report.meteor = float(np.mean(meteor_scores))
    if mcq_keys:
        report.mcq_accuracy = mcq_accuracy(mcq_resp, mcq_keys)
    report.counts = {
        "segmentation_pairs": len(seg_preds),
        "captions": len(meteor_scores),
        "mcq": len(mcq_keys),
    }
    report.overall = perbench_overall(
        report.meteor * 100, report.mcq_accuracy * 100, report.ciou * 100, report.giou * 100
    )
    return report
