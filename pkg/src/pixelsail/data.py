"""Record schema, conversation templates, sampling rules, and the
deterministic synthetic dataset generator.

Synthetic scenes are colored squares/disks on a noise background with an
exact rasterization rule (square: half-open integer box; disk: integer
pixels with (y-cy)^2 + (x-cx)^2 <= r^2), so mask areas can be re-derived
analytically in tests.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .grounding import VisualPrompt
from .model import ModelConfig, TokenSequence

TASKS = ("refseg", "panoptic-template", "region-caption", "mcq", "vt-res", "plain-vqa")
NONEXIST_ANSWER = "This visual prompt does not exist."

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
COLOR_RGB = {
    "red": (220, 50, 50),
    "green": (60, 180, 75),
    "blue": (65, 105, 225),
    "yellow": (235, 220, 70),
    "magenta": (220, 70, 200),
    "cyan": (70, 210, 220),
}
KINDS = ("square", "disk")

_VP_REF_RE = re.compile(r"<VP_(\d+)>")


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray | str  # inline uint8 [3,H,W] or a PPM path
    conversations: list[tuple[str, str]]
    gt_masks: list[np.ndarray]  # uint8 [H,W], aligned with [SEG] occurrences in answers
    visual_prompts: list[VisualPrompt]
    task: str
    meta: dict = field(default_factory=dict)  # generator internals; never serialized


def seg_count(answers) -> int:
    return sum(a.count("[SEG]") for a in answers)


def validate_record(rec: SampleRecord, cfg: ModelConfig | None = None) -> None:
    """Enforce the record invariants; raises DataError naming the record."""
    if rec.task not in TASKS:
        raise DataError(f"record {rec.id}: unknown task {rec.task!r}")
    n_seg = seg_count(a for _, a in rec.conversations)
    if n_seg != len(rec.gt_masks):
        raise DataError(
            f"record {rec.id}: {n_seg} [SEG] in answers but {len(rec.gt_masks)} ground-truth masks"
        )
    for m in rec.gt_masks:
        if m.ndim != 2 or not np.isin(m, (0, 1)).all():
            raise DataError(f"record {rec.id}: ground-truth masks must be binary 2-D grids")
    if isinstance(rec.image, np.ndarray):
        if rec.image.ndim != 3 or rec.image.shape[0] != 3:
            raise DataError(f"record {rec.id}: inline image must be (3,H,W)")
        for m in rec.gt_masks:
            if m.shape != rec.image.shape[1:]:
                raise DataError(
                    f"record {rec.id}: mask {m.shape} does not match image {rec.image.shape[1:]}"
                )
    indices = [p.index for p in rec.visual_prompts]
    if len(set(indices)) != len(indices):
        raise DataError(f"record {rec.id}: duplicate visual prompt indices {indices}")
    if cfg is not None:
        for p in rec.visual_prompts:
            p.validate(cfg.grid_h, cfg.grid_w, cfg.n_visual_prompts)
    attached = set(indices)
    for q, a in rec.conversations:
        refs = {int(i) for i in _VP_REF_RE.findall(q + " " + a)}
        missing = refs - attached
        if missing and a != NONEXIST_ANSWER:
            raise DataError(
                f"record {rec.id}: text references visual prompts {sorted(missing)} "
                "that are not attached"
            )


# ---------------------------------------------------------------------------
# mask run-length coding (row-major, counts alternate background/foreground,
# starting with background)
# ---------------------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = mask.reshape(-1).astype(np.uint8)
    counts: list[int] = []
    value = 0
    run = 0
    for v in flat:
        if v == value:
            run += 1
        else:
            counts.append(run)
            value = 1 - value
            run = 1
    counts.append(run)
    return counts


def rle_decode(counts: list[int], h: int, w: int) -> np.ndarray:
    total = sum(counts)
    if total != h * w:
        raise DataError(f"RLE covers {total} cells, grid has {h * w}")
    flat = np.zeros(total, dtype=np.uint8)
    pos = 0
    value = 0
    for c in counts:
        if value:
            flat[pos : pos + c] = 1
        pos += c
        value = 1 - value
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# templates and sampling rules
# ---------------------------------------------------------------------------


def build_instance_template(
    class_name: str, instances: list[tuple[np.ndarray, tuple[float, float]]]
) -> tuple[str, str, list[np.ndarray]]:
    """Instance-mode conversation for one class.

    instances: (mask, center) with center = (x, y). Ordered by center x
    ascending, ties by y then input position. Question/answer strings are a
    fixed byte-level contract.
    """
    if not instances:
        raise DataError(f"instance template for {class_name!r} needs at least one instance")
    order = sorted(range(len(instances)), key=lambda i: (instances[i][1][0], instances[i][1][1], i))
    question = f"Question: Please segment the {class_name} in instance mode."
    answer = ", ".join(f"{class_name}-{k + 1} [SEG]" for k in range(len(order)))
    return question, answer, [instances[i][0] for i in order]


def build_semantic_template(class_name: str, union_mask: np.ndarray) -> tuple[str, str, list[np.ndarray]]:
    """Semantic-mode counterpart: one merged mask for the class."""
    question = f"Question: Please segment the {class_name} in semantic mode."
    return question, f"{class_name} [SEG]", [union_mask]


def referring_turn(expression: str) -> tuple[str, str]:
    return f"Please segment {expression} in the image.", "It is [SEG]."


def sample_referring(
    pool: list[tuple[str, np.ndarray]], rng: np.random.Generator, max_turns: int = 5
) -> tuple[list[tuple[str, str]], list[np.ndarray]]:
    """Fold up to max_turns referring expressions into one multi-round
    dialogue; fewer expressions give fewer turns, no padding."""
    if not pool:
        raise DataError("referring pool is empty")
    n = min(max_turns, len(pool))
    picks = rng.choice(len(pool), size=n, replace=False)
    turns = []
    masks = []
    for i in picks:
        expr, mask = pool[int(i)]
        turns.append(referring_turn(expr))
        masks.append(mask)
    return turns, masks


def sample_visual_prompts(
    rec: SampleRecord,
    rng: np.random.Generator,
    n_prompt_vocab: int,
    p_nonexist: float = 0.2,
) -> SampleRecord:
    """Keep 1-5 of the record's annotated regions as prompts (renumbered
    <VP_1>..), and with probability p_nonexist append a question about an
    unattached index whose answer is the fixed non-existence string."""
    if not rec.visual_prompts:
        raise DataError(f"record {rec.id}: no annotated regions to sample prompts from")
    avail = len(rec.visual_prompts)
    count = int(rng.integers(1, min(5, avail) + 1))
    picks = sorted(int(i) for i in rng.choice(avail, size=count, replace=False))
    regions = rec.meta.get("regions")
    rec.visual_prompts = [
        VisualPrompt(index=k + 1, mask=rec.visual_prompts[i].mask) for k, i in enumerate(picks)
    ]
    if regions is not None:
        rec.meta["regions"] = [regions[i] for i in picks]
    if rng.random() < p_nonexist and count < n_prompt_vocab:
        unattached = [i for i in range(1, n_prompt_vocab + 1) if i > count]
        ghost = int(rng.choice(unattached))
        rec.conversations.append((f"What is <VP_{ghost}>?", NONEXIST_ANSWER))
    return rec


def truncate(seq: TokenSequence, max_len: int = 8192) -> TokenSequence:
    """Drop tokens from the tail down to max_len. Never cuts inside the
    vision block; the loss mask is re-derived by the same slice."""
    if len(seq.ids) <= max_len:
        return seq
    if seq.vision_span[1] > max_len:
        raise ConfigError(
            f"vision block ends at {seq.vision_span[1]}, beyond max_len {max_len}"
        )
    return TokenSequence(
        ids=seq.ids[:max_len].copy(),
        roles=seq.roles[:max_len].copy(),
        vision_span=seq.vision_span,
        loss_mask=seq.loss_mask[:max_len].copy(),
    )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class Shape:
    kind: str
    color: str
    mask: np.ndarray  # uint8 [H,W]
    center: tuple[float, float]  # (x, y)
    spec: dict  # exact rasterization parameters


def rasterize_square(h: int, w: int, y0: int, x0: int, side: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[y0 : y0 + side, x0 : x0 + side] = 1
    return mask


def rasterize_disk(h: int, w: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(np.uint8)


def _sample_shape(rng: np.random.Generator, h: int, w: int, color: str) -> Shape:
    kind = KINDS[int(rng.integers(0, 2))]
    if kind == "square":
        side = int(rng.integers(16, 29))
        y0 = int(rng.integers(1, h - side))
        x0 = int(rng.integers(1, w - side))
        mask = rasterize_square(h, w, y0, x0, side)
        center = (x0 + side / 2.0, y0 + side / 2.0)
        spec = {"kind": kind, "y0": y0, "x0": x0, "side": side}
    else:
        r = int(rng.integers(8, 15))
        cy = int(rng.integers(r + 1, h - r - 1))
        cx = int(rng.integers(r + 1, w - r - 1))
        mask = rasterize_disk(h, w, cy, cx, r)
        center = (float(cx), float(cy))
        spec = {"kind": kind, "cy": cy, "cx": cx, "r": r}
    return Shape(kind=kind, color=color, mask=mask, center=center, spec=spec)


def make_scene(rng: np.random.Generator, h: int, w: int, n_shapes: int) -> list[Shape]:
    """Pairwise-disjoint shapes with distinct colors; placement by rejection."""
    colors = [COLORS[int(i)] for i in rng.choice(len(COLORS), size=n_shapes, replace=False)]
    shapes: list[Shape] = []
    occupied = np.zeros((h, w), dtype=np.uint8)
    for color in colors:
        for _ in range(40):
            s = _sample_shape(rng, h, w, color)
            if not (s.mask & occupied).any():
                shapes.append(s)
                occupied |= s.mask
                break
    return shapes


def render_scene(rng: np.random.Generator, shapes: list[Shape], h: int, w: int) -> np.ndarray:
    image = rng.integers(90, 131, size=(3, h, w)).astype(np.uint8)
    for s in shapes:
        rgb = COLOR_RGB[s.color]
        for c in range(3):
            image[c][s.mask == 1] = rgb[c]
    return image


def mask_to_prompt_grid(mask: np.ndarray, patch: int) -> np.ndarray:
    """Patch-resolution prompt mask: a cell is set when at least half its
    pixels are foreground; guaranteed non-empty via the peak cell."""
    h, w = mask.shape
    gh, gw = h // patch, w // patch
    frac = mask.reshape(gh, patch, gw, patch).mean(axis=(1, 3))
    grid = (frac >= 0.5).astype(np.uint8)
    if not grid.any():
        peak = np.unravel_index(np.argmax(frac), frac.shape)
        grid[peak] = 1
    return grid


def expression_pool(shapes: list[Shape]) -> list[tuple[str, np.ndarray]]:
    """Unique referring expressions: color+kind always works (colors are
    distinct); left/right-most qualifiers when a kind occurs more than once."""
    pool = [(f"the {s.color} {s.kind}", s.mask) for s in shapes]
    for kind in KINDS:
        members = [s for s in shapes if s.kind == kind]
        if len(members) >= 2:
            xs = [s.center[0] for s in members]
            pool.append((f"the leftmost {kind}", members[int(np.argmin(xs))].mask))
            pool.append((f"the rightmost {kind}", members[int(np.argmax(xs))].mask))
    return pool


def _caption_for(shape: Shape, w: int) -> str:
    side = "left" if shape.center[0] < w / 2 else "right"
    return f"A {shape.color} {shape.kind} on the {side} side of the image."


def _mcq_turn(shape: Shape, vp_index: int, rng: np.random.Generator) -> tuple[str, str]:
    others = [c for c in COLORS if c != shape.color]
    picks = [shape.color] + [others[int(i)] for i in rng.choice(len(others), size=3, replace=False)]
    order = rng.permutation(4)
    options = [picks[int(i)] for i in order]
    letter = "ABCD"[options.index(shape.color)]
    q = (
        f"What is the color of <VP_{vp_index}>? "
        + " ".join(f"{l}. {o}" for l, o in zip("ABCD", options))
    )
    return q, letter


_REL_TESTS = {
    "left of": lambda s, t: t.center[0] < s.center[0],
    "right of": lambda s, t: t.center[0] > s.center[0],
    "above": lambda s, t: t.center[1] < s.center[1],
    "below": lambda s, t: t.center[1] > s.center[1],
}


def _vtres_turn(shapes: list[Shape], rng: np.random.Generator):
    """Pick (prompt shape, relation) whose target is unique; None if no pair works."""
    order = rng.permutation(len(shapes))
    for si in order:
        anchor = shapes[int(si)]
        for rel in ("left of", "right of", "above", "below"):
            targets = [t for t in shapes if t is not anchor and _REL_TESTS[rel](anchor, t)]
            if len(targets) == 1:
                return anchor, rel, targets[0]
    return None


def generate_synthetic_dataset(
    n: int,
    cfg: ModelConfig,
    seed: int,
    tasks: tuple[str, ...] | None = None,
    p_nonexist: float = 0.2,
) -> list[SampleRecord]:
    """n procedurally generated records, deterministic under seed.

    Default task mix alternates the pixel-grounded tasks 1:1 with a
    plain-vqa stream; pass tasks to restrict (no vqa mixing then).
    """
    if n < 1:
        raise DataError("dataset size must be >= 1")
    h, w = cfg.image_h, cfg.image_w
    pixel_tasks = ("refseg", "panoptic-template", "region-caption", "mcq", "vt-res")
    children = np.random.SeedSequence(seed).spawn(n)
    records: list[SampleRecord] = []
    for i in range(n):
        rng = np.random.default_rng(children[i])
        if tasks is not None:
            task = tasks[i % len(tasks)]
        elif i % 2 == 1:
            task = "plain-vqa"
        else:
            task = pixel_tasks[(i // 2) % len(pixel_tasks)]
        records.append(_make_record(f"syn-{seed}-{i:05d}", task, cfg, rng, p_nonexist))
    return records


def _make_record(
    rec_id: str, task: str, cfg: ModelConfig, rng: np.random.Generator, p_nonexist: float
) -> SampleRecord:
    h, w = cfg.image_h, cfg.image_w
    n_shapes = 2 if task == "vt-res" else int(rng.integers(2, 4))
    shapes = make_scene(rng, h, w, n_shapes)
    image = render_scene(rng, shapes, h, w)

    conversations: list[tuple[str, str]] = []
    gt_masks: list[np.ndarray] = []
    prompts: list[VisualPrompt] = []
    meta: dict = {"shapes": [s.spec for s in shapes]}

    if task == "refseg":
        pool = expression_pool(shapes)
        conversations, gt_masks = sample_referring(pool, rng)
    elif task == "panoptic-template":
        kinds_present = [k for k in KINDS if any(s.kind == k for s in shapes)]
        cls = kinds_present[int(rng.integers(0, len(kinds_present)))]
        members = [s for s in shapes if s.kind == cls]
        if rng.random() < 0.5:
            q, a, masks = build_instance_template(cls, [(s.mask, s.center) for s in members])
        else:
            union = np.zeros((h, w), dtype=np.uint8)
            for s in members:
                union |= s.mask
            q, a, masks = build_semantic_template(cls, union)
        conversations = [(q, a)]
        gt_masks = list(masks)
    elif task in ("region-caption", "mcq"):
        rec = SampleRecord(
            id=rec_id,
            image=image,
            conversations=[],
            gt_masks=[],
            visual_prompts=[
                VisualPrompt(index=k + 1, mask=mask_to_prompt_grid(s.mask, cfg.patch))
                for k, s in enumerate(shapes)
            ],
            task=task,
            meta={**meta, "regions": list(shapes)},
        )
        rec = sample_visual_prompts(rec, rng, cfg.n_visual_prompts, p_nonexist)
        selected = rec.meta["regions"]
        turns: list[tuple[str, str]] = []
        if task == "region-caption":
            for k, s in enumerate(selected):
                turns.append((f"Describe <VP_{k + 1}> briefly.", _caption_for(s, w)))
        else:
            turns.append(_mcq_turn(selected[0], 1, rng))
        rec.conversations = turns + rec.conversations  # non-existence turn stays last
        validate_record(rec, cfg)
        return rec
    elif task == "vt-res":
        picked = _vtres_turn(shapes, rng)
        if picked is None:  # cannot happen with 2 distinct centers, but stay safe
            pool = expression_pool(shapes)
            conversations, gt_masks = sample_referring(pool, rng, max_turns=1)
        else:
            anchor, rel, target = picked
            prompts = [VisualPrompt(index=1, mask=mask_to_prompt_grid(anchor.mask, cfg.patch))]
            conversations = [(f"Segment the object {rel} <VP_1>.", "It is [SEG].")]
            gt_masks = [target.mask]
    elif task == "plain-vqa":
        if rng.random() < 0.5:
            areas = [int(s.mask.sum()) for s in shapes]
            biggest = shapes[int(np.argmax(areas))]
            conversations = [("What color is the largest shape?", f"{biggest.color}.")]
        else:
            kind = KINDS[int(rng.integers(0, 2))]
            count = sum(1 for s in shapes if s.kind == kind)
            conversations = [(f"How many {kind}s are there?", f"{count}.")]
    else:
        raise DataError(f"unknown task {task!r}")

    rec = SampleRecord(
        id=rec_id,
        image=image,
        conversations=conversations,
        gt_masks=gt_masks,
        visual_prompts=prompts,
        task=task,
        meta=meta,
    )
    validate_record(rec, cfg)
    return rec


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------


def _mask_to_json(mask: np.ndarray, use_rle: bool) -> dict:
    h, w = mask.shape
    if use_rle:
        return {"h": h, "w": w, "rle": rle_encode(mask)}
    return {"h": h, "w": w, "bits": mask.astype(int).tolist()}


def _mask_from_json(obj: dict) -> np.ndarray:
    h, w = int(obj["h"]), int(obj["w"])
    if "rle" in obj:
        return rle_decode(obj["rle"], h, w)
    bits = np.asarray(obj["bits"], dtype=np.uint8)
    if bits.shape != (h, w):
        raise DataError(f"mask bits {bits.shape} do not match header {h}x{w}")
    return bits


def record_to_json(rec: SampleRecord, use_rle: bool = True) -> dict:
    if isinstance(rec.image, str):
        image = {"path": rec.image}
    else:
        _, h, w = rec.image.shape
        image = {
            "inline": {
                "h": h,
                "w": w,
                "data-b64": base64.b64encode(rec.image.tobytes()).decode("ascii"),
            }
        }
    return {
        "id": rec.id,
        "image": image,
        "conversations": [{"q": q, "a": a} for q, a in rec.conversations],
        "gt_masks": [_mask_to_json(m, use_rle) for m in rec.gt_masks],
        "visual_prompts": [
            {
                "index": p.index,
                "grid_h": p.mask.shape[0],
                "grid_w": p.mask.shape[1],
                **({"rle": rle_encode(p.mask)} if use_rle else {"bits": p.mask.astype(int).tolist()}),
            }
            for p in rec.visual_prompts
        ],
        "task": rec.task,
    }


def record_from_json(obj: dict) -> SampleRecord:
    img = obj["image"]
    if "path" in img:
        image: np.ndarray | str = img["path"]
    else:
        inline = img["inline"]
        h, w = int(inline["h"]), int(inline["w"])
        raw = base64.b64decode(inline["data-b64"])
        if len(raw) != 3 * h * w:
            raise DataError(f"inline image has {len(raw)} bytes, expected {3 * h * w}")
        image = np.frombuffer(raw, dtype=np.uint8).reshape(3, h, w).copy()
    prompts = []
    for p in obj.get("visual_prompts", []):
        gh, gw = int(p["grid_h"]), int(p["grid_w"])
        grid = rle_decode(p["rle"], gh, gw) if "rle" in p else np.asarray(p["bits"], dtype=np.uint8)
        prompts.append(VisualPrompt(index=int(p["index"]), mask=grid))
    return SampleRecord(
        id=str(obj["id"]),
        image=image,
        conversations=[(c["q"], c["a"]) for c in obj.get("conversations", [])],
        gt_masks=[_mask_from_json(m) for m in obj.get("gt_masks", [])],
        visual_prompts=prompts,
        task=str(obj["task"]),
    )


def load_prompts_file(path: str) -> list[VisualPrompt]:
    """JSON list of {index, grid_h, grid_w, rle|bits} visual prompts."""
    try:
        with open(path, encoding="utf-8") as f:
            items = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read prompts file {path}: {exc}") from exc
    prompts = []
    for p in items:
        gh, gw = int(p["grid_h"]), int(p["grid_w"])
        grid = rle_decode(p["rle"], gh, gw) if "rle" in p else np.asarray(p["bits"], dtype=np.uint8)
        prompts.append(VisualPrompt(index=int(p["index"]), mask=grid))
    return prompts


def save_jsonl(path: str, records: list[SampleRecord], use_rle: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(record_to_json(rec, use_rle), ensure_ascii=False) + "\n")


def load_jsonl(path: str, cfg: ModelConfig | None = None) -> list[SampleRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = record_from_json(obj)
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
            validate_record(rec, cfg)
            records.append(rec)
    return records
