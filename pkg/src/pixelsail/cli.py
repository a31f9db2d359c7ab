"""Command-line interface: train | eval | infer | bench | viz.

Exit codes: 0 success, 2 config error, 3 checkpoint error, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys

import numpy as np

from . import grounding, metrics, ppm
from . import model as backbone
from .config import RunConfig, load_run_config
from .data import load_jsonl, load_prompts_file
from .errors import CheckpointError, ConfigError, DataError, PixelSailError
from .train import load_dataset, load_model_from_checkpoint, run_training

PERBENCH_TASKS = ("region-caption", "mcq", "vt-res")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixelsail")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    _add_common(p)
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")

    for name, desc in (("eval", "score a checkpoint over a dataset"),
                       ("bench", "score the three benchmark tasks and the overall number")):
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="JSONL dataset (default: synthetic per config)")
        p.add_argument("--out", default=".", help="directory for report.json")

    p = sub.add_parser("infer", help="answer one instruction about one image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM (P6) image")
    p.add_argument("--instruction", required=True)
    p.add_argument("--prompts", help="JSON visual prompts file")
    p.add_argument("--force-seg", action="store_true",
                   help="force one [SEG] even without segmentation intent")
    p.add_argument("--max-new", type=int, default=24)
    p.add_argument("--out", default=".", help="directory for mask PPMs")

    p = sub.add_parser("viz", help="write PCA images of the feature maps")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default=".")
    return parser


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    summary = run_training(cfg, args.out, resume=args.resume)
    print(f"wrote {summary['loss_csv']}")
    print(f"wrote {summary['final_checkpoint']}")
    return 0


def _eval_dataset(cfg: RunConfig, args):
    if args.data:
        return load_jsonl(args.data, cfg.model)
    return load_dataset(cfg)


def cmd_eval(args, tasks: tuple[str, ...] | None = None) -> int:
    cfg = load_run_config(args.config, args.set)
    model = load_model_from_checkpoint(args.checkpoint, cfg)
    dataset = _eval_dataset(cfg, args)
    report = metrics.run_benchmark(model, dataset, tasks or cfg.eval_tasks())
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "report.json")
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(report.table())
    print(f"wrote {out_path}")
    return 0


def _load_image(path: str, cfg: RunConfig) -> np.ndarray:
    image = ppm.read_ppm(path)
    _, h, w = image.shape
    p = cfg.model.patch
    if h % p or w % p:
        nh, nw = round(h / p) * p or p, round(w / p) * p or p
        raise ConfigError(
            f"image {h}x{w} is not divisible by patch {p}; nearest valid size is {nh}x{nw}"
        )
    if (h, w) != (cfg.model.image_h, cfg.model.image_w):
        raise ConfigError(
            f"image {h}x{w} does not match the model's {cfg.model.image_h}x{cfg.model.image_w}"
        )
    return image


def cmd_infer(args) -> int:
    cfg = load_run_config(args.config, args.set)
    model = load_model_from_checkpoint(args.checkpoint, cfg)
    image = _load_image(args.image, cfg)
    prompts = load_prompts_file(args.prompts) if args.prompts else []
    attached = {p.index for p in prompts}
    referenced = {int(i) for i in re.findall(r"<VP_(\d+)>", args.instruction)}
    for idx in sorted(referenced - attached):
        print(f"warning: instruction references <VP_{idx}> but no such prompt was given",
              file=sys.stderr)

    tok = model.tok
    prefix = backbone.assemble_sequence(
        tok, cfg.model, [(tok.encode(args.instruction), [])], include_answers=False
    )
    vision = model.vision_tokens(image, prompts)
    gen = backbone.generate(model.params, cfg.model, tok, prefix, vision,
                            args.max_new, force_seg=args.force_seg)
    new_ids = [i for i in gen.ids[len(prefix.ids):] if i != tok.eos_id]
    print(tok.decode(new_ids))

    seg_pos = gen.seg_positions()
    seg_pos = seg_pos[seg_pos >= len(prefix.ids)]
    if seg_pos.size:
        gen.embeddings = backbone.embed_sequence(model.params, cfg.model, gen, vision)
        out = backbone.forward(model.params, cfg.model, gen)
        _, f_h = model.grounding_features(out.vision_hidden)
        keep = np.isin(out.seg_positions, seg_pos)
        from . import autodiff as ad

        seg_hidden = ad.gather_rows(out.seg_hidden, np.where(keep)[0])
        logits = grounding.predict_masks(seg_hidden, f_h, out.seg_positions[keep])
        masks = grounding.binarize_masks(logits, cfg.model.image_h, cfg.model.image_w)
        os.makedirs(args.out, exist_ok=True)
        for k in range(masks.shape[0]):
            path = os.path.join(args.out, f"mask-{k + 1}.ppm")
            ppm.write_ppm(path, np.repeat(masks[k][None] * np.uint8(255), 3, axis=0))
            print(f"wrote {path}")
    return 0


def cmd_viz(args) -> int:
    cfg = load_run_config(args.config, args.set)
    model = load_model_from_checkpoint(args.checkpoint, cfg)
    image = _load_image(args.image, cfg)
    seq = backbone.assemble_sequence(model.tok, cfg.model, [])
    seq.embeddings = backbone.embed_sequence(
        model.params, cfg.model, seq, model.vision_tokens(image, [])
    )
    out = backbone.forward(model.params, cfg.model, seq)
    f_l, f_h = model.grounding_features(out.vision_hidden)
    os.makedirs(args.out, exist_ok=True)
    for name, fmap in (("features-backbone.ppm", f_l), ("features-upsampled.ppm", f_h)):
        path = os.path.join(args.out, name)
        ppm.write_ppm(path, metrics.pca_feature_image(fmap.data))
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "bench":
            return cmd_eval(args, tasks=PERBENCH_TASKS)
        if args.command == "infer":
            return cmd_infer(args)
        if args.command == "viz":
            return cmd_viz(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except PixelSailError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
