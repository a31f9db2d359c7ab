"""Seeded single-process training loop with CSV loss logging and bit-exact
checkpoint/resume."""

from __future__ import annotations

import json
import os

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWState, GradTape
from .checkpoint import load_archive, save_archive
from .config import RunConfig, serialize_config
from .data import generate_synthetic_dataset, load_jsonl
from .errors import CheckpointError, ConfigError
from .losses import TeacherFeatures
from .model import init_params
from .pipeline import Model, image_to_float, teacher_seed_for
from . import losses
from .tokenizer import Tokenizer

CSV_HEADER = "step,l_ntp,l_ce,l_dice,l_distill,lr"


def load_dataset(cfg: RunConfig):
    if cfg.data.path:
        return load_jsonl(cfg.data.path, cfg.model)
    return generate_synthetic_dataset(
        cfg.data.synthetic_n,
        cfg.model,
        cfg.data.synthetic_seed,
        tasks=cfg.data_tasks(),
        p_nonexist=cfg.data.p_nonexist,
    )


class TeacherStore:
    """Per-record teacher features: synthesized on demand, or loaded from a
    keyed tensor archive with '<id>/m2f' and '<id>/sam2' entries."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.cache: dict[str, TeacherFeatures] = {}
        self.archive: dict[str, np.ndarray] | None = None
        if cfg.train.distill == "from-file":
            self.archive, _ = load_archive(cfg.train.teacher_path)

    def get(self, model: Model, rec) -> TeacherFeatures:
        if rec.id in self.cache:
            return self.cache[rec.id]
        if self.archive is not None:
            try:
                feats = TeacherFeatures(
                    m2f=self.archive[f"{rec.id}/m2f"],
                    sam2=self.archive[f"{rec.id}/sam2"],
                    source="file",
                )
            except KeyError as exc:
                raise CheckpointError(f"teacher archive lacks features for {rec.id}") from exc
        else:
            feats = losses.make_teacher_features(
                image_to_float(model.record_image(rec)), self.cfg.model, teacher_seed_for(rec.id)
            )
        self.cache[rec.id] = feats
        return feats


def checkpoint_state(model: Model, opt: AdamWState, rng: np.random.Generator,
                     step: int, cfg: RunConfig) -> tuple[dict, dict]:
    arrays = {name: p.data for name, p in model.params.items()}
    for name in model.params:
        arrays[f"adam.m.{name}"] = opt.m[name]
    for name in model.params:
        arrays[f"adam.v.{name}"] = opt.v[name]
    meta = {
        "format": "1",
        "step": str(step),
        "adam_step": str(opt.step),
        "rng": json.dumps(rng.bit_generator.state, sort_keys=True, separators=(",", ":")),
        "config": json.dumps(serialize_config(cfg), separators=(",", ":")),
    }
    return arrays, meta


def save_training_checkpoint(path: str, model: Model, opt: AdamWState,
                             rng: np.random.Generator, step: int, cfg: RunConfig) -> None:
    arrays, meta = checkpoint_state(model, opt, rng, step, cfg)
    save_archive(path, arrays, meta)


def restore_params(model: Model, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into the model, validating shapes name by name."""
    for name, p in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arrays[name].shape} vs model {p.data.shape}"
            )
        p.data = arrays[name].copy()


def load_model_from_checkpoint(path: str, cfg: RunConfig) -> Model:
    arrays, _ = load_archive(path)
    model = Model.create(cfg.model, seed=cfg.train.seed)
    restore_params(model, arrays)
    return model


def run_training(cfg: RunConfig, out_dir: str, resume: str | None = None) -> dict:
    """Train per config; writes loss.csv and checkpoint files to out_dir.
    Returns a summary dict (final step, final losses, file paths)."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(cfg)
    if not dataset:
        raise ConfigError("training dataset is empty")

    # independent streams for parameter init and batch sampling
    init_ss, loop_ss = np.random.SeedSequence(cfg.train.seed).spawn(2)
    cfg.model.validate()
    model = Model(
        cfg.model,
        Tokenizer(cfg.model.vocab_size, cfg.model.n_visual_prompts),
        init_params(cfg.model, np.random.default_rng(init_ss)),
    )
    opt = AdamWState(model.params)
    rng = np.random.default_rng(loop_ss)
    start_step = 0

    if resume is not None:
        arrays, meta = load_archive(resume)
        restore_params(model, arrays)
        for name in model.params:
            opt.m[name] = arrays[f"adam.m.{name}"].copy()
            opt.v[name] = arrays[f"adam.v.{name}"].copy()
        opt.step = int(meta["adam_step"])
        start_step = int(meta["step"])
        rng.bit_generator.state = json.loads(meta["rng"])

    teachers = TeacherStore(cfg) if cfg.train.distill != "off" else None
    weights = cfg.train.weights()
    csv_path = os.path.join(out_dir, "loss.csv")
    mode = "a" if (resume is not None and os.path.exists(csv_path)) else "w"
    csv_file = open(csv_path, mode, encoding="utf-8")
    if mode == "w":
        csv_file.write(CSV_HEADER + "\n")

    last_row = None
    try:
        for step in range(start_step, cfg.train.steps):
            lr = ad.cosine_lr(step, cfg.train.steps, cfg.train.lr, cfg.train.warmup_ratio)
            batch_idx = rng.integers(0, len(dataset), size=cfg.train.batch_size)
            comps = np.zeros(4, dtype=np.float64)
            with GradTape() as tape:
                total = None
                for bi in batch_idx:
                    rec = dataset[int(bi)]
                    parts = model.loss_parts(
                        rec,
                        distill_on=teachers is not None,
                        teacher=teachers.get(model, rec) if teachers is not None else None,
                    )
                    comps += [parts.ntp.item(), parts.ce.item(), parts.dice.item(), parts.distill.item()]
                    rec_total = model.total_loss(parts, weights)
                    total = rec_total if total is None else ad.add(total, rec_total)
                total = ad.mul(total, 1.0 / cfg.train.batch_size)
                tape.backward(total)
            ad.adamw_step(model.params, opt, lr, weight_decay=cfg.train.weight_decay)
            for p in model.params.values():
                p.grad = None

            comps /= cfg.train.batch_size
            last_row = f"{step},{comps[0]:.8e},{comps[1]:.8e},{comps[2]:.8e},{comps[3]:.8e},{lr:.8e}"
            csv_file.write(last_row + "\n")

            if cfg.train.checkpoint_every and (step + 1) % cfg.train.checkpoint_every == 0:
                save_training_checkpoint(
                    os.path.join(out_dir, f"checkpoint-{step + 1:06d}.ckpt"),
                    model, opt, rng, step + 1, cfg,
                )
    finally:
        csv_file.close()

    final_path = os.path.join(out_dir, "checkpoint-final.ckpt")
    save_training_checkpoint(final_path, model, opt, rng, cfg.train.steps, cfg)
    return {
        "model": model,
        "final_checkpoint": final_path,
        "loss_csv": csv_path,
        "last_row": last_row,
    }
