"""
One-step distillation of the flow expert.

The teacher F integrates the frozen expert with S Euler steps from A^0. The
student G(A^0) = A^0 + v'(0, A^0, c) starts as a copy of the teacher and is
regressed onto F with fresh noise every batch. Targets are computed on the
fly and never stored.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.errors import ConfigError
from core.optim import AdamW, constant_with_warmup, global_norm
from core.tensor import Tape, Tensor, as_tensor, no_grad
from modules.batching import Sampler
from modules.flow_policy import FlowPolicy, euler_sample
from storage import write_csv

logger = logging.getLogger(__name__)

DISTILL_COLUMNS = ["step", "loss", "skipped"]


@dataclass
class DistillConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    warmup_steps: int = 500
    weight_decay: float = 1e-2
    max_grad_norm: float = 1.0
    teacher_steps: int = 5
    log_every: int = 100

    def __post_init__(self):
        if self.teacher_steps < 1:
            raise ConfigError(f"teacher_steps must be >= 1, got {self.teacher_steps}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"steps must be >= 0 and batch_size >= 1, got {self.steps}, {self.batch_size}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def teacher_generate(teacher, a0, cond, steps: int) -> np.ndarray:
    """F(A^0): the teacher's Euler integration from a given A^0, no gradients."""
    return euler_sample(teacher.velocity, cond, steps, noise=a0)


def student_generate(student, a0, cond) -> Tensor:
    """G(A^0) = A^0 + v'(0, A^0, c) in a single pass."""
    a0 = np.asarray(a0, dtype=np.float64)
    return as_tensor(student.velocity(np.zeros(a0.shape[0]), Tensor(a0), cond)) + a0


def distill_loss(pred: Tensor, target) -> Tensor:
    """Mean over the batch of the squared gap summed over chunk elements."""
    err = pred - np.asarray(target, dtype=np.float64)
    return (err * err).sum() * (1.0 / pred.shape[0])


def init_student(teacher: FlowPolicy) -> FlowPolicy:
    """Student starts bitwise equal to the teacher; its condition encoder stays frozen."""
    student = teacher.clone()
    student.unfreeze()
    student.encoder.freeze()
    return student


def distill_step(teacher, student, batch: dict, opt: AdamW, rng, teacher_steps: int) -> Optional[dict]:
    """
    One regression step on fresh A^0. Returns None when the teacher output is
    not finite; the batch is then skipped without touching the student.
    """
    with no_grad():
        cond = teacher.encode_condition(batch["context"], batch["instruction"])
    B = cond.shape[0]
    a0 = rng.standard_normal((B,) + tuple(teacher.chunk_shape))
    target = teacher_generate(teacher, a0, cond, teacher_steps)
    if not np.isfinite(target).all():
        logger.warning(f"Teacher produced non-finite targets; skipping batch of {B}")
        return None
    with Tape() as tape:
        loss = distill_loss(student_generate(student, a0, cond), target)
    grads = tape.backward(loss, opt.params)
    teacher_grads = tape.backward(loss, teacher.parameters())
    opt.step(grads)
    return {"loss": loss.item(), "teacher_grad_norm": global_norm(teacher_grads)}


def train_distill(teacher: FlowPolicy, sampler: Sampler, cfg: DistillConfig, rng,
                  student: Optional[FlowPolicy] = None, out_dir=None, progress: bool = False):
    """Returns (student, log DataFrame with step, loss, skipped)."""
    teacher.freeze()
    student = student or init_student(teacher)
    params = [p for p in student.parameters() if p.requires_grad]
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm,
                schedule=constant_with_warmup(cfg.lr, cfg.warmup_steps))
    rows = []
    skipped = 0
    for step in tqdm(range(1, cfg.steps + 1), desc="distill", disable=not progress):
        out = distill_step(teacher, student, sampler.sample(rng, cfg.batch_size), opt, rng, cfg.teacher_steps)
        if out is None:
            skipped += 1
            rows.append({"step": step, "loss": np.nan, "skipped": 1})
            continue
        rows.append({"step": step, "loss": out["loss"], "skipped": 0})
        if step % cfg.log_every == 0 or step == cfg.steps:
            logger.info(f"distill step {step}/{cfg.steps} loss {out['loss']:.6f} skipped {skipped}")
    log = pd.DataFrame(rows, columns=DISTILL_COLUMNS)
    if out_dir is not None:
        out_dir = Path(out_dir)
        student.save(out_dir / "student.ckpt", {"distilled_from_steps": cfg.teacher_steps})
        write_csv(log, out_dir / "distill_log.csv")
    return student, log


def distillation_gap(teacher, student, context, instruction, teacher_steps: int = 5, seed: int = 0):
    """
    Held-out regression gap on shared noise: (mean per-element squared gap,
    per-element variance of the teacher outputs).
    """
    with no_grad():
        cond = teacher.encode_condition(context, instruction)
        a0 = np.random.default_rng(seed).standard_normal((cond.shape[0],) + tuple(teacher.chunk_shape))
        target = teacher_generate(teacher, a0, cond, teacher_steps)
        pred = student_generate(student, a0, cond).data
    return float(np.mean((pred - target) ** 2)), float(np.var(target, axis=0).mean())
