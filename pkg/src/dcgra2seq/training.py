"""Adam training with per-epoch exponential learning-rate decay."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import StrokeSequence, to_stroke5
from .model import Gra2Seq, ModelConfig
from .nn import Adam
from .tensor import gradient, no_grad

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_BAD = 10


@dataclass
class TrainConfig:
    patches: int = 20
    batch: int = 256
    lr0: float = 1e-3
    decay: float = 0.95
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    use_absolute_pe: bool = True
    use_relative_pe: bool = True
    pe_in_edges: bool = False
    scale: str = "paper"
    clip_norm: float | None = 1.0

    def model_config(self) -> ModelConfig:
        return ModelConfig.preset(self.scale, patches=self.patches, use_absolute_pe=self.use_absolute_pe,
                                  use_relative_pe=self.use_relative_pe, pe_in_edges=self.pe_in_edges)

    @classmethod
    def preset(cls, scale: str, **overrides) -> "TrainConfig":
        base = cls(scale=scale) if scale == "paper" else cls(scale=scale, patches=8, batch=4, epochs=60)
        return dataclasses.replace(base, **overrides)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * cfg.decay ** epoch


@dataclass
class TrainResult:
    model: Gra2Seq
    curve: list[dict] = field(default_factory=list)
    skipped_steps: int = 0
    steps: int = 0
    initial_nll: float = float("nan")
    final_nll: float = float("nan")


class NonFiniteLoss(RuntimeError):
    pass


def offset_scale(seqs: Sequence[StrokeSequence], max_len: int) -> float:
    """Standard deviation of all stroke-5 offsets; used to put decoder targets on unit scale."""
    offs = np.concatenate([to_stroke5(s, max_len)[:len(s), :2].ravel() for s in seqs])
    sd = float(offs.std())
    return sd if sd > 0 else 1.0


def dataset_nll(model: Gra2Seq, images: np.ndarray, target5: np.ndarray, lengths: np.ndarray,
                batch: int = 64) -> float:
    """Mean per-sequence NLL with y = μ, eval-mode batch-norm."""
    was = model.training
    model.eval()
    total = 0.0
    try:
        with no_grad():
            for i in range(0, len(images), batch):
                sl = slice(i, i + batch)
                loss = model.loss(images[sl], target5[sl], lengths[sl], None)
                total += float(loss.data) * len(images[sl])
    finally:
        model.train(was)
    return total / len(images)


def build_model(dataset: Sequence[StrokeSequence], cfg: TrainConfig, dtype=np.float32) -> Gra2Seq:
    mcfg = cfg.model_config()
    model = Gra2Seq(mcfg, seed=cfg.seed, dtype=dtype)
    model.offset_scale[0] = offset_scale(dataset, mcfg.max_len)
    return model


def train(dataset: Sequence[StrokeSequence], cfg: TrainConfig, model: Gra2Seq | None = None,
          on_step=None) -> TrainResult:
    """Optimise the reconstruction NLL over ``cfg.epochs`` epochs (or until ``max_steps``)."""
    if not dataset:
        raise ValueError("train: empty dataset")
    model = model or build_model(dataset, cfg)
    model.train()
    rng = np.random.default_rng(cfg.seed + 1)
    images = model.images_for(dataset)
    target5, lengths = model.targets(dataset)
    result = TrainResult(model)
    result.initial_nll = dataset_nll(model, images, target5, lengths)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr0, clip_norm=cfg.clip_norm)
    bad_run = 0
    n = len(dataset)
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = learning_rate(cfg, epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = np.sort(order[start:start + cfg.batch])
            eps = rng.standard_normal((len(idx), model.cfg.z_dim))
            loss = model.loss(images[idx], target5[idx], lengths[idx], eps)
            value = float(loss.data)
            if not math.isfinite(value):
                bad_run += 1
                result.skipped_steps += 1
                log.warning("non-finite loss at step %d (epoch %d); step skipped", step, epoch)
                if bad_run > MAX_CONSECUTIVE_BAD:
                    raise NonFiniteLoss(f"more than {MAX_CONSECUTIVE_BAD} consecutive non-finite losses")
                continue
            bad_run = 0
            opt.step(gradient(loss, params))
            result.curve.append({"step": step, "epoch": epoch, "lr": opt.lr, "nll": value})
            if on_step is not None:
                on_step(step, epoch, value)
            step += 1
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    result.steps = step
    result.final_nll = dataset_nll(model, images, target5, lengths)
    return result


def write_loss_curve(path: str | Path, curve: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "lr", "nll"])
        for row in curve:
            w.writerow([row["step"], row["epoch"], repr(row["lr"]), repr(row["nll"])])
