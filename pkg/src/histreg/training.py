"""Unsupervised SSD training of one registration stage."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import grids
from .geometry import Image2D, ThetaVector
from .matchnet import MatchNet, ModelConfig, save_model
from .synth import TrainingTuple

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.95
    batch_size: int = 64
    epochs: int = 50
    val_fraction: float = 0.1
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.lr_decay <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning rate, decay, batch size and epochs must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay**epoch


@dataclass
class TrainReport:
    kind: str
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = -1
    checkpoint: str = ""

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, directory, stem: str | None = None):
        """JSON report, CSV loss curve and a PNG plot."""
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        stem = stem or f"train_{self.kind}"
        (root / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        with open(root / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_loss", "val_loss"])
            for e, row in enumerate(zip(self.lr, self.train_loss, self.val_loss)):
                w.writerow([e, *(repr(float(v)) for v in row)])
        plot_loss_curves([self], root / f"{stem}.png")


def plot_loss_curves(reports: Sequence[TrainReport], path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(reports), figsize=(4.5 * len(reports), 3.5), squeeze=False)
    for ax, rep in zip(axes[0], reports):
        epochs = np.arange(1, len(rep.train_loss) + 1)
        ax.plot(epochs, rep.train_loss, label="training")
        ax.plot(epochs, rep.val_loss, label="validation")
        ax.set_title(f"{rep.kind} stage")
        ax.set_xlabel("epoch")
        ax.set_ylabel("SSD loss")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# loss


def ssd_per_pair(moving: torch.Tensor, fixed: torch.Tensor, theta: torch.Tensor, kind: str, alpha: float):
    """``sum (fixed - moving o phi_theta)^2`` for each pair of a batch."""
    grid = grids.grid_for(kind, theta, alpha, fixed.shape[-2:])
    warped = grids.warp(moving, grid)
    return ((fixed - warped) ** 2).flatten(1).sum(dim=1)


def ssd_loss(moving: Image2D, fixed: Image2D, theta: ThetaVector) -> float:
    """SSD between ``fixed`` and ``moving`` warped by ``theta``."""
    if moving.shape != fixed.shape:
        raise ValueError(f"image shapes differ: {moving.shape} vs {fixed.shape}")
    m = torch.as_tensor(moving.pixels, dtype=torch.float64)[None, None]
    f = torch.as_tensor(fixed.pixels, dtype=torch.float64)[None, None]
    t = torch.as_tensor(theta.values, dtype=torch.float64)[None]
    return float(ssd_per_pair(m, f, t, theta.kind, theta.alpha)[0])


# ---------------------------------------------------------------------------
# data


def split_by_source(tuples: Sequence[TrainingTuple], val_fraction: float, seed: int):
    """Hold out whole source images so no image appears on both sides."""
    sources = sorted({t.source for t in tuples})
    if len(sources) < 2:
        raise ValueError("need at least two source images for a validation split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(sources)
    n_val = min(max(1, int(round(val_fraction * len(sources)))), len(sources) - 1)
    val_sources = set(order[:n_val].tolist())
    train = [t for t in tuples if t.source not in val_sources]
    val = [t for t in tuples if t.source in val_sources]
    return train, val


def to_tensors(tuples: Sequence[TrainingTuple], dtype=torch.float32):
    moving = torch.as_tensor(np.stack([t.moving.pixels for t in tuples]), dtype=dtype)[:, None]
    fixed = torch.as_tensor(np.stack([t.fixed.pixels for t in tuples]), dtype=dtype)[:, None]
    return moving, fixed


@torch.no_grad()
def validate(model: MatchNet, val_set: Sequence[TrainingTuple], batch_size: int = 64) -> float:
    """Mean per-pair SSD over ``val_set`` in inference mode."""
    if not val_set:
        raise ValueError("empty validation set")
    was_training = model.training
    model.eval()
    moving, fixed = to_tensors(val_set, next(model.parameters()).dtype)
    total = 0.0
    for start in range(0, len(val_set), batch_size):
        m, f = moving[start : start + batch_size], fixed[start : start + batch_size]
        theta = model(m, f)
        total += float(ssd_per_pair(m, f, theta, model.kind, model.alpha).sum())
    model.train(was_training)
    return total / len(val_set)


# ---------------------------------------------------------------------------
# training loop


def train_stage(
    dataset: Sequence[TrainingTuple],
    kind: str,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    checkpoint: str | os.PathLike | None = None,
    val_set: Sequence[TrainingTuple] | None = None,
) -> tuple[MatchNet, TrainReport]:
    """Adam with per-epoch exponential decay; keeps the best validation model.

    Returns the model restored to its best epoch and the loss report.
    """
    if not dataset:
        raise ValueError("empty training set")
    for t in dataset:
        if t.theta_gt.kind != kind:
            raise ValueError(f"training tuple of kind {t.theta_gt.kind} in a {kind} stage")
    if val_set is None:
        train_set, val_set = split_by_source(dataset, cfg.val_fraction, cfg.seed)
    else:
        train_set = list(dataset)
    model_cfg = model_cfg or ModelConfig(kind=kind, canvas=dataset[0].moving.shape)
    if model_cfg.kind != kind:
        raise ValueError(f"model config is for {model_cfg.kind}, stage is {kind}")

    torch.manual_seed(cfg.seed)
    model = MatchNet(model_cfg)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.lr_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    moving, fixed = to_tensors(train_set)

    report = TrainReport(kind, checkpoint=str(checkpoint) if checkpoint else "")
    report.initial_val_loss = validate(model, val_set, cfg.batch_size)
    best_state = None
    for epoch in range(cfg.epochs):
        report.lr.append(opt.param_groups[0]["lr"])
        model.train()
        perm = torch.randperm(len(train_set), generator=gen)
        running, seen = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if idx.numel() < 2:
                # batch norm needs more than one sample
                continue
            m, f = moving[idx], fixed[idx]
            loss = ssd_per_pair(m, f, model(m, f), kind, model_cfg.alpha).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.detach()) * idx.numel()
            seen += idx.numel()
        sched.step()
        report.train_loss.append(running / max(seen, 1))
        report.val_loss.append(validate(model, val_set, cfg.batch_size))
        if report.best_epoch < 0 or report.val_loss[-1] < report.val_loss[report.best_epoch]:
            report.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if checkpoint:
                save_model(model, checkpoint, {"epoch": epoch, "val_loss": report.val_loss[-1]})
        log.info(
            "%s epoch %d lr %.2e train %.4f val %.4f",
            kind, epoch, report.lr[-1], report.train_loss[-1], report.val_loss[-1],
        )
    model.load_state_dict(best_state)
    model.eval()
    return model, report
