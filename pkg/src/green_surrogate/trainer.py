"""Training loop: Adam on one of the three losses, validation against
converged references, k-schedule updates, best-checkpoint tracking, and a
history table.

Reproducibility is taken seriously: batch order comes from a counter-based
RNG stream (seed, epoch), torch is pinned single-threaded in deterministic
mode, and the history file records 0.0 wall seconds there so two runs with
the same config produce byte-identical history and checkpoints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .grid import atomic_write_bytes
from .losses import (
    LOSS_KINDS,
    init_schedule,
    loss_data,
    loss_jacobi,
    loss_residual,
    update_k,
)
from .model import GreenUNet, save_checkpoint, set_deterministic
from .operator import StencilCoeffs
from .source import Dataset

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "k", "seconds", "sweeps")


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite; the CLI maps this to exit 3."""


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "jacobi"
    k_strategy: str = "adaptive"
    k: int | None = None  # constant strategy only
    epochs: int = 150
    batch_size: int = 6
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    num_threads: int = 1

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}, expected one of {LOSS_KINDS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "loss": self.loss, "k_strategy": self.k_strategy, "k": self.k,
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "seed": self.seed, "deterministic": self.deterministic,
            "num_threads": self.num_threads,
        }


@dataclass
class EpochStats:
    epoch: int        # 1-based
    train_loss: float  # summed loss over the epoch divided by sample count
    val_loss: float    # mean mesh-weighted squared l2 error vs references
    k: int             # sweep count used this epoch (0 for non-jacobi losses)
    seconds: float
    sweeps: int        # cumulative field-sweeps executed so far


@dataclass
class TrainResult:
    model: GreenUNet
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    best_path: str | None = None
    final_path: str | None = None
    history_path: str | None = None


def history_to_csv(history: list[EpochStats]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(
            f"{row.epoch},{row.train_loss!r},{row.val_loss!r},{row.k},"
            f"{row.seconds!r},{row.sweeps}"
        )
    return "\n".join(lines) + "\n"


def read_history_csv(path) -> list[EpochStats]:
    import csv

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != HISTORY_COLUMNS:
            raise ValueError(f"unexpected history columns in {path}: {reader.fieldnames}")
        return [EpochStats(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                           int(r["k"]), float(r["seconds"]), int(r["sweeps"]))
                for r in reader]


def validation_loss(model: GreenUNet, X_val: torch.Tensor, refs: torch.Tensor,
                    h1: float, h2: float, batch_size: int = 32) -> float:
    """Mean over samples of h1*h2*sum((prediction - reference)^2)."""
    total = 0.0
    with torch.no_grad():
        for lo in range(0, X_val.shape[0], batch_size):
            xb = X_val[lo:lo + batch_size]
            pred = model(xb)
            d = pred - refs[lo:lo + batch_size]
            total += float((d * d).sum(dim=(1, 2)).sum()) * h1 * h2
    return total / X_val.shape[0]


def _to_torch_inputs(ds: Dataset) -> torch.Tensor:
    arr = ds.input_array()  # (B, n, m, C)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def train(
    model: GreenUNet,
    stencil: StencilCoeffs,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    log=None,
) -> TrainResult:
    if cfg.deterministic:
        set_deterministic(cfg.num_threads)
    else:
        torch.set_num_threads(cfg.num_threads)

    grid = stencil.grid
    if train_ds.grid != grid or val_ds.grid != grid:
        raise ValueError("dataset grids do not match the stencil grid")
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("need at least one training and one validation sample")
    if not val_ds.has_references():
        raise ValueError("validation dataset must carry converged reference fields")
    if cfg.loss == "data" and not train_ds.has_references():
        raise ValueError("loss 'data' needs reference fields in the training dataset")

    X = _to_torch_inputs(train_ds)
    rho = torch.from_numpy(train_ds.rho_array())
    refs = torch.from_numpy(train_ds.reference_array()) if cfg.loss == "data" else None
    X_val = _to_torch_inputs(val_ds)
    refs_val = torch.from_numpy(val_ds.reference_array())

    schedule = init_schedule(cfg.k_strategy, cfg.k)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                           betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    result = TrainResult(model)
    n_train = X.shape[0]
    total_sweeps = 0

    def ckpt_metadata(epoch, val_loss, sched):
        return {
            "epoch": epoch,
            "val_loss": val_loss,
            "train_config": cfg.to_dict(),
            "k_state": {"strategy": sched.strategy, "k": sched.k,
                        "epoch": sched.epoch, "prev_val_loss": sched.prev_val_loss},
            "dataset": {
                "variant": train_ds.variant,
                "sigma_factor": train_ds.config.sigma_factor,
                "margin_cells": train_ds.config.margin_cells,
                "seed": train_ds.config.seed,
                "coeffs": train_ds.coeffs_name,
                "train_count": len(train_ds),
                "val_count": len(val_ds),
                "grid": {
                    "x0": train_ds.grid.domain.x0,
                    "y0": train_ds.grid.domain.y0,
                    "L1": train_ds.grid.domain.L1,
                    "L2": train_ds.grid.domain.L2,
                },
            },
        }

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        k_epoch = schedule.k if cfg.loss == "jacobi" else 0
        order = np.random.default_rng((cfg.seed, epoch)).permutation(n_train)
        epoch_loss = 0.0

        for lo in range(0, n_train, cfg.batch_size):
            idx = torch.from_numpy(order[lo:lo + cfg.batch_size])
            opt.zero_grad()
            pred = model(X[idx])
            if not bool(torch.isfinite(pred).all()):
                raise TrainingDiverged(f"model output became non-finite in epoch {epoch}")
            if cfg.loss == "residual":
                loss = loss_residual(stencil, pred, rho[idx])
            elif cfg.loss == "jacobi":
                loss = loss_jacobi(stencil, pred, rho[idx], k_epoch)
                total_sweeps += k_epoch * len(idx)
            else:
                loss = loss_data(pred, refs[idx])
            lval = float(loss.detach())
            if not np.isfinite(lval):
                raise TrainingDiverged(f"training loss became {lval} in epoch {epoch}")
            loss.backward()
            opt.step()
            epoch_loss += lval

        val = validation_loss(model, X_val, refs_val, grid.h1, grid.h2)
        if not np.isfinite(val):
            raise TrainingDiverged(f"validation loss became {val} in epoch {epoch}")

        seconds = 0.0 if cfg.deterministic else time.perf_counter() - t0
        row = EpochStats(epoch, epoch_loss / n_train, val, k_epoch, seconds, total_sweeps)
        result.history.append(row)
        if log is not None:
            log(f"epoch {epoch:4d}  train {row.train_loss:.6e}  val {val:.6e}  k {k_epoch}")

        if val < result.best_val_loss:
            result.best_val_loss = val
            result.best_epoch = epoch
            if out is not None:
                best = out / "best.ckpt"
                save_checkpoint(best, model, ckpt_metadata(epoch, val, schedule))
                result.best_path = str(best)

        schedule = update_k(schedule, val)

    if out is not None:
        final = out / "final.ckpt"
        save_checkpoint(final, model, ckpt_metadata(cfg.epochs, result.history[-1].val_loss, schedule))
        result.final_path = str(final)
        hist = out / "history.csv"
        atomic_write_bytes(hist, history_to_csv(result.history).encode())
        result.history_path = str(hist)
    return result
