"""Training/evaluation engine: Adam with global-norm clipping, early
stopping on validation loss, best-checkpoint retention, and denormalized
per-horizon evaluation.

Determinism contract: with a fixed config, dataset, and seed, the epoch
losses, the checkpoint bytes, and the log text are bit-identical across
runs.  Wall-clock time is therefore written to a sidecar file, never into
the log itself.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, load_config
from .data import (COLUMNS, Normalizer, WindowSet, mask_one_hot)
from .errors import ConfigError, ContractError, DataError, NumericError
from .metrics import MetricReport, bce_loss, forecast_report, mse_loss
from .model import build_model
from .nn import Module
from .tensor import Tape, Tensor, backward, load_tensors, save_tensors

CHECKPOINT = "checkpoint.m3s"
CONFIG_TXT = "config.txt"
STATS_TXT = "stats.txt"
LOG_TXT = "log.txt"
TIME_TXT = "log.time.txt"


class Adam:
    """Adaptive-moment estimation with optional global gradient-norm clip."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = 1.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def _grads(self) -> list[np.ndarray]:
        return [np.zeros(p.shape) if p.grad is None else p.grad
                for p in self.params]

    def step(self) -> float:
        """One update from the accumulated gradients; returns the (pre-clip)
        global gradient norm."""
        grads = self._grads()
        gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if self.clip_norm is not None and gnorm > self.clip_norm and gnorm > 0:
            scale = self.clip_norm / gnorm
            grads = [g * scale for g in grads]
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return gnorm

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainLog:
    """Reproducible record of one run; wall time lives outside to_text()."""

    seed: int
    scheme: str
    entries: list = field(default_factory=list)
    best_epoch: int = -1
    wall_seconds: float = 0.0

    def append(self, epoch: int, train_loss: float, val_loss: float) -> None:
        self.entries.append(EpochStats(epoch, train_loss, val_loss))

    def to_text(self) -> str:
        lines = ["# m3s training log",
                 f"seed = {self.seed}",
                 f"scheme = {self.scheme}",
                 f"best_epoch = {self.best_epoch}",
                 "epoch,train_loss,val_loss"]
        for e in self.entries:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.val_loss!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainLog":
        lines = text.splitlines()
        if len(lines) < 5 or lines[0] != "# m3s training log":
            raise DataError("training log: missing '# m3s training log' header")
        try:
            seed = int(lines[1].split("=")[1])
            scheme = lines[2].split("=")[1].strip()
            best = int(lines[3].split("=")[1])
        except (IndexError, ValueError):
            raise DataError("training log: malformed preamble (lines 2-4)")
        if lines[4] != "epoch,train_loss,val_loss":
            raise DataError("training log:5: expected column header")
        log = cls(seed=seed, scheme=scheme, best_epoch=best)
        for lineno, row in enumerate(lines[5:], start=6):
            if not row.strip():
                continue
            parts = row.split(",")
            try:
                log.append(int(parts[0]), float(parts[1]), float(parts[2]))
            except (IndexError, ValueError):
                raise DataError(f"training log:{lineno}: bad row {row!r}")
        return log


def collate(windows: WindowSet, normalizer: Normalizer, idx: np.ndarray,
            with_frames: bool, with_masks: bool):
    """Stack normalized series/targets (and frames/one-hot masks) for idx."""
    series, frames, targets, masks = [], [], [], []
    for i in idx:
        s, f, y, m = windows.sample(int(i))
        series.append(normalizer.transform(s))
        targets.append(normalizer.transform_target(y))
        if with_frames:
            frames.append(f)
        if with_masks:
            masks.append(m)
    out_frames = Tensor(np.stack(frames)) if with_frames else None
    out_masks = None
    if with_masks:
        out_masks = Tensor(mask_one_hot(np.concatenate(masks, axis=0)))
    return (Tensor(np.stack(series)), out_frames,
            Tensor(np.stack(targets)), out_masks)


def _model_uses_frames(model: Module) -> bool:
    return bool(getattr(model, "_has_visual", False))


def batch_losses(model: Module, windows: WindowSet, normalizer: Normalizer,
                 idx: np.ndarray, batch: int, beta: float,
                 train_masks: bool):
    """Forward-only mean forecast loss (and BCE part) over idx."""
    total, total_bce, count = 0.0, 0.0, 0
    use_frames = _model_uses_frames(model)
    for lo in range(0, len(idx), batch):
        chunk = idx[lo:lo + batch]
        series, frames, targets, masks = collate(
            windows, normalizer, chunk, use_frames,
            train_masks and use_frames)
        forecast, seg = model(series, frames,
                              want_seg=train_masks and use_frames)
        total += float(mse_loss(forecast, targets).numpy()) * len(chunk)
        if seg is not None and masks is not None:
            total_bce += float(bce_loss(seg, masks).numpy()) * len(chunk)
        count += len(chunk)
    return total / count, (beta * total_bce / count if count else 0.0)


def train(cfg: ExperimentConfig, windows: WindowSet, split,
          normalizer: Normalizer, out_dir: str,
          log_fn=None) -> tuple[TrainLog, Module]:
    """Optimize cfg.scheme on the train split; keep the best-val weights."""
    cfg.validate()
    t0 = time.monotonic()
    model = build_model(cfg, n_vars=len(COLUMNS))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    use_frames = _model_uses_frames(model)
    use_masks = (use_frames and cfg.beta > 0
                 and windows.dataset.masks is not None)

    log = TrainLog(seed=cfg.seed, scheme=cfg.scheme)
    best_val = np.inf
    best_state = model.state_dict()
    stale = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 7919, epoch]).permutation(
            split.train)
        epoch_loss, n_seen = 0.0, 0
        for lo in range(0, len(order), cfg.batch):
            chunk = order[lo:lo + cfg.batch]
            series, frames, targets, masks = collate(
                windows, normalizer, chunk, use_frames, use_masks)
            try:
                if params:
                    with Tape() as tape:
                        forecast, seg = model(series, frames,
                                              want_seg=use_masks)
                        loss = mse_loss(forecast, targets)
                        if seg is not None and masks is not None:
                            loss = T.add(loss, T.mul(
                                bce_loss(seg, masks),
                                Tensor(np.asarray(cfg.beta))))
                    backward(tape, loss)
                    opt.step()
                    opt.zero_grad()
                else:
                    forecast, seg = model(series, frames, want_seg=use_masks)
                    loss = mse_loss(forecast, targets)
            except NumericError as exc:
                raise NumericError(
                    f"non-finite training step (epoch {epoch}, "
                    f"windows {chunk[:4]}...): {exc}")
            epoch_loss += float(loss.numpy()) * len(chunk)
            n_seen += len(chunk)
        train_loss = epoch_loss / n_seen
        val_loss, _ = batch_losses(model, windows, normalizer, split.val,
                                   cfg.batch, cfg.beta, train_masks=False)
        log.append(epoch, train_loss, val_loss)
        if log_fn:
            log_fn(f"epoch {epoch}: train {train_loss:.6f} val {val_loss:.6f}")
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.state_dict()
            log.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    model.load_state_dict(best_state)
    log.wall_seconds = time.monotonic() - t0
    save_run(out_dir, cfg, model, normalizer, log)
    return log, model


def save_run(out_dir: str, cfg: ExperimentConfig, model: Module,
             normalizer: Normalizer, log: TrainLog | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_tensors(os.path.join(out_dir, CHECKPOINT),
                 {name: p.data for name, p in model.named_parameters()})
    with open(os.path.join(out_dir, CONFIG_TXT), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    with open(os.path.join(out_dir, STATS_TXT), "w", encoding="utf-8") as fh:
        fh.write(normalizer.to_text())
    if log is not None:
        with open(os.path.join(out_dir, LOG_TXT), "w", encoding="utf-8") as fh:
            fh.write(log.to_text())
        with open(os.path.join(out_dir, TIME_TXT), "w",
                  encoding="utf-8") as fh:
            fh.write(f"wall_seconds = {log.wall_seconds:.3f}\n")


def load_run(out_dir: str) -> tuple[ExperimentConfig, Module, Normalizer]:
    """Rebuild the model of a saved run and load its weights."""
    cfg = load_config(os.path.join(out_dir, CONFIG_TXT)).validate()
    model = build_model(cfg, n_vars=len(COLUMNS))
    state = load_tensors(os.path.join(out_dir, CHECKPOINT))
    try:
        model.load_state_dict(state)
    except ContractError as exc:
        raise ContractError(
            f"checkpoint in {out_dir} does not match its config: {exc}")
    with open(os.path.join(out_dir, STATS_TXT), "r", encoding="utf-8") as fh:
        normalizer = Normalizer.from_text(fh.read())
    return cfg, model, normalizer


def evaluate(model: Module, windows: WindowSet, idx: np.ndarray,
             normalizer: Normalizer, horizons=None,
             batch: int = 16) -> MetricReport:
    """Denormalized per-step metrics over the given windows."""
    tau = windows.tau
    if horizons is not None:
        bad = [h for h in horizons if not 1 <= h <= tau]
        if bad:
            raise ContractError(f"horizon step(s) {bad} outside 1..{tau}")
    use_frames = _model_uses_frames(model)
    preds, truths = [], []
    for lo in range(0, len(idx), batch):
        chunk = idx[lo:lo + batch]
        series, frames, _targets, _ = collate(windows, normalizer, chunk,
                                              use_frames, False)
        forecast, _ = model(series, frames)
        preds.append(normalizer.inverse_target(forecast.numpy()))
        truths.append(np.stack([windows.sample(int(i))[2] for i in chunk]))
    y = np.concatenate(truths)
    y_hat = np.concatenate(preds)
    if horizons is not None:
        sel = [h - 1 for h in horizons]
        report = forecast_report(y[:, sel], y_hat[:, sel])
        for row, h in zip(report.rows, horizons):
            row.step = h
        return report
    return forecast_report(y, y_hat)


def train_segmentation(branch, frames: np.ndarray, masks: np.ndarray,
                       steps: int, lr: float = 1e-3, batch: int = 8,
                       seed: int = 0, clip_norm: float = 1.0,
                       balance: bool = False) -> list[float]:
    """Optimize a visual branch on pixel-wise BCE alone; returns the loss
    trace.  frames: (n, 3, H, W) float in [0,1]; masks: (n, H, W) classes.

    With ``balance`` the per-pixel terms are scaled by median-frequency
    class weights so rare classes (thin cloud in mostly-clear skies) are
    not drowned out by the background."""
    opt = Adam(branch.parameters(), lr=lr, clip_norm=clip_norm)
    one_hot = mask_one_hot(masks)
    n = frames.shape[0]
    wmap = None
    if balance:
        counts = np.bincount(masks.astype(np.int64).ravel(),
                             minlength=one_hot.shape[1])
        freq = counts / counts.sum()
        weights = np.zeros_like(freq)
        present = freq > 0
        weights[present] = np.median(freq[present]) / freq[present]
        wmap = weights[masks.astype(np.int64)][:, None]  # (n, 1, H, W)
    losses = []
    for step in range(steps):
        rng = np.random.default_rng([seed, 104729, step])
        idx = rng.choice(n, size=min(batch, n), replace=False)
        with Tape() as tape:
            _, seg = branch(Tensor(frames[idx]), want_seg=True)
            if wmap is None:
                loss = bce_loss(seg, Tensor(one_hot[idx]))
            else:
                targets = Tensor(one_hot[idx])
                pos = T.mul(targets, T.softplus(T.neg(seg)))
                neg = T.mul(T.sub(Tensor(np.asarray(1.0)), targets),
                            T.softplus(seg))
                elem = T.mul(Tensor(wmap[idx]), T.add(pos, neg))
                scale = 1.0 / (wmap[idx].sum() * one_hot.shape[1])
                loss = T.mul(T.sum_(elem), Tensor(np.asarray(scale)))
        backward(tape, loss)
        opt.step()
        opt.zero_grad()
        losses.append(float(loss.numpy()))
    return losses


def predict_masks(branch, frames: np.ndarray, batch: int = 8) -> np.ndarray:
    """Class map per frame via channel argmax of the segmentation logits."""
    outs = []
    for lo in range(0, frames.shape[0], batch):
        _, seg = branch(Tensor(frames[lo:lo + batch]), want_seg=True)
        outs.append(np.argmax(seg.numpy(), axis=1))
    return np.concatenate(outs).astype(np.uint8)


__all__ = ["Adam", "EpochStats", "TrainLog", "collate", "train", "evaluate",
           "save_run", "load_run", "train_segmentation", "predict_masks",
           "batch_losses", "CHECKPOINT", "CONFIG_TXT", "STATS_TXT", "LOG_TXT"]
