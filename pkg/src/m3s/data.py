"""Dataset ingestion: CSV + image join by exact timestamp, physical-range
validation, sliding windows, 7:1:2 splitting, and train-statistics
normalization.

Everything downstream works on window indices into one in-memory store, so
split bookkeeping is a matter of integer sets and leakage is checkable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .nn import seeded_rng

COLUMNS = ("ghi", "dni", "dhi", "ws", "wd", "t", "rh", "p")
CSV_HEADER = "timestamp," + ",".join(COLUMNS)
TARGET_COL = 0               # ghi


def _check_row(values: np.ndarray, lineno: int) -> None:
    ghi, dni, dhi, _ws, wd, _t, rh, _p = values
    if min(ghi, dni, dhi) < 0:
        raise DataError(f"series.csv:{lineno}: negative irradiance {values[:3]}")
    if not 0 <= rh <= 100:
        raise DataError(f"series.csv:{lineno}: RH {rh} outside [0, 100]")
    if not 0 <= wd < 360:
        raise DataError(f"series.csv:{lineno}: WD {wd} outside [0, 360)")


@dataclass
class SolarDataset:
    """Joined rows: series matrix plus per-row images and optional masks."""

    timestamps: list[str]
    series: np.ndarray                    # (n, 8) float64
    images: np.ndarray                    # (n, H, W, 3) uint8
    masks: np.ndarray | None              # (n, H, W) uint8 or None
    dropped: int = 0

    def __len__(self) -> int:
        return self.series.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def frames_float(self, rows: np.ndarray) -> np.ndarray:
        """(k, 3, H, W) float64 in [0, 1] for the given row indices."""
        sel = self.images[rows].astype(np.float64) / 255.0
        return np.transpose(sel, (0, 3, 1, 2))


def load_dataset(root: str, with_masks: bool = True) -> SolarDataset:
    """Parse series.csv and join rows to images/<timestamp>.png exactly;
    rows without an image are dropped and counted."""
    csv_path = os.path.join(root, "series.csv")
    try:
        with open(csv_path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {csv_path}: {exc}")
    if not lines or lines[0] != CSV_HEADER:
        head = lines[0] if lines else "<empty>"
        raise DataError(f"series.csv: expected header {CSV_HEADER!r}, got {head!r}")

    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    timestamps: list[str] = []
    rows: list[np.ndarray] = []
    image_files: list[str] = []
    mask_files: list[str] = []
    dropped = 0
    have_masks = with_masks and os.path.isdir(mask_dir)

    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 1 + len(COLUMNS):
            raise DataError(
                f"series.csv:{lineno}: expected {1 + len(COLUMNS)} fields, "
                f"got {len(parts)}")
        stamp = parts[0]
        try:
            values = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError:
            raise DataError(f"series.csv:{lineno}: non-numeric value in {line!r}")
        _check_row(values, lineno)
        img_path = os.path.join(img_dir, stamp + ".png")
        if not os.path.isfile(img_path):
            dropped += 1
            continue
        timestamps.append(stamp)
        rows.append(values)
        image_files.append(img_path)
        if have_masks:
            mpath = os.path.join(mask_dir, stamp + ".png")
            mask_files.append(mpath if os.path.isfile(mpath) else "")

    if not rows:
        raise DataError(f"{root}: no usable rows (dropped {dropped})")
    if timestamps != sorted(timestamps):
        raise DataError("series.csv: timestamps not strictly increasing")
    if len(set(timestamps)) != len(timestamps):
        raise DataError("series.csv: duplicate timestamps")

    images = np.stack([np.asarray(Image.open(p).convert("RGB"))
                       for p in image_files])
    masks = None
    if have_masks and all(mask_files):
        masks = np.stack([np.asarray(Image.open(p).convert("L"))
                          for p in mask_files])
        if masks.max() > 3:
            raise DataError(f"masks contain class {masks.max()} > 3")
    return SolarDataset(timestamps=timestamps,
                        series=np.stack(rows), images=images, masks=masks,
                        dropped=dropped)


@dataclass
class WindowSet:
    """Sliding windows over a dataset: start indices plus the window shape."""

    dataset: SolarDataset
    lookback: int
    tau: int
    n_frames: int
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.intp))

    def __len__(self) -> int:
        return self.starts.shape[0]

    def frame_rows(self, i: int) -> np.ndarray:
        """Frames cover the most recent n_frames lookback timestamps."""
        s = int(self.starts[i])
        end = s + self.lookback
        return np.arange(end - self.n_frames, end, dtype=np.intp)

    def row_span(self, i: int) -> range:
        s = int(self.starts[i])
        return range(s, s + self.lookback + self.tau)

    def sample(self, i: int):
        """(series (L, 8), frames (T, 3, H, W), target (tau,), masks or None)."""
        s = int(self.starts[i])
        ds = self.dataset
        series = ds.series[s:s + self.lookback]
        frames = ds.frames_float(self.frame_rows(i))
        target = ds.series[s + self.lookback:s + self.lookback + self.tau,
                           TARGET_COL]
        masks = None
        if ds.masks is not None:
            masks = ds.masks[self.frame_rows(i)]
        return series, frames, target, masks


def make_windows(ds: SolarDataset, lookback: int, tau: int, n_frames: int,
                 stride: int = 1) -> WindowSet:
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if n_frames > lookback:
        raise ConfigError(f"n_frames {n_frames} exceeds lookback {lookback}")
    span = lookback + tau
    if len(ds) < span:
        raise DataError(
            f"dataset has {len(ds)} rows, a window needs {span}")
    starts = np.arange(0, len(ds) - span + 1, stride, dtype=np.intp)
    return WindowSet(dataset=ds, lookback=lookback, tau=tau,
                     n_frames=n_frames, starts=starts)


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split_731(n_windows: int, seed: int) -> Split:
    """Seeded shuffle, then a 7:1:2 fraction cut over window indices."""
    if n_windows < 10:
        raise ConfigError(f"need >= 10 windows to split 7:1:2, got {n_windows}")
    perm = seeded_rng(seed).permutation(n_windows)
    n_train = int(0.7 * n_windows)
    n_val = int(0.1 * n_windows)
    return Split(train=np.sort(perm[:n_train]),
                 val=np.sort(perm[n_train:n_train + n_val]),
                 test=np.sort(perm[n_train + n_val:]))


def row_overlap(windows: WindowSet, a: np.ndarray, b: np.ndarray) -> int:
    """Number of dataset rows touched by both index groups (leakage probe)."""
    rows_a = set()
    for i in a:
        rows_a.update(windows.row_span(int(i)))
    rows_b = set()
    for i in b:
        rows_b.update(windows.row_span(int(i)))
    return len(rows_a & rows_b)


@dataclass
class Normalizer:
    """Per-column z-score with train-only statistics."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, ds: SolarDataset, windows: WindowSet,
            train_idx: np.ndarray) -> "Normalizer":
        rows = sorted({r for i in train_idx
                       for r in windows.row_span(int(i))})
        train_rows = ds.series[np.asarray(rows, dtype=np.intp)]
        mean = train_rows.mean(axis=0)
        std = train_rows.std(axis=0)
        flat = np.flatnonzero(std <= 0)
        if flat.size:
            names = [COLUMNS[int(j)] for j in flat]
            raise DataError(f"zero train variance in column(s) {names}")
        return cls(mean=mean, std=std)

    def transform(self, series: np.ndarray) -> np.ndarray:
        return (series - self.mean) / self.std

    def inverse(self, series: np.ndarray) -> np.ndarray:
        return series * self.std + self.mean

    def transform_target(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[TARGET_COL]) / self.std[TARGET_COL]

    def inverse_target(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[TARGET_COL] + self.mean[TARGET_COL]

    def to_text(self) -> str:
        lines = ["column,mean,std"]
        for name, m, s in zip(COLUMNS, self.mean, self.std):
            lines.append(f"{name},{float(m)!r},{float(s)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Normalizer":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "column,mean,std":
            raise DataError("normalizer stats: bad header")
        if len(lines) != 1 + len(COLUMNS):
            raise DataError(
                f"normalizer stats: expected {len(COLUMNS)} rows, "
                f"got {len(lines) - 1}")
        mean, std = [], []
        for ln, name in zip(lines[1:], COLUMNS):
            col, m, s = ln.split(",")
            if col != name:
                raise DataError(f"normalizer stats: column {col!r} != {name!r}")
            mean.append(float(m))
            std.append(float(s))
        return cls(mean=np.array(mean), std=np.array(std))


def mask_one_hot(masks: np.ndarray, num_classes: int = 4) -> np.ndarray:
    """(k, H, W) class indices -> (k, num_classes, H, W) {0,1} float."""
    k, h, w = masks.shape
    out = np.zeros((k, num_classes, h, w))
    for c in range(num_classes):
        out[:, c] = masks == c
    return out


__all__ = ["COLUMNS", "CSV_HEADER", "TARGET_COL", "SolarDataset", "WindowSet",
           "load_dataset", "make_windows", "Split", "split_731",
           "row_overlap", "Normalizer", "mask_one_hot"]
