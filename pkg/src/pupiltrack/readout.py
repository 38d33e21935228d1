"""From output spikes to a pupil position.

Spikes pass through a fixed causal filter (synaptic kernel convolved with a
membrane kernel), the 160 channels are read as a 4x4 grid with two anchors of
``(x_tr, y_tr, x_bl, y_bl, conf)``, and the best box after NMS gives the centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None

FRAME_SIZE = 64
GRID = 4
ANCHORS = 2
COMPONENTS = 5  # x_tr, y_tr, x_bl, y_bl, conf
OUTPUT_CHANNELS = GRID * GRID * ANCHORS * COMPONENTS
CELL_SIZE = FRAME_SIZE // GRID
TARGET_HALF_SIZE = 2


@dataclass(frozen=True)
class TemporalFilter:
    tau_mem: float
    tau_syn: float
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def gain(self) -> float:
        """Response to a constant unit input once the kernel is full."""
        return float(np.sum(self.weights))


def build_filter(tau_mem: float = 5.0, tau_syn: float = 5.0, size: int = 20) -> TemporalFilter:
    """Weights ``w[t] = sum_{k<=t} S[k] M[t-k]`` with ``S = exp(-t/tau_syn)``, ``M = exp(-t/tau_mem)``."""
    if tau_mem <= 0 or tau_syn <= 0:
        raise ValueError("time constants must be positive")
    if size < 1:
        raise ValueError("kernel size must be >= 1")
    t = np.arange(size, dtype=np.float64)
    syn = np.exp(-t / tau_syn)
    mem = np.exp(-t / tau_mem)
    weights = np.convolve(syn, mem)[:size]
    weights.flags.writeable = False
    return TemporalFilter(float(tau_mem), float(tau_syn), weights)


def apply_filter(filt: TemporalFilter, x):
    """Causal weighted sum over time: ``y[t] = sum_i w[i] x[t-i]`` with zero history.

    ``x`` has time on axis 0 for numpy input, and on axis 1 for torch input of
    shape (B, T, C); other shapes are handled along axis 0.
    """
    w = filt.weights
    if torch is not None and isinstance(x, torch.Tensor):
        axis = 1 if x.dim() == 3 else 0
        T = x.shape[axis]
        y = torch.zeros_like(x)
        for i in range(min(len(w), T)):
            shifted = x.narrow(axis, 0, T - i)
            pad_shape = list(x.shape)
            pad_shape[axis] = i
            shifted = torch.cat([x.new_zeros(pad_shape), shifted], dim=axis)
            y = y + float(w[i]) * shifted
        return y
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    y = np.zeros_like(x)
    for i in range(min(len(w), T)):
        y[i:] += w[i] * x[: T - i]
    return y


def decode_grid(filtered):
    """(T, 160) -> (T, 4, 4, 2, 5), row-major over (cell_row, cell_col, anchor, component)."""
    shape = tuple(filtered.shape)
    if shape[-1] != OUTPUT_CHANNELS:
        raise ValueError(f"expected {OUTPUT_CHANNELS} channels, got {shape[-1]}")
    return filtered.reshape(*shape[:-1], GRID, GRID, ANCHORS, COMPONENTS)


def encode_grid(grid):
    """Inverse of :func:`decode_grid`."""
    shape = tuple(grid.shape)
    return grid.reshape(*shape[:-4], OUTPUT_CHANNELS)


class BBox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    @property
    def area(self) -> float:
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def centroid(box: BBox) -> tuple[float, float]:
    return ((box.x_min + box.x_max) / 2, (box.y_min + box.y_max) / 2)


def make_target(x: float, y: float):
    """Target box (label expanded by 2 px, clipped to the frame) and owning cell ``(row, col)``."""
    hi = FRAME_SIZE - 1
    box = BBox(
        min(max(x - TARGET_HALF_SIZE, 0.0), hi), min(max(y - TARGET_HALF_SIZE, 0.0), hi),
        min(max(x + TARGET_HALF_SIZE, 0.0), hi), min(max(y + TARGET_HALF_SIZE, 0.0), hi),
        1.0,
    )
    cell = (min(int(math.floor(y / CELL_SIZE)), GRID - 1), min(int(math.floor(x / CELL_SIZE)), GRID - 1))
    return box, cell


def box_to_components(box: BBox) -> np.ndarray:
    """Normalized ``(x_tr, y_tr, x_bl, y_bl)``: top-right is (x_max, y_min), bottom-left (x_min, y_max)."""
    return np.array([box.x_max, box.y_min, box.x_min, box.y_max]) / FRAME_SIZE


def target_grid(labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin training targets for (T, 2) labels.

    Returns ``(grid, mask)``: grid (T, 4, 4, 2, 5) with the target box in both
    anchors of the owning cell and confidence 1 there, 0 elsewhere; mask
    (T, 4, 4) is 1 for owning cells.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    grid = np.zeros((len(labels), GRID, GRID, ANCHORS, COMPONENTS))
    mask = np.zeros((len(labels), GRID, GRID))
    for t, (x, y) in enumerate(labels):
        box, (r, c) = make_target(x, y)
        grid[t, r, c, :, :4] = box_to_components(box)
        grid[t, r, c, :, 4] = 1.0
        mask[t, r, c] = 1.0
    return grid, mask


def mask_cells(prediction, mask):
    """Zero every cell without a target box. ``mask`` broadcasts over (..., 4, 4)."""
    return prediction * mask[..., None, None]


def grid_boxes(grid_bin) -> list[BBox]:
    """All 32 candidate boxes of one bin, corners sorted and scaled to pixels, clipped to the frame."""
    g = np.asarray(grid_bin, dtype=np.float64).reshape(-1, COMPONENTS)
    hi = FRAME_SIZE - 1
    xs = np.clip(g[:, [0, 2]] * FRAME_SIZE, 0, hi)
    ys = np.clip(g[:, [1, 3]] * FRAME_SIZE, 0, hi)
    return [
        BBox(float(xs[i].min()), float(ys[i].min()), float(xs[i].max()), float(ys[i].max()), float(g[i, 4]))
        for i in range(len(g))
    ]


def _rank_key(box: BBox):
    return (-box.confidence, box.x_min, box.y_min)


def nms(boxes, iou_threshold: float = 0.5) -> list[BBox]:
    """Greedy NMS; ties in confidence go to the lexicographically smaller (x_min, y_min)."""
    remaining = sorted(boxes, key=_rank_key)
    kept: list[BBox] = []
    for box in remaining:
        if all(iou(box, k) <= iou_threshold for k in kept):
            kept.append(box)
    return kept


def predict_box(grid_bin, iou_threshold: float = 0.5) -> BBox:
    return nms(grid_boxes(grid_bin), iou_threshold)[0]


@dataclass(frozen=True)
class Readout:
    """Filter + normalization + grid decoding as one step.

    ``normalize`` divides the filtered spike trains by the filter gain so a
    neuron firing every bin reads 1.0: output coordinates become weighted
    firing rates in [0, 1].
    """

    filt: TemporalFilter
    normalize: bool = True

    def __call__(self, spikes):
        y = apply_filter(self.filt, spikes)
        if self.normalize:
            y = y / self.filt.gain
        return decode_grid(y)

    def predict(self, spikes, iou_threshold: float = 0.5) -> list[BBox]:
        """(T, 160) spikes -> one box per bin."""
        grid = self(np.asarray(spikes, dtype=np.float64))
        return [predict_box(g, iou_threshold) for g in grid]


PREDICTION_HEADER = ["bin", "x_min", "y_min", "x_max", "y_max", "conf", "cx", "cy"]


def write_predictions(boxes, path, first_bin: int = 0) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(PREDICTION_HEADER) + "\n")
        for i, b in enumerate(boxes):
            cx, cy = centroid(b)
            fh.write(f"{first_bin + i},{b.x_min:.6g},{b.y_min:.6g},{b.x_max:.6g},{b.y_max:.6g},"
                     f"{b.confidence:.6g},{cx:.6g},{cy:.6g}\n")
