"""Composite loss, surrogate-gradient spike function, training loop and centroid evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .readout import Readout, build_filter, centroid, mask_cells, predict_box, target_grid
from .snn.network import SpikingNet

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_box: float = 7.5
    lambda_conf: float = 1.5
    lambda_syn: float = 1e-7
    syn_target: float = 1e6

    def __post_init__(self):
        if min(self.lambda_box, self.lambda_conf, self.lambda_syn, self.syn_target) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 576
    batch: int = 16
    sequence_length: int = 64
    lr: float = 1e-3
    lr_step: int = 64
    lr_gamma: float = 0.8
    surrogate_alpha: float = 1.0
    surrogate_beta: float = 10.0
    detach_reset: bool = True
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1 or self.sequence_length < 1 or self.lr_step < 1:
            raise ValueError("iterations, batch, sequence_length and lr_step must be positive")
        if self.lr < 0 or self.lr_gamma <= 0 or self.surrogate_alpha <= 0 or self.surrogate_beta <= 0:
            raise ValueError("lr, lr_gamma and surrogate parameters must be positive")


# ---------------------------------------------------------------------------
# losses


def loss_box(pred_boxes, target_boxes):
    """Sum of squared coordinate differences over matched boxes."""
    if tuple(pred_boxes.shape) != tuple(target_boxes.shape):
        raise ValueError(f"box count mismatch: {tuple(pred_boxes.shape)} vs {tuple(target_boxes.shape)}")
    return ((pred_boxes - target_boxes) ** 2).sum()


def loss_conf(pred_conf, target_conf):
    if tuple(pred_conf.shape) != tuple(target_conf.shape):
        raise ValueError(f"confidence shape mismatch: {tuple(pred_conf.shape)} vs {tuple(target_conf.shape)}")
    return ((pred_conf - target_conf) ** 2).sum()


def loss_syn(per_layer_ops, target: float = 1e6):
    """Squared deviation of each layer's synaptic operations from ``target``, normalized by ``target**2``."""
    ops = per_layer_ops if isinstance(per_layer_ops, torch.Tensor) else np.asarray(per_layer_ops, dtype=np.float64)
    return (((ops - target) / target) ** 2).sum()


def total_loss(box, conf, syn, weights: LossWeights = LossWeights()):
    return weights.lambda_box * box + weights.lambda_conf * conf + weights.lambda_syn * syn


def grid_losses(pred_grid, target, mask):
    """Box and confidence loss for (..., 4, 4, 2, 5) grids, averaged over the leading (batch, bin) entries.

    Box coordinates are compared only in cells owning a target; confidence is
    supervised in every cell.
    """
    n = int(np.prod(pred_grid.shape[:-4])) or 1
    masked = mask_cells(pred_grid, mask)
    box = loss_box(masked[..., :4], target[..., :4]) / n
    conf = loss_conf(pred_grid[..., 4], target[..., 4]) / n
    return box, conf


def centroid_error(pred, label) -> float:
    return math.dist(pred, label)


def centroid_errors(preds, labels) -> np.ndarray:
    return np.linalg.norm(np.asarray(preds, dtype=np.float64) - np.asarray(labels, dtype=np.float64), axis=-1)


# ---------------------------------------------------------------------------
# surrogate gradient


def surrogate_grad(v, threshold: float = 1.0, alpha: float = 1.0, beta: float = 10.0):
    """Pseudo-derivative of the spike step: ``alpha * exp(-beta |v - threshold|)``."""
    if isinstance(v, torch.Tensor):
        return alpha * torch.exp(-beta * (v - threshold).abs())
    return alpha * np.exp(-beta * np.abs(np.asarray(v, dtype=np.float64) - threshold))


class _SpikeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, alpha, beta):
        ctx.save_for_backward(x)
        ctx.alpha, ctx.beta = alpha, beta
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        return grad_out * surrogate_grad(x, 0.0, ctx.alpha, ctx.beta), None, None


@dataclass(frozen=True)
class SurrogateSpike:
    """Heaviside forward, exponential-bump backward. Called with ``v - threshold``."""

    alpha: float = 1.0
    beta: float = 10.0

    def __call__(self, x):
        return _SpikeFunction.apply(x, self.alpha, self.beta)


# ---------------------------------------------------------------------------
# data


@dataclass
class SequenceSet:
    frames: np.ndarray  # (N, T, 2, H, W) uint8
    labels: np.ndarray  # (N, T, 2)

    def __len__(self):
        return len(self.frames)

    @classmethod
    def from_sequences(cls, seqs, sequence_length: int | None = None) -> SequenceSet:
        if not seqs:
            raise ValueError("empty dataset")
        T = sequence_length or seqs[0].num_bins
        frames = np.stack([s.frames[-T:] for s in seqs])
        labels = np.stack([s.labels[-T:] for s in seqs])
        return cls(frames, labels)

    def subset(self, idx) -> SequenceSet:
        return SequenceSet(self.frames[idx], self.labels[idx])

    def targets(self):
        grid, mask = target_grid(self.labels.reshape(-1, 2))
        shape = self.labels.shape[:2]
        return grid.reshape(*shape, *grid.shape[1:]), mask.reshape(*shape, *mask.shape[1:])


@dataclass
class TrainResult:
    net: SpikingNet
    history: list = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row["loss_total"] for row in self.history])

    def write_log(self, path) -> None:
        cols = ["iter", "loss_total", "loss_box", "loss_conf", "loss_syn", "lr"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in self.history:
                fh.write(",".join(f"{row[c]:.9g}" if c != "iter" else str(row[c]) for c in cols) + "\n")


def train(net: SpikingNet, data: SequenceSet, cfg: TrainConfig = TrainConfig(),
          weights: LossWeights = LossWeights(), readout: Readout | None = None) -> TrainResult:
    """Backpropagation through time with surrogate spikes; membrane state restarts every iteration."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    readout = readout or Readout(build_filter())
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    T = min(cfg.sequence_length, data.frames.shape[1])
    frames = torch.from_numpy(np.ascontiguousarray(data.frames[:, -T:]))
    grid, mask = data.subset(slice(None)).targets()
    grid_t = torch.as_tensor(grid[:, -T:], dtype=net.dtype)
    mask_t = torch.as_tensor(mask[:, -T:], dtype=net.dtype)

    net.set_spike_fn(SurrogateSpike(cfg.surrogate_alpha, cfg.surrogate_beta), cfg.detach_reset)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_step, gamma=cfg.lr_gamma)
    result = TrainResult(net)
    n = len(data)
    try:
        for it in range(cfg.iterations):
            idx = rng.choice(n, size=cfg.batch, replace=n < cfg.batch)
            idx_t = torch.as_tensor(idx)
            out, trace = net(frames[idx_t].to(net.dtype))
            pred = readout(out)
            l_box, l_conf = grid_losses(pred, grid_t[idx_t], mask_t[idx_t])
            l_syn = loss_syn(trace.syn_ops, weights.syn_target) if trace.syn_ops is not None else out.new_zeros(())
            loss = total_loss(l_box, l_conf, l_syn, weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {it}: box={float(l_box)} conf={float(l_conf)} syn={float(l_syn)}")
            lr = opt.param_groups[0]["lr"]
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            result.history.append({
                "iter": it, "loss_total": loss.item(), "loss_box": l_box.item(),
                "loss_conf": l_conf.item(), "loss_syn": float(l_syn.detach()), "lr": lr,
            })
            if cfg.log_every and it % cfg.log_every == 0:
                log.info("iter %d loss %.4f box %.4f conf %.4f", it, float(loss), float(l_box), float(l_conf))
    finally:
        net.eval()
    return result


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    errors: np.ndarray  # (N,) centroid error at the final bin of each sequence
    all_bin_errors: np.ndarray  # (N, T)
    predictions: np.ndarray  # (N, T, 2) centroids
    firing_rates: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.errors.mean())

    @property
    def std(self) -> float:
        return float(self.errors.std())


def predict_centroids(net: SpikingNet, data: SequenceSet, readout: Readout | None = None,
                      batch: int = 16, iou_threshold: float = 0.5):
    """Centroid per bin for every sequence plus the pooled firing-rate profile."""
    readout = readout or Readout(build_filter())
    net.eval()
    cents, spikes, neurons, total = [], None, None, 0
    with torch.no_grad():
        for lo in range(0, len(data), batch):
            x = torch.as_tensor(data.frames[lo:lo + batch], dtype=net.dtype)
            out, trace = net(x)
            grid = readout(out.double()).numpy()
            for seq in grid:
                cents.append([centroid(predict_box(g, iou_threshold)) for g in seq])
            spikes = trace.spike_counts.sum(axis=1) if spikes is None else spikes + trace.spike_counts.sum(axis=1)
            neurons = trace.neurons
            total += trace.batch * trace.timesteps
    rates = spikes / (np.asarray(neurons, dtype=np.float64) * total)
    return np.asarray(cents, dtype=np.float64), rates


def evaluate(net: SpikingNet, data: SequenceSet, readout: Readout | None = None) -> Evaluation:
    preds, rates = predict_centroids(net, data, readout)
    errs = centroid_errors(preds, data.labels)
    return Evaluation(errs[:, -1], errs, preds, rates)
