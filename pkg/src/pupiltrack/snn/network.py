"""Torch implementation of the spiking CNN, batch-norm fusion and weight files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .layers import IF, BatchNorm, Conv, Flatten, NetworkConfig, ShapeError, SumPool, spatial_trace
from .neuron import heaviside, if_step


@dataclass
class ConvWeights:
    spec: Conv
    weight: np.ndarray  # (c_out, c_in, k_y, k_x)
    bias: np.ndarray | None = None


@dataclass
class BatchNormWeights:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    @property
    def channels(self) -> int:
        return len(self.gamma)


def fuse_batchnorm(conv: ConvWeights, bn: BatchNormWeights) -> ConvWeights:
    """Fold inference-mode batch-norm into the preceding convolution.

    Works on numpy arrays (computed in float64) or torch tensors (kept
    differentiable).
    """
    if bn.channels != conv.spec.c_out:
        raise ValueError(f"batchnorm has {bn.channels} channels, conv outputs {conv.spec.c_out}")
    if isinstance(conv.weight, torch.Tensor):
        gamma, beta, mean, var, weight = bn.gamma, bn.beta, bn.mean, bn.var, conv.weight
        bias = weight.new_zeros(conv.spec.c_out) if conv.bias is None else conv.bias
    else:
        gamma, beta, mean, var, weight = (np.asarray(a, dtype=np.float64)
                                          for a in (bn.gamma, bn.beta, bn.mean, bn.var, conv.weight))
        bias = np.zeros(conv.spec.c_out) if conv.bias is None else np.asarray(conv.bias, dtype=np.float64)
    if (var + bn.eps <= 0).any():
        raise ValueError("batchnorm variance must be positive")
    scale = gamma / (var + bn.eps) ** 0.5
    return ConvWeights(replace(conv.spec, bias=True), weight * scale[:, None, None, None],
                       scale * (bias - mean) + beta)


class IFNeurons(nn.Module):
    """IF layer over a whole sequence; state lives only for the duration of one call."""

    def __init__(self, spec: IF):
        super().__init__()
        self.spec = spec
        self.spike_fn = heaviside
        self.detach_reset = True

    def forward(self, x):  # x: (B, T, ...)
        v = torch.zeros_like(x[:, 0])
        out = []
        for t in range(x.shape[1]):
            s, v = if_step(v, x[:, t], self.spec.threshold, self.spec.v_min, self.spike_fn, self.detach_reset)
            out.append(s)
        return torch.stack(out, dim=1)


class SumPool2d(nn.Module):
    def __init__(self, spec: SumPool):
        super().__init__()
        self.spec = spec

    def forward(self, x):
        k = self.spec.k
        return F.avg_pool2d(x, k, self.spec.s) * (k * k)


class FlattenToChannels(nn.Module):
    """Flatten (C, H, W) into C*H*W channels on a 1x1 map so 1x1 convolutions act as dense layers."""

    def forward(self, x):
        return x.reshape(x.shape[0], -1, 1, 1)


@dataclass
class ForwardTrace:
    layer_indices: list
    spike_counts: np.ndarray  # (n_if_layers, T), summed over batch and neurons
    neurons: list  # neurons per IF layer per sample
    batch: int
    syn_ops: torch.Tensor | None = field(default=None, repr=False)  # per conv layer, mean over batch

    @property
    def timesteps(self) -> int:
        return self.spike_counts.shape[1]

    def firing_rates(self) -> np.ndarray:
        return firing_rate_profile(self)


def firing_rate_profile(trace: ForwardTrace) -> np.ndarray:
    """Spikes per neuron per timestep for every IF layer."""
    if trace.spike_counts.size == 0:
        raise ValueError("empty trace")
    totals = trace.spike_counts.sum(axis=1)
    denom = np.asarray(trace.neurons, dtype=np.float64) * trace.timesteps * trace.batch
    return totals / denom


class SpikingNet(nn.Module):
    def __init__(self, config: NetworkConfig, dtype=torch.float32, seed: int | None = None):
        super().__init__()
        self.config = config
        self.shapes = spatial_trace(config)
        if seed is not None:
            torch.manual_seed(seed)
        mods = []
        for layer in config.layers:
            if isinstance(layer, Conv):
                mods.append(nn.Conv2d(layer.c_in, layer.c_out, (layer.k_y, layer.k_x),
                                      stride=(layer.s_y, layer.s_x), padding=(layer.p_y, layer.p_x),
                                      bias=layer.bias))
            elif isinstance(layer, BatchNorm):
                mods.append(nn.BatchNorm2d(layer.channels, eps=layer.eps))
            elif isinstance(layer, IF):
                mods.append(IFNeurons(layer))
            elif isinstance(layer, SumPool):
                mods.append(SumPool2d(layer))
            elif isinstance(layer, Flatten):
                mods.append(FlattenToChannels())
            else:
                raise TypeError(f"unsupported layer {layer!r}")
        self.layers = nn.ModuleList(mods)
        self.to(dtype)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def set_spike_fn(self, spike_fn, detach_reset: bool = True) -> None:
        for m in self.layers:
            if isinstance(m, IFNeurons):
                m.spike_fn = spike_fn
                m.detach_reset = detach_reset

    def forward(self, frames):
        """``frames``: (B, T, C, H, W) or (T, C, H, W). Returns ``(output (B, T, C_out), trace)``.

        Stateless layers run over all B*T frames at once and IF layers step through
        time, which is equivalent to pushing each bin through the whole stack in turn.
        """
        squeeze = frames.dim() == 4
        if squeeze:
            frames = frames.unsqueeze(0)
        B, T = frames.shape[:2]
        expected = self.config.input_shape
        if tuple(frames.shape[2:]) != tuple(expected):
            raise ShapeError(0, f"input frames have shape {tuple(frames.shape[2:])}, network expects {expected}")
        x = frames.reshape(B * T, *frames.shape[2:]).to(self.dtype)
        counts, neurons, idx, syn = [], [], [], []
        for i, (spec, mod) in enumerate(zip(self.config.layers, self.layers)):
            if isinstance(mod, IFNeurons):
                s = mod(x.reshape(B, T, *x.shape[1:]))
                counts.append(s.detach().reshape(B, T, -1).sum(dim=(0, 2)).cpu().numpy())
                neurons.append(int(np.prod(s.shape[2:])))
                idx.append(i)
                x = s.reshape(B * T, *s.shape[2:])
            else:
                if isinstance(spec, Conv):
                    fan_out = spec.c_out * spec.k_x * spec.k_y / (spec.s_x * spec.s_y)
                    syn.append(x.reshape(B, -1).sum(dim=1).mean() * fan_out)
                x = mod(x)
        out = x.reshape(B, T, -1)
        trace = ForwardTrace(
            idx, np.stack(counts) if counts else np.zeros((0, T)), neurons, B,
            torch.stack(syn) if syn else None,
        )
        if squeeze:
            out = out[0]
        return out, trace

    # ------------------------------------------------------------------ fusion / export

    def conv_weights(self, index: int) -> ConvWeights:
        m = self.layers[index]
        bias = None if m.bias is None else m.bias.detach().cpu().double().numpy()
        return ConvWeights(self.config.layers[index], m.weight.detach().cpu().double().numpy(), bias)

    def bn_weights(self, index: int) -> BatchNormWeights:
        m = self.layers[index]
        return BatchNormWeights(
            m.weight.detach().cpu().double().numpy(), m.bias.detach().cpu().double().numpy(),
            m.running_mean.detach().cpu().double().numpy(), m.running_var.detach().cpu().double().numpy(),
            m.eps,
        )

    def fused(self) -> SpikingNet:
        """Copy with every conv+batchnorm pair folded into a biased conv."""
        specs, weights = [], []
        layers = self.config.layers
        i = 0
        while i < len(layers):
            spec = layers[i]
            if isinstance(spec, Conv) and i + 1 < len(layers) and isinstance(layers[i + 1], BatchNorm):
                cw = fuse_batchnorm(self.conv_weights(i), self.bn_weights(i + 1))
                specs.append(cw.spec)
                weights.append((cw.weight, cw.bias))
                i += 2
                continue
            specs.append(spec)
            weights.append(None)
            i += 1
        net = SpikingNet(replace(self.config, layers=tuple(specs)), dtype=self.dtype)
        with torch.no_grad():
            for mod, w in zip(net.layers, weights):
                if w is not None:
                    mod.weight.copy_(torch.as_tensor(w[0]))
                    mod.bias.copy_(torch.as_tensor(w[1]))
        for src, dst in zip(self._if_modules(), net._if_modules()):
            dst.spike_fn, dst.detach_reset = src.spike_fn, src.detach_reset
        return net.eval()

    def _if_modules(self):
        return [m for m in self.layers if isinstance(m, IFNeurons)]


def _layer_tensors(net: SpikingNet):
    for i, m in enumerate(net.layers):
        if isinstance(m, nn.Conv2d):
            yield i, "weight", m.weight
            if m.bias is not None:
                yield i, "bias", m.bias
        elif isinstance(m, nn.BatchNorm2d):
            yield i, "gamma", m.weight
            yield i, "beta", m.bias
            yield i, "mean", m.running_mean
            yield i, "var", m.running_var


def save_weights(net: SpikingNet, path) -> None:
    """JSON header line, then every tensor as little-endian float32 in layer order."""
    entries, blobs = [], []
    for i, name, tensor in _layer_tensors(net):
        arr = tensor.detach().cpu().numpy().astype("<f4")
        entries.append({"layer": i, "name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(json.dumps({"tensors": entries}).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_weights(net: SpikingNet, path) -> SpikingNet:
    with open(Path(path), "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    expected = [(i, name, tuple(t.shape)) for i, name, t in _layer_tensors(net)]
    found = [(e["layer"], e["name"], tuple(e["shape"])) for e in header["tensors"]]
    if expected != found:
        raise ValueError(f"{path}: weight layout does not match network description")
    offset = 0
    with torch.no_grad():
        for (_, _, tensor), (_, _, shape) in zip(_layer_tensors(net), found):
            n = int(np.prod(shape))
            arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
            tensor.copy_(torch.as_tensor(arr.astype(np.float64)))
            offset += 4 * n
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes")
    return net


def load_network(config_path, weights_path=None, dtype=torch.float32) -> SpikingNet:
    net = SpikingNet(NetworkConfig.load(config_path), dtype=dtype)
    if weights_path is not None:
        load_weights(net, weights_path)
    return net.eval()


def forward_sequence(net: SpikingNet, frames):
    """Run one sequence from freshly zeroed membrane state.

    ``frames`` is an EventFrameSequence or a (T, C, H, W) array. Returns
    ``(output (T, C_out) numpy array, ForwardTrace)``.
    """
    data = getattr(frames, "frames", frames)
    x = torch.as_tensor(np.asarray(data), dtype=net.dtype)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            out, trace = net(x)
    finally:
        net.train(was_training)
    return out.cpu().numpy(), trace
