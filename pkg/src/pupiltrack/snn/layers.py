"""Layer specifications, the Retina network layout, shape tracing and complexity counts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Union


class ShapeError(ValueError):
    def __init__(self, layer_index: int, message: str):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


@dataclass(frozen=True)
class Conv:
    c_in: int
    c_out: int
    k_x: int
    k_y: int
    s_x: int = 1
    s_y: int = 1
    p_x: int = 0
    p_y: int = 0
    bias: bool = False
    kind: str = field(default="conv", init=False)

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k_x, self.k_y, self.s_x, self.s_y) <= 0:
            raise ValueError(f"conv dimensions must be positive: {self}")
        if min(self.p_x, self.p_y) < 0:
            raise ValueError("padding must be non-negative")


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    eps: float = 1e-5
    kind: str = field(default="batchnorm", init=False)


@dataclass(frozen=True)
class IF:
    threshold: float = 1.0
    v_min: float = -1.0
    kind: str = field(default="if", init=False)

    def __post_init__(self):
        if not self.threshold > self.v_min:
            raise ValueError("IF threshold must exceed v_min")


@dataclass(frozen=True)
class SumPool:
    k: int = 2
    s: int = 2
    kind: str = field(default="sumpool", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


LayerSpec = Union[Conv, BatchNorm, IF, SumPool, Flatten]
_KINDS = {"conv": Conv, "batchnorm": BatchNorm, "if": IF, "sumpool": SumPool, "flatten": Flatten}


class FeatureShape(NamedTuple):
    channels: int
    f_y: int
    f_x: int

    @property
    def size(self) -> int:
        return self.channels * self.f_y * self.f_x


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple
    input_shape: tuple = (2, 64, 64)  # (channels, height, width)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Conv)]

    def if_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, IF)]

    def blocks(self) -> list[list[int]]:
        """Layer indices grouped into blocks, each starting at a convolution."""
        groups: list[list[int]] = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv) or not groups:
                groups.append([i])
            else:
                groups[-1].append(i)
        return groups

    def to_json(self) -> list[dict]:
        out = [{"kind": "input", "shape": list(self.input_shape)}]
        for layer in self.layers:
            d = asdict(layer)
            d["kind"] = layer.kind
            out.append(d)
        return out

    @classmethod
    def from_json(cls, data) -> NetworkConfig:
        input_shape = (2, 64, 64)
        layers = []
        for i, item in enumerate(data):
            item = dict(item)
            kind = item.pop("kind", None)
            if kind == "input":
                input_shape = tuple(item["shape"])
                continue
            if kind not in _KINDS:
                raise ValueError(f"layer {i}: unknown kind {kind!r}")
            try:
                layers.append(_KINDS[kind](**item))
            except TypeError as exc:
                raise ValueError(f"layer {i}: {exc}") from None
        return cls(tuple(layers), input_shape)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> NetworkConfig:
        return cls.from_json(json.loads(Path(path).read_text()))


def _block(c_in, c_out, k, s=1, p=None, pool=False):
    p = k // 2 if p is None else p
    layers = [Conv(c_in, c_out, k, k, s, s, p, p), BatchNorm(c_out), IF()]
    if pool:
        layers.append(SumPool(2, 2))
    return layers


def retina_default() -> NetworkConfig:
    """The eight-block Retina network on 2x64x64 input.

    Spatial trace: 64 -conv5/s2/p1-> 31 -pool-> 15 -conv-> 15 -pool-> 7 -conv-> 7
    -pool-> 3, three 3x3 blocks at 3x3, flatten to 16*3*3 = 144, then 1x1 blocks
    144 -> 128 -> 160.
    """
    layers = (
        _block(2, 16, 5, s=2, p=1, pool=True)
        + _block(16, 64, 3, pool=True)
        + _block(64, 16, 3, pool=True)
        + _block(16, 16, 3)
        + _block(16, 8, 3)
        + _block(8, 16, 3)
        + [Flatten()]
        + _block(144, 128, 1)
        + _block(128, 160, 1)
    )
    return NetworkConfig(tuple(layers), (2, 64, 64))


def reduced_config(channels=(8, 16), hidden: int = 128, outputs: int = 160) -> NetworkConfig:
    """Two spiking conv blocks, then a 1x1 hidden block and the 160-channel output block."""
    c1, c2 = channels
    layers = (
        _block(2, c1, 5, s=2, p=1, pool=True)
        + _block(c1, c2, 3, pool=True)
        + [SumPool(2, 2), Flatten()]
        + _block(c2 * 3 * 3, hidden, 1)
        + _block(hidden, outputs, 1)
    )
    return NetworkConfig(tuple(layers), (2, 64, 64))


def _out_size(size: int, k: int, p: int, s: int) -> int:
    return (size - k + 2 * p) // s + 1


def spatial_trace(net: NetworkConfig) -> list[FeatureShape]:
    """Output shape after every layer, using floor division for strided sizes."""
    c, h, w = net.input_shape
    shapes = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv):
            if layer.c_in != c:
                raise ShapeError(i, f"conv expects {layer.c_in} input channels, got {c}")
            c = layer.c_out
            w = _out_size(w, layer.k_x, layer.p_x, layer.s_x)
            h = _out_size(h, layer.k_y, layer.p_y, layer.s_y)
        elif isinstance(layer, SumPool):
            w = _out_size(w, layer.k, 0, layer.s)
            h = _out_size(h, layer.k, 0, layer.s)
        elif isinstance(layer, BatchNorm):
            if layer.channels != c:
                raise ShapeError(i, f"batchnorm has {layer.channels} channels, input has {c}")
        elif isinstance(layer, Flatten):
            c, h, w = c * h * w, 1, 1
        if h <= 0 or w <= 0:
            raise ShapeError(i, f"non-positive feature map {w}x{h}")
        shapes.append(FeatureShape(c, h, w))
    return shapes


def _has_bias(net: NetworkConfig, conv_index: int) -> bool:
    layer = net.layers[conv_index]
    nxt = net.layers[conv_index + 1] if conv_index + 1 < len(net.layers) else None
    return layer.bias or isinstance(nxt, BatchNorm)


def count_params(net: NetworkConfig) -> int:
    """Conv weights plus one bias per output channel where a bias exists after batch-norm fusion."""
    total = 0
    for i in net.conv_indices():
        conv = net.layers[i]
        total += conv.c_in * conv.c_out * conv.k_x * conv.k_y
        if _has_bias(net, i):
            total += conv.c_out
    return total


def layer_macs(net: NetworkConfig) -> list[tuple[int, int]]:
    """``(layer_index, macs)`` per conv for one dense pass."""
    shapes = spatial_trace(net)
    out = []
    for i in net.conv_indices():
        conv = net.layers[i]
        fs = shapes[i]
        out.append((i, conv.c_in * conv.c_out * conv.k_x * conv.k_y * fs.f_x * fs.f_y))
    return out


def count_macs(net: NetworkConfig) -> int:
    return sum(m for _, m in layer_macs(net))


def format_trace(net: NetworkConfig) -> str:
    shapes = spatial_trace(net)
    macs = dict(layer_macs(net))
    c, h, w = net.input_shape
    lines = [f"input      {c:>5} x {h:>3} x {w:>3}"]
    for i, (layer, fs) in enumerate(zip(net.layers, shapes)):
        extra = f"  macs={macs[i]:,}" if i in macs else ""
        lines.append(f"{i:>2} {layer.kind:<8}{fs.channels:>5} x {fs.f_y:>3} x {fs.f_x:>3}{extra}")
    return "\n".join(lines)
