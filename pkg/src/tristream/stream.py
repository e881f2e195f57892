"""Single residual stream: a 34-layer-style feature extractor.

The stream follows the classic basic-block layout: a 7x7 stride-2 stem with
batch norm, ReLU and 3x3 stride-2 max pooling, four stages of two-conv
residual blocks at doubling widths (stride-2 projection shortcuts entering
stages 2-4), and a global average pool head.  A ``scale`` knob shrinks all
widths so desk-scale runs finish in minutes; at defaults the layout matches
the 34-layer architecture exactly.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import BatchNormState, Tensor

MIN_INPUT_SIZE = 32  # four stride-2 reductions must leave >= 1 spatial cell


@dataclass(frozen=True)
class StreamConfig:
    stage_depths: tuple[int, ...] = (3, 4, 6, 3)
    base_width: int = 64
    in_channels: int = 3
    scale: float = 1.0

    def stage_widths(self) -> list[int]:
        widths = [int(round(self.base_width * (2 ** i) * self.scale)) for i in range(4)]
        if any(w < 1 for w in widths):
            raise ConfigError(f"scale {self.scale} collapses a stage width below 1")
        return widths

    @property
    def feature_dim(self) -> int:
        return self.stage_widths()[3]


def layer_count(config: StreamConfig) -> int:
    """Weighted-layer count of the stream layout: stem + 2 per block + head."""
    return 1 + 2 * sum(config.stage_depths) + 1


class StreamWeights:
    """Ordered parameter collection of one stream.

    ``params`` maps names to weight tensors; ``bn_states`` holds the running
    statistics alongside each batch-norm layer.
    """

    def __init__(self, config: StreamConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.bn_states: OrderedDict[str, BatchNormState] = OrderedDict()

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def named_parameters(self):
        return list(self.params.items())


def _init_conv(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> np.ndarray:
    fan_in = cin * k * k
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)


def _add_conv(w: StreamWeights, rng, name: str, cout: int, cin: int, k: int) -> None:
    w.params[name + ".w"] = Tensor(_init_conv(rng, cout, cin, k, w.dtype), requires_grad=True)


def _add_bn(w: StreamWeights, name: str, channels: int) -> None:
    w.params[name + ".gamma"] = Tensor(np.ones(channels, dtype=w.dtype), requires_grad=True)
    w.params[name + ".beta"] = Tensor(np.zeros(channels, dtype=w.dtype), requires_grad=True)
    w.bn_states[name] = BatchNormState(channels, w.dtype)


def build_stream(config: StreamConfig, seed: int, dtype=np.float32) -> StreamWeights:
    """Initialize one stream's parameters deterministically from ``seed``."""
    widths = config.stage_widths()
    w = StreamWeights(config, dtype)
    rng = np.random.default_rng(seed)

    _add_conv(w, rng, "stem.conv", widths[0], config.in_channels, 7)
    _add_bn(w, "stem.bn", widths[0])

    in_ch = widths[0]
    for stage, (depth, width) in enumerate(zip(config.stage_depths, widths), start=1):
        for block in range(depth):
            prefix = f"stage{stage}.block{block}"
            stride = 2 if stage > 1 and block == 0 else 1
            _add_conv(w, rng, prefix + ".conv1", width, in_ch, 3)
            _add_bn(w, prefix + ".bn1", width)
            _add_conv(w, rng, prefix + ".conv2", width, width, 3)
            _add_bn(w, prefix + ".bn2", width)
            if stride != 1 or in_ch != width:
                _add_conv(w, rng, prefix + ".proj", width, in_ch, 1)
                _add_bn(w, prefix + ".projbn", width)
            in_ch = width
    return w


def _block_forward(w: StreamWeights, prefix: str, x: Tensor, stride: int,
                   mode: str, update_stats: bool) -> Tensor:
    p = w.params

    def bn(name: str, h: Tensor) -> Tensor:
        return T.batch_norm2d(h, p[name + ".gamma"], p[name + ".beta"],
                              w.bn_states[name], mode=mode, update_stats=update_stats)

    h = T.conv2d(x, p[prefix + ".conv1.w"], stride=stride, padding=1)
    h = T.relu(bn(prefix + ".bn1", h))
    h = T.conv2d(h, p[prefix + ".conv2.w"], stride=1, padding=1)
    h = bn(prefix + ".bn2", h)

    if prefix + ".proj.w" in p:
        shortcut = T.conv2d(x, p[prefix + ".proj.w"], stride=stride, padding=0)
        shortcut = bn(prefix + ".projbn", shortcut)
    else:
        shortcut = x
    return T.relu(T.add(h, shortcut))


def stream_forward(w: StreamWeights, x: Tensor, mode: str = "train",
                   update_stats: bool | None = None) -> Tensor:
    """Run one stream over an NCHW batch, returning N x feature_dim features."""
    if x.data.ndim != 4:
        raise ShapeError("stream_forward expects NCHW input")
    _, _, h, wd = x.shape
    if h < MIN_INPUT_SIZE or wd < MIN_INPUT_SIZE:
        raise ShapeError(f"input spatial extent must be >= {MIN_INPUT_SIZE}, got {h}x{wd}")
    if update_stats is None:
        update_stats = mode == "train"

    p = w.params
    out = T.conv2d(x, p["stem.conv.w"], stride=2, padding=3)
    out = T.batch_norm2d(out, p["stem.bn.gamma"], p["stem.bn.beta"],
                         w.bn_states["stem.bn"], mode=mode, update_stats=update_stats)
    out = T.relu(out)
    out = T.max_pool2d(out, k=3, stride=2)

    for stage, depth in enumerate(w.config.stage_depths, start=1):
        for block in range(depth):
            stride = 2 if stage > 1 and block == 0 else 1
            out = _block_forward(w, f"stage{stage}.block{block}", out, stride,
                                 mode, update_stats)
    return T.global_avg_pool(out)
