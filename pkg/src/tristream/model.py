"""Triple-stream model: three residual streams, concatenation head, classifier.

The head concatenates the three post-pool feature vectors, applies a
16-neuron fully connected layer with ReLU, then a final fully connected
layer sized to the number of tissue grades.  Proxy heads (one optional
linear classifier per stream) and per-stream freeze flags support the
staged training policy; neither affects the main forward path.
"""

from __future__ import annotations

import io
import json
import os
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, StateError
from .stream import StreamConfig, StreamWeights, build_stream, stream_forward
from .tensor import BatchNormState, Tensor, read_array, write_array

HEAD_WIDTH = 16
MALIGNANT_CLASS = 1
CHECKPOINT_MAGIC = b"TRN1"
CHECKPOINT_VERSION = 1


def _init_linear(rng: np.random.Generator, dout: int, din: int, dtype):
    bound = 1.0 / np.sqrt(din)
    w = rng.uniform(-bound, bound, size=(dout, din)).astype(dtype)
    b = rng.uniform(-bound, bound, size=dout).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


class TriStreamNet:
    """Three residual streams + concatenation head + classifier."""

    def __init__(self, config: StreamConfig, num_classes: int, seeds, head_seed: int,
                 dtype=np.float32):
        if num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if len(seeds) != 3:
            raise ConfigError("exactly 3 stream seeds required")
        self.config = config
        self.num_classes = num_classes
        self.seeds = tuple(int(s) for s in seeds)
        self.head_seed = int(head_seed)
        self.dtype = np.dtype(dtype)

        self.streams: list[StreamWeights] = [
            build_stream(config, seed, dtype) for seed in self.seeds
        ]
        rng = np.random.default_rng(self.head_seed)
        fd = self.feature_dim
        self.head_fc1_w, self.head_fc1_b = _init_linear(rng, HEAD_WIDTH, 3 * fd, self.dtype)
        self.head_fc2_w, self.head_fc2_b = _init_linear(rng, num_classes, HEAD_WIDTH, self.dtype)

        self.proxy_heads: list[Optional[tuple[Tensor, Tensor]]] = [None, None, None]
        self.stream_frozen = [False, False, False]
        self.head_frozen = False

    @property
    def feature_dim(self) -> int:
        return self.streams[0].feature_dim

    # -- forward paths ------------------------------------------------------

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        feats = [
            stream_forward(s, x, mode=mode,
                           update_stats=(mode == "train" and not self.stream_frozen[i]))
            for i, s in enumerate(self.streams)
        ]
        h = T.relu(T.linear(T.concat_features(feats), self.head_fc1_w, self.head_fc1_b))
        return T.linear(h, self.head_fc2_w, self.head_fc2_b)

    def forward_proxy(self, stream_idx: int, x: Tensor, mode: str = "train") -> Tensor:
        head = self.proxy_heads[stream_idx]
        if head is None:
            raise StateError(f"no proxy head attached at stream {stream_idx}")
        feats = stream_forward(self.streams[stream_idx], x, mode=mode,
                               update_stats=(mode == "train" and not self.stream_frozen[stream_idx]))
        return T.linear(feats, head[0], head[1])

    def predict_tile(self, tile: Tensor) -> float:
        """Malignancy probability of a single 1x3xHxW tile (eval mode)."""
        logits = self.forward(tile, mode="eval")
        return float(T.softmax(logits.data)[0, MALIGNANT_CLASS])

    # -- proxy heads and freeze state ---------------------------------------

    def attach_proxy_head(self, stream_idx: int, seed: int) -> None:
        if self.proxy_heads[stream_idx] is not None:
            raise StateError(f"proxy head already attached at stream {stream_idx}")
        rng = np.random.default_rng(seed)
        self.proxy_heads[stream_idx] = _init_linear(rng, self.num_classes,
                                                    self.feature_dim, self.dtype)

    def detach_proxy_head(self, stream_idx: int) -> None:
        if self.proxy_heads[stream_idx] is None:
            raise StateError(f"no proxy head attached at stream {stream_idx}")
        self.proxy_heads[stream_idx] = None

    def set_stream_frozen(self, stream_idx: int, frozen: bool) -> None:
        self.stream_frozen[stream_idx] = frozen

    def set_head_frozen(self, frozen: bool) -> None:
        self.head_frozen = frozen

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, s in enumerate(self.streams):
            out.extend((f"s{i}.{name}", p) for name, p in s.params.items())
        out.append(("head.fc1.w", self.head_fc1_w))
        out.append(("head.fc1.b", self.head_fc1_b))
        out.append(("head.fc2.w", self.head_fc2_w))
        out.append(("head.fc2.b", self.head_fc2_b))
        for i, head in enumerate(self.proxy_heads):
            if head is not None:
                out.append((f"proxy{i}.w", head[0]))
                out.append((f"proxy{i}.b", head[1]))
        return out

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters the optimizer may update under the current freeze state."""
        out = []
        for i, s in enumerate(self.streams):
            if not self.stream_frozen[i]:
                out.extend((f"s{i}.{name}", p) for name, p in s.params.items())
        if not self.head_frozen:
            out.append(("head.fc1.w", self.head_fc1_w))
            out.append(("head.fc1.b", self.head_fc1_b))
            out.append(("head.fc2.w", self.head_fc2_w))
            out.append(("head.fc2.b", self.head_fc2_b))
        for i, head in enumerate(self.proxy_heads):
            if head is not None:
                out.append((f"proxy{i}.w", head[0]))
                out.append((f"proxy{i}.b", head[1]))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def _named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All state arrays, parameters and running statistics, in fixed order."""
        out = [(name, p.data) for name, p in self.named_parameters()]
        for i, s in enumerate(self.streams):
            for name, st in s.bn_states.items():
                out.append((f"s{i}.{name}.running_mean", st.running_mean))
                out.append((f"s{i}.{name}.running_var", st.running_var))
        return out


def build_tristream(config: StreamConfig, num_classes: int = 2,
                    seeds=(0, 1, 2), head_seed: int = 3, dtype=np.float32) -> TriStreamNet:
    return TriStreamNet(config, num_classes, seeds, head_seed, dtype)


# ---------------------------------------------------------------------------
# Checkpoints: magic, textual manifest, then tensor payloads


def save_checkpoint(model: TriStreamNet, path) -> None:
    arrays = model._named_arrays()
    payload = io.BytesIO()
    directory = []
    for name, arr in arrays:
        offset = payload.tell()
        write_array(payload, arr)
        directory.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f64" if arr.dtype == np.float64 else "f32",
            "offset": offset,
        })
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "stage_depths": list(model.config.stage_depths),
            "base_width": model.config.base_width,
            "in_channels": model.config.in_channels,
            "scale": model.config.scale,
        },
        "num_classes": model.num_classes,
        "seeds": list(model.seeds),
        "head_seed": model.head_seed,
        "dtype": "f64" if model.dtype == np.float64 else "f32",
        "stream_frozen": list(model.stream_frozen),
        "head_frozen": model.head_frozen,
        "proxy_slots": [h is not None for h in model.proxy_heads],
        "tensors": directory,
    }
    blob = json.dumps(manifest).encode("utf-8")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"manifest: {len(blob)}\n".encode("ascii"))
        fh.write(blob)
        fh.write(payload.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> TriStreamNet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic: {magic!r}")
        header = fh.readline()
        if not header.startswith(b"manifest: "):
            raise FormatError("missing manifest length header")
        try:
            length = int(header.split(b": ")[1])
        except (IndexError, ValueError) as exc:
            raise FormatError("bad manifest length header") from exc
        blob = fh.read(length)
        if len(blob) != length:
            raise FormatError("truncated manifest")
        try:
            manifest = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise FormatError("manifest is not valid JSON") from exc
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {manifest.get('version')!r}")

        cfg = manifest["config"]
        config = StreamConfig(tuple(cfg["stage_depths"]), cfg["base_width"],
                              cfg["in_channels"], cfg["scale"])
        dtype = np.float64 if manifest["dtype"] == "f64" else np.float32
        model = TriStreamNet(config, manifest["num_classes"], manifest["seeds"],
                             manifest["head_seed"], dtype)
        for i, present in enumerate(manifest["proxy_slots"]):
            if present:
                model.attach_proxy_head(i, seed=0)  # weights overwritten below
        model.stream_frozen = list(manifest["stream_frozen"])
        model.head_frozen = bool(manifest["head_frozen"])

        targets = dict(model.named_parameters())
        bn_targets: dict[str, tuple[BatchNormState, str]] = {}
        for i, s in enumerate(model.streams):
            for name, st in s.bn_states.items():
                bn_targets[f"s{i}.{name}.running_mean"] = (st, "running_mean")
                bn_targets[f"s{i}.{name}.running_var"] = (st, "running_var")

        payload_start = fh.tell()
        for entry in manifest["tensors"]:
            fh.seek(payload_start + entry["offset"])
            arr = read_array(fh)
            if list(arr.shape) != entry["shape"]:
                raise FormatError(f"shape mismatch for tensor {entry['name']!r}")
            name = entry["name"]
            if name in targets:
                targets[name].data = arr.astype(dtype)
            elif name in bn_targets:
                st, attr = bn_targets[name]
                setattr(st, attr, arr.astype(dtype))
            else:
                raise FormatError(f"unknown tensor {name!r} in checkpoint")
    return model
