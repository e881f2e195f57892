"""Confusion-matrix metrics, dataset splitting, heatmaps, and the
single-stream baseline used for multi-stream vs single-stream comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import tensor as T
from .errors import EmptyEvaluation, SplitError
from .model import MALIGNANT_CLASS, TriStreamNet, _init_linear
from .slides import DatasetManifest, PyramidalSlide, extract_tile, tissue_mask
from .stream import StreamConfig, build_stream, layer_count, stream_forward
from .tensor import Tensor


@dataclass
class ConfusionMatrix:
    """TP/FP/TN/FN counters; the positive class is malignant (label 1)."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def add(self, predicted: int, actual: int) -> None:
        if actual == 1:
            if predicted == 1:
                self.tp += 1
            else:
                self.fn += 1
        else:
            if predicted == 1:
                self.fp += 1
            else:
                self.tn += 1


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: Optional[float]  # None when TP + FN == 0
    specificity: Optional[float]  # None when TN + FP == 0
    matrix: ConfusionMatrix


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """sensitivity = TP/(TP+FN), specificity = TN/(TN+FP),
    accuracy = (TP+TN)/total; zero denominators yield None, not a crash."""
    if cm.total == 0:
        raise EmptyEvaluation("no tiles evaluated")
    pos = cm.tp + cm.fn
    neg = cm.tn + cm.fp
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / cm.total,
        sensitivity=cm.tp / pos if pos else None,
        specificity=cm.tn / neg if neg else None,
        matrix=cm,
    )


def evaluate(model, manifest: DatasetManifest, split: Optional[str],
             slides: dict[str, PyramidalSlide],
             threshold: float = 0.5) -> tuple[ConfusionMatrix, MetricsReport]:
    """Grade every tile of one split and reduce into a confusion matrix."""
    cm = ConfusionMatrix()
    for record in manifest.records:
        if split is not None and record.split != split:
            continue
        tile = extract_tile(slides[record.slide_id], record)
        p = model.predict_tile(tile)
        cm.add(int(p > threshold), record.label)
    return cm, compute_metrics(cm)


def _apportion(total: int, fractions) -> list[int]:
    """Integer counts summing to total, largest remainder method."""
    raw = [total * f for f in fractions]
    counts = [math.floor(r) for r in raw]
    remainders = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(total - sum(counts)):
        counts[remainders[i % len(raw)]] += 1
    return counts


SPLIT_NAMES = ("train", "val", "test")


def split_manifest(manifest: DatasetManifest, fractions, by_slide: bool = True,
                   seed: int = 0) -> DatasetManifest:
    """Tag records with train/val/test splits.

    With ``by_slide`` every tile of one slide lands in the same split
    (matching per-slide evaluation protocols); otherwise tiles are split
    individually.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError("fractions must sum to 1")
    if len(fractions) > len(SPLIT_NAMES):
        raise SplitError(f"at most {len(SPLIT_NAMES)} splits supported")
    rng = np.random.default_rng(seed)

    if by_slide:
        slide_ids = sorted({r.slide_id for r in manifest.records})
        if len(slide_ids) < sum(1 for f in fractions if f > 0):
            raise SplitError("fewer slides than nonzero splits")
        order = [slide_ids[i] for i in rng.permutation(len(slide_ids))]
        counts = _apportion(len(order), fractions)
        assignment = {}
        pos = 0
        for name, count in zip(SPLIT_NAMES, counts):
            for sid in order[pos:pos + count]:
                assignment[sid] = name
            pos += count
        records = [_retag(r, assignment[r.slide_id]) for r in manifest.records]
    else:
        n = len(manifest.records)
        order = rng.permutation(n)
        counts = _apportion(n, fractions)
        tags = [None] * n
        pos = 0
        for name, count in zip(SPLIT_NAMES, counts):
            for i in order[pos:pos + count]:
                tags[i] = name
            pos += count
        records = [_retag(r, tags[i]) for i, r in enumerate(manifest.records)]
    return DatasetManifest(records=records, provenance=dict(manifest.provenance))


def _retag(record, split: str):
    from .slides import TileRecord

    return TileRecord(record.slide_id, record.x, record.y, record.side,
                      record.label, split)


# ---------------------------------------------------------------------------
# Heatmaps


@dataclass
class Heatmap:
    """Grid of per-tile malignancy probabilities over a slide at level 0."""

    probs: np.ndarray  # (rows, cols) in [0, 1]
    side: int
    stride: int

    def cell_origin(self, row: int, col: int) -> tuple[int, int]:
        return col * self.stride, row * self.stride


def heatmap_grid(extent_w: int, extent_h: int, side: int, stride: int) -> tuple[int, int]:
    """(rows, cols) of the tile grid: floor((extent - side)/stride) + 1."""
    return ((extent_h - side) // stride + 1, (extent_w - side) // stride + 1)


def assemble_heatmap(model, slide: PyramidalSlide, side: int,
                     stride: Optional[int] = None,
                     tissue: Optional[np.ndarray] = None) -> Heatmap:
    """Evaluate tile probabilities on a regular level-0 grid.

    ``model`` is anything with ``predict_tile``, or a callable taking a
    TileRecord (useful for ground-truth oracles).  Cells whose center falls
    outside the tissue mask get probability 0 without a model evaluation;
    pass ``tissue`` (a level-0 boolean mask) to override the computed mask.
    """
    stride = side if stride is None else stride
    w0, h0 = slide.level_dimensions(0)
    rows, cols = heatmap_grid(w0, h0, side, stride)
    if tissue is None:
        tm = tissue_mask(slide)
        d = slide.downsample(tm.level)
        mh, mw = tm.mask.shape

        def in_tissue(cx, cy):
            return tm.mask[min(cy // d, mh - 1), min(cx // d, mw - 1)]
    else:
        def in_tissue(cx, cy):
            return tissue[cy, cx]

    from .slides import TileRecord, extract_tile as _extract

    probs = np.zeros((rows, cols), dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            x, y = c * stride, r * stride
            cx, cy = x + side // 2, y + side // 2
            if not in_tissue(cx, cy):
                continue
            record = TileRecord(slide.slide_id, x, y, side)
            if hasattr(model, "predict_tile"):
                probs[r, c] = model.predict_tile(_extract(slide, record))
            else:
                probs[r, c] = model(record)
    return Heatmap(probs=probs, side=side, stride=stride)


def export_heatmap_image(heatmap: Heatmap, path) -> None:
    """Write the probability grid as a grayscale portable graymap."""
    from .errors import IoError
    from .slides import write_pgm

    values = np.floor(heatmap.probs * 255.0 + 0.5).astype(np.uint8)
    try:
        write_pgm(path, values)
    except OSError as exc:
        raise IoError(f"cannot write heatmap to {path}") from exc


# ---------------------------------------------------------------------------
# Single-stream baseline


class SingleStreamBaseline:
    """One residual stream with a direct linear classifier.

    The stream layout is identical to one stream of the triple-stream
    model, making the comparison between the architectures direct.
    """

    def __init__(self, config: StreamConfig, num_classes: int = 2, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.stream = build_stream(config, seed, dtype)
        rng = np.random.default_rng(seed + 1)
        self.fc_w, self.fc_b = _init_linear(rng, num_classes, self.stream.feature_dim,
                                            self.dtype)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        feats = stream_forward(self.stream, x, mode=mode)
        return T.linear(feats, self.fc_w, self.fc_b)

    def predict_tile(self, tile: Tensor) -> float:
        logits = self.forward(tile, mode="eval")
        return float(T.softmax(logits.data)[0, MALIGNANT_CLASS])

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"s0.{n}", p) for n, p in self.stream.params.items()]
        out.append(("fc.w", self.fc_w))
        out.append(("fc.b", self.fc_b))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    @property
    def layer_count(self) -> int:
        return layer_count(self.config)

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


BASELINE_MAGIC = b"TRB1"


def save_baseline_checkpoint(model: SingleStreamBaseline, path) -> None:
    import io
    import json
    import os

    from .tensor import write_array

    payload = io.BytesIO()
    directory = []
    arrays = [(n, p.data) for n, p in model.named_parameters()]
    for name, st in model.stream.bn_states.items():
        arrays.append((f"s0.{name}.running_mean", st.running_mean))
        arrays.append((f"s0.{name}.running_var", st.running_var))
    for name, arr in arrays:
        offset = payload.tell()
        write_array(payload, arr)
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
    manifest = {
        "version": 1,
        "config": {"stage_depths": list(model.config.stage_depths),
                   "base_width": model.config.base_width,
                   "in_channels": model.config.in_channels,
                   "scale": model.config.scale},
        "num_classes": model.num_classes,
        "dtype": "f64" if model.dtype == np.float64 else "f32",
        "tensors": directory,
    }
    blob = json.dumps(manifest).encode("utf-8")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(BASELINE_MAGIC)
        fh.write(f"manifest: {len(blob)}\n".encode("ascii"))
        fh.write(blob)
        fh.write(payload.getvalue())
    os.replace(tmp, path)


def load_baseline_checkpoint(path) -> SingleStreamBaseline:
    import json

    from .errors import FormatError
    from .tensor import read_array

    with open(path, "rb") as fh:
        if fh.read(4) != BASELINE_MAGIC:
            raise FormatError("not a baseline checkpoint")
        header = fh.readline()
        if not header.startswith(b"manifest: "):
            raise FormatError("missing manifest length header")
        length = int(header.split(b": ")[1])
        blob = fh.read(length)
        if len(blob) != length:
            raise FormatError("truncated manifest")
        manifest = json.loads(blob)
        cfg = manifest["config"]
        config = StreamConfig(tuple(cfg["stage_depths"]), cfg["base_width"],
                              cfg["in_channels"], cfg["scale"])
        dtype = np.float64 if manifest["dtype"] == "f64" else np.float32
        model = SingleStreamBaseline(config, manifest["num_classes"], dtype=dtype)
        targets = dict(model.named_parameters())
        bn_targets = {}
        for name, st in model.stream.bn_states.items():
            bn_targets[f"s0.{name}.running_mean"] = (st, "running_mean")
            bn_targets[f"s0.{name}.running_var"] = (st, "running_var")
        payload_start = fh.tell()
        for entry in manifest["tensors"]:
            fh.seek(payload_start + entry["offset"])
            arr = read_array(fh).astype(dtype)
            name = entry["name"]
            if name in targets:
                targets[name].data = arr
            elif name in bn_targets:
                st, attr = bn_targets[name]
                setattr(st, attr, arr)
            else:
                raise FormatError(f"unknown tensor {name!r} in checkpoint")
    return model


def comparison_table(results: dict[str, MetricsReport]) -> str:
    """Render a network x (accuracy, sensitivity, specificity) table."""
    def fmt(v):
        return "undef" if v is None else f"{v:.4f}"

    lines = [f"{'Network':<16} {'Accuracy':>9} {'Sensitivity':>12} {'Specificity':>12}"]
    for name, rep in results.items():
        lines.append(f"{name:<16} {fmt(rep.accuracy):>9} {fmt(rep.sensitivity):>12} "
                     f"{fmt(rep.specificity):>12}")
    return "\n".join(lines)
