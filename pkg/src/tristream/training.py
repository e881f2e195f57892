"""Three-stage targeted training policy, Adam optimizer, and augmentation.

Stage 1 pre-trains each stream in isolation through a temporary proxy
classifier while everything else is frozen, with a different shuffle seed
per stream so each stream sees different random batches.  Stage 2 trains
only the concatenation head with all streams frozen.  Stage 3 fine-tunes
the whole network end to end at one tenth of the base learning rate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError, StateError
from .model import TriStreamNet
from .tensor import Tensor

FINETUNE_LR_DIVISOR = 10


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    batch_size: int = 32
    epochs_stage1: int = 5
    epochs_stage2: int = 5
    epochs_stage3: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    brightness: float = 0.1
    disjoint_stream_data: bool = False


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float  # NaN when no validation data


@dataclass
class StageReport:
    stage: str  # pretrain_stream_{0,1,2} | head | finetune
    lr: float
    updated: list[str]
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params, lr: float) -> None:
        """One update over (name, tensor) pairs; gradients are zeroed after."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in named_params:
            if p.grad is None:
                raise StateError(f"parameter {name!r} has no gradient")
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.m[name] = m
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def augment_tile(tile: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flips, 90-degree rotations and a uniform brightness shift.

    All transforms are pixel-exact; brightness adds one delta to every pixel
    and clamps to [0, 1].
    """
    c, h, w = tile.shape
    if h != w:
        raise ShapeError("augment_tile expects a square tile")
    out = tile
    if cfg.hflip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    if cfg.vflip and rng.random() < 0.5:
        out = out[:, ::-1, :]
    if cfg.rot90:
        k = int(rng.integers(0, 4))
        if k:
            out = np.rot90(out, k, axes=(1, 2))
    if cfg.brightness > 0:
        delta = rng.uniform(-cfg.brightness, cfg.brightness)
        out = np.clip(out + delta, 0.0, 1.0)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# Stage machinery


def _make_batch(dataset, indices, cfg: TrainConfig, rng, dtype, augment: bool):
    tiles, labels = [], []
    for i in indices:
        tile, label = dataset.get(int(i))
        if augment:
            tile = augment_tile(tile, cfg, rng)
        tiles.append(tile)
        labels.append(label)
    return Tensor(np.stack(tiles).astype(dtype)), np.asarray(labels, dtype=np.int64)


def _eval_accuracy(forward_fn, dataset, cfg: TrainConfig, dtype) -> float:
    if dataset is None or len(dataset) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(dataset), cfg.batch_size):
        idx = range(start, min(start + cfg.batch_size, len(dataset)))
        x, y = _make_batch(dataset, idx, cfg, None, dtype, augment=False)
        logits = forward_fn(x, "eval")
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return correct / len(dataset)


def _train_stage(model: TriStreamNet, dataset, val_dataset, cfg: TrainConfig, *,
                 stage: str, epochs: int, lr: float, forward_fn, params_fn,
                 rng: np.random.Generator) -> StageReport:
    report = StageReport(stage=stage, lr=lr, updated=sorted({n.split(".")[0] for n, _ in params_fn()}))
    start = time.perf_counter()
    adam = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses, correct = [], 0
        for b in range(0, n, cfg.batch_size):
            x, y = _make_batch(dataset, order[b:b + cfg.batch_size], cfg, rng,
                               model.dtype, augment=True)
            logits = forward_fn(x, "train")
            loss = T.softmax_cross_entropy(logits, y)
            model.zero_grads()
            T.backward(loss)
            adam.step(params_fn(), lr)
            losses.append(loss.item() * len(y))
            correct += int((logits.data.argmax(axis=1) == y).sum())
        report.epochs.append(EpochRecord(
            epoch=epoch,
            loss=sum(losses) / n,
            train_acc=correct / n,
            val_acc=_eval_accuracy(forward_fn, val_dataset, cfg, model.dtype),
        ))
    report.wall_time = time.perf_counter() - start
    return report


def _stage1_dataset(dataset, stream_idx: int, cfg: TrainConfig):
    if not cfg.disjoint_stream_data:
        return dataset
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(dataset))
    third = np.array_split(order, 3)[stream_idx]

    class _Subset:
        def __len__(self_inner):
            return len(third)

        def get(self_inner, i):
            return dataset.get(int(third[i]))

    return _Subset()


def pretrain_stream(model: TriStreamNet, stream_idx: int, dataset, cfg: TrainConfig,
                    val_dataset=None) -> StageReport:
    """Stage-1 pre-training of one stream behind a temporary proxy head."""
    if any(h is not None for h in model.proxy_heads):
        raise StateError("pretraining requires no proxy heads attached")
    saved_streams = list(model.stream_frozen)
    saved_head = model.head_frozen
    for j in range(3):
        model.set_stream_frozen(j, j != stream_idx)
    model.set_head_frozen(True)
    model.attach_proxy_head(stream_idx, seed=cfg.seed + 10_000 + stream_idx)
    try:
        rng = np.random.default_rng(cfg.seed + stream_idx)
        report = _train_stage(
            model, _stage1_dataset(dataset, stream_idx, cfg), val_dataset, cfg,
            stage=f"pretrain_stream_{stream_idx}",
            epochs=cfg.epochs_stage1,
            lr=cfg.base_lr,
            forward_fn=lambda x, mode: model.forward_proxy(stream_idx, x, mode),
            params_fn=model.trainable_parameters,
            rng=rng,
        )
    finally:
        model.detach_proxy_head(stream_idx)
        model.stream_frozen = saved_streams
        model.head_frozen = saved_head
    return report


def pretrain_streams(model: TriStreamNet, dataset, cfg: TrainConfig,
                     val_dataset=None) -> list[StageReport]:
    return [pretrain_stream(model, i, dataset, cfg, val_dataset) for i in range(3)]


def train_head(model: TriStreamNet, dataset, cfg: TrainConfig,
               val_dataset=None) -> StageReport:
    """Stage 2: train only the concatenation head with all streams frozen."""
    if any(h is not None for h in model.proxy_heads):
        raise StateError("head training requires no proxy heads attached")
    saved_streams = list(model.stream_frozen)
    saved_head = model.head_frozen
    for j in range(3):
        model.set_stream_frozen(j, True)
    model.set_head_frozen(False)
    try:
        report = _train_stage(
            model, dataset, val_dataset, cfg,
            stage="head",
            epochs=cfg.epochs_stage2,
            lr=cfg.base_lr,
            forward_fn=model.forward,
            params_fn=model.trainable_parameters,
            rng=np.random.default_rng(cfg.seed + 1000),
        )
    finally:
        model.stream_frozen = saved_streams
        model.head_frozen = saved_head
    return report


def fine_tune(model: TriStreamNet, dataset, cfg: TrainConfig,
              val_dataset=None) -> StageReport:
    """Stage 3: end-to-end update of every parameter at base_lr / 10."""
    for j in range(3):
        model.set_stream_frozen(j, False)
    model.set_head_frozen(False)
    return _train_stage(
        model, dataset, val_dataset, cfg,
        stage="finetune",
        epochs=cfg.epochs_stage3,
        lr=cfg.base_lr / FINETUNE_LR_DIVISOR,
        forward_fn=model.forward,
        params_fn=model.trainable_parameters,
        rng=np.random.default_rng(cfg.seed + 2000),
    )


def run_policy(model: TriStreamNet, dataset, cfg: TrainConfig, val_dataset=None,
               checkpoint_dir=None) -> list[StageReport]:
    """Run all three stages in order, checkpointing after each stage.

    Returns five reports: one per pre-trained stream, then head, then
    finetune.
    """
    from .model import save_checkpoint

    def checkpoint(tag: str) -> None:
        if checkpoint_dir is not None:
            save_checkpoint(model, f"{checkpoint_dir}/stage_{tag}.ckpt")

    reports = []
    for i in range(3):
        reports.append(pretrain_stream(model, i, dataset, cfg, val_dataset))
        checkpoint(f"pretrain_stream_{i}")
    reports.append(train_head(model, dataset, cfg, val_dataset))
    checkpoint("head")
    reports.append(fine_tune(model, dataset, cfg, val_dataset))
    checkpoint("finetune")
    return reports


def train_baseline(model, dataset, cfg: TrainConfig, val_dataset=None) -> StageReport:
    """Conventional single-model training on the same total epoch budget."""
    return _train_stage(
        model, dataset, val_dataset, cfg,
        stage="baseline",
        epochs=cfg.epochs_stage1 + cfg.epochs_stage2 + cfg.epochs_stage3,
        lr=cfg.base_lr,
        forward_fn=model.forward,
        params_fn=model.named_parameters,
        rng=np.random.default_rng(cfg.seed + 3000),
    )


def report_lines(reports: list[StageReport]) -> list[str]:
    """One line per epoch: stage,epoch,loss,train_acc,val_acc."""
    lines = []
    for r in reports:
        for e in r.epochs:
            lines.append(f"{r.stage},{e.epoch},{e.loss:.6f},{e.train_acc:.6f},{e.val_acc:.6f}")
    return lines


def write_reports(reports: list[StageReport], path) -> None:
    with open(path, "w") as fh:
        fh.write("stage,epoch,loss,train_acc,val_acc\n")
        for line in report_lines(reports):
            fh.write(line + "\n")
