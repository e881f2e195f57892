"""Self-check suites behind the ``verify`` CLI command.

Each suite re-derives expected behavior through an independent route
(finite differences, exhaustive search, generator ground truth) and counts
agreements, so a corrupted op or rule shows up as a nonzero failure count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import build_tristream
from .slides import (SlideSpec, generate_synthetic_slide, otsu_threshold,
                     sample_balanced_tiles)
from .stream import StreamConfig
from .tensor import Tensor, finite_diff_gradient
from .training import Adam


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    failed: int = 0
    failures: list[str] = field(default_factory=list)

    def check(self, ok: bool, detail: str) -> None:
        if ok:
            self.passed += 1
        else:
            self.failed += 1
            self.failures.append(detail)


def _grad_close(analytic: np.ndarray, numeric: np.ndarray, tol: float) -> bool:
    denom = np.maximum(np.abs(numeric), 1.0)
    return bool(np.max(np.abs(analytic - numeric) / denom) <= tol)


def gradient_suite(seed: int = 0, tol: float = 1e-5) -> SuiteResult:
    """Backward rules of each primitive vs central finite differences (f64)."""
    result = SuiteResult("gradient_checks")
    rng = np.random.default_rng(seed)

    def check_op(name, build_loss, x_shape):
        x = Tensor(rng.standard_normal(x_shape), requires_grad=True, dtype=np.float64)
        loss = build_loss(x)
        T.backward(loss)
        numeric = finite_diff_gradient(lambda t: build_loss(t).item(), x)
        result.check(_grad_close(x.grad, numeric, tol), f"{name}: input gradient mismatch")

    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    check_op("conv2d", lambda x: _sum(T.conv2d(x, w, stride=2, padding=1)), (1, 2, 6, 6))

    gamma = Tensor(rng.standard_normal(3) + 1.0, requires_grad=True, dtype=np.float64)
    beta = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)

    def bn_loss(x):
        state = T.BatchNormState(3, np.float64)
        return _sum_sq(T.batch_norm2d(x, gamma, beta, state, mode="train",
                                      update_stats=False))

    check_op("batch_norm2d", bn_loss, (2, 3, 4, 4))
    check_op("relu", lambda x: _sum_sq(T.relu(x)), (2, 5))
    check_op("max_pool2d", lambda x: _sum_sq(T.max_pool2d(x, 2, 2)), (1, 2, 6, 6))
    check_op("global_avg_pool", lambda x: _sum_sq(T.global_avg_pool(x)), (2, 3, 4, 4))

    lw = Tensor(rng.standard_normal((4, 5)), requires_grad=True, dtype=np.float64)
    lb = Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
    check_op("linear", lambda x: _sum_sq(T.linear(x, lw, lb)), (3, 5))

    labels = np.array([0, 1, 0])
    check_op("softmax_cross_entropy",
             lambda x: T.softmax_cross_entropy(x, labels), (3, 2))
    return result


def _sum(t: Tensor) -> Tensor:
    return T.sum_all(t)


def _sum_sq(t: Tensor) -> Tensor:
    return T.sum_all(T.mul(t, t))


def otsu_suite(trials: int = 1000, seed: int = 0) -> SuiteResult:
    """otsu_threshold vs exhaustive between-class-variance search."""
    result = SuiteResult("otsu_oracle")
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        hist = rng.integers(0, 50, size=256)
        while np.count_nonzero(hist) < 2:
            hist = rng.integers(0, 50, size=256)
        channel = np.repeat(np.arange(256, dtype=np.uint8), hist)
        expected = _exhaustive_otsu(hist)
        got = otsu_threshold(channel)
        result.check(got == expected, f"trial {trial}: got {got}, expected {expected}")
    return result


def _exhaustive_otsu(hist: np.ndarray) -> int:
    total = hist.sum()
    best_t, best_score = 0, -1.0
    for t in range(256):
        w0 = hist[:t + 1].sum()
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            score = 0.0
        else:
            mu0 = (hist[:t + 1] * np.arange(t + 1)).sum() / w0
            mu1 = (hist[t + 1:] * np.arange(t + 1, 256)).sum() / w1
            score = (w0 / total) * (w1 / total) * (mu0 - mu1) ** 2
        if score > best_score:
            best_t, best_score = t, score
    return best_t


def sampler_suite(n: int = 200, seed: int = 0) -> SuiteResult:
    """Label soundness and balance of a freshly sampled manifest."""
    result = SuiteResult("sampler_soundness")
    slide = generate_synthetic_slide(SlideSpec(seed=seed))
    manifest = sample_balanced_tiles([slide], n, tile_side=32, seed=seed)
    malignancy = slide.malignancy_mask()
    tissue = slide.tissue_mask_gt
    benign, malignant = manifest.counts()
    result.check(benign == malignant == n // 2,
                 f"unbalanced manifest: {benign} benign / {malignant} malignant")
    for record in manifest.records:
        cx, cy = record.center
        if record.label == 1:
            result.check(bool(malignancy[cy, cx]),
                         f"malignant center {(cx, cy)} outside malignancy mask")
        else:
            result.check(bool(tissue[cy, cx]) and not malignancy[cy, cx],
                         f"benign center {(cx, cy)} mislabeled")
    return result


def freeze_suite(seed: int = 0) -> SuiteResult:
    """Frozen streams must be bit-identical fixed points of optimizer steps."""
    result = SuiteResult("freeze_contract")
    rng = np.random.default_rng(seed)
    config = StreamConfig(stage_depths=(1, 1, 1, 1), scale=1 / 8)
    model = build_tristream(config, seeds=(seed, seed + 1, seed + 2), head_seed=seed + 3)
    model.set_stream_frozen(1, True)
    model.set_stream_frozen(2, True)
    snapshot = {name: p.data.copy() for name, p in model.named_parameters()
                if name.startswith(("s1.", "s2."))}
    stats = {f"s{i}.{n}": st.copy() for i in (1, 2)
             for n, st in model.streams[i].bn_states.items()}

    x = Tensor(rng.random((2, 3, 32, 32)).astype(np.float32))
    loss = T.softmax_cross_entropy(model.forward(x, mode="train"), [0, 1])
    T.backward(loss)
    Adam().step(model.trainable_parameters(), lr=1e-3)

    for name, before in snapshot.items():
        after = dict(model.named_parameters())[name].data
        result.check(np.array_equal(before, after), f"{name} changed while frozen")
    for i in (1, 2):
        for n, st in model.streams[i].bn_states.items():
            old = stats[f"s{i}.{n}"]
            ok = (np.array_equal(old.running_mean, st.running_mean)
                  and np.array_equal(old.running_var, st.running_var))
            result.check(ok, f"s{i}.{n} running stats drifted while frozen")
    return result


def run_all(seed: int = 0, otsu_trials: int = 1000) -> list[SuiteResult]:
    return [
        gradient_suite(seed),
        otsu_suite(otsu_trials, seed),
        sampler_suite(seed=seed),
        freeze_suite(seed),
    ]
