"""Operator entry point: synth, tile, train, eval, heatmap, verify.

Options merge over an optional flat ``key = value`` config file; explicit
flags win.  Every command echoes its effective configuration into the
output directory so a run is reproducible from its outputs alone.

Exit codes: 0 success, 1 usage, 2 slide spec, 3 sampling, 4 evaluation,
5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (EmptyEvaluation, SamplingExhausted, SpecError,
                     TriStreamError)

EXIT_USAGE = 1
EXIT_SPEC = 2
EXIT_SAMPLING = 3
EXIT_EVALUATION = 4
EXIT_VERIFY = 5

DEFAULTS = {
    "stage_depths": "3,4,6,3",
    "base_width": 64,
    "scale": 1.0,
    "num_classes": 2,
    "base_lr": 1e-4,
    "batch_size": 32,
    "epochs_stage1": 5,
    "epochs_stage2": 5,
    "epochs_stage3": 5,
    "brightness": 0.1,
    "seed": 0,
    "tile_side": 224,
    "threshold": 0.5,
}


def _parse_config_file(path: str) -> dict:
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"config line {line_no}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _coerce_like(default, raw):
    if isinstance(default, bool):
        return raw in ("1", "true", "yes", "on")
    return type(default)(raw)


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        for key, raw in _parse_config_file(args.config).items():
            if key not in cfg:
                raise SystemExit(f"unknown config key {key!r}")
            cfg[key] = _coerce_like(cfg[key], raw)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    (out_dir / "config_effective.txt").write_text("\n".join(lines) + "\n")


def _stream_config(cfg: dict):
    from .stream import StreamConfig

    depths = tuple(int(d) for d in str(cfg["stage_depths"]).split(","))
    return StreamConfig(stage_depths=depths, base_width=cfg["base_width"],
                        scale=cfg["scale"])


def _train_config(cfg: dict):
    from .training import TrainConfig

    return TrainConfig(base_lr=cfg["base_lr"], batch_size=cfg["batch_size"],
                       epochs_stage1=cfg["epochs_stage1"],
                       epochs_stage2=cfg["epochs_stage2"],
                       epochs_stage3=cfg["epochs_stage3"],
                       brightness=cfg["brightness"], seed=cfg["seed"])


def load_slides_dir(path: str) -> dict:
    """Load every slide under ``path`` (or ``path`` itself) by id."""
    from .errors import FormatError
    from .slides import load_slide

    root = Path(path)
    if (root / "meta.json").exists():
        slide = load_slide(root)
        return {slide.slide_id: slide}
    slides = {}
    for child in sorted(root.iterdir()):
        if (child / "meta.json").exists():
            slide = load_slide(child)
            slides[slide.slide_id] = slide
    if not slides:
        raise FormatError(f"no slide directories under {root}")
    return slides


def _load_any_checkpoint(path: str):
    from .evaluation import BASELINE_MAGIC, load_baseline_checkpoint
    from .model import load_checkpoint

    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == BASELINE_MAGIC:
        return load_baseline_checkpoint(path)
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    from .slides import SlideSpec, generate_synthetic_slide, save_slide

    if args.spec_file:
        spec = SlideSpec(**json.loads(Path(args.spec_file).read_text()))
    else:
        spec = SlideSpec()
    slide = generate_synthetic_slide(spec)
    out = Path(args.out_dir)
    save_slide(slide, out)
    print(f"wrote slide {slide.slide_id!r} with {slide.level_count} levels to {out}")
    return 0


def cmd_tile(args) -> int:
    from .slides import sample_balanced_tiles, save_manifest

    if args.n % 2 != 0:
        print("error: --n must be even", file=sys.stderr)
        return EXIT_USAGE
    cfg = effective_config(args)
    slides = load_slides_dir(args.slides_dir)
    manifest = sample_balanced_tiles(list(slides.values()), args.n,
                                     tile_side=cfg["tile_side"], seed=cfg["seed"])
    save_manifest(manifest, args.out)
    benign, malignant = manifest.counts()
    print(f"wrote {len(manifest.records)} records ({malignant} malignant, "
          f"{benign} benign) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .datasets import ManifestDataset
    from .evaluation import SingleStreamBaseline, save_baseline_checkpoint
    from .model import build_tristream, save_checkpoint
    from .slides import load_manifest
    from .training import run_policy, train_baseline, write_reports

    cfg = effective_config(args)
    out_dir = Path(args.out_dir)
    _echo_config(cfg, out_dir)
    slides = load_slides_dir(args.slides_dir)
    manifest = load_manifest(args.manifest)
    train_data = ManifestDataset(slides, manifest, split="train")
    val_records = [r for r in manifest.records if r.split == "val"]
    val_data = ManifestDataset(slides, manifest, split="val") if val_records else None

    stream_cfg = _stream_config(cfg)
    train_cfg = _train_config(cfg)
    if args.single_stream:
        model = SingleStreamBaseline(stream_cfg, cfg["num_classes"], seed=cfg["seed"])
        reports = [train_baseline(model, train_data, train_cfg, val_data)]
        save_baseline_checkpoint(model, out_dir / "baseline.ckpt")
    else:
        seed = cfg["seed"]
        model = build_tristream(stream_cfg, cfg["num_classes"],
                                seeds=(seed, seed + 1, seed + 2), head_seed=seed + 3)
        reports = run_policy(model, train_data, train_cfg, val_data,
                             checkpoint_dir=str(out_dir))
    write_reports(reports, out_dir / "reports.csv")
    for r in reports:
        last = r.epochs[-1] if r.epochs else None
        summary = (f"loss={last.loss:.4f} acc={last.train_acc:.4f}" if last else "no epochs")
        print(f"stage {r.stage}: lr={r.lr:g} {summary}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import comparison_table, evaluate
    from .slides import load_manifest

    cfg = effective_config(args)
    model = _load_any_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    slides = load_slides_dir(args.slides_dir)
    _, report = evaluate(model, manifest, args.split, slides,
                         threshold=cfg["threshold"])
    print(comparison_table({args.label: report}))
    return 0


def cmd_heatmap(args) -> int:
    from .evaluation import assemble_heatmap, export_heatmap_image

    model = _load_any_checkpoint(args.checkpoint)
    slides = load_slides_dir(args.slide_dir)
    slide = next(iter(slides.values()))
    stride = args.stride if args.stride else args.side
    heatmap = assemble_heatmap(model, slide, args.side, stride)
    export_heatmap_image(heatmap, args.out)
    sidecar = {
        "slide_id": slide.slide_id,
        "side": heatmap.side,
        "stride": heatmap.stride,
        "rows": heatmap.probs.shape[0],
        "cols": heatmap.probs.shape[1],
    }
    Path(str(args.out) + ".json").write_text(json.dumps(sidecar, indent=1))
    print(f"wrote {sidecar['rows']}x{sidecar['cols']} heatmap to {args.out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(seed=args.seed or 0, otsu_trials=args.otsu_trials)
    failed = False
    for r in results:
        status = "ok" if r.failed == 0 else "FAIL"
        print(f"{r.name}: {r.passed} passed, {r.failed} failed [{status}]")
        for detail in r.failures[:10]:
            print(f"  - {detail}")
        failed = failed or r.failed > 0
    return EXIT_VERIFY if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tristream",
        description="Tile-level histopathology grading pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_shared(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="generate a synthetic pyramidal slide")
    p.add_argument("out_dir")
    p.add_argument("--spec-file", help="JSON slide spec; defaults used if omitted")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="sample a balanced tile manifest")
    p.add_argument("slides_dir")
    p.add_argument("--n", type=int, required=True, help="total tiles (even)")
    p.add_argument("--tile-side", dest="tile_side", type=int)
    p.add_argument("--out", required=True)
    add_shared(p)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="run the staged training policy")
    p.add_argument("manifest")
    p.add_argument("slides_dir")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--single-stream", action="store_true",
                   help="train the single-stream baseline instead")
    for key in ("base_width", "batch_size", "epochs_stage1", "epochs_stage2",
                "epochs_stage3", "num_classes"):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    p.add_argument("--stage-depths", dest="stage_depths")
    for key in ("scale", "base_lr", "brightness"):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float)
    add_shared(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("slides_dir")
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float)
    p.add_argument("--label", default="tristream", help="row label in the table")
    add_shared(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="assemble a malignancy probability heatmap")
    p.add_argument("checkpoint")
    p.add_argument("slide_dir")
    p.add_argument("--side", type=int, default=224)
    p.add_argument("--stride", type=int, default=0, help="defaults to --side")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--otsu-trials", dest="otsu_trials", type=int, default=1000)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except SamplingExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SAMPLING
    except EmptyEvaluation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVALUATION
    except (TriStreamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
