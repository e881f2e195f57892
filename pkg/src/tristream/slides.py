"""Pyramidal slide handling, tissue masking, and balanced tile sampling.

Slides live in a simple directory format: ``meta.json`` plus one binary PPM
per pyramid level (level 0 is the highest magnification) and an optional
binary PGM malignancy mask aligned to level 0.  Region reads on
directory-backed slides are lazy and touch only the needed rows of the
needed level.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (BoundsError, DegenerateHistogram, EmptyMaskError,
                     FormatError, SamplingExhausted, SpecError)
from .tensor import Tensor

DEFAULT_TILE_SIDE = 224
WORKING_AREA_LIMIT = 3072 * 7168
SAMPLING_BUDGET = 10_000


# ---------------------------------------------------------------------------
# Portable pixmap/graymap I/O


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def _parse_pnm_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise FormatError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        token = b""
        ch = fh.read(1)
        while ch in b" \t\r\n":
            ch = fh.read(1)
        if ch == b"#":
            fh.readline()
            continue
        while ch and ch not in b" \t\r\n":
            token += ch
            ch = fh.read(1)
        if not token:
            raise FormatError("truncated PNM header")
        fields.append(token)
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise FormatError("only 8-bit PNM supported")
    return w, h, fh.tell()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h, offset = _parse_pnm_header(fh, b"P5")
        payload = fh.read(w * h)
        if len(payload) != w * h:
            raise FormatError("truncated PGM payload")
        return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


class _PpmLevel:
    """Lazy reader for one P6 level file."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            self.width, self.height, self.offset = _parse_pnm_header(fh, b"P6")

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        out = np.empty((h, w, 3), dtype=np.uint8)
        with open(self.path, "rb") as fh:
            for row in range(h):
                fh.seek(self.offset + ((y + row) * self.width + x) * 3)
                data = fh.read(w * 3)
                if len(data) != w * 3:
                    raise FormatError("truncated PPM payload")
                out[row] = np.frombuffer(data, dtype=np.uint8).reshape(w, 3)
        return out


# ---------------------------------------------------------------------------
# Pyramidal slides


@dataclass
class LevelInfo:
    downsample: int
    width: int
    height: int


class PyramidalSlide:
    """Multi-resolution RGB image with per-level downsample factors.

    Backed either by in-memory arrays (synthetic generation) or by a slide
    directory (lazy reads).  Level 0 is the highest magnification.
    """

    def __init__(self, slide_id: str, levels: list[LevelInfo],
                 arrays: Optional[list[np.ndarray]] = None,
                 readers: Optional[list[_PpmLevel]] = None,
                 malignancy_mask: Optional[np.ndarray] = None,
                 tissue_mask_gt: Optional[np.ndarray] = None):
        self.slide_id = slide_id
        self.levels = levels
        self._arrays = arrays
        self._readers = readers
        self._malignancy_mask = malignancy_mask
        self.tissue_mask_gt = tissue_mask_gt

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def downsample(self, level: int) -> int:
        self._check_level(level)
        return self.levels[level].downsample

    def level_dimensions(self, level: int) -> tuple[int, int]:
        """(width, height) of one level."""
        self._check_level(level)
        info = self.levels[level]
        return info.width, info.height

    def _check_level(self, level: int) -> None:
        if not 0 <= level < len(self.levels):
            raise FormatError(f"slide {self.slide_id!r} has no level {level}")

    def read_region(self, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        self._check_level(level)
        info = self.levels[level]
        if x < 0 or y < 0 or x + w > info.width or y + h > info.height:
            raise BoundsError(f"region {(x, y, w, h)} outside level {level} extents")
        if self._arrays is not None:
            return self._arrays[level][y:y + h, x:x + w].copy()
        return self._readers[level].read_region(x, y, w, h)

    def read_level(self, level: int) -> np.ndarray:
        w, h = self.level_dimensions(level)
        return self.read_region(level, 0, 0, w, h)

    @property
    def has_malignancy(self) -> bool:
        return self._malignancy_mask is not None and bool(self._malignancy_mask.any())

    def malignancy_mask(self) -> Optional[np.ndarray]:
        """Boolean mask aligned to level 0, or None."""
        return self._malignancy_mask


def load_slide(path) -> PyramidalSlide:
    """Open a slide directory; level data is read lazily."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FormatError(f"no meta.json in {root}")
    try:
        meta = json.loads(meta_path.read_text())
        slide_id = meta["slide_id"]
        level_entries = meta["levels"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"malformed meta.json in {root}") from exc

    levels, readers = [], []
    prev_d = 0
    for entry in level_entries:
        f = root / entry["file"]
        if not f.exists():
            raise FormatError(f"missing level file {f}")
        reader = _PpmLevel(f)
        d = int(entry["downsample"])
        if d <= prev_d:
            raise FormatError("downsample factors must be strictly increasing")
        prev_d = d
        if (reader.width, reader.height) != (entry["width"], entry["height"]):
            raise FormatError(f"extent mismatch for {f}")
        levels.append(LevelInfo(d, reader.width, reader.height))
        readers.append(reader)
    if levels[0].downsample != 1:
        raise FormatError("level 0 must have downsample 1")

    malignancy = None
    if meta.get("malignancy_mask"):
        malignancy = read_pgm(root / meta["malignancy_mask"]) > 127
    tissue_gt = None
    if meta.get("tissue_mask_gt"):
        tissue_gt = read_pgm(root / meta["tissue_mask_gt"]) > 127
    return PyramidalSlide(slide_id, levels, readers=readers,
                          malignancy_mask=malignancy, tissue_mask_gt=tissue_gt)


def save_slide(slide: PyramidalSlide, path) -> None:
    """Write a slide (and its masks, when present) as a slide directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for level in range(slide.level_count):
        name = f"level_{level}.ppm"
        write_ppm(root / name, slide.read_level(level))
        info = slide.levels[level]
        entries.append({"downsample": info.downsample, "width": info.width,
                        "height": info.height, "file": name})
    meta = {"slide_id": slide.slide_id, "levels": entries,
            "malignancy_mask": None, "tissue_mask_gt": None}
    if slide.malignancy_mask() is not None:
        meta["malignancy_mask"] = "malignancy_mask_level0.pgm"
        write_pgm(root / meta["malignancy_mask"],
                  slide.malignancy_mask().astype(np.uint8) * 255)
    if slide.tissue_mask_gt is not None:
        meta["tissue_mask_gt"] = "tissue_mask_gt_level0.pgm"
        write_pgm(root / meta["tissue_mask_gt"], slide.tissue_mask_gt.astype(np.uint8) * 255)
    (root / "meta.json").write_text(json.dumps(meta, indent=1))


# ---------------------------------------------------------------------------
# Synthetic slides


@dataclass
class SlideSpec:
    """Declarative recipe for a deterministic synthetic slide."""

    slide_id: str = "synthetic"
    width: int = 512
    height: int = 512
    background: tuple[int, int, int] = (255, 255, 255)
    tissue_region: tuple[int, int, int, int] = (48, 48, 416, 416)  # x, y, w, h
    malignant_region: Optional[tuple[int, int, int, int]] = (48, 48, 208, 416)
    benign_color: tuple[int, int, int] = (231, 158, 191)   # pink-ish stain
    malignant_color: tuple[int, int, int] = (112, 58, 140)  # purple-ish stain
    noise: int = 20
    seed: int = 0


def mean_pool2(image: np.ndarray) -> np.ndarray:
    """2x2 mean pooling with round-half-up, cropping odd trailing rows/cols."""
    h, w = image.shape[:2]
    img = image[:h - h % 2, :w - w % 2].astype(np.float64)
    pooled = (img.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3)))
    return np.floor(pooled + 0.5).astype(np.uint8).reshape(h // 2, w // 2, *image.shape[2:])


def _rect_inside(inner, outer) -> bool:
    ix, iy, iw, ih = inner
    ox, oy, ow, oh = outer
    return ix >= ox and iy >= oy and ix + iw <= ox + ow and iy + ih <= oy + oh


def generate_synthetic_slide(spec: SlideSpec) -> PyramidalSlide:
    """Deterministic slide with levels d = 1, 4, 16 and ground-truth masks."""
    extents = (0, 0, spec.width, spec.height)
    if not _rect_inside(spec.tissue_region, extents):
        raise SpecError("tissue region outside slide extents")
    if spec.malignant_region is not None and not _rect_inside(spec.malignant_region,
                                                              spec.tissue_region):
        raise SpecError("malignant region must lie inside the tissue region")

    rng = np.random.default_rng(spec.seed)
    img = np.empty((spec.height, spec.width, 3), dtype=np.float64)
    img[:] = spec.background

    def textured(region, base):
        x, y, w, h = region
        noise = rng.integers(-spec.noise, spec.noise + 1, size=(h, w, 3))
        img[y:y + h, x:x + w] = np.clip(np.asarray(base) + noise, 0, 255)

    textured(spec.tissue_region, spec.benign_color)
    tissue = np.zeros((spec.height, spec.width), dtype=bool)
    tx, ty, tw, th = spec.tissue_region
    tissue[ty:ty + th, tx:tx + tw] = True

    malignancy = np.zeros((spec.height, spec.width), dtype=bool)
    if spec.malignant_region is not None:
        textured(spec.malignant_region, spec.malignant_color)
        mx, my, mw, mh = spec.malignant_region
        malignancy[my:my + mh, mx:mx + mw] = True

    level0 = img.astype(np.uint8)
    level1 = mean_pool2(mean_pool2(level0))
    level2 = mean_pool2(mean_pool2(level1))
    arrays = [level0, level1, level2]
    levels = [LevelInfo(d, a.shape[1], a.shape[0]) for d, a in zip((1, 4, 16), arrays)]
    return PyramidalSlide(spec.slide_id, levels, arrays=arrays,
                          malignancy_mask=malignancy if spec.malignant_region else None,
                          tissue_mask_gt=tissue)


# ---------------------------------------------------------------------------
# Color conversion and Otsu thresholding


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """8-bit RGB -> float HSV with H in [0, 360), S and V in [0, 1]."""
    rgb = image.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    h = np.zeros_like(maxc)
    nz = delta > 0
    rmax = nz & (maxc == r)
    gmax = nz & ~rmax & (maxc == g)
    bmax = nz & ~rmax & ~gmax
    with np.errstate(invalid="ignore", divide="ignore"):
        h[rmax] = ((g - b)[rmax] / delta[rmax]) % 6.0
        h[gmax] = (b - r)[gmax] / delta[gmax] + 2.0
        h[bmax] = (r - g)[bmax] / delta[bmax] + 4.0
    h *= 60.0
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse hexcone conversion back to 8-bit RGB."""
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    hp = (h / 60.0) % 6.0
    c = v * s
    x = c * (1 - np.abs(hp % 2 - 1))
    m = v - c
    sector = np.floor(hp).astype(int) % 6
    r = np.choose(sector, [c, x, np.zeros_like(c), np.zeros_like(c), x, c])
    g = np.choose(sector, [x, c, c, x, np.zeros_like(c), np.zeros_like(c)])
    b = np.choose(sector, [np.zeros_like(c), np.zeros_like(c), x, c, c, x])
    rgb = np.stack([r + m, g + m, b + m], axis=-1)
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def hsv_channels_uint8(hsv: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize H, S, V to 8-bit channels for histogram thresholding."""
    h8 = np.floor(hsv[..., 0] / 360.0 * 255.0 + 0.5).astype(np.uint8)
    s8 = np.floor(hsv[..., 1] * 255.0 + 0.5).astype(np.uint8)
    v8 = np.floor(hsv[..., 2] * 255.0 + 0.5).astype(np.uint8)
    return h8, s8, v8


def otsu_threshold(channel: np.ndarray) -> int:
    """Threshold maximizing between-class variance over the 256-bin histogram.

    Foreground is pixels strictly greater than the threshold; ties break to
    the smallest threshold.
    """
    hist = np.bincount(np.asarray(channel, dtype=np.uint8).reshape(-1), minlength=256)
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogram("constant image has no threshold")
    total = hist.sum()
    values = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)[:-1]  # class sizes for t = 0..254 (class 0 is <= t)
    w1 = total - w0
    cum_mass = np.cumsum(hist * values)[:-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = np.where(w0 > 0, cum_mass / w0, 0.0)
        mu1 = np.where(w1 > 0, (cum_mass[-1] + hist[255] * 255.0 - cum_mass) / w1, 0.0)
    sigma_b = (w0 / total) * (w1 / total) * (mu0 - mu1) ** 2
    sigma_b[(w0 == 0) | (w1 == 0)] = 0.0
    return int(np.argmax(sigma_b))


@dataclass
class TissueMask:
    mask: np.ndarray  # boolean, aligned to working level
    level: int


def choose_working_level(slide: PyramidalSlide) -> int:
    """Finest level within the working-resolution budget, else the coarsest."""
    for level in range(slide.level_count):
        w, h = slide.level_dimensions(level)
        if w * h <= WORKING_AREA_LIMIT:
            return level
    return slide.level_count - 1


def tissue_mask(slide: PyramidalSlide, working_level: Optional[int] = None) -> TissueMask:
    """Otsu foreground on the H and S channels, unioned pixelwise.

    A degenerate channel falls back to the other alone; if both are
    degenerate the slide has no detectable tissue.
    """
    level = choose_working_level(slide) if working_level is None else working_level
    image = slide.read_level(level)
    h8, s8, _ = hsv_channels_uint8(rgb_to_hsv(image))

    masks = []
    for channel in (h8, s8):
        try:
            masks.append(channel > otsu_threshold(channel))
        except DegenerateHistogram:
            pass
    if not masks:
        raise EmptyMaskError(f"slide {slide.slide_id!r} has no separable tissue")
    mask = masks[0]
    for m in masks[1:]:
        mask = mask | m
    return TissueMask(mask=mask, level=level)


def map_coords(pt: tuple[int, int], from_level: int, to_level: int,
               slide: PyramidalSlide) -> tuple[int, int]:
    """Map a point between pyramid levels with floor rounding."""
    d_from = slide.downsample(from_level)
    d_to = slide.downsample(to_level)
    x = (pt[0] * d_from) // d_to
    y = (pt[1] * d_from) // d_to
    w, h = slide.level_dimensions(to_level)
    if not (0 <= x < w and 0 <= y < h):
        raise BoundsError(f"mapped point {(x, y)} outside level {to_level} extents")
    return int(x), int(y)


# ---------------------------------------------------------------------------
# Tile records and manifests


@dataclass
class TileRecord:
    slide_id: str
    x: int  # level-0 top-left
    y: int
    side: int = DEFAULT_TILE_SIDE
    label: int = 0  # 0 = benign, 1 = malignant
    split: str = "train"

    @property
    def center(self) -> tuple[int, int]:
        return self.x + self.side // 2, self.y + self.side // 2


@dataclass
class DatasetManifest:
    records: list[TileRecord] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def counts(self, split: Optional[str] = None) -> tuple[int, int]:
        recs = [r for r in self.records if split is None or r.split == split]
        malignant = sum(r.label for r in recs)
        return len(recs) - malignant, malignant


def _config_digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def save_manifest(manifest: DatasetManifest, path) -> None:
    seed = manifest.provenance.get("seed", 0)
    digest = manifest.provenance.get("digest", "0" * 16)
    with open(path, "w") as fh:
        fh.write(f"# tristream-manifest seed={seed} digest={digest}\n")
        for r in manifest.records:
            fh.write(f"{r.slide_id},{r.x},{r.y},{r.side},{r.label},{r.split}\n")


def load_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# tristream-manifest"):
            raise FormatError("missing manifest header")
        provenance = {}
        for part in header.split()[2:]:
            key, _, value = part.partition("=")
            provenance[key] = int(value) if value.isdigit() else value
        records = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                slide_id, x, y, side, label, split = line.split(",")
                records.append(TileRecord(slide_id, int(x), int(y), int(side),
                                          int(label), split))
            except ValueError as exc:
                raise FormatError(f"bad manifest line {line_no}") from exc
    return DatasetManifest(records=records, provenance=provenance)


def sample_balanced_tiles(slides: list[PyramidalSlide], n: int,
                          tile_side: int = DEFAULT_TILE_SIDE, seed: int = 0,
                          working_level: Optional[int] = None,
                          budget: int = SAMPLING_BUDGET) -> DatasetManifest:
    """Alternate malignant/benign draws until n/2 tiles of each label exist.

    Malignant draws pick among slides with malignancy and rejection-sample a
    tile whose center (mapped to level 0) lies inside the malignancy mask;
    benign draws pick any slide and require the center inside the tissue
    mask at its working magnification and outside the malignancy mask.
    """
    if n % 2 != 0:
        raise ValueError("n must be even")
    manifest = DatasetManifest(provenance={
        "seed": seed,
        "digest": _config_digest({"n": n, "tile_side": tile_side,
                                  "slides": sorted(s.slide_id for s in slides)}),
    })
    if n == 0:
        return manifest

    malignant_idx = [i for i, s in enumerate(slides) if s.has_malignancy]
    if not malignant_idx:
        raise SamplingExhausted("no slide has a nonempty malignancy mask")

    prepared = []
    for s in slides:
        tm = tissue_mask(s, working_level)
        prepared.append({
            "tissue": tm,
            "downsample": s.downsample(tm.level),
            "malignancy": s.malignancy_mask(),
        })

    rng = np.random.default_rng(seed)
    half = tile_side // 2
    for i in range(n):
        label = 1 if i % 2 == 0 else 0
        for _ in range(budget):
            idx = int(rng.choice(malignant_idx)) if label == 1 else int(rng.integers(len(slides)))
            slide, prep = slides[idx], prepared[idx]
            mh, mw = prep["tissue"].mask.shape
            wx = int(rng.integers(mw))
            wy = int(rng.integers(mh))
            cx, cy = map_coords((wx, wy), prep["tissue"].level, 0, slide)
            x, y = cx - half, cy - half
            w0, h0 = slide.level_dimensions(0)
            if x < 0 or y < 0 or x + tile_side > w0 or y + tile_side > h0:
                continue
            if label == 1:
                if not prep["malignancy"][cy, cx]:
                    continue
            else:
                if not prep["tissue"].mask[wy, wx]:
                    continue
                if prep["malignancy"] is not None and prep["malignancy"][cy, cx]:
                    continue
            manifest.records.append(TileRecord(slide.slide_id, x, y, tile_side, label))
            break
        else:
            raise SamplingExhausted(
                f"no acceptable {'malignant' if label else 'benign'} tile in {budget} attempts")
    return manifest


# ---------------------------------------------------------------------------
# Tile extraction and resizing


def extract_tile_array(slide: PyramidalSlide, record: TileRecord) -> np.ndarray:
    """Level-0 crop as a (3, side, side) float array in [0, 1]."""
    region = slide.read_region(0, record.x, record.y, record.side, record.side)
    return region.astype(np.float64).transpose(2, 0, 1) / 255.0


def extract_tile(slide: PyramidalSlide, record: TileRecord) -> Tensor:
    """Level-0 crop as a 1x3xSxS tensor in [0, 1]; no color normalization."""
    return Tensor(extract_tile_array(slide, record)[None, :, :, :])


def resize_tile(tile: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of the trailing two axes to target x target.

    Identity (bit-exact) when the size already matches.
    """
    *lead, h, w = tile.shape
    if h != w:
        raise ValueError("resize_tile expects a square tile")
    if h == target:
        return tile.copy()

    src = (np.arange(target) + 0.5) * (h / target) - 0.5
    src = np.clip(src, 0.0, h - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, h - 1)
    frac = src - lo

    data = tile.astype(np.float64)
    rows = data[..., lo, :] * (1 - frac)[:, None] + data[..., hi, :] * frac[:, None]
    out = rows[..., :, lo] * (1 - frac) + rows[..., :, hi] * frac
    if np.issubdtype(tile.dtype, np.integer):
        return np.floor(out + 0.5).astype(tile.dtype)
    return out.astype(tile.dtype)
