"""Tile dataset adapters used by the training loop.

A dataset is anything with ``__len__`` and ``get(i) -> (chw_float_array,
label)``.  ``ArrayDataset`` wraps in-memory arrays; ``ManifestDataset``
extracts (and caches) tiles from pyramidal slides on demand.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class ArrayDataset:
    """In-memory tiles: X of shape (n, 3, H, W) in [0, 1], integer labels y."""

    def __init__(self, X, y):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        if self.X.ndim != 4:
            raise ShapeError("ArrayDataset expects (n, C, H, W) tiles")
        if len(self.X) != len(self.y):
            raise ShapeError("X and y length mismatch")

    def __len__(self) -> int:
        return len(self.X)

    def get(self, i: int):
        return self.X[i], int(self.y[i])


class ManifestDataset:
    """Tiles drawn from pyramidal slides via a manifest's records.

    Extracted tiles are cached in memory; desk-scale manifests are small.
    """

    def __init__(self, slides: dict, manifest, split: str | None = None):
        from .slides import extract_tile_array

        self._extract = extract_tile_array
        self.slides = slides
        self.records = [r for r in manifest.records if split is None or r.split == split]
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def get(self, i: int):
        rec = self.records[i]
        tile = self._cache.get(i)
        if tile is None:
            tile = self._extract(self.slides[rec.slide_id], rec)
            self._cache[i] = tile
        return tile, rec.label
