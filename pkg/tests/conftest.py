import numpy as np
import pytest

from tristream.datasets import ManifestDataset
from tristream.evaluation import split_manifest
from tristream.model import build_tristream
from tristream.slides import (SlideSpec, generate_synthetic_slide,
                              sample_balanced_tiles)
from tristream.stream import StreamConfig

TINY_CONFIG = StreamConfig(stage_depths=(1, 1, 1, 1), scale=1 / 8)


def pytest_terminal_summary(terminalreporter):
    """Echo one pass/fail line per acceptance criterion after the run."""
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return TINY_CONFIG


@pytest.fixture
def tiny_model():
    return build_tristream(TINY_CONFIG, seeds=(0, 1, 2), head_seed=3)


@pytest.fixture(scope="session")
def synthetic_slides():
    """Two deterministic slides keyed by id."""
    slides = {}
    for i in range(2):
        slide = generate_synthetic_slide(SlideSpec(slide_id=f"s{i}", seed=i))
        slides[slide.slide_id] = slide
    return slides


@pytest.fixture(scope="session")
def texture_manifest(synthetic_slides):
    """400 balanced 32px tiles, split 80/20 by tile."""
    manifest = sample_balanced_tiles(list(synthetic_slides.values()), 400,
                                     tile_side=32, seed=7)
    return split_manifest(manifest, (0.8, 0.2), by_slide=False, seed=7)


@pytest.fixture(scope="session")
def texture_train(synthetic_slides, texture_manifest):
    return ManifestDataset(synthetic_slides, texture_manifest, "train")


@pytest.fixture(scope="session")
def texture_val(synthetic_slides, texture_manifest):
    return ManifestDataset(synthetic_slides, texture_manifest, "val")
