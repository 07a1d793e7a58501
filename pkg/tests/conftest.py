"""Session fixtures: one synthetic multi-site dataset, its embedding cache,
and the two overfit training runs shared by the trainer and acceptance suites."""

from __future__ import annotations

import numpy as np
import pytest

from promptseg.data import EvalPlan, load_mask, load_sample, split_train_val
from promptseg.encoder_cache import StandinEncoder, cache_file_hash, precompute_embeddings
from promptseg.synthetic import SiteStyle, write_synthetic_dataset
from promptseg.training import train

from helpers import DESK_IMAGE_SIZE, DESK_SPEC, desk_config

# site A is the training source; B/N/L shift appearance in different ways
SITE_STYLES = {
    "A": SiteStyle(0.25, 0.80, 0.04),
    "B": SiteStyle(0.30, 0.85, 0.05),   # brighter, mild shift
    "N": SiteStyle(0.25, 0.80, 0.11),   # same levels, noisier
    "L": SiteStyle(0.25, 0.72, 0.07),   # lower contrast
}
SITE_COUNTS = {"A": 20, "B": 32, "N": 32, "L": 32}


class DeskData:
    def __init__(self, manifest, cache, root):
        self.manifest = manifest
        self.cache = cache
        self.root = root
        self.cache_hash = cache_file_hash(cache.cache_path)
        self.masks = {
            r.sample_id: load_mask(r, DESK_IMAGE_SIZE) for r in manifest.records
        }

    def site_records(self, site):
        return [r for r in self.manifest.records if r.site == site]

    def source_plan(self, seed: int = 0) -> EvalPlan:
        tr, va = split_train_val(self.manifest, "A", seed=seed)
        return EvalPlan(source_site="A", train_ids=tuple(tr), val_ids=tuple(va), target_sites={})


@pytest.fixture(scope="session")
def desk(tmp_path_factory) -> DeskData:
    root = tmp_path_factory.mktemp("desk")
    manifest = write_synthetic_dataset(
        root, SITE_COUNTS, seed=0, image_size=DESK_IMAGE_SIZE, styles=SITE_STYLES
    )
    samples = [load_sample(r, DESK_IMAGE_SIZE) for r in manifest.records]
    cache = precompute_embeddings(StandinEncoder(DESK_SPEC, seed=0), samples, root / "cache.dsec")
    return DeskData(manifest, cache, root)


@pytest.fixture(scope="session")
def overfit_grid(desk):
    """28-epoch (84-step) grid-points overfit run on site A."""
    config = desk_config(mode="grid_points")
    plan = desk.source_plan(seed=0)
    return config, plan, train(config, plan, desk.cache, desk.manifest)


@pytest.fixture(scope="session")
def overfit_box(desk):
    """Matching whole-box overfit run."""
    config = desk_config(mode="whole_box")
    plan = desk.source_plan(seed=0)
    return config, plan, train(config, plan, desk.cache, desk.manifest)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
