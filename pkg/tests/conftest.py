"""Shared fixtures: small synthetic datasets routed through the real
ingestion path (CSV files -> manifest -> panel)."""

import numpy as np
import pytest

from causalmarket import synthetic
from causalmarket.config import TrainConfig
from causalmarket.data import DatasetSpec, build_panel
from causalmarket.model import Model


def make_synth_dataset(tmp_path, D=4, L=2, steps=160, seed=0, density=0.25,
                       noise_scale=0.5, weight_range=(0.5, 1.5), with_news=False,
                       lag=None, l_max=10):
    system = synthetic.generate_system(D, L, density, seed=seed,
                                       noise_scale=noise_scale, weight_range=weight_range)
    market = synthetic.simulate(system, steps)
    news_rows = None
    if with_news:
        news_rows = synthetic.attach_news(market, np.random.default_rng(seed + 1))
    manifest = synthetic.write_dataset(market, tmp_path, news_rows=news_rows)
    spec = DatasetSpec.from_manifest(manifest)
    dataset = build_panel(spec, lag=lag or L, l_max=l_max, use_news=with_news)
    return system, market, dataset


def small_config(D_unused=None, **kw):
    base = dict(
        lag=2, d_p=4, d_m=8, hidden=8, depth=2, batch_size=16,
        learning_rate=1e-3, epochs=3, seed=0, precision="float64",
        use_news=False, patience=50,
    )
    base.update(kw)
    return TrainConfig(**base)


def small_model(symbols, **kw):
    cfg = small_config(**kw)
    return Model.build(cfg, symbols, np.random.default_rng(cfg.seed))


@pytest.fixture
def synth_dataset(tmp_path):
    return make_synth_dataset(tmp_path)
