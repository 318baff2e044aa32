"""Market information encoders: raw prices and denoised news scores to the
fixed-width per-stock-day representation the causal model consumes.

Feature layout of the assembled tensor is [price embedding | news embedding]
along the last axis; lag position k corresponds to day T-(k+1).
"""

import numpy as np

from . import autodiff as ad
from .errors import DataError

PRICE_WIDTH = 6
SCORE_WIDTH = 5


def init_params(store: ad.ParamStore, rng: np.random.Generator, d_p: int, d_m: int, use_news: bool) -> None:
    store.add("price_encoder.w", ad.xavier_uniform(rng, (PRICE_WIDTH, d_p), PRICE_WIDTH, d_p))
    store.add("price_encoder.b", np.zeros(d_p))
    if use_news:
        store.add("news_encoder.w", ad.xavier_uniform(rng, (SCORE_WIDTH, d_m), SCORE_WIDTH, d_m))
        store.add("news_encoder.b", np.zeros(d_m))
        store.add("news_encoder.no_news", np.zeros(d_m))


def encode_price(x: ad.Node, p: ad.ParamView) -> ad.Node:
    """Shared affine map from the z-scored 6-feature row to R^{d_p}.

    x: (..., 6). Applied identically across stocks and lags.
    """
    if not np.all(np.isfinite(x.value)):
        bad = np.argwhere(~np.isfinite(x.value))[0]
        raise DataError(f"non-finite price feature at index {tuple(bad)}")
    return ad.affine(x, p("price_encoder.w"), p("price_encoder.b"))


def embed_news_day(scores: list[np.ndarray], p: ad.ParamView, l_max: int) -> ad.Node:
    """Embed one stock-day's news: per-item affine, mean-pooled.

    Zero items resolve to the learned no-news vector. More than l_max items
    keep the l_max most recent (callers pass scores oldest-to-newest).
    """
    if not scores:
        return p("news_encoder.no_news")
    kept = scores[-l_max:]
    stacked = ad.constant(np.stack(kept).astype(p.store.dtype))
    embedded = ad.affine(stacked, p("news_encoder.w"), p("news_encoder.b"))
    return ad.reduce_mean(embedded, axis=0)


def embed_news_batch(mean_scores: ad.Node, has_news: ad.Node, p: ad.ParamView) -> ad.Node:
    """Vectorized day embedding from precomputed per-day mean scores.

    Mean pooling commutes with the affine layer, so embedding the mean of a
    day's 5-vectors equals pooling per-item embeddings (embed_news_day);
    tests pin the equivalence. has_news selects the learned no-news vector
    on empty days and keeps it trainable through the (1 - mask) path.

    mean_scores: (B, D, L, 5); has_news: (B, D, L).
    """
    embedded = ad.affine(mean_scores, p("news_encoder.w"), p("news_encoder.b"))
    mask = ad.reshape(has_news, has_news.value.shape + (1,))
    no_news = p("news_encoder.no_news")
    return ad.add(ad.mul(mask, embedded), ad.mul(ad.scale_shift(mask, -1.0, 1.0), no_news))


def assemble(price_emb: ad.Node, news_emb: ad.Node | None) -> ad.Node:
    """Concatenate branch embeddings; price-only when news is disabled."""
    if news_emb is None:
        return price_emb
    return ad.concat([price_emb, news_emb], axis=-1)
