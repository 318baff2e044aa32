"""Ground-truth lagged causal systems and simulated market data.

The simulator draws a random lagged graph, runs a (linear or tanh) lagged
recurrence over it, and maps the latent series onto the exact price CSV and
news-score JSONL formats the ingestion layer consumes, so synthetic runs
exercise the same windowing/encoding path as real data. Labels come from the
latent sign, which coincides with strict adjusted-close movement because the
close is an increasing transform of the latent cumulative sum.
"""

import datetime as dt
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, DataError
from .evaluation import average_ranks
from .kvfile import write_kv_file

log = logging.getLogger(__name__)

_LINK_CODES = {"linear": 0, "tanh": 1}
PRICE_BASE = 500.0


@dataclass
class GroundTruthSystem:
    graph: np.ndarray         # (L, D, D) binary, [lag, source, target]
    weights: np.ndarray       # (L, D, D), zero off-edge
    noise_scales: np.ndarray  # (D,)
    link: str
    seed: int

    @property
    def n_stocks(self) -> int:
        return self.graph.shape[1]

    @property
    def n_lags(self) -> int:
        return self.graph.shape[0]


def generate_system(
    n_stocks: int,
    n_lags: int,
    density: float,
    link: str = "linear",
    seed: int = 0,
    noise_scale: float = 0.5,
    weight_range: tuple[float, float] = (0.5, 1.5),
) -> GroundTruthSystem:
    """Random lagged system; every stock is forced to have >= 1 parent.

    Edges are iid Bernoulli(density); a stock left parentless gets a single
    uniformly random incoming edge, so density -> 0 degenerates to exactly
    one parent per stock. weight_range (0, 0) produces the zero-weight
    control system (labels become coin flips).
    """
    if not 0.0 < density <= 0.5:
        raise ConfigError(f"density must be in (0, 0.5], got {density}")
    if n_stocks < 2 or n_lags < 1:
        raise ConfigError(f"need n_stocks >= 2 and n_lags >= 1, got {n_stocks}, {n_lags}")
    if link not in _LINK_CODES:
        raise ConfigError(f"link must be one of {sorted(_LINK_CODES)}, got {link!r}")
    rng = np.random.default_rng(seed)
    g = (rng.random((n_lags, n_stocks, n_stocks)) < density).astype(np.float64)
    for i in range(n_stocks):
        if g[:, :, i].sum() == 0:
            lag = int(rng.integers(0, n_lags))
            src = int(rng.integers(0, n_stocks))
            g[lag, src, i] = 1.0
    lo, hi = weight_range
    magnitude = rng.uniform(lo, hi, size=g.shape)
    sign = np.where(rng.random(g.shape) < 0.5, -1.0, 1.0)
    weights = g * magnitude * sign
    return GroundTruthSystem(
        graph=g, weights=weights,
        noise_scales=np.full(n_stocks, noise_scale),
        link=link, seed=seed,
    )


def _companion_radius(a: np.ndarray) -> float:
    """Spectral radius of the stacked-lag companion matrix of x_t = sum A_l x_{t-l}."""
    n_lags, dim, _ = a.shape
    comp = np.zeros((n_lags * dim, n_lags * dim))
    for l in range(n_lags):
        comp[:dim, l * dim:(l + 1) * dim] = a[l].T
    if n_lags > 1:
        comp[dim:, :-dim] = np.eye((n_lags - 1) * dim)
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


@dataclass
class SimulatedMarket:
    dates: list[dt.date]
    symbols: list[str]
    panel: np.ndarray    # (D, T, 6) raw price features
    labels: np.ndarray   # (D, T) sign of the latent step
    latent: np.ndarray   # (T, D)
    system: GroundTruthSystem


def simulate(system: GroundTruthSystem, t_steps: int, seed: int | None = None) -> SimulatedMarket:
    """Run the lagged recurrence and emit price-like rows.

    Burn-in of 10*L steps is discarded. Unstable linear systems are rescaled
    toward spectral radius < 0.97 with a logged factor.
    """
    n_lags = system.n_lags
    if t_steps <= 10 * n_lags:
        raise ConfigError(f"t_steps must exceed 10 * n_lags = {10 * n_lags}")
    rng = np.random.default_rng(system.seed if seed is None else seed)

    a = system.weights * system.graph
    if system.link == "linear" and np.any(a != 0):
        radius = _companion_radius(a)
        total_rescale = 1.0
        while radius >= 0.97:
            a = a * 0.9
            total_rescale *= 0.9
            radius = _companion_radius(a)
        if total_rescale != 1.0:
            log.info("rescaled weights by %.4f for stationarity (radius now %.3f)", total_rescale, radius)

    burn = 10 * n_lags
    total = t_steps + burn
    noise = rng.normal(size=(total, system.n_stocks)) * system.noise_scales
    x_full = kernels.lagged_recurrence(
        np.ascontiguousarray(a), np.ascontiguousarray(noise), n_lags, _LINK_CODES[system.link]
    )
    x = x_full[burn:]

    # adjusted close: positive cumulative-sum transform of the latent series
    cum = np.cumsum(x, axis=0)
    scale = 1.0
    low = cum.min()
    if PRICE_BASE + low * scale < 1.0:
        scale = (PRICE_BASE - 1.0) / abs(low)
        log.info("rescaled price increments by %.4f to keep prices positive", scale)
    adj = PRICE_BASE + scale * cum                      # (T, D)
    prev_adj = np.vstack([PRICE_BASE + scale * cum[0] - scale * x[0], adj[:-1]])

    step = adj - prev_adj
    open_ = prev_adj
    close = adj
    high = np.maximum(open_, close) + 0.1 + 0.05 * np.abs(step)
    low_px = np.minimum(open_, close) - (0.1 + 0.05 * np.abs(step))
    volume = 1e6 * (1.0 + np.abs(x))

    panel = np.stack([adj, high, low_px, open_, close, volume], axis=-1).transpose(1, 0, 2)
    labels = (x > 0).astype(np.int64).T
    start = dt.date(2015, 1, 1)
    dates = [start + dt.timedelta(days=i) for i in range(t_steps)]
    symbols = [f"SYN{i:02d}" for i in range(system.n_stocks)]
    return SimulatedMarket(dates=dates, symbols=symbols, panel=panel,
                           labels=labels, latent=x, system=system)


def attach_news(
    market: SimulatedMarket,
    rng: np.random.Generator,
    coverage: float = 1.0,
    signal_scale: float = 1.0,
    noise_scale: float = 0.2,
) -> list[dict]:
    """Synthetic news scores correlated with the next step's movement.

    Sentiment is the clipped scaled future latent step plus noise; the other
    four dimensions are mid-scale with noise. Each stock-day gets one item
    with probability `coverage`. Returns JSONL-ready dicts.
    """
    rows = []
    t_steps, n_stocks = market.latent.shape
    for t in range(t_steps - 1):
        for i in range(n_stocks):
            if rng.random() >= coverage:
                continue
            future = market.latent[t + 1, i]
            sentiment = float(np.clip(signal_scale * future + rng.normal(0, noise_scale), -1.0, 1.0))
            other = np.clip(5.0 + rng.normal(0, 1.0, size=4), 0.0, 10.0)
            rows.append({
                "symbol": market.symbols[i],
                "ts": f"{market.dates[t].isoformat()}T12:00:00Z",
                "scores": [float(other[0]), sentiment, float(other[1]), float(other[2]), float(other[3])],
            })
    return rows


def write_dataset(
    market: SimulatedMarket,
    out_dir,
    train_frac: float = 0.8,
    valid_frac: float = 0.1,
    news_rows: list[dict] | None = None,
    label_mode: str = "strict",
) -> Path:
    """Emit price CSVs, optional news scores, ground truth, and a manifest.

    Returns the manifest path; the files match the ingestion formats exactly.
    """
    out_dir = Path(out_dir)
    (out_dir / "prices").mkdir(parents=True, exist_ok=True)
    for i, sym in enumerate(market.symbols):
        lines = ["date,adj_close,high,low,open,close,volume"]
        for t, date in enumerate(market.dates):
            adj, high, low_px, open_, close, volume = market.panel[i, t]
            lines.append(
                f"{date.isoformat()},{adj:.8f},{high:.8f},{low_px:.8f},{open_:.8f},{close:.8f},{volume:.2f}"
            )
        (out_dir / "prices" / f"{sym}.csv").write_text("\n".join(lines) + "\n")

    n = len(market.dates)
    n_train = max(1, int(n * train_frac))
    n_valid = max(1, int(n * valid_frac))
    if n_train + n_valid >= n:
        raise ConfigError("train_frac + valid_frac leave no test days")
    manifest = {
        "symbols": ",".join(market.symbols),
        "price_dir": "prices",
        "price_format": "raw",
        "label_mode": label_mode,
        "train_end": market.dates[n_train - 1].isoformat(),
        "valid_end": market.dates[n_train + n_valid - 1].isoformat(),
    }
    if news_rows is not None:
        with open(out_dir / "scores.jsonl", "w") as fh:
            for row in news_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        manifest["news_scores"] = "scores.jsonl"

    np.savez(out_dir / "ground_truth.npz", graph=market.system.graph,
             weights=market.system.weights, latent=market.latent)
    manifest_path = out_dir / "manifest.txt"
    write_kv_file(manifest_path, manifest)
    return manifest_path


# ---------------------------------------------------------------------------
# recovery scoring
# ---------------------------------------------------------------------------


@dataclass
class RecoveryScore:
    auroc: float
    f1: float
    shd: int


def recovery_score(sigma: np.ndarray, true_graph: np.ndarray) -> RecoveryScore:
    """AUROC of edge probabilities against the true graph, plus F1/SHD at 0.5."""
    if sigma.shape != true_graph.shape:
        raise ConfigError(f"shape mismatch: sigma {sigma.shape} vs truth {true_graph.shape}")
    scores = sigma.ravel()
    truth = true_graph.ravel().astype(bool)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC undefined: the true graph is all-zero or all-one")
    ranks = average_ranks(scores)
    auroc = (ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    pred = scores > 0.5
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    shd = int(np.sum(pred != truth))
    return RecoveryScore(auroc=float(auroc), f1=float(f1), shd=shd)


def shuffled_auroc_percentile(
    sigma: np.ndarray,
    true_graph: np.ndarray,
    n_shuffles: int = 200,
    seed: int = 0,
    percentile: float = 95.0,
) -> float:
    """Null AUROC percentile from randomly permuted edge probabilities."""
    rng = np.random.default_rng(seed)
    flat = sigma.ravel().copy()
    aurocs = []
    for _ in range(n_shuffles):
        rng.shuffle(flat)
        aurocs.append(recovery_score(flat.reshape(sigma.shape), true_graph).auroc)
    return float(np.percentile(aurocs, percentile))
