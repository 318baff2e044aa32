"""Variational posterior over lagged causal graphs.

Edges always point from a lagged day to the target day, so every graph is
acyclic by construction and nothing in the package applies an acyclicity
penalty. Edge (l, j, i) means: stock j at lag l influences stock i at the
target day; tensors are indexed [l-1, j, i].

Per-edge existence/non-existence likelihoods U and V are free parameters.
In the lag-coupled mode the likelihood of an edge at lag l >= 2 is a shared
learned function of (own likelihood, lag l-1 likelihood); lag 1 passes
through untouched. Edge probabilities are sigma = exp(u')/(exp(u')+exp(v')),
computed stably as sigmoid(u' - v').
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nets
from .errors import ConfigError, DataError

SIGMA_EPS_F64 = 1e-13
SIGMA_EPS_F32 = 1e-6


def sigma_eps(dtype) -> float:
    return SIGMA_EPS_F64 if np.dtype(dtype) == np.float64 else SIGMA_EPS_F32


def init_params(
    store: ad.ParamStore,
    rng: np.random.Generator,
    n_stocks: int,
    n_lags: int,
    transform_depth: int = 1,
    transform_hidden: int = 8,
    u_offset: float = 0.0,
) -> None:
    """u_offset shifts the existence likelihoods at init: 0 starts edges near
    probability 1/2; a positive offset starts the graph dense, letting the
    model learn its function under full parent sets before pruning."""
    shape = (n_lags, n_stocks, n_stocks)
    store.add("graph.u", ad.xavier_uniform(rng, shape, n_stocks, n_stocks) + u_offset)
    store.add("graph.v", ad.xavier_uniform(rng, shape, n_stocks, n_stocks))
    store.add("graph.weight", ad.xavier_uniform(rng, shape, n_stocks, n_stocks))
    sizes = nets.mlp_sizes(2, 1, transform_hidden, transform_depth)
    nets.init_mlp(store, rng, "graph.hu", sizes)
    nets.init_mlp(store, rng, "graph.hv", sizes)


def _lag_transform(x: ad.Node, p: ad.ParamView, prefix: str, depth: int) -> ad.Node:
    """Couple each lag's likelihood to its predecessor: out_l = h(x_l, x_{l-1})
    for l >= 2, identity at lag 1 (no predecessor)."""
    n_lags = x.value.shape[0]
    if n_lags == 1:
        return x
    cur = ad.narrow(x, 0, 1, n_lags - 1)
    prev = ad.narrow(x, 0, 0, n_lags - 1)
    pair_shape = cur.value.shape + (1,)
    pairs = ad.concat([ad.reshape(cur, pair_shape), ad.reshape(prev, pair_shape)], axis=-1)
    out = nets.apply_mlp(pairs, p, prefix, depth)
    out = ad.reshape(out, cur.value.shape)
    return ad.concat([ad.narrow(x, 0, 0, 1), out], axis=0)


def edge_probabilities(
    p: ad.ParamView,
    lag_dependent: bool = True,
    existence_only: bool = False,
    transform_depth: int = 1,
) -> ad.Node:
    """Edge probability tensor, strictly inside (0, 1) after clamping."""
    u = p("graph.u")
    eps = sigma_eps(p.store.dtype)
    if lag_dependent:
        u = _lag_transform(u, p, "graph.hu", transform_depth)
    if existence_only:
        return ad.clip(ad.sigmoid(u), eps, 1.0 - eps)
    v = p("graph.v")
    if lag_dependent:
        v = _lag_transform(v, p, "graph.hv", transform_depth)
    return ad.clip(ad.sigmoid(ad.sub(u, v)), eps, 1.0 - eps)


@dataclass
class GraphSample:
    """One Gumbel-softmax draw: hard 0/1 values forward, relaxed backward."""

    relaxed: ad.Node     # (L, D, D) in (0, 1); gradients flow here
    hard: ad.Node        # straight-through node: binary forward values
    tau: float

    @property
    def hard_values(self) -> np.ndarray:
        return self.hard.value


def sample_graph(
    sigma: ad.Node,
    tau: float = 1.0,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> GraphSample:
    """Sample one graph via the two-way Gumbel-softmax relaxation.

    Pass explicit noise to hold the draw fixed across calls (the gradient
    audit perturbs parameters under frozen noise).
    """
    if noise is None:
        if rng is None:
            raise ConfigError("sample_graph needs an rng or explicit noise")
        noise = ad.logistic_noise(rng, sigma.value.shape, sigma.value.dtype)
    relaxed = ad.gumbel_softmax_binary(sigma, tau, noise)
    hard = ad.straight_through_round(relaxed)
    return GraphSample(relaxed=relaxed, hard=hard, tau=tau)


def sample_hard_many(
    sigma_values: np.ndarray, n: int, rng: np.random.Generator, tau: float = 1.0
) -> np.ndarray:
    """n independent hard samples at once (Monte Carlo cross-checks).

    The hard value of the relaxation is 1 exactly when logit(sigma) plus
    logistic noise is nonnegative, which this computes directly.
    """
    logit = np.log(sigma_values) - np.log1p(-sigma_values)
    logit = np.clip(logit, -30.0, 30.0)
    noise = ad.logistic_noise(rng, (n,) + sigma_values.shape, np.float64)
    return (logit + noise >= 0.0).astype(np.float64)


def mode_graph(sigma_values: np.ndarray) -> np.ndarray:
    """Most likely graph: threshold edge probabilities at 0.5 (evaluation)."""
    return (sigma_values > 0.5).astype(sigma_values.dtype)


def log_prior(
    g: ad.Node,
    lambda_sparse: float,
    lambda_domain: float = 0.0,
    domain_graph: np.ndarray | None = None,
) -> ad.Node:
    """Unnormalized graph log-prior: -ls*||G||_F^2 - ld*||G - G_p||_F^2."""
    if domain_graph is None:
        if lambda_domain != 0.0:
            raise ConfigError("lambda_domain requires a domain knowledge graph")
    elif domain_graph.shape != g.value.shape:
        raise ConfigError(
            f"domain graph shape {domain_graph.shape} does not match graph {g.value.shape}"
        )
    out = ad.scale_shift(ad.reduce_sum(ad.mul(g, g)), -lambda_sparse)
    if domain_graph is not None and lambda_domain != 0.0:
        diff = ad.sub(g, ad.constant(domain_graph, dtype=g.value.dtype))
        out = ad.add(out, ad.scale_shift(ad.reduce_sum(ad.mul(diff, diff)), -lambda_domain))
    return out


def posterior_entropy(sigma: ad.Node) -> ad.Node:
    """Entropy of the independent-Bernoulli posterior in closed form.

    The lag coupling acts on parameters, not on sampled predecessors, so the
    joint stays a product of Bernoullis and the entropy is the edgewise sum
    of -s*ln(s) - (1-s)*ln(1-s).
    """
    one_minus = ad.scale_shift(sigma, -1.0, 1.0)
    ent = ad.add(ad.mul(sigma, ad.log(sigma)), ad.mul(one_minus, ad.log(one_minus)))
    return ad.scale_shift(ad.reduce_sum(ent), -1.0)


def causal_strength(graph_values: np.ndarray, weight_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise product of graph and weight tensors, plus its lag average.

    Returns (per-lag (L, D, D), lag-averaged (D, D)).
    """
    if graph_values.shape != weight_values.shape:
        raise ConfigError(
            f"graph shape {graph_values.shape} != weight shape {weight_values.shape}"
        )
    per_lag = graph_values * weight_values
    return per_lag, per_lag.mean(axis=0)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_graph_export(path, sigma: np.ndarray, weight: np.ndarray, sample: np.ndarray, symbols: list[str]) -> None:
    """Posterior snapshot consumed by evaluation and external plotting."""
    per_lag, lag_avg = causal_strength(sigma, weight)
    meta = json.dumps({"symbols": symbols})
    with open(path, "wb") as fh:
        np.savez(
            fh,
            sigma=sigma, weight=weight, sample=sample,
            strength_per_lag=per_lag, strength_lag_avg=lag_avg,
            meta=np.frombuffer(meta.encode(), dtype=np.uint8),
        )


def load_graph_export(path) -> dict:
    data = np.load(path)
    if "meta" not in data or "sigma" not in data:
        raise DataError(f"{path} is not a graph export file")
    out = {k: data[k] for k in ("sigma", "weight", "sample", "strength_per_lag", "strength_lag_avg")}
    out["symbols"] = json.loads(bytes(data["meta"]).decode())["symbols"]
    return out


def load_domain_prior(path, symbols: list[str], n_lags: int) -> np.ndarray:
    """Read a domain-knowledge graph CSV: lag,from_symbol,to_symbol,value."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"domain prior file not found: {path}")
    index = {s: i for i, s in enumerate(symbols)}
    out = np.zeros((n_lags, len(symbols), len(symbols)))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["lag", "from_symbol", "to_symbol", "value"]:
            raise DataError(f"{path}: expected header lag,from_symbol,to_symbol,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                lag = int(row[0])
                src, dst = row[1].strip(), row[2].strip()
                value = float(row[3])
            except (ValueError, IndexError) as e:
                raise DataError(f"{path}:{lineno}: bad row ({e})")
            if not 1 <= lag <= n_lags:
                raise DataError(f"{path}:{lineno}: lag {lag} outside 1..{n_lags}")
            if src not in index or dst not in index:
                raise DataError(f"{path}:{lineno}: unknown symbol {src!r} or {dst!r}")
            if value not in (0.0, 1.0):
                raise DataError(f"{path}:{lineno}: value must be 0 or 1, got {value}")
            out[lag - 1, index[src], index[dst]] = value
    return out
