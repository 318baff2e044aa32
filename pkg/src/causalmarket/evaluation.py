"""Classification metrics, the top-k investment backtest, and the causal
strength vs. market value analysis."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(y_true, y_pred, mask=None) -> ConfusionCounts:
    """Count the four cells over evaluated (unmasked) entries."""
    t = np.asarray(y_true).ravel().astype(bool)
    p = np.asarray(y_pred).ravel().astype(bool)
    if t.shape != p.shape:
        raise ConfigError(f"label/prediction shapes differ: {t.shape} vs {p.shape}")
    if mask is not None:
        m = np.asarray(mask).ravel().astype(bool)
        t, p = t[m], p[m]
    return ConfusionCounts(
        tp=int(np.sum(t & p)),
        fp=int(np.sum(~t & p)),
        tn=int(np.sum(~t & ~p)),
        fn=int(np.sum(t & ~p)),
    )


def accuracy(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        raise DataError("accuracy undefined: no evaluated predictions")
    return (counts.tp + counts.tn) / counts.total


def mcc(counts: ConfusionCounts) -> float:
    """Matthews correlation; 0 when any denominator factor vanishes."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    factors = [(tp + fp), (fn + tp), (fn + tn), (fp + tn)]
    if any(f == 0 for f in factors):
        return 0.0
    num = tp * tn - fp * fn
    return num / float(np.sqrt(np.prod([float(f) for f in factors])))


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------


@dataclass
class BacktestResult:
    dates: list
    daily_returns: np.ndarray   # r_t, equal-weight mean over the day's picks
    apv: np.ndarray             # cumulative product of (1 + r_t)
    sharpe_apv: float           # mean(APV - Rf) / std(APV - Rf), sample std
    sharpe_daily: float         # conventional daily-return Sharpe, for comparison
    picks: list = field(default_factory=list)

    @property
    def final_apv(self) -> float:
        return float(self.apv[-1])


def sharpe_on_series(series: np.ndarray, risk_free: float = 0.0) -> float:
    """mean(x - Rf) / std(x - Rf) with sample (ddof=1) standard deviation."""
    x = np.asarray(series, dtype=np.float64) - risk_free
    if x.size < 2:
        raise DataError("Sharpe ratio undefined for fewer than 2 observations")
    sd = x.std(ddof=1)
    if sd == 0:
        raise DataError("Sharpe ratio undefined: zero-variance series")
    return float(x.mean() / sd)


def backtest(
    predictions: dict,
    prices: dict,
    k: int = 3,
    risk_free: float = 0.0,
    cost_per_trade: float = 0.0,
) -> BacktestResult:
    """Daily top-k equal-weight strategy on predicted rise probabilities.

    predictions: {date: {symbol: probability}}; prices: {symbol: {date:
    adjusted_close}}. Positions are opened at the prior day's close and
    realize the target day's adjusted-close return. Ties break by symbol
    order (reproducibility); days with fewer than k priced symbols use all
    available and log it.
    """
    if not predictions:
        raise DataError("no predictions to backtest")
    symbols = sorted({s for day in predictions.values() for s in day})
    if k > len(symbols):
        raise ConfigError(f"k={k} exceeds the {len(symbols)} predicted symbols")
    prev_date: dict[str, dict] = {}
    for sym, by_date in prices.items():
        days = sorted(by_date)
        prev_date[sym] = {d: days[i - 1] for i, d in enumerate(days) if i > 0}

    dates = sorted(predictions)
    returns, picks = [], []
    for date in dates:
        day = predictions[date]
        ranked = sorted(day.items(), key=lambda kv: (-kv[1], kv[0]))
        members, member_returns = [], []
        for sym, _prob in ranked:
            if len(members) == k:
                break
            by_date = prices.get(sym, {})
            prev = prev_date.get(sym, {}).get(date)
            if date not in by_date or prev is None:
                continue
            r = by_date[date] / by_date[prev] - 1.0
            members.append(sym)
            member_returns.append(r - cost_per_trade)
        if not member_returns:
            raise DataError(f"no priced symbols on {date}")
        if len(member_returns) < k:
            log.warning("only %d of %d symbols priced on %s", len(member_returns), k, date)
        returns.append(float(np.mean(member_returns)))
        picks.append(members)

    daily = np.asarray(returns)
    apv = np.cumprod(1.0 + daily)
    return BacktestResult(
        dates=dates,
        daily_returns=daily,
        apv=apv,
        sharpe_apv=sharpe_on_series(apv, risk_free),
        sharpe_daily=sharpe_on_series(daily, risk_free),
        picks=picks,
    )


# ---------------------------------------------------------------------------
# rank correlation
# ---------------------------------------------------------------------------


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y, n_permutations: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Spearman rank correlation plus a seeded permutation-test p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigError(f"spearman needs two equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise DataError(f"spearman needs at least 3 points, got {len(x)}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DataError("spearman undefined for a constant vector")

    rx, ry = average_ranks(x), average_ranks(y)

    def pearson(a, b):
        a = a - a.mean()
        b = b - b.mean()
        return float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))

    rho = pearson(rx, ry)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(ry)
        if abs(pearson(rx, perm)) >= abs(rho) - 1e-12:
            hits += 1
    p_value = (1 + hits) / (1 + n_permutations)
    return rho, p_value


# ---------------------------------------------------------------------------
# strength report
# ---------------------------------------------------------------------------


@dataclass
class StrengthReport:
    symbols: list[str]
    outgoing: np.ndarray          # row sums of the lag-averaged strength matrix
    market_values: np.ndarray
    rho: float
    p_value: float
    excluded: list[str]


def strength_report(
    strength_lag_avg: np.ndarray,
    symbols: list[str],
    market_values: dict[str, float],
    n_permutations: int = 10_000,
    seed: int = 0,
) -> StrengthReport:
    """Per-stock outgoing causal strength vs. market value."""
    if strength_lag_avg.shape != (len(symbols), len(symbols)):
        raise ConfigError(
            f"strength matrix {strength_lag_avg.shape} does not match {len(symbols)} symbols"
        )
    outgoing_all = strength_lag_avg.sum(axis=1)
    keep, excluded = [], []
    for i, sym in enumerate(symbols):
        if sym in market_values:
            keep.append(i)
        else:
            excluded.append(sym)
    if excluded:
        log.warning("no market value for %s; excluded from the correlation", ", ".join(excluded))
    kept_symbols = [symbols[i] for i in keep]
    outgoing = outgoing_all[keep]
    values = np.array([market_values[s] for s in kept_symbols])
    rho, p = spearman(outgoing, values, n_permutations=n_permutations, seed=seed)
    return StrengthReport(
        symbols=kept_symbols, outgoing=outgoing, market_values=values,
        rho=rho, p_value=p, excluded=excluded,
    )
