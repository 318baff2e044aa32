"""Price/news ingestion, movement labels, lag windows, chronological splits.

The aligned panel keeps one row per trading day on a shared calendar. Lag
axes everywhere in the package follow one orientation: array position k
holds day T-(k+1), so position 0 is the most recent lagged day and position
L-1 the oldest.
"""

import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .kvfile import parse_kv_file

log = logging.getLogger(__name__)

RAW_HEADER = ["date", "adj_close", "high", "low", "open", "close", "volume"]
ACL18_HEADER = ["date", "movement_pct", "open", "high", "low", "close", "volume"]

#: feature order of the 6-wide raw price vector used across the package
PRICE_FEATURES = ["adj_close", "high", "low", "open", "close", "volume"]

SKIP = -1  # movement label sentinel for dead-zone days


@dataclass(frozen=True)
class PriceRecord:
    date: dt.date
    adj_close: float
    high: float
    low: float
    open: float
    close: float
    volume: float

    def features(self) -> np.ndarray:
        return np.array(
            [self.adj_close, self.high, self.low, self.open, self.close, self.volume],
            dtype=np.float64,
        )


def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise DataError(f"{where}: bad date {text!r}")


def _validate_record(rec: PriceRecord, where: str) -> None:
    if rec.high < max(rec.open, rec.close, rec.low):
        raise DataError(f"{where}: high {rec.high} below open/close/low")
    if rec.low > min(rec.open, rec.close, rec.high):
        raise DataError(f"{where}: low {rec.low} above open/close/high")
    if rec.volume < 0:
        raise DataError(f"{where}: negative volume {rec.volume}")


def load_prices(path, fmt: str = "raw", adj_close_source: str = "close") -> list[PriceRecord]:
    """Parse one per-stock price CSV into a date-sorted PriceRecord series.

    fmt 'raw' expects `date,adj_close,high,low,open,close,volume`; fmt
    'acl18' expects `date,movement_pct,open,high,low,close,volume` and takes
    adjusted close from the close column (adj_close_source='close') or by
    chaining movement percents from the first close ('movement').
    """
    path = Path(path)
    if fmt not in ("raw", "acl18"):
        raise ConfigError(f"unknown price format {fmt!r} (expected 'raw' or 'acl18')")
    if adj_close_source not in ("close", "movement"):
        raise ConfigError(f"adj_close_source must be 'close' or 'movement', got {adj_close_source!r}")
    if not path.exists():
        raise DataError(f"price file not found: {path}")

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        log.warning("empty price file %s", path)
        return []

    header = [h.strip().lower() for h in rows[0]]
    expected = RAW_HEADER if fmt == "raw" else ACL18_HEADER
    if header != expected:
        raise DataError(f"{path}: header {header} does not match {fmt} format {expected}")

    records: list[PriceRecord] = []
    prev_adj = None
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        where = f"{path}:{lineno}"
        if len(row) != 7:
            raise DataError(f"{where}: expected 7 fields, got {len(row)}")
        date = _parse_date(row[0].strip(), where)
        try:
            nums = [float(c) for c in row[1:]]
        except ValueError as e:
            raise DataError(f"{where}: non-numeric field ({e})")
        if fmt == "raw":
            adj, high, low, open_, close, volume = nums
        else:
            movement, open_, high, low, close, volume = nums
            if adj_close_source == "close":
                adj = close
            else:
                adj = close if prev_adj is None else prev_adj * (1.0 + movement)
        rec = PriceRecord(date, adj, high, low, open_, close, volume)
        _validate_record(rec, where)
        if records:
            if date == records[-1].date:
                raise DataError(f"{where}: duplicate date {date}")
            if date < records[-1].date:
                raise DataError(f"{where}: dates not increasing ({date} after {records[-1].date})")
        records.append(rec)
        prev_adj = adj
    if not records:
        log.warning("price file %s has a header but no rows", path)
    return records


def movement_label(
    prev_adj_close: float,
    adj_close: float,
    mode: str = "strict",
    rise_threshold: float | None = None,
    fall_threshold: float | None = None,
) -> int:
    """1 = rise, 0 = fall/flat, SKIP inside the threshold dead zone."""
    if prev_adj_close <= 0 or adj_close <= 0:
        raise DataError(f"non-positive adjusted close ({prev_adj_close}, {adj_close})")
    if mode == "strict":
        return 1 if adj_close > prev_adj_close else 0
    if mode == "threshold":
        if rise_threshold is None or fall_threshold is None:
            raise ConfigError("threshold label mode requires rise_threshold and fall_threshold")
        if fall_threshold >= rise_threshold:
            raise ConfigError("fall_threshold must lie below rise_threshold")
        ret = adj_close / prev_adj_close - 1.0
        if ret >= rise_threshold:
            return 1
        if ret <= fall_threshold:
            return 0
        return SKIP
    raise ConfigError(f"unknown label mode {mode!r}")


# ---------------------------------------------------------------------------
# news scores
# ---------------------------------------------------------------------------


def load_news_scores(path) -> dict[tuple[str, dt.date], list[tuple[str, np.ndarray]]]:
    """Read a news-score JSONL file into (symbol, date) -> [(ts, 5-vector)].

    Each line carries `symbol`, `ts` (RFC 3339) and `scores` (5 floats);
    extra keys (cache metadata) are ignored. Lines starting with '#' are
    comments.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"news score file not found: {path}")
    table: dict[tuple[str, dt.date], list[tuple[str, np.ndarray]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
                symbol = obj["symbol"]
                ts = obj["ts"]
                scores = np.asarray(obj["scores"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: bad news score line ({e})")
            if scores.shape != (5,):
                raise DataError(f"{path}:{lineno}: scores must have 5 entries, got {scores.shape}")
            day = _parse_date(ts[:10], f"{path}:{lineno}")
            table.setdefault((symbol, day), []).append((ts, scores))
    return table


# ---------------------------------------------------------------------------
# aligned panel and windows
# ---------------------------------------------------------------------------


@dataclass
class MarketWindow:
    """One training sample: D stocks, L lagged days before target_date."""

    target_date: dt.date
    prices: np.ndarray       # (D, L, 6) raw features, position k = day T-(k+1)
    news: list               # per stock: list (len L) of per-day score lists
    labels: np.ndarray       # (D,) in {0,1}; masked entries hold 0
    mask: np.ndarray         # (D,) 1 = label evaluated, 0 = SKIP/unavailable


@dataclass
class DatasetSpec:
    """Parsed dataset manifest."""

    symbols: list[str]
    price_paths: dict[str, Path]
    price_format: str = "raw"
    adj_close_source: str = "close"
    news_scores_path: Path | None = None
    label_mode: str = "strict"
    rise_threshold: float | None = None
    fall_threshold: float | None = None
    train_end: dt.date | None = None
    valid_end: dt.date | None = None
    calendar: str = "intersect"
    missing_day: str = "ffill"

    @classmethod
    def from_manifest(cls, path) -> "DatasetSpec":
        path = Path(path)
        kv = parse_kv_file(path)
        base = path.parent
        try:
            symbols = [s.strip() for s in kv["symbols"].split(",") if s.strip()]
        except KeyError:
            raise ConfigError(f"{path}: manifest is missing 'symbols'")
        if not symbols:
            raise ConfigError(f"{path}: manifest lists no symbols")
        if len(set(symbols)) != len(symbols):
            raise ConfigError(f"{path}: duplicate symbols in manifest")
        price_dir = base / kv.get("price_dir", "prices")
        spec = cls(
            symbols=symbols,
            price_paths={s: price_dir / f"{s}.csv" for s in symbols},
            price_format=kv.get("price_format", "raw"),
            adj_close_source=kv.get("adj_close_source", "close"),
            news_scores_path=(base / kv["news_scores"]) if kv.get("news_scores") else None,
            label_mode=kv.get("label_mode", "strict"),
            rise_threshold=float(kv["rise_threshold"]) if "rise_threshold" in kv else None,
            fall_threshold=float(kv["fall_threshold"]) if "fall_threshold" in kv else None,
            train_end=dt.date.fromisoformat(kv["train_end"]) if "train_end" in kv else None,
            valid_end=dt.date.fromisoformat(kv["valid_end"]) if "valid_end" in kv else None,
            calendar=kv.get("calendar", "intersect"),
            missing_day=kv.get("missing_day", "ffill"),
        )
        if spec.calendar not in ("intersect", "union"):
            raise ConfigError(f"{path}: calendar must be 'intersect' or 'union'")
        if spec.missing_day not in ("ffill", "drop"):
            raise ConfigError(f"{path}: missing_day must be 'ffill' or 'drop'")
        return spec


@dataclass
class MarketDataset:
    """Aligned multi-stock panel plus windowing and split bookkeeping."""

    symbols: list[str]
    dates: list[dt.date]
    prices_raw: np.ndarray           # (D, N, 6)
    prices_norm: np.ndarray          # (D, N, 6) z-scored with training stats
    adj_close: np.ndarray            # (D, N)
    present: np.ndarray              # (D, N) bool, False where forward-filled
    labels: np.ndarray               # (D, N) {0,1}; 0 where masked
    label_mask: np.ndarray           # (D, N) float, 1 = evaluated label
    lag: int
    l_max: int
    news_mean: np.ndarray | None     # (D, N, 5)
    news_count: np.ndarray | None    # (D, N)
    splits: dict[str, np.ndarray] = field(default_factory=dict)  # name -> target indices
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    @property
    def n_stocks(self) -> int:
        return len(self.symbols)

    @property
    def has_news(self) -> bool:
        return self.news_mean is not None

    def window_targets(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.concatenate([self.splits[k] for k in ("train", "valid", "test")])
        if split not in self.splits:
            raise ConfigError(f"unknown split {split!r}")
        return self.splits[split]

    def window(self, t: int) -> MarketWindow:
        """Materialize the window with target index t (API and test hook).

        The panel stores per-day mean scores (mean pooling commutes with the
        affine news embedding), so news lists come back as one pooled entry
        per non-empty stock-day rather than the original items.
        """
        lag_idx = t - 1 - np.arange(self.lag)
        news: list = []
        for d in range(self.n_stocks):
            if self.news_mean is None:
                news.append([[] for _ in range(self.lag)])
            else:
                news.append([
                    [self.news_mean[d, i]] if self.news_count is not None and self.news_count[d, i] > 0 else []
                    for i in lag_idx
                ])
        return MarketWindow(
            target_date=self.dates[t],
            prices=self.prices_raw[:, lag_idx, :].copy(),
            news=news,
            labels=self.labels[:, t].copy(),
            mask=self.label_mask[:, t].copy(),
        )

    def batch(self, targets: np.ndarray, dtype=np.float32) -> dict:
        """Gather normalized model inputs for a set of target indices."""
        targets = np.asarray(targets)
        lag_idx = targets[:, None] - 1 - np.arange(self.lag)[None, :]  # (B, L)
        prices = self.prices_norm[:, lag_idx, :]                        # (D, B, L, 6)
        prices = np.ascontiguousarray(prices.transpose(1, 0, 2, 3)).astype(dtype)
        out = {
            "prices": prices,                                           # (B, D, L, 6)
            "labels": self.labels[:, targets].T.astype(dtype),          # (B, D)
            "mask": self.label_mask[:, targets].T.astype(dtype),        # (B, D)
            "dates": [self.dates[t] for t in targets],
        }
        if self.news_mean is not None:
            nm = self.news_mean[:, lag_idx, :].transpose(1, 0, 2, 3)
            nc = self.news_count[:, lag_idx].transpose(1, 0, 2)
            out["news_mean"] = np.ascontiguousarray(nm).astype(dtype)   # (B, D, L, 5)
            out["news_has"] = (nc > 0).astype(dtype)                    # (B, D, L)
        return out


def build_panel(spec: DatasetSpec, lag: int, l_max: int = 10, use_news: bool = True) -> MarketDataset:
    """Load all series, align the calendar, label, window, split, normalize."""
    if lag < 1:
        raise ConfigError(f"lag must be >= 1, got {lag}")
    series = {
        sym: load_prices(spec.price_paths[sym], spec.price_format, spec.adj_close_source)
        for sym in spec.symbols
    }
    for sym, recs in series.items():
        if not recs:
            raise DataError(f"stock {sym} has no price rows")

    date_sets = [set(r.date for r in recs) for recs in series.values()]
    if spec.calendar == "intersect":
        common = set.intersection(*date_sets)
    else:
        common = set.union(*date_sets)
    dates = sorted(common)
    if len(dates) < lag + 1:
        raise DataError(f"only {len(dates)} aligned days; need at least lag+1 = {lag + 1}")

    D, N = len(spec.symbols), len(dates)
    date_pos = {d: i for i, d in enumerate(dates)}
    prices = np.zeros((D, N, 6))
    present = np.zeros((D, N), dtype=bool)
    for d, sym in enumerate(spec.symbols):
        for rec in series[sym]:
            if rec.date in date_pos:
                prices[d, date_pos[rec.date]] = rec.features()
                present[d, date_pos[rec.date]] = True
        # forward-fill gaps (union calendar); leading gaps copy the first real day
        first = int(np.argmax(present[d]))
        last = prices[d, first].copy()
        for i in range(N):
            if present[d, i]:
                last = prices[d, i].copy()
            else:
                prices[d, i] = last

    adj = prices[:, :, 0]
    if np.any(adj <= 0):
        bad = np.argwhere(adj <= 0)[0]
        raise DataError(
            f"non-positive adjusted close for {spec.symbols[bad[0]]} on {dates[bad[1]]}"
        )

    labels = np.zeros((D, N), dtype=np.int64)
    mask = np.zeros((D, N))
    for d in range(D):
        for t in range(1, N):
            lab = movement_label(
                adj[d, t - 1], adj[d, t], spec.label_mode,
                spec.rise_threshold, spec.fall_threshold,
            )
            if lab == SKIP or not (present[d, t] and present[d, t - 1]):
                labels[d, t] = 0
                mask[d, t] = 0.0
            else:
                labels[d, t] = lab
                mask[d, t] = 1.0

    news_mean = news_count = None
    if use_news and spec.news_scores_path is not None:
        table = load_news_scores(spec.news_scores_path)
        news_mean = np.zeros((D, N, 5))
        news_count = np.zeros((D, N), dtype=np.int64)
        for (sym, day), items in table.items():
            if sym not in spec.symbols or day not in date_pos:
                continue
            d, i = spec.symbols.index(sym), date_pos[day]
            items = sorted(items, key=lambda kv: kv[0])[-l_max:]  # most recent l_max
            news_mean[d, i] = np.mean([s for _, s in items], axis=0)
            news_count[d, i] = len(items)

    targets = np.arange(lag, N)
    if spec.calendar == "union" and spec.missing_day == "drop":
        ok = []
        for t in targets:
            span = slice(t - lag, t + 1)
            if np.all(present[:, span]):
                ok.append(t)
        targets = np.asarray(ok, dtype=np.int64)

    splits = chronological_split(targets, dates, spec.train_end, spec.valid_end)

    train_days = N
    if spec.train_end is not None:
        train_days = sum(1 for d in dates if d <= spec.train_end)
    stats_block = prices[:, :train_days, :].reshape(-1, 6)
    mean = stats_block.mean(axis=0)
    std = stats_block.std(axis=0)
    std[std == 0] = 1.0
    norm = (prices - mean) / std

    return MarketDataset(
        symbols=list(spec.symbols), dates=dates, prices_raw=prices, prices_norm=norm,
        adj_close=adj, present=present, labels=labels, label_mask=mask,
        lag=lag, l_max=l_max, news_mean=news_mean, news_count=news_count,
        splits=splits, norm_mean=mean, norm_std=std,
    )


def chronological_split(
    targets: np.ndarray,
    dates: list[dt.date],
    train_end: dt.date | None,
    valid_end: dt.date | None,
) -> dict[str, np.ndarray]:
    """Assign every window to the split owning its *target* date.

    Lag days may straddle a boundary; only the target date decides. With no
    boundaries configured everything lands in 'train'.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if train_end is None or valid_end is None:
        return {"train": targets, "valid": targets[:0], "test": targets[:0]}
    if train_end >= valid_end:
        raise ConfigError(f"split boundaries out of order: train_end {train_end} >= valid_end {valid_end}")
    tdates = np.array([dates[t] for t in targets])
    train = targets[tdates <= train_end]
    valid = targets[(tdates > train_end) & (tdates <= valid_end)]
    test = targets[tdates > valid_end]
    for name, part in (("valid", valid), ("test", test)):
        if len(part) == 0:
            log.warning("%s split is empty", name)
    return {"train": train, "valid": valid, "test": test}
