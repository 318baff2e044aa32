"""Five-dimension news scoring through a chat-completion endpoint.

Each news item is rated on correlation, sentiment, importance, impact and
duration. Scores are cached persistently so training runs are fully offline
once a corpus is scored; the cache file doubles as the news-score input that
`data` consumes.
"""

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NetworkError, ParseError

log = logging.getLogger(__name__)

PROMPT_VERSION = "1"
CACHE_HEADER = "# causalmarket news-score cache"

SYSTEM_MESSAGE = (
    "As a stock trading news analyst, you are a helpful and precise assistant. "
    "Your task is to analyze the correlation between news and the given stock, "
    "sentiment polarity of the news, importance of the news, the impact of the "
    "news on stock prices, and the duration of the news impact."
)

DEFAULT_PROMPT = """I need you to analyze the provided stock-related news from five dimensions:

1. Correlation between the news and the given stock: Rate the correlation on a scale of 0 to 10, where a higher score indicates a stronger correlation between the news and the given stock.

2. Sentiment polarity of the news: Rate the sentiment polarity on a scale of -1 to 1, where a value closer to -1 indicates stronger negative sentiment and a value closer to 1 indicates stronger positive sentiment.

3. Importance of the news event: Rate the importance on a scale of 0 to 10, where a higher score indicates higher importance of the news event.

4. Impact of the news on stock prices: Rate the impact on a scale of 0 to 10, where a higher score indicates a greater impact of the news on stock prices.

5. Duration of the news impact: Rate the duration on a scale of 0 to 10, where a higher score indicates a longer potential duration of the news impact.

(When you encounter a situation where analysis is not possible, please try to avoid assigning all-zero scores and instead make an effort to analyze the text content and derive scores accordingly. Only when analysis is truly impossible should you assign a score of 0 to all factors.)

(Please refrain from providing analysis and simply provide the answer according to the following format.)

Output format:

Correlation: <Correlation score between the news and the stock>

Sentiment: <Sentiment polarity score of the news>

Importance: <Importance score of the news event>

Impact: <Impact score of the news on stock prices>

Duration: <Duration score of the news impact>"""

_RANGES = {
    "correlation": (0.0, 10.0),
    "sentiment": (-1.0, 1.0),
    "importance": (0.0, 10.0),
    "impact": (0.0, 10.0),
    "duration": (0.0, 10.0),
}
_FIELDS = list(_RANGES)

NEUTRAL_SCORES = (0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class NewsItem:
    symbol: str
    timestamp: str  # RFC 3339
    text: str


@dataclass(frozen=True)
class NewsScore:
    correlation: float
    sentiment: float
    importance: float
    impact: float
    duration: float

    def as_array(self) -> np.ndarray:
        return np.array([self.correlation, self.sentiment, self.importance,
                         self.impact, self.duration], dtype=np.float64)

    @classmethod
    def clamped(cls, values) -> "NewsScore":
        vals = {}
        for name, v in zip(_FIELDS, values):
            lo, hi = _RANGES[name]
            vals[name] = float(min(max(float(v), lo), hi))
        return cls(**vals)


def load_news_items(path) -> list[NewsItem]:
    """Read a raw news JSONL file (keys: symbol, timestamp, text)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"news file not found: {path}")
    items = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
                item = NewsItem(obj["symbol"], obj["timestamp"], obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: bad news line ({e})")
            if not item.text.strip():
                raise DataError(f"{path}:{lineno}: empty news text")
            items.append(item)
    return items


# ---------------------------------------------------------------------------
# prompt construction and response parsing
# ---------------------------------------------------------------------------


def build_prompt(symbol: str, text: str, publish_time: str) -> tuple[str, str]:
    """Return (system_message, user_message) for one scoring request.

    Deterministic: identical inputs produce identical bytes.
    """
    user = (
        f"{DEFAULT_PROMPT}\n\n"
        f"[Stock Name]: {symbol}\n\n"
        f"[News Content]: {text}\n\n"
        f"[Publish Time]: {publish_time}"
    )
    return SYSTEM_MESSAGE, user


_LABEL_PATTERNS = {
    name: re.compile(rf"\b{name}\s*:\s*(-?(?:\d+\.?\d*|\.\d+))", re.IGNORECASE)
    for name in _FIELDS
}


def parse_scores(response_text: str) -> NewsScore:
    """Extract the five labeled scores, tolerating surrounding prose.

    Total over arbitrary input: returns a clamped NewsScore or raises
    ParseError carrying the raw response.
    """
    if not isinstance(response_text, str):
        response_text = str(response_text)
    values = []
    missing = []
    for name in _FIELDS:
        m = _LABEL_PATTERNS[name].search(response_text)
        if m is None:
            missing.append(name)
        else:
            values.append(float(m.group(1)))
    if missing:
        raise ParseError(f"missing score lines: {', '.join(missing)}", raw_response=response_text)
    return NewsScore.clamped(values)


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------


def cache_key(symbol: str, text: str, publish_time: str, prompt_version: str = PROMPT_VERSION) -> str:
    payload = "\x1f".join((prompt_version, symbol, publish_time, text))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ScoreCacheEntry:
    key: str
    symbol: str
    ts: str
    scores: NewsScore
    model: str
    prompt_version: str = PROMPT_VERSION


class ScoreCache:
    """In-memory score cache with JSONL persistence.

    Thread-safe for the scoring pool: concurrent reads, serialized writes.
    """

    def __init__(self):
        self._entries: dict[str, ScoreCacheEntry] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def get(self, key: str) -> ScoreCacheEntry | None:
        return self._entries.get(key)

    def put(self, entry: ScoreCacheEntry) -> None:
        with self._lock:
            self._entries[entry.key] = entry

    def save(self, path) -> None:
        """Lossless JSONL dump (sorted by key for reproducible bytes)."""
        lines = [f"{CACHE_HEADER} v{PROMPT_VERSION}"]
        for key in sorted(self._entries):
            e = self._entries[key]
            lines.append(json.dumps({
                "key": e.key, "symbol": e.symbol, "ts": e.ts,
                "scores": list(e.scores.as_array()),
                "model": e.model, "prompt_version": e.prompt_version,
            }, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, expected_version: str = PROMPT_VERSION) -> "ScoreCache":
        cache = cls()
        path = Path(path)
        if not path.exists():
            return cache
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    obj = json.loads(line)
                    entry = ScoreCacheEntry(
                        key=obj["key"], symbol=obj["symbol"], ts=obj["ts"],
                        scores=NewsScore.clamped(obj["scores"]),
                        model=obj.get("model", ""),
                        prompt_version=str(obj.get("prompt_version", "")),
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise DataError(f"{path}:{lineno}: corrupt cache line ({e})")
                if entry.prompt_version != expected_version:
                    raise DataError(
                        f"{path}:{lineno}: cache entry has prompt version "
                        f"{entry.prompt_version!r}, current is {expected_version!r}"
                    )
                cache._entries[entry.key] = entry
        return cache


export_scores = ScoreCache.save
import_scores = ScoreCache.load


# ---------------------------------------------------------------------------
# chat endpoint client
# ---------------------------------------------------------------------------


@dataclass
class ClientConfig:
    url: str = ""
    api_key: str = ""
    model: str = ""
    timeout: float = 30.0
    max_retries: int = 3
    parse_attempts: int = 2
    backoff_base: float = 1.0
    concurrency: int = 4
    requests_per_second: float = 4.0
    temperature: float = 0.0

    ENV_URL = "CAUSALMARKET_LLM_URL"
    ENV_KEY = "CAUSALMARKET_LLM_API_KEY"
    ENV_MODEL = "CAUSALMARKET_LLM_MODEL"
    ENV_TIMEOUT = "CAUSALMARKET_LLM_TIMEOUT"

    @classmethod
    def from_env(cls) -> "ClientConfig":
        return cls(
            url=os.environ.get(cls.ENV_URL, ""),
            api_key=os.environ.get(cls.ENV_KEY, ""),
            model=os.environ.get(cls.ENV_MODEL, "gpt-3.5-turbo"),
            timeout=float(os.environ.get(cls.ENV_TIMEOUT, "30")),
        )


def _requests_transport(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    import requests

    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as e:
        raise NetworkError(f"chat endpoint request failed: {e}")
    if resp.status_code in (401, 403):
        raise _AuthFailure(f"chat endpoint auth failure (HTTP {resp.status_code})")
    if resp.status_code != 200:
        raise NetworkError(f"chat endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
    return resp.json()


class _AuthFailure(NetworkError):
    """Auth failures are terminal: never retried."""


class TokenBucket:
    """Simple blocking rate limiter shared by the scoring pool."""

    def __init__(self, rate: float, capacity: float | None = None):
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class ChatClient:
    """Model-agnostic chat-completion client (OpenAI-style JSON shape)."""

    def __init__(self, config: ClientConfig, transport=None, sleep=time.sleep):
        if not config.url:
            raise ConfigError(
                f"no chat endpoint configured (set {ClientConfig.ENV_URL})"
            )
        self.config = config
        self._transport = transport or _requests_transport
        self._sleep = sleep

    def complete(self, system_message: str, user_message: str) -> str:
        payload = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": system_message},
                {"role": "user", "content": user_message},
            ],
        }
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries):
            try:
                body = self._transport(self.config.url, payload, headers, self.config.timeout)
                return self._extract_content(body)
            except _AuthFailure:
                raise
            except NetworkError as e:
                last_error = e
                if attempt + 1 < self.config.max_retries:
                    self._sleep(self.config.backoff_base * (2 ** attempt))
        raise NetworkError(f"chat endpoint failed after {self.config.max_retries} attempts: {last_error}")

    @staticmethod
    def _extract_content(body: dict) -> str:
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise NetworkError(f"unexpected chat response shape: {str(body)[:200]}")


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class ScoreReport:
    total: int = 0
    cached: int = 0
    fetched: int = 0
    failed: int = 0


def score_news(
    items: list[NewsItem],
    cache: ScoreCache,
    client: ChatClient | None = None,
    offline: bool = False,
) -> tuple[dict[str, NewsScore], ScoreReport]:
    """Score every item, cache-first. Returns key -> NewsScore plus a report.

    Cache misses are fetched from the endpoint with bounded retries and
    re-prompting on unparseable output; items that still fail get the neutral
    all-zero score and are counted in the report. Offline mode requires full
    cache coverage and raises listing the missing keys otherwise.
    """
    report = ScoreReport(total=len(items))
    keyed = [(cache_key(it.symbol, it.text, it.timestamp), it) for it in items]
    results: dict[str, NewsScore] = {}
    misses: list[tuple[str, NewsItem]] = []
    for key, item in keyed:
        entry = cache.get(key)
        if entry is not None:
            results[key] = entry.scores
            report.cached += 1
        else:
            misses.append((key, item))

    if not misses:
        return results, report
    if offline:
        missing = ", ".join(k for k, _ in misses[:20])
        more = "" if len(misses) <= 20 else f" (+{len(misses) - 20} more)"
        raise NetworkError(f"offline mode but {len(misses)} items missing from cache: {missing}{more}")
    if client is None:
        raise ConfigError("no chat client provided and cache does not cover all items")

    bucket = TokenBucket(client.config.requests_per_second)
    lock = threading.Lock()

    def fetch(key: str, item: NewsItem) -> None:
        system, user = build_prompt(item.symbol, item.text, item.timestamp)
        score = None
        for _ in range(client.config.parse_attempts):
            bucket.acquire()
            try:
                content = client.complete(system, user)
            except _AuthFailure:
                raise
            except NetworkError as e:
                log.warning("scoring %s failed: %s", key[:12], e)
                break
            try:
                score = parse_scores(content)
                break
            except ParseError as e:
                log.warning("unparseable response for %s, re-prompting: %s", key[:12], e)
        with lock:
            if score is None:
                results[key] = NewsScore.clamped(NEUTRAL_SCORES)
                report.failed += 1
                log.warning("item %s for %s got the neutral fallback score", key[:12], item.symbol)
            else:
                results[key] = score
                report.fetched += 1
            cache.put(ScoreCacheEntry(
                key=key, symbol=item.symbol, ts=item.timestamp,
                scores=results[key], model=client.config.model,
            ))

    if client.config.concurrency <= 1 or len(misses) == 1:
        for key, item in misses:
            fetch(key, item)
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=client.config.concurrency) as pool:
            list(pool.map(lambda kv: fetch(*kv), misses))
    return results, report
