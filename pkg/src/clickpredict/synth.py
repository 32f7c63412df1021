"""Synthetic shop with known purchase propensities.

Each user does a random walk over a small page graph, clicking and
scrolling along the way. At the end of the visit a purchase happens with
probability ``sigmoid(b0 + b_clicks*log1p(clicks) + b_time*log1p(time/60))``,
so the ground truth is known exactly and the pipeline can be checked
against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoding import ConfigurationError
from .sessions import Event, preprocess_event, write_archive

BROWSER_AGENTS = (
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0 Safari/537.36",
    "Mozilla/5.0 (Macintosh; Intel Mac OS X 13_5) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/17.0 Safari/605.1.15",
    "Mozilla/5.0 (iPhone; CPU iPhone OS 17_0 like Mac OS X) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/17.0 Mobile/15E148 Safari/604.1",
    "Mozilla/5.0 (X11; Linux x86_64; rv:121.0) Gecko/20100101 Firefox/121.0",
    "Mozilla/5.0 (Linux; Android 14; Pixel 8) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0 Mobile Safari/537.36",
)
BOT_AGENTS = (
    "Mozilla/5.0 (compatible; Googlebot/2.1; +http://www.google.com/bot.html)",
    "Mozilla/5.0 (compatible; bingbot/2.0; +http://www.bing.com/bingbot.htm)",
    "python-requests/2.31.0",
)
QUERY_KEYS = ("ref", "utm_source", "q", "sort", "page")

DAY_MS = 86_400_000
EPOCH_START_MS = 1_767_225_600_000  # 2026-01-01T00:00:00Z


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


@dataclass(frozen=True)
class SiteModel:
    n_users: int = 20_000
    n_pages: int = 40
    extra_edges: int = 3
    host: str = "shop.example"
    # dwell time between page loads, log-normal body (seconds)
    dwell_median_s: float = 25.0
    dwell_sigma: float = 1.1
    click_dwell_median_s: float = 4.0
    refresh_spike_prob: float = 0.0
    refresh_spike_s: float = 3600.0
    # engagement drives how many pages a user views and how much they click
    engagement_shape: float = 1.5
    engagement_scale: float = 1.0
    pages_per_engagement: float = 3.0
    clicks_per_page: float = 1.0
    scroll_prob: float = 0.5
    log_prob: float = 0.3
    returning_fraction: float = 0.3
    bot_fraction: float = 0.05
    model_event_prob: float = 0.02
    # purchase propensity: logistic in log-clicks and log-minutes on site
    propensity_intercept: float = -9.0
    propensity_clicks: float = 2.0
    propensity_time: float = 1.2
    days: int = 14
    start_ms: int = EPOCH_START_MS
    seed: int = 0

    def propensity(self, click_count: float, time_on_site_s: float) -> float:
        x = (self.propensity_intercept
             + self.propensity_clicks * math.log1p(click_count)
             + self.propensity_time * math.log1p(max(time_on_site_s, 0.0) / 60.0))
        return sigmoid(x)


@dataclass(frozen=True)
class UserTruth:
    anonymous_id: str
    is_bot: bool
    click_count: int
    time_on_site_s: float
    propensity: float
    purchased: bool


@dataclass
class PageGraph:
    urls: list[str]
    neighbors: list[np.ndarray]
    weights: list[np.ndarray] = field(default_factory=list)


def build_page_graph(site: SiteModel, rng: np.random.Generator) -> PageGraph:
    if site.n_pages < 2:
        raise ConfigurationError("page graph needs at least two pages")
    urls = [f"https://{site.host}/"]
    n_cat = max(1, site.n_pages // 5)
    for i in range(1, site.n_pages):
        if i <= n_cat:
            urls.append(f"https://{site.host}/category/{i}")
        else:
            urls.append(f"https://{site.host}/product/{i}")
    neighbors, weights = [], []
    for i in range(site.n_pages):
        # ring edge keeps the graph strongly connected from the entry page
        nb = {(i + 1) % site.n_pages, 0}
        nb.update(int(j) for j in rng.integers(0, site.n_pages, size=site.extra_edges))
        nb.discard(i)
        nb = np.array(sorted(nb))
        w = rng.gamma(1.0, 1.0, size=len(nb))
        neighbors.append(nb)
        weights.append(w / w.sum())
    return PageGraph(urls, neighbors, weights)


def check_graph(graph: PageGraph) -> None:
    seen, stack = {0}, [0]
    while stack:
        for j in graph.neighbors[stack.pop()]:
            if int(j) not in seen:
                seen.add(int(j))
                stack.append(int(j))
    if len(seen) != len(graph.urls):
        raise ConfigurationError("page graph is not connected from the entry page")


def _url_with_query(url: str, rng: np.random.Generator) -> str:
    if rng.random() < 0.3:
        key = QUERY_KEYS[int(rng.integers(len(QUERY_KEYS)))]
        return f"{url}?{key}={int(rng.integers(100))}"
    return url


def simulate_user(site: SiteModel, graph: PageGraph, rng: np.random.Generator, anon: str,
                  start_ms: int, is_bot: bool) -> tuple[list[dict], UserTruth]:
    """Raw records for one visit plus the ground truth behind them."""
    ua = (BOT_AGENTS[int(rng.integers(len(BOT_AGENTS)))] if is_bot
          else BROWSER_AGENTS[int(rng.integers(len(BROWSER_AGENTS)))])
    user_id = f"u{anon}" if (not is_bot and rng.random() < site.returning_fraction) else None
    engagement = rng.gamma(site.engagement_shape, site.engagement_scale)
    n_views = 1 + int(rng.poisson(site.pages_per_engagement * engagement))
    records: list[dict] = []
    t = start_ms
    page = 0
    clicks = 0

    def emit(kind, url, extra=None):
        payload = {"url": url, "userAgent": ua}
        if extra:
            payload.update(extra)
        records.append({"timestamp": int(t), "anonymousId": anon, "userId": user_id,
                        "type": kind, "payload": payload})

    for v in range(n_views):
        url = _url_with_query(graph.urls[page], rng)
        emit("page", url)
        if rng.random() < site.log_prob:
            t += int(rng.integers(5, 200))
            emit("log", url, {"level": "info"})
        n_clicks = int(rng.poisson(site.clicks_per_page * math.sqrt(engagement)))
        for _ in range(n_clicks):
            t += int(1000 * rng.lognormal(math.log(site.click_dwell_median_s), 0.7))
            emit("click", url, {"target": f"button{int(rng.integers(6))}"})
            clicks += 1
        if rng.random() < site.scroll_prob:
            t += int(1000 * rng.lognormal(math.log(3.0), 0.5))
            emit("scroll", url, {"depth": int(rng.integers(10, 100))})
        if not is_bot and rng.random() < site.model_event_prob:
            t += 1
            emit("prediction_point", url, {"synthetic": True})
        if v < n_views - 1:
            if site.refresh_spike_prob and rng.random() < site.refresh_spike_prob:
                dwell = site.refresh_spike_s + rng.normal(0.0, 5.0)
            else:
                dwell = rng.lognormal(math.log(site.dwell_median_s), site.dwell_sigma)
            t += int(1000 * (0.2 if is_bot else 1.0) * dwell)
            nb = graph.neighbors[page]
            page = int(nb[rng.choice(len(nb), p=graph.weights[page])])

    time_on_site = (t - start_ms) / 1000.0
    prop = 0.0 if is_bot else site.propensity(clicks, time_on_site)
    purchased = bool(rng.random() < prop)
    if purchased:
        t += int(1000 * rng.lognormal(math.log(20.0), 0.5))
        emit("positive", f"https://{site.host}/checkout/complete", {"value": round(float(rng.gamma(2.0, 30.0)), 2)})
    return records, UserTruth(anon, is_bot, clicks, time_on_site, prop, purchased)


def generate_raw(site: SiteModel) -> tuple[list[dict], list[UserTruth]]:
    rng = np.random.default_rng(site.seed)
    graph = build_page_graph(site, rng)
    check_graph(graph)
    records: list[dict] = []
    truth: list[UserTruth] = []
    span = site.days * DAY_MS
    for u in range(site.n_users):
        anon = f"a{site.seed}-{u:06d}"
        start = site.start_ms + int(rng.integers(0, span))
        is_bot = bool(rng.random() < site.bot_fraction)
        recs, tr = simulate_user(site, graph, rng, anon, start, is_bot)
        records.extend(recs)
        truth.append(tr)
    # archive order is arbitrary; sessionization restores it
    order = rng.permutation(len(records))
    return [records[i] for i in order], truth


def generate_events(site: SiteModel) -> tuple[list[Event], list[UserTruth]]:
    records, truth = generate_raw(site)
    return [preprocess_event(r) for r in records], truth


def generate_sessions(site: SiteModel, archive_path, truth_path=None) -> list[UserTruth]:
    """Write a synthetic archive (and optionally a ground-truth TSV)."""
    events, truth = generate_events(site)
    write_archive(archive_path, events)
    if truth_path is not None:
        write_truth(truth_path, truth)
    return truth


def write_truth(path, truth: list[UserTruth]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("anonymous_id\tis_bot\tclick_count\ttime_on_site_s\tpropensity\tpurchased\n")
        for t in truth:
            fh.write(f"{t.anonymous_id}\t{int(t.is_bot)}\t{t.click_count}\t{t.time_on_site_s!r}\t"
                     f"{t.propensity!r}\t{int(t.purchased)}\n")


def read_truth(path) -> dict[str, UserTruth]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            a, bot, c, tos, p, bought = line.rstrip("\n").split("\t")
            out[a] = UserTruth(a, bot == "1", int(c), float(tos), float(p), bought == "1")
    return out
