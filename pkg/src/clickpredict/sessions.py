"""Raw event ingestion and per-user session assembly.

Raw records look like the archive lines::

    {"timestamp": 1700000000000, "anonymousId": "a1", "userId": null,
     "type": "page", "payload": {"url": "https://shop.example/cart?ref=email",
                                 "userAgent": "Mozilla/5.0 ..."}}

``preprocess_event`` strips the long strings (URL, user agent) down to the
parsed parts; ``sessionize`` groups by anonymous id, drops bot traffic and
oversized sessions and orders events by time.
"""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Iterable, Iterator, Mapping
from urllib.parse import parse_qsl, urlsplit

EVENT_TYPES = ("page", "click", "scroll", "log", "positive", "prediction_point", "blank")

URL_KEYS = ("url", "href", "pageUrl")
USER_AGENT_KEYS = ("userAgent", "user_agent", "ua")

DEFAULT_BOT_PATTERN = re.compile(
    r"bot|crawl|spider|slurp|scrape|headless|python-requests|curl/|wget|phantomjs",
    re.IGNORECASE,
)

_BROWSERS = (
    ("Edge", re.compile(r"Edg(e|A|iOS)?/")),
    ("Opera", re.compile(r"OPR/|Opera")),
    ("Chrome", re.compile(r"Chrome/|CriOS/")),
    ("Firefox", re.compile(r"Firefox/|FxiOS/")),
    ("Safari", re.compile(r"Safari/")),
)
_OSES = (
    ("iOS", re.compile(r"iPhone|iPad|iPod")),
    ("Android", re.compile(r"Android")),
    ("Windows", re.compile(r"Windows")),
    ("Mac OS X", re.compile(r"Mac OS X|Macintosh")),
    ("Linux", re.compile(r"Linux|X11")),
)


class MalformedEventError(ValueError):
    """A raw record lacks a field every event must carry."""


@dataclass(frozen=True)
class UrlParts:
    host: str
    path: str
    query_keys: tuple[str, ...] = ()


@dataclass(frozen=True)
class UserAgentSummary:
    browser_family: str
    os_family: str
    is_bot: bool


@dataclass(frozen=True)
class Event:
    timestamp: int
    anonymous_id: str
    event_type: str
    user_id: str | None = None
    payload: Mapping[str, Any] = field(default_factory=dict)
    url_parts: UrlParts | None = None
    user_agent_summary: UserAgentSummary | None = None

    @property
    def is_blank(self) -> bool:
        return self.event_type == "blank"

    @property
    def event_id(self) -> str:
        return f"{self.anonymous_id}:{self.timestamp}:{self.event_type}"

    def to_record(self) -> dict:
        """Archive line form (see ``read_archive``)."""
        rec: dict[str, Any] = {
            "timestamp": self.timestamp,
            "anonymousId": self.anonymous_id,
            "userId": self.user_id,
            "type": self.event_type,
            "payload": dict(self.payload),
        }
        if self.url_parts is not None:
            rec["urlParts"] = {
                "host": self.url_parts.host,
                "path": self.url_parts.path,
                "queryKeys": list(self.url_parts.query_keys),
            }
        if self.user_agent_summary is not None:
            ua = self.user_agent_summary
            rec["userAgent"] = {
                "browserFamily": ua.browser_family,
                "osFamily": ua.os_family,
                "isBot": ua.is_bot,
            }
        return rec


BLANK_EVENT = Event(timestamp=0, anonymous_id="", event_type="blank")


@dataclass(frozen=True)
class UserSession:
    anonymous_id: str
    events: tuple[Event, ...]

    def __len__(self) -> int:
        return len(self.events)


@lru_cache(maxsize=65536)
def parse_url(url: str) -> UrlParts:
    parts = urlsplit(url)
    keys = tuple(k for k, _ in parse_qsl(parts.query, keep_blank_values=True))
    return UrlParts(host=parts.hostname or "", path=parts.path or "/", query_keys=keys)


@lru_cache(maxsize=4096)
def summarize_user_agent(ua: str, bot_pattern: re.Pattern = DEFAULT_BOT_PATTERN) -> UserAgentSummary:
    browser = next((name for name, rx in _BROWSERS if rx.search(ua)), "Other")
    os_family = next((name for name, rx in _OSES if rx.search(ua)), "Other")
    return UserAgentSummary(browser, os_family, bool(bot_pattern.search(ua)))


def _collapse_payload(payload: Any) -> dict:
    # duplicate keys arrive either as a list of pairs or already collapsed by
    # the JSON decoder; in both cases the last write wins
    if payload is None:
        return {}
    if isinstance(payload, Mapping):
        return dict(payload)
    out: dict = {}
    for key, value in payload:
        out[str(key)] = value
    return out


def preprocess_event(raw: Mapping[str, Any]) -> Event:
    """Turn a raw key-value record into an :class:`Event`.

    Accepts both the raw client form (``payload.url``/``payload.userAgent``)
    and the archived, already-parsed form (``urlParts``/``userAgent`` dicts).
    Raises :class:`MalformedEventError` if ``timestamp`` or ``anonymousId``
    is missing or unusable.
    """
    anon = raw.get("anonymousId", raw.get("anonymous_id"))
    ts = raw.get("timestamp")
    if anon in (None, "") or ts is None:
        raise MalformedEventError("event needs timestamp and anonymousId")
    try:
        ts = int(ts)
    except (TypeError, ValueError) as exc:
        raise MalformedEventError(f"bad timestamp {ts!r}") from exc
    event_type = raw.get("type", raw.get("event_type", "page"))
    if event_type not in EVENT_TYPES or event_type == "blank":
        raise MalformedEventError(f"unknown event type {event_type!r}")
    if ts <= 0:
        raise MalformedEventError("timestamp must be positive")

    payload = _collapse_payload(raw.get("payload"))

    url_parts = None
    url = next((payload.pop(k) for k in URL_KEYS if k in payload), None)
    if url is not None:
        url_parts = parse_url(str(url))
    elif isinstance(raw.get("urlParts"), Mapping):
        up = raw["urlParts"]
        url_parts = UrlParts(up.get("host", ""), up.get("path", "/"), tuple(up.get("queryKeys", ())))

    ua_summary = None
    ua = next((payload.pop(k) for k in USER_AGENT_KEYS if k in payload), None)
    if isinstance(ua, str):
        ua_summary = summarize_user_agent(ua)
    elif isinstance(raw.get("userAgent"), Mapping):
        u = raw["userAgent"]
        ua_summary = UserAgentSummary(u.get("browserFamily", "Other"), u.get("osFamily", "Other"),
                                      bool(u.get("isBot", False)))
    elif isinstance(raw.get("userAgent"), str):
        ua_summary = summarize_user_agent(raw["userAgent"])

    user_id = raw.get("userId", raw.get("user_id"))
    return Event(
        timestamp=ts,
        anonymous_id=str(anon),
        event_type=event_type,
        user_id=None if user_id in (None, "") else str(user_id),
        payload=payload,
        url_parts=url_parts,
        user_agent_summary=ua_summary,
    )


def default_bot_predicate(event: Event) -> bool:
    if event.user_agent_summary is not None and event.user_agent_summary.is_bot:
        return True
    return event.payload.get("synthetic") is True


@dataclass
class SessionizeStats:
    bot_events: int = 0
    dropped_sessions: int = 0
    dropped_events: int = 0


def sessionize(
    events: Iterable[Event],
    max_session_len: int = 1000,
    bot_predicate: Callable[[Event], bool] = default_bot_predicate,
    stats: SessionizeStats | None = None,
) -> list[UserSession]:
    """Group events into per-user sessions ordered by timestamp.

    Bot events are removed before grouping; sessions still longer than
    ``max_session_len`` afterwards are dropped whole. Counters land in
    ``stats`` if one is given. Output is ordered by first appearance of the
    anonymous id, so identical input gives identical output.
    """
    if stats is None:
        stats = SessionizeStats()
    groups: dict[str, list[Event]] = defaultdict(list)
    for ev in events:
        if bot_predicate(ev):
            stats.bot_events += 1
            continue
        groups[ev.anonymous_id].append(ev)

    sessions = []
    for anon, evs in groups.items():
        if len(evs) > max_session_len:
            stats.dropped_sessions += 1
            stats.dropped_events += len(evs)
            continue
        # list.sort is stable: ties keep ingestion order
        evs.sort(key=lambda e: e.timestamp)
        sessions.append(UserSession(anon, tuple(evs)))
    return sessions


def validate_session(session: UserSession, max_session_len: int = 1000) -> None:
    """Raise ``ValueError`` if ``session`` breaks a UserSession invariant."""
    if len(session.events) > max_session_len:
        raise ValueError(f"session {session.anonymous_id} longer than {max_session_len}")
    prev = None
    for ev in session.events:
        if ev.anonymous_id != session.anonymous_id:
            raise ValueError("mixed anonymous ids in session")
        if ev.is_blank or ev.timestamp <= 0:
            raise ValueError("blank event inside a session")
        if prev is not None and ev.timestamp < prev:
            raise ValueError("session not time-ordered")
        prev = ev.timestamp


def read_archive(path, errors: list | None = None) -> Iterator[Event]:
    """Yield events from a newline-delimited JSON archive.

    Malformed lines are skipped; when ``errors`` is a list, each skipped
    ``(line_number, message)`` is appended to it.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield preprocess_event(json.loads(line))
            except (MalformedEventError, json.JSONDecodeError, TypeError, AttributeError) as exc:
                if errors is not None:
                    errors.append((lineno, str(exc)))


def write_archive(path, events: Iterable[Event], append: bool = False) -> int:
    n = 0
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_record(), separators=(",", ":"), sort_keys=True))
            fh.write("\n")
            n += 1
    return n
