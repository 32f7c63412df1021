"""Prediction instances and labeled examples.

Example generators are the site-specific piece: they pick cut points in a
session and label them. Everything after the cut is the same code for
training and serving, namely :func:`make_instance`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, Protocol, Sequence

from .sessions import BLANK_EVENT, Event, UserSession

METADATA_KEYS = (
    "session_event_count",
    "distinct_page_count",
    "total_dwell_seconds",
    "hour_of_day",
    "is_returning_user",
)
STATS_KEYS = ("click_count", "time_on_site_seconds")

DEFAULT_FILTERED_TYPES = ("log", "positive", "prediction_point")


class GeneratorContractError(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    events: tuple[Event, ...]
    metadata: dict[str, float] = field(default_factory=dict)
    stats: dict[str, float] = field(default_factory=dict)

    @property
    def real_events(self) -> tuple[Event, ...]:
        return tuple(e for e in self.events if not e.is_blank)


@dataclass(frozen=True)
class Example:
    instance: Instance
    label: int
    cut_timestamp: int
    anonymous_id: str = ""
    # events that went into make_instance; kept so a saved example can be
    # replayed through the serving path
    source_events: tuple[Event, ...] = ()


@dataclass(frozen=True)
class Cut:
    cut_index: int
    label: int


class ExampleGenerator(Protocol):
    name: str
    version: str

    def scan(self, session: UserSession) -> list[Cut]: ...


EventFilter = Callable[[Event], bool]


def drop_types(types: Iterable[str]) -> EventFilter:
    """Filter that keeps every event whose type is not in ``types``."""
    banned = frozenset(types)

    def keep(event: Event) -> bool:
        return event.event_type not in banned

    keep.dropped_types = banned  # type: ignore[attr-defined]
    return keep


@dataclass(frozen=True)
class FirstPositiveGenerator:
    """One cut per session: at the first positive event, else at the end."""

    positive_type: str = "positive"
    name: str = "first_positive"
    version: str = "1"

    def scan(self, session: UserSession) -> list[Cut]:
        if not session.events:
            return []
        for i, ev in enumerate(session.events):
            if ev.event_type == self.positive_type:
                return [Cut(i, 1)]
        return [Cut(len(session.events), 0)]


def first_positive_generator(positive_type: str = "positive") -> FirstPositiveGenerator:
    return FirstPositiveGenerator(positive_type)


GENERATORS: dict[str, Callable[..., ExampleGenerator]] = {
    "first_positive": first_positive_generator,
}


def _session_summaries(events: Sequence[Event]) -> tuple[dict[str, float], dict[str, float]]:
    if not events:
        return {k: 0.0 for k in METADATA_KEYS}, {k: 0.0 for k in STATS_KEYS}
    span = (events[-1].timestamp - events[0].timestamp) / 1000.0
    pages = {e.url_parts.path for e in events if e.event_type == "page" and e.url_parts is not None}
    hour = datetime.fromtimestamp(events[0].timestamp / 1000.0, tz=timezone.utc).hour
    metadata = {
        "session_event_count": float(len(events)),
        "distinct_page_count": float(len(pages)),
        "total_dwell_seconds": max(span, 0.0),
        "hour_of_day": hour / 24.0,
        "is_returning_user": 1.0 if any(e.user_id for e in events) else 0.0,
    }
    stats = {
        "click_count": float(sum(e.event_type == "click" for e in events)),
        "time_on_site_seconds": max(span, 0.0),
    }
    return metadata, stats


def make_instance(events: Sequence[Event], filters: Sequence[EventFilter], max_len: int) -> Instance:
    """Filter, keep the ``max_len`` most recent events and front-pad with blanks.

    Metadata and stats describe the kept window only, since that is all the
    serving side ever sees. Blank events already present are ignored, which
    makes the call idempotent on its own output.
    """
    kept = [e for e in events if not e.is_blank and all(f(e) for f in filters)]
    if max_len > 0:
        kept = kept[-max_len:]
    else:
        kept = []
    metadata, stats = _session_summaries(kept)
    padded = (BLANK_EVENT,) * (max_len - len(kept)) + tuple(kept)
    return Instance(padded, metadata, stats)


def generate_examples(
    session: UserSession,
    generator: ExampleGenerator,
    filters: Sequence[EventFilter],
    max_len: int = 40,
) -> list[Example]:
    events = session.events
    out = []
    for cut in generator.scan(session):
        if not 0 <= cut.cut_index <= len(events):
            raise GeneratorContractError(
                f"{generator.name} returned cut {cut.cut_index} for a session of {len(events)}"
            )
        if cut.label not in (0, 1):
            raise GeneratorContractError(f"label {cut.label} is not 0/1")
        if cut.cut_index < len(events):
            cut_ts = events[cut.cut_index].timestamp
        else:
            cut_ts = events[-1].timestamp + 1
        # strictly-before-the-cut, also in time, so ties with the cut event
        # cannot leak into the instance
        before = [e for e in events[: cut.cut_index] if e.timestamp < cut_ts]
        inst = make_instance(before, filters, max_len)
        source = tuple(e for e in before if all(f(e) for f in filters))[-max_len:] if max_len > 0 else ()
        out.append(Example(inst, cut.label, cut_ts, session.anonymous_id, source))
    return out


def build_examples(
    sessions: Iterable[UserSession],
    generator: ExampleGenerator,
    filters: Sequence[EventFilter],
    max_len: int = 40,
) -> list[Example]:
    out: list[Example] = []
    for s in sessions:
        out.extend(generate_examples(s, generator, filters, max_len))
    return out
