"""Event data model, text-format stream parsing, and time windowing.

An event camera reports per-pixel brightness changes as an asynchronous
stream of (u, v, polarity, timestamp) quadruples.  This module parses the
common one-event-per-line text distribution format ("t x y p", t in decimal
seconds), stores timestamps as integer nanoseconds to avoid float drift
over long recordings, and slices streams into contiguous half-open time
windows for frame encoding.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, List, Sequence, Union

import numpy as np

NS_PER_SECOND = 1_000_000_000

#: Default window duration: 6.6 ms (150 Hz framing of a 30 fps pair into 5 slices).
DEFAULT_WINDOW_NS = 6_600_000

#: Default number of windows between two adjacent video frames.
DEFAULT_WINDOWS_PER_PAIR = 5


class Polarity(enum.IntEnum):
    """Sign of the brightness change that triggered an event."""

    OFF = 0
    ON = 1


@dataclass(frozen=True)
class SensorGeometry:
    """Pixel extents of the sensor. Default matches a 240x180 DAVIS array."""

    w: int = 240
    h: int = 180

    def __post_init__(self) -> None:
        if self.w < 1 or self.h < 1:
            raise ValueError(f"sensor extents must be >= 1, got {self.w}x{self.h}")

    @property
    def n_pixels(self) -> int:
        return self.w * self.h


@dataclass(frozen=True)
class Event:
    """One retinal event: pixel column u, pixel row v, polarity, time in ns."""

    u: int
    v: int
    polarity: Polarity
    t: int

    def __post_init__(self) -> None:
        if self.t < 0:
            raise ValueError(f"negative timestamp: {self.t}")
        if self.u < 0 or self.v < 0:
            raise ValueError(f"negative coordinate: ({self.u}, {self.v})")


class ParseError(ValueError):
    """Raised for malformed or out-of-bounds event lines; carries the line number."""

    def __init__(self, message: str, line_number: int) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass
class ParseReport:
    """Summary of one parse pass over an event text stream."""

    line_count: int = 0
    event_count: int = 0
    blank_lines: int = 0
    t_min: int | None = None
    t_max: int | None = None
    non_monotonic_count: int = 0
    non_monotonic_lines: List[int] = field(default_factory=list)

    MAX_FLAGGED_LINES = 20

    @property
    def monotonic(self) -> bool:
        return self.non_monotonic_count == 0


class EventArray(Sequence):
    """Column-oriented event storage.

    Behaves as an ordered sequence of :class:`Event` while keeping the
    columns as numpy arrays so that encoding and windowing stay vectorized.
    """

    __slots__ = ("t", "u", "v", "polarity")

    def __init__(
        self,
        t: np.ndarray,
        u: np.ndarray,
        v: np.ndarray,
        polarity: np.ndarray,
    ) -> None:
        self.t = np.ascontiguousarray(t, dtype=np.int64)
        self.u = np.ascontiguousarray(u, dtype=np.int32)
        self.v = np.ascontiguousarray(v, dtype=np.int32)
        self.polarity = np.ascontiguousarray(polarity, dtype=np.uint8)
        n = len(self.t)
        if not (len(self.u) == len(self.v) == len(self.polarity) == n):
            raise ValueError("event columns have mismatched lengths")

    @classmethod
    def empty(cls) -> "EventArray":
        z = np.empty(0, dtype=np.int64)
        return cls(z, z, z, z)

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> "EventArray":
        evs = list(events)
        return cls(
            np.array([e.t for e in evs], dtype=np.int64),
            np.array([e.u for e in evs], dtype=np.int32),
            np.array([e.v for e in evs], dtype=np.int32),
            np.array([int(e.polarity) for e in evs], dtype=np.uint8),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return EventArray(
                self.t[index], self.u[index], self.v[index], self.polarity[index]
            )
        i = int(index)
        return Event(
            u=int(self.u[i]),
            v=int(self.v[i]),
            polarity=Polarity(int(self.polarity[i])),
            t=int(self.t[i]),
        )

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventArray):
            return NotImplemented
        return (
            np.array_equal(self.t, other.t)
            and np.array_equal(self.u, other.u)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.polarity, other.polarity)
        )

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.t) >= 0)) if len(self) > 1 else True

    def sorted_by_time(self) -> "EventArray":
        """Stable sort by timestamp; equal-time events keep input order."""
        order = np.argsort(self.t, kind="stable")
        return EventArray(
            self.t[order], self.u[order], self.v[order], self.polarity[order]
        )

    def select(self, mask_or_index: np.ndarray) -> "EventArray":
        return EventArray(
            self.t[mask_or_index],
            self.u[mask_or_index],
            self.v[mask_or_index],
            self.polarity[mask_or_index],
        )


@dataclass
class EventWindow:
    """Events collected in the half-open interval [t_start, t_end)."""

    t_start: int
    t_end: int
    events: EventArray

    def __post_init__(self) -> None:
        if self.t_end <= self.t_start:
            raise ValueError(
                f"window end {self.t_end} must exceed start {self.t_start}"
            )
        if len(self.events):
            tmin = int(self.events.t.min())
            tmax = int(self.events.t.max())
            if tmin < self.t_start or tmax >= self.t_end:
                raise ValueError(
                    f"events [{tmin}, {tmax}] outside window "
                    f"[{self.t_start}, {self.t_end})"
                )

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start


def ns_from_seconds_text(text: str) -> int:
    """Convert a decimal-seconds string to integer nanoseconds, half-up.

    String arithmetic keeps the conversion exact for any number of decimal
    digits; float parsing would lose nanosecond precision on long streams.
    """
    text = text.strip()
    if not text:
        raise ValueError("empty timestamp")
    sign = 1
    if text[0] in "+-":
        if text[0] == "-":
            sign = -1
        text = text[1:]
    if not text:
        raise ValueError("empty timestamp")
    int_part, dot, frac_part = text.partition(".")
    int_part = int_part or "0"
    frac_part = frac_part or "0"
    if not int_part.isdigit() or not frac_part.isdigit():
        raise ValueError(f"bad decimal literal: {text!r}")
    ns = int(int_part) * NS_PER_SECOND
    if len(frac_part) <= 9:
        ns += int(frac_part) * 10 ** (9 - len(frac_part))
    else:
        head, tail = frac_part[:9], frac_part[9:]
        ns += int(head)
        # round half up on the remainder
        if int(tail) * 2 >= 10 ** len(tail):
            ns += 1
    return sign * ns


def seconds_text_from_ns(t_ns: int) -> str:
    """Render integer nanoseconds as decimal seconds with 9 fraction digits."""
    if t_ns < 0:
        return "-" + seconds_text_from_ns(-t_ns)
    return f"{t_ns // NS_PER_SECOND}.{t_ns % NS_PER_SECOND:09d}"


TextSource = Union[str, Path, IO[str], Iterable[str]]


def _iter_lines(source: TextSource):
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            yield from fh
    else:
        yield from source


def parse_event_stream(
    source: TextSource, geometry: SensorGeometry
) -> tuple[EventArray, ParseReport]:
    """Parse "t x y p" text lines into events with ns timestamps.

    t is decimal seconds (converted half-up to integer ns), x/y integer
    pixel coordinates, p in {0, 1} mapped to Off/On.  Raises
    :class:`ParseError` on malformed lines or out-of-bounds coordinates.
    Non-monotonic timestamps are accepted (sensor timestamping can jitter)
    but counted and flagged in the report.
    """
    report = ParseReport()
    ts: List[int] = []
    us: List[int] = []
    vs: List[int] = []
    ps: List[int] = []
    prev_t: int | None = None

    for line_no, line in enumerate(_iter_lines(source), start=1):
        report.line_count = line_no
        stripped = line.strip()
        if not stripped:
            report.blank_lines += 1
            continue
        parts = stripped.split()
        if len(parts) != 4:
            raise ParseError(
                f"expected 4 fields 't x y p', got {len(parts)}", line_no
            )
        t_text, x_text, y_text, p_text = parts
        try:
            t = ns_from_seconds_text(t_text)
        except ValueError as exc:
            raise ParseError(f"bad timestamp {t_text!r}: {exc}", line_no) from exc
        if t < 0:
            raise ParseError(f"negative timestamp {t_text!r}", line_no)
        try:
            x = int(x_text)
            y = int(y_text)
        except ValueError as exc:
            raise ParseError(
                f"bad coordinates {x_text!r} {y_text!r}", line_no
            ) from exc
        if not (0 <= x < geometry.w and 0 <= y < geometry.h):
            raise ParseError(
                f"coordinate ({x}, {y}) outside {geometry.w}x{geometry.h} sensor",
                line_no,
            )
        if p_text == "1":
            p = 1
        elif p_text == "0":
            p = 0
        else:
            raise ParseError(f"bad polarity {p_text!r} (want 0 or 1)", line_no)

        if prev_t is not None and t < prev_t:
            report.non_monotonic_count += 1
            if len(report.non_monotonic_lines) < ParseReport.MAX_FLAGGED_LINES:
                report.non_monotonic_lines.append(line_no)
        prev_t = t

        ts.append(t)
        us.append(x)
        vs.append(y)
        ps.append(p)

    events = EventArray(
        np.array(ts, dtype=np.int64),
        np.array(us, dtype=np.int32),
        np.array(vs, dtype=np.int32),
        np.array(ps, dtype=np.uint8),
    )
    report.event_count = len(events)
    if len(events):
        report.t_min = int(events.t.min())
        report.t_max = int(events.t.max())
    return events, report


def serialize_events(events: EventArray, sink: Union[str, Path, IO[str]]) -> None:
    """Write events in the "t x y p" text format at full ns precision.

    Round-trips exactly through :func:`parse_event_stream`.
    """

    def _write(fh: IO[str]) -> None:
        t = events.t
        u = events.u
        v = events.v
        p = events.polarity
        for i in range(len(events)):
            fh.write(
                f"{seconds_text_from_ns(int(t[i]))} {u[i]} {v[i]} {p[i]}\n"
            )

    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as fh:
            _write(fh)
    else:
        _write(sink)


def window_events(
    events: EventArray,
    t_origin: int,
    window_ns: int = DEFAULT_WINDOW_NS,
    n_windows: int = DEFAULT_WINDOWS_PER_PAIR,
) -> List[EventWindow]:
    """Slice a time-sorted stream into n contiguous half-open windows.

    Window k covers [t_origin + k*T, t_origin + (k+1)*T).  Events outside
    all windows are dropped; within-window order is preserved.  The input
    must already be sorted ascending by timestamp (sort first if the parse
    report flagged jitter).
    """
    if window_ns <= 0:
        raise ValueError(f"window duration must be positive, got {window_ns}")
    if n_windows < 0:
        raise ValueError(f"window count must be non-negative, got {n_windows}")
    if not events.is_sorted():
        raise ValueError("events must be sorted by timestamp; call sorted_by_time()")

    edges = t_origin + window_ns * np.arange(n_windows + 1, dtype=np.int64)
    # searchsorted('left') on the sorted timestamps gives half-open boundaries
    idx = np.searchsorted(events.t, edges, side="left")
    windows = []
    for k in range(n_windows):
        windows.append(
            EventWindow(
                t_start=int(edges[k]),
                t_end=int(edges[k + 1]),
                events=events[int(idx[k]) : int(idx[k + 1])],
            )
        )
    return windows
