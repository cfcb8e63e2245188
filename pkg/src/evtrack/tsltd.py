"""TSLTD frame encoding: time surfaces with linear time decay.

An event window becomes one h x w x 2 uint8 frame.  Each cell of the
polarity channel holds round(255 * (t_k - t_s) / T) of the LAST event at
that pixel (later events overwrite earlier ones), so a moving edge leaves
an intensity ramp pointing along its direction of travel.  Untouched cells
stay 0.  Channel 0 collects On events, channel 1 Off events.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from evtrack.events import (
    DEFAULT_WINDOW_NS,
    DEFAULT_WINDOWS_PER_PAIR,
    EventArray,
    EventWindow,
    SensorGeometry,
    window_events,
)

TSLTD_MAGIC = b"TSLTD1"
TSLTD_VERSION = 1


@dataclass
class TsltdFrame:
    """One encoded window: values is (h, w, 2) uint8, channels On/Off."""

    geometry: SensorGeometry
    t_start: int
    t_end: int
    values: np.ndarray

    def __post_init__(self) -> None:
        expected = (self.geometry.h, self.geometry.w, 2)
        if self.values.shape != expected:
            raise ValueError(
                f"frame shape {self.values.shape} does not match {expected}"
            )
        if self.values.dtype != np.uint8:
            raise ValueError(f"frame dtype must be uint8, got {self.values.dtype}")

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start

    def channel(self, polarity: int) -> np.ndarray:
        # channel 0 = On, channel 1 = Off
        return self.values[:, :, 0 if polarity else 1]

    def combined(self) -> np.ndarray:
        """Sum of both polarity channels as uint16 (for display/matching)."""
        return self.values[:, :, 0].astype(np.uint16) + self.values[:, :, 1]


def decay_value(t_k: int, t_s: int, window_ns: int) -> int:
    """Linear time decay value round(255 * (t_k - t_s) / T), half up.

    Integer arithmetic keeps the rounding exact; valid for
    t_s <= t_k < t_s + T.
    """
    if window_ns <= 0:
        raise ValueError(f"window duration must be positive, got {window_ns}")
    if not (t_s <= t_k < t_s + window_ns):
        raise ValueError(
            f"timestamp {t_k} outside window [{t_s}, {t_s + window_ns})"
        )
    num = 255 * (t_k - t_s)
    return (2 * num + window_ns) // (2 * window_ns)


def encode_window(window: EventWindow, geometry: SensorGeometry) -> TsltdFrame:
    """Encode one event window into a TSLTD frame.

    Events are applied in stream order, so the stored value at each
    (pixel, polarity) cell is the decay value of the last event there.
    """
    values = np.zeros((geometry.h, geometry.w, 2), dtype=np.uint8)
    ev = window.events
    if len(ev):
        if np.any(ev.u >= geometry.w) or np.any(ev.v >= geometry.h):
            raise ValueError("event coordinates outside sensor geometry")
        num = 255 * (ev.t - np.int64(window.t_start))
        g = ((2 * num + window.duration) // (2 * window.duration)).astype(np.uint8)
        # channel 0 = On (polarity 1), channel 1 = Off (polarity 0)
        ch = np.where(ev.polarity == 1, 0, 1).astype(np.int64)
        flat = (ev.v.astype(np.int64) * geometry.w + ev.u) * 2 + ch
        # in-order scatter: numpy assigns duplicates in index order,
        # which realizes last-write-wins for time-sorted input
        values.reshape(-1)[flat] = g
    return TsltdFrame(
        geometry=geometry, t_start=window.t_start, t_end=window.t_end, values=values
    )


def encode_stream(
    events: EventArray,
    geometry: SensorGeometry,
    t_origin: int,
    window_ns: int = DEFAULT_WINDOW_NS,
    n_windows: int = DEFAULT_WINDOWS_PER_PAIR,
) -> List[TsltdFrame]:
    """Window a time-sorted stream and encode each window."""
    windows = window_events(events, t_origin, window_ns, n_windows)
    return [encode_window(w, geometry) for w in windows]


def write_tsltd(frames: Sequence[TsltdFrame], path: Union[str, Path]) -> None:
    """Write frames to the binary dump format.

    Layout (little-endian): magic "TSLTD1", u16 version, u32 h, u32 w,
    u32 frame_count, then per frame u64 t_start_ns, u64 t_end_ns,
    h*w bytes of channel 0 row-major, h*w bytes of channel 1.
    """
    if not frames:
        raise ValueError("cannot write an empty frame sequence")
    geo = frames[0].geometry
    for f in frames:
        if f.geometry != geo:
            raise ValueError("all frames must share one geometry")
    with open(path, "wb") as fh:
        fh.write(TSLTD_MAGIC)
        fh.write(struct.pack("<HIII", TSLTD_VERSION, geo.h, geo.w, len(frames)))
        for f in frames:
            fh.write(struct.pack("<QQ", f.t_start, f.t_end))
            fh.write(np.ascontiguousarray(f.values[:, :, 0]).tobytes())
            fh.write(np.ascontiguousarray(f.values[:, :, 1]).tobytes())


class TsltdFormatError(ValueError):
    """Raised when a TSLTD dump is malformed or truncated."""


def read_tsltd(path: Union[str, Path]) -> List[TsltdFrame]:
    """Read a TSLTD dump written by :func:`write_tsltd`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 6 + 14:
        raise TsltdFormatError("file too short for TSLTD header")
    if data[:6] != TSLTD_MAGIC:
        raise TsltdFormatError(f"bad magic {data[:6]!r}")
    version, h, w, count = struct.unpack_from("<HIII", data, 6)
    if version != TSLTD_VERSION:
        raise TsltdFormatError(f"unsupported version {version}")
    geo = SensorGeometry(w=w, h=h)
    offset = 6 + 14
    frame_bytes = 16 + 2 * h * w
    if len(data) != offset + count * frame_bytes:
        raise TsltdFormatError(
            f"expected {offset + count * frame_bytes} bytes, got {len(data)}"
        )
    frames = []
    for _ in range(count):
        t_start, t_end = struct.unpack_from("<QQ", data, offset)
        offset += 16
        ch0 = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=offset)
        offset += h * w
        ch1 = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=offset)
        offset += h * w
        values = np.stack(
            [ch0.reshape(h, w), ch1.reshape(h, w)], axis=-1
        ).copy()
        frames.append(
            TsltdFrame(geometry=geo, t_start=t_start, t_end=t_end, values=values)
        )
    return frames


def write_pgm(image: np.ndarray, path: Union[str, Path]) -> None:
    """Write a 2-D uint8 array as a binary (P5) PGM image."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM export needs a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def export_frame_pgm(frame: TsltdFrame, path_prefix: Union[str, Path]) -> List[Path]:
    """Dump both polarity channels of a frame as 8-bit grayscale PGMs."""
    prefix = Path(path_prefix)
    paths = []
    for ch, name in ((0, "on"), (1, "off")):
        p = prefix.with_name(prefix.name + f"_{name}.pgm")
        write_pgm(frame.values[:, :, ch], p)
        paths.append(p)
    return paths
