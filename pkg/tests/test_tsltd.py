import numpy as np
import pytest

from evtrack.events import (
    Event,
    EventArray,
    EventWindow,
    Polarity,
    SensorGeometry,
    window_events,
)
from evtrack.tsltd import (
    TsltdFormatError,
    TsltdFrame,
    decay_value,
    encode_stream,
    encode_window,
    export_frame_pgm,
    read_tsltd,
    write_pgm,
    write_tsltd,
)

GEO = SensorGeometry(240, 180)
T = 6_600_000


def brute_force_encode(window: EventWindow, geometry: SensorGeometry) -> np.ndarray:
    """Independent per-pixel oracle: for each (pixel, polarity) find the
    latest event by scanning the whole list, then apply the decay formula."""
    latest = {}
    for e in window.events:
        latest[(e.u, e.v, int(e.polarity))] = e.t
    values = np.zeros((geometry.h, geometry.w, 2), dtype=np.uint8)
    for (u, v, p), t in latest.items():
        g = int(np.floor(255 * (t - window.t_start) / window.duration + 0.5))
        ch = 0 if p == 1 else 1
        values[v, u, ch] = g
    return values


def random_window(rng, n_events, t_start=0, duration=T):
    t = np.sort(rng.integers(t_start, t_start + duration, size=n_events))
    events = EventArray(
        t,
        rng.integers(0, GEO.w, size=n_events),
        rng.integers(0, GEO.h, size=n_events),
        rng.integers(0, 2, size=n_events),
    )
    return EventWindow(t_start=t_start, t_end=t_start + duration, events=events)


class TestDecayValue:
    def test_window_start_is_zero(self):
        assert decay_value(0, 0, T) == 0

    def test_midpoint_rounds_half_up(self):
        assert decay_value(T // 2, 0, T) == 128

    def test_last_nanosecond_saturates(self):
        # 255 * (T-1) / T = 254.99996..., rounds to 255
        assert decay_value(T - 1, 0, T) == 255

    def test_rejects_out_of_window(self):
        with pytest.raises(ValueError):
            decay_value(T, 0, T)
        with pytest.raises(ValueError):
            decay_value(-1, 0, T)

    def test_monotone_in_timestamp(self):
        values = [decay_value(t, 0, 1000) for t in range(0, 1000, 7)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_matches_float_rounding(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            dur = int(rng.integers(1, 10**8))
            t = int(rng.integers(0, dur))
            expected = int(np.floor(255 * t / dur + 0.5))
            assert decay_value(t, 0, dur) == expected


class TestEncodeWindow:
    def test_empty_window_all_zero(self):
        frame = encode_window(
            EventWindow(t_start=0, t_end=T, events=EventArray.empty()), GEO
        )
        assert not frame.values.any()

    def test_last_write_wins(self):
        events = EventArray.from_events(
            [Event(10, 20, Polarity.ON, 0), Event(10, 20, Polarity.ON, T // 2)]
        )
        frame = encode_window(EventWindow(0, T, events), GEO)
        assert frame.values[20, 10, 0] == 128
        assert frame.values[20, 10, 1] == 0

    def test_channel_assignment(self):
        events = EventArray.from_events(
            [Event(1, 2, Polarity.ON, T // 3), Event(3, 4, Polarity.OFF, T // 2)]
        )
        frame = encode_window(EventWindow(0, T, events), GEO)
        assert frame.values[2, 1, 0] > 0
        assert frame.values[4, 3, 1] > 0
        assert frame.values[2, 1, 1] == 0
        assert frame.values[4, 3, 0] == 0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(11)
        window = random_window(rng, 10_000)
        frame = encode_window(window, GEO)
        assert np.array_equal(frame.values, brute_force_encode(window, GEO))

    def test_polarity_separation(self):
        rng = np.random.default_rng(13)
        window = random_window(rng, 2000)
        full = encode_window(window, GEO)
        only_on = window.events.select(window.events.polarity == 1)
        stripped = encode_window(EventWindow(0, T, only_on), GEO)
        assert np.array_equal(full.values[:, :, 0], stripped.values[:, :, 0])
        assert not stripped.values[:, :, 1].any()

    def test_prefix_encoding_never_exceeds_full(self):
        rng = np.random.default_rng(17)
        window = random_window(rng, 3000)
        full = encode_window(window, GEO)
        for cut in (500, 1500, 2999):
            prefix = EventWindow(0, T, window.events[:cut])
            partial = encode_window(prefix, GEO)
            assert np.all(partial.values <= full.values)

    def test_sweeping_edge_forms_increasing_gradient(self):
        # a vertical edge crossing one pixel per millisecond
        events = []
        for k in range(6):
            t = k * 1_000_000
            for v in range(50, 60):
                events.append(Event(100 + k, v, Polarity.ON, t))
        frame = encode_window(
            EventWindow(0, T, EventArray.from_events(events)), GEO
        )
        row = frame.values[55, 100:106, 0].astype(int)
        assert all(b > a for a, b in zip(row, row[1:]))


class TestEncodeStream:
    def test_equals_windowing_plus_encoding(self):
        rng = np.random.default_rng(19)
        n = 5000
        t = np.sort(rng.integers(0, 5 * T, size=n))
        events = EventArray(
            t,
            rng.integers(0, GEO.w, size=n),
            rng.integers(0, GEO.h, size=n),
            rng.integers(0, 2, size=n),
        )
        frames = encode_stream(events, GEO, 0, T, 5)
        windows = window_events(events, 0, T, 5)
        assert len(frames) == 5
        for frame, window in zip(frames, windows):
            again = encode_window(window, GEO)
            assert np.array_equal(frame.values, again.values)
            assert frame.t_start == window.t_start


class TestDumpFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(23)
        n = 2000
        t = np.sort(rng.integers(0, 3 * T, size=n))
        events = EventArray(
            t,
            rng.integers(0, GEO.w, size=n),
            rng.integers(0, GEO.h, size=n),
            rng.integers(0, 2, size=n),
        )
        frames = encode_stream(events, GEO, 0, T, 3)
        path = tmp_path / "frames.tsltd"
        write_tsltd(frames, path)
        loaded = read_tsltd(path)
        assert len(loaded) == 3
        for a, b in zip(frames, loaded):
            assert a.geometry == b.geometry
            assert a.t_start == b.t_start and a.t_end == b.t_end
            assert np.array_equal(a.values, b.values)

    def test_header_layout(self, tmp_path):
        frame = encode_window(
            EventWindow(0, T, EventArray.empty()), SensorGeometry(4, 3)
        )
        path = tmp_path / "one.tsltd"
        write_tsltd([frame], path)
        raw = path.read_bytes()
        assert raw[:6] == b"TSLTD1"
        assert len(raw) == 6 + 14 + 16 + 2 * 12

    def test_truncation_detected(self, tmp_path):
        frame = encode_window(EventWindow(0, T, EventArray.empty()), GEO)
        path = tmp_path / "cut.tsltd"
        write_tsltd([frame], path)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(TsltdFormatError):
            read_tsltd(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.tsltd"
        path.write_bytes(b"NOTTSLTDxxxxxxxxxxxxxxxx")
        with pytest.raises(TsltdFormatError):
            read_tsltd(path)

    def test_pgm_export(self, tmp_path):
        values = np.zeros((GEO.h, GEO.w, 2), dtype=np.uint8)
        values[10, 20, 0] = 200
        frame = TsltdFrame(geometry=GEO, t_start=0, t_end=T, values=values)
        paths = export_frame_pgm(frame, tmp_path / "frame0")
        assert [p.name for p in paths] == ["frame0_on.pgm", "frame0_off.pgm"]
        raw = paths[0].read_bytes()
        assert raw.startswith(b"P5\n240 180\n255\n")
        pixels = np.frombuffer(raw.split(b"255\n", 1)[1], dtype=np.uint8)
        assert pixels.reshape(GEO.h, GEO.w)[10, 20] == 200

    def test_write_pgm_validates(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(np.zeros((3, 3), dtype=np.float64), tmp_path / "x.pgm")
