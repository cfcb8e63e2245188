import math

import numpy as np
import pytest

from evtrack.estimators import InsufficientEvidenceError
from evtrack.events import SensorGeometry
from evtrack.geometry import (
    AlignedBox,
    OrientedBox,
    Transform5Dof,
    crop_region,
    enclosing_aligned,
)
from evtrack.search import SearchConfig, SearchEstimator, _Scorer, _blur, _combined, estimate
from evtrack.simulator import generate_events
from evtrack.tsltd import TsltdFrame, encode_stream

from conftest import textured_scene

GEO = SensorGeometry(240, 180)


def frame_with_pattern(seed, offset=(0, 0), t_start=0, t_end=100):
    """Frame holding a fixed random blob, optionally shifted by integer px."""
    values = np.zeros((GEO.h, GEO.w, 2), dtype=np.uint8)
    rng = np.random.default_rng(seed)
    blob = (rng.random((40, 50)) * 220 + 20).astype(np.uint8)
    x0 = 85 + offset[0]
    y0 = 70 + offset[1]
    values[y0 : y0 + 40, x0 : x0 + 50, 0] = blob
    return TsltdFrame(geometry=GEO, t_start=t_start, t_end=t_end, values=values)


def frames_sequence(*frames):
    out = []
    for k, f in enumerate(frames):
        out.append(
            TsltdFrame(
                geometry=GEO, t_start=k * 100, t_end=(k + 1) * 100,
                values=f.values,
            )
        )
    return out


BOX = AlignedBox(110, 90, 60, 50)


class TestEstimateSynthetic:
    def test_identical_frames_give_identity(self):
        frame = frame_with_pattern(1)
        frames = frames_sequence(*([frame] * 5))
        result = estimate(frames, BOX)
        assert result.dx == 0.0
        assert result.dy == 0.0
        assert result.theta == 0.0
        assert result.sx == 1.0
        assert result.sy == 1.0

    def test_empty_template_raises(self):
        empty = TsltdFrame(
            geometry=GEO, t_start=0, t_end=100,
            values=np.zeros((GEO.h, GEO.w, 2), dtype=np.uint8),
        )
        live = frame_with_pattern(1, t_start=400, t_end=500)
        with pytest.raises(InsufficientEvidenceError):
            estimate([empty, empty, empty, empty, live], BOX)

    def test_needs_two_frames(self):
        frame = frame_with_pattern(1)
        with pytest.raises(ValueError):
            estimate([frame], BOX)

    def test_pure_integer_shift_recovered(self):
        # pattern moves 8 px between first and last frame; with 5 frames the
        # pair-level estimate is 8 * 5/4 = 10
        first = frame_with_pattern(2)
        last = frame_with_pattern(2, offset=(8, 0))
        frames = frames_sequence(first, first, first, first, last)
        result = estimate(frames, BOX)
        assert abs(result.dx - 10.0) <= 1.0
        assert abs(result.dy) <= 1.0

    def test_determinism(self):
        first = frame_with_pattern(3)
        last = frame_with_pattern(3, offset=(5, -3))
        frames = frames_sequence(first, first, first, first, last)
        a = estimate(frames, BOX)
        b = estimate(frames, BOX)
        assert a == b

    def test_shift_equivariance_of_target(self):
        # shifting the last frame's content by an integer delta moves the
        # measured pattern offset by delta (times the span factor n/(n-1))
        first = frame_with_pattern(4)
        frames0 = frames_sequence(
            first, first, first, first, frame_with_pattern(4, offset=(4, 0))
        )
        frames1 = frames_sequence(
            first, first, first, first, frame_with_pattern(4, offset=(8, 0))
        )
        r0 = estimate(frames0, BOX)
        r1 = estimate(frames1, BOX)
        assert abs((r1.dx - r0.dx) - 4 * 5 / 4) <= 1.0

    def test_shift_invariance_when_everything_moves(self):
        # shifting both frames' contents and the query box leaves the
        # relative estimate unchanged
        delta = (6, 4)
        first = frame_with_pattern(5)
        last = frame_with_pattern(5, offset=(4, 0))
        moved_first = frame_with_pattern(5, offset=delta)
        moved_last = frame_with_pattern(5, offset=(4 + delta[0], delta[1]))
        r0 = estimate(frames_sequence(first, first, first, first, last), BOX)
        moved_box = AlignedBox(BOX.cx + delta[0], BOX.cy + delta[1], BOX.w, BOX.h)
        r1 = estimate(
            frames_sequence(
                moved_first, moved_first, moved_first, moved_first, moved_last
            ),
            moved_box,
        )
        assert abs(r1.dx - r0.dx) <= 1.0
        assert abs(r1.dy - r0.dy) <= 1.0

    def test_returned_score_at_least_identity(self):
        first = frame_with_pattern(6)
        last = frame_with_pattern(6, offset=(6, 2))
        frames = frames_sequence(first, first, first, first, last)
        cfg = SearchConfig()
        result = estimate(frames, BOX, cfg)
        region = crop_region(BOX, cfg.tau)
        scorer = _Scorer(
            _blur(_combined(frames[0]), cfg.fine_blur_sigma),
            _blur(_combined(frames[-1]), cfg.fine_blur_sigma),
            region,
            4 / 5,
            cfg.patch_resolution,
        )
        params = np.array(
            [
                [result.dx, result.dy, result.theta, result.sx, result.sy],
                [0.0, 0.0, 0.0, 1.0, 1.0],
            ]
        )
        scores = scorer.scores(params)
        assert scores[0] >= scores[1]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SearchConfig(coarse_steps=(4, 5, 5, 3, 3))
        with pytest.raises(ValueError):
            SearchConfig(coarse_steps=(1, 3, 3, 3, 3))
        with pytest.raises(ValueError):
            SearchConfig(refine_shrink=1.0)


class TestEstimateOnSimulator:
    def test_pure_translation(self):
        pair = Transform5Dof(10.0, 0.0, 0.0, 1.0, 1.0)
        scene = textured_scene(pair, seed=5)
        events, _ = generate_events(scene)
        frames = encode_stream(events, scene.geometry, 0, scene.window_ns, 5)
        result = estimate(frames, enclosing_aligned(scene.initial_box))
        assert abs(result.dx - 10.0) <= 1.0
        assert abs(result.dy) <= 1.0

    def test_translation_plus_rotation(self):
        pair = Transform5Dof(6.0, -4.0, math.radians(8.0), 1.0, 1.0)
        scene = textured_scene(pair, seed=6)
        events, _ = generate_events(scene)
        frames = encode_stream(events, scene.geometry, 0, scene.window_ns, 5)
        result = estimate(frames, enclosing_aligned(scene.initial_box))
        assert abs(math.degrees(result.theta) - 8.0) <= 2.0
        assert abs(result.dx - 6.0) <= 2.0
        assert abs(result.dy + 4.0) <= 2.0

    def test_anisotropic_scale(self):
        pair = Transform5Dof(5.0, 3.0, math.radians(-6.0), 1.06, 0.95)
        scene = textured_scene(pair, seed=7)
        events, _ = generate_events(scene)
        frames = encode_stream(events, scene.geometry, 0, scene.window_ns, 5)
        result = estimate(frames, enclosing_aligned(scene.initial_box))
        assert abs(result.sx - 1.06) <= 0.05
        assert abs(result.sy - 0.95) <= 0.05

    def test_estimator_wrapper(self):
        pair = Transform5Dof(8.0, 2.0, 0.0, 1.0, 1.0)
        scene = textured_scene(pair, seed=8)
        events, _ = generate_events(scene)
        frames = encode_stream(events, scene.geometry, 0, scene.window_ns, 5)
        estimator = SearchEstimator()
        result = estimator(frames, enclosing_aligned(scene.initial_box))
        assert abs(result.dx - 8.0) <= 1.5
