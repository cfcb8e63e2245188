import json
import math

import numpy as np
import pytest

from evtrack.events import SensorGeometry, parse_event_stream, serialize_events
from evtrack.geometry import OrientedBox, Transform5Dof, apply_transform
from evtrack.simulator import (
    SceneSpec,
    generate_events,
    load_scene,
    make_texture,
    read_pgm,
    render,
    save_scene,
    scene_from_dict,
    scene_to_dict,
)
from evtrack.tsltd import write_pgm

from conftest import textured_scene

GEO = SensorGeometry(64, 48)


def solid_scene(
    motion,
    box=OrientedBox(32, 24, 12, 10, 0.0),
    level=0.0,
    background=200.0,
    geometry=GEO,
    **kwargs,
):
    texture = np.full((16, 16), level)
    defaults = dict(contrast_threshold=0.3, substeps=8, noise_rate=0.0, seed=1)
    defaults.update(kwargs)
    return SceneSpec(
        geometry=geometry,
        texture=texture,
        background_level=background,
        initial_box=box,
        motion=motion,
        **defaults,
    )


class TestRender:
    def test_pose_outside_sensor_gives_background(self):
        scene = solid_scene([Transform5Dof()])
        img = render(scene, OrientedBox(500, 500, 12, 10, 0))
        np.testing.assert_allclose(img, 200.0)

    def test_identity_placement_reproduces_texture(self):
        rng = np.random.default_rng(2)
        texture = rng.uniform(20, 230, size=(11, 21))
        scene = SceneSpec(
            geometry=GEO,
            texture=texture,
            background_level=0.0,
            initial_box=OrientedBox(30, 24, 21, 11, 0.0),
            motion=[Transform5Dof()],
            substeps=4,
        )
        img = render(scene, scene.initial_box)
        # interior lattice points map exactly onto texture cells
        # box x-range [19.5, 40.5], texel x = (px - 19.5)/21 * 20
        for px, py in ((25, 22), (30, 24), (38, 27)):
            tx = (px - (30 - 10.5)) / 21 * 20
            ty = (py - (24 - 5.5)) / 11 * 10
            x0, y0 = int(np.floor(tx)), int(np.floor(ty))
            fx, fy = tx - x0, ty - y0
            expected = (
                (1 - fy) * ((1 - fx) * texture[y0, x0] + fx * texture[y0, min(x0 + 1, 20)])
                + fy * ((1 - fx) * texture[min(y0 + 1, 10), x0]
                        + fx * texture[min(y0 + 1, 10), min(x0 + 1, 20)])
            )
            assert img[py, px] == pytest.approx(expected, abs=1e-9)

    def test_quarter_rotation_matches_reference(self):
        rng = np.random.default_rng(3)
        texture = rng.uniform(0, 255, size=(17, 17))
        scene = SceneSpec(
            geometry=GEO,
            texture=texture,
            background_level=0.0,
            initial_box=OrientedBox(32, 24, 17, 17, 0.0),
            motion=[Transform5Dof()],
            substeps=4,
        )
        upright = render(scene, scene.initial_box)
        turned = render(
            scene, OrientedBox(32, 24, 17, 17, math.pi / 2)
        )
        # rotating the pose by +90 deg equals rotating the rendered object;
        # compare interiors away from the soft edge
        ref = np.zeros_like(upright)
        inner = upright[24 - 8 : 24 + 9, 32 - 8 : 32 + 9]
        # image-coords rotation by +90 deg (y down) maps (x,y)->(-y,x)
        ref_inner = np.rot90(inner, k=-1)
        got_inner = turned[24 - 8 : 24 + 9, 32 - 8 : 32 + 9]
        assert np.max(np.abs(got_inner - ref_inner)) <= 1.0

    def test_roi_matches_full_frame(self):
        scene = solid_scene([Transform5Dof()])
        full = render(scene, scene.initial_box)
        roi = render(scene, scene.initial_box, roi=(20, 15, 50, 40))
        np.testing.assert_allclose(roi, full[15:40, 20:50])


class TestGenerateEvents:
    def test_static_scene_emits_nothing(self):
        scene = solid_scene([Transform5Dof(), Transform5Dof()])
        events, gt = generate_events(scene)
        assert len(events) == 0
        assert len(gt) == 2

    def test_single_threshold_crossing_per_pixel(self):
        # a bright object sliding over dark background: ln(201/1) = 5.3;
        # C = 3 crosses once per transition, twice never (2C > 5.3)
        scene = solid_scene(
            [Transform5Dof(dx=4.0)],
            level=200.0,
            background=0.0,
            contrast_threshold=3.0,
            substeps=8,
        )
        events, _ = generate_events(scene)
        assert len(events) > 0
        # newly covered pixels brighten once (On), uncovered darken once (Off)
        keys = list(zip(events.u.tolist(), events.v.tolist()))
        assert len(set(keys)) == len(keys)
        box = scene.initial_box
        on_u = events.u[events.polarity == 1]
        off_u = events.u[events.polarity == 0]
        assert len(on_u) and len(off_u)
        assert on_u.min() > box.cx
        assert off_u.max() < box.cx

    def test_polarity_matches_brightness_direction(self):
        # dark object on light background moving +x: newly covered pixels
        # darken (Off), uncovered pixels brighten (On)
        scene = solid_scene([Transform5Dof(dx=5.0)])
        events, _ = generate_events(scene)
        assert len(events)
        box = scene.initial_box
        lead_edge = box.cx + box.w / 2
        trail_edge = box.cx - box.w / 2
        on_mask = events.polarity == 1
        # Off events cluster ahead of the leading edge, On behind the trailing
        assert events.u[~on_mask].mean() > events.u[on_mask].mean()

    def test_determinism(self):
        scene_a = textured_scene(Transform5Dof(8, -3, 0.05, 1.02, 0.98), seed=9)
        scene_b = textured_scene(Transform5Dof(8, -3, 0.05, 1.02, 0.98), seed=9)
        ev_a, _ = generate_events(scene_a)
        ev_b, _ = generate_events(scene_b)
        assert ev_a == ev_b

    def test_noise_changes_with_seed_only(self):
        base = dict(motion=[Transform5Dof()], noise_rate=50.0)
        ev1, _ = generate_events(solid_scene(**base, seed=4))
        ev2, _ = generate_events(solid_scene(**base, seed=4))
        ev3, _ = generate_events(solid_scene(**base, seed=5))
        assert ev1 == ev2
        assert ev1 != ev3

    def test_noise_rate_scales_count(self):
        # static scene: all events are noise
        rate = 100.0  # events per pixel per second
        scene = solid_scene([Transform5Dof()] * 5, noise_rate=rate, seed=8)
        events, _ = generate_events(scene)
        expected = rate * GEO.n_pixels * scene.duration_ns * 1e-9
        assert expected * 0.8 < len(events) < expected * 1.2
        assert events.is_sorted()

    def test_ground_truth_chain_consistent(self):
        pair = Transform5Dof(6, -4, 0.1, 1.05, 0.96)
        scene = textured_scene(pair, seed=12)
        _, gt = generate_events(scene)
        assert len(gt) == 5
        for k, record in enumerate(gt):
            assert record.window_index == k
            assert record.box_after == apply_transform(
                record.box_before, record.transform
            )
        for a, b in zip(gt, gt[1:]):
            assert a.box_after == b.box_before

    def test_event_count_scales_with_displacement(self):
        counts = []
        for dx in (3.0, 6.0):
            scene = solid_scene([Transform5Dof(dx=dx)], substeps=12)
            events, _ = generate_events(scene)
            counts.append(len(events))
        ratio = counts[1] / counts[0]
        assert 2.0 * 0.7 < ratio < 2.0 * 1.3

    def test_events_stay_inside_sensor_and_windows(self):
        scene = textured_scene(Transform5Dof(10, 5, 0.1, 1.04, 0.97), seed=15)
        events, _ = generate_events(scene)
        assert np.all((events.u >= 0) & (events.u < scene.geometry.w))
        assert np.all((events.v >= 0) & (events.v < scene.geometry.h))
        assert np.all(events.t >= 0)
        assert np.all(events.t < scene.duration_ns)

    def test_matches_per_pixel_trace_oracle(self):
        # brute force: re-render every substep and walk each pixel's
        # log-intensity trace independently
        pair = Transform5Dof(4.0, -2.0, 0.08, 1.03, 0.97)
        scene = SceneSpec(
            geometry=SensorGeometry(40, 32),
            texture=np.linspace(0, 220, 12 * 14).reshape(12, 14),
            background_level=190.0,
            initial_box=OrientedBox(20, 16, 14, 12, 0.0),
            motion=[pair.scaled(0.5)] * 2,
            contrast_threshold=0.25,
            substeps=6,
            noise_rate=0.0,
            seed=3,
        )
        events, _ = generate_events(scene)

        C = scene.contrast_threshold
        box = scene.initial_box
        images = [np.log1p(render(scene, box))]
        times = [0.0]
        for k, step in enumerate(scene.motion):
            for j in range(1, scene.substeps + 1):
                pose = apply_transform(box, step.scaled(j / scene.substeps))
                images.append(np.log1p(render(scene, pose)))
                times.append(
                    k * scene.window_ns
                    + j * scene.window_ns / scene.substeps
                )
            box = apply_transform(box, step)

        expected = []
        h, w = scene.geometry.h, scene.geometry.w
        for v in range(h):
            for u in range(w):
                ref = images[0][v, u]
                for idx in range(1, len(images)):
                    prev, cur = images[idx - 1][v, u], images[idx][v, u]
                    t0, t1 = times[idx - 1], times[idx]
                    while cur - ref >= C:
                        level = ref + C
                        frac = (level - prev) / (cur - prev)
                        t = int(np.floor(t0 + frac * (t1 - t0)))
                        expected.append((min(t, int(np.ceil(t1)) - 1), u, v, 1))
                        ref += C
                    while ref - cur >= C:
                        level = ref - C
                        frac = (level - prev) / (cur - prev)
                        t = int(np.floor(t0 + frac * (t1 - t0)))
                        expected.append((min(t, int(np.ceil(t1)) - 1), u, v, 0))
                        ref -= C
        got = sorted(
            zip(events.t.tolist(), events.u.tolist(), events.v.tolist(),
                events.polarity.tolist())
        )
        assert got == sorted(expected)

    def test_stream_round_trips_through_text_format(self, tmp_path):
        scene = textured_scene(Transform5Dof(7, 2, 0.0, 1.0, 1.0), seed=20)
        events, _ = generate_events(scene)
        path = tmp_path / "events.txt"
        serialize_events(events, path)
        parsed, report = parse_event_stream(path, scene.geometry)
        assert parsed == events


class TestSceneSerialization:
    def test_json_round_trip(self, tmp_path):
        data = {
            "geometry": {"w": 128, "h": 96},
            "texture": {"kind": "checker", "size": [20, 24], "tile": 4,
                        "low": 10, "high": 240},
            "background_level": 128.0,
            "initial_box": {"cx": 60, "cy": 48, "w": 24, "h": 20,
                            "angle_deg": 15.0},
            "motion": [[2.0, -1.0, 3.0, 1.01, 0.99]] * 5,
            "contrast_threshold": 0.3,
            "substeps": 10,
            "noise_rate": 1.5,
            "seed": 77,
        }
        scene = scene_from_dict(data)
        assert scene.initial_box.angle == pytest.approx(math.radians(15))
        assert scene.motion[0].theta == pytest.approx(math.radians(3))
        path = tmp_path / "scene.json"
        save_scene(scene, path)
        again = load_scene(path)
        assert scene_to_dict(again) == scene_to_dict(scene)
        np.testing.assert_array_equal(again.texture, scene.texture)

    def test_texture_kinds(self):
        solid = make_texture({"kind": "solid", "size": [4, 6], "level": 80})
        assert solid.shape == (4, 6) and np.all(solid == 80)
        checker = make_texture(
            {"kind": "checker", "size": [8, 8], "tile": 2, "low": 0, "high": 255}
        )
        assert checker[0, 0] == 0 and checker[0, 2] == 255
        noise = make_texture(
            {"kind": "noise", "size": [16, 16], "smooth": 2.0,
             "low": 10, "high": 200, "seed": 5}
        )
        assert noise.min() == pytest.approx(10)
        assert noise.max() == pytest.approx(200)
        again = make_texture(
            {"kind": "noise", "size": [16, 16], "smooth": 2.0,
             "low": 10, "high": 200, "seed": 5}
        )
        np.testing.assert_array_equal(noise, again)
        with pytest.raises(ValueError):
            make_texture({"kind": "plasma", "size": [4, 4]})

    def test_pgm_texture(self, tmp_path):
        img = np.arange(48, dtype=np.uint8).reshape(6, 8)
        path = tmp_path / "tex.pgm"
        write_pgm(img, path)
        loaded = read_pgm(path)
        np.testing.assert_array_equal(loaded, img)
        tex = make_texture({"kind": "pgm", "path": str(path)})
        np.testing.assert_array_equal(tex, img.astype(np.float64))

    def test_validation(self):
        with pytest.raises(ValueError):
            solid_scene([Transform5Dof()], substeps=1)
        with pytest.raises(ValueError):
            solid_scene([Transform5Dof()], contrast_threshold=0.0)
        with pytest.raises(ValueError):
            solid_scene([])
