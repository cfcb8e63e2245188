import math

import numpy as np
import pytest

from evtrack.events import SensorGeometry
from evtrack.geometry import OrientedBox, Transform5Dof, enclosing_aligned
from evtrack.simulator import SceneSpec, generate_events, make_texture
from evtrack.tsltd import encode_stream


@pytest.fixture(scope="session")
def geometry():
    return SensorGeometry(240, 180)


def textured_scene(
    pair: Transform5Dof,
    seed: int,
    geometry: SensorGeometry = SensorGeometry(240, 180),
    box: OrientedBox = OrientedBox(110.0, 90.0, 60.0, 50.0, 0.0),
    n_windows: int = 5,
    noise_rate: float = 0.0,
    substeps: int = 12,
) -> SceneSpec:
    """Standard noise-textured moving-object scene used across tests."""
    tex_spec = {
        "kind": "noise",
        "size": [int(box.h), int(box.w)],
        "smooth": 2.0,
        "low": 5,
        "high": 200,
        "seed": seed * 7 + 1,
    }
    return SceneSpec(
        geometry=geometry,
        texture=make_texture(tex_spec),
        background_level=230.0,
        initial_box=box,
        motion=[pair.scaled(1 / n_windows)] * n_windows,
        contrast_threshold=0.18,
        substeps=substeps,
        noise_rate=noise_rate,
        seed=seed,
        texture_spec=tex_spec,
    )


def scene_frames(scene: SceneSpec):
    events, gt = generate_events(scene)
    frames = encode_stream(
        events, scene.geometry, 0, scene.window_ns, scene.n_windows
    )
    return events, gt, frames


@pytest.fixture(scope="session")
def translation_case(geometry):
    """Noise-free 10 px translation scene: (events, gt, frames, scene)."""
    pair = Transform5Dof(10.0, 0.0, 0.0, 1.0, 1.0)
    scene = textured_scene(pair, seed=5, geometry=geometry)
    events, gt, frames = scene_frames(scene)
    return pair, scene, events, gt, frames
