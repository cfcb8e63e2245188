"""Training pair assembly from frames plus ground truth, and synthetic sets.

A training pair holds the patch sequence cropped from the frames spanning
one box pair (all patches from the same tau-enlarged previous box, per the
joint-training protocol) and the normalized motion target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from evtrack.events import DEFAULT_WINDOW_NS, SensorGeometry
from evtrack.geometry import (
    DEFAULT_TAU,
    MotionBounds,
    OrientedBox,
    Transform5Dof,
    compose_transforms,
    crop_region,
    enclosing_aligned,
    normalize,
    sample_patch,
)
from evtrack.simulator import (
    GroundTruthRecord,
    SceneSpec,
    generate_events,
    make_texture,
)
from evtrack.tsltd import TsltdFrame, encode_stream


@dataclass
class TrainingPair:
    """One regression sample: patch sequence, target, and provenance."""

    patches: np.ndarray  # (S, P, P, 2) float in [0, 1]
    target: np.ndarray  # (5,) normalized components in [-1, 1]
    clipped: bool
    transform: Transform5Dof
    box_before: OrientedBox
    box_after: OrientedBox


def compose_ground_truth(
    records: Sequence[GroundTruthRecord],
) -> GroundTruthRecord:
    """Collapse a contiguous window span into one pair-level record."""
    if not records:
        raise ValueError("empty ground-truth span")
    for a, b in zip(records, records[1:]):
        if b.window_index != a.window_index + 1:
            raise ValueError("ground-truth records are not contiguous")
    return GroundTruthRecord(
        window_index=records[0].window_index,
        transform=compose_transforms([r.transform for r in records]),
        box_before=records[0].box_before,
        box_after=records[-1].box_after,
    )


def make_training_pair(
    gt: GroundTruthRecord,
    frames: Sequence[TsltdFrame],
    bounds: MotionBounds,
    tau: float = DEFAULT_TAU,
) -> TrainingPair:
    """Crop the patch sequence and build the normalized target.

    All patches come from the same region: the tau-enlarged axis-aligned
    previous box.  Targets outside [-1, 1] are clipped and flagged, not
    dropped.
    """
    if not frames:
        raise ValueError("need at least one frame")
    for a, b in zip(frames, frames[1:]):
        if b.t_start != a.t_end:
            raise ValueError("frames must be contiguous in time")
    region = crop_region(enclosing_aligned(gt.box_before), tau)
    patches = np.stack([sample_patch(f, region) for f in frames])
    raw, clipped = normalize(gt.transform, bounds)
    return TrainingPair(
        patches=patches,
        target=np.array(raw.as_tuple(), dtype=np.float64),
        clipped=clipped,
        transform=gt.transform,
        box_before=gt.box_before,
        box_after=gt.box_after,
    )


@dataclass(frozen=True)
class SyntheticSetConfig:
    """Knobs for the random scene distribution behind synthetic datasets.

    Scenes cycle through a small family of textured objects (all seeded by
    the set seed) and vary mainly in their motion, echoing the protocol of
    training and validating within the same recorded sequences.  Motions
    stay comfortably inside the default motion bounds; placement keeps the
    moving object inside the sensor.
    """

    geometry: SensorGeometry = SensorGeometry()
    n_windows: int = 5
    window_ns: int = DEFAULT_WINDOW_NS
    n_objects: int = 4
    box_w: Tuple[float, float] = (48.0, 72.0)
    box_h: Tuple[float, float] = (40.0, 62.0)
    center_jitter: float = 6.0
    max_dx: float = 16.0
    max_dy: float = 12.0
    max_theta_deg: float = 10.0
    max_log_scale: float = 0.08
    texture_smooth: Tuple[float, float] = (2.0, 4.0)
    contrast_threshold: float = 0.25
    substeps: int = 12
    noise_rate: float = 0.0


def random_scene(
    seed: int, index: int, cfg: SyntheticSetConfig = SyntheticSetConfig()
) -> SceneSpec:
    """Deterministic random scene number `index` of a seeded family."""
    # object appearance and size are shared within the object family so
    # that held-out motions of known objects are learnable
    obj_rng = np.random.default_rng([seed, index % cfg.n_objects, 0x0B1EC7])
    w = obj_rng.uniform(*cfg.box_w)
    h = obj_rng.uniform(*cfg.box_h)
    texture_spec = {
        "kind": "noise",
        "size": [max(8, int(round(h))), max(8, int(round(w)))],
        "smooth": float(obj_rng.uniform(*cfg.texture_smooth)),
        "low": float(obj_rng.uniform(5.0, 25.0)),
        "high": float(obj_rng.uniform(150.0, 200.0)),
        "seed": int(obj_rng.integers(0, 2**31 - 1)),
    }
    background = float(obj_rng.uniform(225.0, 245.0))

    rng = np.random.default_rng([seed, index, 0x5CE2E])
    dx = rng.uniform(-cfg.max_dx, cfg.max_dx)
    dy = rng.uniform(-cfg.max_dy, cfg.max_dy)
    theta = np.deg2rad(rng.uniform(-cfg.max_theta_deg, cfg.max_theta_deg))
    sx = float(np.exp(rng.uniform(-cfg.max_log_scale, cfg.max_log_scale)))
    sy = float(np.exp(rng.uniform(-cfg.max_log_scale, cfg.max_log_scale)))
    pair_transform = Transform5Dof(dx, dy, theta, sx, sy)

    geo = cfg.geometry
    half_diag = float(np.hypot(w, h)) / 2 * max(sx, sy, 1.0)
    margin_x = half_diag + cfg.max_dx + 3.0
    margin_y = half_diag + cfg.max_dy + 3.0
    if 2 * margin_x >= geo.w or 2 * margin_y >= geo.h:
        raise ValueError("scene box/motion too large for the sensor")
    cx = geo.w / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    cy = geo.h / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    cx = float(np.clip(cx, margin_x, geo.w - margin_x))
    cy = float(np.clip(cy, margin_y, geo.h - margin_y))

    scene_seed = int(rng.integers(0, 2**31 - 1))
    per_window = pair_transform.scaled(1.0 / cfg.n_windows)
    return SceneSpec(
        geometry=geo,
        texture=make_texture(texture_spec),
        background_level=background,
        initial_box=OrientedBox(cx, cy, w, h, 0.0),
        motion=[per_window] * cfg.n_windows,
        contrast_threshold=cfg.contrast_threshold,
        substeps=cfg.substeps,
        noise_rate=cfg.noise_rate,
        seed=scene_seed,
        window_ns=cfg.window_ns,
        texture_spec=texture_spec,
    )


def scene_to_training_pair(
    scene: SceneSpec,
    bounds: MotionBounds,
    tau: float = DEFAULT_TAU,
) -> TrainingPair:
    """Run one scene end to end into a training pair."""
    events, gt = generate_events(scene)
    frames = encode_stream(
        events, scene.geometry, 0, scene.window_ns, scene.n_windows
    )
    return make_training_pair(compose_ground_truth(gt), frames, bounds, tau)


def build_synthetic_pairs(
    n_pairs: int,
    seed: int,
    cfg: SyntheticSetConfig = SyntheticSetConfig(),
    bounds: Optional[MotionBounds] = None,
    tau: float = DEFAULT_TAU,
    index_offset: int = 0,
) -> List[TrainingPair]:
    """Generate a deterministic family of simulator-backed pairs."""
    bounds = bounds or MotionBounds()
    return [
        scene_to_training_pair(random_scene(seed, index_offset + i, cfg), bounds, tau)
        for i in range(n_pairs)
    ]


def stack_pairs(pairs: Sequence[TrainingPair]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack pairs into (N, S, P, P, 2) inputs and (N, 5) targets."""
    patches = np.stack([p.patches for p in pairs]).astype(np.float32)
    targets = np.stack([p.target for p in pairs]).astype(np.float32)
    return patches, targets
