"""Synthetic event-camera scene generator with exact ground truth.

A textured planar object moves over a uniform background under a known
per-window 5-DoF transform.  Per pixel, the simulator tracks log intensity
ln(I+1) and emits one event per crossing of the contrast threshold C,
with the timestamp linearly interpolated inside the substep and the
threshold reference carried across substeps and windows.  Everything is
deterministic given the scene seed, which makes generated streams usable
as an oracle for the encoder, the estimators, and the tracking metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from evtrack.events import DEFAULT_WINDOW_NS, EventArray, SensorGeometry
from evtrack.geometry import (
    AlignedBox,
    OrientedBox,
    Transform5Dof,
    apply_transform,
    enclosing_aligned,
)

DEFAULT_CONTRAST_THRESHOLD = 0.3
DEFAULT_SUBSTEPS = 20


@dataclass
class SceneSpec:
    """Full description of one synthetic scene."""

    geometry: SensorGeometry
    texture: np.ndarray
    background_level: float
    initial_box: OrientedBox
    motion: List[Transform5Dof]
    contrast_threshold: float = DEFAULT_CONTRAST_THRESHOLD
    substeps: int = DEFAULT_SUBSTEPS
    noise_rate: float = 0.0
    seed: int = 0
    window_ns: int = DEFAULT_WINDOW_NS
    texture_spec: Optional[Dict] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.substeps < 2:
            raise ValueError(f"substeps must be >= 2, got {self.substeps}")
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.texture.ndim != 2 or min(self.texture.shape) < 1:
            raise ValueError("texture must be a non-empty 2-D grayscale array")
        if self.noise_rate < 0:
            raise ValueError("noise rate must be non-negative")
        if not self.motion:
            raise ValueError("motion must list at least one window transform")

    @property
    def n_windows(self) -> int:
        return len(self.motion)

    @property
    def duration_ns(self) -> int:
        return self.n_windows * self.window_ns

    def box_at_window(self, k: int) -> OrientedBox:
        """Object pose at the start of window k (k = n_windows gives the end)."""
        box = self.initial_box
        for t in self.motion[:k]:
            box = apply_transform(box, t)
        return box


@dataclass
class GroundTruthRecord:
    """True motion of one window: transform plus the poses it connects."""

    window_index: int
    transform: Transform5Dof
    box_before: OrientedBox
    box_after: OrientedBox


def make_texture(spec: Dict, rng_seed: int = 0) -> np.ndarray:
    """Build a grayscale texture array from a procedural spec.

    Kinds: "solid" (level), "checker" (tile, low, high), "noise"
    (smooth sigma, low, high, seed), "pgm" (path).
    """
    kind = spec.get("kind")
    size = spec.get("size", [64, 64])
    th, tw = int(size[0]), int(size[1])
    if kind == "solid":
        return np.full((th, tw), float(spec.get("level", 0.0)))
    if kind == "checker":
        tile = int(spec.get("tile", 8))
        low = float(spec.get("low", 30.0))
        high = float(spec.get("high", 220.0))
        yy, xx = np.indices((th, tw))
        cells = (yy // tile + xx // tile) % 2
        return np.where(cells == 0, low, high).astype(np.float64)
    if kind == "noise":
        sigma = float(spec.get("smooth", 6.0))
        low = float(spec.get("low", 30.0))
        high = float(spec.get("high", 220.0))
        seed = int(spec.get("seed", rng_seed))
        rng = np.random.default_rng([seed, 0x7E57])
        base = rng.random((th, tw))
        smoothed = _gaussian_blur(base, sigma)
        lo, hi = smoothed.min(), smoothed.max()
        if hi - lo < 1e-12:
            return np.full((th, tw), (low + high) / 2)
        return low + (smoothed - lo) / (hi - lo) * (high - low)
    if kind == "pgm":
        return read_pgm(spec["path"]).astype(np.float64)
    raise ValueError(f"unknown texture kind {kind!r}")


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM image."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM: {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


def _gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding (numpy only)."""
    if sigma <= 0:
        return image.copy()
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()

    def blur_axis(arr: np.ndarray, axis: int) -> np.ndarray:
        moved = np.moveaxis(arr, axis, -1)
        padded = np.pad(moved, [(0, 0)] * (moved.ndim - 1) + [(radius, radius)],
                        mode="reflect")
        out = np.empty_like(moved)
        for idx in np.ndindex(moved.shape[:-1]):
            out[idx] = np.convolve(padded[idx], kernel, mode="valid")
        return np.moveaxis(out, -1, axis)

    return blur_axis(blur_axis(image, 0), 1)


def render(
    scene: SceneSpec,
    pose: OrientedBox,
    roi: Optional[Tuple[int, int, int, int]] = None,
) -> np.ndarray:
    """Render the object at a pose over the background by inverse mapping.

    Each sensor lattice point is pulled back into box-local coordinates;
    points inside the box sample the texture bilinearly, with a one-pixel
    soft edge so sub-pixel motion produces smooth intensity changes.
    Returns the full frame, or only the half-open ROI (x0, y0, x1, y1).
    """
    if roi is None:
        x0, y0 = 0, 0
        x1, y1 = scene.geometry.w, scene.geometry.h
    else:
        x0, y0, x1, y1 = roi
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)

    c, s = math.cos(pose.angle), math.sin(pose.angle)
    rx = gx - pose.cx
    ry = gy - pose.cy
    # inverse rotation into box-local axes
    qx = c * rx + s * ry
    qy = -s * rx + c * ry

    # coverage ramps over one pixel at each box edge
    ax = np.clip(pose.w / 2 + 0.5 - np.abs(qx), 0.0, 1.0)
    ay = np.clip(pose.h / 2 + 0.5 - np.abs(qy), 0.0, 1.0)
    alpha = ax * ay

    th, tw = scene.texture.shape
    tx = np.clip((qx / pose.w + 0.5) * (tw - 1), 0.0, tw - 1.0)
    ty = np.clip((qy / pose.h + 0.5) * (th - 1), 0.0, th - 1.0)

    tx0 = np.floor(tx).astype(np.int64)
    ty0 = np.floor(ty).astype(np.int64)
    tx1 = np.minimum(tx0 + 1, tw - 1)
    ty1 = np.minimum(ty0 + 1, th - 1)
    fx = tx - tx0
    fy = ty - ty0
    tex = scene.texture
    sample = (1 - fy) * ((1 - fx) * tex[ty0, tx0] + fx * tex[ty0, tx1]) + fy * (
        (1 - fx) * tex[ty1, tx0] + fx * tex[ty1, tx1]
    )
    return scene.background_level + alpha * (sample - scene.background_level)


def _scene_roi(scene: SceneSpec, margin: int = 3) -> Tuple[int, int, int, int]:
    """Pixel rectangle covering the object across all windows (clipped)."""
    x_min = y_min = math.inf
    x_max = y_max = -math.inf
    for k in range(scene.n_windows + 1):
        al = enclosing_aligned(scene.box_at_window(k))
        x_min = min(x_min, al.x_min)
        y_min = min(y_min, al.y_min)
        x_max = max(x_max, al.x_max)
        y_max = max(y_max, al.y_max)
    x0 = max(0, int(math.floor(x_min)) - margin)
    y0 = max(0, int(math.floor(y_min)) - margin)
    x1 = min(scene.geometry.w, int(math.ceil(x_max)) + margin + 1)
    y1 = min(scene.geometry.h, int(math.ceil(y_max)) + margin + 1)
    if x1 <= x0 or y1 <= y0:
        return (0, 0, 0, 0)
    return (x0, y0, x1, y1)


def _log_intensity(image: np.ndarray) -> np.ndarray:
    # ln(I + 1) stays finite for black pixels
    return np.log1p(np.maximum(image, 0.0))


def generate_events(
    scene: SceneSpec,
) -> Tuple[EventArray, List[GroundTruthRecord]]:
    """Simulate the event stream and the per-window ground truth.

    Per window the pose is interpolated across substeps (linear in
    translation and angle, geometric in scale).  Per pixel, each crossing
    of the log-intensity reference by +-C emits one event; the reference
    moves by C per event and persists across substeps and windows.
    Background noise is a seeded Poisson process over the whole sensor
    with uniform pixel, time, and polarity.
    """
    geo = scene.geometry
    C = scene.contrast_threshold
    rng = np.random.default_rng([scene.seed, 0xEC5])

    # noise first: its draw count must not depend on the signal events
    total_ns = scene.duration_ns
    noise_parts: List[np.ndarray] = []
    if scene.noise_rate > 0:
        lam = scene.noise_rate * geo.n_pixels * total_ns * 1e-9
        n_noise = int(rng.poisson(lam))
        noise_t = rng.integers(0, total_ns, size=n_noise, dtype=np.int64)
        noise_u = rng.integers(0, geo.w, size=n_noise, dtype=np.int64)
        noise_v = rng.integers(0, geo.h, size=n_noise, dtype=np.int64)
        noise_p = rng.integers(0, 2, size=n_noise, dtype=np.int64)
        noise_parts = [noise_t, noise_u, noise_v, noise_p]

    roi = _scene_roi(scene)
    x0, y0, x1, y1 = roi
    has_roi = x1 > x0 and y1 > y0

    ts_parts: List[np.ndarray] = []
    us_parts: List[np.ndarray] = []
    vs_parts: List[np.ndarray] = []
    ps_parts: List[np.ndarray] = []
    gt: List[GroundTruthRecord] = []

    if has_roi:
        roi_w = x1 - x0
        px_u = np.tile(np.arange(x0, x1, dtype=np.int64), y1 - y0)
        px_v = np.repeat(np.arange(y0, y1, dtype=np.int64), roi_w)

        box = scene.initial_box
        prev_log = _log_intensity(render(scene, box, roi)).reshape(-1)
        reference = prev_log.copy()

        for k, step_transform in enumerate(scene.motion):
            t_window = k * scene.window_ns
            box_after = apply_transform(box, step_transform)
            gt.append(
                GroundTruthRecord(
                    window_index=k,
                    transform=step_transform,
                    box_before=box,
                    box_after=box_after,
                )
            )
            for j in range(1, scene.substeps + 1):
                frac = j / scene.substeps
                pose = apply_transform(box, step_transform.scaled(frac))
                cur_log = _log_intensity(render(scene, pose, roi)).reshape(-1)
                t0 = t_window + (j - 1) * scene.window_ns / scene.substeps
                t1 = t_window + j * scene.window_ns / scene.substeps
                _emit_crossings(
                    prev_log, cur_log, reference, C, t0, t1,
                    px_u, px_v, ts_parts, us_parts, vs_parts, ps_parts,
                )
                prev_log = cur_log
            box = box_after
    else:
        box = scene.initial_box
        for k, step_transform in enumerate(scene.motion):
            box_after = apply_transform(box, step_transform)
            gt.append(
                GroundTruthRecord(
                    window_index=k,
                    transform=step_transform,
                    box_before=box,
                    box_after=box_after,
                )
            )
            box = box_after

    if noise_parts:
        ts_parts.append(noise_parts[0])
        us_parts.append(noise_parts[1])
        vs_parts.append(noise_parts[2])
        ps_parts.append(noise_parts[3])

    if ts_parts:
        t = np.concatenate(ts_parts)
        u = np.concatenate(us_parts)
        v = np.concatenate(vs_parts)
        p = np.concatenate(ps_parts)
        order = np.argsort(t, kind="stable")
        events = EventArray(t[order], u[order], v[order], p[order])
    else:
        events = EventArray.empty()
    return events, gt


def _emit_crossings(
    prev_log: np.ndarray,
    cur_log: np.ndarray,
    reference: np.ndarray,
    C: float,
    t0: float,
    t1: float,
    px_u: np.ndarray,
    px_v: np.ndarray,
    ts_parts: List[np.ndarray],
    us_parts: List[np.ndarray],
    vs_parts: List[np.ndarray],
    ps_parts: List[np.ndarray],
) -> None:
    """Emit threshold crossings for one substep, updating the reference."""
    delta = cur_log - reference
    n_up = np.floor(delta / C).astype(np.int64)
    n_up[n_up < 0] = 0
    n_down = np.floor(-delta / C).astype(np.int64)
    n_down[n_down < 0] = 0

    for counts, polarity, sign in ((n_up, 1, 1.0), (n_down, 0, -1.0)):
        total = int(counts.sum())
        if total == 0:
            continue
        idx = np.nonzero(counts)[0]
        reps = counts[idx]
        pix = np.repeat(idx, reps)
        # crossing ordinal 1..n per pixel
        ordinal = np.arange(total) - np.repeat(
            np.cumsum(reps) - reps, reps
        ) + 1
        levels = reference[pix] + sign * C * ordinal
        denom = cur_log[pix] - prev_log[pix]
        # linear interpolation of the crossing time inside [t0, t1)
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = (levels - prev_log[pix]) / denom
        frac = np.clip(np.nan_to_num(frac, nan=1.0), 0.0, 1.0)
        times = np.floor(t0 + frac * (t1 - t0)).astype(np.int64)
        times = np.clip(times, int(t0), int(math.ceil(t1)) - 1)
        ts_parts.append(times)
        us_parts.append(px_u[pix])
        vs_parts.append(px_v[pix])
        ps_parts.append(np.full(total, polarity, dtype=np.int64))
        reference[idx] += sign * C * reps


# --- scene JSON I/O -------------------------------------------------------


def scene_to_dict(scene: SceneSpec) -> Dict:
    """JSON-ready dict; requires the scene to carry its texture spec."""
    if scene.texture_spec is None:
        raise ValueError("scene has no texture spec; cannot serialize texture")
    return {
        "geometry": {"w": scene.geometry.w, "h": scene.geometry.h},
        "texture": scene.texture_spec,
        "background_level": scene.background_level,
        "initial_box": {
            "cx": scene.initial_box.cx,
            "cy": scene.initial_box.cy,
            "w": scene.initial_box.w,
            "h": scene.initial_box.h,
            "angle_deg": math.degrees(scene.initial_box.angle),
        },
        "motion": [
            [t.dx, t.dy, math.degrees(t.theta), t.sx, t.sy] for t in scene.motion
        ],
        "contrast_threshold": scene.contrast_threshold,
        "substeps": scene.substeps,
        "noise_rate": scene.noise_rate,
        "seed": scene.seed,
        "window_ns": scene.window_ns,
    }


def scene_from_dict(data: Dict) -> SceneSpec:
    geo = SensorGeometry(
        w=int(data["geometry"]["w"]), h=int(data["geometry"]["h"])
    )
    box_data = data["initial_box"]
    initial_box = OrientedBox(
        cx=float(box_data["cx"]),
        cy=float(box_data["cy"]),
        w=float(box_data["w"]),
        h=float(box_data["h"]),
        angle=math.radians(float(box_data.get("angle_deg", 0.0))),
    )
    motion = [
        Transform5Dof(
            dx=float(m[0]),
            dy=float(m[1]),
            theta=math.radians(float(m[2])),
            sx=float(m[3]),
            sy=float(m[4]),
        )
        for m in data["motion"]
    ]
    seed = int(data.get("seed", 0))
    texture_spec = data["texture"]
    texture = make_texture(texture_spec, rng_seed=seed)
    return SceneSpec(
        geometry=geo,
        texture=texture,
        background_level=float(data.get("background_level", 128.0)),
        initial_box=initial_box,
        motion=motion,
        contrast_threshold=float(
            data.get("contrast_threshold", DEFAULT_CONTRAST_THRESHOLD)
        ),
        substeps=int(data.get("substeps", DEFAULT_SUBSTEPS)),
        noise_rate=float(data.get("noise_rate", 0.0)),
        seed=seed,
        window_ns=int(data.get("window_ns", DEFAULT_WINDOW_NS)),
        texture_spec=texture_spec,
    )


def load_scene(path: Union[str, Path]) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))


def save_scene(scene: SceneSpec, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2, sort_keys=True)
        fh.write("\n")
