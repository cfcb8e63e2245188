"""Training-free 5-DoF estimation by coarse-to-fine alignment search.

The estimator builds a template from the first frame's tau-cropped patch
and matches it against the last frame: candidate transforms warp the
template and are scored by normalized cross-correlation over the union of
active pixels.  A full coarse grid over the motion bounds seeds an
iterative local refinement with shrinking steps.  Deterministic; ties
break toward the smaller-magnitude transform.

Because the pattern painted during the first window sits one window ahead
of the pattern painted during the last, the displacement measurable
between the two patches covers (n-1)/n of the full n-window pair motion;
candidates are scaled accordingly before warping, so the returned
transform is directly the pair-level motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import cv2
import numpy as np

from evtrack.estimators import InsufficientEvidenceError
from evtrack.geometry import (
    DEFAULT_TAU,
    AlignedBox,
    MotionBounds,
    Transform5Dof,
    crop_region,
)
from evtrack.tsltd import TsltdFrame


@dataclass(frozen=True)
class SearchConfig:
    """Grid density, refinement schedule, and search bounds.

    The coarse sweep runs on blurred frames at reduced resolution so the
    sparse event ridges gain basin width; refinement scores the original
    frames at full patch resolution.
    """

    coarse_steps: Tuple[int, int, int, int, int] = (7, 7, 5, 3, 3)
    coarse_resolution: int = 10
    coarse_blur_sigma: float = 3.0
    seed_count: int = 5
    screen_resolution: int = 20
    screen_blur_sigma: float = 2.0
    screen_iterations: int = 12
    fine_blur_sigma: float = 1.2
    refine_iterations: int = 16
    refine_shrink: float = 0.5
    refine_min_step_fraction: float = 1.0 / 128.0
    patch_resolution: int = 32
    tau: float = DEFAULT_TAU
    bounds: MotionBounds = field(default_factory=MotionBounds)

    def __post_init__(self) -> None:
        for steps in self.coarse_steps:
            if steps < 3 or steps % 2 == 0:
                raise ValueError(
                    f"coarse grid needs odd step counts >= 3, got {steps}"
                )
        if not 0.0 < self.refine_shrink < 1.0:
            raise ValueError("refine shrink factor must be in (0, 1)")
        if self.bounds.p4 >= 1.0 or self.bounds.p5 >= 1.0:
            raise ValueError("scale bounds >= 1 would allow non-positive scales")


def _combined(frame: TsltdFrame) -> np.ndarray:
    """Summed On+Off activity as float32 (the matching signal)."""
    return (
        frame.values[:, :, 0].astype(np.float32)
        + frame.values[:, :, 1].astype(np.float32)
    )


def _region_has_activity(image: np.ndarray, region: AlignedBox) -> bool:
    """True when any pixel of the region (clipped to the sensor) is active."""
    h, w = image.shape
    x0 = max(0, int(math.floor(region.x_min)))
    y0 = max(0, int(math.floor(region.y_min)))
    x1 = min(w, int(math.ceil(region.x_max)) + 1)
    y1 = min(h, int(math.ceil(region.y_max)) + 1)
    if x1 <= x0 or y1 <= y0:
        return False
    return bool(np.any(image[y0:y1, x0:x1] > 0))


def _grid_points(region: AlignedBox, res: int) -> Tuple[np.ndarray, np.ndarray]:
    xs = (region.x_min + (np.arange(res) + 0.5) * (region.w / res)).astype(
        np.float32
    )
    ys = (region.y_min + (np.arange(res) + 0.5) * (region.h / res)).astype(
        np.float32
    )
    return np.meshgrid(xs, ys)


def _sample(image: np.ndarray, map_x: np.ndarray, map_y: np.ndarray) -> np.ndarray:
    return cv2.remap(
        image,
        map_x,
        map_y,
        interpolation=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0.0,
    )


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return image
    ksize = 2 * int(math.ceil(2 * sigma)) + 1
    return cv2.GaussianBlur(image, (ksize, ksize), sigma)


def _candidate_matrices(
    params: np.ndarray,
    center: Tuple[float, float],
    span_fraction: float,
) -> np.ndarray:
    """Per-candidate inverse-warp affine matrices, shape (K, 3, 2).

    params is (K, 5) rows (dx, dy, theta, sx, sy) of pair-level motion; the
    warp applies the span-scaled motion about the region center: a point p
    of the first pattern appears at c + f*d + R(f*theta) S_f (p - c) in the
    last pattern, so the template is sampled at the inverse of that map:
    p = c + S_f^-1 R(-f*theta) (q - c - f*d).
    """
    f = span_fraction
    dx = params[:, 0] * f
    dy = params[:, 1] * f
    theta = params[:, 2] * f
    inv_sx = params[:, 3] ** -f
    inv_sy = params[:, 4] ** -f
    cx, cy = center
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    # row-vector convention: [qx, qy, 1] @ M -> [px, py]
    m = np.empty((params.shape[0], 3, 2), dtype=np.float32)
    m[:, 0, 0] = cos_t * inv_sx
    m[:, 1, 0] = sin_t * inv_sx
    m[:, 0, 1] = -sin_t * inv_sy
    m[:, 1, 1] = cos_t * inv_sy
    ox = -(cx + dx)
    oy = -(cy + dy)
    m[:, 2, 0] = (ox * cos_t + oy * sin_t) * inv_sx + cx
    m[:, 2, 1] = (-ox * sin_t + oy * cos_t) * inv_sy + cy
    return m


def _ncc_from_stats(
    s_ab: np.ndarray,
    s_a: np.ndarray,
    s_aa: np.ndarray,
    s_b: float,
    s_bb: float,
    m: np.ndarray,
    min_support: np.ndarray | float,
) -> np.ndarray:
    """Normalized cross-correlation from sufficient statistics.

    m is the pixel count the statistics range over (per candidate for the
    active-union mask, constant for full-patch scoring).  Degenerate
    supports or zero variance score -1.
    """
    safe_m = np.maximum(m, 1.0)
    cov = s_ab - s_a * np.float32(s_b) / safe_m
    var_a = s_aa - s_a * s_a / safe_m
    var_b = np.float32(s_bb) - np.float32(s_b) ** 2 / safe_m
    valid = (m >= min_support) & (var_a > 1e-10) & (var_b > 1e-10)
    with np.errstate(divide="ignore", invalid="ignore"):
        ncc = cov / np.sqrt(var_a * var_b)
    return np.where(valid, ncc, np.float32(-1.0)).astype(np.float64)


def _magnitude_keys(params: np.ndarray) -> List[np.ndarray]:
    return [
        np.abs(params[:, 0]),
        np.abs(params[:, 1]),
        np.abs(params[:, 2]),
        np.abs(params[:, 3] - 1.0),
        np.abs(params[:, 4] - 1.0),
    ]


def _best_index(scores: np.ndarray, params: np.ndarray) -> int:
    """Highest score; exact ties go to the smaller-magnitude transform."""
    keys = _magnitude_keys(params)
    order = np.lexsort(
        (keys[4], keys[3], keys[2], keys[1], keys[0], -scores)
    )
    return int(order[0])


class _Scorer:
    """Scores batches of candidate transforms against one frame pair."""

    def __init__(
        self,
        source: np.ndarray,
        target: np.ndarray,
        region: AlignedBox,
        span_fraction: float,
        resolution: int,
    ) -> None:
        self.source = source
        self.center = (region.cx, region.cy)
        self.span_fraction = span_fraction
        self.res = resolution
        self.gx, self.gy = _grid_points(region, resolution)
        npts = resolution * resolution
        # (3, npts) so candidate maps come out of one GEMM per axis,
        # already contiguous in the layout remap wants
        self.grid_t = np.ascontiguousarray(
            np.stack(
                [
                    self.gx.reshape(npts),
                    self.gy.reshape(npts),
                    np.ones(npts, dtype=np.float32),
                ]
            )
        )
        b = _sample(target, self.gx, self.gy).reshape(-1)
        b_active = (b > 0).astype(np.float32)
        ones = np.ones_like(b)
        self.red_ab = np.ascontiguousarray(np.stack([b, ones], axis=1))
        self.red_n = np.ascontiguousarray(np.stack([ones, b_active], axis=1))
        self.n_b = float(b_active.sum())
        self.s_b = float(b.sum())
        self.s_bb = float(np.dot(b, b))

    def _warp(self, params: np.ndarray) -> np.ndarray:
        k = params.shape[0]
        mats = _candidate_matrices(params, self.center, self.span_fraction)
        xs = mats[:, :, 0] @ self.grid_t  # (K, npts)
        ys = mats[:, :, 1] @ self.grid_t
        # remap caps map dimensions at SHRT_MAX; chunk the candidate stack
        chunk = max(1, 32000 // self.res)
        parts = []
        for start in range(0, k, chunk):
            stop = min(k, start + chunk)
            rows = (stop - start) * self.res
            parts.append(
                _sample(
                    self.source,
                    xs[start:stop].reshape(rows, self.res),
                    ys[start:stop].reshape(rows, self.res),
                )
            )
        if len(parts) == 1:
            return parts[0].reshape(k, -1)
        return np.concatenate(parts).reshape(k, self.res * self.res)

    def scores(self, params: np.ndarray) -> np.ndarray:
        """Official score: NCC over the union of active pixels."""
        a = self._warp(params)
        sums = a @ self.red_ab  # columns: sum(a*b), sum(a)
        counts = np.sign(a) @ self.red_n  # columns: |a>0|, |a>0 and b>0|
        m = counts[:, 0] + np.float32(self.n_b) - counts[:, 1]
        s_aa = np.einsum("kp,kp->k", a, a)
        return _ncc_from_stats(
            sums[:, 0], sums[:, 1], s_aa, self.s_b, self.s_bb, m, 8.0
        )

    def scores_full(self, params: np.ndarray) -> np.ndarray:
        """Seeding score: NCC over the whole patch (zeros count).

        Robust for ranking distant candidates, where small active unions
        make the masked score spuriously optimistic.
        """
        a = self._warp(params)
        sums = a @ self.red_ab
        s_aa = np.einsum("kp,kp->k", a, a)
        npts = np.float32(a.shape[1])
        return _ncc_from_stats(
            sums[:, 0], sums[:, 1], s_aa, self.s_b, self.s_bb, npts, 8.0
        )


def _coarse_grid(cfg: SearchConfig) -> np.ndarray:
    b = cfg.bounds
    axes = [
        np.linspace(-b.p1, b.p1, cfg.coarse_steps[0]),
        np.linspace(-b.p2, b.p2, cfg.coarse_steps[1]),
        np.linspace(-math.radians(b.p3), math.radians(b.p3), cfg.coarse_steps[2]),
        1.0 + np.linspace(-b.p4, b.p4, cfg.coarse_steps[3]),
        1.0 + np.linspace(-b.p5, b.p5, cfg.coarse_steps[4]),
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _clip_params(params: np.ndarray, bounds: MotionBounds) -> np.ndarray:
    out = params.copy()
    out[:, 0] = np.clip(out[:, 0], -bounds.p1, bounds.p1)
    out[:, 1] = np.clip(out[:, 1], -bounds.p2, bounds.p2)
    theta_max = math.radians(bounds.p3)
    out[:, 2] = np.clip(out[:, 2], -theta_max, theta_max)
    out[:, 3] = np.clip(out[:, 3], 1.0 - bounds.p4, 1.0 + bounds.p4)
    out[:, 4] = np.clip(out[:, 4], 1.0 - bounds.p5, 1.0 + bounds.p5)
    return out


# translation and in-place scaling move the same edges, so those pairs
# form diagonal valleys that axis-only probes stall in
_DIAGONAL_PAIRS = ((0, 3), (1, 4))


def _probe_set(current: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Axis probes +-step per dimension plus diagonal probes for the
    translation/scale couplings: 18 candidates."""
    candidates = np.repeat(current[None, :], 18, axis=0)
    for dim in range(5):
        candidates[2 * dim, dim] += steps[dim]
        candidates[2 * dim + 1, dim] -= steps[dim]
    row = 10
    for d1, d2 in _DIAGONAL_PAIRS:
        for sign1, sign2 in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            candidates[row, d1] += sign1 * steps[d1]
            candidates[row, d2] += sign2 * steps[d2]
            row += 1
    return candidates


def _pattern_search(
    scorer: "_Scorer",
    start: np.ndarray,
    start_score: float,
    steps: np.ndarray,
    min_steps: np.ndarray,
    iterations: int,
    shrink: float,
    bounds: MotionBounds,
) -> Tuple[np.ndarray, float]:
    """Compass search: probe the step set, shrink all steps on a stall."""
    current = start.copy()
    current_score = start_score
    for _ in range(iterations):
        candidates = _clip_params(_probe_set(current, steps), bounds)
        scores = scorer.scores(candidates)
        best = _best_index(scores, candidates)
        if scores[best] > current_score:
            current = candidates[best].copy()
            current_score = float(scores[best])
        else:
            steps = steps * shrink
            if np.all(steps < min_steps):
                break
    return current, current_score


def _screen_seeds(
    scorer: "_Scorer",
    seeds: np.ndarray,
    steps0: np.ndarray,
    iterations: int,
    shrink: float,
    bounds: MotionBounds,
) -> Tuple[np.ndarray, np.ndarray]:
    """Short compass search over all seeds at once (one batch per step).

    Each seed keeps its own step sizes; ties inside a seed's probe set go
    to the first (deterministic argmax).
    """
    k = seeds.shape[0]
    current = seeds.copy()
    scores = scorer.scores(current)
    steps = np.repeat(steps0[None, :], k, axis=0)
    rows = np.arange(k)
    for _ in range(iterations):
        candidates = np.repeat(current[:, None, :], 10, axis=1)
        for dim in range(5):
            candidates[:, 2 * dim, dim] += steps[:, dim]
            candidates[:, 2 * dim + 1, dim] -= steps[:, dim]
        flat = _clip_params(candidates.reshape(k * 10, 5), bounds)
        probe = scorer.scores(flat).reshape(k, 10)
        best = np.argmax(probe, axis=1)
        best_scores = probe[rows, best]
        improved = best_scores > scores
        chosen = flat.reshape(k, 10, 5)[rows, best]
        current[improved] = chosen[improved]
        scores[improved] = best_scores[improved]
        steps[~improved] *= shrink
    return current, scores


def estimate(
    frames: Sequence[TsltdFrame],
    box: AlignedBox,
    cfg: SearchConfig = SearchConfig(),
) -> Transform5Dof:
    """Estimate the pair-level transform from the first and last frames.

    Raises :class:`InsufficientEvidenceError` when the template patch has
    no active pixels.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames to estimate motion")
    n = len(frames)
    span_fraction = (n - 1) / n
    region = crop_region(box, cfg.tau)
    source = _combined(frames[0])
    target = _combined(frames[-1])

    if not _region_has_activity(source, region):
        raise InsufficientEvidenceError(
            "template patch has no active pixels"
        )
    fine = _Scorer(
        _blur(source, cfg.fine_blur_sigma),
        _blur(target, cfg.fine_blur_sigma),
        region,
        span_fraction,
        cfg.patch_resolution,
    )
    coarse = _Scorer(
        _blur(source, cfg.coarse_blur_sigma),
        _blur(target, cfg.coarse_blur_sigma),
        region,
        span_fraction,
        cfg.coarse_resolution,
    )
    screen = _Scorer(
        _blur(source, cfg.screen_blur_sigma),
        _blur(target, cfg.screen_blur_sigma),
        region,
        span_fraction,
        cfg.screen_resolution,
    )

    b = cfg.bounds
    spans = np.array(
        [2 * b.p1, 2 * b.p2, 2 * math.radians(b.p3), 2 * b.p4, 2 * b.p5]
    )
    initial_steps = spans / (np.array(cfg.coarse_steps) - 1) / 2.0
    min_steps = initial_steps * cfg.refine_min_step_fraction

    # seeding: rank the grid by full-patch NCC (robust for far candidates),
    # then give the best few seeds a short batched local search before
    # committing to one basin; the identity always joins the seed set so
    # small motions cannot lose to a distant spurious peak
    grid = _coarse_grid(cfg)
    coarse_scores = coarse.scores_full(grid)
    top = np.argsort(-coarse_scores, kind="stable")[: cfg.seed_count]
    identity = np.array([[0.0, 0.0, 0.0, 1.0, 1.0]])
    seed_grid = np.vstack([grid[top], identity])
    seeds, seed_scores = _screen_seeds(
        screen, seed_grid, initial_steps / 2.0, cfg.screen_iterations,
        cfg.refine_shrink, b,
    )
    current = seeds[_best_index(seed_scores, seeds)].copy()

    current_score = float(fine.scores(current[None])[0])
    # two descent phases: the second re-expands the steps, which escapes
    # shallow stalls in coupled valleys (e.g. translation vs. scale)
    for phase_steps, iters in (
        (initial_steps / 2.0, cfg.refine_iterations),
        (initial_steps / 8.0, cfg.refine_iterations // 2),
    ):
        current, current_score = _pattern_search(
            fine, current, current_score, phase_steps, min_steps,
            iters, cfg.refine_shrink, b,
        )

    # never return something that scores below standing still; score gaps
    # inside the NCC noise floor count as ties and resolve to the identity
    identity = np.array([[0.0, 0.0, 0.0, 1.0, 1.0]])
    identity_score = float(fine.scores(identity)[0])
    if current_score <= identity_score + 1e-6:
        current = identity[0].copy()

    return Transform5Dof(
        dx=float(current[0]),
        dy=float(current[1]),
        theta=float(current[2]),
        sx=float(current[3]),
        sy=float(current[4]),
    )


class SearchEstimator:
    """Callable estimator wrapper around :func:`estimate`."""

    def __init__(self, cfg: SearchConfig | None = None) -> None:
        self.cfg = cfg or SearchConfig()

    def __call__(
        self, frames: Sequence[TsltdFrame], box: AlignedBox
    ) -> Transform5Dof:
        return estimate(frames, box, self.cfg)
