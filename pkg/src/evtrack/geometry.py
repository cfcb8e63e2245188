"""5-DoF box transform algebra, oriented/aligned boxes, patches, and IoU.

The motion model is a quintet (dx, dy, theta, sx, sy): translation of the
box center, in-place rotation, and in-place anisotropic scaling (rotation
and scaling keep the translated center fixed).  Regression heads emit
components in [-1, 1]; a per-component bound vector converts those raw
values to pixel/degree/scale units and back.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from evtrack.tsltd import TsltdFrame

#: Default crop enlargement so a patch captures the full motion pattern.
DEFAULT_TAU = 1.2

#: Default patch edge length fed to estimators.
PATCH_SIZE = 64


@dataclass(frozen=True)
class Transform5Dof:
    """Box transform: translation (px), rotation (rad), anisotropic scale."""

    dx: float = 0.0
    dy: float = 0.0
    theta: float = 0.0
    sx: float = 1.0
    sy: float = 1.0

    def __post_init__(self) -> None:
        if self.sx <= 0 or self.sy <= 0:
            raise ValueError(f"scales must be positive, got ({self.sx}, {self.sy})")

    @classmethod
    def identity(cls) -> "Transform5Dof":
        return cls()

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.dx, self.dy, self.theta, self.sx, self.sy)

    def magnitude_key(self) -> Tuple[float, float, float, float, float]:
        """Lexicographic tie-break key: smaller motions sort first."""
        return (
            abs(self.dx),
            abs(self.dy),
            abs(self.theta),
            abs(self.sx - 1.0),
            abs(self.sy - 1.0),
        )

    def scaled(self, fraction: float) -> "Transform5Dof":
        """Fractional transform: linear in dx/dy/theta, geometric in scales.

        scaled(1/n) applied n times composes back to the original.
        """
        return Transform5Dof(
            dx=self.dx * fraction,
            dy=self.dy * fraction,
            theta=self.theta * fraction,
            sx=self.sx**fraction,
            sy=self.sy**fraction,
        )


@dataclass(frozen=True)
class RawRegression:
    """Normalized motion components, each in [-1, 1]."""

    e1: float
    e2: float
    e3: float
    e4: float
    e5: float

    def __post_init__(self) -> None:
        for name, value in zip(("e1", "e2", "e3", "e4", "e5"), self.as_tuple()):
            if not -1.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [-1, 1]")

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.e1, self.e2, self.e3, self.e4, self.e5)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "RawRegression":
        e1, e2, e3, e4, e5 = (float(x) for x in arr)
        return cls(e1, e2, e3, e4, e5)


@dataclass(frozen=True)
class MotionBounds:
    """Per-component motion limits: p1/p2 px, p3 degrees, p4/p5 scale spans.

    Defaults (72, 54, 30, 0.2, 0.2) cover most object motions on a
    240x180 sensor, including fast movements.
    """

    p1: float = 72.0
    p2: float = 54.0
    p3: float = 30.0
    p4: float = 0.2
    p5: float = 0.2

    def __post_init__(self) -> None:
        if min(self.p1, self.p2, self.p3, self.p4, self.p5) <= 0:
            raise ValueError("all motion bounds must be positive")


@dataclass(frozen=True)
class AlignedBox:
    """Axis-aligned box: center (cx, cy) and positive extents (w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got {self.w}x{self.h}")

    @property
    def x_min(self) -> float:
        return self.cx - self.w / 2

    @property
    def x_max(self) -> float:
        return self.cx + self.w / 2

    @property
    def y_min(self) -> float:
        return self.cy - self.h / 2

    @property
    def y_max(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_oriented(self) -> "OrientedBox":
        return OrientedBox(self.cx, self.cy, self.w, self.h, 0.0)


@dataclass(frozen=True)
class OrientedBox:
    """Box with center, extents, and rotation angle in radians.

    The angle rotates the box axes in image coordinates (y down), so a
    positive angle appears clockwise on screen.
    """

    cx: float
    cy: float
    w: float
    h: float
    angle: float = 0.0

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got {self.w}x{self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        """Corner coordinates (4, 2) in counter-rotation order."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw, hh = self.w / 2, self.h / 2
        local = np.array(
            [[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]], dtype=np.float64
        )
        rot = np.array([[c, -s], [s, c]], dtype=np.float64)
        return local @ rot.T + np.array([self.cx, self.cy])

    def is_axis_aligned(self, tol: float = 1e-12) -> bool:
        half_turns = self.angle / (math.pi / 2)
        return abs(half_turns - round(half_turns)) <= tol

    def to_aligned(self) -> AlignedBox:
        """Drop the angle (exact only for axis-aligned boxes)."""
        return AlignedBox(self.cx, self.cy, self.w, self.h)


def denormalize(raw: RawRegression, bounds: MotionBounds) -> Transform5Dof:
    """Map normalized components to a physical transform.

    dx = e1*p1, dy = e2*p2, theta = e3*p3 degrees (returned in radians),
    sx = 1 + e4*p4, sy = 1 + e5*p5.
    """
    return Transform5Dof(
        dx=raw.e1 * bounds.p1,
        dy=raw.e2 * bounds.p2,
        theta=(raw.e3 * bounds.p3) * math.pi / 180.0,
        sx=1.0 + raw.e4 * bounds.p4,
        sy=1.0 + raw.e5 * bounds.p5,
    )


def normalize(
    t: Transform5Dof, bounds: MotionBounds
) -> Tuple[RawRegression, bool]:
    """Inverse of :func:`denormalize`; clips to [-1, 1] and flags clipping."""
    raw = [
        t.dx / bounds.p1,
        t.dy / bounds.p2,
        (t.theta * 180.0 / math.pi) / bounds.p3,
        (t.sx - 1.0) / bounds.p4,
        (t.sy - 1.0) / bounds.p5,
    ]
    clipped = any(v < -1.0 or v > 1.0 for v in raw)
    raw = [min(1.0, max(-1.0, v)) for v in raw]
    return RawRegression.from_array(raw), clipped


def apply_transform(box: OrientedBox, t: Transform5Dof) -> OrientedBox:
    """Transform a box: translate the center, then rotate and scale in place.

    Rotation adds to the box angle; scales act along the box's own axes
    (exact for upright boxes, the chosen convention for pre-rotated ones).
    """
    return OrientedBox(
        cx=box.cx + t.dx,
        cy=box.cy + t.dy,
        w=box.w * t.sx,
        h=box.h * t.sy,
        angle=box.angle + t.theta,
    )


def compose_transforms(transforms: Sequence[Transform5Dof]) -> Transform5Dof:
    """Sequential composition on a center-tracked box.

    Translations and angles add; scales multiply.  Applying the result
    equals applying the sequence in order.
    """
    dx = dy = theta = 0.0
    sx = sy = 1.0
    for t in transforms:
        dx += t.dx
        dy += t.dy
        theta += t.theta
        sx *= t.sx
        sy *= t.sy
    return Transform5Dof(dx, dy, theta, sx, sy)


def transform_between(before: OrientedBox, after: OrientedBox) -> Transform5Dof:
    """Recover the quintet mapping one box onto another."""
    return Transform5Dof(
        dx=after.cx - before.cx,
        dy=after.cy - before.cy,
        theta=after.angle - before.angle,
        sx=after.w / before.w,
        sy=after.h / before.h,
    )


def crop_region(
    box: AlignedBox, tau: float = DEFAULT_TAU, geometry=None
) -> AlignedBox:
    """Enlarge a box by tau about its center for patch cropping.

    No clamping to the sensor: out-of-sensor area is zero-padded when the
    patch is sampled.
    """
    if tau < 1.0:
        raise ValueError(f"crop factor must be >= 1, got {tau}")
    return AlignedBox(box.cx, box.cy, box.w * tau, box.h * tau)


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a 2-D array at continuous coordinates.

    Values live at integer lattice points; samples whose neighbors fall
    outside the array treat the missing neighbors as 0.
    """
    h, w = image.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def fetch(yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(valid, vals, 0.0)

    v00 = fetch(y0, x0)
    v01 = fetch(y0, x1)
    v10 = fetch(y1, x0)
    v11 = fetch(y1, x1)
    return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)


def region_grid(region: AlignedBox, out_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Cell-center sample coordinates of a region on an out_size grid."""
    step_x = region.w / out_size
    step_y = region.h / out_size
    xs = region.x_min + (np.arange(out_size) + 0.5) * step_x
    ys = region.y_min + (np.arange(out_size) + 0.5) * step_y
    return np.meshgrid(xs, ys)


def sample_patch(
    frame: TsltdFrame, region: AlignedBox, out_size: int = PATCH_SIZE
) -> np.ndarray:
    """Resample a frame region to (out_size, out_size, 2) floats in [0, 1].

    Bilinear sampling per channel; out-of-sensor samples are 0; values are
    scaled by 1/255.
    """
    gx, gy = region_grid(region, out_size)
    out = np.empty((out_size, out_size, 2), dtype=np.float64)
    for ch in range(2):
        out[:, :, ch] = bilinear_sample(
            frame.values[:, :, ch].astype(np.float64), gx, gy
        )
    return out / 255.0


def enclosing_aligned(box: OrientedBox) -> AlignedBox:
    """Minimum axis-aligned box containing all four corners."""
    corners = box.corners()
    x_min, y_min = corners.min(axis=0)
    x_max, y_max = corners.max(axis=0)
    return AlignedBox(
        cx=(x_min + x_max) / 2,
        cy=(y_min + y_max) / 2,
        w=x_max - x_min,
        h=y_max - y_min,
    )


def _polygon_area(points: np.ndarray) -> float:
    """Shoelace area (absolute) of a polygon given as (n, 2) vertices."""
    if len(points) < 3:
        return 0.0
    x = points[:, 0]
    y = points[:, 1]
    return 0.5 * abs(
        float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))
    )


def _clip_polygon(subject: List[np.ndarray], clipper: np.ndarray) -> List[np.ndarray]:
    """Sutherland-Hodgman clip of a convex polygon by a convex clipper.

    The clipper vertices must wind consistently; points on the boundary
    count as inside.
    """
    # Ensure counter-clockwise winding of the clipper (positive signed area).
    x = clipper[:, 0]
    y = clipper[:, 1]
    signed = 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))
    if signed < 0:
        clipper = clipper[::-1]

    output = subject
    n = len(clipper)
    for i in range(n):
        if not output:
            return []
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = b - a
        input_pts = output
        output = []

        def inside(p: np.ndarray) -> bool:
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0.0

        m = len(input_pts)
        for j in range(m):
            cur = input_pts[j]
            nxt = input_pts[(j + 1) % m]
            cur_in = inside(cur)
            nxt_in = inside(nxt)
            if cur_in:
                output.append(cur)
            if cur_in != nxt_in:
                d = nxt - cur
                denom = edge[0] * d[1] - edge[1] * d[0]
                if denom != 0.0:
                    s = (edge[0] * (a[1] - cur[1]) - edge[1] * (a[0] - cur[0])) / denom
                    output.append(cur + s * d)
    return output


Box = Union[AlignedBox, OrientedBox]


def _aligned_intersection(a: AlignedBox, b: AlignedBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    return ix * iy


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Aligned pairs use interval arithmetic; any rotated operand goes through
    convex polygon clipping plus the shoelace area formula.
    """

    def aligned_or_none(box: Box) -> AlignedBox | None:
        if isinstance(box, AlignedBox):
            return box
        if box.is_axis_aligned():
            # quarter-turn multiples stay rectangles with swapped extents
            quarter = round(box.angle / (math.pi / 2)) % 2
            if quarter == 0:
                return AlignedBox(box.cx, box.cy, box.w, box.h)
            return AlignedBox(box.cx, box.cy, box.h, box.w)
        return None

    a_al = aligned_or_none(a)
    b_al = aligned_or_none(b)
    if a_al is not None and b_al is not None:
        inter = _aligned_intersection(a_al, b_al)
        union = a_al.area + b_al.area - inter
        return inter / union if union > 0 else 0.0

    a_or = a.to_oriented() if isinstance(a, AlignedBox) else a
    b_or = b.to_oriented() if isinstance(b, AlignedBox) else b
    subject = [p for p in a_or.corners()]
    clipped = _clip_polygon(subject, b_or.corners())
    inter = _polygon_area(np.array(clipped)) if clipped else 0.0
    union = a_or.area + b_or.area - inter
    return inter / union if union > 0 else 0.0


# --- box CSV interchange -------------------------------------------------

BOX_CSV_HEADER = ["frame", "obj", "cx", "cy", "w", "h", "angle_deg"]


def write_box_csv(
    rows: Sequence[Tuple[int, int, OrientedBox]], path: Union[str, Path]
) -> None:
    """Write (frame, obj, box) rows; angle stored in degrees, repr precision."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BOX_CSV_HEADER)
        for frame_idx, obj_idx, box in rows:
            writer.writerow(
                [
                    frame_idx,
                    obj_idx,
                    repr(box.cx),
                    repr(box.cy),
                    repr(box.w),
                    repr(box.h),
                    repr(math.degrees(box.angle)),
                ]
            )


def read_box_csv(path: Union[str, Path]) -> List[Tuple[int, int, OrientedBox]]:
    """Read rows written by :func:`write_box_csv` (angle 0 = axis-aligned)."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != BOX_CSV_HEADER:
            raise ValueError(f"bad box CSV header: {header}")
        for record in reader:
            if not record:
                continue
            frame_idx, obj_idx = int(record[0]), int(record[1])
            cx, cy, w, h, angle_deg = (float(x) for x in record[2:7])
            rows.append(
                (frame_idx, obj_idx, OrientedBox(cx, cy, w, h, math.radians(angle_deg)))
            )
    return rows
