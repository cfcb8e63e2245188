"""Event-camera object motion estimation toolkit.

Converts asynchronous event streams into synchronous TSLTD frames
(time surfaces with linear time decay), regresses 5-DoF object-level
box transforms (translation, rotation, anisotropic scale) per frame
pair, and scores tracking quality with AOR/AR metrics.  A synthetic
event simulator provides ground truth for end-to-end verification.
"""

from evtrack.events import (
    Event,
    EventArray,
    EventWindow,
    ParseError,
    ParseReport,
    Polarity,
    SensorGeometry,
    parse_event_stream,
    serialize_events,
    window_events,
)
from evtrack.geometry import (
    AlignedBox,
    MotionBounds,
    OrientedBox,
    RawRegression,
    Transform5Dof,
    apply_transform,
    compose_transforms,
    crop_region,
    denormalize,
    enclosing_aligned,
    iou,
    normalize,
    sample_patch,
)
from evtrack.tsltd import (
    TsltdFrame,
    decay_value,
    encode_stream,
    encode_window,
    read_tsltd,
    write_tsltd,
)

__version__ = "0.1.0"
