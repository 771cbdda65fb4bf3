"""Synthetic gait silhouettes, binary morphology and cloth augmentation.

The walker is a small articulated body (head, torso, two arms, two legs)
posed in 3D and projected orthographically for a camera at ``view_deg``
(0 = frontal, 90 = lateral, 180 = back).  Identity lives in the body
proportions, stride/arm swing and a mild left/right asymmetry; the CL
condition renders the same walker with every upper-body part thickened
by the subject's coat delta plus a coat skirt over the thighs.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

HEIGHT = 64
WIDTH = 44
CONDITIONS = ("NM", "BG", "CL")

# Edited-boundary ranges for 64-row silhouettes (inclusive sampling ranges).
UPPER_BOUND = (14, 18)
MIDDLE_BOUND = (38, 42)
BOTTOM_BOUND = (60, 64)
UPPER_KERNEL = 5
LOWER_KERNEL = 2

REGIONS = ("upper", "bottom", "whole")
OPS = ("dilate", "erode")


class SpecError(ValueError):
    """Invalid generator or augmentation parameters."""


@dataclass
class GaitSequence:
    seq_id: str
    subject_id: int
    condition: str
    view_deg: int
    frames: np.ndarray  # (T, H, W) bool
    seq_index: int = 1  # 1-based sequence number within (subject, condition, view)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3 or frames.shape[0] == 0:
            raise SpecError(f"{self.seq_id}: frames must be a nonempty (T, H, W) stack")
        self.frames = frames.astype(bool, copy=False)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def with_frames(self, frames) -> "GaitSequence":
        return dataclasses.replace(self, frames=frames)


@dataclass
class SynthSpec:
    n_subjects: int = 40
    conditions: tuple = ("NM", "CL")
    views: tuple = (0, 45, 90, 135, 180)
    seqs_per_cell: int = 2
    n_frames: int = 30
    seed: int = 0
    first_subject_id: int = 1
    # body-shape parameter ranges, in pixels unless noted
    shoulder_half: tuple = (4.5, 10.0)
    torso_depth_half: tuple = (3.0, 5.5)
    hip_half: tuple = (2.5, 4.5)
    leg_radius: tuple = (1.4, 2.6)
    arm_radius: tuple = (1.0, 1.8)
    head_radius: tuple = (3.0, 5.5)
    neck_row: tuple = (9.0, 17.0)
    hip_row: tuple = (31.0, 41.0)
    stride: tuple = (4.0, 12.0)
    arm_swing: tuple = (2.0, 6.0)
    period: tuple = (18, 28)  # frames per gait cycle
    coat_delta: tuple = (1.5, 3.0)
    bag_size: tuple = (3.0, 5.0)
    jitter_px: float = 0.0  # per-sequence horizontal offset range (0 = centred)

    def validate(self):
        for name in ("n_subjects", "seqs_per_cell", "n_frames"):
            if int(getattr(self, name)) < 1:
                raise SpecError(f"{name} must be >= 1")
        if not self.conditions:
            raise SpecError("conditions must be nonempty")
        for c in self.conditions:
            if c not in CONDITIONS:
                raise SpecError(f"conditions: unknown condition {c!r}")
        if len(set(self.conditions)) != len(self.conditions):
            raise SpecError("conditions: duplicates")
        if not self.views:
            raise SpecError("views must be nonempty")
        for v in self.views:
            if not 0 <= int(v) <= 180:
                raise SpecError(f"views: {v} outside [0, 180]")
        if len(set(self.views)) != len(self.views):
            raise SpecError("views: duplicates")
        for name in ("shoulder_half", "torso_depth_half", "hip_half", "leg_radius",
                     "arm_radius", "head_radius", "neck_row", "hip_row", "stride",
                     "arm_swing", "period", "coat_delta", "bag_size"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise SpecError(f"{name}: low > high")
            if lo < 0:
                raise SpecError(f"{name}: negative range")
        if self.coat_delta[0] <= 0:
            raise SpecError("coat_delta: must be > 0 so CL differs from NM")
        if self.period[0] < 2:
            raise SpecError("period: must be >= 2 frames")


@dataclass(frozen=True)
class Body:
    """Identity-level shape of one synthetic subject."""

    shoulder_half: float
    torso_depth_half: float
    hip_half: float
    leg_radius: float
    arm_radius: float
    head_radius: float
    neck_row: float
    hip_row: float
    stride: float
    arm_swing: float
    period: float
    coat_delta: float
    bag_size: float
    lean: float  # forward lean of the torso, px at the neck
    asym: float  # extra lateral offset of the right arm


def sample_body(spec: SynthSpec, rng: np.random.Generator) -> Body:
    u = lambda r: float(rng.uniform(*r))  # noqa: E731
    return Body(
        shoulder_half=u(spec.shoulder_half),
        torso_depth_half=u(spec.torso_depth_half),
        hip_half=u(spec.hip_half),
        leg_radius=u(spec.leg_radius),
        arm_radius=u(spec.arm_radius),
        head_radius=u(spec.head_radius),
        neck_row=u(spec.neck_row),
        hip_row=u(spec.hip_row),
        stride=u(spec.stride),
        arm_swing=u(spec.arm_swing),
        period=u(spec.period),
        coat_delta=u(spec.coat_delta),
        bag_size=u(spec.bag_size),
        lean=float(rng.uniform(-1.5, 2.5)),
        asym=float(rng.uniform(0.0, 2.5)),
    )


_ROWS, _COLS = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float64)


def _capsule(out, y0, u0, y1, u1, r):
    # OR a thick segment (y0,u0)-(y1,u1) of radius r into out
    dy, du = y1 - y0, u1 - u0
    L2 = dy * dy + du * du
    if L2 == 0:
        t = 0.0
    else:
        t = np.clip(((_ROWS - y0) * dy + (_COLS - u0) * du) / L2, 0.0, 1.0)
    d2 = (_ROWS - (y0 + t * dy)) ** 2 + (_COLS - (u0 + t * du)) ** 2
    out |= d2 <= r * r


def _ellipse(out, yc, uc, ry, ru):
    out |= ((_ROWS - yc) / ry) ** 2 + ((_COLS - uc) / ru) ** 2 <= 1.0


def render_frame(body: Body, view_deg: float, phase: float, condition: str = "NM",
                 offset: float = 0.0) -> np.ndarray:
    """Render one 64x44 silhouette of ``body`` at gait ``phase`` (radians)."""
    th = math.radians(view_deg)
    c, s = math.cos(th), math.sin(th)
    cx = WIDTH / 2.0 + offset

    def proj(x, z):
        # x: body-lateral (right positive), z: walking direction
        return cx + x * c + z * s

    coat = condition == "CL"
    d = body.coat_delta if coat else 0.0
    out = np.zeros((HEIGHT, WIDTH), dtype=bool)
    foot_row = HEIGHT - 1.5
    head_c = body.neck_row - body.head_radius + 0.5
    bob = 0.6 * abs(math.sin(phase))

    # head, leaning with the torso
    _ellipse(out, head_c + bob, proj(0.0, body.lean), body.head_radius * 1.1,
             body.head_radius)
    _capsule(out, body.neck_row - 1 + bob, proj(0.0, body.lean), body.neck_row + 2 + bob,
             proj(0.0, body.lean), 1.3)

    # torso: stack of elliptical cross-sections projected to a horizontal run
    rows = np.arange(int(body.neck_row + 1), int(body.hip_row + 1))
    for y in rows:
        f = (y - body.neck_row) / max(body.hip_row - body.neck_row, 1.0)
        hx = (body.shoulder_half * (1 - f) + body.hip_half * 1.15 * f) + d
        hz = body.torso_depth_half + d
        half = math.sqrt((hx * c) ** 2 + (hz * s) ** 2)
        centre = proj(0.0, body.lean * (1 - f))
        lo = int(math.floor(centre - half + 0.5))
        hi = int(math.floor(centre + half + 0.5))
        yy = int(y + bob)
        if 0 <= yy < HEIGHT:
            out[yy, max(lo, 0):max(min(hi + 1, WIDTH), 0)] = True

    # legs
    leg_len = foot_row - body.hip_row
    for side, sgn in ((1.0, 1.0), (-1.0, -1.0)):
        swing = sgn * body.stride * math.sin(phase)
        lift = max(0.0, sgn * math.cos(phase)) * 1.5
        hip_x = side * body.hip_half
        knee_y = body.hip_row + 0.5 * leg_len
        knee_z = 0.5 * swing + 0.8 * max(0.0, sgn * math.cos(phase))
        _capsule(out, body.hip_row + bob, proj(hip_x, 0.0), knee_y + bob - lift * 0.5,
                 proj(hip_x, knee_z), body.leg_radius * 1.15)
        _capsule(out, knee_y + bob - lift * 0.5, proj(hip_x, knee_z), foot_row - lift,
                 proj(hip_x, swing), body.leg_radius)

    # arms swing opposite to the legs
    sh_row = body.neck_row + 2.0
    arm_len = 0.8 * (body.hip_row - body.neck_row) + 4.0
    for side in (1.0, -1.0):
        swing = -side * body.arm_swing * math.sin(phase)
        x = side * (body.shoulder_half + 0.5 + (body.asym if side > 0 else 0.0))
        _capsule(out, sh_row + bob, proj(x, body.lean), sh_row + arm_len + bob,
                 proj(x + side * 0.8, swing), body.arm_radius + d)

    if coat:
        # skirt of the coat over the thighs
        skirt_end = body.hip_row + 0.35 * leg_len
        hx = body.hip_half + body.leg_radius + d
        hz = body.torso_depth_half + d
        half = math.sqrt((hx * c) ** 2 + (hz * s) ** 2)
        for y in range(int(body.hip_row), int(skirt_end) + 1):
            yy = int(y + bob)
            lo = int(math.floor(cx - half + 0.5))
            hi = int(math.floor(cx + half + 0.5))
            if 0 <= yy < HEIGHT:
                out[yy, max(lo, 0):max(min(hi + 1, WIDTH), 0)] = True
    elif condition == "BG":
        by = body.hip_row - 2.0
        _ellipse(out, by + bob, proj(body.shoulder_half + body.bag_size * 0.6, 0.0),
                 body.bag_size * 1.2, body.bag_size)
    return out


def render_sequence(body: Body, view_deg: float, n_frames: int, phase0: float,
                    condition: str = "NM", offset: float = 0.0,
                    stride_scale: float = 1.0) -> np.ndarray:
    b = dataclasses.replace(body, stride=body.stride * stride_scale)
    step = 2 * math.pi / body.period
    return np.stack([render_frame(b, view_deg, phase0 + t * step, condition, offset)
                     for t in range(n_frames)])


@dataclass
class Manifest:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def make_seq_id(subject_id: int, condition: str, seq_index: int, view_deg: int) -> str:
    return f"{subject_id:03d}-{condition.lower()}-{seq_index:02d}-{view_deg:03d}"


def generate_dataset(spec: SynthSpec):
    """Generate ``n_subjects x |conditions| x |views| x seqs_per_cell`` sequences.

    Deterministic in ``spec.seed``.  Sequence-level nuisance (gait phase,
    horizontal offset, small stride variation) is shared between a
    subject's conditions at the same (view, seq number) so that CL is
    exactly NM with a coat on.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    seqs, manifest = [], Manifest()
    for s in range(spec.n_subjects):
        sid = spec.first_subject_id + s
        body = sample_body(spec, rng)
        for v in spec.views:
            for k in range(1, spec.seqs_per_cell + 1):
                phase0 = float(rng.uniform(0, 2 * math.pi))
                offset = float(rng.uniform(-spec.jitter_px, spec.jitter_px))
                stride_scale = float(rng.uniform(0.93, 1.07))
                for cond in spec.conditions:
                    frames = render_sequence(body, v, spec.n_frames, phase0, cond,
                                             offset, stride_scale)
                    seq = GaitSequence(make_seq_id(sid, cond, k, int(v)), sid, cond,
                                       int(v), frames, k)
                    seqs.append(seq)
    order = sorted(range(len(seqs)), key=lambda i: (seqs[i].subject_id,
                                                    CONDITIONS.index(seqs[i].condition),
                                                    seqs[i].seq_index, seqs[i].view_deg))
    seqs = [seqs[i] for i in order]
    for q in seqs:
        manifest.records.append(dict(seq_id=q.seq_id, subject_id=q.subject_id,
                                     condition=q.condition, view_deg=q.view_deg,
                                     seq_index=q.seq_index, n_frames=q.n_frames,
                                     path=f"seqs/{q.seq_id}"))
    return seqs, manifest


# --------------------------------------------------------------------------
# morphology

def _kernel_offsets(kernel) -> np.ndarray:
    """Offsets (dy, dx) of the ON cells of ``kernel`` relative to its anchor.

    ``kernel`` is either an int side length (square all-ones element) or a
    2D array.  The anchor is cell (k//2, k//2), so even kernels extend one
    cell further towards negative offsets.
    """
    if np.isscalar(kernel):
        k = int(kernel)
        if k < 1:
            raise SpecError("empty kernel")
        kernel = np.ones((k, k), dtype=bool)
    kernel = np.asarray(kernel, dtype=bool)
    if kernel.ndim != 2 or kernel.size == 0 or not kernel.any():
        raise SpecError("empty kernel")
    ay, ax = kernel.shape[0] // 2, kernel.shape[1] // 2
    ys, xs = np.nonzero(kernel)
    return np.stack([ys - ay, xs - ax], axis=1)


def _shift(x, dy, dx):
    # out[..., i, j] = x[..., i + dy, j + dx], zero outside
    out = np.zeros_like(x)
    H, W = x.shape[-2:]
    ys, ye = max(0, -dy), min(H, H - dy)
    xs, xe = max(0, -dx), min(W, W - dx)
    if ys < ye and xs < xe:
        out[..., ys:ye, xs:xe] = x[..., ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def _check_bounds(row_bounds, H):
    r0, r1 = (0, H) if row_bounds is None else (int(row_bounds[0]), int(row_bounds[1]))
    if not (0 <= r0 < r1 <= H):
        raise SpecError(f"row_bounds {row_bounds} outside [0, {H}] or empty")
    return r0, r1


def dilate(frame, kernel=3, row_bounds=None):
    """Binary dilation (zero padding) written back only to rows in ``row_bounds``.

    Works on a single frame (H, W) or a stack (..., H, W).
    """
    x = np.asarray(frame, dtype=bool)
    r0, r1 = _check_bounds(row_bounds, x.shape[-2])
    offs = _kernel_offsets(kernel)
    acc = np.zeros_like(x)
    for dy, dx in offs:
        acc |= _shift(x, -dy, -dx)
    out = x.copy()
    out[..., r0:r1, :] = acc[..., r0:r1, :]
    return out


def erode(frame, kernel=3, row_bounds=None):
    """Binary erosion (zero padding), adjoint of :func:`dilate`."""
    x = np.asarray(frame, dtype=bool)
    r0, r1 = _check_bounds(row_bounds, x.shape[-2])
    offs = _kernel_offsets(kernel)
    acc = np.ones_like(x)
    for dy, dx in offs:
        acc &= _shift(x, dy, dx)
    out = x.copy()
    out[..., r0:r1, :] = acc[..., r0:r1, :]
    return out


# --------------------------------------------------------------------------
# cloth augmentation

@dataclass(frozen=True)
class AugmentOp:
    op: str  # dilate | erode | identity
    region: str  # upper | bottom | whole
    upper: int = 16
    middle: int = 40
    bottom: int = 62
    upper_kernel: int = UPPER_KERNEL
    lower_kernel: int = LOWER_KERNEL

    def __post_init__(self):
        if self.op not in OPS + ("identity",):
            raise SpecError(f"op: {self.op!r}")
        if self.region not in REGIONS:
            raise SpecError(f"region: {self.region!r}")
        if not 0 <= self.upper < self.middle < self.bottom <= HEIGHT:
            raise SpecError("boundaries must satisfy 0 <= upper < middle < bottom <= 64")
        for k in (self.upper_kernel, self.lower_kernel):
            if not 2 <= k <= 9:
                raise SpecError(f"kernel side {k} outside 2..9")

    def segments(self):
        """(row_start, row_end, kernel_side) pieces edited by this op."""
        if self.op == "identity":
            return []
        up = (self.upper, self.middle, self.upper_kernel)
        low = (self.middle, self.bottom, self.lower_kernel)
        return {"upper": [up], "bottom": [low], "whole": [up, low]}[self.region]


def sample_augment_op(rng: np.random.Generator, p_identity: float = 0.0) -> AugmentOp:
    """Draw one of the six dilate/erode x upper/bottom/whole types.

    With probability ``p_identity`` the op is the identity instead.
    """
    if p_identity > 0 and rng.random() < p_identity:
        return AugmentOp("identity", "whole")
    op = OPS[int(rng.random() < 0.5)]
    region = REGIONS[int(rng.integers(3))]
    upper = int(rng.integers(UPPER_BOUND[0], UPPER_BOUND[1] + 1))
    middle = int(rng.integers(MIDDLE_BOUND[0], MIDDLE_BOUND[1] + 1))
    bottom = int(rng.integers(BOTTOM_BOUND[0], BOTTOM_BOUND[1] + 1))
    return AugmentOp(op, region, upper, middle, bottom)


def apply_augment(seq: GaitSequence, aug: AugmentOp) -> GaitSequence:
    frames = seq.frames
    fn = dilate if aug.op == "dilate" else erode
    for r0, r1, k in aug.segments():
        frames = fn(frames, k, (r0, r1))
    return seq.with_frames(frames.copy() if frames is seq.frames else frames)


def cloth_augment(seq: GaitSequence, rng: np.random.Generator,
                  p_identity: float = 0.0) -> GaitSequence:
    """One augmentation type sampled per sequence and applied to every frame."""
    return apply_augment(seq, sample_augment_op(rng, p_identity))
