"""Procedural ground truth: skeleton augmentation, pinhole pairs, toy faces.

Everything here is a pure function of (spec, seed). Each sample is
self-consistent by construction: the task's reconstruction loss evaluated at
the sample's own ground truth is (numerically) zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import ConfigError, CurationError, DomainError
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    EulerAngles,
    FlowField,
    SE3Motion,
    depth_to_pointcloud,
    pixel_grid,
    pointcloud_to_flow,
    rotation_matrix,
)
from .pose import (
    DEFAULT_ROOT_DEPTH,
    JOINT_NAMES,
    N_JOINTS,
    PoseParams,
    ShapeBasis,
    Skeleton3D,
    align_pose_orientation,
    build_pca_basis,
    decode_shape,
    encode_pose,
    make_pose_params,
    project_pose,
)
from .sfm import SfmInput, make_sfm_input
from .training import MemoryBank, MemoryItem

# ---------------------------------------------------------------------------
# base skeletons via a tiny forward-kinematics chain

_J = {name: i for i, name in enumerate(JOINT_NAMES)}

# (joint, parent, offset from parent in mm); canonical rest pose is a T-pose
# facing +z with y up and the subject's left along +x.
_BONES = [
    ("pelvis", None, (0.0, 0.0, 0.0)),
    ("spine1", "pelvis", (0.0, 120.0, 0.0)),
    ("spine2", "spine1", (0.0, 130.0, 0.0)),
    ("spine3", "spine2", (0.0, 130.0, 0.0)),
    ("neck", "spine3", (0.0, 110.0, 0.0)),
    ("head", "neck", (0.0, 90.0, 0.0)),
    ("head_top", "head", (0.0, 110.0, 0.0)),
    ("left_hip", "pelvis", (95.0, -40.0, 0.0)),
    ("left_knee", "left_hip", (0.0, -420.0, 0.0)),
    ("left_ankle", "left_knee", (0.0, -430.0, 0.0)),
    ("left_heel", "left_ankle", (0.0, -60.0, -40.0)),
    ("left_toe", "left_ankle", (0.0, -60.0, 150.0)),
    ("right_hip", "pelvis", (-95.0, -40.0, 0.0)),
    ("right_knee", "right_hip", (0.0, -420.0, 0.0)),
    ("right_ankle", "right_knee", (0.0, -430.0, 0.0)),
    ("right_heel", "right_ankle", (0.0, -60.0, -40.0)),
    ("right_toe", "right_ankle", (0.0, -60.0, 150.0)),
    ("left_clavicle", "spine3", (30.0, 60.0, 0.0)),
    ("left_shoulder", "left_clavicle", (140.0, 0.0, 0.0)),
    ("left_elbow", "left_shoulder", (280.0, 0.0, 0.0)),
    ("left_wrist", "left_elbow", (250.0, 0.0, 0.0)),
    ("left_hand", "left_wrist", (80.0, 0.0, 0.0)),
    ("left_thumb", "left_hand", (30.0, 0.0, 40.0)),
    ("right_clavicle", "spine3", (-30.0, 60.0, 0.0)),
    ("right_shoulder", "right_clavicle", (-140.0, 0.0, 0.0)),
    ("right_elbow", "right_shoulder", (-280.0, 0.0, 0.0)),
    ("right_wrist", "right_elbow", (-250.0, 0.0, 0.0)),
    ("right_hand", "right_wrist", (-80.0, 0.0, 0.0)),
    ("right_thumb", "right_hand", (-30.0, 0.0, 40.0)),
    ("left_eye", "head", (32.0, 25.0, 70.0)),
    ("right_eye", "head", (-32.0, 25.0, 70.0)),
    ("jaw", "head", (0.0, -25.0, 80.0)),
]


def _fk(joint_rotations: Dict[str, Tuple[float, float, float]]) -> Skeleton3D:
    """Forward kinematics with per-joint Euler rotations of the subtree."""
    pos = np.zeros((N_JOINTS, 3))
    rot = [np.eye(3) for _ in range(N_JOINTS)]
    for name, parent, offset in _BONES:
        j = _J[name]
        local = joint_rotations.get(name)
        local_r = rotation_matrix(EulerAngles(*local)) if local else np.eye(3)
        if parent is None:
            rot[j] = local_r
            pos[j] = (0.0, 0.0, 0.0)
        else:
            p = _J[parent]
            rot[j] = rot[p] @ local_r
            pos[j] = pos[p] + rot[p] @ np.asarray(offset)
    return Skeleton3D(pos)


_D = np.deg2rad

# Twelve hand-authored poses in canonical proportions.
_BASE_POSE_SPECS = [
    {"left_shoulder": (0, 0, -_D(75)), "right_shoulder": (0, 0, _D(75))},  # stand
    {},  # t-pose
    {"left_shoulder": (0, 0, -_D(70)), "right_shoulder": (0, 0, _D(70)),
     "left_hip": (-_D(30), 0, 0), "right_hip": (_D(20), 0, 0),
     "left_knee": (_D(25), 0, 0), "right_knee": (_D(35), 0, 0)},  # walk L
    {"left_shoulder": (0, 0, -_D(70)), "right_shoulder": (0, 0, _D(70)),
     "left_hip": (_D(20), 0, 0), "right_hip": (-_D(30), 0, 0),
     "left_knee": (_D(35), 0, 0), "right_knee": (_D(25), 0, 0)},  # walk R
    {"left_hip": (-_D(90), 0, 0), "right_hip": (-_D(90), 0, 0),
     "left_knee": (_D(90), 0, 0), "right_knee": (_D(90), 0, 0),
     "left_shoulder": (0, 0, -_D(60)), "right_shoulder": (0, 0, _D(60))},  # sit
    {"left_hip": (-_D(110), 0, 0), "right_hip": (-_D(110), 0, 0),
     "left_knee": (_D(120), 0, 0), "right_knee": (_D(120), 0, 0),
     "left_shoulder": (-_D(80), 0, 0), "right_shoulder": (-_D(80), 0, 0)},  # squat
    {"left_shoulder": (0, 0, _D(10)), "right_shoulder": (0, 0, -_D(10))},  # reach up
    {"left_shoulder": (0, 0, -_D(75)), "right_shoulder": (0, 0, _D(20)),
     "right_elbow": (0, 0, _D(100))},  # wave
    {"spine1": (_D(35), 0, 0), "left_shoulder": (-_D(50), 0, -_D(40)),
     "right_shoulder": (-_D(50), 0, _D(40))},  # lean forward
    {"left_hip": (-_D(50), 0, 0), "right_hip": (_D(35), 0, 0),
     "right_knee": (_D(70), 0, 0),
     "left_shoulder": (0, 0, -_D(70)), "right_shoulder": (0, 0, _D(70))},  # lunge
    {"left_shoulder": (-_D(85), 0, 0), "right_shoulder": (-_D(85), 0, 0)},  # arms fwd
    {"spine1": (0, _D(35), 0), "left_shoulder": (0, 0, -_D(40)),
     "right_shoulder": (0, 0, _D(40)), "left_elbow": (0, 0, -_D(60))},  # twist
]


def base_skeletons() -> List[Skeleton3D]:
    """The bundled set of 12 canonical 32-joint poses."""
    return [_fk(spec) for spec in _BASE_POSE_SPECS]


# ---------------------------------------------------------------------------
# skeleton augmentation


@dataclass
class SkeletonAugmentSpec:
    perturb_std_mm: float = 20.0
    yaw_range: Tuple[float, float] = (-np.pi, np.pi)
    tilt_range: Tuple[float, float] = (-0.2, 0.2)
    focal_range: Tuple[float, float] = (40.0, 70.0)
    image_hw: Tuple[int, int] = (32, 32)
    root_depth: float = DEFAULT_ROOT_DEPTH
    max_retries: int = 50

    def __post_init__(self):
        if self.perturb_std_mm < 0:
            raise ConfigError("perturbation stddev must be >= 0")
        for lo, hi in (self.yaw_range, self.tilt_range, self.focal_range):
            if not lo <= hi:
                raise ConfigError("sampling range (%r, %r) is not ordered" % (lo, hi))

    def camera(self) -> CameraIntrinsics:
        h, w = self.image_hw
        # cx, cy at the image center; f is per-sample.
        return CameraIntrinsics(f=float(np.mean(self.focal_range)),
                                cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)


@dataclass
class PoseSample:
    target2d: np.ndarray
    params: PoseParams
    skeleton: Skeleton3D
    sample_id: int = 0


def synth_skeleton_sample(base: Skeleton3D, spec: SkeletonAugmentSpec,
                          rng: np.random.Generator, basis: ShapeBasis,
                          sample_id: int = 0) -> PoseSample:
    """Perturb, encode, rotate, and project one pose; the triple is exact.

    The 2D target is projected from the basis-reconstructed (not the raw
    perturbed) pose, so the returned parameters reproduce it exactly even
    for a truncated basis.
    """
    cam = spec.camera()
    for _ in range(spec.max_retries):
        noisy = base.joints + rng.normal(0.0, spec.perturb_std_mm,
                                         size=(N_JOINTS, 3))
        aligned = align_pose_orientation(Skeleton3D(noisy))
        w = encode_pose(aligned, basis)
        alpha = rng.uniform(*spec.tilt_range)
        beta = rng.uniform(*spec.yaw_range)
        gamma = rng.uniform(*spec.tilt_range)
        f = rng.uniform(*spec.focal_range)
        params = make_pose_params(w, f, EulerAngles(alpha, beta, gamma),
                                  trans=(0.0, 0.0))
        shape = decode_shape(params.w, basis).data.T
        r = rotation_matrix(params.angles)
        x3d = r @ shape + np.array([[0.0], [0.0], [spec.root_depth]])
        if np.min(x3d[2]) <= 1e-3:
            continue
        target2d = project_pose(params, basis, cam, spec.root_depth).data
        skel = Skeleton3D(x3d.T)
        return PoseSample(target2d, params, skel, sample_id)
    raise DomainError("could not place the pose in front of the near plane")


def synth_pose_dataset(spec: SkeletonAugmentSpec, n: int, seed: int,
                       basis: Optional[ShapeBasis] = None, basis_k: int = 60,
                       basis_samples: int = 400) -> Tuple[List[PoseSample], ShapeBasis]:
    """n augmented samples plus the basis they were encoded with.

    When no basis is given, one is built from a separate stream of aligned
    perturbed poses (the "training set" of the basis).
    """
    bases = base_skeletons()
    if basis is None:
        rng_b = np.random.default_rng([seed, 0xB0D1E5])
        pool = []
        for i in range(basis_samples):
            b = bases[i % len(bases)]
            noisy = b.joints + rng_b.normal(0.0, max(spec.perturb_std_mm, 1.0),
                                            size=(N_JOINTS, 3))
            pool.append(align_pose_orientation(Skeleton3D(noisy)))
        basis = build_pca_basis(pool, k=basis_k)
    rng = np.random.default_rng([seed, 0x5A3B1E])
    samples = []
    for i in range(n):
        base = bases[int(rng.integers(0, len(bases)))]
        samples.append(synth_skeleton_sample(base, spec, rng, basis, sample_id=i))
    return samples, basis


# ---------------------------------------------------------------------------
# pinhole scene pairs


@dataclass
class PinholeSceneSpec:
    image_hw: Tuple[int, int] = (32, 32)
    depth_range: Tuple[float, float] = (8.0, 16.0)
    box_depth_range: Tuple[float, float] = (3.0, 7.0)
    n_boxes_range: Tuple[int, int] = (1, 3)
    texture_smoothness: float = 2.0
    yaw_range: Tuple[float, float] = (-0.03, 0.03)
    roll_pitch_limit: float = 0.01
    forward_range: Tuple[float, float] = (0.15, 0.5)
    lateral_std: float = 0.05
    max_occlusion: float = 0.5
    max_retries: int = 20

    def __post_init__(self):
        if self.depth_range[0] <= 0 or self.box_depth_range[0] <= 0:
            raise ConfigError("depths must be positive")
        if not 0.0 < self.max_occlusion <= 1.0:
            raise ConfigError("max_occlusion must lie in (0, 1]")

    def camera(self) -> CameraIntrinsics:
        h, w = self.image_hw
        return CameraIntrinsics(f=float(w), cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)


@dataclass
class SfmSample:
    inp: SfmInput
    depth: DepthMap
    motion: SE3Motion
    cam: CameraIntrinsics
    sample_id: int = 0


def _smooth_noise(rng, h, w, smoothness) -> np.ndarray:
    """Band-limited texture in [0.1, 0.9] via gaussian-filtered white noise."""
    raw = rng.normal(size=(h, w))
    radius = max(1, int(round(3 * smoothness)))
    xs = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (xs / smoothness) ** 2)
    g /= g.sum()
    pad = np.pad(raw, radius, mode="wrap")
    sm = np.apply_along_axis(lambda r: np.convolve(r, g, mode="valid"), 1, pad)
    sm = np.apply_along_axis(lambda c: np.convolve(c, g, mode="valid"), 0, sm)
    lo, hi = sm.min(), sm.max()
    if hi - lo < 1e-9:
        raise DomainError("degenerate (constant) texture")
    return 0.1 + 0.8 * (sm - lo) / (hi - lo)


def _sample_depth_layout(rng, spec: PinholeSceneSpec) -> np.ndarray:
    h, w = spec.image_hw
    depth = np.full((h, w), rng.uniform(*spec.depth_range))
    n_boxes = int(rng.integers(spec.n_boxes_range[0], spec.n_boxes_range[1] + 1))
    for _ in range(n_boxes):
        bh = int(rng.integers(h // 5, h // 2))
        bw = int(rng.integers(w // 5, w // 2))
        top = int(rng.integers(0, h - bh))
        left = int(rng.integers(0, w - bw))
        depth[top : top + bh, left : left + bw] = rng.uniform(*spec.box_depth_range)
    return depth


def _sample_motion(rng, spec: PinholeSceneSpec) -> SE3Motion:
    lim = spec.roll_pitch_limit
    angles = EulerAngles(rng.uniform(-lim, lim),
                         rng.uniform(*spec.yaw_range),
                         rng.uniform(-lim, lim))
    # Forward-dominant translation: points move toward the camera (-z) when
    # the camera drives forward.
    t = np.array([rng.normal(0.0, spec.lateral_std),
                  rng.normal(0.0, spec.lateral_std * 0.5),
                  -rng.uniform(*spec.forward_range)])
    return SE3Motion(rotation_matrix(angles), t, euler=angles)


def _occlusion_fraction(flow: FlowField, depth2_z: np.ndarray) -> float:
    """Fraction of pixels whose warp target is claimed by a nearer source."""
    h, w = flow.u.shape
    grid = pixel_grid(h, w)
    tx = np.rint(grid[0] + flow.u).astype(np.int64).reshape(-1)
    ty = np.rint(grid[1] + flow.v).astype(np.int64).reshape(-1)
    z = depth2_z.reshape(-1)
    inb = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    cell = ty * w + tx
    best = np.full(h * w, np.inf)
    np.minimum.at(best, cell[inb], z[inb])
    occluded = inb & (z > best[np.where(inb, cell, 0)] + 1e-9)
    return float(np.count_nonzero(occluded)) / float(h * w)


def synth_pinhole_pair(spec: PinholeSceneSpec, rng: np.random.Generator,
                       sample_id: int = 0) -> SfmSample:
    """Textured planes + boxes observed under a car-like rigid motion.

    The scene texture is anchored to the second frame's pixel grid; the
    first frame is rendered by bilinearly sampling that texture at the
    exact ground-truth warp, so the photometric loss at the returned
    depth/motion is zero by construction, and the emitted flow equals the
    geometric flow of the emitted depth and motion.
    """
    cam = spec.camera()
    h, w = spec.image_hw
    for _ in range(spec.max_retries):
        depth = _sample_depth_layout(rng, spec)
        motion = _sample_motion(rng, spec)
        texture = _smooth_noise(rng, h, w, spec.texture_smoothness)

        dmap = DepthMap(np.log(depth))
        pc = depth_to_pointcloud(dmap, cam)
        moved = (motion.rotation @ pc.xyz.data
                 + motion.translation.reshape(3, 1))
        if np.min(moved[2]) <= 1e-3:
            continue
        flow = pointcloud_to_flow(pc, motion, cam)
        flow = FlowField(flow.uv.data)
        if _occlusion_fraction(flow, moved[2].reshape(h, w)) > spec.max_occlusion:
            continue
        i2 = texture[None]
        coords = pixel_grid(h, w) + flow.uv.data
        i1 = kernels.bilinear_forward(i2, coords[0], coords[1])
        inp = make_sfm_input(i1, i2, flow, cam)
        return SfmSample(inp, dmap, motion, cam, sample_id)
    raise DomainError("could not sample an acceptable scene (occlusion/near plane)")


def synth_sfm_dataset(spec: PinholeSceneSpec, n: int, seed: int,
                      label: str = "scenes") -> List[SfmSample]:
    rng = np.random.default_rng([seed, zlib_crc(label)])
    return [synth_pinhole_pair(spec, rng, sample_id=i) for i in range(n)]


def zlib_crc(label: str) -> int:
    import zlib

    return zlib.crc32(label.encode("utf-8"))


# ---------------------------------------------------------------------------
# toy faces


@dataclass
class ToyFaceSpec:
    size: int = 32
    mouth_radius_range: Tuple[float, float] = (2.0, 3.2)
    eye_radius: float = 1.6
    face_value: float = 0.5
    eye_value: float = 0.8
    mouth_value: float = 0.95
    background: float = 0.08
    jitter: float = 0.6
    big_mouth_threshold: float = 4.0

    def __post_init__(self):
        if self.size % 4:
            raise ConfigError("face size must divide by 4 (super-resolution)")
        if self.mouth_radius_range[0] <= 0:
            raise ConfigError("mouth radius must be positive")

    MOUTH_CENTER = (0.5, 0.70)  # (x, y) as a fraction of size
    MOUTH_ASPECT = 0.45

    def mouth_region(self) -> Tuple[int, int, int, int]:
        """(top, left, height, width) box containing any sampled mouth."""
        s = self.size
        cy = self.MOUTH_CENTER[1] * s
        pad = max(self.mouth_radius_range) + self.jitter + 2.5
        top = max(0, int(np.floor(cy - pad * self.MOUTH_ASPECT - 1)))
        bottom = min(s, int(np.ceil(cy + pad * self.MOUTH_ASPECT + 2)))
        return (top, 0, bottom - top, s)


def _soft_ellipse(xs, ys, cx, cy, rx, ry, soft=0.7):
    # Linear edge ramp of width `soft` (in normalized-distance units).
    d = np.sqrt(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2)
    return np.clip((1.0 - d) / soft + 0.5, 0.0, 1.0)


@dataclass
class ToyFace:
    image: np.ndarray
    attrs: dict
    sample_id: int = 0


def render_toy_face(spec: ToyFaceSpec, mouth_radius: float,
                    jitter_xy: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Deterministic (1, s, s) face image for the given parameters."""
    s = spec.size
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    img = np.full((s, s), spec.background)
    jx, jy = jitter_xy
    cx, cy = s / 2.0 + jx, s / 2.0 + jy

    def paint(alpha, value):
        img[:] = img * (1.0 - alpha) + value * alpha

    paint(_soft_ellipse(xs, ys, cx, cy + 0.5, 0.36 * s, 0.44 * s), spec.face_value)
    for side in (-1.0, 1.0):
        paint(_soft_ellipse(xs, ys, cx + side * 0.15 * s, cy - 0.17 * s,
                            spec.eye_radius, spec.eye_radius), spec.eye_value)
    mx = cx
    my = s * spec.MOUTH_CENTER[1] + jy
    paint(_soft_ellipse(xs, ys, mx, my, mouth_radius,
                        spec.MOUTH_ASPECT * mouth_radius), spec.mouth_value)
    return img[None]


def synth_toy_faces(spec: ToyFaceSpec, n: int, seed: int,
                    mouth_radius_range: Optional[Tuple[float, float]] = None,
                    balance: bool = False,
                    label: str = "faces") -> List[ToyFace]:
    """n labeled faces; attributes derive deterministically from parameters.

    With ``balance`` set, alternate draws fall below / at-or-above the
    big-mouth threshold, so class counts are exactly n//2 and n - n//2.
    """
    if n <= 0:
        raise ConfigError("need n > 0 faces")
    rr = mouth_radius_range or spec.mouth_radius_range
    if balance:
        lo, hi = min(rr[0], spec.big_mouth_threshold - 1.0), max(
            rr[1], spec.big_mouth_threshold + 1.0)
    rng = np.random.default_rng([seed, zlib_crc(label)])
    out = []
    for i in range(n):
        if balance:
            if i % 2 == 0:
                r = float(rng.uniform(lo, spec.big_mouth_threshold - 1e-9))
            else:
                r = float(rng.uniform(spec.big_mouth_threshold, hi))
        else:
            r = float(rng.uniform(*rr))
        jx = float(rng.uniform(-spec.jitter, spec.jitter))
        jy = float(rng.uniform(-spec.jitter, spec.jitter))
        img = render_toy_face(spec, r, (jx, jy))
        out.append(ToyFace(img, {
            "mouth_radius": r,
            "big_mouth": bool(r >= spec.big_mouth_threshold),
            "jitter_x": jx,
            "jitter_y": jy,
        }, sample_id=i))
    return out


def mouth_radius_probe(img: np.ndarray, spec: ToyFaceSpec) -> float:
    """Estimate the mouth radius from pixels alone (generator-known probe).

    Counts bright mouth-valued pixels inside the mouth region and inverts
    the ellipse area formula. Applied identically to real and generated
    images so systematic probe bias cancels in comparisons.
    """
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[0]
    top, left, rh, rw = spec.mouth_region()
    region = arr[top : top + rh, left : left + rw]
    # The face/mouth midpoint crosses the painted alpha at exactly the
    # ellipse contour, so the count is unbiased on clean renders.
    thresh = 0.5 * (spec.face_value + spec.mouth_value)
    area = float(np.sum(region > thresh))
    return float(np.sqrt(area / (np.pi * spec.MOUTH_ASPECT)))


# ---------------------------------------------------------------------------
# memory banks


def build_memory_banks(items_by_kind: Dict[str, Sequence[MemoryItem]],
                       exclude_ids: Sequence[int] = ()) -> Dict[str, MemoryBank]:
    """One bank per latent kind with the given sample ids verifiably absent."""
    excluded = set(int(i) for i in exclude_ids)
    banks = {}
    for kind, items in items_by_kind.items():
        kept = [it for it in items if it.item_id not in excluded]
        if not kept:
            raise CurationError("bank %r is empty after exclusions" % kind)
        banks[kind] = MemoryBank(kept, kind=kind)
    return banks
