"""Parameter-free differentiable renderers and pinhole geometry.

Conventions used throughout the package:

* images and fields are (c, h, w) or (h, w), row-major, pixel centers at
  integer coordinates, zero-indexed;
* pixel coordinate x is the column, y the row;
* a point cloud is a 3 x N tensor in the camera frame, columns in pixel
  order (row-major scan of the source image);
* projection is the true pinhole map u = f*X/Z + c_x, v = f*Y/Z + c_y;
* a rigid motion {R, T} maps frame-1 points to frame-2 points:
  X2 = R @ X1 + T.

All functions accept either tensors (tracked when a tape is active) or
plain arrays, which are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, lift
from .errors import (
    DegenerateWarpError,
    DimensionError,
    DomainError,
    NearPlaneError,
)

Z_MIN = 1e-4

ArrayLike = Union[np.ndarray, Tensor, float]


def _value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class CameraIntrinsics:
    """Pinhole parameters in pixels. ``f`` may be a scalar tensor."""

    f: ArrayLike
    cx: float
    cy: float

    def __post_init__(self):
        fv = _value(self.f)
        if fv.size != 1:
            raise DimensionError("focal length must be a scalar")
        if not float(fv.reshape(())) > 0.0:
            raise DomainError("focal length must be positive")


@dataclass
class EulerAngles:
    """Rotations about x, y, z in radians; fields may be scalar tensors."""

    alpha: ArrayLike
    beta: ArrayLike
    gamma: ArrayLike

    def __post_init__(self):
        for v in (self.alpha, self.beta, self.gamma):
            if not np.all(np.isfinite(_value(v))):
                raise DomainError("Euler angles must be finite")


def _check_rotation(r: np.ndarray, tol: float = 1e-9) -> None:
    if r.shape != (3, 3):
        raise DimensionError("rotation must be 3x3")
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        raise DomainError("rotation is not orthonormal within %g" % tol)
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise DomainError("rotation determinant is not +1 within %g" % tol)


class SE3Motion:
    """Rigid motion {R, T}: frame-1 to frame-2 point transform.

    ``euler`` optionally carries the generating angles (used by motion
    discriminators, which consume the 6-vector form).
    """

    def __init__(self, R, T, euler: Optional[EulerAngles] = None):
        self.R = R
        self.T = T
        self.euler = euler
        _check_rotation(_value(R))
        tv = _value(T)
        if tv.size != 3:
            raise DimensionError("translation must have 3 components")

    @property
    def translation(self) -> np.ndarray:
        return _value(self.T).reshape(3)

    @property
    def rotation(self) -> np.ndarray:
        return _value(self.R)

    @staticmethod
    def identity() -> "SE3Motion":
        return SE3Motion(np.eye(3), np.zeros(3),
                         euler=EulerAngles(0.0, 0.0, 0.0))

    def compose(self, first: "SE3Motion") -> "SE3Motion":
        """Motion equivalent to applying ``first`` then ``self``."""
        return SE3Motion(self.rotation @ first.rotation,
                         self.rotation @ first.translation + self.translation)

    def six_vector(self) -> np.ndarray:
        """(alpha, beta, gamma, tx, ty, tz); requires stored Euler angles."""
        if self.euler is None:
            raise DomainError("motion has no stored Euler angles")
        e = self.euler
        return np.array([
            float(_value(e.alpha)), float(_value(e.beta)), float(_value(e.gamma)),
            *self.translation,
        ])


class DepthMap:
    """Per-pixel log-depth; depth = exp(log_depth) is positive by construction."""

    def __init__(self, log_depth):
        if _value(log_depth).ndim != 2:
            raise DimensionError("log-depth must be (h, w)")
        if not np.all(np.isfinite(_value(log_depth))):
            raise DomainError("log-depth must be finite")
        self.log_depth = log_depth

    @property
    def shape(self) -> Tuple[int, int]:
        return _value(self.log_depth).shape

    def depth_values(self) -> np.ndarray:
        return np.exp(_value(self.log_depth))

    def log_values(self) -> np.ndarray:
        return _value(self.log_depth)


class PointCloud:
    """3 x N camera-frame coordinates, pixel-order aligned with (h, w)."""

    def __init__(self, xyz, image_hw: Tuple[int, int]):
        h, w = image_hw
        if _value(xyz).shape != (3, h * w):
            raise DimensionError("point cloud must be 3 x (h*w)")
        self.xyz = xyz
        self.image_hw = (int(h), int(w))


class FlowField:
    """Per-pixel (U, V) displacement in pixels, stored as (2, h, w)."""

    def __init__(self, uv):
        if _value(uv).ndim != 3 or _value(uv).shape[0] != 2:
            raise DimensionError("flow must be (2, h, w)")
        self.uv = uv

    @property
    def u(self) -> np.ndarray:
        return _value(self.uv)[0]

    @property
    def v(self) -> np.ndarray:
        return _value(self.uv)[1]


# ---------------------------------------------------------------------------
# rotations and projection

# R^x = diag-base + cos*C + sin*S decompositions, one triple per axis.
_EYE_X = np.diag([1.0, 0.0, 0.0])
_COS_X = np.diag([0.0, 1.0, 1.0])
_SIN_X = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
_EYE_Y = np.diag([0.0, 1.0, 0.0])
_COS_Y = np.diag([1.0, 0.0, 1.0])
_SIN_Y = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
_EYE_Z = np.diag([0.0, 0.0, 1.0])
_COS_Z = np.diag([1.0, 1.0, 0.0])
_SIN_Z = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def _axis_rotation(angle, eye, cosm, sinm) -> Tensor:
    a = lift(angle)
    if a.ndim != 0:
        a = ops.reshape(a, ())
    return ops.add(ops.add(ops.mul(ops.cos(a), cosm), ops.mul(ops.sin(a), sinm)), eye)


def euler_to_rotation(angles: EulerAngles) -> Tensor:
    """R = R_x(alpha) @ R_y(beta) @ R_z(gamma); orthonormal by construction."""
    rx = _axis_rotation(angles.alpha, _EYE_X, _COS_X, _SIN_X)
    ry = _axis_rotation(angles.beta, _EYE_Y, _COS_Y, _SIN_Y)
    rz = _axis_rotation(angles.gamma, _EYE_Z, _COS_Z, _SIN_Z)
    return ops.matmul(ops.matmul(rx, ry), rz)


def rotation_matrix(angles: EulerAngles) -> np.ndarray:
    """Plain-array variant of euler_to_rotation."""
    return euler_to_rotation(angles).data


def project_points(x3d, cam: CameraIntrinsics, z_min: float = Z_MIN) -> Tensor:
    """Pinhole projection of a 3 x N tensor to 2 x N pixel coordinates.

    Differentiable w.r.t. the points and the focal length. Points at or
    behind the near plane are a hard error (clamping would corrupt
    gradients).
    """
    x3d = lift(x3d)
    if x3d.ndim != 2 or x3d.shape[0] != 3:
        raise DimensionError("project_points expects 3 x N, got %s" % (x3d.shape,))
    zvals = x3d.data[2]
    bad = np.nonzero(zvals <= z_min)[0]
    if bad.size:
        raise NearPlaneError(bad.tolist(), z_min)
    X = ops.slice_axis(x3d, 0, 0, 1)
    Y = ops.slice_axis(x3d, 0, 1, 2)
    Z = ops.slice_axis(x3d, 0, 2, 3)
    f = lift(cam.f)
    if f.ndim != 0:
        f = ops.reshape(f, ())
    u = ops.add(ops.mul(f, ops.div(X, Z)), float(cam.cx))
    v = ops.add(ops.mul(f, ops.div(Y, Z)), float(cam.cy))
    return ops.concat([u, v], axis=0)


def pixel_grid(h: int, w: int) -> np.ndarray:
    """(2, h, w) constant field of pixel coordinates: [0]=x, [1]=y."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs, ys], axis=0)


def depth_to_pointcloud(d: DepthMap, cam: CameraIntrinsics) -> PointCloud:
    """X = (d/f) * [x - c_x, y - c_y, f] per pixel; Z equals depth."""
    h, w = d.shape
    grid = pixel_grid(h, w)
    kx = (grid[0].reshape(1, -1) - cam.cx)
    ky = (grid[1].reshape(1, -1) - cam.cy)
    depth = ops.exp(lift(d.log_depth))
    dflat = ops.reshape(depth, (1, h * w))
    f = lift(cam.f)
    if f.ndim != 0:
        f = ops.reshape(f, ())
    X = ops.div(ops.mul(dflat, kx), f)
    Y = ops.div(ops.mul(dflat, ky), f)
    return PointCloud(ops.concat([X, Y, dflat], axis=0), (h, w))


def rigid_transform(pc: PointCloud, motion: SE3Motion) -> PointCloud:
    """X2 = R @ X1 + T, differentiable through the cloud, R, and T."""
    xyz = lift(pc.xyz)
    n = xyz.shape[1]
    t = lift(motion.T)
    t = ops.reshape(t, (3, 1))
    tiled = ops.matmul(t, np.ones((1, n)))
    return PointCloud(ops.add(ops.matmul(lift(motion.R), xyz), tiled), pc.image_hw)


def pointcloud_to_flow(pc: PointCloud, motion: SE3Motion,
                       cam: CameraIntrinsics) -> FlowField:
    """(U, V) = projected transformed cloud minus the source pixel grid."""
    h, w = pc.image_hw
    moved = rigid_transform(pc, motion)
    proj = project_points(moved.xyz, cam)
    grid = pixel_grid(h, w).reshape(2, h * w)
    uv = ops.reshape(ops.sub(proj, grid), (2, h, w))
    return FlowField(uv)


# ---------------------------------------------------------------------------
# photometric loss and image renderers


def warp_validity_mask(flow: FlowField, h: int, w: int) -> np.ndarray:
    """Boolean (h, w) mask of pixels whose warped coordinate lands in-bounds."""
    grid = pixel_grid(h, w)
    coords = grid + _value(flow.uv)
    xs, ys = coords[0], coords[1]
    return (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)


def photometric_loss(i1, i2, flow: FlowField) -> Tensor:
    """Mean absolute warp residual: (1/|valid|) sum |I1(x,y) - I2(x+U, y+V)|.

    I2 is sampled bilinearly at the warped coordinates; pixels whose warped
    coordinate leaves the image are excluded from the mean (border samples
    clamp for interpolation but carry no loss). The mean runs over all
    channel-pixels of the valid set.
    """
    i1 = lift(i1)
    i2 = lift(i2)
    if i1.ndim != 3 or i2.ndim != 3:
        raise DimensionError("photometric_loss expects (c,h,w) images")
    if i1.shape != i2.shape:
        raise DimensionError("image shapes differ: %s vs %s" % (i1.shape, i2.shape))
    c, h, w = i1.shape
    if _value(flow.uv).shape != (2, h, w):
        raise DimensionError("flow shape %s does not match image %s"
                             % (_value(flow.uv).shape, (h, w)))
    mask = warp_validity_mask(flow, h, w)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise DegenerateWarpError("all warped coordinates fell outside the image")
    coords = ops.add(lift(flow.uv), pixel_grid(h, w))
    warped = ops.bilinear_sample(i2, coords)
    resid = ops.absolute(ops.sub(i1, warped))
    masked = ops.mul(resid, np.broadcast_to(mask, (c, h, w)).astype(np.float64))
    total = ops.reduce_sum(masked)
    return ops.mul(total, 1.0 / float(n_valid * c))


def downsample4x(img) -> Tensor:
    """4x4 window mean with stride 4; extents must divide by 4."""
    img = lift(img)
    if img.ndim != 3:
        raise DimensionError("downsample4x expects (c,h,w)")
    return ops.avg_pool2d(img, 4, 4)


def upsample_nearest4x(img) -> Tensor:
    return ops.upsample_nearest(lift(img), 4)


def apply_mask(img, mask) -> Tensor:
    """Pointwise product with a strict {0,1} mask; grads vanish where mask=0."""
    img = lift(img)
    mv = np.asarray(_value(mask), dtype=np.float64)
    if mv.shape != img.shape:
        if img.ndim == 3 and mv.shape == img.shape[1:]:
            mv = np.broadcast_to(mv, img.shape).copy()
        else:
            raise DimensionError("mask shape %s does not match image %s"
                                 % (mv.shape, img.shape))
    if not np.all((mv == 0.0) | (mv == 1.0)):
        raise DomainError("mask entries must be exactly 0 or 1")
    return ops.mul(img, mv)


def angle_field(cam: CameraIntrinsics, h: int, w: int) -> np.ndarray:
    """Per-pixel angle between the viewing ray and the optical axis (radians).

    Static non-differentiable input feature: atan2(radial offset, f).
    """
    fv = float(_value(cam.f).reshape(()))
    grid = pixel_grid(h, w)
    r = np.hypot(grid[0] - cam.cx, grid[1] - cam.cy)
    return np.arctan2(r, fv)


def flow_angles(flow: FlowField) -> np.ndarray:
    """Per-pixel atan2(V, U) in (-pi, pi]; zero flow maps to 0."""
    # Adding +0.0 turns a negative zero V into +0.0, so atan2 never yields -pi.
    return np.arctan2(flow.v + 0.0, flow.u)
