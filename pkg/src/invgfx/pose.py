"""2D-to-3D human pose lifting: shape basis, generator heads, losses, metrics.

Skeletons use 32 named joints, millimeter units, y-up, and a canonical
orientation in which the horizontal normal of the left-hip -> right-hip
vector points along +z. The latent pose model is

    x3d = R(alpha, beta, gamma) @ (mean + B^T w)  placed at a fixed root depth,

projected through a pinhole camera whose focal length is predicted alongside
the basis weights. An optional 2D root translation output absorbs principal
point / cropping conventions so the toy task is well posed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import nn, ops
from .autodiff.tensor import Tensor, lift
from .errors import (
    DegeneratePoseError,
    DimensionError,
    DomainError,
    RankError,
)
from .geometry import CameraIntrinsics, EulerAngles, euler_to_rotation, project_points

JOINT_NAMES = (
    "pelvis", "spine1", "spine2", "spine3", "neck", "head", "head_top",
    "left_hip", "left_knee", "left_ankle", "left_heel", "left_toe",
    "right_hip", "right_knee", "right_ankle", "right_heel", "right_toe",
    "left_clavicle", "left_shoulder", "left_elbow", "left_wrist",
    "left_hand", "left_thumb",
    "right_clavicle", "right_shoulder", "right_elbow", "right_wrist",
    "right_hand", "right_thumb",
    "left_eye", "right_eye", "jaw",
)

N_JOINTS = 32
ROOT = JOINT_NAMES.index("pelvis")
LEFT_HIP = JOINT_NAMES.index("left_hip")
RIGHT_HIP = JOINT_NAMES.index("right_hip")

DEFAULT_ROOT_DEPTH = 5000.0  # mm


class Skeleton3D:
    """32 joints x 3 coordinates (mm), joint order fixed by JOINT_NAMES."""

    def __init__(self, joints):
        joints = np.asarray(joints, dtype=np.float64)
        if joints.shape != (N_JOINTS, 3):
            raise DimensionError("skeleton must be (%d, 3), got %s"
                                 % (N_JOINTS, joints.shape))
        if not np.all(np.isfinite(joints)):
            raise DomainError("skeleton coordinates must be finite")
        self.joints = joints

    def flat(self) -> np.ndarray:
        return self.joints.reshape(-1)

    def copy(self) -> "Skeleton3D":
        return Skeleton3D(self.joints.copy())


def _as_joints(s) -> np.ndarray:
    return s.joints if isinstance(s, Skeleton3D) else np.asarray(s, dtype=np.float64)


def hip_normal_azimuth(joints: np.ndarray) -> float:
    """Azimuth of the horizontal normal to the left->right hip vector."""
    h = joints[LEFT_HIP] - joints[RIGHT_HIP]
    hx, hz = h[0], h[2]
    if np.hypot(hx, hz) < 1e-8:
        raise DegeneratePoseError("hip joints are (horizontally) coincident")
    # Normal = hip vector rotated +90 degrees about the vertical axis.
    return float(np.arctan2(-hz, hx))


def align_pose_orientation(s) -> Skeleton3D:
    """Root-center and yaw the pose so its hip normal points along +z."""
    joints = _as_joints(s)
    centered = joints - joints[ROOT]
    az = hip_normal_azimuth(centered)
    c, sn = np.cos(-az), np.sin(-az)
    ry = np.array([[c, 0.0, sn], [0.0, 1.0, 0.0], [-sn, 0.0, c]])
    return Skeleton3D(centered @ ry.T)


def reconstruction_error_3d(pred, gt) -> float:
    """Mean per-joint distance (mm) after both poses are torso-aligned."""
    pa = align_pose_orientation(pred).joints
    ga = align_pose_orientation(gt).joints
    return float(np.mean(np.linalg.norm(pa - ga, axis=1)))


# ---------------------------------------------------------------------------
# PCA shape basis


class ShapeBasis:
    """Mean pose + top-k eigenvectors of aligned-pose covariance.

    Rows of ``vectors`` are orthonormal and ordered by decreasing variance.
    """

    def __init__(self, mean: np.ndarray, vectors: np.ndarray,
                 variances: np.ndarray):
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        vectors = np.asarray(vectors, dtype=np.float64)
        variances = np.asarray(variances, dtype=np.float64).reshape(-1)
        if mean.size != 3 * N_JOINTS:
            raise DimensionError("basis mean must have %d entries" % (3 * N_JOINTS))
        if vectors.ndim != 2 or vectors.shape[1] != mean.size:
            raise DimensionError("basis vectors must be (k, %d)" % mean.size)
        if variances.size != vectors.shape[0]:
            raise DimensionError("one variance per component required")
        gram = vectors @ vectors.T
        if np.max(np.abs(gram - np.eye(vectors.shape[0]))) > 1e-9:
            raise DomainError("basis rows are not orthonormal within 1e-9")
        if np.any(np.diff(variances) > 1e-12):
            raise DomainError("variances must be non-increasing")
        self.mean = mean
        self.vectors = vectors
        self.variances = variances

    @property
    def k(self) -> int:
        return self.vectors.shape[0]


def build_pca_basis(poses: Sequence, k: int = 60) -> ShapeBasis:
    """PCA over orientation-aligned poses (full symmetric eigendecomposition).

    Needs more samples than components (k determinable directions);
    eigenvector signs are fixed by making each vector's largest-magnitude
    entry positive. Alignment itself pins four degrees of freedom, so the
    trailing variances of a full basis are structurally (near) zero; the
    eigenbasis stays orthonormal and the full-basis round trip exact.
    """
    if k < 1 or k > 3 * N_JOINTS:
        raise RankError("component count k=%d out of range" % k)
    flat = np.stack([_as_joints(p).reshape(-1) for p in poses])
    n = flat.shape[0]
    if n - 1 < k:
        raise RankError("%d samples cannot determine k=%d components" % (n, k))
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = (centered.T @ centered) / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    vectors = evecs[:, :k].T.copy()
    for row in vectors:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return ShapeBasis(mean, vectors, np.maximum(evals[:k], 0.0))


def encode_pose(s, basis: ShapeBasis) -> np.ndarray:
    """Basis weights of an aligned pose: w = B (flat - mean)."""
    return basis.vectors @ (_as_joints(s).reshape(-1) - basis.mean)


def decode_shape(w, basis: ShapeBasis) -> Tensor:
    """mean + B^T w, reshaped to (32, 3); differentiable in w."""
    w = lift(w)
    if w.size != basis.k:
        raise DimensionError("expected %d weights, got %d" % (basis.k, w.size))
    wcol = ops.reshape(w, (basis.k, 1))
    flat = ops.add(ops.matmul(basis.vectors.T, wcol),
                   basis.mean.reshape(-1, 1))
    return ops.reshape(flat, (N_JOINTS, 3))


# ---------------------------------------------------------------------------
# heatmaps


def keypoints_to_heatmaps(kp2d, h: int, w: int, sigma: float = 0.25,
                          normalized_sigma: bool = True) -> np.ndarray:
    """One unit-peak isotropic Gaussian per joint, (32, h, w).

    ``sigma`` is in units of image width when ``normalized_sigma`` is set
    (a 0.25-pixel blob would be invisible), else in pixels.
    """
    kp = np.asarray(kp2d, dtype=np.float64)
    if kp.shape != (N_JOINTS, 2):
        raise DimensionError("keypoints must be (%d, 2)" % N_JOINTS)
    if not np.all(np.isfinite(kp)):
        raise DomainError("keypoints must be finite")
    s_px = sigma * w if normalized_sigma else sigma
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = (xs[None] - kp[:, 0, None, None]) ** 2 + (ys[None] - kp[:, 1, None, None]) ** 2
    return np.exp(-d2 / (2.0 * s_px * s_px))


# ---------------------------------------------------------------------------
# generator / discriminator


@dataclass
class PoseParams:
    """Predicted latent factors: basis weights, focal, rotation, 2D shift."""

    w: Tensor
    f: Tensor
    angles: EulerAngles
    trans: Optional[Tensor] = None
    raw: Optional[Tensor] = None

    def numpy_vector(self, f_ref: float, w_scales=None) -> np.ndarray:
        """Raw-parameterization vector [w, log(f/f_ref), angles, trans]."""
        w = np.asarray(self.w.data).reshape(-1)
        if w_scales is not None:
            w = w / np.asarray(w_scales, dtype=np.float64).reshape(-1)
        parts = [w,
                 [np.log(float(self.f.data.reshape(())) / f_ref)],
                 [float(np.asarray(a.data if isinstance(a, Tensor) else a))
                  for a in (self.angles.alpha, self.angles.beta, self.angles.gamma)]]
        if self.trans is not None:
            parts.append(np.asarray(self.trans.data).reshape(-1))
        return np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1)
                               for p in parts])


def make_pose_params(w, f: float, angles: EulerAngles,
                     trans=None) -> PoseParams:
    """Wrap plain values (e.g. synthetic ground truth) as PoseParams."""
    wt = ops.reshape(lift(np.asarray(w, dtype=np.float64)), (np.asarray(w).size, 1))
    ft = lift(float(f))
    tr = None if trans is None else ops.reshape(lift(np.asarray(trans)), (2, 1))
    return PoseParams(w=wt, f=ft, angles=angles, trans=tr)


class PoseGenerator(nn.Module):
    """Conv stack over joint heatmaps feeding two dense heads.

    Output layout: [w (k), f_raw (1), alpha, beta, gamma, (tx, ty)]; the
    focal is f_ref * exp(f_raw) so positivity holds by construction.
    """

    def __init__(self, rng, image_hw: Tuple[int, int], n_basis: int = 60,
                 widths=(8, 16, 16), fc_width: int = 96, f_ref: float = 55.0,
                 predict_translation: bool = True, normalize: bool = True,
                 w_scales=None, name: str = "pose_gen"):
        super().__init__(name)
        h, w = image_hw
        self.image_hw = (h, w)
        self.n_basis = n_basis
        self.f_ref = float(f_ref)
        self.predict_translation = predict_translation
        if w_scales is None:
            self.w_scales = np.ones(n_basis)
        else:
            # whiten the weight head: unit net outputs map to one standard
            # deviation of each basis component
            self.w_scales = np.maximum(np.asarray(w_scales, float).reshape(-1),
                                       1.0)
            if self.w_scales.size != n_basis:
                raise DimensionError("need one weight scale per component")
        self.n_out = n_basis + 4 + (2 if predict_translation else 0)
        self.encoder = self._child(nn.ConvStack(rng, N_JOINTS, widths,
                                                "%s/enc" % name,
                                                normalize=normalize))
        feat_h, feat_w = h, w
        for _ in widths:
            feat_h = (feat_h + 1) // 2
            feat_w = (feat_w + 1) // 2
        n_feat = widths[-1] * feat_h * feat_w
        self.head = self._child(nn.MLP(rng, (n_feat, fc_width, self.n_out),
                                       "%s/head" % name, normalize=normalize))

    def __call__(self, heatmaps) -> PoseParams:
        hm = lift(heatmaps)
        if hm.shape != (N_JOINTS,) + self.image_hw:
            raise DimensionError("heatmap stack %s does not match net input %s"
                                 % (hm.shape, (N_JOINTS,) + self.image_hw))
        feats = self.encoder(hm)
        out = self.head(ops.flatten_column(feats[-1]))
        k = self.n_basis
        w = ops.mul(ops.slice_axis(out, 0, 0, k), self.w_scales.reshape(k, 1))
        f = ops.mul(ops.exp(ops.reshape(ops.slice_axis(out, 0, k, k + 1), ())),
                    self.f_ref)
        ang = EulerAngles(
            ops.reshape(ops.slice_axis(out, 0, k + 1, k + 2), ()),
            ops.reshape(ops.slice_axis(out, 0, k + 2, k + 3), ()),
            ops.reshape(ops.slice_axis(out, 0, k + 3, k + 4), ()),
        )
        trans = None
        if self.predict_translation:
            trans = ops.slice_axis(out, 0, k + 4, k + 6)
        return PoseParams(w=w, f=f, angles=ang, trans=trans, raw=out)


def pose_generator_forward(heatmaps, net: PoseGenerator) -> PoseParams:
    return net(heatmaps)


def posed_keypoints(params: PoseParams, basis: ShapeBasis,
                    root_depth: float = DEFAULT_ROOT_DEPTH) -> Tensor:
    """Rotated decoded shape placed at the fixed root depth: (3, 32)."""
    shape = ops.transpose(decode_shape(params.w, basis))
    r = euler_to_rotation(params.angles)
    offset = np.array([[0.0], [0.0], [root_depth]])
    return ops.add(ops.matmul(r, shape),
                   np.broadcast_to(offset, (3, N_JOINTS)).copy())


def project_pose(params: PoseParams, basis: ShapeBasis, cam: CameraIntrinsics,
                 root_depth: float = DEFAULT_ROOT_DEPTH) -> Tensor:
    """Project predicted latents to 2 x 32 keypoints, differentiably."""
    x3d = posed_keypoints(params, basis, root_depth)
    proj = project_points(x3d, CameraIntrinsics(params.f, cam.cx, cam.cy))
    if params.trans is not None:
        proj = ops.add(proj, ops.matmul(params.trans, np.ones((1, N_JOINTS))))
    return proj


def reprojection_loss(params: PoseParams, target2d, basis: ShapeBasis,
                      cam: CameraIntrinsics,
                      root_depth: float = DEFAULT_ROOT_DEPTH) -> Tensor:
    """L2 norm between projected keypoints and the 2 x 32 target."""
    target = np.asarray(_tensor_value(target2d), dtype=np.float64)
    if target.shape != (2, N_JOINTS):
        raise DimensionError("target keypoints must be (2, %d)" % N_JOINTS)
    proj = project_pose(params, basis, cam, root_depth)
    return ops.l2_norm(ops.sub(proj, target))


def mean_reprojection_px(params: PoseParams, target2d, basis: ShapeBasis,
                         cam: CameraIntrinsics,
                         root_depth: float = DEFAULT_ROOT_DEPTH) -> float:
    """Mean per-joint pixel distance between projection and target."""
    proj = project_pose(params, basis, cam, root_depth).data
    target = np.asarray(_tensor_value(target2d), dtype=np.float64)
    return float(np.mean(np.linalg.norm(proj - target, axis=0)))


def _tensor_value(x):
    return x.data if isinstance(x, Tensor) else x


class PoseDiscriminator(nn.Module):
    """Dense net scoring either decoded 3D keypoints or raw parameters.

    ``mode="keypoints"`` consumes a flattened (96, 1) skeleton in meters
    (mm / 1000); ``mode="params"`` consumes the generator's raw output
    vector. Output is a probability in (0, 1). Normalization defaults off:
    absolute skeleton size is one of the statistics this critic must judge.
    """

    MODES = ("keypoints", "params")

    def __init__(self, rng, mode: str = "keypoints", n_params: int = 66,
                 widths=(512, 512, 256, 256), normalize: bool = False,
                 name: str = "pose_disc"):
        super().__init__(name)
        if mode not in self.MODES:
            raise DomainError("unknown discriminator mode %r" % mode)
        self.mode = mode
        n_in = 3 * N_JOINTS if mode == "keypoints" else n_params
        self.net = self._child(nn.MLP(rng, (n_in, *widths, 1), "%s/mlp" % name,
                                      normalize=normalize, final="sigmoid"))

    def __call__(self, x) -> Tensor:
        x = lift(x)
        col = ops.reshape(x, (x.size, 1))
        if self.mode == "keypoints":
            col = ops.mul(col, 1e-3)  # mm -> m keeps early activations tame
        return self.net(col)


def pose_discriminator_forward(x, net: PoseDiscriminator) -> Tensor:
    return net(x)


# ---------------------------------------------------------------------------
# skeleton CSV interchange


def save_skeletons_csv(path, skeletons: Sequence[Skeleton3D],
                       frame_ids: Optional[Sequence[int]] = None) -> None:
    """CSV layout: frame, then <joint>_{x,y,z} per joint, millimeters."""
    if frame_ids is None:
        frame_ids = range(len(skeletons))
    header = ["frame"]
    for name in JOINT_NAMES:
        header += ["%s_%s" % (name, ax) for ax in ("x", "y", "z")]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for fid, s in zip(frame_ids, skeletons):
            row = [str(int(fid))] + [repr(float(v)) for v in s.flat()]
            fh.write(",".join(row) + "\n")


def load_skeletons_csv(path) -> Tuple[List[int], List[Skeleton3D]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DomainError("empty skeleton CSV %s" % path)
    expected_cols = 1 + 3 * N_JOINTS
    header = lines[0].split(",")
    if len(header) != expected_cols or header[0] != "frame":
        raise DomainError("unexpected skeleton CSV header in %s" % path)
    ids, out = [], []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != expected_cols:
            raise DomainError("malformed skeleton CSV row in %s" % path)
        ids.append(int(cells[0]))
        out.append(Skeleton3D(np.array([float(c) for c in cells[1:]]).reshape(N_JOINTS, 3)))
    return ids, out
