"""Gradient-check registry covering every differentiable operation.

Each factory draws a random instance (inputs scaled to order one, kinks
avoided) and returns a scalar-valued forward closure. The CLI `gradcheck`
subcommand and the acceptance suite run these through central finite
differences. Forward closures must be deterministic across repeated calls,
so any random scalarization weights are frozen on first use.
"""

from __future__ import annotations

import numpy as np

from . import geometry as geo
from . import image as img_mod
from . import pose as pose_mod
from . import sfm as sfm_mod
from . import training
from .autodiff import ops
from .autodiff.gradcheck import CheckCase, CheckRegistry
from .autodiff.tensor import Tensor, lift

REGISTRY = CheckRegistry()
register = REGISTRY.register


def _leaf(rng, shape, lo=-1.0, hi=1.0, name=None) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, name=name)


class _Scalarize:
    """Weighted sum with weights frozen on first use.

    A check case's forward closure runs once tracked and then twice per
    finite-difference coordinate; freezing keeps it deterministic while
    adapting to the output shape.
    """

    def __init__(self, rng):
        self._rng = rng
        self._w = None

    def __call__(self, t: Tensor) -> Tensor:
        if self._w is None:
            self._w = self._rng.normal(size=t.shape)
        return ops.reduce_sum(ops.mul(t, self._w))


def _away_from(values, kink, min_dist):
    return np.where(np.abs(values - kink) < min_dist,
                    values + 2 * min_dist, values)


def _smooth_instance(build, kink_margin=1e-3, var_floor=1e-2, tries=80):
    """Resample an instance until a probe forward shows safe kink margins.

    Central differences at h=1e-5 only estimate a derivative away from
    activation kinks, bilinear cell edges, and epsilon-dominated
    normalization; the margins leave two orders of magnitude of headroom
    over the stencil displacement.
    """
    case = build()
    for _ in range(tries):
        with ops.margin_monitor() as m:
            case.forward()
        if m.min_kink > kink_margin and m.min_norm_var > var_floor:
            break
        case = build()
    return case


def _jitter_params(net, rng, scale=0.3):
    """Move freshly built nets off their deterministic initialization.

    Zero biases put pre-activations of constant input regions exactly on
    activation kinks, where one-sided tape gradients and two-sided finite
    differences legitimately disagree; random weights make that a
    measure-zero event.
    """
    for p in net.params():
        p.data = p.data + rng.normal(0.0, scale, size=p.data.shape)
    return net


# --- core elementwise / reductions -----------------------------------------


@register("matmul")
def _c_matmul(rng):
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (4, 2))
    ws = _Scalarize(rng)
    return CheckCase([a, b], lambda: ws(ops.matmul(a, b)))


def _unary_factory(name, lo, hi):
    fn = getattr(ops, name)

    @register(name)
    def _case(rng, fn=fn, lo=lo, hi=hi):
        a = _leaf(rng, (3, 5), lo, hi)
        ws = _Scalarize(rng)
        return CheckCase([a], lambda: ws(fn(a)))


for _name, _lo, _hi in [("exp", -1.0, 1.0), ("sigmoid", -2.0, 2.0),
                        ("square", -1.0, 1.0), ("sin", -2.0, 2.0),
                        ("cos", -2.0, 2.0), ("tanh", -2.0, 2.0)]:
    _unary_factory(_name, _lo, _hi)


@register("log")
def _c_log(rng):
    a = _leaf(rng, (3, 5), 0.2, 3.0)
    ws = _Scalarize(rng)
    return CheckCase([a], lambda: ws(ops.log(a)))


@register("sqrt")
def _c_sqrt(rng):
    a = _leaf(rng, (3, 5), 0.2, 3.0)
    ws = _Scalarize(rng)
    return CheckCase([a], lambda: ws(ops.sqrt(a)))


@register("abs")
def _c_abs(rng):
    a = Tensor(_away_from(rng.uniform(-1, 1, (3, 5)), 0.0, 0.05),
               requires_grad=True)
    ws = _Scalarize(rng)
    return CheckCase([a], lambda: ws(ops.absolute(a)))


@register("leaky_relu")
def _c_leaky(rng):
    a = Tensor(_away_from(rng.uniform(-1, 1, (3, 5)), 0.0, 0.05),
               requires_grad=True)
    ws = _Scalarize(rng)
    return CheckCase([a], lambda: ws(ops.leaky_relu(a, 0.2)))


@register("add")
def _c_add(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    s = _leaf(rng, ())
    ws = _Scalarize(rng)
    return CheckCase([a, b, s], lambda: ws(ops.add(ops.add(a, b), s)))


@register("sub")
def _c_sub(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    ws = _Scalarize(rng)
    return CheckCase([a, b], lambda: ws(ops.sub(a, b)))


@register("mul")
def _c_mul(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    s = _leaf(rng, ())
    ws = _Scalarize(rng)
    return CheckCase([a, b, s], lambda: ws(ops.mul(ops.mul(a, b), s)))


@register("div")
def _c_div(rng):
    a = _leaf(rng, (2, 3))
    b = Tensor(rng.uniform(0.5, 2.0, (2, 3)) * rng.choice([-1.0, 1.0], (2, 3)),
               requires_grad=True)
    ws = _Scalarize(rng)
    return CheckCase([a, b], lambda: ws(ops.div(a, b)))


@register("clip")
def _c_clip(rng):
    a = Tensor(rng.uniform(0.1, 0.9, (8,)), requires_grad=True)
    ws = _Scalarize(rng)
    return CheckCase([a], lambda: ws(ops.clip(a, 0.0, 1.0)))


@register("reduce_sum")
def _c_sum(rng):
    a = _leaf(rng, (3, 4, 2))
    ws = _Scalarize(rng)
    return CheckCase([a], lambda: ws(ops.reduce_sum(a, axes=(1,))))


@register("reduce_mean")
def _c_mean(rng):
    a = _leaf(rng, (3, 4))
    ws = _Scalarize(rng)
    return CheckCase([a], lambda: ws(ops.reduce_mean(a, axes=(0,))))


@register("l1_norm")
def _c_l1(rng):
    a = Tensor(_away_from(rng.uniform(-1, 1, (3, 4)), 0.0, 0.05),
               requires_grad=True)
    return CheckCase([a], lambda: ops.l1_norm(a))


@register("l2_norm")
def _c_l2(rng):
    a = _leaf(rng, (3, 4), 0.3, 1.0)
    return CheckCase([a], lambda: ops.l2_norm(a))


@register("bias_add")
def _c_bias(rng):
    x = _leaf(rng, (3, 4, 2))
    b = _leaf(rng, (3,))
    ws = _Scalarize(rng)
    return CheckCase([x, b], lambda: ws(ops.bias_add(x, b)))


@register("standardize")
def _c_standardize(rng):
    x = _leaf(rng, (3, 5, 4))
    ws = _Scalarize(rng)
    return CheckCase([x], lambda: ws(ops.standardize(x, (1, 2))))


@register("reshape_transpose_concat_slice")
def _c_structure(rng):
    a, b = _leaf(rng, (2, 6)), _leaf(rng, (3, 6))
    ws = _Scalarize(rng)

    def fwd():
        c = ops.concat([a, b], axis=0)
        c = ops.transpose(c)
        c = ops.slice_axis(c, 0, 1, 5)
        return ws(ops.reshape(c, (4, 5)))

    return CheckCase([a, b], fwd)


@register("conv2d")
def _c_conv(rng):
    x = _leaf(rng, (1, 5, 5))
    k = _leaf(rng, (1, 1, 3, 3))
    ws = _Scalarize(rng)
    return CheckCase([x, k], lambda: ws(ops.conv2d(x, k, 1, 1)))


@register("conv2d_strided")
def _c_conv_strided(rng):
    x = _leaf(rng, (2, 6, 6))
    k = _leaf(rng, (3, 2, 3, 3))
    ws = _Scalarize(rng)
    return CheckCase([x, k], lambda: ws(ops.conv2d(x, k, 2, 1)))


@register("conv2d_transpose")
def _c_convt(rng):
    x = _leaf(rng, (2, 3, 3))
    k = _leaf(rng, (2, 2, 4, 4))
    ws = _Scalarize(rng)
    return CheckCase([x, k], lambda: ws(ops.conv2d_transpose(x, k, 2, 1)))


@register("avg_pool2d")
def _c_pool(rng):
    x = _leaf(rng, (2, 8, 8))
    ws = _Scalarize(rng)
    return CheckCase([x], lambda: ws(ops.avg_pool2d(x, 2, 2)))


@register("upsample_nearest")
def _c_upsample(rng):
    x = _leaf(rng, (2, 3, 3))
    ws = _Scalarize(rng)
    return CheckCase([x], lambda: ws(ops.upsample_nearest(x, 2)))


@register("bilinear_sample")
def _c_bilinear(rng):
    img = _leaf(rng, (2, 6, 6))
    # interior, non-integer coordinates only
    raw = rng.uniform(0.3, 4.7, size=(2, 3, 3))
    raw = _away_from(raw, np.round(raw), 0.08)
    coords = Tensor(raw, requires_grad=True)
    ws = _Scalarize(rng)
    return CheckCase([img, coords], lambda: ws(ops.bilinear_sample(img, coords)))


# --- renderers ---------------------------------------------------------------


@register("euler_to_rotation")
def _c_euler(rng):
    a, b, c = (_leaf(rng, (), -1.5, 1.5) for _ in range(3))
    ws = _Scalarize(rng)

    def fwd():
        return ws(geo.euler_to_rotation(geo.EulerAngles(a, b, c)))

    return CheckCase([a, b, c], fwd)


@register("project_points")
def _c_project(rng):
    pts = Tensor(np.vstack([rng.uniform(-1, 1, (2, 6)),
                            rng.uniform(2.0, 5.0, (1, 6))]), requires_grad=True)
    f = _leaf(rng, (), 30.0, 60.0)
    ws = _Scalarize(rng)

    def fwd():
        return ws(geo.project_points(pts, geo.CameraIntrinsics(f, 3.0, 2.0)))

    return CheckCase([pts, f], fwd)


@register("depth_to_pointcloud")
def _c_d2pc(rng):
    logd = _leaf(rng, (4, 5), 0.5, 1.5)
    cam = geo.CameraIntrinsics(10.0, 2.0, 1.5)
    ws = _Scalarize(rng)

    def fwd():
        return ws(geo.depth_to_pointcloud(geo.DepthMap(logd), cam).xyz)

    return CheckCase([logd], fwd)


@register("rigid_transform")
def _c_rigid(rng):
    pts = _leaf(rng, (3, 8))
    a, b, c = (_leaf(rng, (), -0.5, 0.5) for _ in range(3))
    t = _leaf(rng, (3,))
    ws = _Scalarize(rng)

    def fwd():
        r = geo.euler_to_rotation(geo.EulerAngles(a, b, c))
        pc = geo.PointCloud(pts, (2, 4))
        return ws(geo.rigid_transform(pc, geo.SE3Motion(r, t)).xyz)

    return CheckCase([pts, a, b, c, t], fwd)


@register("pointcloud_to_flow")
def _c_flow(rng):
    h, w = 4, 5
    logd = _leaf(rng, (h, w), 1.0, 2.0)
    a, b, c = (_leaf(rng, (), -0.02, 0.02) for _ in range(3))
    t = Tensor(np.array([*rng.uniform(-0.2, 0.2, 2), rng.uniform(-0.5, -0.1)]),
               requires_grad=True)
    cam = geo.CameraIntrinsics(float(w), (w - 1) / 2, (h - 1) / 2)
    ws = _Scalarize(rng)

    def fwd():
        pc = geo.depth_to_pointcloud(geo.DepthMap(logd), cam)
        r = geo.euler_to_rotation(geo.EulerAngles(a, b, c))
        return ws(geo.pointcloud_to_flow(pc, geo.SE3Motion(r, t), cam).uv)

    return CheckCase([logd, a, b, c, t], fwd)


@register("photometric_loss")
def _c_photo(rng):
    def build():
        h, w = 6, 6
        i1 = Tensor(rng.uniform(0.2, 0.8, (1, h, w)), requires_grad=True)
        i2 = Tensor(rng.uniform(0.2, 0.8, (1, h, w)), requires_grad=True)
        raw = rng.uniform(-0.8, 0.8, size=(2, h, w))
        grid = geo.pixel_grid(h, w)
        coords = grid + raw
        # keep warps interior and off the integer lattice so the validity mask
        # and bilinear cells cannot flip inside the finite-difference stencil
        coords = np.clip(coords, 0.3, np.array([w, h]).reshape(2, 1, 1) - 1.3)
        coords = _away_from(coords, np.round(coords), 0.08)
        uv = Tensor(coords - grid, requires_grad=True)

        def fwd():
            return geo.photometric_loss(i1, i2, geo.FlowField(uv))

        return CheckCase([i1, i2, uv], fwd)

    return _smooth_instance(build)


@register("downsample4x")
def _c_down4(rng):
    x = _leaf(rng, (1, 8, 8))
    ws = _Scalarize(rng)
    return CheckCase([x], lambda: ws(geo.downsample4x(x)))


@register("apply_mask")
def _c_mask(rng):
    x = _leaf(rng, (1, 4, 4))
    mask = (rng.uniform(size=(4, 4)) > 0.4).astype(np.float64)
    mask[0, 0] = 1.0
    ws = _Scalarize(rng)
    return CheckCase([x], lambda: ws(geo.apply_mask(x, mask)))


# --- pose --------------------------------------------------------------------


def _tiny_basis(rng):
    q, _ = np.linalg.qr(rng.normal(size=(96, 96)))
    vectors = q[:, :12].T
    variances = np.sort(rng.uniform(0.5, 2.0, 12))[::-1]
    return pose_mod.ShapeBasis(rng.normal(0, 100.0, 96), vectors, variances)


@register("decode_shape")
def _c_decode(rng):
    basis = _tiny_basis(rng)
    w = _leaf(rng, (12, 1), -50.0, 50.0)
    ws = _Scalarize(rng)
    return CheckCase([w], lambda: ws(pose_mod.decode_shape(w, basis)))


@register("reprojection_loss")
def _c_reproj(rng):
    basis = _tiny_basis(rng)
    w = Tensor(rng.normal(0, 30.0, (12, 1)), requires_grad=True)
    fraw = _leaf(rng, (), -0.2, 0.2)
    a, b, c = (_leaf(rng, (), -0.5, 0.5) for _ in range(3))
    tr = _leaf(rng, (2, 1), -2.0, 2.0)
    target = rng.uniform(0, 32, (2, 32))
    cam = geo.CameraIntrinsics(55.0, 16.0, 16.0)

    def fwd():
        params = pose_mod.PoseParams(
            w=w, f=ops.mul(ops.exp(fraw), 55.0),
            angles=geo.EulerAngles(a, b, c), trans=tr)
        return pose_mod.reprojection_loss(params, target, basis, cam)

    return CheckCase([w, fraw, a, b, c, tr], fwd)


@register("pose_generator")
def _c_pose_gen(rng):
    def build():
        net = _jitter_params(pose_mod.PoseGenerator(rng, (8, 8), n_basis=6,
                                                     widths=(4, 4), fc_width=16), rng)
        hm = rng.uniform(0, 1, (32, 8, 8))
        weights = rng.normal(size=(net.n_out, 1))

        def fwd():
            out = net(hm)
            return ops.reduce_sum(ops.mul(out.raw, weights))

        return CheckCase(net.params(), fwd)

    return _smooth_instance(build)


@register("pose_discriminator")
def _c_pose_disc(rng):
    def build():
        net = _jitter_params(pose_mod.PoseDiscriminator(rng, widths=(16, 16, 8, 8)), rng)
        skel = Tensor(rng.normal(0, 300.0, (3, 32)), requires_grad=True)

        def fwd():
            return ops.reshape(net(skel), ())

        return CheckCase([skel] + net.params(), fwd)

    return _smooth_instance(build)


# --- sfm ----------------------------------------------------------------------


@register("egomotion_net")
def _c_ego(rng):
    def build():
        net = _jitter_params(sfm_mod.EgomotionNet(rng, (8, 8), widths=(4, 4)), rng)
        spec_cam = geo.CameraIntrinsics(8.0, 3.5, 3.5)
        i1 = rng.uniform(0.2, 0.8, (1, 8, 8))
        i2 = rng.uniform(0.2, 0.8, (1, 8, 8))
        uv = rng.uniform(-0.5, 0.5, (2, 8, 8))
        inp = sfm_mod.make_sfm_input(i1, i2, geo.FlowField(uv), spec_cam)
        weights = rng.normal(size=3)
        tw = rng.normal(size=(3, 1))

        def fwd():
            m = net(inp)
            s = ops.mul(lift(m.euler.alpha), weights[0])
            s = ops.add(s, ops.mul(lift(m.euler.beta), weights[1]))
            s = ops.add(s, ops.mul(lift(m.euler.gamma), weights[2]))
            return ops.add(s, ops.reduce_sum(ops.mul(m.T, tw)))

        return CheckCase(net.params(), fwd)

    return _smooth_instance(build)


@register("depth_net")
def _c_depth_net(rng):
    def build():
        net = _jitter_params(sfm_mod.DepthNet(rng, (8, 8), widths=(4, 8)), rng)
        i1 = rng.uniform(0.2, 0.8, (1, 8, 8))
        weights = rng.normal(size=(8, 8))

        def fwd():
            d = net(i1)
            return ops.reduce_sum(ops.mul(d.log_depth, weights))

        return CheckCase(net.params(), fwd)

    return _smooth_instance(build)


@register("sfm_reconstruction_loss")
def _c_sfm_loss(rng):
    h = w = 8
    cam = geo.CameraIntrinsics(float(w), (w - 1) / 2, (h - 1) / 2)

    def build():
        # Lateral-dominant translation: a forward-dominant one has a focus
        # of expansion with near-zero flow, which parks warped coordinates
        # on the bilinear lattice where finite differences are invalid.
        logd = Tensor(rng.uniform(1.5, 2.0, (h, w)), requires_grad=True)
        a, b, c = (_leaf(rng, (), -0.01, 0.01) for _ in range(3))
        t = Tensor(np.array([float(rng.choice([-1.0, 1.0]))
                             * rng.uniform(0.25, 0.45),
                             rng.uniform(-0.08, 0.08),
                             rng.uniform(-0.05, 0.05)]), requires_grad=True)
        i1 = rng.uniform(0.2, 0.8, (1, h, w))
        i2 = rng.uniform(0.2, 0.8, (1, h, w))
        inp = sfm_mod.make_sfm_input(i1, i2,
                                     geo.FlowField(np.zeros((2, h, w))), cam)

        def fwd():
            rr = geo.euler_to_rotation(geo.EulerAngles(a, b, c))
            return sfm_mod.sfm_reconstruction_loss(
                inp, geo.DepthMap(logd), geo.SE3Motion(rr, t), cam)

        return CheckCase([logd, a, b, c, t], fwd)

    return _smooth_instance(build)


@register("camera_discriminator")
def _c_cam_disc(rng):
    def build():
        net = _jitter_params(sfm_mod.CameraMotionDiscriminator(rng, widths=(16, 16, 8)), rng)
        vec = Tensor(rng.normal(0, 0.3, (6,)), requires_grad=True)

        def fwd():
            return ops.reshape(net(vec), ())

        return CheckCase([vec] + net.params(), fwd)

    return _smooth_instance(build)


@register("depth_discriminator")
def _c_depth_disc(rng):
    def build():
        net = _jitter_params(sfm_mod.DepthDiscriminator(rng, widths=(4, 8, 8)), rng)
        logd = Tensor(rng.uniform(1.0, 3.0, (16, 16)), requires_grad=True)

        def fwd():
            return ops.reduce_mean(net(logd))

        return CheckCase([logd] + net.params(), fwd)

    return _smooth_instance(build)


# --- image --------------------------------------------------------------------


@register("sr_generator")
def _c_sr_gen(rng):
    def build():
        net = _jitter_params(img_mod.SrGenerator(
            rng, img_mod.ResidualGeneratorConfig(n_blocks=1, width=4)), rng)
        low = rng.uniform(0.2, 0.8, (1, 4, 4))
        weights = rng.normal(size=(1, 16, 16))

        def fwd():
            return ops.reduce_sum(ops.mul(net(low), weights))

        return CheckCase(net.params(), fwd)

    return _smooth_instance(build)


@register("sr_reconstruction_loss")
def _c_sr_loss(rng):
    low = rng.uniform(0.2, 0.8, (1, 4, 4))
    pred = Tensor(rng.uniform(0.2, 0.8, (1, 16, 16)), requires_grad=True)
    return CheckCase([pred],
                     lambda: img_mod.sr_reconstruction_loss(low, pred))


@register("inpaint_generator")
def _c_inpaint_gen(rng):
    def build():
        net = _jitter_params(img_mod.InpaintGenerator(rng, (8, 8), width=4), rng)
        # A scattered mask keeps every feature channel variance-rich; a solid
        # block leaves channels nearly constant, where the normalization
        # epsilon dominates and finite differences get noisy.
        m = (rng.uniform(size=(8, 8)) > 0.4).astype(np.float64)
        m[0, 0], m[-1, -1] = 1.0, 0.0
        mask = img_mod.MaskSpec(m, region="scatter")
        x = rng.uniform(0.2, 0.8, (1, 8, 8)) * mask.mask[None]
        weights = rng.normal(size=(1, 8, 8))

        def fwd():
            return ops.reduce_sum(ops.mul(net(x, mask), weights))

        return CheckCase(net.params(), fwd)

    return _smooth_instance(build)


@register("inpaint_reconstruction_loss")
def _c_inpaint_loss(rng):
    mask = img_mod.rect_mask(6, 6, (1, 1, 3, 3))
    x = rng.uniform(0.2, 0.8, (1, 6, 6)) * mask.mask[None]
    pred = Tensor(rng.uniform(0.2, 0.8, (1, 6, 6)), requires_grad=True)
    return CheckCase([pred],
                     lambda: img_mod.inpaint_reconstruction_loss(x, pred, mask))


@register("image_discriminator")
def _c_img_disc(rng):
    def build():
        net = _jitter_params(img_mod.ImageDiscriminator(rng, (8, 8), widths=(4, 8)), rng)
        x = Tensor(rng.uniform(0.2, 0.8, (1, 8, 8)), requires_grad=True)

        def fwd():
            return ops.reshape(net(x), ())

        return CheckCase([x] + net.params(), fwd)

    return _smooth_instance(build)


# --- adversarial losses --------------------------------------------------------


@register("discriminator_loss")
def _c_disc_loss(rng):
    pr = Tensor(rng.uniform(0.1, 0.9, (6, 1)), requires_grad=True)
    pf = Tensor(rng.uniform(0.1, 0.9, (6, 1)), requires_grad=True)
    return CheckCase([pr, pf],
                     lambda: training.discriminator_loss(pr, pf))


@register("generator_adversarial_loss")
def _c_gen_loss(rng):
    pf = Tensor(rng.uniform(0.1, 0.9, (6, 1)), requires_grad=True)
    mode = "nonsaturating" if rng.uniform() < 0.5 else "saturating"
    return CheckCase([pf],
                     lambda: training.generator_adversarial_loss(pf, mode))


@register("total_generator_loss")
def _c_total_loss(rng):
    recon = _leaf(rng, (), 0.1, 2.0)
    adv = _leaf(rng, (), -1.0, 1.0)
    beta = float(rng.uniform(0.0, 1.0))
    return CheckCase([recon, adv],
                     lambda: training.total_generator_loss(recon, adv, beta))
