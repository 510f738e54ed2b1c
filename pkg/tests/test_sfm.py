"""Depth/egomotion nets, reconstruction loss, discriminators, metrics."""

import numpy as np
import pytest

from invgfx import geometry as geo
from invgfx import sfm, synth
from invgfx.autodiff import OptimizerState, Tape, ops
from invgfx.errors import DimensionError, DomainError
from invgfx.training import discriminator_loss, rng_for


@pytest.fixture(scope="module")
def scene():
    return synth.synth_pinhole_pair(synth.PinholeSceneSpec(),
                                    np.random.default_rng(42))


class TestEgomotion:
    def test_zeroed_final_layer_gives_identity(self, scene):
        net = sfm.EgomotionNet(rng_for(0, "ego"), (32, 32), widths=(4, 8))
        net.fc.w.data[:] = 0.0
        net.fc.b.data[:] = 0.0
        m = net(scene.inp)
        assert np.allclose(m.rotation, np.eye(3), atol=1e-15)
        assert np.allclose(m.translation, 0.0, atol=1e-15)

    def test_output_rotation_always_valid(self, scene):
        for seed in range(5):
            net = sfm.EgomotionNet(rng_for(seed, "ego"), (32, 32), widths=(4, 8))
            m = net(scene.inp)  # SE3Motion validates orthonormality on build
            r = m.rotation
            assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-9

    def test_channel_order_is_documented_concat(self, scene):
        stacked = scene.inp.stacked_channels()
        assert stacked.shape[0] == 6
        assert np.array_equal(stacked[0], scene.inp.i1[0])
        assert np.array_equal(stacked[1], scene.inp.i2[0])
        assert np.array_equal(stacked[2], scene.inp.flow.u)
        assert np.array_equal(stacked[3], scene.inp.flow.v)
        assert np.array_equal(stacked[4], scene.inp.flow_angle)
        assert np.array_equal(stacked[5], scene.inp.angles)


class TestDepthNet:
    def test_positivity_and_shape(self, scene):
        for seed in range(4):
            net = sfm.DepthNet(rng_for(seed, "d"), (32, 32), widths=(4, 8))
            d = net(scene.inp.i1)
            assert d.shape == (32, 32)
            assert np.all(d.depth_values() > 0.0)
            assert np.all(np.abs(d.log_values()) <= sfm.LOG_DEPTH_BOUND)

    def test_overfit_single_image(self, scene):
        net = sfm.DepthNet(rng_for(7, "overfit"), (32, 32), widths=(6, 12))
        opt = OptimizerState(net.params(), lr=3e-3)
        target = scene.depth.log_values()
        loss_val = None
        for step in range(1500):
            with Tape() as tape:
                d = net(scene.inp.i1)
                loss = ops.reduce_mean(ops.absolute(ops.sub(d.log_depth,
                                                            target)))
            loss_val = loss.item()
            if loss_val < 0.02:
                break
            tape.backward(loss)
            opt.step()
        assert loss_val < 0.02, "log-L1 stayed at %r" % loss_val

    def test_wrong_extents_rejected(self):
        net = sfm.DepthNet(rng_for(0, "d"), (32, 32), widths=(4, 8))
        with pytest.raises(DimensionError):
            net(np.zeros((1, 16, 16)))


class TestReconstructionLoss:
    def test_zero_at_ground_truth(self, scene):
        loss = sfm.sfm_reconstruction_loss(scene.inp, scene.depth,
                                           scene.motion, scene.cam)
        assert loss.item() < 1e-6

    def test_identity_motion_same_frames_any_depth(self, rng):
        img = rng.uniform(0, 1, (1, 16, 16))
        cam = geo.CameraIntrinsics(16.0, 7.5, 7.5)
        inp = sfm.make_sfm_input(img, img,
                                 geo.FlowField(np.zeros((2, 16, 16))), cam)
        for _ in range(3):
            d = geo.DepthMap(rng.uniform(0.5, 3.0, (16, 16)))
            loss = sfm.sfm_reconstruction_loss(inp, d, geo.SE3Motion.identity(),
                                               cam)
            assert loss.item() < 1e-12

    def test_scale_family_invariance(self, scene):
        base = sfm.sfm_reconstruction_loss(scene.inp, scene.depth,
                                           scene.motion, scene.cam).item()
        for s in (0.5, 2.0, 10.0):
            d = geo.DepthMap(scene.depth.log_values() + np.log(s))
            m = geo.SE3Motion(scene.motion.rotation, scene.motion.translation * s,
                              euler=scene.motion.euler)
            val = sfm.sfm_reconstruction_loss(scene.inp, d, m, scene.cam).item()
            assert abs(val - base) < 1e-9

    def test_tv_smoothness_scale_free(self, rng):
        logd = rng.normal(1.0, 0.3, (16, 16))
        a = sfm.tv_smoothness(geo.DepthMap(logd)).item()
        b = sfm.tv_smoothness(geo.DepthMap(logd + np.log(10.0))).item()
        assert a == pytest.approx(b, rel=1e-12)


class TestCameraDiscriminator:
    def test_range(self, rng):
        net = sfm.CameraMotionDiscriminator(rng_for(0, "cd"))
        for _ in range(10):
            p = net(rng.normal(0, 0.5, 6)).item()
            assert 0.0 < p < 1.0

    def test_carlike_vs_tumbling_separation(self):
        rng = np.random.default_rng(1)
        net = sfm.CameraMotionDiscriminator(rng_for(1, "cd"), widths=(32, 32, 16))
        opt = OptimizerState(net.params(), lr=3e-3)

        def carlike():
            return np.array([rng.uniform(-0.01, 0.01), rng.uniform(-0.05, 0.05),
                             rng.uniform(-0.01, 0.01),
                             rng.normal(0, 0.05), rng.normal(0, 0.02),
                             -rng.uniform(0.2, 0.6)])

        def tumbling():
            return rng.normal(0, 1.2, 6)

        for _ in range(200):
            with Tape() as tape:
                pr = ops.concat([ops.reshape(net(carlike()), (1,))
                                 for _ in range(6)], 0)
                pf = ops.concat([ops.reshape(net(tumbling()), (1,))
                                 for _ in range(6)], 0)
                loss = discriminator_loss(ops.reshape(pr, (6, 1)),
                                          ops.reshape(pf, (6, 1)))
            tape.backward(loss)
            opt.step()
        car_scores = [net(carlike()).item() for _ in range(40)]
        tumble_scores = [net(tumbling()).item() for _ in range(40)]
        assert np.mean(car_scores) > np.mean(tumble_scores)

    def test_se3_input_requires_euler(self):
        net = sfm.CameraMotionDiscriminator(rng_for(0, "cd"))
        m = geo.SE3Motion(np.eye(3), np.zeros(3))  # no euler stored
        with pytest.raises(DomainError):
            net(m)


class TestDepthDiscriminator:
    def test_probability_grid(self, rng):
        net = sfm.DepthDiscriminator(rng_for(0, "dd"))
        out = net(rng.normal(2.0, 0.5, (32, 32)))
        assert out.shape == (1,) + sfm.DepthDiscriminator.grid_shape(32, 32)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_grid_shape_formula(self):
        assert sfm.DepthDiscriminator.grid_shape(32, 32) == (3, 3)
        assert sfm.DepthDiscriminator.grid_shape(16, 16) == (1, 1)
        assert sfm.DepthDiscriminator.grid_shape(40, 24) == (4, 2)

    def test_below_receptive_field_rejected(self, rng):
        net = sfm.DepthDiscriminator(rng_for(0, "dd"))
        with pytest.raises(DimensionError):
            net(rng.normal(size=(8, 8)))

    def test_scale_separation(self):
        rng = np.random.default_rng(2)
        net = sfm.DepthDiscriminator(rng_for(2, "dd"), widths=(4, 8, 8))
        opt = OptimizerState(net.params(), lr=3e-3)

        def real_map():
            return np.log(rng.uniform(8.0, 14.0, (16, 16)))

        def fake_map():
            return np.log(rng.uniform(800.0, 1400.0, (16, 16)))

        for _ in range(220):
            with Tape() as tape:
                pr = ops.concat([ops.flatten_column(net(real_map()))
                                 for _ in range(4)], 0)
                pf = ops.concat([ops.flatten_column(net(fake_map()))
                                 for _ in range(4)], 0)
                loss = discriminator_loss(pr, pf)
            tape.backward(loss)
            opt.step()
        mean_real = np.mean([net(real_map()).data.mean() for _ in range(20)])
        mean_fake = np.mean([net(fake_map()).data.mean() for _ in range(20)])
        assert mean_real - mean_fake > 0.5


class TestMetrics:
    def test_identity_errors_zero(self, rng):
        ang = geo.EulerAngles(0.02, -0.3, 0.01)
        m = geo.SE3Motion(geo.rotation_matrix(ang), rng.normal(size=3),
                          euler=ang)
        errs = sfm.camera_motion_errors(m, m)
        assert errs.dist_err == 0.0 and errs.rot_err == 0.0
        assert errs.trl_ang_err == 0.0 and errs.trl_mag_err == 0.0

    def test_collinear_scaling(self):
        tg = np.array([0.0, 0.0, 2.0])
        gt = geo.SE3Motion(np.eye(3), tg)
        pred = geo.SE3Motion(np.eye(3), 2.0 * tg)
        errs = sfm.camera_motion_errors(pred, gt)
        assert errs.trl_ang_err == 0.0
        assert errs.trl_mag_err == pytest.approx(np.linalg.norm(tg))
        assert errs.dist_err == pytest.approx(np.linalg.norm(tg))

    def test_constructed_rotation_perturbation(self, rng):
        base = geo.rotation_matrix(geo.EulerAngles(0.1, 0.4, -0.2))
        bump = geo.rotation_matrix(geo.EulerAngles(0.1, 0.0, 0.0))
        pred = geo.SE3Motion(base @ bump, np.zeros(3))
        gt = geo.SE3Motion(base, np.zeros(3))
        errs = sfm.camera_motion_errors(pred, gt)
        assert errs.rot_err == pytest.approx(0.1, abs=1e-9)

    def test_rotation_error_symmetric(self, rng):
        a = geo.SE3Motion(geo.rotation_matrix(
            geo.EulerAngles(*rng.uniform(-1, 1, 3))), rng.normal(size=3))
        b = geo.SE3Motion(geo.rotation_matrix(
            geo.EulerAngles(*rng.uniform(-1, 1, 3))), rng.normal(size=3))
        assert (sfm.camera_motion_errors(a, b).rot_err
                == pytest.approx(sfm.camera_motion_errors(b, a).rot_err))

    def test_near_zero_translation_angle_zero(self):
        gt = geo.SE3Motion(np.eye(3), np.array([1e-12, 0.0, 0.0]))
        pred = geo.SE3Motion(np.eye(3), np.array([0.0, 1.0, 0.0]))
        assert sfm.camera_motion_errors(pred, gt).trl_ang_err == 0.0

    def test_logdepth_error(self, rng):
        gt = rng.uniform(1.0, 5.0, (8, 8))
        assert sfm.logdepth_error(gt, gt) == 0.0
        assert sfm.logdepth_error(np.e * gt, gt) == pytest.approx(1.0)
        pred = rng.uniform(1.0, 5.0, (8, 8))
        expect = np.mean(np.abs(np.log(pred) - np.log(gt)))
        assert sfm.logdepth_error(pred, gt) == pytest.approx(expect, rel=1e-15)

    def test_logdepth_nonpositive_gt_rejected(self, rng):
        with pytest.raises(DomainError):
            sfm.logdepth_error(np.ones((2, 2)), np.array([[1.0, -1.0],
                                                          [1.0, 1.0]]))
