"""Experiment orchestration: task adapters, runners, dataset export, eval.

Each task bundles a synthetic world, generator/discriminator nets, and the
closures the shared training loop needs. Every artifact a run emits
(metrics.csv, checkpoints, eval.json, provenance config copy) is a pure
function of (config, seed).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import containers, sfm
from .autodiff import Tape, nn, ops
from .autodiff.tensor import Tensor, lift, parameter
from .config import ExperimentConfig, from_dict
from .errors import ConfigError, DomainError
from .geometry import CameraIntrinsics, DepthMap, EulerAngles, SE3Motion
from .image import (
    ImageDiscriminator,
    InpaintGenerator,
    MaskSpec,
    ResidualGeneratorConfig,
    SrGenerator,
    curate_bias,
    inpaint_reconstruction_loss,
    rect_mask,
    sr_reconstruction_loss,
)
from .pose import (
    PoseDiscriminator,
    PoseGenerator,
    ShapeBasis,
    Skeleton3D,
    keypoints_to_heatmaps,
    mean_reprojection_px,
    posed_keypoints,
    reconstruction_error_3d,
    reprojection_loss,
    save_skeletons_csv,
)
from .synth import (
    PinholeSceneSpec,
    SkeletonAugmentSpec,
    ToyFaceSpec,
    build_memory_banks,
    mouth_radius_probe,
    synth_pose_dataset,
    synth_sfm_dataset,
    synth_toy_faces,
)
from .training import (
    DiscriminatorSpec,
    MemoryBank,
    MemoryItem,
    TaskAdapter,
    TrainState,
    rng_for,
    train_loop,
)

EVAL_SUBSET = 48


@dataclass
class TaskBundle:
    adapter: TaskAdapter
    banks: Dict[str, MemoryBank]
    evaluate: Callable[[], dict]
    export_dataset: Callable[[str], None]


# ---------------------------------------------------------------------------
# pose task


class PoseTask(TaskAdapter):
    name = "pose"

    def __init__(self, cfg: ExperimentConfig):
        seed = cfg["seed"]
        size = cfg["pose.image_size"]
        self.spec = SkeletonAugmentSpec(
            perturb_std_mm=cfg["pose.perturb_std"],
            focal_range=(cfg["pose.focal_lo"], cfg["pose.focal_hi"]),
            image_hw=(size, size),
        )
        self.cam = self.spec.camera()
        self.sigma = cfg["pose.sigma"]
        self.samples, self.basis = synth_pose_dataset(
            self.spec, cfg["pose.samples"], seed, basis_k=cfg["pose.basis_k"])
        bank_samples, _ = synth_pose_dataset(
            self.spec, cfg["pose.bank_size"], seed + 104729, basis=self.basis)
        self.disc_mode = cfg["pose.disc_mode"]
        self.predict_translation = cfg["pose.predict_translation"]

        width = cfg["pose.gen_width"]
        self.gen = PoseGenerator(
            rng_for(seed, "pose/init_gen"), (size, size),
            n_basis=self.basis.k, widths=(width, 2 * width, 2 * width),
            f_ref=float(np.mean(self.spec.focal_range)),
            predict_translation=self.predict_translation,
            normalize=cfg["pose.normalize"],
            w_scales=np.sqrt(self.basis.variances))
        dwidth = cfg["pose.disc_width"]
        self.disc = PoseDiscriminator(
            rng_for(seed, "pose/init_disc"), mode=self.disc_mode,
            n_params=self.gen.n_out,
            widths=(dwidth * 2, dwidth * 2, dwidth, dwidth))

        items = []
        for s in bank_samples:
            if self.disc_mode == "keypoints":
                from .pose import decode_shape

                value = decode_shape(s.params.w, self.basis).data.T.copy()
            else:
                vec = s.params.numpy_vector(self.gen.f_ref,
                                             self.gen.w_scales)
                value = vec[: self.gen.n_out]
            items.append(MemoryItem(s.sample_id, value))
        self.banks = build_memory_banks({"skeletons": items})
        self.eval_idx = list(range(min(EVAL_SUBSET, len(self.samples))))

    def _heatmaps(self, sample):
        h, w = self.spec.image_hw
        return keypoints_to_heatmaps(sample.target2d.T, h, w, sigma=self.sigma)

    def sample_batch(self, rng, size):
        idx = rng.integers(0, len(self.samples), size=size)
        return [self.samples[int(i)] for i in idx]

    def generator_params(self):
        return self.gen.params()

    def _fake_latent(self, params):
        if self.disc_mode == "keypoints":
            # The critic judges the view-aligned decoded shape: matching the
            # orientation-normalized distribution constrains the depth
            # structure far more than the rotation-smeared one would.
            from .pose import decode_shape

            return ops.transpose(decode_shape(params.w, self.basis))
        return params.raw

    def discriminators(self):
        def score(values):
            probs = [ops.reshape(self.disc(lift(v)), (1,)) for v in values]
            return ops.reshape(ops.concat(probs, axis=0), (len(values), 1))

        def fake_values(batch):
            out = []
            for s in batch:
                params = self.gen(self._heatmaps(s))
                out.append(self._fake_latent(params).data.copy())
            return out

        return [DiscriminatorSpec("pose", "skeletons", self.disc.params(),
                                  score, fake_values)]

    def generator_losses(self, batch, want_adv):
        per = []
        probs = []
        for s in batch:
            params = self.gen(self._heatmaps(s))
            per.append(reprojection_loss(params, s.target2d, self.basis,
                                         self.cam, self.spec.root_depth))
            if want_adv:
                probs.append(ops.reshape(self.disc(self._fake_latent(params)), (1,)))
        recon = ops.stack_mean(per)
        fakes = {}
        if want_adv:
            fakes["pose"] = ops.reshape(ops.concat(probs, axis=0), (len(probs), 1))
        return recon, {}, fakes

    def predict(self, sample):
        return self.gen(self._heatmaps(sample))

    def metrics(self):
        px, mm = [], []
        for i in self.eval_idx:
            s = self.samples[i]
            params = self.gen(self._heatmaps(s))
            px.append(mean_reprojection_px(params, s.target2d, self.basis,
                                           self.cam, self.spec.root_depth))
            pred = Skeleton3D(posed_keypoints(params, self.basis,
                                              self.spec.root_depth).data.T)
            mm.append(reconstruction_error_3d(pred, s.skeleton))
        return {"reproj_px": float(np.mean(px)), "err3d_mm": float(np.mean(mm))}


def _build_pose(cfg: ExperimentConfig) -> TaskBundle:
    task = PoseTask(cfg)

    def evaluate():
        per_sample = []
        for s in task.samples:
            params = task.gen(task._heatmaps(s))
            pred = Skeleton3D(posed_keypoints(params, task.basis,
                                              task.spec.root_depth).data.T)
            per_sample.append({
                "id": s.sample_id,
                "reproj_px": mean_reprojection_px(params, s.target2d, task.basis,
                                                  task.cam, task.spec.root_depth),
                "err3d_mm": reconstruction_error_3d(pred, s.skeleton),
            })
        agg = {
            "reproj_px": float(np.mean([r["reproj_px"] for r in per_sample])),
            "err3d_mm": float(np.mean([r["err3d_mm"] for r in per_sample])),
        }
        return {"aggregate": agg, "per_sample": per_sample}

    def export(out_dir):
        os.makedirs(out_dir, exist_ok=True)
        containers.save_fgrid(os.path.join(out_dir, "basis_mean.fgrid"),
                              task.basis.mean)
        containers.save_fgrid(os.path.join(out_dir, "basis_vectors.fgrid"),
                              task.basis.vectors)
        containers.save_fgrid(os.path.join(out_dir, "basis_variances.fgrid"),
                              task.basis.variances)
        containers.save_fgrid(
            os.path.join(out_dir, "targets.fgrid"),
            np.stack([s.target2d for s in task.samples]))
        containers.save_fgrid(
            os.path.join(out_dir, "true_vectors.fgrid"),
            np.stack([s.params.numpy_vector(task.gen.f_ref)[: task.gen.n_out]
                      for s in task.samples]))
        save_skeletons_csv(os.path.join(out_dir, "skeletons.csv"),
                           [s.skeleton for s in task.samples],
                           [s.sample_id for s in task.samples])

    return TaskBundle(task, task.banks, evaluate, export)


# ---------------------------------------------------------------------------
# sfm task


class SfmTask(TaskAdapter):
    name = "sfm"

    def __init__(self, cfg: ExperimentConfig):
        seed = cfg["seed"]
        size = cfg["sfm.image_size"]
        self.spec = PinholeSceneSpec(image_hw=(size, size))
        self.prior = cfg["sfm.prior"]
        self.smooth_weight = cfg["sfm.smooth_weight"]
        self.scenes = synth_sfm_dataset(self.spec, cfg["sfm.scenes"], seed,
                                        label="train")
        bank_scenes = synth_sfm_dataset(self.spec, cfg["sfm.bank_scenes"],
                                        seed + 104729, label="bank")
        self.cam = self.spec.camera()
        width = cfg["sfm.width"]
        norm = cfg["sfm.normalize"]
        widths = (width, 2 * width, 4 * width)
        # Scene-scale depth init and a bounded translation head keep early
        # predictions in front of the near plane.
        self.depth_net = sfm.DepthNet(rng_for(seed, "sfm/init_depth"),
                                      (size, size), widths=widths,
                                      normalize=norm, init_log_depth=2.0)
        self.ego_net = sfm.EgomotionNet(rng_for(seed, "sfm/init_ego"),
                                        (size, size), in_channels=6,
                                        widths=widths, normalize=norm,
                                        t_bound=2.0)
        # near-identity motion at init: the default head scale would start
        # with ~0.2 rad rotations and park every warp outside the frame
        self.ego_net.fc.w.data *= 0.05
        self.depth_disc = sfm.DepthDiscriminator(rng_for(seed, "sfm/init_ddisc"))
        self.motion_disc = sfm.CameraMotionDiscriminator(
            rng_for(seed, "sfm/init_mdisc"))
        self.banks = build_memory_banks({
            "depth": [MemoryItem(s.sample_id, s.depth.log_values())
                      for s in bank_scenes],
            "motion": [MemoryItem(s.sample_id, s.motion.six_vector())
                       for s in bank_scenes],
        })
        self.eval_idx = list(range(min(12, len(self.scenes))))

    def sample_batch(self, rng, size):
        idx = rng.integers(0, len(self.scenes), size=size)
        return [self.scenes[int(i)] for i in idx]

    def generator_params(self):
        return self.depth_net.params() + self.ego_net.params()

    def discriminators(self):
        specs = []
        if self.prior in ("depth", "full"):
            def dscore(values):
                cols = [ops.flatten_column(self.depth_disc(lift(v)))
                        for v in values]
                return ops.concat(cols, axis=0)

            def dfakes(batch):
                return [self.depth_net(s.inp.i1).log_values().copy()
                        for s in batch]

            specs.append(DiscriminatorSpec("depth", "depth",
                                           self.depth_disc.params(),
                                           dscore, dfakes))
        if self.prior == "full":
            def mscore(values):
                cols = [ops.reshape(self.motion_disc(lift(np.asarray(v))), (1,))
                        for v in values]
                return ops.reshape(ops.concat(cols, axis=0), (len(values), 1))

            def mfakes(batch):
                out = []
                for s in batch:
                    m = self.ego_net(s.inp)
                    out.append(np.concatenate([
                        np.array([m.euler.alpha.data, m.euler.beta.data,
                                  m.euler.gamma.data]).reshape(-1),
                        m.T.data.reshape(-1)]))
                return out

            specs.append(DiscriminatorSpec("motion", "motion",
                                           self.motion_disc.params(),
                                           mscore, mfakes))
        return specs

    # transformed points below this Z get a repair penalty instead of the
    # photometric loss: the renderer treats them as hard errors by contract
    Z_GUARD = 0.05
    GUARD_WEIGHT = 1.0

    def _guarded_scene_loss(self, s, d, m):
        from .geometry import (depth_to_pointcloud, photometric_loss,
                               pointcloud_to_flow, rigid_transform,
                               warp_validity_mask)

        pc = depth_to_pointcloud(d, self.cam)
        moved = rigid_transform(pc, m)
        z = ops.slice_axis(moved.xyz, 0, 2, 3)
        if float(z.data.min()) <= self.Z_GUARD:
            violation = ops.leaky_relu(ops.sub(2.0 * self.Z_GUARD, z), 0.0)
            return ops.mul(ops.reduce_mean(violation), self.GUARD_WEIGHT)
        flow = pointcloud_to_flow(pc, m, self.cam)
        h, w = s.inp.hw
        if not warp_validity_mask(flow, h, w).any():
            # every warp left the frame: shrink the flow instead of erroring
            return ops.mul(ops.reduce_mean(ops.absolute(flow.uv)), 0.01)
        return photometric_loss(s.inp.i1, s.inp.i2, flow)

    def generator_losses(self, batch, want_adv):
        per = []
        dprobs, mprobs = [], []
        tv_terms = []
        for s in batch:
            d = self.depth_net(s.inp.i1)
            m = self.ego_net(s.inp)
            per.append(self._guarded_scene_loss(s, d, m))
            if self.prior == "smooth":
                tv_terms.append(sfm.tv_smoothness(d))
            if want_adv and self.prior in ("depth", "full"):
                dprobs.append(ops.flatten_column(self.depth_disc(d)))
            if want_adv and self.prior == "full":
                mvec = ops.concat([
                    ops.reshape(lift(m.euler.alpha), (1, 1)),
                    ops.reshape(lift(m.euler.beta), (1, 1)),
                    ops.reshape(lift(m.euler.gamma), (1, 1)),
                    ops.reshape(m.T, (3, 1)),
                ], axis=0)
                mprobs.append(ops.reshape(self.motion_disc(mvec), (1,)))
        recon = ops.stack_mean(per)
        extras = {}
        if tv_terms:
            extras["smooth"] = ops.mul(ops.stack_mean(tv_terms),
                                       self.smooth_weight)
        fakes = {}
        if want_adv and dprobs:
            fakes["depth"] = ops.concat(dprobs, axis=0)
        if want_adv and mprobs:
            fakes["motion"] = ops.reshape(ops.concat(mprobs, axis=0),
                                          (len(mprobs), 1))
        return recon, extras, fakes

    def metrics(self):
        ld, ratio, derr, rerr = [], [], [], []
        for i in self.eval_idx:
            s = self.scenes[i]
            d = self.depth_net(s.inp.i1)
            m = self.ego_net(s.inp)
            ld.append(sfm.logdepth_error(d, s.depth))
            ratio.append(sfm.mean_depth_ratio(d, s.depth))
            errs = sfm.camera_motion_errors(m, s.motion)
            derr.append(errs.dist_err)
            rerr.append(errs.rot_err)
        return {
            "logdepth_l1": float(np.mean(ld)),
            "depth_ratio": float(np.mean(ratio)),
            "cam_dist_err": float(np.mean(derr)),
            "cam_rot_err": float(np.mean(rerr)),
        }


def _build_sfm(cfg: ExperimentConfig) -> TaskBundle:
    task = SfmTask(cfg)

    def evaluate():
        per_sample = []
        for s in task.scenes:
            d = task.depth_net(s.inp.i1)
            m = task.ego_net(s.inp)
            errs = sfm.camera_motion_errors(m, s.motion)
            row = {"id": s.sample_id,
                   "logdepth_l1": sfm.logdepth_error(d, s.depth),
                   "depth_ratio": sfm.mean_depth_ratio(d, s.depth)}
            row.update(errs.as_dict())
            per_sample.append(row)
        keys = ("logdepth_l1", "depth_ratio", "dist_err", "rot_err",
                "trl_ang_err", "trl_mag_err")
        agg = {k: float(np.mean([r[k] for r in per_sample])) for k in keys}
        return {"aggregate": agg, "per_sample": per_sample}

    def export(out_dir):
        os.makedirs(out_dir, exist_ok=True)
        for s in task.scenes:
            sub = os.path.join(out_dir, "scene_%04d" % s.sample_id)
            save_sfm_scene(sub, s)

    return TaskBundle(task, task.banks, evaluate, export)


def save_sfm_scene(dir_path, sample) -> None:
    os.makedirs(dir_path, exist_ok=True)
    containers.save_fgrid(os.path.join(dir_path, "i1.fgrid"), sample.inp.i1)
    containers.save_fgrid(os.path.join(dir_path, "i2.fgrid"), sample.inp.i2)
    containers.save_fgrid(os.path.join(dir_path, "flow.fgrid"),
                          sample.inp.flow.uv if isinstance(sample.inp.flow.uv, np.ndarray)
                          else sample.inp.flow.uv.data)
    containers.save_fgrid(os.path.join(dir_path, "logdepth.fgrid"),
                          sample.depth.log_values())
    six = sample.motion.six_vector()
    fv = float(np.asarray(sample.cam.f).reshape(()))
    with open(os.path.join(dir_path, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write("f = %r\ncx = %r\ncy = %r\n" % (fv, sample.cam.cx, sample.cam.cy))
        fh.write("motion = %s\n" % " ".join(repr(float(v)) for v in six))


def load_sfm_scene(dir_path):
    from .geometry import FlowField
    from .sfm import SfmInput, make_sfm_input
    from .synth import SfmSample

    i1 = containers.load_fgrid(os.path.join(dir_path, "i1.fgrid"))
    i2 = containers.load_fgrid(os.path.join(dir_path, "i2.fgrid"))
    uv = containers.load_fgrid(os.path.join(dir_path, "flow.fgrid"))
    logd = containers.load_fgrid(os.path.join(dir_path, "logdepth.fgrid"))
    meta = {}
    with open(os.path.join(dir_path, "meta.txt"), "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, _, v = line.partition("=")
                meta[k.strip()] = v.strip()
    cam = CameraIntrinsics(float(meta["f"]), float(meta["cx"]), float(meta["cy"]))
    six = [float(tok) for tok in meta["motion"].split()]
    ang = EulerAngles(six[0], six[1], six[2])
    from .geometry import rotation_matrix

    motion = SE3Motion(rotation_matrix(ang), np.array(six[3:]), euler=ang)
    inp = make_sfm_input(i1, i2, FlowField(uv), cam)
    sid = int(os.path.basename(dir_path).split("_")[-1])
    return SfmSample(inp, DepthMap(logd), motion, cam, sid)


# ---------------------------------------------------------------------------
# super-resolution task


class SrTask(TaskAdapter):
    name = "sr"

    def __init__(self, cfg: ExperimentConfig):
        seed = cfg["seed"]
        size = cfg["sr.image_size"]
        self.spec = ToyFaceSpec(size=size)
        self.faces = synth_toy_faces(self.spec, cfg["sr.faces"], seed,
                                     label="train")
        self.bias = cfg["sr.bias"]
        if self.bias == "big_mouth":
            bank_faces = synth_toy_faces(
                self.spec, cfg["sr.bank_faces"], seed + 104729,
                mouth_radius_range=(self.spec.mouth_radius_range[0], 6.2),
                label="bank")
        else:
            bank_faces = synth_toy_faces(self.spec, cfg["sr.bank_faces"],
                                         seed + 104729, label="bank")
        bank = MemoryBank([MemoryItem(f.sample_id, f.image, f.attrs)
                           for f in bank_faces], kind="images")
        if self.bias == "big_mouth":
            bank = curate_bias(bank, lambda item: item.attrs["big_mouth"])
        self.banks = {"images": bank}
        self.lowres = {f.sample_id: self._down(f.image) for f in self.faces}
        self.gen = SrGenerator(
            rng_for(seed, "sr/init_gen"),
            ResidualGeneratorConfig(n_blocks=cfg["sr.n_blocks"],
                                    width=cfg["sr.width"],
                                    normalize=cfg["sr.normalize"]))
        self.disc = ImageDiscriminator(rng_for(seed, "sr/init_disc"),
                                       (size, size))
        self.eval_idx = list(range(min(EVAL_SUBSET, len(self.faces))))

    @staticmethod
    def _down(img: np.ndarray) -> np.ndarray:
        from .geometry import downsample4x

        return downsample4x(img).data

    def sample_batch(self, rng, size):
        idx = rng.integers(0, len(self.faces), size=size)
        return [self.faces[int(i)] for i in idx]

    def generator_params(self):
        return self.gen.params()

    def discriminators(self):
        def score(values):
            cols = [ops.reshape(self.disc(lift(v)), (1,)) for v in values]
            return ops.reshape(ops.concat(cols, axis=0), (len(values), 1))

        def fake_values(batch):
            return [self.gen(self.lowres[f.sample_id]).data.copy() for f in batch]

        return [DiscriminatorSpec("image", "images", self.disc.params(),
                                  score, fake_values)]

    def generator_losses(self, batch, want_adv):
        per, probs = [], []
        for f in batch:
            low = self.lowres[f.sample_id]
            pred = self.gen(low)
            per.append(sr_reconstruction_loss(low, pred))
            if want_adv:
                probs.append(ops.reshape(self.disc(pred), (1,)))
        recon = ops.stack_mean(per)
        fakes = {}
        if want_adv:
            fakes["image"] = ops.reshape(ops.concat(probs, axis=0),
                                         (len(probs), 1))
        return recon, {}, fakes

    def metrics(self):
        rec, probe = [], []
        for i in self.eval_idx:
            f = self.faces[i]
            pred = self.gen(self.lowres[f.sample_id])
            rec.append(sr_reconstruction_loss(self.lowres[f.sample_id],
                                              pred).item())
            probe.append(mouth_radius_probe(pred.data, self.spec))
        return {"recon": float(np.mean(rec)),
                "probe_radius": float(np.mean(probe))}


def _build_sr(cfg: ExperimentConfig) -> TaskBundle:
    task = SrTask(cfg)

    def evaluate():
        per_sample = []
        for f in task.faces:
            pred = task.gen(task.lowres[f.sample_id])
            per_sample.append({
                "id": f.sample_id,
                "recon": sr_reconstruction_loss(task.lowres[f.sample_id],
                                                pred).item(),
                "probe_radius": mouth_radius_probe(pred.data, task.spec),
                "true_radius": f.attrs["mouth_radius"],
            })
        agg = {
            "recon": float(np.mean([r["recon"] for r in per_sample])),
            "probe_radius": float(np.mean([r["probe_radius"] for r in per_sample])),
            "true_radius": float(np.mean([r["true_radius"] for r in per_sample])),
            "bank_radius": float(np.mean([item.attrs["mouth_radius"]
                                          for item in task.banks["images"].items])),
        }
        return {"aggregate": agg, "per_sample": per_sample}

    def export(out_dir):
        os.makedirs(out_dir, exist_ok=True)
        _export_faces(out_dir, task.faces)

    return TaskBundle(task, task.banks, evaluate, export)


def _export_faces(out_dir, faces):
    rows = ["id,mouth_radius,big_mouth"]
    for f in faces:
        containers.save_fgrid(os.path.join(out_dir, "face_%04d.fgrid" % f.sample_id),
                              f.image)
        rows.append("%d,%r,%d" % (f.sample_id, f.attrs["mouth_radius"],
                                  int(f.attrs["big_mouth"])))
    with open(os.path.join(out_dir, "attrs.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# inpainting task


class InpaintTask(TaskAdapter):
    name = "inpaint"

    def __init__(self, cfg: ExperimentConfig):
        seed = cfg["seed"]
        size = cfg["inpaint.image_size"]
        self.spec = ToyFaceSpec(size=size)
        self.mask = rect_mask(size, size, self.spec.mouth_region(),
                              region="mouth")
        self.faces = synth_toy_faces(self.spec, cfg["inpaint.faces"], seed,
                                     label="train")
        if cfg["inpaint.bias"] == "big_mouth":
            bank_faces = synth_toy_faces(
                self.spec, cfg["inpaint.bank_faces"], seed + 104729,
                mouth_radius_range=(self.spec.mouth_radius_range[0], 6.2),
                label="bank")
        else:
            bank_faces = synth_toy_faces(self.spec, cfg["inpaint.bank_faces"],
                                         seed + 104729, label="bank")
        bank = MemoryBank([MemoryItem(f.sample_id, f.image, f.attrs)
                           for f in bank_faces], kind="images")
        if cfg["inpaint.bias"] == "big_mouth":
            bank = curate_bias(bank, lambda item: item.attrs["big_mouth"])
        self.banks = {"images": bank}
        self.masked = {f.sample_id: f.image * self.mask.mask[None]
                       for f in self.faces}
        self.gen = InpaintGenerator(rng_for(seed, "inpaint/init_gen"),
                                    (size, size), width=cfg["inpaint.width"],
                                    normalize=cfg["inpaint.normalize"])
        self.disc = ImageDiscriminator(rng_for(seed, "inpaint/init_disc"),
                                       (size, size))
        self.eval_idx = list(range(min(EVAL_SUBSET, len(self.faces))))

    def sample_batch(self, rng, size):
        idx = rng.integers(0, len(self.faces), size=size)
        return [self.faces[int(i)] for i in idx]

    def generator_params(self):
        return self.gen.params()

    def discriminators(self):
        def score(values):
            cols = [ops.reshape(self.disc(lift(v)), (1,)) for v in values]
            return ops.reshape(ops.concat(cols, axis=0), (len(values), 1))

        def fake_values(batch):
            return [self.gen(self.masked[f.sample_id], self.mask).data.copy()
                    for f in batch]

        return [DiscriminatorSpec("image", "images", self.disc.params(),
                                  score, fake_values)]

    def generator_losses(self, batch, want_adv):
        per, probs = [], []
        for f in batch:
            xm = self.masked[f.sample_id]
            pred = self.gen(xm, self.mask)
            per.append(inpaint_reconstruction_loss(xm, pred, self.mask))
            if want_adv:
                probs.append(ops.reshape(self.disc(pred), (1,)))
        recon = ops.stack_mean(per)
        fakes = {}
        if want_adv:
            fakes["image"] = ops.reshape(ops.concat(probs, axis=0),
                                         (len(probs), 1))
        return recon, {}, fakes

    def metrics(self):
        rec, probe = [], []
        for i in self.eval_idx:
            f = self.faces[i]
            pred = self.gen(self.masked[f.sample_id], self.mask)
            rec.append(inpaint_reconstruction_loss(self.masked[f.sample_id],
                                                   pred, self.mask).item())
            probe.append(mouth_radius_probe(pred.data, self.spec))
        return {"recon": float(np.mean(rec)),
                "probe_radius": float(np.mean(probe))}


def _build_inpaint(cfg: ExperimentConfig) -> TaskBundle:
    task = InpaintTask(cfg)

    def evaluate():
        per_sample = []
        for f in task.faces:
            pred = task.gen(task.masked[f.sample_id], task.mask)
            hidden = (1.0 - task.mask.mask)[None]
            err_hidden = float(np.sqrt(np.sum(
                (hidden * (pred.data - f.image)) ** 2)))
            per_sample.append({
                "id": f.sample_id,
                "recon": inpaint_reconstruction_loss(task.masked[f.sample_id],
                                                     pred, task.mask).item(),
                "hidden_l2": err_hidden,
                "probe_radius": mouth_radius_probe(pred.data, task.spec),
            })
        agg = {k: float(np.mean([r[k] for r in per_sample]))
               for k in ("recon", "hidden_l2", "probe_radius")}
        return {"aggregate": agg, "per_sample": per_sample}

    def export(out_dir):
        os.makedirs(out_dir, exist_ok=True)
        _export_faces(out_dir, task.faces)
        containers.save_fgrid(os.path.join(out_dir, "mask.fgrid"),
                              task.mask.mask)

    return TaskBundle(task, task.banks, evaluate, export)


# ---------------------------------------------------------------------------
# 2-D toy task


class Toy2dTask(TaskAdapter):
    """Generator = two free scalars, renderer = their sum.

    Memories lie on the line b = m a + c; reconstruction demands a + b = x.
    The loop should settle at the intersection of the two constraints.

    Two deliberate choices keep the dynamics well behaved against a
    point-mass fake. The critic is logistic: its weights decay toward zero
    once the fake sits on the memory manifold, so the adversarial push dies
    out instead of digging a density hole around the point and orbiting it.
    And each memory item is an antithetic pair (+-t on the line), so every
    sampled batch carries the manifold centroid exactly and the critic's
    gradient has no first-moment sampling noise.
    """

    name = "toy2d"
    PAIR_SPREAD = 1.5
    N_PAIRS = 64

    def __init__(self, cfg: ExperimentConfig):
        seed = cfg["seed"]
        self.target = cfg["toy2d.target"]
        self.slope = cfg["toy2d.line_slope"]
        self.offset = cfg["toy2d.line_offset"]
        if abs(1.0 + self.slope) < 1e-9:
            raise ConfigError("slope -1 makes the constraint lines parallel")
        init = rng_for(seed, "toy2d/init").normal(0.0, 0.5, size=(2, 1))
        self.latent = parameter(init, name="toy2d/latent")
        self.disc = nn.MLP(rng_for(seed, "toy2d/init_disc"), (2, 1),
                           "toy2d_disc", final="sigmoid", normalize=False)
        ts = np.linspace(self.PAIR_SPREAD / self.N_PAIRS, self.PAIR_SPREAD,
                         self.N_PAIRS)
        items = [
            MemoryItem(i, np.array([[t, -t],
                                    [self.slope * t + self.offset,
                                     -self.slope * t + self.offset]]))
            for i, t in enumerate(ts)
        ]
        self.banks = {"points": MemoryBank(items, kind="points")}

    def analytic_solution(self):
        t = (self.target - self.offset) / (1.0 + self.slope)
        return np.array([t, self.slope * t + self.offset])

    def sample_batch(self, rng, size):
        rng.integers(0, 1, size=1)  # keep stream cadence uniform across tasks
        return None

    def generator_params(self):
        return [self.latent]

    def discriminators(self):
        def score(values):
            cols = []
            for v in values:
                arr = np.asarray(v).reshape(2, -1)
                for k in range(arr.shape[1]):
                    cols.append(ops.reshape(
                        self.disc(lift(arr[:, k : k + 1])), (1,)))
            return ops.reshape(ops.concat(cols, axis=0), (len(cols), 1))

        def fake_values(batch):
            return [self.latent.data.copy()]

        return [DiscriminatorSpec("points", "points", self.disc.params(),
                                  score, fake_values)]

    def generator_losses(self, batch, want_adv):
        rendered = ops.reduce_sum(self.latent)
        recon = ops.square(ops.sub(rendered, self.target))
        fakes = {}
        if want_adv:
            fakes["points"] = ops.reshape(self.disc(self.latent), (1, 1))
        return recon, {}, fakes

    def metrics(self):
        delta = self.latent.data.reshape(-1) - self.analytic_solution()
        return {"dist_to_solution": float(np.linalg.norm(delta)),
                "constraint_violation": float(abs(self.latent.data.sum()
                                                  - self.target))}


def _build_toy2d(cfg: ExperimentConfig) -> TaskBundle:
    task = Toy2dTask(cfg)

    def evaluate():
        m = task.metrics()
        return {"aggregate": m,
                "per_sample": [{"id": 0, **m}]}

    def export(out_dir):
        os.makedirs(out_dir, exist_ok=True)
        containers.save_fgrid(out_dir + "/memories.fgrid",
                              np.stack([np.asarray(it.value)
                                        for it in task.banks["points"].items]))

    return TaskBundle(task, task.banks, evaluate, export)


_BUILDERS = {
    "pose": _build_pose,
    "sfm": _build_sfm,
    "sr": _build_sr,
    "inpaint": _build_inpaint,
    "toy2d": _build_toy2d,
}


def build_task(cfg: ExperimentConfig) -> TaskBundle:
    if cfg.task not in _BUILDERS:
        raise ConfigError("task %r has no experiment builder" % cfg.task)
    return _BUILDERS[cfg.task](cfg)


# ---------------------------------------------------------------------------
# runners


def run_experiment(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Train per config; emit config copy, metrics.csv, checkpoints, eval.json."""
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(cfg.render())

    bundle = build_task(cfg)
    train_cfg = cfg.train_config()
    named = bundle.adapter.named_parameters()

    def checkpoint_fn(iteration: int, state: TrainState):
        path = os.path.join(ckpt_dir, "ckpt_%06d.bin" % iteration)
        containers.save_checkpoint(
            path, {k: v.data for k, v in named.items()}, iteration,
            state.to_json(), state.rng_state, config=cfg.as_dict())

    state, rows = train_loop(
        bundle.adapter, bundle.banks, train_cfg,
        metrics_path=os.path.join(out_dir, "metrics.csv"),
        checkpoint_fn=checkpoint_fn,
        dump_path=os.path.join(out_dir, "diverged_state.json"),
    )

    report = bundle.evaluate()
    report["config"] = cfg.as_dict()
    report["iterations"] = state.iteration
    with open(os.path.join(out_dir, "eval.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=2))
    return {"state": state, "rows": rows, "report": report, "out_dir": out_dir}


def load_task_from_checkpoint(ckpt_path: str) -> TaskBundle:
    """Rebuild the task of a checkpoint and restore its parameters."""
    header, tensors = containers.load_checkpoint(ckpt_path)
    cfg = from_dict(header["config"])
    bundle = build_task(cfg)
    named = bundle.adapter.named_parameters()
    missing = sorted(set(named) - set(tensors))
    if missing:
        raise DomainError("checkpoint lacks parameters: %s" % missing[:4])
    for name, p in named.items():
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise DomainError("checkpoint tensor %s has shape %s, net expects %s"
                              % (name, arr.shape, p.data.shape))
        p.data = arr.copy()
    return bundle


def run_eval(ckpt_path: str, dataset_dir: Optional[str] = None) -> dict:
    """Evaluate a checkpoint; per-sample rows plus sum-consistent aggregates.

    With no dataset directory the checkpoint's own (reproducible) training
    world is regenerated and scored; pose and sfm checkpoints also accept an
    exported dataset directory.
    """
    header, _ = containers.load_checkpoint(ckpt_path)
    bundle = load_task_from_checkpoint(ckpt_path)
    if dataset_dir is not None:
        task = bundle.adapter
        if task.name == "sfm":
            scene_dirs = sorted(
                os.path.join(dataset_dir, d) for d in os.listdir(dataset_dir)
                if d.startswith("scene_"))
            if not scene_dirs:
                raise DomainError("no scene_* directories under %s" % dataset_dir)
            task.scenes = [load_sfm_scene(d) for d in scene_dirs]
            task.eval_idx = list(range(min(12, len(task.scenes))))
        elif task.name == "pose":
            _load_pose_dataset(task, dataset_dir)
        else:
            raise ConfigError("task %r does not take external datasets"
                              % task.name)
    report = bundle.evaluate()
    report["checkpoint_iteration"] = header["iteration"]
    return report


def _load_pose_dataset(task: PoseTask, dataset_dir: str) -> None:
    from .pose import load_skeletons_csv
    from .synth import PoseSample

    mean = containers.load_fgrid(os.path.join(dataset_dir, "basis_mean.fgrid"))
    vecs = containers.load_fgrid(os.path.join(dataset_dir, "basis_vectors.fgrid"))
    var = containers.load_fgrid(os.path.join(dataset_dir, "basis_variances.fgrid"))
    basis = ShapeBasis(mean, vecs, var)
    if basis.k != task.basis.k:
        raise DomainError("dataset basis has k=%d, checkpoint expects k=%d"
                          % (basis.k, task.basis.k))
    task.basis = basis
    targets = containers.load_fgrid(os.path.join(dataset_dir, "targets.fgrid"))
    vectors = containers.load_fgrid(os.path.join(dataset_dir, "true_vectors.fgrid"))
    ids, skels = load_skeletons_csv(os.path.join(dataset_dir, "skeletons.csv"))
    if not (len(ids) == targets.shape[0] == vectors.shape[0]):
        raise DomainError("pose dataset files disagree on sample count")
    samples = []
    for i, sid in enumerate(ids):
        vec = vectors[i]
        k = basis.k
        params = _params_from_vector(vec, k, task.gen.f_ref)
        samples.append(PoseSample(targets[i], params, skels[i], sid))
    task.samples = samples
    task.eval_idx = list(range(min(EVAL_SUBSET, len(samples))))


def _params_from_vector(vec: np.ndarray, k: int, f_ref: float):
    from .pose import make_pose_params

    trans = vec[k + 4 : k + 6] if vec.size >= k + 6 else None
    return make_pose_params(vec[:k], f_ref * float(np.exp(vec[k])),
                            EulerAngles(float(vec[k + 1]), float(vec[k + 2]),
                                        float(vec[k + 3])),
                            trans=trans)
