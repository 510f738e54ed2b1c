"""Experiment configuration: structured key = value text, strictly validated.

Format: one ``key = value`` pair per line, ``#`` comments, blank lines
ignored. Keys are flat with dotted task prefixes (``sfm.prior``); unknown
keys are rejected before any compute. The full schema with defaults is in
``SCHEMA`` (also rendered by ``invgfx train --help-config``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

from .errors import ConfigError
from .training import GEN_LOSS_MODES, TrainConfig

TASKS = ("pose", "sfm", "sr", "inpaint", "gradcheck", "toy2d")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError("expected a boolean, got %r" % text)


def _choice(options):
    def parse(text):
        if text not in options:
            raise ConfigError("expected one of %s, got %r" % (options, text))
        return text

    return parse


def _pos_int(text):
    v = int(text)
    if v < 0:
        raise ConfigError("expected a nonnegative integer, got %r" % text)
    return v


# key -> (parser, default, help)
SCHEMA = {
    "task": (_choice(TASKS), None, "experiment kind (required)"),
    "seed": (_pos_int, 0, "master seed for every stream"),
    "out": (str, None, "output directory (flag --out overrides)"),
    "iters": (_pos_int, 1000, "training iterations"),
    "batch": (_pos_int, 16, "batch size"),
    "beta": (float, 0.01, "adversarial weight; 0 = reconstruction only"),
    "recon_lr": (float, 1e-3, "generator learning rate"),
    "adv_lr": (float, 1e-3, "discriminator learning rate"),
    "theta_d": (float, 0.695, "freeze generator above this discriminator loss"),
    "theta_g": (float, 0.75, "double generator updates above this adversarial loss"),
    "gen_loss_mode": (_choice(GEN_LOSS_MODES), "nonsaturating",
                      "generator confusion objective"),
    "optimizer": (_choice(("adam", "sgd")), "adam", "update rule"),
    "checkpoint_every": (_pos_int, 1000, "checkpoint cadence (iterations)"),
    "eval_every": (_pos_int, 100, "metric refresh cadence (iterations)"),
    "ema_decay": (float, 0.9, "running-average decay for the update heuristic"),
    # pose task
    "pose.samples": (_pos_int, 2000, "training samples"),
    "pose.image_size": (_pos_int, 32, "heatmap grid size"),
    "pose.sigma": (float, 0.25, "heatmap sigma, units of image width"),
    "pose.basis_k": (_pos_int, 60, "shape-basis components"),
    "pose.bank_size": (_pos_int, 1000, "unpaired skeleton memories"),
    "pose.perturb_std": (float, 20.0, "per-joint perturbation stddev (mm)"),
    "pose.focal_lo": (float, 40.0, "focal sampling range low (px)"),
    "pose.focal_hi": (float, 70.0, "focal sampling range high (px)"),
    "pose.disc_mode": (_choice(("keypoints", "params")), "keypoints",
                       "discriminator input form"),
    "pose.predict_translation": (_bool, True, "emit 2D root translation outputs"),
    "pose.normalize": (_bool, True, "standardization layers in the nets"),
    "pose.gen_width": (_pos_int, 8, "generator conv width"),
    "pose.disc_width": (_pos_int, 64, "discriminator dense width"),
    # sfm task
    "sfm.image_size": (_pos_int, 32, "scene edge length"),
    "sfm.scenes": (_pos_int, 48, "training scenes"),
    "sfm.bank_scenes": (_pos_int, 48, "memory scenes (depth + motion banks)"),
    "sfm.prior": (_choice(("none", "smooth", "depth", "full")), "full",
                  "ablation: none=IGN, smooth=+TV, depth=depth prior only"),
    "sfm.smooth_weight": (float, 0.05, "TV weight for the smooth ablation"),
    "sfm.width": (_pos_int, 8, "first conv width of both generators"),
    "sfm.normalize": (_bool, True, "standardization layers in the nets"),
    # sr task
    "sr.faces": (_pos_int, 400, "training faces"),
    "sr.bank_faces": (_pos_int, 400, "memory faces"),
    "sr.image_size": (_pos_int, 32, "high-res face size (low-res = /4)"),
    "sr.n_blocks": (_pos_int, 3, "residual blocks"),
    "sr.width": (_pos_int, 12, "generator width"),
    "sr.bias": (_choice(("none", "big_mouth")), "none",
                "memory-bank curation for biased super-resolution"),
    "sr.normalize": (_bool, True, "standardization layers in the nets"),
    # inpaint task
    "inpaint.faces": (_pos_int, 400, "training faces"),
    "inpaint.bank_faces": (_pos_int, 400, "memory faces"),
    "inpaint.image_size": (_pos_int, 32, "face size"),
    "inpaint.width": (_pos_int, 16, "generator width"),
    "inpaint.bias": (_choice(("none", "big_mouth")), "none",
                     "memory-bank curation for biased inpainting"),
    "inpaint.normalize": (_bool, True, "standardization layers in the nets"),
    # toy2d task
    "toy2d.target": (float, 1.0, "reconstruction target x (renderer is a+b)"),
    "toy2d.line_slope": (float, 0.5, "memory manifold slope m in b = m a + c"),
    "toy2d.line_offset": (float, 1.0, "memory manifold offset c"),
    # gradcheck task
    "gradcheck.instances": (_pos_int, 100, "instances per operation"),
    "gradcheck.scope": (str, "all", "single op name or 'all'"),
}


@dataclass
class ExperimentConfig:
    task: str
    values: Dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError("unknown config key %r" % key)
        if key in self.values:
            return self.values[key]
        return SCHEMA[key][1]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            beta=self["beta"],
            recon_lr=self["recon_lr"],
            adv_lr=self["adv_lr"],
            theta_d=self["theta_d"],
            theta_g=self["theta_g"],
            max_iters=self["iters"],
            seed=self["seed"],
            gen_loss_mode=self["gen_loss_mode"],
            batch_size=self["batch"],
            optimizer=self["optimizer"],
            checkpoint_every=self["checkpoint_every"],
            eval_every=self["eval_every"],
            ema_decay=self["ema_decay"],
        )

    def as_dict(self) -> Dict[str, object]:
        out = {"task": self.task}
        out.update(self.values)
        return out

    def render(self) -> str:
        lines = ["task = %s" % self.task]
        for key in sorted(self.values):
            if key == "task":
                continue
            lines.append("%s = %s" % (key, self.values[key]))
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> ExperimentConfig:
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected 'key = value', got %r"
                              % (lineno, raw.strip()))
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in SCHEMA:
            raise ConfigError("line %d: unknown key %r" % (lineno, key))
        if key in values:
            raise ConfigError("line %d: duplicate key %r" % (lineno, key))
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(val)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError("line %d: bad value for %r: %s" % (lineno, key, exc))
    if "task" not in values:
        raise ConfigError("config must set 'task'")
    task = values.pop("task")
    return ExperimentConfig(task=task, values=values)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def from_dict(raw: Dict[str, object]) -> ExperimentConfig:
    """Rebuild a config from a checkpoint provenance dict."""
    raw = dict(raw)
    if "task" not in raw:
        raise ConfigError("provenance config lacks 'task'")
    task = raw.pop("task")
    if task not in TASKS:
        raise ConfigError("unknown task %r" % task)
    for key in raw:
        if key not in SCHEMA:
            raise ConfigError("unknown config key %r" % key)
    return ExperimentConfig(task=task, values=raw)


def schema_help() -> str:
    lines = ["configuration keys (key = value per line, # comments):", ""]
    for key in SCHEMA:
        parser, default, help_text = SCHEMA[key]
        lines.append("  %-26s default=%-12r %s" % (key, default, help_text))
    return "\n".join(lines)
