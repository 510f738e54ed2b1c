"""Joint reconstruction + adversarial training.

One iteration alternates: (1) each discriminator takes a step against a
batch of unpaired memories and detached generator outputs, then (2) the
generator minimizes reconstruction + beta * adversarial loss, gated by a
stabilization rule — it is frozen while the discriminator loss is above
theta_d and stepped twice while the discriminator is strong and the
generator loss exceeds theta_g. With beta = 0 the loop degenerates to pure
reconstruction: no memories are drawn and no discriminator code runs, so it
is bitwise identical to a loop without discriminators.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import OptimizerState, Tape, ops
from .autodiff.tensor import Tensor
from .errors import ConfigError, CurationError, DomainError, TrainingDivergedError

PROB_EPS = 1e-7
GEN_LOSS_MODES = ("nonsaturating", "saturating")


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible stream per (seed, label)."""
    return np.random.default_rng([seed, zlib.crc32(label.encode("utf-8"))])


# ---------------------------------------------------------------------------
# memory banks


@dataclass(frozen=True)
class MemoryItem:
    item_id: int
    value: object
    attrs: dict = field(default_factory=dict)


class MemoryBank:
    """Unordered collection of unpaired ground-truth latent factors."""

    def __init__(self, items: Sequence[MemoryItem], kind: str = "generic"):
        items = list(items)
        for it in items:
            if not isinstance(it, MemoryItem):
                raise DomainError("memory banks hold MemoryItem entries")
        if items:
            shapes = {np.asarray(it.value).shape for it in items
                      if isinstance(it.value, np.ndarray)}
            if len(shapes) > 1:
                raise DomainError("memory bank %r mixes value shapes %s"
                                  % (kind, sorted(shapes)))
        self.items = items
        self.kind = kind

    def __len__(self) -> int:
        return len(self.items)

    def ids(self):
        return {it.item_id for it in self.items}

    def replace_items(self, items) -> "MemoryBank":
        return MemoryBank(items, self.kind)

    def sample(self, n: int, rng: np.random.Generator) -> List[MemoryItem]:
        if not self.items:
            raise CurationError("cannot sample from an empty memory bank")
        if n == 0:
            return []
        idx = rng.integers(0, len(self.items), size=n)
        return [self.items[int(i)] for i in idx]


def sample_memories(bank: MemoryBank, n: int, rng: np.random.Generator):
    """Uniform-with-replacement draw, independent of any current input."""
    return bank.sample(n, rng)


# ---------------------------------------------------------------------------
# losses


def _prob_tensor(p) -> Tensor:
    t = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    if np.any(t.data < 0.0) or np.any(t.data > 1.0):
        raise DomainError("probabilities must lie in [0, 1]")
    return ops.clip(t, PROB_EPS, 1.0 - PROB_EPS)


def discriminator_loss(d_real, d_fake) -> Tensor:
    """-mean[log D(real) + log(1 - D(fake))], the maximization objective negated."""
    pr = _prob_tensor(d_real)
    pf = _prob_tensor(d_fake)
    term = ops.add(ops.reduce_mean(ops.log(pr)),
                   ops.reduce_mean(ops.log(ops.sub(1.0, pf))))
    return ops.neg(term)


def generator_adversarial_loss(d_fake, mode: str = "nonsaturating") -> Tensor:
    """Confusion objective for the generator.

    "saturating" is the literal min-max term mean log(1 - D(fake));
    "nonsaturating" is the standard -mean log D(fake) surrogate with the
    same gradient sign and better-behaved magnitudes.
    """
    if mode not in GEN_LOSS_MODES:
        raise ConfigError("generator loss mode must be one of %s" % (GEN_LOSS_MODES,))
    pf = _prob_tensor(d_fake)
    if mode == "saturating":
        return ops.reduce_mean(ops.log(ops.sub(1.0, pf)))
    return ops.neg(ops.reduce_mean(ops.log(pf)))


def total_generator_loss(recon, adv, beta: float) -> Tensor:
    """reconstruction + beta * adversarial; beta = 0 is the pure-recon ablation."""
    if beta < 0.0:
        raise ConfigError("beta must be nonnegative")
    if beta == 0.0:
        return recon if isinstance(recon, Tensor) else Tensor(recon)
    return ops.add(recon, ops.mul(adv, float(beta)))


# ---------------------------------------------------------------------------
# configuration and state


@dataclass
class TrainConfig:
    beta: float = 0.01
    recon_lr: float = 1e-5
    adv_lr: float = 1e-4
    theta_d: float = 0.695
    theta_g: float = 0.75
    max_iters: int = 1000
    seed: int = 0
    gen_loss_mode: str = "nonsaturating"
    batch_size: int = 16
    optimizer: str = "adam"
    checkpoint_every: int = 500
    eval_every: int = 100
    ema_decay: float = 0.9

    def __post_init__(self):
        if self.beta < 0.0:
            raise ConfigError("beta must be >= 0")
        if not (self.recon_lr > 0.0 and self.adv_lr > 0.0):
            raise ConfigError("learning rates must be positive")
        for name, th in (("theta_d", self.theta_d), ("theta_g", self.theta_g)):
            if not (0.0 < th < 1.5):
                raise ConfigError("%s must lie in (0, 1.5), got %r" % (name, th))
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.gen_loss_mode not in GEN_LOSS_MODES:
            raise ConfigError("gen_loss_mode must be one of %s" % (GEN_LOSS_MODES,))
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.checkpoint_every < 1 or self.eval_every < 1:
            raise ConfigError("checkpoint_every / eval_every must be >= 1")


@dataclass
class TrainState:
    """Iteration counter, running loss averages, and the loop RNG states."""

    iteration: int = 0
    ema: Dict[str, float] = field(default_factory=dict)
    rng_state: Dict[str, dict] = field(default_factory=dict)

    def update_ema(self, values: Dict[str, float], decay: float) -> None:
        for key, v in values.items():
            if key in self.ema:
                self.ema[key] = decay * self.ema[key] + (1.0 - decay) * v
            else:
                self.ema[key] = v

    def to_json(self) -> str:
        return json.dumps(
            {"iteration": self.iteration, "ema": self.ema,
             "rng_state": self.rng_state},
            sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TrainState":
        raw = json.loads(text)
        return TrainState(iteration=int(raw["iteration"]),
                          ema=dict(raw["ema"]),
                          rng_state=dict(raw["rng_state"]))


@dataclass
class UpdatePlan:
    update_d: int = 1
    update_g: int = 1


def stabilized_step(state: TrainState, losses: Dict[str, float],
                    config: TrainConfig) -> UpdatePlan:
    """Update-count decision from running averages of the GAN losses.

    ``losses`` carries this iteration's "disc" and "gen" values; they are
    folded into the state's running averages first. The discriminator always
    takes its step; the generator is skipped above theta_d and doubled when
    the discriminator is strong but the generator is weak (above theta_g).
    """
    state.update_ema({"disc": float(losses["disc"]), "gen": float(losses["gen"])},
                     config.ema_decay)
    disc = state.ema["disc"]
    gen = state.ema["gen"]
    if disc > config.theta_d:
        g = 0
    elif gen > config.theta_g:
        g = 2
    else:
        g = 1
    return UpdatePlan(update_d=1, update_g=g)


# ---------------------------------------------------------------------------
# task adapter protocol


@dataclass
class DiscriminatorSpec:
    """One adversarial prior over a latent kind.

    ``score`` runs the discriminator over a list of latent values and
    returns a probability tensor. ``fake_values`` runs the generator over a
    batch *outside any tape* and returns plain latent values, so the
    discriminator step cannot move the generator.
    """

    name: str
    bank: str
    params: List[Tensor]
    score: Callable[[list], Tensor]
    fake_values: Callable[[object], list]


class TaskAdapter:
    """What the shared loop needs from a task; subclasses fill these in."""

    name = "task"

    def sample_batch(self, rng: np.random.Generator, size: int):
        raise NotImplementedError

    def generator_params(self) -> List[Tensor]:
        raise NotImplementedError

    def discriminators(self) -> List[DiscriminatorSpec]:
        return []

    def generator_losses(self, batch, want_adv: bool):
        """Return (recon Tensor, extras dict[str, Tensor], fakes dict[name, probs])."""
        raise NotImplementedError

    def metrics(self) -> Dict[str, float]:
        return {}

    def named_parameters(self) -> Dict[str, Tensor]:
        out = {}
        for p in self.generator_params():
            out[p.name] = p
        for spec in self.discriminators():
            for p in spec.params:
                out[p.name] = p
        if len(out) != len(self.generator_params()) + sum(
                len(s.params) for s in self.discriminators()):
            raise ConfigError("parameter names are not unique")
        return out


def paired_supervised_step(optimizer: OptimizerState,
                           predict: Callable[[object], Tensor],
                           batch: Sequence[Tuple[object, np.ndarray]]) -> float:
    """One step on the mean squared latent error over a paired batch."""
    if not batch:
        raise DomainError("paired step needs a non-empty batch")
    with Tape() as tape:
        per = []
        for x, target in batch:
            pred = predict(x)
            t = np.asarray(target, dtype=np.float64).reshape(pred.shape)
            per.append(ops.reduce_mean(ops.square(ops.sub(pred, t))))
        loss = ops.stack_mean(per)
    tape.backward(loss)
    optimizer.step()
    return loss.item()


# ---------------------------------------------------------------------------
# the loop


class MetricsWriter:
    """Line-buffered CSV writer with a fixed column set (byte-reproducible)."""

    def __init__(self, path, columns: Sequence[str]):
        self.columns = list(columns)
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self._fh.write(",".join(self.columns) + "\n")
        self._fh.flush()

    def write_row(self, values: Dict[str, float]) -> None:
        cells = []
        for c in self.columns:
            v = values.get(c, 0.0)
            cells.append(str(int(v)) if c == "iter" else repr(float(v)))
        self._fh.write(",".join(cells) + "\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def train_loop(adapter: TaskAdapter, banks: Dict[str, MemoryBank],
               config: TrainConfig,
               metrics_path=None,
               checkpoint_fn: Optional[Callable[[int, TrainState], None]] = None,
               log_fn: Optional[Callable[[int, Dict[str, float]], None]] = None,
               dump_path=None,
               ) -> Tuple[TrainState, List[Dict[str, float]]]:
    """Alternating min-max optimization shared by every task.

    Returns the final state and the per-iteration metric rows (also streamed
    to ``metrics_path`` as CSV when given). Discriminator machinery is
    skipped entirely when beta == 0 so the pure-reconstruction ablation is
    bitwise identical to a loop with no discriminators at all.
    """
    rng_batch = rng_for(config.seed, "%s/batch" % adapter.name)
    rng_mem = rng_for(config.seed, "%s/memories" % adapter.name)

    specs = adapter.discriminators() if config.beta > 0.0 else []
    for spec in specs:
        if spec.bank not in banks:
            raise ConfigError("no memory bank %r for discriminator %r"
                              % (spec.bank, spec.name))
        if len(banks[spec.bank]) == 0:
            raise CurationError("memory bank %r is empty" % spec.bank)

    gen_opt = OptimizerState(adapter.generator_params(), config.recon_lr,
                             mode=config.optimizer)
    disc_opts = {spec.name: OptimizerState(spec.params, config.adv_lr,
                                           mode=config.optimizer)
                 for spec in specs}

    state = TrainState()
    columns = (["iter", "recon_loss"]
               + ["disc_loss_%s" % s.name for s in specs]
               + ["gen_adv_loss_%s" % s.name for s in specs]
               + ["gen_updates"]
               + sorted(adapter.metrics().keys()))
    writer = MetricsWriter(metrics_path, columns) if metrics_path else None
    rows: List[Dict[str, float]] = []

    def _check_finite(tag, value, iteration):
        if not np.isfinite(value):
            dump = None
            if dump_path is not None:
                dump = str(dump_path)
                with open(dump, "w", encoding="utf-8") as fh:
                    fh.write(json.dumps({
                        "failed_loss": tag,
                        "value": repr(value),
                        "iteration": iteration,
                        "state": json.loads(state.to_json()),
                        "recent_rows": rows[-5:],
                    }, sort_keys=True, indent=2))
            raise TrainingDivergedError(
                "%s loss became %r at iteration %d" % (tag, value, iteration), dump)

    def _snapshot_rng():
        state.rng_state = {"batch": rng_batch.bit_generator.state,
                           "memories": rng_mem.bit_generator.state}

    try:
        if checkpoint_fn is not None:
            _snapshot_rng()
            checkpoint_fn(0, state)
        metric_cache = adapter.metrics()
        for it in range(1, config.max_iters + 1):
            batch = adapter.sample_batch(rng_batch, config.batch_size)

            disc_losses = {}
            for spec in specs:
                memories = sample_memories(banks[spec.bank], config.batch_size,
                                           rng_mem)
                fakes = spec.fake_values(batch)
                with Tape() as tape:
                    p_real = spec.score([m.value for m in memories])
                    p_fake = spec.score(fakes)
                    dloss = discriminator_loss(p_real, p_fake)
                tape.backward(dloss)
                disc_opts[spec.name].step()
                disc_losses[spec.name] = dloss.item()
                _check_finite("discriminator %s" % spec.name,
                              disc_losses[spec.name], it)

            with Tape() as tape:
                recon, extras, fakes = adapter.generator_losses(
                    batch, want_adv=bool(specs))
                adv_terms = {}
                for spec in specs:
                    adv_terms[spec.name] = generator_adversarial_loss(
                        fakes[spec.name], config.gen_loss_mode)
                total = recon
                for extra in extras.values():
                    total = ops.add(total, extra)
                if adv_terms:
                    adv_sum = adv_terms[specs[0].name]
                    for spec in specs[1:]:
                        adv_sum = ops.add(adv_sum, adv_terms[spec.name])
                    total = total_generator_loss(total, adv_sum, config.beta)
            recon_val = recon.item()
            _check_finite("reconstruction", recon_val, it)
            gen_adv_vals = {name: t.item() for name, t in adv_terms.items()}

            if specs:
                mean_disc = float(np.mean(list(disc_losses.values())))
                mean_gen = float(np.mean(list(gen_adv_vals.values())))
                plan = stabilized_step(state, {"disc": mean_disc, "gen": mean_gen},
                                       config)
            else:
                plan = UpdatePlan(update_d=0, update_g=1)
            state.update_ema({"recon": recon_val}, config.ema_decay)

            if plan.update_g >= 1:
                tape.backward(total)
                gen_opt.step()
                _zero_params(specs)
            if plan.update_g == 2:
                with Tape() as tape2:
                    recon2, extras2, fakes2 = adapter.generator_losses(
                        batch, want_adv=bool(specs))
                    total2 = recon2
                    for extra in extras2.values():
                        total2 = ops.add(total2, extra)
                    if specs:
                        adv2 = [generator_adversarial_loss(fakes2[s.name],
                                                           config.gen_loss_mode)
                                for s in specs]
                        acc = adv2[0]
                        for a in adv2[1:]:
                            acc = ops.add(acc, a)
                        total2 = total_generator_loss(total2, acc, config.beta)
                tape2.backward(total2)
                gen_opt.step()
                _zero_params(specs)

            state.iteration = it
            if it % config.eval_every == 0 or it == config.max_iters:
                metric_cache = adapter.metrics()
            row = {"iter": it, "recon_loss": recon_val,
                   "gen_updates": plan.update_g}
            for name, v in disc_losses.items():
                row["disc_loss_%s" % name] = v
            for name, v in gen_adv_vals.items():
                row["gen_adv_loss_%s" % name] = v
            row.update(metric_cache)
            rows.append(row)
            if writer:
                writer.write_row(row)
            if log_fn is not None:
                log_fn(it, row)
            if checkpoint_fn is not None and (
                    it % config.checkpoint_every == 0 or it == config.max_iters):
                _snapshot_rng()
                checkpoint_fn(it, state)
    finally:
        if writer:
            writer.close()
    return state, rows


def _zero_params(specs) -> None:
    # The generator objective backpropagates into discriminator weights too;
    # clear those so the next discriminator step starts clean.
    for spec in specs:
        for p in spec.params:
            p.zero_grad()
