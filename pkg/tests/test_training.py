"""Adversarial training machinery: losses, heuristics, banks, the loop."""

import json

import numpy as np
import pytest

from invgfx import training
from invgfx.autodiff import OptimizerState, Tape, ops, parameter
from invgfx.config import ExperimentConfig
from invgfx.errors import ConfigError, CurationError, DomainError
from invgfx.experiments import Toy2dTask, build_task
from invgfx.training import (
    MemoryBank,
    MemoryItem,
    TrainConfig,
    TrainState,
    discriminator_loss,
    generator_adversarial_loss,
    paired_supervised_step,
    sample_memories,
    stabilized_step,
    total_generator_loss,
    train_loop,
)


class TestDiscriminatorLoss:
    def test_chance_level_is_2_log2(self):
        for n in (1, 4, 16):
            loss = discriminator_loss(np.full((n, 1), 0.5), np.full((n, 1), 0.5))
            assert loss.item() == pytest.approx(2 * np.log(2), rel=1e-12)

    def test_perfect_discriminator_near_zero(self):
        loss = discriminator_loss(np.full((4, 1), 1.0), np.full((4, 1), 0.0))
        assert 0.0 <= loss.item() < 1e-5

    def test_matches_scalar_recomputation(self, rng):
        pr = rng.uniform(0.05, 0.95, (8, 1))
        pf = rng.uniform(0.05, 0.95, (8, 1))
        loss = discriminator_loss(pr, pf).item()
        expect = -(np.mean(np.log(pr)) + np.mean(np.log(1 - pf)))
        assert loss == pytest.approx(expect, rel=1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            discriminator_loss(np.array([1.2]), np.array([0.5]))
        with pytest.raises(DomainError):
            discriminator_loss(np.array([0.5]), np.array([-0.1]))


class TestGeneratorLoss:
    def test_nonsaturating_values(self):
        assert generator_adversarial_loss(np.array([0.5])).item() \
            == pytest.approx(np.log(2))
        assert generator_adversarial_loss(np.array([1.0])).item() < 1e-6

    def test_saturating_is_literal_term(self, rng):
        pf = rng.uniform(0.1, 0.9, (6, 1))
        loss = generator_adversarial_loss(pf, "saturating").item()
        assert loss == pytest.approx(np.mean(np.log(1 - pf)), rel=1e-12)

    def test_modes_share_gradient_sign(self):
        for p0 in (0.1, 0.3, 0.5, 0.7, 0.9):
            grads = []
            for mode in ("nonsaturating", "saturating"):
                p = parameter(np.array([p0]))
                with Tape() as tape:
                    loss = generator_adversarial_loss(p, mode)
                tape.backward(loss)
                grads.append(float(p.grad[0]))
            assert np.sign(grads[0]) == np.sign(grads[1]) == -1.0

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            generator_adversarial_loss(np.array([0.5]), "wasserstein")


class TestTotalLoss:
    def test_beta_zero_is_pure_reconstruction(self):
        recon = parameter(1.25)
        out = total_generator_loss(recon, parameter(99.0), 0.0)
        assert out.item() == 1.25

    def test_zero_recon_unit_beta(self):
        out = total_generator_loss(parameter(0.0), parameter(0.7), 1.0)
        assert out.item() == pytest.approx(0.7)

    def test_affine_in_beta(self):
        recon, adv = parameter(0.4), parameter(0.3)
        vals = [total_generator_loss(recon, adv, b).item()
                for b in (0.0, 1.0, 2.0)]
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], rel=1e-12)


class TestStabilizedStep:
    def _cfg(self, **kw):
        return TrainConfig(max_iters=1, **kw)

    def test_strong_disc_loss_freezes_generator(self):
        plan = stabilized_step(TrainState(), {"disc": 0.8, "gen": 0.5},
                               self._cfg())
        assert plan.update_d == 1 and plan.update_g == 0

    def test_weak_generator_updates_twice(self):
        plan = stabilized_step(TrainState(), {"disc": 0.5, "gen": 0.9},
                               self._cfg())
        assert plan.update_g == 2

    def test_default_branch_single_update(self):
        plan = stabilized_step(TrainState(), {"disc": 0.5, "gen": 0.5},
                               self._cfg())
        assert plan.update_g == 1

    def test_thresholds_are_configurable(self):
        cfg = self._cfg(theta_d=0.1, theta_g=0.2)
        plan = stabilized_step(TrainState(), {"disc": 0.15, "gen": 0.9}, cfg)
        assert plan.update_g == 0

    def test_never_updates_g_above_theta_d(self, rng):
        cfg = self._cfg()
        state = TrainState()
        for _ in range(200):
            disc = rng.uniform(0.0, 1.4)
            gen = rng.uniform(0.0, 1.4)
            plan = stabilized_step(state, {"disc": disc, "gen": gen}, cfg)
            if state.ema["disc"] > cfg.theta_d:
                assert plan.update_g == 0

    def test_running_average_feeds_decision(self):
        cfg = self._cfg(ema_decay=0.9)
        state = TrainState()
        stabilized_step(state, {"disc": 1.4, "gen": 0.5}, cfg)
        # one low sample cannot drag the 0.9-decay average below theta_d
        plan = stabilized_step(state, {"disc": 0.1, "gen": 0.5}, cfg)
        assert plan.update_g == 0


class TestMemoryBank:
    def _bank(self, n=10):
        return MemoryBank([MemoryItem(i, np.array([float(i)]))
                           for i in range(n)], kind="t")

    def test_zero_draw(self, rng):
        assert sample_memories(self._bank(), 0, rng) == []

    def test_seeded_draw_identical(self):
        bank = self._bank()
        a = sample_memories(bank, 16, np.random.default_rng(5))
        b = sample_memories(bank, 16, np.random.default_rng(5))
        assert [x.item_id for x in a] == [x.item_id for x in b]

    def test_empty_bank_rejected(self, rng):
        with pytest.raises(CurationError):
            sample_memories(MemoryBank([], kind="t"), 1, rng)

    def test_mixed_shapes_rejected(self):
        with pytest.raises(DomainError):
            MemoryBank([MemoryItem(0, np.zeros(2)), MemoryItem(1, np.zeros(3))])

    def test_uniform_within_3_sigma(self):
        bank = self._bank(n=8)
        rng = np.random.default_rng(11)
        draws = sample_memories(bank, 100_000, rng)
        counts = np.bincount([x.item_id for x in draws], minlength=8)
        expect = 100_000 / 8
        sigma = np.sqrt(100_000 * (1 / 8) * (7 / 8))
        assert np.all(np.abs(counts - expect) < 3 * sigma)


class TestTrainState:
    def test_json_roundtrip_bit_identical(self):
        state = TrainState(iteration=7,
                           ema={"disc": 0.123456789012345678, "gen": 1e-17},
                           rng_state={"batch": {"state": {"k": 3}}})
        text = state.to_json()
        again = TrainState.from_json(text)
        assert again.to_json() == text
        assert again.ema["disc"] == state.ema["disc"]


class TestPairedStep:
    def test_zero_gradient_at_exact_target(self):
        p = parameter(np.array([[1.0], [2.0]]), name="p")
        opt = OptimizerState([p], lr=0.1, mode="sgd")

        def predict(x):
            return ops.mul(p, 1.0)

        loss = paired_supervised_step(opt, predict, [(None, p.data.copy())])
        assert loss == 0.0
        assert np.array_equal(p.data, np.array([[1.0], [2.0]]))

    def test_overfits_single_pair(self):
        p = parameter(np.zeros((3, 1)), name="p")
        opt = OptimizerState([p], lr=0.05)
        target = np.array([[0.4], [-1.0], [2.0]])
        for _ in range(500):
            loss = paired_supervised_step(opt, lambda x: ops.mul(p, 1.0),
                                          [(None, target)])
            if np.sum((p.data - target) ** 2) < 1e-8:
                break
        assert float(np.sum((p.data - target) ** 2)) < 1e-8

    def test_empty_batch_rejected(self):
        p = parameter(np.zeros((1, 1)))
        opt = OptimizerState([p], lr=0.1)
        with pytest.raises(DomainError):
            paired_supervised_step(opt, lambda x: p, [])


def toy_cfg(**overrides):
    values = {"iters": 40, "batch": 8, "beta": 0.05, "recon_lr": 0.02,
              "adv_lr": 0.02, "checkpoint_every": 20, "eval_every": 10}
    values.update(overrides)
    return ExperimentConfig(task="toy2d", values=values)


class TestTrainLoop:
    def test_zero_iterations_returns_initial_state(self, tmp_path):
        cfg = toy_cfg(iters=0)
        bundle = build_task(cfg)
        state, rows = train_loop(bundle.adapter, bundle.banks,
                                 cfg.train_config(),
                                 metrics_path=tmp_path / "m.csv")
        assert state.iteration == 0 and rows == []
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert len(lines) == 1  # header only

    def test_beta_zero_identical_to_disc_free_loop(self):
        cfg = toy_cfg(beta=0.0)
        bundle = build_task(cfg)
        train_loop(bundle.adapter, bundle.banks, cfg.train_config())
        latent_a = bundle.adapter.latent.data.copy()

        cfg2 = toy_cfg(beta=0.0)
        bundle2 = build_task(cfg2)
        bundle2.adapter.discriminators = lambda: []  # physically remove discs
        train_loop(bundle2.adapter, {}, cfg2.train_config())
        assert np.array_equal(latent_a, bundle2.adapter.latent.data)

    def test_seeded_rerun_is_bit_identical(self, tmp_path):
        rows = []
        for run in range(2):
            cfg = toy_cfg()
            bundle = build_task(cfg)
            path = tmp_path / ("m%d.csv" % run)
            train_loop(bundle.adapter, bundle.banks, cfg.train_config(),
                       metrics_path=path)
            rows.append(path.read_bytes())
        assert rows[0] == rows[1]

    def test_nan_abort_with_dump(self, tmp_path):
        cfg = toy_cfg(iters=5, beta=0.0)
        bundle = build_task(cfg)
        bundle.adapter.latent.data[:] = np.nan
        dump = tmp_path / "dump.json"
        with pytest.raises(training.TrainingDivergedError):
            train_loop(bundle.adapter, bundle.banks, cfg.train_config(),
                       dump_path=dump)
        blob = json.loads(dump.read_text())
        assert blob["failed_loss"] == "reconstruction"

    def test_toy2d_converges_to_analytic_intersection(self):
        # Min-max last iterates orbit the saddle, so convergence is read off
        # the averaged iterate (standard for saddle-point SGD): a coarse
        # phase approaches, a fine phase is Polyak-averaged past burn-in.
        coarse = toy_cfg(iters=4000, beta=1.0, recon_lr=5e-3, adv_lr=0.1,
                         batch=8, optimizer="sgd", theta_d=1.45, theta_g=1.45,
                         gen_loss_mode="saturating")
        bundle = build_task(coarse)
        task = bundle.adapter
        train_loop(task, bundle.banks, coarse.train_config())

        fine = toy_cfg(iters=12000, beta=1.0, recon_lr=1e-3, adv_lr=0.05,
                       batch=8, optimizer="sgd", theta_d=1.45, theta_g=1.45,
                       gen_loss_mode="saturating", seed=100)
        acc = np.zeros((2, 1))
        hits = [0]

        def track(it, row):
            if it > 3000:
                acc[:] += task.latent.data
                hits[0] += 1

        train_loop(task, bundle.banks, fine.train_config(), log_fn=track)
        averaged = (acc / hits[0]).reshape(-1)
        dist = float(np.linalg.norm(averaged - task.analytic_solution()))
        assert dist < 1e-3, "averaged iterate %r from the intersection" % dist

    def test_checkpoint_callback_cadence(self, tmp_path):
        seen = []
        cfg = toy_cfg(iters=40, checkpoint_every=20)
        bundle = build_task(cfg)
        train_loop(bundle.adapter, bundle.banks, cfg.train_config(),
                   checkpoint_fn=lambda it, state: seen.append(it))
        assert seen == [0, 20, 40]
