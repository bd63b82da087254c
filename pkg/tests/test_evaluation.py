#!/usr/bin/env python3
"""
Tests for the attack success, benign performance and combined metrics.
"""

import csv
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add the src directory to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from trojanlab.attack import TriggerSpec
from trojanlab.envs import Agent, BehaviorPolicy, Policy, derive_seed, generate_dataset, make_env, parse_mix
from trojanlab.errors import UsageError
from trojanlab.evaluation import (
    EvalConfig,
    EvalReport,
    SeedReport,
    actions_match,
    aggregate_cp,
    as_policy,
    btp_from_returns,
    compute_cp,
    eval_asr,
    eval_btp,
    eval_perturbed,
    eval_persistent,
    evaluate,
    run_cp,
    gradient_attribution,
    trigger_window,
)
from trojanlab.seqmodel import ModelConfig, TrajectoryModel, sample_segments

NOISELESS_EXPERT = BehaviorPolicy('expert', noise_scale=0.0, competence=1.0)


class EchoPolicy(Policy):
    """Plays the target once it observes the trigger, otherwise defers to ``base`` (or stands still)."""

    policy_id = 'echo'

    def __init__(self, trigger, target, base=None, latch=0, context_K=3, tolerance=0.0):
        self.trigger = trigger
        self.target = np.asarray(target, dtype=np.float64)
        self.base = base
        self.latch = latch
        self.context_K = context_K
        self.tolerance = tolerance

    def start(self, spec, seed):
        return _EchoAgent(self, self.base.start(spec, seed) if self.base else None, spec.action_dim)


class _EchoAgent(Agent):
    def __init__(self, policy, base, action_dim):
        self.policy = policy
        self.base = base
        self.action_dim = action_dim
        self.remaining = 0

    def act(self, state, step):
        trig = self.policy.trigger
        if (np.abs(state[list(trig.dims)] - trig.values) <= self.policy.tolerance).all():
            self.remaining = self.policy.latch + 1
        if self.remaining > 0:
            self.remaining -= 1
            return self.policy.target.copy()
        if self.base is not None:
            return self.base.act(state, step)
        return np.zeros(self.action_dim)


class TestMetrics(unittest.TestCase):
    """Pure metric arithmetic."""

    def test_combined_performance(self):
        self.assertAlmostEqual(compute_cp(1.0, 0.5), 2.0 / 3.0)
        self.assertEqual(compute_cp(0.0, 1.0), 0.0)
        self.assertEqual(compute_cp(0.0, 0.0), 0.0)
        self.assertAlmostEqual(aggregate_cp([(1.0, 0.5), (0.0, 1.0)]), 1.0 / 3.0)
        self.assertNotAlmostEqual(aggregate_cp([(1.0, 0.5), (0.0, 1.0)]), compute_cp(0.5, 0.75))
        with self.assertRaises(UsageError):
            compute_cp(-0.1, 1.0)
        self.assertEqual(run_cp(0.8, -0.4), 0.0)
        self.assertAlmostEqual(run_cp(1.0, 0.5), compute_cp(1.0, 0.5))
        with self.assertRaises(UsageError):
            aggregate_cp([])

    def test_btp_ratios_and_floor(self):
        outcome = btp_from_returns([1.0, 2.0], [2.0, 4.0], 0.05)
        self.assertAlmostEqual(outcome.value, 0.5)
        self.assertEqual(outcome.floored, [])
        outcome = btp_from_returns([0.5, 3.0], [-1.0, 3.0], 0.05)
        self.assertAlmostEqual(outcome.floor, 0.1)
        self.assertEqual(outcome.floored, [0])
        self.assertAlmostEqual(outcome.value, (1.0 + (0.5 + 1.0) / 0.1 + 1.0) / 2.0)
        # Identical policies score 1 even when the clean return is negative.
        self.assertAlmostEqual(btp_from_returns([-10.0, 3.0], [-10.0, 3.0], 0.05).value, 1.0)
        self.assertLess(btp_from_returns([-12.0], [-10.0], 0.05).value, 1.0)
        self.assertAlmostEqual(btp_from_returns([0.0], [0.0], 0.05).floor, 0.05)
        with self.assertRaises(UsageError):
            btp_from_returns([1.0], [1.0, 2.0], 0.05)

    def test_actions_match(self):
        target = np.ones(2)
        self.assertTrue(actions_match([[0.8, 1.0]], target, 0.3))
        self.assertFalse(actions_match([[0.8, 0.6]], target, 0.3))
        self.assertTrue(actions_match([[0.7, 1.0]], target, 0.3))
        self.assertFalse(actions_match(np.zeros((0, 2)), target, 0.3))

    def test_config_validation(self):
        for bad in (dict(n_episodes=0), dict(asr_epsilon=0.0), dict(trigger_window_end=1.5), dict(seeds=())):
            with self.assertRaises(UsageError):
                EvalConfig(**bad).validate()
        cfg = EvalConfig(seeds=(0, 1), r0_eval=3.0)
        self.assertEqual(EvalConfig.from_dict(cfg.to_dict()), cfg)


class TestTriggeredEpisodes(unittest.TestCase):
    """ASR, persistence and trigger noise on scripted policies."""

    def setUp(self):
        self.spec = make_env('corridor')
        self.trigger = TriggerSpec((2, 3), [0.77, -0.33], [-1.0, -1.0], [1.0, 1.0])
        self.target = np.ones(6)
        self.cfg = EvalConfig(n_episodes=20, asr_epsilon=0.3)

    def test_trigger_window(self):
        echo = EchoPolicy(self.trigger, self.target, context_K=3)
        self.assertEqual(trigger_window(echo, self.spec, self.cfg), (3, 75))
        late = EvalConfig(trigger_window_start=90)
        self.assertEqual(trigger_window(echo, self.spec, late), (75, 75))
        full = EvalConfig(trigger_window_end=1.0)
        self.assertEqual(trigger_window(echo, self.spec, full), (3, 99))

    def test_asr_counts_triggered_step(self):
        echo = EchoPolicy(self.trigger, self.target)
        asr, episodes = eval_asr(echo, self.trigger, self.target, self.spec, self.cfg, seed=4)
        self.assertEqual(asr, 1.0)
        self.assertEqual(len(episodes), 20)
        for k, episode in enumerate(episodes):
            expected = int(np.random.default_rng([derive_seed(4, k), 31]).integers(3, 76))
            self.assertEqual(episode.trigger_step, expected)
            self.assertFalse(episode.redrawn)
            self.assertEqual(episode.actions, [[1.0] * 6])

        blind = EchoPolicy(TriggerSpec((2, 3), [0.1, 0.1], [-1.0, -1.0], [1.0, 1.0]), self.target)
        asr, episodes = eval_asr(blind, self.trigger, self.target, self.spec, self.cfg, seed=4)
        self.assertEqual(asr, 0.0)
        self.assertEqual(sum(e.success for e in episodes), 0)

    def test_asr_is_recountable(self):
        echo = EchoPolicy(self.trigger, self.target, base=NOISELESS_EXPERT)
        asr, episodes = eval_asr(echo, self.trigger, self.target, self.spec, self.cfg, seed=1)
        recount = sum(actions_match(e.actions, self.target, 0.3) for e in episodes) / len(episodes)
        self.assertEqual(asr, recount)
        self.assertEqual(asr, 1.0)
        for episode in episodes:
            self.assertLess(episode.trigger_step, episode.length)

    def test_models_need_a_return_target(self):
        spec = make_env('point-goal')
        model = TrajectoryModel.initialize(ModelConfig(layers=1, embed_dim=8, heads=2, context_K=4).for_env(spec), 0)
        with self.assertRaises(UsageError):
            as_policy(model, EvalConfig())
        self.assertEqual(trigger_window(model, spec, EvalConfig()), (4, 75))

    def test_persistence(self):
        echo = EchoPolicy(self.trigger, self.target, latch=2, context_K=5)
        curve = eval_persistent(echo, self.trigger, self.target, self.spec, self.cfg, [0, 1, 2, 3], 0.9)
        self.assertEqual([p['asr'] for p in curve], [1.0, 1.0, 1.0, 0.0])
        self.assertAlmostEqual(curve[0]['cp'], compute_cp(1.0, 0.9))
        self.assertEqual(curve[3]['cp'], 0.0)
        with self.assertRaises(UsageError):
            eval_persistent(echo, self.trigger, self.target, self.spec, self.cfg, [5], 0.9)
        with self.assertRaises(UsageError):
            eval_persistent(echo, self.trigger, self.target, self.spec, self.cfg, [-1], 0.9)

    def test_trigger_noise(self):
        exact = EchoPolicy(self.trigger, self.target)
        curve = eval_perturbed(exact, self.trigger, self.target, self.spec, self.cfg, [0.0, 0.1])
        self.assertEqual(curve, [{'level': 0.0, 'asr': 1.0}, {'level': 0.1, 'asr': 0.0}])
        tolerant = EchoPolicy(self.trigger, self.target, tolerance=0.2)
        curve = eval_perturbed(tolerant, self.trigger, self.target, self.spec, self.cfg, [0.0, 0.01, 0.05, 0.1])
        self.assertEqual([p['asr'] for p in curve], [1.0] * 4)
        with self.assertRaises(UsageError):
            eval_perturbed(exact, self.trigger, self.target, self.spec, self.cfg, [1.0])

    def test_btp_pairs_episodes(self):
        outcome = eval_btp(NOISELESS_EXPERT, NOISELESS_EXPERT, self.spec, EvalConfig(n_episodes=5), seed=2)
        self.assertEqual(outcome.backdoored_returns, outcome.clean_returns)
        self.assertEqual(outcome.value, 1.0)


class TestReports(unittest.TestCase):
    """Full evaluation and the report files."""

    def setUp(self):
        """Set up the test environment."""
        self.temp_dir = tempfile.mkdtemp()
        self.spec = make_env('corridor')
        self.trigger = TriggerSpec((2, 3), [0.77, -0.33], [-1.0, -1.0], [1.0, 1.0])
        self.target = np.ones(6)

    def tearDown(self):
        """Clean up the test environment."""
        shutil.rmtree(self.temp_dir)

    def test_evaluate_and_round_trip(self):
        backdoored = EchoPolicy(self.trigger, self.target, base=NOISELESS_EXPERT, context_K=4)
        cfg = EvalConfig(n_episodes=6, seeds=(0, 1))
        report = evaluate(backdoored, NOISELESS_EXPERT, self.trigger, self.target, self.spec, cfg,
                          persist_k=[0, 1], noise_levels=[0.0, 0.05])
        self.assertEqual([s.seed for s in report.seeds], [0, 1])
        self.assertEqual(report.aggregate['cp'], 1.0)
        self.assertEqual(report.aggregate['n_seeds'], 2)
        with self.assertRaises(UsageError):
            evaluate(backdoored, NOISELESS_EXPERT, self.trigger, self.target, self.spec, cfg, persist_k=[4])

        path = os.path.join(self.temp_dir, 'report.jsonl')
        report.write_jsonl(path)
        loaded = EvalReport.read_jsonl(path)
        self.assertEqual(loaded.aggregate, report.aggregate)
        self.assertEqual(loaded.config['n_episodes'], 6)
        self.assertEqual(loaded.seeds[1].persistence, report.seeds[1].persistence)

        persistence = os.path.join(self.temp_dir, 'persistence.csv')
        perturbation = os.path.join(self.temp_dir, 'perturbation.csv')
        report.write_curves(persistence, perturbation)
        with open(persistence, 'r', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(len(rows), 4)
        self.assertEqual(rows[0]['k'], '0')
        self.assertTrue(os.path.exists(perturbation))

    def test_aggregate_is_mean_of_seed_cp(self):
        report = EvalReport([SeedReport(0, 1.0, 0.5, compute_cp(1.0, 0.5)), SeedReport(1, 0.0, 1.0, 0.0)])
        self.assertAlmostEqual(report.aggregate['cp'], 1.0 / 3.0)
        self.assertAlmostEqual(report.aggregate['asr'], 0.5)

    def test_curves_are_skipped_when_empty(self):
        report = EvalReport([SeedReport(0, 1.0, 1.0, 1.0)])
        path = os.path.join(self.temp_dir, 'persistence.csv')
        report.write_curves(path, None)
        self.assertFalse(os.path.exists(path))


class TestAttribution(unittest.TestCase):
    """Gradient saliency over state dimensions."""

    def test_shapes_and_modes(self):
        spec = make_env('point-goal')
        dataset = generate_dataset(spec, parse_mix('expert:2'), seed=0)
        model = TrajectoryModel.initialize(
            ModelConfig(layers=1, embed_dim=8, heads=2, context_K=4, dropout=0.0).for_dataset(dataset), 3)
        batch = sample_segments(dataset, 4, np.random.default_rng(0), 4)
        last = gradient_attribution(model, batch)
        every = gradient_attribution(model, batch, positions='all')
        for saliency in (last, every):
            self.assertEqual(saliency.shape, (8,))
            self.assertTrue((saliency >= 0).all() and np.isfinite(saliency).all())
            self.assertTrue(saliency.any())
        np.testing.assert_array_equal(last, gradient_attribution(model, batch))
        self.assertTrue(all(p.grad is None for p in model.parameters().values()))
        with self.assertRaises(UsageError):
            gradient_attribution(model, batch, positions='first')


if __name__ == '__main__':
    unittest.main()
