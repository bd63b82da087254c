#!/usr/bin/env python3
"""
Tests for the synthetic environments, behavior policies and dataset files.
"""

import os
import shutil
import struct
import sys
import tempfile
import unittest
import zlib
from pathlib import Path

import numpy as np

# Add the src directory to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from trojanlab.envs import (
    BEHAVIOR_PRESETS,
    Agent,
    BehaviorPolicy,
    OfflineDataset,
    Policy,
    Trajectory,
    TriggerPlan,
    dataset_export_text,
    dataset_from_bytes,
    dataset_load,
    dataset_save,
    dataset_to_bytes,
    derive_seed,
    env_reset,
    env_step,
    generate_dataset,
    make_env,
    parse_mix,
    rollout,
    validate_trajectory,
)
from trojanlab.errors import FormatError, PolicyError, UsageError


class ConstantPolicy(Policy):
    """Emits the same action at every step."""

    def __init__(self, action):
        self.action = np.asarray(action, dtype=np.float64)

    def start(self, spec, seed):
        policy = self

        class _Agent(Agent):
            def act(self, state, step):
                return policy.action

        return _Agent()


class TestEnvironments(unittest.TestCase):
    """Reset, step and rollout behavior."""

    def test_known_environments(self):
        point = make_env('point-goal')
        self.assertEqual((point.state_dim, point.action_dim, point.horizon), (8, 4, 100))
        corridor = make_env('corridor')
        self.assertEqual((corridor.state_dim, corridor.action_dim), (12, 6))
        with self.assertRaises(UsageError):
            make_env('cheetah')

    def test_reset_is_deterministic_per_seed(self):
        spec = make_env('point-goal')
        np.testing.assert_array_equal(env_reset(spec, 3), env_reset(spec, 3))
        self.assertFalse(np.array_equal(env_reset(spec, 3), env_reset(spec, 4)))

    def test_step_clips_actions_and_stops_at_horizon(self):
        spec = make_env('point-goal')
        state = env_reset(spec, 0)
        clipped, _, _ = env_step(spec, state, np.array([5.0, -5.0, 0.0, 0.0]))
        bounded, _, _ = env_step(spec, state, np.array([1.0, -1.0, 0.0, 0.0]))
        np.testing.assert_array_equal(clipped, bounded)
        far = np.array([0.0, 0.0, 0.0, 0.0, 0.9, 0.9, 0.0, 0.0])
        _, _, done = env_step(spec, far, np.zeros(4), step_index=spec.horizon - 2)
        self.assertFalse(done)
        _, _, done = env_step(spec, far, np.zeros(4), step_index=spec.horizon - 1)
        self.assertTrue(done)

    def test_step_rejects_non_finite_actions(self):
        spec = make_env('corridor')
        with self.assertRaises(UsageError):
            env_step(spec, env_reset(spec, 0), np.full(6, np.nan))

    def test_point_goal_zero_action_pays_scaled_distance(self):
        spec = make_env('point-goal')
        state = np.array([0.3, -0.2, 0.0, 0.0, -0.5, 0.4, 0.1, 0.1])
        next_state, reward, done = env_step(spec, state, np.zeros(4))
        np.testing.assert_array_equal(next_state[0:2], state[0:2])
        distance = float(np.linalg.norm(state[0:2] - state[4:6]))
        self.assertAlmostEqual(reward, -spec.reward_scale * distance)
        self.assertEqual(spec.reward_scale, 0.1)
        self.assertFalse(done)

    def test_expert_outperforms_random(self):
        for env_id in ('point-goal', 'corridor'):
            spec = make_env(env_id)
            expert = [rollout(spec, BEHAVIOR_PRESETS['expert'], s) for s in range(10)]
            random = [rollout(spec, BEHAVIOR_PRESETS['random'], s) for s in range(10)]
            self.assertGreater(np.mean([t.episode_return for t in expert]),
                               np.mean([t.episode_return for t in random]), env_id)
            self.assertGreaterEqual(sum(t.outcome == 'goal' for t in expert), 8, env_id)

    def test_rollout_shapes_and_determinism(self):
        spec = make_env('point-goal')
        first = rollout(spec, BEHAVIOR_PRESETS['medium'], 11)
        second = rollout(spec, BEHAVIOR_PRESETS['medium'], 11)
        np.testing.assert_array_equal(first.states, second.states)
        np.testing.assert_array_equal(first.actions, second.actions)
        self.assertEqual(first.states.shape, (first.length + 1, spec.state_dim))
        self.assertEqual(first.source, 'medium')
        self.assertIn(first.outcome, ('goal', 'failure', 'horizon'))
        validate_trajectory(first, spec)

    def test_trigger_plan_changes_observation_only(self):
        spec = make_env('point-goal')

        def transform(state):
            triggered = state.copy()
            triggered[7] = 0.99
            return triggered

        plain = rollout(spec, BEHAVIOR_PRESETS['expert'], 5)
        plan = TriggerPlan(frozenset({3}), transform)
        triggered = rollout(spec, BEHAVIOR_PRESETS['expert'], 5, plan)
        # The expert ignores distractor dims, so only the recorded state differs.
        np.testing.assert_array_equal(plain.actions, triggered.actions)
        self.assertEqual(triggered.states[3, 7], 0.99)
        np.testing.assert_array_equal(np.delete(plain.states, 3, axis=0), np.delete(triggered.states, 3, axis=0))

    def test_non_finite_policy_output_is_reported(self):
        spec = make_env('point-goal')
        with self.assertRaises(PolicyError) as raised:
            rollout(spec, ConstantPolicy([np.nan] * 4), 0)
        self.assertEqual(raised.exception.step, 0)
        with self.assertRaises(PolicyError):
            rollout(spec, ConstantPolicy([0.0] * 3), 0)

    def test_behavior_policy_validation(self):
        with self.assertRaises(UsageError):
            BehaviorPolicy('bad', competence=1.5)
        with self.assertRaises(UsageError):
            BehaviorPolicy('bad', noise_scale=-0.1)

    def test_derive_seed(self):
        self.assertEqual(derive_seed(1, 2), derive_seed(1, 2))
        self.assertNotEqual(derive_seed(1, 2), derive_seed(2, 1))


class TestDatasets(unittest.TestCase):
    """Dataset generation and the binary dataset file."""

    def setUp(self):
        """Set up the test environment."""
        self.temp_dir = tempfile.mkdtemp()
        self.spec = make_env('point-goal')
        self.dataset = generate_dataset(self.spec, parse_mix('expert:3,poor:3'), seed=4)

    def tearDown(self):
        """Clean up the test environment."""
        shutil.rmtree(self.temp_dir)

    def test_generation_and_provenance(self):
        self.assertEqual(len(self.dataset), 6)
        self.assertEqual([t.source for t in self.dataset.trajectories], ['expert'] * 3 + ['poor'] * 3)
        self.assertEqual(self.dataset.provenance['mix'], [['expert', 3], ['poor', 3]])
        returns = [t.episode_return for t in self.dataset.trajectories]
        self.assertEqual(self.dataset.return_stats['max'], max(returns))
        self.assertEqual(self.dataset.return_stats['min'], min(returns))

    def test_mixed_datasets_have_length_diversity(self):
        dataset = generate_dataset(self.spec, parse_mix('expert:50,poor:50'), seed=0)
        lengths = dataset.lengths
        shorter = int((lengths < np.median(lengths)).sum())
        self.assertGreaterEqual(shorter, 0.2 * len(dataset))

    def test_appending_to_a_mix_keeps_earlier_episodes(self):
        longer = generate_dataset(self.spec, parse_mix('expert:3,poor:3,random:2'), seed=4)
        for a, b in zip(self.dataset.trajectories, longer.trajectories):
            np.testing.assert_array_equal(a.states, b.states)

    def test_parse_mix_errors(self):
        with self.assertRaises(UsageError):
            parse_mix('wizard:3')
        with self.assertRaises(UsageError):
            parse_mix('expert:many')
        with self.assertRaises(UsageError):
            generate_dataset(self.spec, parse_mix('expert:0'), seed=0)

    def test_empty_or_invalid_dataset(self):
        with self.assertRaises(UsageError):
            OfflineDataset(self.spec, [])
        bad = Trajectory(np.zeros((3, 8)), np.full((2, 4), 2.0), np.zeros(2), True)
        with self.assertRaises(UsageError):
            OfflineDataset(self.spec, [bad])

    def test_save_load(self):
        path = os.path.join(self.temp_dir, 'data.tlds')
        dataset_save(self.dataset, path)
        loaded = dataset_load(path)
        self.assertEqual(len(loaded), len(self.dataset))
        self.assertEqual(loaded.env, self.spec)
        self.assertEqual(loaded.return_stats, self.dataset.return_stats)
        self.assertEqual(loaded.provenance, self.dataset.provenance)
        for a, b in zip(self.dataset.trajectories, loaded.trajectories):
            np.testing.assert_array_equal(a.actions, b.actions)
            self.assertEqual(a.outcome, b.outcome)

    def test_corrupt_files_raise_format_error(self):
        buffer = dataset_to_bytes(self.dataset)
        with self.assertRaises(FormatError):
            dataset_from_bytes(b'NOPE' + buffer[4:])
        with self.assertRaises(FormatError):
            dataset_from_bytes(buffer[:len(buffer) // 2])
        flipped = bytearray(buffer)
        flipped[-20] ^= 0x01
        with self.assertRaises(FormatError):
            dataset_from_bytes(bytes(flipped))

    def test_invalid_utf8_source_is_a_format_error(self):
        buffer = bytearray(dataset_to_bytes(self.dataset))
        (manifest_length,) = struct.unpack('<I', bytes(buffer[8:12]))
        body_start = 12 + manifest_length
        buffer[body_start + 4] = 0xFF
        buffer[-4:] = struct.pack('<I', zlib.crc32(bytes(buffer[body_start:-4])) & 0xFFFFFFFF)
        with self.assertRaises(FormatError):
            dataset_from_bytes(bytes(buffer))

    def test_export_text(self):
        path = os.path.join(self.temp_dir, 'data.csv')
        dataset_export_text(self.dataset, path)
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 1 + int(self.dataset.lengths.sum()))
        self.assertEqual(lines[0].split(',')[:3], ['trajectory', 't', 's0'])


if __name__ == '__main__':
    unittest.main()
