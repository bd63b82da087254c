#!/usr/bin/env python3
"""
Tests for trajectory sequence models: segments, the two token mixers,
clean training, checkpoints and online inference.
"""

import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add the src directory to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from trojanlab import autodiff as ad
from trojanlab.autodiff import Tape, Tensor
from trojanlab.envs import generate_dataset, make_env, parse_mix, rollout
from trojanlab.errors import DimensionError, FormatError, NonFiniteError, TrainingError, UsageError
from trojanlab.seqmodel import (
    Checkpoint,
    History,
    ModelConfig,
    ModelPolicy,
    SegmentBatch,
    TrainConfig,
    TrajectoryModel,
    TrajectoryPool,
    clean_loss,
    clean_train,
    compute_rtg,
    evaluate_return,
    parameter_shapes,
    predict_action,
    reconstruction_loss,
    sample_segments,
    train_step,
    warmup_scale,
)


def tiny_config(spec, arch='dt', **overrides):
    values = dict(arch=arch, layers=1, embed_dim=8, heads=2, conv_width=3, context_K=4, dropout=0.0)
    values.update(overrides)
    return ModelConfig(**values).for_env(spec)


def padded_batch(spec, K=4, pad=2, seed=0):
    """One row whose first ``pad`` positions are padding."""
    rng = np.random.default_rng(seed)
    batch = SegmentBatch(
        rtg=rng.normal(size=(1, K, 1)),
        states=rng.uniform(-1, 1, size=(1, K, spec.state_dim)),
        actions=rng.uniform(-1, 1, size=(1, K, spec.action_dim)),
        rewards=np.zeros((1, K)),
        timesteps=np.arange(K)[None, :],
        pad_mask=np.arange(K)[None, :] >= pad,
    )
    return batch


class TestSegments(unittest.TestCase):
    """Return-to-go and segment sampling."""

    @classmethod
    def setUpClass(cls):
        cls.spec = make_env('point-goal')
        cls.dataset = generate_dataset(cls.spec, parse_mix('expert:4,poor:4'), seed=1)

    def test_compute_rtg(self):
        np.testing.assert_array_equal(compute_rtg([1.0, 2.0, 3.0], 10.0), [9.0, 7.0, 4.0])
        np.testing.assert_array_equal(compute_rtg([0.0, 0.0], 5.0), [5.0, 5.0])
        rewards = np.array([0.3, -0.1, 2.5])
        self.assertAlmostEqual(compute_rtg(rewards, rewards.sum())[-1], 0.0)

    def test_segments_are_prefix_padded(self):
        batch = sample_segments(self.dataset, 32, np.random.default_rng(0), context_K=10)
        self.assertEqual(batch.states.shape, (32, 10, self.spec.state_dim))
        self.assertTrue(batch.pad_mask[:, -1].all())
        for row in range(32):
            mask = batch.pad_mask[row]
            first_valid = int(np.argmax(mask))
            self.assertTrue(mask[first_valid:].all())
            self.assertFalse(batch.states[row, :first_valid].any())
            index, start = batch.source_index[row]
            traj = self.dataset.trajectories[index]
            n = 10 - first_valid
            np.testing.assert_array_equal(batch.actions[row, first_valid:], traj.actions[start:start + n])
            np.testing.assert_array_equal(batch.timesteps[row, first_valid:], np.arange(start, start + n))
            expected = compute_rtg(traj.rewards, traj.episode_return)[start:start + n]
            np.testing.assert_allclose(batch.rtg[row, first_valid:, 0], expected)

    def test_short_trajectories_start_at_zero(self):
        traj = self.dataset.trajectories[0]
        short = TrajectoryPool([traj], indices=[7])
        batch = sample_segments(short, 4, np.random.default_rng(3), context_K=traj.length + 5)
        self.assertEqual(batch.source_index, [(7, 0)] * 4)
        self.assertEqual(int(batch.pad_mask[0].sum()), traj.length)

    def test_sampling_is_reproducible(self):
        a = sample_segments(self.dataset, 8, np.random.default_rng(5), 6)
        b = sample_segments(self.dataset, 8, np.random.default_rng(5), 6)
        self.assertTrue(a.identical_to(b))
        c = a.copy()
        c.states[0, -1, 0] += 1.0
        self.assertFalse(a.identical_to(c))

    def test_selection_frequency_follows_length(self):
        by_length = {}
        for index, traj in enumerate(self.dataset.trajectories):
            by_length.setdefault(traj.length, index)
        chosen = sorted(by_length.values())[:3]
        pool = TrajectoryPool([self.dataset.trajectories[i] for i in chosen], indices=chosen)
        draws = 100000
        batch = sample_segments(pool, draws, np.random.default_rng(21), context_K=2)
        picked = np.array([index for index, _ in batch.source_index])
        weights = pool.lengths / pool.lengths.sum()
        for index, p in zip(chosen, weights):
            sigma = np.sqrt(draws * p * (1.0 - p))
            self.assertLessEqual(abs(int((picked == index).sum()) - draws * p), 3 * sigma, f'trajectory {index}')

    def test_sampling_errors(self):
        with self.assertRaises(UsageError):
            sample_segments([], 4, np.random.default_rng(0), 4)
        with self.assertRaises(UsageError):
            sample_segments(self.dataset, 0, np.random.default_rng(0), 4)


class TestModel(unittest.TestCase):
    """Forward pass structure and gradients."""

    def setUp(self):
        self.spec = make_env('point-goal')

    def test_config_validation(self):
        with self.assertRaises(UsageError):
            tiny_config(self.spec, embed_dim=9, heads=2).validate()
        with self.assertRaises(UsageError):
            ModelConfig().validate()
        with self.assertRaises(UsageError):
            tiny_config(self.spec, arch='gdt').validate()
        dataset = generate_dataset(self.spec, parse_mix('expert:3'), seed=0)
        config = ModelConfig().for_dataset(dataset)
        stats = dataset.return_stats
        self.assertEqual(config.rtg_scale, max(1.0, abs(stats['min']), abs(stats['max'])))
        self.assertEqual(config.max_timestep, self.spec.horizon)

    def test_parameter_names_follow_architecture(self):
        dt = parameter_shapes(tiny_config(self.spec, 'dt'))
        dc = parameter_shapes(tiny_config(self.spec, 'dc'))
        self.assertIn('blocks.0.attn.wq', dt)
        self.assertNotIn('blocks.0.conv.kernel', dt)
        self.assertEqual(dc['blocks.0.conv.kernel'], (3, 8))
        self.assertEqual(dt['head.w'], (8, self.spec.action_dim))

    def test_token_mixers_give_different_outputs(self):
        dt = TrajectoryModel.initialize(tiny_config(self.spec, 'dt'), seed=0)
        dc = TrajectoryModel.initialize(tiny_config(self.spec, 'dc'), seed=0)
        for name, p in dc.params.items():
            if name in dt.params and dt.params[name].shape == p.shape:
                p.data = dt.params[name].data.copy()
        batch = padded_batch(self.spec, pad=0)
        self.assertFalse(np.allclose(dt.forward(batch).data, dc.forward(batch).data))

    def test_predictions_stay_in_bounds(self):
        for arch in ('dt', 'dc'):
            model = TrajectoryModel.initialize(tiny_config(self.spec, arch), seed=0)
            for p in model.params.values():
                p.data = p.data * 50.0 if p.ndim == 2 else p.data
            predicted = model.forward(padded_batch(self.spec, pad=0)).data
            self.assertEqual(predicted.shape, (1, 4, self.spec.action_dim))
            self.assertTrue((np.abs(predicted) <= 1.0).all(), arch)

    def test_prediction_ignores_future_and_same_step_action(self):
        for arch in ('dt', 'dc'):
            model = TrajectoryModel.initialize(tiny_config(self.spec, arch), seed=1)
            batch = padded_batch(self.spec, pad=0)
            before = model.forward(batch).data
            changed = batch.copy()
            changed.states[0, 3] += 0.5
            changed.actions[0, 2] += 0.5
            after = model.forward(changed).data
            np.testing.assert_allclose(before[0, :3], after[0, :3], rtol=0, atol=1e-12, err_msg=arch)
            self.assertFalse(np.allclose(before[0, 3], after[0, 3]), arch)

    def test_padding_content_is_ignored(self):
        for arch in ('dt', 'dc'):
            model = TrajectoryModel.initialize(tiny_config(self.spec, arch), seed=2)
            batch = padded_batch(self.spec, pad=2)
            before = model.forward(batch).data
            changed = batch.copy()
            changed.states[0, :2] = 0.7
            changed.actions[0, :2] = -0.3
            changed.rtg[0, :2] = 9.0
            after = model.forward(changed).data
            np.testing.assert_allclose(before[0, 2:], after[0, 2:], rtol=0, atol=1e-12, err_msg=arch)

    def test_dimension_mismatch(self):
        model = TrajectoryModel.initialize(tiny_config(self.spec), seed=0)
        corridor = make_env('corridor')
        with self.assertRaises(DimensionError):
            model.forward(padded_batch(corridor, pad=0))
        with self.assertRaises(DimensionError):
            model.forward(padded_batch(self.spec, K=5, pad=0))

    def test_gradients_match_finite_differences(self):
        for arch, mixer in (('dt', 'blocks.0.attn.wq'), ('dc', 'blocks.0.conv.kernel')):
            model = TrajectoryModel.initialize(tiny_config(self.spec, arch, embed_dim=4), seed=3)
            batch = padded_batch(self.spec, pad=1)
            inputs = [model.params['head.w'], model.params[mixer], model.params['embed_ln.g']]
            error = ad.gradcheck(lambda: reconstruction_loss(model.forward(batch), batch), inputs)
            self.assertLess(error, 1e-4, arch)

    def test_frozen_parameters_collect_no_gradient(self):
        model = TrajectoryModel.initialize(tiny_config(self.spec), seed=0)
        batch = padded_batch(self.spec, pad=0)
        states = Tensor(batch.states, requires_grad=True)
        with model.frozen():
            with Tape():
                loss = ad.sum(model.forward(batch, states=states))
            ad.backward(loss)
        self.assertTrue(all(p.grad is None for p in model.params.values()))
        self.assertTrue(all(p.requires_grad for p in model.params.values()))
        self.assertIsNotNone(states.grad)

    def test_dropout_needs_generator_in_training(self):
        model = TrajectoryModel.initialize(tiny_config(self.spec, dropout=0.2), seed=0)
        with self.assertRaises(UsageError):
            model.forward(padded_batch(self.spec), training=True)


class TestTraining(unittest.TestCase):
    """Clean training, checkpoints and inference."""

    @classmethod
    def setUpClass(cls):
        cls.spec = make_env('point-goal')
        cls.dataset = generate_dataset(cls.spec, parse_mix('expert:6,medium:6'), seed=2)

    def setUp(self):
        """Set up the test environment."""
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up the test environment."""
        shutil.rmtree(self.temp_dir)

    def train(self, steps=60, seed=0, arch='dt'):
        config = ModelConfig(arch=arch, layers=1, embed_dim=16, heads=2, conv_width=3, context_K=5,
                             dropout=0.1).for_dataset(self.dataset)
        model = TrajectoryModel.initialize(config, seed)
        train_cfg = TrainConfig(steps=steps, batch_size=16, learning_rate=1e-3, warmup_steps=5, seed=seed)
        return model, clean_train(model, self.dataset, train_cfg)

    def test_loss_decreases(self):
        for arch in ('dt', 'dc'):
            _, checkpoint = self.train(steps=80, arch=arch)
            history = checkpoint.training_meta['loss_history']
            self.assertEqual(len(history), 80)
            self.assertLess(np.mean(history[-10:]), np.mean(history[:10]), arch)

    def test_training_is_deterministic(self):
        _, first = self.train(steps=10, seed=4)
        _, second = self.train(steps=10, seed=4)
        _, other = self.train(steps=10, seed=5)
        self.assertEqual(first.digest(), second.digest())
        self.assertNotEqual(first.digest(), other.digest())

    def test_checkpoint_save_and_load(self):
        model, checkpoint = self.train(steps=5)
        path = os.path.join(self.temp_dir, 'clean.ckpt')
        checkpoint.save(path)
        loaded = Checkpoint.load(path)
        self.assertEqual(loaded.digest(), checkpoint.digest())
        self.assertEqual(loaded.training_meta['kind'], 'clean')
        batch = sample_segments(self.dataset, 4, np.random.default_rng(0), 5)
        np.testing.assert_array_equal(loaded.model().forward(batch).data, model.forward(batch).data)

    def test_checkpoint_file_is_a_tensor_file(self):
        _, checkpoint = self.train(steps=2)
        path = os.path.join(self.temp_dir, 'clean.ckpt')
        checkpoint.save(path)
        tensors, metadata = ad.load_tensors(path)
        self.assertEqual(list(tensors), list(checkpoint.ordered_params()))
        self.assertEqual(metadata, checkpoint.metadata())
        with open(path, 'rb') as f:
            self.assertEqual(f.read(), checkpoint.to_bytes())

    def test_checkpoint_shape_checks(self):
        model, checkpoint = self.train(steps=1)
        params = dict(checkpoint.params)
        params['head.b'] = np.zeros(7)
        with self.assertRaises(FormatError):
            Checkpoint(checkpoint.config, params)
        del params['head.b']
        with self.assertRaises(FormatError):
            Checkpoint(checkpoint.config, params)

    def test_diverging_loss_becomes_training_error(self):
        model, _ = self.train(steps=1)

        def exploding():
            raise NonFiniteError("overflow")

        with self.assertRaises(TrainingError) as raised:
            train_step(model, exploding, TrainConfig().make_optimizer(), 0.25, 1.0, step=9)
        self.assertEqual(raised.exception.step, 9)

    def test_clean_loss_ignores_padding(self):
        model, _ = self.train(steps=1)
        batch = padded_batch(self.spec, K=5, pad=3)
        changed = batch.copy()
        changed.actions[0, :3] = 0.9
        self.assertAlmostEqual(clean_loss(model, batch).item(), clean_loss(model, changed).item(), places=12)

    def test_warmup_scale(self):
        self.assertEqual(warmup_scale(0, 0), 1.0)
        self.assertEqual(warmup_scale(0, 4), 0.25)
        self.assertEqual(warmup_scale(10, 4), 1.0)

    def test_history_conditions_on_rewards_so_far(self):
        history = History(3, 2, 1)
        history.push_state(np.array([0.0, 1.0]), 0)
        history.record(np.array([0.5]), 2.0)
        history.push_state(np.array([1.0, 1.0]), 1)
        batch = history.to_batch(10.0)
        np.testing.assert_array_equal(batch.pad_mask[0], [False, True, True])
        np.testing.assert_array_equal(batch.rtg[0, 1:, 0], [10.0, 8.0])
        # training labels the same first step with the reward already subtracted
        self.assertEqual(compute_rtg([2.0, 1.0], 10.0)[0], 8.0)
        np.testing.assert_array_equal(batch.actions[0, 2], [0.0])
        for t in range(2, 5):
            history.record(np.array([0.1]), 1.0)
            history.push_state(np.array([float(t), 0.0]), t)
        self.assertEqual(len(history), 3)
        np.testing.assert_array_equal(history.to_batch(10.0).timesteps[0], [2, 3, 4])

    def test_prediction_forgets_evicted_steps(self):
        model = TrajectoryModel.initialize(tiny_config(self.spec, 'dt'), seed=4)
        S, A = self.spec.state_dim, self.spec.action_dim

        def history_starting_at(first_state):
            rng = np.random.default_rng(5)
            history = History(4, S, A)
            for t in range(6):
                history.push_state(first_state if t == 0 else rng.uniform(-1, 1, S), t)
                if t < 5:
                    history.record(rng.uniform(-1, 1, A), 0.5)
            return history

        a, b = history_starting_at(np.zeros(S)), history_starting_at(np.ones(S))
        self.assertEqual(len(a), 4)
        np.testing.assert_array_equal(predict_action(model, a, 3.0), predict_action(model, b, 3.0))

    def test_model_policy(self):
        model, _ = self.train(steps=2)
        r0 = self.dataset.return_stats['max']
        first = evaluate_return(model, self.spec, 2, r0, seed=3)
        second = evaluate_return(model, self.spec, 2, r0, seed=3)
        self.assertEqual(first, second)
        traj = rollout(self.spec, ModelPolicy(model, r0), 0)
        self.assertEqual(traj.source, 'model')
        with self.assertRaises(DimensionError):
            rollout(make_env('corridor'), ModelPolicy(model, r0), 0)


if __name__ == '__main__':
    unittest.main()
