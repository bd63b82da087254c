"""
Trajectory Sequence Models
==========================

Return-conditioned action models over interleaved ``(return-to-go, state,
action)`` tokens. Two token mixers share everything else:

``dt``
    Causal multi-head self-attention (Decision Transformer style).
``dc``
    Causal depthwise convolution over the token axis (Decision ConvFormer
    style).

The action for step ``t`` is read from the output of the state token of step
``t``, so it never sees the action token of the same step.
"""

import csv
import hashlib
import json
import logging
import math
from collections import deque
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Deque, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from trojanlab import autodiff as ad
from trojanlab.autodiff import OptimState, Tape, Tensor
from trojanlab.envs import (
    Agent,
    EnvSpec,
    OfflineDataset,
    Policy,
    Trajectory,
    derive_seed,
    rollout,
)
from trojanlab.errors import DimensionError, FormatError, NonFiniteError, TrainingError, UsageError

logger = logging.getLogger(__name__)

ARCHITECTURES = ('dt', 'dc')
INIT_STD = 0.02


@dataclass
class ModelConfig:
    """Architecture of a trajectory model.

    ``rtg_scale`` divides return-to-go values before embedding; 0 means
    derive it from the training data (see :meth:`for_dataset`).
    """

    arch: str = 'dt'
    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    conv_width: int = 6
    context_K: int = 10
    dropout: float = 0.1
    state_dim: int = 0
    action_dim: int = 0
    max_timestep: int = 100
    action_low: Tuple[float, ...] = ()
    action_high: Tuple[float, ...] = ()
    rtg_scale: float = 0.0

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise UsageError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.context_K < 2:
            raise UsageError(f"context_K must be at least 2, got {self.context_K}")
        if self.layers < 1 or self.embed_dim < 1 or self.conv_width < 1 or self.max_timestep < 1:
            raise UsageError("layers, embed_dim, conv_width and max_timestep must be positive")
        if self.arch == 'dt' and (self.heads < 1 or self.embed_dim % self.heads):
            raise UsageError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.state_dim < 1 or self.action_dim < 1:
            raise UsageError("state_dim and action_dim must be set before building a model")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise UsageError("action bounds do not match action_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.rtg_scale <= 0.0:
            raise UsageError("rtg_scale must be positive; build configs with for_env or for_dataset")

    def for_env(self, spec: EnvSpec) -> 'ModelConfig':
        """Copy with the environment's dimensions, bounds and horizon filled in."""
        data = asdict(self)
        data.update(
            state_dim=spec.state_dim,
            action_dim=spec.action_dim,
            max_timestep=spec.horizon,
            action_low=tuple(spec.action_low),
            action_high=tuple(spec.action_high),
        )
        if data['rtg_scale'] <= 0.0:
            data['rtg_scale'] = 1.0
        return ModelConfig(**data)

    def for_dataset(self, ds: OfflineDataset) -> 'ModelConfig':
        """Like :meth:`for_env`, deriving an automatic ``rtg_scale`` from the returns."""
        config = self.for_env(ds.env)
        if self.rtg_scale <= 0.0:
            stats = ds.return_stats
            config.rtg_scale = max(1.0, abs(stats['min']), abs(stats['max']))
        return config

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['action_low'] = list(self.action_low)
        data['action_high'] = list(self.action_high)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        data = dict(data)
        for key in ('action_low', 'action_high'):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        return cls(**data)


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Names and shapes of every parameter, in a fixed order."""
    E, S, A = config.embed_dim, config.state_dim, config.action_dim
    shapes = {
        'embed_rtg.w': (1, E), 'embed_rtg.b': (E,),
        'embed_state.w': (S, E), 'embed_state.b': (E,),
        'embed_action.w': (A, E), 'embed_action.b': (E,),
        'embed_timestep': (config.max_timestep, E),
        'embed_ln.g': (E,), 'embed_ln.b': (E,),
    }
    for i in range(config.layers):
        p = f'blocks.{i}.'
        shapes[p + 'ln1.g'] = (E,)
        shapes[p + 'ln1.b'] = (E,)
        if config.arch == 'dt':
            for name in ('q', 'k', 'v', 'o'):
                shapes[p + f'attn.w{name}'] = (E, E)
                shapes[p + f'attn.b{name}'] = (E,)
        else:
            shapes[p + 'conv.kernel'] = (config.conv_width, E)
            shapes[p + 'conv.b'] = (E,)
        shapes[p + 'ln2.g'] = (E,)
        shapes[p + 'ln2.b'] = (E,)
        shapes[p + 'mlp.w1'] = (E, 4 * E)
        shapes[p + 'mlp.b1'] = (4 * E,)
        shapes[p + 'mlp.w2'] = (4 * E, E)
        shapes[p + 'mlp.b2'] = (E,)
    shapes['ln_f.g'] = (E,)
    shapes['ln_f.b'] = (E,)
    shapes['head.w'] = (E, A)
    shapes['head.b'] = (A,)
    return shapes


# ---------------------------------------------------------------------------
# Segments
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SegmentBatch:
    """
    A batch of prefix-padded trajectory windows.

    Valid steps of every row are contiguous at the right end, so the last
    position always holds the most recent valid step.
    """

    rtg: np.ndarray          # B x L x 1
    states: np.ndarray       # B x L x state_dim
    actions: np.ndarray      # B x L x action_dim
    rewards: np.ndarray      # B x L
    timesteps: np.ndarray    # B x L, int
    pad_mask: np.ndarray     # B x L, bool
    source_index: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return int(self.states.shape[0])

    @property
    def length(self) -> int:
        return int(self.states.shape[1])

    def copy(self) -> 'SegmentBatch':
        return SegmentBatch(
            rtg=self.rtg.copy(),
            states=self.states.copy(),
            actions=self.actions.copy(),
            rewards=self.rewards.copy(),
            timesteps=self.timesteps.copy(),
            pad_mask=self.pad_mask.copy(),
            source_index=list(self.source_index),
        )

    def identical_to(self, other: 'SegmentBatch') -> bool:
        """Bitwise equality of every channel."""
        pairs = [(self.rtg, other.rtg), (self.states, other.states), (self.actions, other.actions),
                 (self.rewards, other.rewards), (self.timesteps, other.timesteps),
                 (self.pad_mask, other.pad_mask)]
        return (all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)
                and self.source_index == other.source_index)


class TrajectoryPool:
    """Trajectories available for sampling, remembering their dataset indices."""

    def __init__(self, trajectories: Sequence[Trajectory], indices: Optional[Sequence[int]] = None):
        self.trajectories = list(trajectories)
        self.indices = list(indices) if indices is not None else list(range(len(self.trajectories)))
        if len(self.indices) != len(self.trajectories):
            raise UsageError("pool indices do not match the trajectories")

    @classmethod
    def from_dataset(cls, ds: OfflineDataset) -> 'TrajectoryPool':
        return cls(ds.trajectories)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([t.length for t in self.trajectories], dtype=np.float64)


SampleSource = Union[OfflineDataset, TrajectoryPool, Sequence[Trajectory]]


def as_pool(source: SampleSource) -> TrajectoryPool:
    if isinstance(source, TrajectoryPool):
        return source
    if isinstance(source, OfflineDataset):
        return TrajectoryPool.from_dataset(source)
    return TrajectoryPool(source)


def compute_rtg(rewards: np.ndarray, r0: float) -> np.ndarray:
    """Return-to-go after each step: ``r0`` minus the rewards collected up to and including it."""
    return float(r0) - np.cumsum(np.asarray(rewards, dtype=np.float64))


def sample_segments(source: SampleSource, batch_size: int, rng: np.random.Generator,
                    context_K: int) -> SegmentBatch:
    """
    Draw ``batch_size`` windows of at most ``context_K`` steps.

    Trajectories are chosen with probability proportional to their length and
    the start offset is uniform over ``[0, max(0, L-K)]``. Returns-to-go use
    the trajectory's own return as ``R0``.

    Raises:
        UsageError: If the source is empty or ``batch_size`` is not positive
    """
    pool = as_pool(source)
    if len(pool) == 0:
        raise UsageError("cannot sample segments from an empty trajectory source")
    if batch_size < 1:
        raise UsageError(f"batch_size must be at least 1, got {batch_size}")
    K = context_K
    first = pool.trajectories[0]
    S, A = first.states.shape[1], first.actions.shape[1]
    lengths = pool.lengths
    choices = rng.choice(len(pool), size=batch_size, p=lengths / lengths.sum())

    rtg = np.zeros((batch_size, K, 1))
    states = np.zeros((batch_size, K, S))
    actions = np.zeros((batch_size, K, A))
    rewards = np.zeros((batch_size, K))
    timesteps = np.zeros((batch_size, K), dtype=np.int64)
    pad_mask = np.zeros((batch_size, K), dtype=bool)
    source_index = []
    for row, choice in enumerate(choices):
        traj = pool.trajectories[choice]
        L = traj.length
        start = int(rng.integers(0, max(0, L - K) + 1))
        n = min(K, L - start)
        pad = K - n
        window = slice(start, start + n)
        rtg[row, pad:, 0] = compute_rtg(traj.rewards, traj.episode_return)[window]
        states[row, pad:] = traj.states[window]
        actions[row, pad:] = traj.actions[window]
        rewards[row, pad:] = traj.rewards[window]
        timesteps[row, pad:] = np.arange(start, start + n)
        pad_mask[row, pad:] = True
        source_index.append((pool.indices[choice], start))
    return SegmentBatch(rtg, states, actions, rewards, timesteps, pad_mask, source_index)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class TrajectoryModel:
    """
    A token-mixing action model and its parameters.

    Args:
        config: Fully resolved architecture
        params: Parameter tensors keyed as in :func:`parameter_shapes`
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        config.validate()
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise DimensionError(f"parameter names do not match config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}
        low = np.asarray(config.action_low)
        high = np.asarray(config.action_high)
        self._action_mid = (high + low) / 2.0
        self._action_half = (high - low) / 2.0

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> 'TrajectoryModel':
        config.validate()
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith('.g'):
                values = np.ones(shape)
            elif len(shape) == 1:
                values = np.zeros(shape)
            else:
                values = rng.normal(0.0, INIT_STD, size=shape)
            params[name] = Tensor(values, requires_grad=True)
        return cls(config, params)

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @contextmanager
    def frozen(self) -> Iterator['TrajectoryModel']:
        """Stop parameters from recording gradients inside the block."""
        previous = {name: p.requires_grad for name, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for name, p in self.params.items():
                p.requires_grad = previous[name]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    # -- forward ------------------------------------------------------------

    def forward(self, batch: SegmentBatch, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                states: Optional[Tensor] = None) -> Tensor:
        """
        Predict one action per position.

        Args:
            batch: Segment batch with at most ``context_K`` positions
            training: Enables dropout
            rng: Dropout generator, required when training
            states: Optional tensor replacing ``batch.states``; lets callers
                differentiate with respect to the state inputs

        Returns:
            Tensor of shape ``B x L x action_dim`` inside the action bounds
        """
        cfg = self.config
        p = self.params
        B, L = batch.states.shape[:2]
        if L > cfg.context_K:
            raise DimensionError(f"segment length {L} exceeds context_K {cfg.context_K}")
        if batch.states.shape[2] != cfg.state_dim or batch.actions.shape != (B, L, cfg.action_dim):
            raise DimensionError(
                f"batch dims {batch.states.shape}/{batch.actions.shape} do not match "
                f"state_dim {cfg.state_dim} and action_dim {cfg.action_dim}")
        if batch.rtg.shape != (B, L, 1) or batch.pad_mask.shape != (B, L) or batch.timesteps.shape != (B, L):
            raise DimensionError("rtg, pad_mask and timesteps must match the batch layout")
        state_input = Tensor(batch.states) if states is None else states
        if state_input.shape != batch.states.shape:
            raise DimensionError(f"state tensor shape {state_input.shape} does not match {batch.states.shape}")

        E = cfg.embed_dim
        t_ids = np.clip(batch.timesteps, 0, cfg.max_timestep - 1)
        time = ad.embedding(p['embed_timestep'], t_ids)
        r_tok = ad.matmul(Tensor(batch.rtg / cfg.rtg_scale), p['embed_rtg.w']) + p['embed_rtg.b'] + time
        s_tok = ad.matmul(state_input, p['embed_state.w']) + p['embed_state.b'] + time
        a_tok = ad.matmul(Tensor(batch.actions), p['embed_action.w']) + p['embed_action.b'] + time
        T = 3 * L
        h = ad.reshape(ad.stack([r_tok, s_tok, a_tok], axis=2), (B, T, E))
        h = ad.layer_norm(h, p['embed_ln.g'], p['embed_ln.b'])
        h = ad.dropout(h, cfg.dropout, rng, training)

        token_mask = np.repeat(batch.pad_mask.astype(bool), 3, axis=1)
        for i in range(cfg.layers):
            prefix = f'blocks.{i}.'
            x = ad.layer_norm(h, p[prefix + 'ln1.g'], p[prefix + 'ln1.b'])
            if cfg.arch == 'dt':
                mixed = self._attention(x, prefix, token_mask)
            else:
                mixed = self._convolution(x, prefix, token_mask)
            h = h + ad.dropout(mixed, cfg.dropout, rng, training)
            x = ad.layer_norm(h, p[prefix + 'ln2.g'], p[prefix + 'ln2.b'])
            x = ad.gelu(ad.matmul(x, p[prefix + 'mlp.w1']) + p[prefix + 'mlp.b1'])
            x = ad.matmul(x, p[prefix + 'mlp.w2']) + p[prefix + 'mlp.b2']
            h = h + ad.dropout(x, cfg.dropout, rng, training)
        h = ad.layer_norm(h, p['ln_f.g'], p['ln_f.b'])

        state_tokens = ad.index_select(h, 1, [3 * i + 1 for i in range(L)])
        raw = ad.tanh(ad.matmul(state_tokens, p['head.w']) + p['head.b'])
        return raw * self._action_half + self._action_mid

    def _attention(self, x: Tensor, prefix: str, token_mask: np.ndarray) -> Tensor:
        p = self.params
        B, T, E = x.shape
        H = self.config.heads
        dh = E // H

        def heads(name):
            proj = ad.matmul(x, p[prefix + f'attn.w{name}']) + p[prefix + f'attn.b{name}']
            return ad.transpose(ad.reshape(proj, (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads('q'), heads('k'), heads('v')
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        weights = ad.softmax_causal(scores, key_mask=token_mask)
        out = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, T, E))
        return ad.matmul(out, p[prefix + 'attn.wo']) + p[prefix + 'attn.bo']

    def _convolution(self, x: Tensor, prefix: str, token_mask: np.ndarray) -> Tensor:
        p = self.params
        mask = np.broadcast_to(token_mask[:, :, None], x.shape).astype(np.float64)
        return ad.depthwise_conv1d(x * mask, p[prefix + 'conv.kernel']) + p[prefix + 'conv.b']


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Optimizer and loop settings for clean training."""

    steps: int = 5000
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.25
    warmup_steps: int = 250
    seed: int = 0
    log_every: int = 100

    def make_optimizer(self) -> OptimState:
        return OptimState(learning_rate=self.learning_rate, weight_decay=self.weight_decay)


def warmup_scale(step: int, warmup_steps: int) -> float:
    """Linear learning-rate warmup factor for zero-based ``step``."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, (step + 1) / warmup_steps)


def valid_mask(batch: SegmentBatch, width: int) -> np.ndarray:
    return np.broadcast_to(batch.pad_mask[:, :, None], batch.pad_mask.shape + (width,)).astype(np.float64)


def reconstruction_loss(predicted: Tensor, batch: SegmentBatch) -> Tensor:
    """Mean squared action error over valid positions only."""
    A = batch.actions.shape[2]
    mask = valid_mask(batch, A)
    count = mask.sum()
    if count == 0:
        raise UsageError("batch has no valid positions")
    err = ad.square(predicted - Tensor(batch.actions)) * mask
    return ad.sum(err) * (1.0 / count)


def clean_loss(model: TrajectoryModel, batch: SegmentBatch, training: bool = False,
               rng: Optional[np.random.Generator] = None) -> Tensor:
    return reconstruction_loss(model.forward(batch, training=training, rng=rng), batch)


def train_step(model: TrajectoryModel, loss_fn: Callable[[], Tensor], optim: OptimState,
               grad_clip: float, lr_scale: float, step: int) -> Tuple[float, float]:
    """
    Record ``loss_fn`` on a fresh tape, backpropagate and apply one Adam update.

    Returns:
        Loss value and pre-clip gradient norm

    Raises:
        TrainingError: If the loss or any gradient is not finite
    """
    model.zero_grad()
    with Tape():
        try:
            loss = loss_fn()
        except NonFiniteError as e:
            raise TrainingError(f"loss diverged ({e})", step=step) from None
    ad.backward(loss)
    grads = {name: p.grad for name, p in model.params.items()}
    norm = ad.adam_step(model.params, grads, optim, grad_clip, lr_scale)
    return loss.item(), norm


@dataclass(eq=False)
class Checkpoint:
    """Model config, parameter arrays and training metadata."""

    config: ModelConfig
    params: Dict[str, np.ndarray]
    training_meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        if set(expected) != set(self.params):
            raise FormatError("checkpoint parameter names do not match its config")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise FormatError(f"checkpoint parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def from_model(cls, model: TrajectoryModel, training_meta: Optional[Dict] = None) -> 'Checkpoint':
        return cls(model.config, model.state_arrays(), dict(training_meta or {}))

    def model(self) -> TrajectoryModel:
        return TrajectoryModel(self.config, {n: Tensor(v, requires_grad=True) for n, v in self.params.items()})

    def metadata(self) -> str:
        return json.dumps({'config': self.config.to_dict(), 'training_meta': self.training_meta}, sort_keys=True)

    def ordered_params(self) -> Dict[str, np.ndarray]:
        return {name: self.params[name] for name in parameter_shapes(self.config)}

    def to_bytes(self) -> bytes:
        return ad.tensors_to_bytes(self.ordered_params(), self.metadata())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str) -> None:
        ad.save_tensors(path, self.ordered_params(), self.metadata())
        logger.info(f"Saved {self.config.arch} checkpoint to {path}")

    @classmethod
    def from_record(cls, tensors: Dict[str, np.ndarray], metadata: str, source: str) -> 'Checkpoint':
        try:
            record = json.loads(metadata)
            config = ModelConfig.from_dict(record['config'])
            config.validate()
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(f"{source}: bad checkpoint config record ({e})") from None
        try:
            return cls(config, tensors, record.get('training_meta', {}))
        except FormatError as e:
            raise FormatError(f"{source}: {e}") from None

    @classmethod
    def load(cls, path: str) -> 'Checkpoint':
        tensors, metadata = ad.load_tensors(path)
        return cls.from_record(tensors, metadata, path)


def export_loss_history(history: Sequence[float], path: str) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['step', 'loss'])
        for step, loss in enumerate(history, start=1):
            writer.writerow([step, repr(float(loss))])


def clean_train(model: TrajectoryModel, source: SampleSource, config: TrainConfig,
                optim: Optional[OptimState] = None,
                on_step: Optional[Callable[[int, TrajectoryModel], None]] = None) -> Checkpoint:
    """
    Train ``model`` in place by action reconstruction.

    Batches and dropout masks come from generators seeded by
    ``config.seed``, so two runs with equal inputs produce identical
    checkpoints.

    Raises:
        UsageError: If ``config.steps`` is below 1
        TrainingError: If the loss or gradients diverge
    """
    if config.steps < 1:
        raise UsageError(f"steps must be at least 1, got {config.steps}")
    optim = optim or config.make_optimizer()
    pool = as_pool(source)
    batch_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    K = model.config.context_K
    history: List[float] = []
    logger.info(f"Clean training {model.config.arch} model for {config.steps} steps on {len(pool)} trajectories")
    for step in range(config.steps):
        batch = sample_segments(pool, config.batch_size, batch_rng, K)
        loss, norm = train_step(
            model,
            lambda: clean_loss(model, batch, training=True, rng=dropout_rng),
            optim,
            config.grad_clip,
            warmup_scale(step, config.warmup_steps),
            step + 1,
        )
        history.append(loss)
        if config.log_every and (step + 1) % config.log_every == 0:
            logger.info(f"step {step + 1}/{config.steps} loss {loss:.5f} grad_norm {norm:.4f}")
        else:
            logger.debug(f"step {step + 1} loss {loss:.6f}")
        if on_step is not None:
            on_step(step + 1, model)
    meta = {'kind': 'clean', 'steps': config.steps, 'seed': config.seed, 'loss_history': history}
    return Checkpoint.from_model(model, meta)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

class History:
    """Rolling context of the most recent ``context_K`` steps of one episode."""

    def __init__(self, context_K: int, state_dim: int, action_dim: int):
        self.context_K = context_K
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.states: Deque[np.ndarray] = deque(maxlen=context_K)
        self.actions: Deque[np.ndarray] = deque(maxlen=context_K)
        self.timesteps: Deque[int] = deque(maxlen=context_K)
        self.rewards_before: Deque[float] = deque(maxlen=context_K)
        self.reward_sum = 0.0

    def __len__(self) -> int:
        return len(self.states)

    def push_state(self, state: np.ndarray, timestep: int) -> None:
        """Open a new step; its action slot holds zeros until :meth:`record` fills it."""
        self.states.append(np.asarray(state, dtype=np.float64).copy())
        self.actions.append(np.zeros(self.action_dim))
        self.timesteps.append(int(timestep))
        self.rewards_before.append(self.reward_sum)

    def record(self, action: np.ndarray, reward: float) -> None:
        if not self.states:
            raise UsageError("record called before any state was pushed")
        self.actions[-1] = np.asarray(action, dtype=np.float64).copy()
        self.reward_sum += float(reward)

    def to_batch(self, r0_eval: float) -> SegmentBatch:
        K, n = self.context_K, len(self.states)
        if n == 0:
            raise UsageError("history is empty")
        pad = K - n
        rtg = np.zeros((1, K, 1))
        states = np.zeros((1, K, self.state_dim))
        actions = np.zeros((1, K, self.action_dim))
        timesteps = np.zeros((1, K), dtype=np.int64)
        pad_mask = np.zeros((1, K), dtype=bool)
        rtg[0, pad:, 0] = r0_eval - np.array(self.rewards_before)
        states[0, pad:] = np.array(self.states)
        actions[0, pad:] = np.array(self.actions)
        timesteps[0, pad:] = np.array(self.timesteps)
        pad_mask[0, pad:] = True
        return SegmentBatch(rtg, states, actions, np.zeros((1, K)), timesteps, pad_mask)


def predict_action(model: TrajectoryModel, history: History, r0_eval: float) -> np.ndarray:
    """Action for the most recent state in ``history``, clipped to the action bounds."""
    predicted = model.forward(history.to_batch(r0_eval), training=False)
    action = predicted.data[0, -1]
    return np.clip(action, model.config.action_low, model.config.action_high)


class ModelAgent(Agent):
    def __init__(self, model: TrajectoryModel, r0_eval: float):
        cfg = model.config
        self.model = model
        self.r0_eval = r0_eval
        self.history = History(cfg.context_K, cfg.state_dim, cfg.action_dim)
        self.last_prediction: Optional[np.ndarray] = None

    def act(self, state, step):
        self.history.push_state(state, step)
        # RTG here is r0 minus rewards before this step; training RTG also subtracts the current reward.
        self.last_prediction = predict_action(self.model, self.history, self.r0_eval)
        return self.last_prediction

    def observe(self, action, reward):
        self.history.record(action, reward)


@dataclass(eq=False)
class ModelPolicy(Policy):
    """Drives rollouts with a trained model conditioned on ``r0_eval``."""

    model: TrajectoryModel
    r0_eval: float
    policy_id: str = 'model'

    def start(self, spec: EnvSpec, seed: int) -> Agent:
        cfg = self.model.config
        if (cfg.state_dim, cfg.action_dim) != (spec.state_dim, spec.action_dim):
            raise DimensionError(
                f"model dims ({cfg.state_dim}, {cfg.action_dim}) do not match {spec.env_id} "
                f"({spec.state_dim}, {spec.action_dim})")
        return ModelAgent(self.model, self.r0_eval)


def evaluate_return(model: TrajectoryModel, spec: EnvSpec, n_episodes: int, r0_eval: float,
                    seed: int) -> List[float]:
    """Returns of ``n_episodes`` rollouts with episode seeds derived from ``seed``."""
    if n_episodes < 1:
        raise UsageError(f"n_episodes must be at least 1, got {n_episodes}")
    policy = ModelPolicy(model, r0_eval)
    returns = [rollout(spec, policy, derive_seed(seed, k)).episode_return for k in range(n_episodes)]
    logger.info(f"Evaluated {n_episodes} episodes on {spec.env_id}: mean return {np.mean(returns):.3f}")
    return returns
