"""
Synthetic Environments and Offline Datasets
===========================================

Two small deterministic continuous-control tasks, scripted behavior
policies that interpolate between a random drifter and an expert
controller, episode rollouts and the offline dataset file format.

``point-goal``
    Planar velocity control towards a goal. State is position (2),
    velocity (2), goal (2) and two distractor dims driven by two distractor
    action dims. Dense reward ``-reward_scale * distance`` plus a success
    bonus; the episode fails when the agent leaves the arena.

``corridor``
    Drive down a corridor against a position dependent cross wind. State is
    position (2), velocity (2), wind (1) and seven distractors; four of the
    six action dims only move distractors. Reward is sparse and paid on the
    terminal step only.
"""

import csv
import json
import logging
import struct
import zlib
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from trojanlab.autodiff import ByteReader, pack_floats, pack_string
from trojanlab.errors import FormatError, PolicyError, UsageError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'TLDS'
DATASET_VERSION = 1


@dataclass(frozen=True)
class EnvSpec:
    """
    Static description of an environment.

    ``reward_scale`` multiplies the dense per-step reward: point-goal pays
    ``-reward_scale * distance`` to the goal (0.1 by default) plus its
    success bonus.
    """

    env_id: str
    state_dim: int
    action_dim: int
    action_low: Tuple[float, ...]
    action_high: Tuple[float, ...]
    state_low: Tuple[float, ...]
    state_high: Tuple[float, ...]
    horizon: int
    reward_scale: float = 1.0

    def __post_init__(self):
        if self.state_dim <= 0 or self.action_dim <= 0 or self.horizon <= 0:
            raise UsageError(f"{self.env_id}: dims and horizon must be positive")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise UsageError(f"{self.env_id}: action bounds do not match action_dim")
        if len(self.state_low) != self.state_dim or len(self.state_high) != self.state_dim:
            raise UsageError(f"{self.env_id}: state bounds do not match state_dim")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise UsageError(f"{self.env_id}: action_low must be below action_high")

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        return np.clip(action, self.action_low, self.action_high)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'EnvSpec':
        data = dict(data)
        for key in ('action_low', 'action_high', 'state_low', 'state_high'):
            data[key] = tuple(float(v) for v in data[key])
        return cls(**data)


@dataclass(eq=False)
class Trajectory:
    """
    One episode: ``states`` has one more row than ``actions``.

    ``source`` names the policy that produced the episode and ``outcome`` is
    one of ``goal``, ``failure`` or ``horizon``.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminated: bool
    source: str = ''
    outcome: str = ''

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


def validate_trajectory(traj: Trajectory, spec: EnvSpec) -> None:
    """Raise UsageError when ``traj`` breaks a trajectory invariant for ``spec``."""
    T = traj.length
    if T < 1:
        raise UsageError("trajectory has no steps")
    if traj.states.shape != (T + 1, spec.state_dim):
        raise UsageError(f"states shape {traj.states.shape} does not fit length {T}")
    if traj.actions.shape != (T, spec.action_dim):
        raise UsageError(f"actions shape {traj.actions.shape} does not fit length {T}")
    if traj.rewards.shape != (T,):
        raise UsageError(f"rewards shape {traj.rewards.shape} does not fit length {T}")
    if T > spec.horizon:
        raise UsageError(f"trajectory length {T} exceeds horizon {spec.horizon}")
    low, high = np.asarray(spec.action_low), np.asarray(spec.action_high)
    if (traj.actions < low).any() or (traj.actions > high).any():
        raise UsageError("trajectory action outside the action bounds")


def return_stats(trajectories: Sequence[Trajectory]) -> Dict[str, float]:
    returns = np.array([t.episode_return for t in trajectories])
    return {'min': float(returns.min()), 'mean': float(returns.mean()), 'max': float(returns.max())}


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

class Dynamics(ABC):
    """Pure dynamics of one environment family."""

    spec: EnvSpec
    success_return: float = 0.0

    @abstractmethod
    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Initial state."""

    @abstractmethod
    def transition(self, state: np.ndarray, action: np.ndarray) -> Tuple[np.ndarray, float, str]:
        """Return next state, reward and outcome ('' while running)."""

    @abstractmethod
    def expert_action(self, state: np.ndarray) -> np.ndarray:
        """Action of the scripted expert controller."""

    def control_dims(self) -> int:
        return 2


class PointGoal(Dynamics):
    SPEED = 0.04
    GOAL_RADIUS = 0.06
    ARENA = 1.2
    SUCCESS_BONUS = 10.0

    spec = EnvSpec(
        env_id='point-goal',
        state_dim=8,
        action_dim=4,
        action_low=(-1.0,) * 4,
        action_high=(1.0,) * 4,
        state_low=(-1.5, -1.5, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0),
        state_high=(1.5, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0),
        horizon=100,
        reward_scale=0.1,
    )

    def reset(self, rng):
        position = rng.uniform(-1.0, 1.0, size=2)
        goal = rng.uniform(-1.0, 1.0, size=2)
        distractors = rng.uniform(-1.0, 1.0, size=2)
        return np.concatenate([position, np.zeros(2), goal, distractors])

    def transition(self, state, action):
        velocity = action[:2]
        position = state[0:2] + self.SPEED * velocity
        goal = state[4:6]
        distractors = 0.9 * state[6:8] + 0.1 * action[2:4]
        distance = float(np.linalg.norm(position - goal))
        reward = -self.spec.reward_scale * distance
        outcome = ''
        if distance <= self.GOAL_RADIUS:
            reward += self.SUCCESS_BONUS
            outcome = 'goal'
        elif np.abs(position).max() > self.ARENA:
            outcome = 'failure'
        return np.concatenate([position, velocity, goal, distractors]), reward, outcome

    def expert_action(self, state):
        control = np.clip((state[4:6] - state[0:2]) / self.SPEED, -1.0, 1.0)
        return np.concatenate([control, np.zeros(2)])


class Corridor(Dynamics):
    LENGTH = 4.0
    FORWARD = 0.1
    LATERAL = 0.05
    WALL = 1.0
    GOAL_REWARD = 5.0
    CRASH_REWARD = -1.0

    spec = EnvSpec(
        env_id='corridor',
        state_dim=12,
        action_dim=6,
        action_low=(-1.0,) * 6,
        action_high=(1.0,) * 6,
        state_low=(-0.5, -1.2, -1.0, -1.0, -0.05) + (-1.0,) * 7,
        state_high=(4.5, 1.2, 1.0, 1.0, 0.05) + (1.0,) * 7,
        horizon=100,
        reward_scale=1.0,
    )

    @staticmethod
    def wind(x: float) -> float:
        return 0.03 * float(np.sin(3.0 * x))

    def reset(self, rng):
        return np.concatenate([np.zeros(5), rng.uniform(-1.0, 1.0, size=7)])

    def transition(self, state, action):
        x, y = float(state[0]), float(state[1])
        x_next = max(0.0, x + self.FORWARD * float(action[0]))
        y_next = y + self.LATERAL * float(action[1]) + self.wind(x)
        distractors = 0.9 * state[5:12] + 0.1 * action[2 + np.arange(7) % 4]
        next_state = np.concatenate([[x_next, y_next], action[:2], [self.wind(x_next)], distractors])
        if abs(y_next) > self.WALL:
            return next_state, self.CRASH_REWARD * self.spec.reward_scale, 'failure'
        if x_next >= self.LENGTH:
            return next_state, self.GOAL_REWARD * self.spec.reward_scale, 'goal'
        return next_state, 0.0, ''

    def expert_action(self, state):
        lateral = np.clip(-(state[1] + state[4]) / self.LATERAL, -1.0, 1.0)
        return np.concatenate([[1.0, lateral], np.zeros(4)])


ENVIRONMENTS: Dict[str, Dynamics] = {
    'point-goal': PointGoal(),
    'corridor': Corridor(),
}


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed derived from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def get_dynamics(env_id: str) -> Dynamics:
    try:
        return ENVIRONMENTS[env_id]
    except KeyError:
        raise UsageError(f"unknown environment {env_id!r}; choose from {sorted(ENVIRONMENTS)}") from None


def make_env(env_id: str) -> EnvSpec:
    return get_dynamics(env_id).spec


def env_reset(spec: EnvSpec, seed: int) -> np.ndarray:
    """Deterministic initial state for ``seed``."""
    return get_dynamics(spec.env_id).reset(np.random.default_rng(seed))


def env_step(spec: EnvSpec, state: np.ndarray, action: np.ndarray,
             step_index: int = 0) -> Tuple[np.ndarray, float, bool]:
    """
    Advance the environment by one step.

    Args:
        spec: Environment description
        state: Current state
        action: Action, clipped to the action bounds before use
        step_index: Zero-based index of this step; the step with index
            ``horizon-1`` always terminates

    Returns:
        Tuple of next state, reward and terminated flag
    """
    next_state, reward, outcome = _transition(spec, state, action)
    return next_state, reward, bool(outcome) or step_index + 1 >= spec.horizon


def _transition(spec: EnvSpec, state: np.ndarray, action: np.ndarray) -> Tuple[np.ndarray, float, str]:
    action = np.asarray(action, dtype=np.float64)
    if not np.isfinite(action).all():
        raise UsageError("action contains NaN or Inf")
    return get_dynamics(spec.env_id).transition(np.asarray(state, dtype=np.float64), spec.clip_action(action))


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

class Agent(ABC):
    """Episode-scoped actor returned by :meth:`Policy.start`."""

    @abstractmethod
    def act(self, state: np.ndarray, step: int) -> np.ndarray:
        """Choose an action for the observed ``state``."""

    def observe(self, action: np.ndarray, reward: float) -> None:
        """Receive the executed action and its reward."""


class Policy(ABC):
    """Anything that can drive a rollout."""

    @abstractmethod
    def start(self, spec: EnvSpec, seed: int) -> Agent:
        """Create a fresh agent for one episode."""


@dataclass(frozen=True)
class BehaviorPolicy(Policy):
    """
    Scripted controller mixing the expert with a persistent random drift.

    ``competence`` 1 is the expert, 0 a drifter that wanders off in one
    random direction per episode; ``noise_scale`` adds Gaussian action noise.
    """

    policy_id: str
    noise_scale: float = 0.0
    competence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.competence <= 1.0:
            raise UsageError(f"competence must lie in [0, 1], got {self.competence}")
        if self.noise_scale < 0.0:
            raise UsageError(f"noise_scale must be non-negative, got {self.noise_scale}")

    def start(self, spec: EnvSpec, seed: int) -> Agent:
        return _ScriptedAgent(self, get_dynamics(spec.env_id), np.random.default_rng([seed, 7919]))


class _ScriptedAgent(Agent):
    def __init__(self, policy: BehaviorPolicy, dynamics: Dynamics, rng: np.random.Generator):
        self.policy = policy
        self.dynamics = dynamics
        self.rng = rng
        drift = rng.uniform(-1.0, 1.0, size=dynamics.spec.action_dim)
        k = dynamics.control_dims()
        drift[:k] /= max(np.abs(drift[:k]).max(), 1e-9)
        self.drift = drift

    def act(self, state, step):
        c = self.policy.competence
        action = c * self.dynamics.expert_action(state) + (1.0 - c) * self.drift
        if self.policy.noise_scale:
            action = action + self.policy.noise_scale * self.rng.standard_normal(action.shape)
        return action


BEHAVIOR_PRESETS: Dict[str, BehaviorPolicy] = {
    'expert': BehaviorPolicy('expert', noise_scale=0.02, competence=1.0),
    'medium': BehaviorPolicy('medium', noise_scale=0.1, competence=0.6),
    'poor': BehaviorPolicy('poor', noise_scale=0.2, competence=0.15),
    'random': BehaviorPolicy('random', noise_scale=0.3, competence=0.0),
}


def parse_mix(text: str) -> List[Tuple[BehaviorPolicy, int]]:
    """Parse ``expert:200,poor:200`` into preset policies with counts."""
    mix = []
    for item in text.split(','):
        name, _, count = item.strip().partition(':')
        if name not in BEHAVIOR_PRESETS:
            raise UsageError(f"unknown behavior policy {name!r}; choose from {sorted(BEHAVIOR_PRESETS)}")
        try:
            n = int(count)
        except ValueError:
            raise UsageError(f"bad count in mix item {item!r}") from None
        mix.append((BEHAVIOR_PRESETS[name], n))
    return mix


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriggerPlan:
    """Observation perturbation applied before the policy sees the state at ``steps``."""

    steps: FrozenSet[int] = frozenset()
    transform: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def apply(self, state: np.ndarray, step: int) -> np.ndarray:
        if self.transform is None or step not in self.steps:
            return state
        return self.transform(state)


def rollout(spec: EnvSpec, policy: Policy, seed: int, trigger_plan: Optional[TriggerPlan] = None) -> Trajectory:
    """
    Run one episode.

    The recorded ``states`` are what the policy observed, so triggered steps
    show the trigger; the dynamics always continue from the true state.

    Raises:
        PolicyError: If the policy emits a non-finite action
    """
    agent = policy.start(spec, seed)
    state = env_reset(spec, seed)
    states, actions, rewards = [], [], []
    outcome = 'horizon'
    for t in range(spec.horizon):
        observed = trigger_plan.apply(state, t) if trigger_plan is not None else state
        raw = np.asarray(agent.act(observed, t), dtype=np.float64)
        if raw.shape != (spec.action_dim,):
            raise PolicyError(f"action shape {raw.shape} does not match action_dim {spec.action_dim}", step=t)
        if not np.isfinite(raw).all():
            raise PolicyError("policy emitted a non-finite action", step=t)
        action = spec.clip_action(raw)
        next_state, reward, result = _transition(spec, state, action)
        agent.observe(action, reward)
        states.append(observed)
        actions.append(action)
        rewards.append(reward)
        state = next_state
        if result:
            outcome = result
            break
    states.append(state)
    name = getattr(policy, 'policy_id', type(policy).__name__)
    return Trajectory(
        states=np.array(states),
        actions=np.array(actions),
        rewards=np.array(rewards, dtype=np.float64),
        terminated=True,
        source=name,
        outcome=outcome,
    )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class OfflineDataset:
    """Immutable collection of trajectories from one environment."""

    env: EnvSpec
    trajectories: List[Trajectory]
    provenance: Dict = field(default_factory=dict)
    return_stats: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise UsageError("an offline dataset needs at least one trajectory")
        for traj in self.trajectories:
            validate_trajectory(traj, self.env)
        self.return_stats = return_stats(self.trajectories)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([t.length for t in self.trajectories])


def generate_dataset(spec: EnvSpec, mix: Sequence[Tuple[BehaviorPolicy, int]], seed: int) -> OfflineDataset:
    """
    Roll out each behavior policy ``count`` times.

    Episode seeds are derived from ``seed``, the mix position and the episode
    index, so adding a policy to the end of a mix leaves earlier episodes
    unchanged.
    """
    trajectories = []
    for position, (policy, count) in enumerate(mix):
        if count <= 0:
            raise UsageError(f"count for {policy.policy_id} must be positive, got {count}")
        for i in range(count):
            episode_seed = derive_seed(seed, position, i)
            trajectories.append(rollout(spec, policy, episode_seed))
    provenance = {
        'generator': 'behavior-mix',
        'seed': seed,
        'mix': [[p.policy_id, c] for p, c in mix],
    }
    dataset = OfflineDataset(spec, trajectories, provenance)
    logger.info(f"Generated {len(dataset)} trajectories on {spec.env_id}, returns {dataset.return_stats}")
    return dataset


def dataset_to_bytes(ds: OfflineDataset) -> bytes:
    manifest = {
        'env': ds.env.to_dict(),
        'provenance': ds.provenance,
        'count': len(ds),
        'return_stats': ds.return_stats,
    }
    payload = []
    for traj in ds.trajectories:
        payload.append(pack_string(traj.source))
        payload.append(pack_string(traj.outcome))
        payload.append(struct.pack('<BI', int(traj.terminated), traj.length))
        payload.append(pack_floats(traj.states))
        payload.append(pack_floats(traj.actions))
        payload.append(pack_floats(traj.rewards))
    body = b''.join(payload)
    header = DATASET_MAGIC + struct.pack('<I', DATASET_VERSION) + pack_string(json.dumps(manifest, sort_keys=True))
    return header + body + struct.pack('<I', zlib.crc32(body) & 0xFFFFFFFF)


def dataset_from_bytes(buffer: bytes, source: str = '<buffer>') -> OfflineDataset:
    reader = ByteReader(buffer, source)
    if reader.take(4) != DATASET_MAGIC:
        raise FormatError(f"{source}: not a trojanlab dataset")
    (version,) = reader.unpack('<I')
    if version != DATASET_VERSION:
        raise FormatError(f"{source}: unsupported dataset version {version}")
    try:
        manifest = json.loads(reader.string())
        env = EnvSpec.from_dict(manifest['env'])
        count = int(manifest['count'])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{source}: bad manifest record ({e})") from None
    body_start = reader.offset
    trajectories = []
    for _ in range(count):
        name = reader.string()
        outcome = reader.string()
        terminated, T = reader.unpack('<BI')
        states = reader.floats((T + 1) * env.state_dim).reshape(T + 1, env.state_dim)
        actions = reader.floats(T * env.action_dim).reshape(T, env.action_dim)
        rewards = reader.floats(T)
        trajectories.append(Trajectory(states, actions, rewards, bool(terminated), name, outcome))
    body = buffer[body_start:reader.offset]
    (crc,) = reader.unpack('<I')
    if crc != (zlib.crc32(body) & 0xFFFFFFFF):
        raise FormatError(f"{source}: dataset checksum mismatch")
    if not reader.at_end():
        raise FormatError(f"{source}: trailing bytes after checksum")
    try:
        dataset = OfflineDataset(env, trajectories, manifest.get('provenance', {}))
    except UsageError as e:
        raise FormatError(f"{source}: {e}") from None
    if dataset.return_stats != manifest.get('return_stats'):
        raise FormatError(f"{source}: stored return statistics do not match the trajectories")
    return dataset


def dataset_save(ds: OfflineDataset, path: str) -> None:
    with open(path, 'wb') as f:
        f.write(dataset_to_bytes(ds))
    logger.info(f"Saved dataset with {len(ds)} trajectories to {path}")


def dataset_load(path: str) -> OfflineDataset:
    with open(path, 'rb') as f:
        buffer = f.read()
    return dataset_from_bytes(buffer, source=path)


def dataset_export_text(ds: OfflineDataset, path: str) -> None:
    """Write one comma-separated line per step, for debugging."""
    header = (['trajectory', 't']
              + [f's{i}' for i in range(ds.env.state_dim)]
              + [f'a{i}' for i in range(ds.env.action_dim)]
              + ['reward'])
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for index, traj in enumerate(ds.trajectories):
            for t in range(traj.length):
                writer.writerow([index, t] + [repr(float(v)) for v in traj.states[t]]
                                + [repr(float(v)) for v in traj.actions[t]] + [repr(float(traj.rewards[t]))])
