"""
Backdoor Attacks on Trajectory Models
=====================================

Implants an action-level backdoor into a clean trajectory model: when the
most recent state carries the trigger, the model emits the target action.

The main attack fine-tunes the clean model on a handful of filtered
trajectories. Every sampled batch is duplicated; the copy gets a single
poisoned transition (trigger on the last state, label replaced by the
target action). Trigger values are learned with momentum sign-gradient steps
while the model is frozen, alternating with model updates while the trigger
is frozen; the second half of the budget updates the model only.

Also provided: the three single-component ablations, the composed baseline
without filtering and batch poisoning, and the dataset-poisoning baseline
that retrains on trajectories whose states, actions and rewards were all
rewritten.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from trojanlab import autodiff as ad
from trojanlab.autodiff import OptimState, Tape, Tensor
from trojanlab.envs import EnvSpec, OfflineDataset, Trajectory
from trojanlab.errors import AttackSetupError, FormatError, UsageError
from trojanlab.seqmodel import (
    Checkpoint,
    SegmentBatch,
    TrainConfig,
    TrajectoryModel,
    TrajectoryPool,
    clean_loss,
    clean_train,
    sample_segments,
    train_step,
    warmup_scale,
)

logger = logging.getLogger(__name__)

TRIGGER_MODES = ('replace', 'add')
TRIGGER_INITS = ('bound', 'midpoint', 'random', 'dataset', 'fixed')
TARGET_KINDS = ('zeros', 'ones', 'neg_ones', 'fixed_random', 'arithmetic', 'half_staggered')
VARIANTS = ('trojanto', 'no_tf', 'no_bp', 'no_at', 'imc')

# Canonical 'fixed_random' target, seed 0.
CANONICAL_RANDOM_TARGET = (
    0.497, 0.695, -0.711, -0.336, 0.141, -0.374, -0.450, 0.640,
    0.160, -0.370, 0.177, 0.681, -0.625, -0.435, 0.714, -0.392,
    0.944, -0.649, 0.266, -0.691, -0.167, 0.468, -0.390, 0.202,
)


def normalize_name(name: str) -> str:
    """``fixed-random`` and ``no-TF`` style names map to ``fixed_random`` and ``no_tf``."""
    return name.strip().lower().replace('-', '_')


# ---------------------------------------------------------------------------
# Triggers and targets
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TriggerSpec:
    """
    Trigger on a few state dimensions.

    In ``replace`` mode the selected dims are set to ``values``; in ``add``
    mode ``values`` are added and the result clipped to ``[low, high]``.
    """

    dims: Tuple[int, ...]
    values: np.ndarray
    low: np.ndarray
    high: np.ndarray
    mode: str = 'replace'

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.values = np.asarray(self.values, dtype=np.float64).copy()
        self.low = np.asarray(self.low, dtype=np.float64).copy()
        self.high = np.asarray(self.high, dtype=np.float64).copy()

    def validate(self, state_dim: int) -> None:
        n = len(self.dims)
        if n == 0:
            raise AttackSetupError("trigger needs at least one dimension")
        if len(set(self.dims)) != n:
            raise AttackSetupError(f"trigger dims must be distinct, got {self.dims}")
        if min(self.dims) < 0 or max(self.dims) >= state_dim:
            raise AttackSetupError(f"trigger dims {self.dims} out of range for state_dim {state_dim}")
        if self.values.shape != (n,) or self.low.shape != (n,) or self.high.shape != (n,):
            raise AttackSetupError("trigger values and bounds must have one entry per dim")
        if (self.low > self.high).any():
            raise AttackSetupError("trigger lower bound above upper bound")
        if (self.values < self.low).any() or (self.values > self.high).any():
            raise AttackSetupError(f"trigger values {self.values.tolist()} outside their bounds")
        if self.mode not in TRIGGER_MODES:
            raise AttackSetupError(f"unknown trigger mode {self.mode!r}")

    def with_values(self, values: np.ndarray) -> 'TriggerSpec':
        return TriggerSpec(self.dims, values, self.low, self.high, self.mode)

    def to_dict(self) -> Dict:
        return {
            'dims': list(self.dims),
            'values': self.values.tolist(),
            'low': self.low.tolist(),
            'high': self.high.tolist(),
            'mode': self.mode,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'TriggerSpec':
        return cls(tuple(data['dims']), data['values'], data['low'], data['high'], data.get('mode', 'replace'))


def init_trigger(spec: EnvSpec, dims: Sequence[int] = (0, 1, 2), strategy: str = 'bound',
                 seed: int = 0, mode: str = 'replace', values: Optional[Sequence[float]] = None,
                 dataset: Optional[OfflineDataset] = None, target: Optional[np.ndarray] = None,
                 low: Optional[Sequence[float]] = None, high: Optional[Sequence[float]] = None) -> TriggerSpec:
    """
    Build the starting trigger.

    Bounds default to the environment's state bounds on ``dims``; pass
    ``low``/``high`` to allow out-of-range triggers.

    Strategies:
        bound: upper bound on every dim
        midpoint: centre of the bounds
        random: uniform within the bounds
        dataset: state values at the dataset step whose action is closest to ``target``
        fixed: explicit ``values``
    """
    dims = tuple(int(d) for d in dims)
    if not dims or min(dims) < 0 or max(dims) >= spec.state_dim:
        raise AttackSetupError(f"trigger dims {dims} out of range for {spec.env_id} (state_dim {spec.state_dim})")
    lo = np.asarray(low if low is not None else [spec.state_low[d] for d in dims], dtype=np.float64)
    hi = np.asarray(high if high is not None else [spec.state_high[d] for d in dims], dtype=np.float64)
    strategy = normalize_name(strategy)
    if strategy == 'bound':
        init = hi.copy()
    elif strategy == 'midpoint':
        init = (lo + hi) / 2.0
    elif strategy == 'random':
        init = np.random.default_rng([seed, 17]).uniform(lo, hi)
    elif strategy == 'dataset':
        if dataset is None or target is None:
            raise AttackSetupError("the dataset trigger needs a dataset and a target action")
        init = np.clip(_closest_state(dataset, np.asarray(target, dtype=np.float64), dims), lo, hi)
    elif strategy == 'fixed':
        if values is None:
            raise AttackSetupError("the fixed trigger needs explicit values")
        init = np.asarray(values, dtype=np.float64)
    else:
        raise UsageError(f"unknown trigger init {strategy!r}; choose from {TRIGGER_INITS}")
    trigger = TriggerSpec(dims, init, lo, hi, mode)
    trigger.validate(spec.state_dim)
    return trigger


def _closest_state(ds: OfflineDataset, target: np.ndarray, dims: Tuple[int, ...]) -> np.ndarray:
    best, best_distance = None, math.inf
    for traj in ds.trajectories:
        distances = np.linalg.norm(traj.actions - target, axis=1)
        t = int(np.argmin(distances))
        if distances[t] < best_distance:
            best, best_distance = traj.states[t, list(dims)], float(distances[t])
    return np.asarray(best, dtype=np.float64)


def apply_trigger(state: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    """Triggered copy of ``state``; works on one state or any array whose last axis is the state."""
    out = np.array(state, dtype=np.float64, copy=True)
    dims = list(trig.dims)
    if out.shape[-1] <= max(dims):
        raise AttackSetupError(f"state of dim {out.shape[-1]} is too small for trigger dims {trig.dims}")
    if trig.mode == 'replace':
        out[..., dims] = trig.values
    else:
        out[..., dims] = np.clip(out[..., dims] + trig.values, trig.low, trig.high)
    return out


@dataclass(frozen=True)
class TargetActionSpec:
    kind: str
    dim: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'kind', normalize_name(self.kind))
        if self.kind not in TARGET_KINDS:
            raise UsageError(f"unknown target kind {self.kind!r}; choose from {TARGET_KINDS}")
        if self.dim < 1:
            raise UsageError(f"target dim must be positive, got {self.dim}")


def make_target_action(spec: TargetActionSpec) -> np.ndarray:
    """Target action vector, every component clamped to ``[-1, 1]``."""
    n = spec.dim
    index = np.arange(n)
    if spec.kind == 'zeros':
        values = np.zeros(n)
    elif spec.kind == 'ones':
        values = np.ones(n)
    elif spec.kind == 'neg_ones':
        values = -np.ones(n)
    elif spec.kind == 'arithmetic':
        values = 0.1 * index
    elif spec.kind == 'half_staggered':
        values = np.where(index % 2 == 0, 0.5, -0.5)
    else:
        rng = np.random.default_rng(spec.seed)
        values = rng.uniform(-1.0, 1.0, size=n)
        if spec.seed == 0:
            k = min(n, len(CANONICAL_RANDOM_TARGET))
            values[:k] = CANONICAL_RANDOM_TARGET[:k]
    return np.clip(values.astype(np.float64), -1.0, 1.0)


def save_trigger_record(path: str, trigger: TriggerSpec, target: np.ndarray,
                        target_kind: str = '', extra: Optional[Dict] = None) -> None:
    record = {'trigger': trigger.to_dict(), 'target': np.asarray(target).tolist(), 'target_kind': target_kind}
    record.update(extra or {})
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(record, f, indent=2, sort_keys=True)
    logger.info(f"Wrote trigger record to {path}")


def load_trigger_record(path: str) -> Tuple[TriggerSpec, np.ndarray, Dict]:
    with open(path, 'r', encoding='utf-8') as f:
        try:
            record = json.load(f)
            trigger = TriggerSpec.from_dict(record['trigger'])
            target = np.asarray(record['target'], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(f"{path}: bad trigger record ({e})") from None
    return trigger, target, record


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class AttackConfig:
    """Budget, schedule and optimizer settings of one attack run."""

    budget_trajectories: int = 10
    filter_min_length: int = 20
    lambda_clean: float = 0.5
    outer_M: int = 10
    trigger_steps_N1: int = 10
    model_steps_N2: int = 200
    mi_momentum: float = 0.9
    mi_step: float = 1e-3
    poisons_per_batch: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.25
    warmup_steps: int = 0
    trigger_dims: Tuple[int, ...] = (0, 1, 2)
    trigger_mode: str = 'replace'
    trigger_init: str = 'bound'
    reward_override: Optional[float] = None
    poison_rate: float = 0.1
    reward_value: float = 4.0
    eval_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.outer_M < 2 or self.outer_M % 2:
            raise UsageError(f"outer_M must be a positive even number, got {self.outer_M}")
        for name in ('budget_trajectories', 'trigger_steps_N1', 'model_steps_N2', 'poisons_per_batch', 'batch_size'):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.lambda_clean <= 1.0:
            raise UsageError(f"lambda_clean must lie in [0, 1], got {self.lambda_clean}")
        if self.mi_momentum < 0.0 or self.mi_step <= 0.0:
            raise UsageError("mi_momentum must be non-negative and mi_step positive")
        if not 0.0 < self.poison_rate <= 1.0:
            raise UsageError(f"poison_rate must lie in (0, 1], got {self.poison_rate}")

    @property
    def total_model_steps(self) -> int:
        return self.outer_M * self.model_steps_N2

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['trigger_dims'] = list(self.trigger_dims)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'AttackConfig':
        data = dict(data)
        if 'trigger_dims' in data:
            data['trigger_dims'] = tuple(int(d) for d in data['trigger_dims'])
        return cls(**data)

    def optimizer(self) -> OptimState:
        return OptimState(learning_rate=self.learning_rate, weight_decay=self.weight_decay)


@dataclass
class PoisonRecord:
    """Which transitions of one duplicated batch were poisoned."""

    batch_id: int
    sites: List[Tuple[int, int]]
    trigger: List[float]
    target: List[float]
    original_states: np.ndarray = field(repr=False, default=None)
    sources: List[Tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'batch_id': self.batch_id,
            'sites': [list(s) for s in self.sites],
            'trigger': list(self.trigger),
            'target': list(self.target),
            'sources': [list(s) for s in self.sources],
        }


# ---------------------------------------------------------------------------
# Filtering and poisoning
# ---------------------------------------------------------------------------

def filter_trajectories(ds: OfflineDataset, min_length: int, budget: int) -> TrajectoryPool:
    """
    Keep trajectories of at least ``min_length`` steps, then the ``budget`` longest.

    Ties are broken by higher return, then lower dataset index.

    Raises:
        AttackSetupError: If no trajectory is long enough
    """
    if budget < 1:
        raise UsageError(f"budget must be at least 1, got {budget}")
    eligible = [i for i, t in enumerate(ds.trajectories) if t.length >= min_length]
    if not eligible:
        raise AttackSetupError(
            f"no trajectory reaches the length threshold {min_length} (longest is {int(ds.lengths.max())})")
    ranked = sorted(eligible, key=lambda i: (-ds.trajectories[i].length, -ds.trajectories[i].episode_return, i))
    chosen = sorted(ranked[:budget])
    logger.info(f"Filtered {len(chosen)} of {len(ds)} trajectories (min length {min_length}, budget {budget})")
    return TrajectoryPool([ds.trajectories[i] for i in chosen], chosen)


def uniform_budget(ds: OfflineDataset, budget: int, rng: np.random.Generator) -> TrajectoryPool:
    """``budget`` trajectories drawn uniformly without replacement."""
    count = min(budget, len(ds))
    chosen = sorted(int(i) for i in rng.choice(len(ds), size=count, replace=False))
    return TrajectoryPool([ds.trajectories[i] for i in chosen], chosen)


def poison_batch(batch: SegmentBatch, trig: TriggerSpec, target: np.ndarray, rng: np.random.Generator,
                 batch_id: int = 0, poisons: int = 1) -> Tuple[SegmentBatch, SegmentBatch, PoisonRecord]:
    """
    Duplicate ``batch`` and poison the last position of ``poisons`` random rows of the copy.

    Returns-to-go and rewards of the poisoned copy are left untouched.
    """
    B, K = batch.pad_mask.shape
    if poisons > B:
        raise UsageError(f"cannot poison {poisons} rows of a batch of {B}")
    clean = batch.copy()
    poisoned = batch.copy()
    rows = sorted(int(r) for r in rng.choice(B, size=poisons, replace=False))
    sites = [(row, K - 1) for row in rows]
    return clean, poisoned, _poison_sites(poisoned, sites, trig, target, batch_id)


def poison_all_positions(batch: SegmentBatch, trig: TriggerSpec, target: np.ndarray,
                         batch_id: int = 0) -> Tuple[SegmentBatch, SegmentBatch, PoisonRecord]:
    """Poison every valid position of every row of the copy."""
    clean = batch.copy()
    poisoned = batch.copy()
    rows, positions = np.nonzero(batch.pad_mask)
    sites = [(int(r), int(p)) for r, p in zip(rows, positions)]
    return clean, poisoned, _poison_sites(poisoned, sites, trig, target, batch_id)


def _poison_sites(poisoned: SegmentBatch, sites: List[Tuple[int, int]], trig: TriggerSpec,
                  target: np.ndarray, batch_id: int) -> PoisonRecord:
    dims = list(trig.dims)
    original = np.array([poisoned.states[r, p, dims] for r, p in sites])
    for row, pos in sites:
        poisoned.states[row, pos] = apply_trigger(poisoned.states[row, pos], trig)
        poisoned.actions[row, pos] = target
    sources = [poisoned.source_index[r] for r, _ in sites] if poisoned.source_index else []
    return PoisonRecord(batch_id, sites, trig.values.tolist(), np.asarray(target).tolist(), original, sources)


def apply_reward_override(poisoned: SegmentBatch, record: PoisonRecord, override: float) -> None:
    """
    Rewrite the reward of each poisoned transition and shift the return-to-go from it onwards.

    Entries whose reward already equals ``override`` are left bit-identical.
    """
    for row, pos in record.sites:
        original = poisoned.rewards[row, pos]
        if original == override:
            continue
        poisoned.rewards[row, pos] = override
        poisoned.rtg[row, pos:, 0] += original - override


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _triggered_state_tensor(poisoned: SegmentBatch, record: PoisonRecord, trig: TriggerSpec,
                            delta: Tensor) -> Tensor:
    _, L, S = poisoned.states.shape
    n_dims = len(trig.dims)
    flat = [((row * L) + pos) * S + d for row, pos in record.sites for d in trig.dims]
    tiled = ad.index_select(delta, 0, np.tile(np.arange(n_dims), len(record.sites)))
    if trig.mode == 'add':
        base = Tensor(np.asarray(record.original_states, dtype=np.float64).reshape(-1))
        low = np.tile(trig.low, len(record.sites))
        high = np.tile(trig.high, len(record.sites))
        tiled = ad.clip(base + tiled, low, high)
    return ad.overwrite(Tensor(poisoned.states), flat, tiled)


def backdoor_loss(model: TrajectoryModel, poisoned: SegmentBatch, record: PoisonRecord,
                  trig: Optional[TriggerSpec] = None, delta: Optional[Tensor] = None,
                  training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Squared error between the predictions at the poisoned sites and the target action.

    Averaged over sites and action dims; no other position contributes. When
    ``delta`` is given the trigger entries of the poisoned sites are rebuilt
    from it so the loss is differentiable with respect to the trigger.
    """
    if not record.sites:
        raise UsageError("poison record has no sites")
    states = None
    if delta is not None:
        if trig is None:
            raise UsageError("a differentiable trigger needs its TriggerSpec")
        states = _triggered_state_tensor(poisoned, record, trig, delta)
    predicted = model.forward(poisoned, training=training, rng=rng, states=states)
    B, L, A = predicted.shape
    flat_rows = [row * L + pos for row, pos in record.sites]
    chosen = ad.index_select(ad.reshape(predicted, (B * L, A)), 0, flat_rows)
    target = np.broadcast_to(np.asarray(record.target, dtype=np.float64), chosen.shape).copy()
    return ad.mean(ad.square(chosen - target))


def combined_loss(backdoor, clean, lam: float):
    """``lam * backdoor + (1 - lam) * clean``; works on tensors and floats."""
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"lambda must lie in [0, 1], got {lam}")
    return backdoor * lam + clean * (1.0 - lam)


# ---------------------------------------------------------------------------
# Trigger learning
# ---------------------------------------------------------------------------

def mifgsm_update(values: np.ndarray, grad: np.ndarray, g_prev: np.ndarray, mu: float, alpha: float,
                  low: np.ndarray, high: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    One momentum sign step that decreases the loss.

    The gradient is L1-normalized before entering the momentum; a zero
    gradient contributes nothing and a zero momentum leaves the values as
    they are. The result is clipped to ``[low, high]``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    l1 = float(np.abs(grad).sum())
    normalized = grad / l1 if l1 > 0.0 else np.zeros_like(grad)
    g = mu * np.asarray(g_prev, dtype=np.float64) + normalized
    updated = np.clip(np.asarray(values, dtype=np.float64) - alpha * np.sign(g), low, high)
    return updated, g


def trigger_gradient(model: TrajectoryModel, poisoned: SegmentBatch, record: PoisonRecord,
                     trig: TriggerSpec) -> Tuple[float, np.ndarray]:
    """Backdoor loss and its gradient with respect to the trigger values, model frozen."""
    delta = Tensor(trig.values, requires_grad=True)
    with model.frozen():
        with Tape():
            loss = backdoor_loss(model, poisoned, record, trig=trig, delta=delta)
        ad.backward(loss)
    grad = delta.grad if delta.grad is not None else np.zeros_like(trig.values)
    return loss.item(), grad


def trigger_learning_step(model: TrajectoryModel, trig: TriggerSpec, target: np.ndarray, pool: TrajectoryPool,
                          g_prev: np.ndarray, cfg: AttackConfig, rng: np.random.Generator,
                          all_positions: bool = False) -> Tuple[TriggerSpec, np.ndarray, float]:
    """Sample a batch, poison it with the current trigger and take one momentum step on the trigger."""
    batch = sample_segments(pool, cfg.batch_size, rng, model.config.context_K)
    if all_positions:
        _, poisoned, record = poison_all_positions(batch, trig, target)
    else:
        _, poisoned, record = poison_batch(batch, trig, target, rng,
                                           poisons=cfg.poisons_per_batch)
    loss, grad = trigger_gradient(model, poisoned, record, trig)
    values, g = mifgsm_update(trig.values, grad, g_prev, cfg.mi_momentum, cfg.mi_step, trig.low, trig.high)
    return trig.with_values(values), g, loss


def parameter_update_step(model: TrajectoryModel, trig: TriggerSpec, target: np.ndarray, pool: TrajectoryPool,
                          cfg: AttackConfig, optim: OptimState, batch_rng: np.random.Generator,
                          poison_rng: np.random.Generator, dropout_rng: Optional[np.random.Generator] = None,
                          model_step: int = 0, batch_poisoning: bool = True) -> Tuple[float, PoisonRecord]:
    """
    One optimizer step on the combined loss of a fresh clean/poisoned batch pair.

    The trigger is read but never changed.

    Returns:
        Loss value and the PoisonRecord of the batch
    """
    batch = sample_segments(pool, cfg.batch_size, batch_rng, model.config.context_K)
    if batch_poisoning:
        clean_batch, poisoned, record = poison_batch(batch, trig, target, poison_rng,
                                                     batch_id=model_step, poisons=cfg.poisons_per_batch)
    else:
        clean_batch, poisoned, record = poison_all_positions(batch, trig, target, batch_id=model_step)
    if cfg.reward_override is not None:
        apply_reward_override(poisoned, record, cfg.reward_override)
    training = dropout_rng is not None
    loss, _ = train_step(
        model,
        lambda: combined_loss(
            backdoor_loss(model, poisoned, record, training=training, rng=dropout_rng),
            clean_loss(model, clean_batch, training=training, rng=dropout_rng),
            cfg.lambda_clean),
        optim,
        cfg.grad_clip,
        warmup_scale(model_step, cfg.warmup_steps),
        model_step + 1,
    )
    return loss, record


# ---------------------------------------------------------------------------
# Schedules and runs
# ---------------------------------------------------------------------------

def build_schedule(M: int, N1: int, N2: int, alternating: bool = True) -> List[Tuple[str, int]]:
    """
    Phases as ``(kind, count)`` pairs.

    Alternating: ``M/2`` rounds of ``N1`` trigger steps then ``N2`` model
    steps, followed by ``M/2 * N2`` model-only steps. Otherwise all
    ``M/2 * N1`` trigger steps come first, then ``M * N2`` model steps.
    """
    half = M // 2
    if alternating:
        schedule = [phase for _ in range(half) for phase in (('trigger', N1), ('model', N2))]
        schedule.append(('model', half * N2))
        return schedule
    return [('trigger', half * N1), ('model', M * N2)]


@dataclass(eq=False)
class AttackResult:
    """Everything an attack run produces."""

    checkpoint: Checkpoint
    trigger: TriggerSpec
    target: np.ndarray
    variant: str
    records: List[PoisonRecord] = field(default_factory=list)
    log: List[Dict] = field(default_factory=list)
    snapshots: List[Dict] = field(default_factory=list)
    pool_indices: List[int] = field(default_factory=list)


SnapshotFn = Callable[[TrajectoryModel, TriggerSpec], Dict]


def check_compatible(clean: Checkpoint, ds: OfflineDataset, trig: TriggerSpec) -> None:
    cfg = clean.config
    env = ds.env
    if (cfg.state_dim, cfg.action_dim) != (env.state_dim, env.action_dim):
        raise AttackSetupError(
            f"checkpoint dims ({cfg.state_dim}, {cfg.action_dim}) do not match dataset env {env.env_id} "
            f"({env.state_dim}, {env.action_dim})")
    trig.validate(env.state_dim)


def trojanto_run(clean: Checkpoint, ds: OfflineDataset, cfg: AttackConfig, trigger: TriggerSpec,
                 target: np.ndarray, variant: str = 'trojanto',
                 snapshot_fn: Optional[SnapshotFn] = None) -> AttackResult:
    """
    Fine-tune a copy of the clean model into a backdoored one.

    Args:
        clean: Clean checkpoint; never modified
        ds: Offline dataset the clean model was trained on
        cfg: Budget, schedule and optimizer settings
        trigger: Starting trigger
        target: Target action vector
        variant: ``trojanto`` or one of the ablations ``no_tf``, ``no_bp``,
            ``no_at`` and the composed ``imc``
        snapshot_fn: Called every ``cfg.eval_every`` model steps; its dict
            is stored in ``snapshots``

    Returns:
        AttackResult with one PoisonRecord per model step
    """
    variant = normalize_name(variant)
    if variant not in VARIANTS:
        raise UsageError(f"unknown attack variant {variant!r}; choose from {VARIANTS}")
    cfg.validate()
    check_compatible(clean, ds, trigger)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (ds.env.action_dim,):
        raise AttackSetupError(f"target action has shape {target.shape}, expected ({ds.env.action_dim},)")

    filtering = variant not in ('no_tf', 'imc')
    batch_poisoning = variant not in ('no_bp', 'imc')
    alternating = variant != 'no_at'
    if filtering:
        pool = filter_trajectories(ds, cfg.filter_min_length, cfg.budget_trajectories)
    else:
        pool = uniform_budget(ds, cfg.budget_trajectories, np.random.default_rng([cfg.seed, 14]))

    model = clean.model()
    optim = cfg.optimizer()
    batch_rng = np.random.default_rng([cfg.seed, 11])
    dropout_rng = np.random.default_rng([cfg.seed, 12])
    poison_rng = np.random.default_rng([cfg.seed, 13])
    g = np.zeros(len(trigger.dims))
    result = AttackResult(Checkpoint.from_model(model), trigger, target, variant, pool_indices=list(pool.indices))

    trigger_step = 0
    model_step = 0
    loss_history: List[float] = []
    schedule = build_schedule(cfg.outer_M, cfg.trigger_steps_N1, cfg.model_steps_N2, alternating)
    logger.info(f"Attack {variant}: schedule {schedule} on {len(pool)} trajectories")
    for kind, count in schedule:
        logger.info(f"Phase {kind} x{count} (trigger {np.round(trigger.values, 4).tolist()})")
        for _ in range(count):
            if kind == 'trigger':
                trigger, g, loss = trigger_learning_step(model, trigger, target, pool, g, cfg, poison_rng,
                                                         all_positions=not batch_poisoning)
                trigger_step += 1
                result.log.append({'phase': 'trigger', 'step': trigger_step, 'loss': loss,
                                   'trigger': trigger.values.tolist()})
                logger.debug(f"trigger step {trigger_step} loss {loss:.6f}")
                continue
            loss, record = parameter_update_step(model, trigger, target, pool, cfg, optim, batch_rng, poison_rng,
                                                 dropout_rng, model_step, batch_poisoning)
            model_step += 1
            loss_history.append(loss)
            result.records.append(record)
            result.log.append({'phase': 'model', 'step': model_step, 'loss': loss,
                               'trigger': trigger.values.tolist()})
            if cfg.eval_every and snapshot_fn is not None and model_step % cfg.eval_every == 0:
                snapshot = {'model_step': model_step}
                snapshot.update(snapshot_fn(model, trigger))
                result.snapshots.append(snapshot)
                logger.info(f"Snapshot at model step {model_step}: {snapshot}")

    meta = {
        'kind': variant,
        'seed': cfg.seed,
        'attack': cfg.to_dict(),
        'trigger': trigger.to_dict(),
        'target': target.tolist(),
        'trigger_steps': trigger_step,
        'model_steps': model_step,
        'loss_history': loss_history,
    }
    result.checkpoint = Checkpoint.from_model(model, meta)
    result.trigger = trigger
    logger.info(f"Attack {variant} finished: {trigger_step} trigger steps, {model_step} model steps")
    return result


def ablation_variant(kind: str, clean: Checkpoint, ds: OfflineDataset, cfg: AttackConfig,
                     trigger: TriggerSpec, target: np.ndarray,
                     snapshot_fn: Optional[SnapshotFn] = None) -> AttackResult:
    """Run the attack with one component removed (``no_tf``, ``no_bp``, ``no_at``) or ``imc``."""
    kind = normalize_name(kind)
    if kind not in ('no_tf', 'no_bp', 'no_at', 'imc'):
        raise UsageError(f"unknown ablation {kind!r}")
    return trojanto_run(clean, ds, cfg, trigger, target, variant=kind, snapshot_fn=snapshot_fn)


def reward_manipulation_mode(clean: Checkpoint, ds: OfflineDataset, cfg: AttackConfig, trigger: TriggerSpec,
                             target: np.ndarray, reward_override: float, snapshot_fn: SnapshotFn,
                             variant: str = 'trojanto') -> AttackResult:
    """Attack with the poisoned transitions' rewards rewritten, recording periodic snapshots."""
    if cfg.eval_every < 1:
        raise UsageError("reward manipulation runs need eval_every >= 1 to produce curves")
    run_cfg = AttackConfig.from_dict(cfg.to_dict())
    run_cfg.reward_override = float(reward_override)
    return trojanto_run(clean, ds, run_cfg, trigger, target, variant=variant, snapshot_fn=snapshot_fn)


# ---------------------------------------------------------------------------
# Dataset poisoning baseline
# ---------------------------------------------------------------------------

def baffle_poison_dataset(ds: OfflineDataset, rate: float, trig: TriggerSpec, target: np.ndarray,
                          reward_value: float = 4.0, seed: int = 0) -> Tuple[OfflineDataset, List[int]]:
    """
    Rewrite ``ceil(rate * N)`` random trajectories entirely.

    Every state is triggered, every action replaced by ``target`` and every
    reward by ``reward_value``; the other trajectories are shared unchanged.

    Returns:
        Poisoned dataset and the sorted indices of rewritten trajectories
    """
    if not 0.0 < rate <= 1.0:
        raise UsageError(f"poison rate must lie in (0, 1], got {rate}")
    n = len(ds)
    count = min(n, math.ceil(round(rate * n, 9)))
    chosen = sorted(int(i) for i in np.random.default_rng([seed, 15]).choice(n, size=count, replace=False))
    target = np.asarray(target, dtype=np.float64)
    chosen_set = set(chosen)
    trajectories = []
    for i, traj in enumerate(ds.trajectories):
        if i not in chosen_set:
            trajectories.append(traj)
            continue
        trajectories.append(Trajectory(
            states=apply_trigger(traj.states, trig),
            actions=np.tile(target, (traj.length, 1)),
            rewards=np.full(traj.length, float(reward_value)),
            terminated=traj.terminated,
            source=traj.source,
            outcome=traj.outcome,
        ))
    provenance = dict(ds.provenance)
    provenance['baffle'] = {'rate': rate, 'reward_value': reward_value, 'seed': seed, 'poisoned': chosen}
    logger.info(f"Poisoned {count} of {n} trajectories (rate {rate})")
    return OfflineDataset(ds.env, trajectories, provenance), chosen


def baffle_run(clean: Checkpoint, ds: OfflineDataset, cfg: AttackConfig, trigger: TriggerSpec,
               target: np.ndarray, snapshot_fn: Optional[SnapshotFn] = None) -> AttackResult:
    """Fine-tune the clean model on a poisoned dataset for ``outer_M * model_steps_N2`` steps."""
    cfg.validate()
    check_compatible(clean, ds, trigger)
    poisoned, chosen = baffle_poison_dataset(ds, cfg.poison_rate, trigger, target, cfg.reward_value, cfg.seed)
    model = clean.model()
    train_cfg = TrainConfig(
        steps=cfg.total_model_steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        grad_clip=cfg.grad_clip,
        warmup_steps=cfg.warmup_steps,
        seed=cfg.seed,
    )
    result = AttackResult(Checkpoint.from_model(model), trigger, np.asarray(target, dtype=np.float64), 'baffle',
                          pool_indices=chosen)

    def on_step(step: int, current: TrajectoryModel) -> None:
        if cfg.eval_every and snapshot_fn is not None and step % cfg.eval_every == 0:
            snapshot = {'model_step': step}
            snapshot.update(snapshot_fn(current, trigger))
            result.snapshots.append(snapshot)

    checkpoint = clean_train(model, poisoned, train_cfg, on_step=on_step)
    history = checkpoint.training_meta['loss_history']
    result.log = [{'phase': 'model', 'step': i + 1, 'loss': loss, 'trigger': trigger.values.tolist()}
                  for i, loss in enumerate(history)]
    checkpoint.training_meta.update({
        'kind': 'baffle',
        'attack': cfg.to_dict(),
        'trigger': trigger.to_dict(),
        'target': result.target.tolist(),
        'poisoned_trajectories': chosen,
    })
    result.checkpoint = checkpoint
    return result


def run_attack(name: str, clean: Checkpoint, ds: OfflineDataset, cfg: AttackConfig, trigger: TriggerSpec,
               target: np.ndarray, snapshot_fn: Optional[SnapshotFn] = None) -> AttackResult:
    """Dispatch by attack name: ``trojanto``, ``baffle``, ``imc``, ``no_tf``, ``no_bp`` or ``no_at``."""
    name = normalize_name(name)
    if name == 'baffle':
        return baffle_run(clean, ds, cfg, trigger, target, snapshot_fn)
    if name == 'trojanto':
        return trojanto_run(clean, ds, cfg, trigger, target, snapshot_fn=snapshot_fn)
    return ablation_variant(name, clean, ds, cfg, trigger, target, snapshot_fn)


def write_poison_log(records: Sequence[PoisonRecord], path: str) -> None:
    """One JSON object per line, one line per poisoned batch."""
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + '\n')
