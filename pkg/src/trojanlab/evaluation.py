"""
Backdoor Evaluation
===================

Attack success rate, benign task performance and their harmonic mean,
plus the persistence and trigger-noise studies and gradient saliency
over the state inputs.

Every metric is computed from per-episode records that are returned to the
caller, so any number can be recounted from the raw log.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from trojanlab import autodiff as ad
from trojanlab.attack import TriggerSpec, apply_trigger
from trojanlab.autodiff import Tape, Tensor
from trojanlab.envs import EnvSpec, Policy, TriggerPlan, derive_seed, rollout
from trojanlab.errors import UsageError
from trojanlab.seqmodel import ModelPolicy, SegmentBatch, TrajectoryModel

logger = logging.getLogger(__name__)

Evaluable = Union[TrajectoryModel, Policy]


@dataclass
class EvalConfig:
    """
    Evaluation protocol.

    ``r0_eval`` is the return the models are conditioned on; the CLI fills
    it with the dataset's best return. The trigger step is drawn from
    ``[trigger_window_start, trigger_window_end * horizon]`` where the start
    defaults to the model's context length.
    """

    n_episodes: int = 100
    asr_epsilon: float = 0.3
    r0_eval: Optional[float] = None
    trigger_window_start: Optional[int] = None
    trigger_window_end: float = 0.75
    return_floor_fraction: float = 0.05
    seeds: Tuple[int, ...] = (0,)

    def validate(self) -> None:
        if self.n_episodes < 1:
            raise UsageError(f"n_episodes must be at least 1, got {self.n_episodes}")
        if self.asr_epsilon <= 0:
            raise UsageError(f"asr_epsilon must be positive, got {self.asr_epsilon}")
        if not 0.0 < self.trigger_window_end <= 1.0:
            raise UsageError(f"trigger_window_end must lie in (0, 1], got {self.trigger_window_end}")
        if self.return_floor_fraction <= 0:
            raise UsageError("return_floor_fraction must be positive")
        if not self.seeds:
            raise UsageError("at least one evaluation seed is required")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['seeds'] = list(self.seeds)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'EvalConfig':
        data = dict(data)
        if 'seeds' in data:
            data['seeds'] = tuple(int(s) for s in data['seeds'])
        return cls(**data)


def as_policy(subject: Evaluable, cfg: EvalConfig) -> Policy:
    if isinstance(subject, Policy):
        return subject
    if cfg.r0_eval is None:
        raise UsageError("evaluating a model needs r0_eval")
    return ModelPolicy(subject, float(cfg.r0_eval))


def context_length(subject: Evaluable) -> Optional[int]:
    if isinstance(subject, TrajectoryModel):
        return subject.config.context_K
    if isinstance(subject, ModelPolicy):
        return subject.model.config.context_K
    return getattr(subject, 'context_K', None)


# ---------------------------------------------------------------------------
# Triggered episodes
# ---------------------------------------------------------------------------

@dataclass
class AttackEpisode:
    """Raw record of one triggered evaluation episode."""

    episode: int
    seed: int
    trigger_step: int
    hold: int
    actions: List[List[float]]
    success: bool
    redrawn: bool
    length: int
    episode_return: float
    trigger_values: List[float] = field(default_factory=list)
    triggered_steps: List[int] = field(default_factory=list)


def actions_match(actions: np.ndarray, target: np.ndarray, epsilon: float) -> bool:
    """True when every component of every action is within ``epsilon`` of ``target``."""
    actions = np.asarray(actions, dtype=np.float64)
    return bool(actions.size) and bool((np.abs(actions - target) <= epsilon).all())


def trigger_window(subject: Evaluable, spec: EnvSpec, cfg: EvalConfig) -> Tuple[int, int]:
    high = min(spec.horizon - 1, int(math.floor(cfg.trigger_window_end * spec.horizon)))
    low = cfg.trigger_window_start
    if low is None:
        low = context_length(subject) or 0
    return min(low, high), high


def _triggered_episode(policy: Policy, trig: TriggerSpec, target: np.ndarray, spec: EnvSpec,
                       cfg: EvalConfig, episode: int, seed: int, window: Tuple[int, int],
                       hold: int = 0, noise_level: float = 0.0) -> AttackEpisode:
    episode_seed = derive_seed(seed, episode)
    step = int(np.random.default_rng([episode_seed, 31]).integers(window[0], window[1] + 1))
    trigger = trig
    if noise_level > 0.0:
        eta = np.random.default_rng([episode_seed, 53]).uniform(-noise_level, noise_level, size=len(trig.dims))
        trigger = trig.with_values(trig.values * (1.0 + eta))

    def transform(state):
        return apply_trigger(state, trigger)

    traj = rollout(spec, policy, episode_seed, TriggerPlan(frozenset({step}), transform))
    redrawn = False
    if traj.length <= step + hold:
        latest = traj.length - 1 - hold
        if latest < 0:
            logger.warning(f"episode {episode} (seed {seed}) lasted {traj.length} steps, "
                           f"too short for a trigger held {hold} steps; counted as a failure")
            return AttackEpisode(episode, seed, step, hold, [], False, True, traj.length,
                                 traj.episode_return, trigger.values.tolist(), [step])
        earliest = min(window[0], latest)
        new_step = int(np.random.default_rng([episode_seed, 37]).integers(earliest, latest + 1))
        logger.warning(f"episode {episode} (seed {seed}) ended after {traj.length} steps before trigger "
                       f"step {step}; redrawn at step {new_step}")
        step = new_step
        redrawn = True
        traj = rollout(spec, policy, episode_seed, TriggerPlan(frozenset({step}), transform))

    held = traj.actions[step:step + hold + 1]
    success = len(held) == hold + 1 and actions_match(held, target, cfg.asr_epsilon)
    return AttackEpisode(episode, seed, step, hold, held.tolist(), success, redrawn, traj.length,
                         traj.episode_return, trigger.values.tolist(), [step])


def triggered_episodes(subject: Evaluable, trig: TriggerSpec, target: np.ndarray, spec: EnvSpec,
                       cfg: EvalConfig, seed: int, hold: int = 0,
                       noise_level: float = 0.0) -> List[AttackEpisode]:
    cfg.validate()
    policy = as_policy(subject, cfg)
    target = np.asarray(target, dtype=np.float64)
    window = trigger_window(subject, spec, cfg)
    return [_triggered_episode(policy, trig, target, spec, cfg, k, seed, window, hold, noise_level)
            for k in range(cfg.n_episodes)]


def success_rate(episodes: Sequence[AttackEpisode]) -> float:
    return sum(1 for e in episodes if e.success) / len(episodes)


def eval_asr(subject: Evaluable, trig: TriggerSpec, target: np.ndarray, spec: EnvSpec, cfg: EvalConfig,
             seed: int = 0) -> Tuple[float, List[AttackEpisode]]:
    """
    Fraction of episodes whose action at the single triggered step matches the target.

    Returns:
        ASR and the per-episode records it was counted from
    """
    episodes = triggered_episodes(subject, trig, target, spec, cfg, seed)
    asr = success_rate(episodes)
    logger.info(f"ASR {asr:.3f} over {len(episodes)} episodes (seed {seed})")
    return asr, episodes


# ---------------------------------------------------------------------------
# Benign performance
# ---------------------------------------------------------------------------

@dataclass
class BtpOutcome:
    value: float
    backdoored_returns: List[float]
    clean_returns: List[float]
    ratios: List[float]
    floor: float
    floored: List[int] = field(default_factory=list)


def btp_from_returns(backdoored: Sequence[float], clean: Sequence[float],
                     floor_fraction: float) -> BtpOutcome:
    """
    Mean per-episode return ratio.

    Where the clean return is not positive the ratio is undefined; that
    episode scores ``1 + (backdoored - clean) / floor`` instead, so matching
    the clean return still counts as 1 and the floor only scales the gap.
    """
    if len(backdoored) != len(clean) or not clean:
        raise UsageError("paired return lists must be non-empty and of equal length")
    floor = floor_fraction * float(np.mean(np.abs(clean)))
    if floor <= 0.0:
        floor = floor_fraction
    ratios, floored = [], []
    for k, (gb, gc) in enumerate(zip(backdoored, clean)):
        if gc > 0.0:
            ratios.append(gb / gc)
        else:
            floored.append(k)
            ratios.append(1.0 + (gb - gc) / floor)
            logger.warning(f"episode {k}: clean return {gc:.4f} is not positive; ratio uses floor {floor:.4f}")
    return BtpOutcome(float(np.mean(ratios)), list(backdoored), list(clean), ratios, floor, floored)


def eval_btp(backdoored: Evaluable, clean: Evaluable, spec: EnvSpec, cfg: EvalConfig,
             seed: int = 0) -> BtpOutcome:
    """Backdoored return over clean return on paired, trigger-free episodes."""
    cfg.validate()
    pb, pc = as_policy(backdoored, cfg), as_policy(clean, cfg)
    gb, gc = [], []
    for k in range(cfg.n_episodes):
        episode_seed = derive_seed(seed, k)
        gb.append(rollout(spec, pb, episode_seed).episode_return)
        gc.append(rollout(spec, pc, episode_seed).episode_return)
    outcome = btp_from_returns(gb, gc, cfg.return_floor_fraction)
    logger.info(f"BTP {outcome.value:.3f} over {cfg.n_episodes} episodes (seed {seed}, "
                f"{len(outcome.floored)} floored)")
    return outcome


def compute_cp(asr: float, btp: float) -> float:
    """Harmonic mean of ASR and BTP; 0 when both are 0."""
    if asr < 0 or btp < 0:
        raise UsageError(f"ASR and BTP must be non-negative, got {asr} and {btp}")
    if asr + btp <= 0:
        return 0.0
    return 2.0 * asr * btp / (asr + btp)


def run_cp(asr: float, btp: float) -> float:
    """CP of one run; a negative BTP counts as no benign performance."""
    if btp < 0.0:
        logger.warning(f"BTP {btp:.4f} is negative; CP uses 0")
    return compute_cp(asr, max(btp, 0.0))


def aggregate_cp(pairs: Sequence[Tuple[float, float]]) -> float:
    """Mean of per-run CP values, never the CP of mean ASR and BTP."""
    if not pairs:
        raise UsageError("no runs to aggregate")
    return float(np.mean([run_cp(a, b) for a, b in pairs]))


# ---------------------------------------------------------------------------
# Persistence and perturbation
# ---------------------------------------------------------------------------

def eval_persistent(subject: Evaluable, trig: TriggerSpec, target: np.ndarray, spec: EnvSpec,
                    cfg: EvalConfig, k_list: Sequence[int], btp: float, seed: int = 0) -> List[Dict]:
    """
    CP when one trigger must hold the target for the following ``k`` steps.

    The trigger is applied once; success needs all ``k + 1`` actions from the
    triggered step on to match.

    Raises:
        UsageError: If some ``k`` is negative or not below the context length
    """
    K = context_length(subject)
    curve = []
    for k in k_list:
        if k < 0:
            raise UsageError(f"persistence length must be non-negative, got {k}")
        if K is not None and k >= K:
            raise UsageError(f"persistence length {k} must stay below the context window K={K}; "
                             f"the trigger leaves the model's context after K-1 steps")
        asr = success_rate(triggered_episodes(subject, trig, target, spec, cfg, seed, hold=k))
        curve.append({'k': int(k), 'asr': asr, 'btp': btp, 'cp': run_cp(asr, btp)})
        logger.info(f"persistence k={k}: ASR {asr:.3f}")
    return curve


def eval_perturbed(subject: Evaluable, trig: TriggerSpec, target: np.ndarray, spec: EnvSpec,
                   cfg: EvalConfig, noise_levels: Sequence[float], seed: int = 0) -> List[Dict]:
    """ASR with each trigger value scaled by ``1 + eta``, ``eta ~ U(-level, level)`` per dim and episode."""
    curve = []
    for level in noise_levels:
        if not 0.0 <= level < 1.0:
            raise UsageError(f"noise level must lie in [0, 1), got {level}")
        asr = success_rate(triggered_episodes(subject, trig, target, spec, cfg, seed, noise_level=level))
        curve.append({'level': float(level), 'asr': asr})
        logger.info(f"trigger noise {level}: ASR {asr:.3f}")
    return curve


# ---------------------------------------------------------------------------
# Saliency
# ---------------------------------------------------------------------------

def gradient_attribution(model: TrajectoryModel, batch: SegmentBatch, positions: str = 'last') -> np.ndarray:
    """
    Mean absolute gradient of the predicted action norm per state dimension.

    ``positions='last'`` differentiates the final prediction with respect to
    the final state of each row; ``'all'`` sums prediction norms over every
    valid position and averages the gradient over valid positions.
    """
    if positions not in ('last', 'all'):
        raise UsageError(f"positions must be 'last' or 'all', got {positions!r}")
    B, L, S = batch.states.shape
    states = Tensor(batch.states, requires_grad=True)
    with model.frozen():
        with Tape():
            predicted = model.forward(batch, states=states)
            if positions == 'last':
                chosen = ad.index_select(predicted, 1, [L - 1])
                weights = np.ones((B, 1))
            else:
                chosen = predicted
                weights = batch.pad_mask.astype(np.float64)
            norms = ad.sqrt(ad.sum(ad.square(chosen), axis=-1))
            total = ad.sum(norms * weights)
        ad.backward(total)
    grad = np.abs(states.grad) if states.grad is not None else np.zeros_like(batch.states)
    if positions == 'last':
        return grad[:, -1, :].mean(axis=0)
    mask = batch.pad_mask.astype(np.float64)[:, :, None]
    return (grad * mask).sum(axis=(0, 1)) / mask.sum()


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class SeedReport:
    seed: int
    asr: float
    btp: float
    cp: float
    clean_returns: List[float] = field(default_factory=list)
    backdoored_returns: List[float] = field(default_factory=list)
    persistence: List[Dict] = field(default_factory=list)
    perturbation: List[Dict] = field(default_factory=list)


@dataclass
class EvalReport:
    seeds: List[SeedReport]
    config: Dict = field(default_factory=dict)

    @property
    def aggregate(self) -> Dict:
        return {
            'asr': float(np.mean([s.asr for s in self.seeds])),
            'btp': float(np.mean([s.btp for s in self.seeds])),
            'cp': aggregate_cp([(s.asr, s.btp) for s in self.seeds]),
            'n_seeds': len(self.seeds),
        }

    def records(self) -> List[Dict]:
        rows = [dict(record='seed', **asdict(s)) for s in self.seeds]
        rows.append(dict(record='aggregate', config=self.config, **self.aggregate))
        return rows

    def write_jsonl(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            for row in self.records():
                f.write(json.dumps(row, sort_keys=True) + '\n')
        logger.info(f"Wrote evaluation report to {path}")

    def write_curves(self, persistence_path: Optional[str], perturbation_path: Optional[str]) -> None:
        if persistence_path and any(s.persistence for s in self.seeds):
            with open(persistence_path, 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f)
                writer.writerow(['seed', 'k', 'asr', 'btp', 'cp'])
                for s in self.seeds:
                    for point in s.persistence:
                        writer.writerow([s.seed, point['k'], point['asr'], point['btp'], point['cp']])
        if perturbation_path and any(s.perturbation for s in self.seeds):
            with open(perturbation_path, 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f)
                writer.writerow(['seed', 'level', 'asr'])
                for s in self.seeds:
                    for point in s.perturbation:
                        writer.writerow([s.seed, point['level'], point['asr']])

    @classmethod
    def read_jsonl(cls, path: str) -> 'EvalReport':
        seeds, config = [], {}
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                if not line.strip():
                    continue
                row = json.loads(line)
                kind = row.pop('record')
                if kind == 'seed':
                    seeds.append(SeedReport(**row))
                else:
                    config = row.get('config', {})
        return cls(seeds, config)


def evaluate(backdoored: Evaluable, clean: Evaluable, trig: TriggerSpec, target: np.ndarray, spec: EnvSpec,
             cfg: EvalConfig, persist_k: Sequence[int] = (), noise_levels: Sequence[float] = ()) -> EvalReport:
    """ASR, BTP and CP per evaluation seed, with optional persistence and noise curves."""
    cfg.validate()
    K = context_length(backdoored)
    if K is not None and any(k >= K for k in persist_k):
        raise UsageError(f"persistence lengths {list(persist_k)} must stay below the context window K={K}")
    seeds = []
    for seed in cfg.seeds:
        asr, _ = eval_asr(backdoored, trig, target, spec, cfg, seed)
        btp = eval_btp(backdoored, clean, spec, cfg, seed)
        report = SeedReport(seed, asr, btp.value, run_cp(asr, btp.value),
                            btp.clean_returns, btp.backdoored_returns)
        if persist_k:
            report.persistence = eval_persistent(backdoored, trig, target, spec, cfg, persist_k, btp.value, seed)
        if noise_levels:
            report.perturbation = eval_perturbed(backdoored, trig, target, spec, cfg, noise_levels, seed)
        logger.info(f"seed {seed}: ASR {asr:.3f} BTP {btp.value:.3f} CP {report.cp:.3f}")
        seeds.append(report)
    return EvalReport(seeds, cfg.to_dict())
