#!/usr/bin/env python3
"""
trojanlab CLI
=============

Command-line interface: dataset generation, clean training, attacks,
evaluation, sweeps and reports. Every subcommand writes a manifest next to
its outputs.
"""

import argparse
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from trojanlab import __version__
from trojanlab.attack import (
    AttackConfig,
    TargetActionSpec,
    init_trigger,
    load_trigger_record,
    make_target_action,
    normalize_name,
    reward_manipulation_mode,
    run_attack,
    save_trigger_record,
    write_poison_log,
)
from trojanlab.envs import (
    dataset_export_text,
    dataset_load,
    dataset_save,
    generate_dataset,
    make_env,
    parse_mix,
)
from trojanlab.errors import (
    AttackSetupError,
    DimensionError,
    FormatError,
    TrojanLabError,
    UsageError,
)
from trojanlab.evaluation import EvalConfig, EvalReport, eval_asr, eval_btp, evaluate, run_cp
from trojanlab.runio import (
    MANIFEST_NAME,
    ResultsTable,
    RunManifest,
    ensure_parent,
    json_hash,
    read_csv,
    resolve_path,
    write_csv,
)
from trojanlab.seqmodel import (
    Checkpoint,
    ModelConfig,
    TrainConfig,
    TrajectoryModel,
    clean_train,
    evaluate_return,
    export_loss_history,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
CONFIG_SECTIONS = ('data', 'model', 'train', 'attack', 'eval')
ATTACKS = ('trojanto', 'baffle', 'imc', 'no-tf', 'no-bp', 'no-at')
TARGETS = ('ones', 'zeros', 'neg-ones', 'arithmetic', 'fixed-random', 'half-staggered')
USAGE_ERRORS = (UsageError, FormatError, AttackSetupError, DimensionError, FileNotFoundError)


@dataclass
class DataConfig:
    env: str = 'point-goal'
    mix: str = 'expert:200,poor:200'
    seed: int = 0


# Filled in from the dataset, never from a config file.
ENV_DERIVED_KEYS = ('state_dim', 'action_dim', 'max_timestep', 'action_low', 'action_high')


def int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse command-line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', help='Path to configuration file (JSON format)')
    common.add_argument('-v', '--verbose', action='store_true', help='Enable verbose output')
    common.add_argument('-d', '--debug', action='store_true', help='Enable debug mode')

    parser = argparse.ArgumentParser(
        description='Backdoor attacks on return-conditioned trajectory models',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    parser.add_argument('--version', action='version', version=f'trojanlab {__version__}')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('gen-data', parents=[common], help='Generate an offline dataset')
    p.add_argument('--env', help='Environment id (point-goal, corridor)')
    p.add_argument('--mix', help='Behavior mix, e.g. expert:200,poor:200')
    p.add_argument('--seed', type=int, help='Dataset seed')
    p.add_argument('-o', '--output', help='Dataset file (default data/<env>-seed<seed>.tlds)')
    p.add_argument('--export-text', help='Also write the dataset as comma-separated text')

    p = sub.add_parser('train-clean', parents=[common], help='Train a clean trajectory model')
    p.add_argument('--data', required=True, help='Dataset file')
    p.add_argument('--arch', choices=('dt', 'dc'), help='Token mixer')
    p.add_argument('--layers', type=int)
    p.add_argument('--embed-dim', type=int)
    p.add_argument('--heads', type=int)
    p.add_argument('--conv-width', type=int)
    p.add_argument('--context-k', type=int, help='Context length K')
    p.add_argument('--dropout', type=float)
    p.add_argument('--steps', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--weight-decay', type=float)
    p.add_argument('--grad-clip', type=float)
    p.add_argument('--warmup-steps', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--eval-episodes', type=int, default=0, help='Report mean return over this many episodes')
    p.add_argument('--plot', action='store_true', help='Render the loss curve next to the checkpoint')
    p.add_argument('-o', '--output', help='Checkpoint file (default runs/clean-<arch>-seed<seed>.ckpt)')

    p = sub.add_parser('attack', parents=[common], help='Implant a backdoor into a clean checkpoint')
    p.add_argument('--data', required=True, help='Dataset file the clean model was trained on')
    p.add_argument('--clean', required=True, help='Clean checkpoint')
    p.add_argument('--attack', default='trojanto', choices=ATTACKS)
    p.add_argument('--target', default='ones', choices=TARGETS)
    p.add_argument('--target-seed', type=int, default=0, help='Seed of the fixed-random target')
    p.add_argument('--budget', type=int, help='Number of trajectories the attack may use')
    p.add_argument('--filter-min-length', type=int)
    p.add_argument('--lambda', dest='lambda_', type=float, help='Weight of the backdoor loss')
    p.add_argument('--outer-m', type=int, help='Alternation count M (even)')
    p.add_argument('--n1', type=int, help='Trigger steps per round')
    p.add_argument('--n2', type=int, help='Model steps per round')
    p.add_argument('--mu', type=float, help='Trigger momentum')
    p.add_argument('--alpha', type=float, help='Trigger step size')
    p.add_argument('--poisons-per-batch', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--warmup-steps', type=int)
    p.add_argument('--trigger-dims', type=int_list, help='Comma-separated state dims')
    p.add_argument('--trigger-mode', choices=('replace', 'add'))
    p.add_argument('--trigger-init', choices=('bound', 'midpoint', 'random', 'dataset', 'fixed'))
    p.add_argument('--trigger-values', type=float_list, help='Values for --trigger-init fixed')
    p.add_argument('--poison-rate', type=float, help='Baffle: fraction of trajectories rewritten')
    p.add_argument('--reward-value', type=float, help='Baffle: reward written into poisoned trajectories')
    p.add_argument('--reward-override', type=float, help='Rewrite the reward of poisoned transitions')
    p.add_argument('--eval-every', type=int, help='Model steps between progress snapshots (0 disables)')
    p.add_argument('--snapshot-episodes', type=int, default=20, help='Episodes per progress snapshot')
    p.add_argument('--seed', type=int)
    p.add_argument('--plot', action='store_true', help='Render loss.png next to loss.csv')
    p.add_argument('-o', '--out-dir', help='Run directory (default runs/<attack>-<target>-seed<seed>)')

    p = sub.add_parser('eval', parents=[common], help='Evaluate a backdoored checkpoint')
    p.add_argument('--run-dir', help='Attack run directory holding backdoored.ckpt and trigger.json')
    p.add_argument('--backdoored', help='Backdoored checkpoint (default <run-dir>/backdoored.ckpt)')
    p.add_argument('--trigger', help='Trigger record (default <run-dir>/trigger.json)')
    p.add_argument('--clean', help='Clean checkpoint (default: the one recorded by the attack)')
    p.add_argument('--episodes', type=int)
    p.add_argument('--epsilon', type=float, help='ASR tolerance per action component')
    p.add_argument('--r0', type=float, help='Return the models are conditioned on')
    p.add_argument('--seeds', type=int_list, help='Comma-separated evaluation seeds')
    p.add_argument('--persist', type=int_list, default=[], help='Persistence lengths k, e.g. 0,5')
    p.add_argument('--noise', type=float_list, default=[], help='Trigger noise levels, e.g. 0,0.01,0.05,0.10')
    p.add_argument('--plot', action='store_true', help='Render curve images')
    p.add_argument('-o', '--out-dir', help='Output directory (default <run-dir>/eval)')

    p = sub.add_parser('sweep', parents=[common], help='Run a grid of attacks and evaluations')
    p.add_argument('spec', help='Sweep file (JSON)')
    p.add_argument('--jobs', type=int, default=1, help='Cells run concurrently')
    p.add_argument('-o', '--out-dir', default='sweeps/default', help='Sweep directory')

    p = sub.add_parser('report', parents=[common], help='Re-render tables and plots from existing outputs')
    p.add_argument('input', help='Evaluation or sweep directory, report.jsonl, results.csv or snapshots.csv')
    p.add_argument('--plot', action='store_true', help='Render curve images')
    p.add_argument('-o', '--out-dir', help='Where to write re-rendered files (default: next to the input)')

    return parser.parse_args(argv)


def load_config(config_path: Optional[str]) -> Dict:
    """
    Load configuration from a JSON file.

    Args:
        config_path: Path to the configuration file

    Returns:
        Configuration dictionary keyed by section
    """
    config = {}

    if config_path:
        path = resolve_path(config_path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                config = json.load(f)
        except ValueError as e:
            raise UsageError(f"cannot parse configuration {path}: {e}") from None
        if not isinstance(config, dict):
            raise UsageError(f"configuration {path} must hold a JSON object")
        unknown = sorted(set(config) - set(CONFIG_SECTIONS))
        if unknown:
            raise UsageError(f"unknown configuration sections {unknown}; expected {list(CONFIG_SECTIONS)}")
        logger.info(f"Loaded configuration from {path}")

    return config


def resolve_section(cls, config: Dict, section: str, overrides: Dict):
    """Dataclass defaults, then the config file section, then explicit flags."""
    values = asdict(cls())
    from_file = config.get(section, {})
    allowed = set(values) - set(ENV_DERIVED_KEYS) if cls is ModelConfig else set(values)
    unknown = sorted(set(from_file) - allowed)
    if unknown:
        raise UsageError(f"unknown keys {unknown} in configuration section {section!r}")
    values.update(from_file)
    values.update({k: v for k, v in overrides.items() if v is not None})
    builder = getattr(cls, 'from_dict', None)
    return builder(values) if builder else cls(**values)


def template_path() -> str:
    return os.path.join(os.path.dirname(__file__), 'config_template.json')


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def process_gen_data(args, config: Dict) -> int:
    started = time.perf_counter()
    data = resolve_section(DataConfig, config, 'data', {'env': args.env, 'mix': args.mix, 'seed': args.seed})
    spec = make_env(data.env)
    mix = parse_mix(data.mix)
    output = resolve_path(args.output or f'data/{data.env}-seed{data.seed}.tlds')

    dataset = generate_dataset(spec, mix, data.seed)
    dataset_save(dataset, ensure_parent(output))
    manifest = RunManifest('gen-data', {'data': asdict(data)}, seeds=[data.seed])
    manifest.add_output(output)
    if args.export_text:
        text_path = resolve_path(args.export_text)
        dataset_export_text(dataset, ensure_parent(text_path))
        manifest.add_output(text_path)
    manifest.result = {'trajectories': len(dataset), 'return_stats': dataset.return_stats}
    manifest.timings = {'wall_seconds': time.perf_counter() - started}
    manifest.write(output + '.manifest.json')

    stats = dataset.return_stats
    print(f"{len(dataset)} trajectories on {data.env}: return min {stats['min']:.3f} "
          f"mean {stats['mean']:.3f} max {stats['max']:.3f} -> {output}")
    return 0


def process_train_clean(args, config: Dict) -> int:
    started = time.perf_counter()
    data_path = resolve_path(args.data)
    dataset = dataset_load(data_path)
    model_cfg = resolve_section(ModelConfig, config, 'model', {
        'arch': args.arch, 'layers': args.layers, 'embed_dim': args.embed_dim, 'heads': args.heads,
        'conv_width': args.conv_width, 'context_K': args.context_k, 'dropout': args.dropout,
    }).for_dataset(dataset)
    train_cfg = resolve_section(TrainConfig, config, 'train', {
        'steps': args.steps, 'batch_size': args.batch_size, 'learning_rate': args.lr,
        'weight_decay': args.weight_decay, 'grad_clip': args.grad_clip,
        'warmup_steps': args.warmup_steps, 'seed': args.seed,
    })
    output = resolve_path(args.output or f'runs/clean-{model_cfg.arch}-seed{train_cfg.seed}.ckpt')

    model = TrajectoryModel.initialize(model_cfg, train_cfg.seed)
    checkpoint = clean_train(model, dataset, train_cfg)
    r0_eval = dataset.return_stats['max']
    checkpoint.training_meta['r0_eval'] = r0_eval
    checkpoint.save(ensure_parent(output))
    loss_path = output + '.loss.csv'
    export_loss_history(checkpoint.training_meta['loss_history'], loss_path)

    manifest = RunManifest('train-clean', {'model': model_cfg.to_dict(), 'train': asdict(train_cfg)},
                           seeds=[train_cfg.seed])
    manifest.add_input(data_path)
    manifest.add_output(output)
    manifest.add_output(loss_path)
    history = checkpoint.training_meta['loss_history']
    if args.plot:
        from trojanlab import plotting
        manifest.add_output(plotting.plot_loss(history, output + '.loss.png'))
    manifest.result = {'digest': checkpoint.digest(), 'final_loss': history[-1], 'r0_eval': r0_eval}
    if args.eval_episodes:
        returns = evaluate_return(model, dataset.env, args.eval_episodes, r0_eval, train_cfg.seed)
        manifest.result['mean_return'] = float(np.mean(returns))
        print(f"mean return over {args.eval_episodes} episodes: {np.mean(returns):.3f}")
    manifest.timings = {'wall_seconds': time.perf_counter() - started, 'steps': train_cfg.steps}
    manifest.write(output + '.manifest.json')
    print(f"trained {model_cfg.arch} model for {train_cfg.steps} steps, final loss {history[-1]:.5f} -> {output}")
    return 0


def make_snapshot_fn(clean_model: TrajectoryModel, target: np.ndarray, spec, r0_eval: float,
                     episodes: int, seed: int) -> Callable:
    cfg = EvalConfig(n_episodes=episodes, r0_eval=r0_eval, seeds=(seed,))

    def snapshot(model: TrajectoryModel, trigger) -> Dict:
        asr, _ = eval_asr(model, trigger, target, spec, cfg, seed)
        btp = eval_btp(model, clean_model, spec, cfg, seed).value
        return {'asr': asr, 'btp': btp, 'cp': run_cp(asr, btp)}

    return snapshot


def attack_overrides(args) -> Dict:
    return {
        'budget_trajectories': args.budget, 'filter_min_length': args.filter_min_length,
        'lambda_clean': args.lambda_, 'outer_M': args.outer_m, 'trigger_steps_N1': args.n1,
        'model_steps_N2': args.n2, 'mi_momentum': args.mu, 'mi_step': args.alpha,
        'poisons_per_batch': args.poisons_per_batch, 'batch_size': args.batch_size,
        'learning_rate': args.lr, 'warmup_steps': args.warmup_steps,
        'trigger_dims': tuple(args.trigger_dims) if args.trigger_dims else None,
        'trigger_mode': args.trigger_mode, 'trigger_init': args.trigger_init,
        'poison_rate': args.poison_rate, 'reward_value': args.reward_value,
        'reward_override': args.reward_override, 'eval_every': args.eval_every, 'seed': args.seed,
    }


def execute_attack(attack: str, target_kind: str, target_seed: int, data_path: str, clean_path: str,
                   attack_cfg: AttackConfig, out_dir: str, trigger_values: Optional[List[float]] = None,
                   snapshot_episodes: int = 20, command: str = 'attack', plot: bool = False) -> RunManifest:
    """Run one attack and write its directory; shared by ``attack`` and ``sweep``."""
    started = time.perf_counter()
    dataset = dataset_load(data_path)
    clean = Checkpoint.load(clean_path)
    spec = dataset.env
    target = make_target_action(TargetActionSpec(target_kind, spec.action_dim, target_seed))
    trigger = init_trigger(spec, attack_cfg.trigger_dims, attack_cfg.trigger_init, seed=attack_cfg.seed,
                           mode=attack_cfg.trigger_mode, values=trigger_values, dataset=dataset, target=target)
    r0_eval = float(clean.training_meta.get('r0_eval', dataset.return_stats['max']))
    name = normalize_name(attack)

    snapshot_fn = None
    if attack_cfg.reward_override is not None and not attack_cfg.eval_every:
        attack_cfg.eval_every = attack_cfg.model_steps_N2
    if attack_cfg.eval_every:
        snapshot_fn = make_snapshot_fn(clean.model(), target, spec, r0_eval, snapshot_episodes, attack_cfg.seed)

    if attack_cfg.reward_override is not None:
        if name == 'baffle':
            raise UsageError("--reward-override applies to the batch-poisoning attacks, not baffle")
        result = reward_manipulation_mode(clean, dataset, attack_cfg, trigger, target,
                                          attack_cfg.reward_override, snapshot_fn, variant=name)
    else:
        result = run_attack(name, clean, dataset, attack_cfg, trigger, target, snapshot_fn)

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, 'backdoored.ckpt')
    trigger_path = os.path.join(out_dir, 'trigger.json')
    poison_path = os.path.join(out_dir, 'poison_log.jsonl')
    loss_path = os.path.join(out_dir, 'loss.csv')
    result.checkpoint.save(ckpt_path)
    save_trigger_record(trigger_path, result.trigger, result.target, normalize_name(target_kind), {
        'env': spec.env_id,
        'attack': name,
        'r0_eval': r0_eval,
        'clean_checkpoint': os.path.abspath(clean_path),
        'dataset': os.path.abspath(data_path),
    })
    write_poison_log(result.records, poison_path)
    dims = len(result.trigger.dims)
    write_csv(loss_path, ['phase', 'step', 'loss'] + [f'trigger{i}' for i in range(dims)],
              ([e['phase'], e['step'], e['loss']] + list(e['trigger']) for e in result.log))

    manifest = RunManifest(command, {
        'attack': attack_cfg.to_dict(),
        'variant': name,
        'target_kind': normalize_name(target_kind),
        'target_seed': target_seed,
        'trigger_values': trigger_values,
        'snapshot_episodes': snapshot_episodes,
    }, seeds=[attack_cfg.seed])
    manifest.add_input(data_path)
    manifest.add_input(clean_path)
    for path in (ckpt_path, trigger_path, poison_path, loss_path):
        manifest.add_output(path)
    if plot:
        from trojanlab import plotting
        manifest.add_output(plotting.plot_loss([e['loss'] for e in result.log],
                                               os.path.join(out_dir, 'loss.png')))
    if result.snapshots:
        snapshot_path = os.path.join(out_dir, 'snapshots.csv')
        write_csv(snapshot_path, ['model_step', 'asr', 'btp', 'cp'],
                  ([s['model_step'], s['asr'], s['btp'], s['cp']] for s in result.snapshots))
        manifest.add_output(snapshot_path)
    manifest.result = {
        'digest': result.checkpoint.digest(),
        'trigger': result.trigger.values.tolist(),
        'target': result.target.tolist(),
        'pool': result.pool_indices,
        'poisoned_batches': len(result.records),
    }
    manifest.timings = {'wall_seconds': time.perf_counter() - started,
                        'model_steps': result.checkpoint.training_meta.get('model_steps',
                                                                           attack_cfg.total_model_steps)}
    manifest.write(os.path.join(out_dir, MANIFEST_NAME))
    return manifest


def process_attack(args, config: Dict) -> int:
    attack_cfg = resolve_section(AttackConfig, config, 'attack', attack_overrides(args))
    attack_cfg.validate()
    out_dir = resolve_path(args.out_dir or f'runs/{args.attack}-{args.target}-seed{attack_cfg.seed}')
    manifest = execute_attack(args.attack, args.target, args.target_seed, resolve_path(args.data),
                              resolve_path(args.clean), attack_cfg, out_dir, args.trigger_values,
                              args.snapshot_episodes, plot=args.plot)
    print(f"{args.attack} attack finished, trigger {np.round(manifest.result['trigger'], 4).tolist()} -> {out_dir}")
    return 0


def load_eval_inputs(run_dir: Optional[str], backdoored: Optional[str], trigger: Optional[str],
                     clean: Optional[str]):
    if not run_dir and not (backdoored and trigger):
        raise UsageError("give --run-dir or both --backdoored and --trigger")
    trigger_path = resolve_path(trigger or os.path.join(run_dir, 'trigger.json'))
    if not os.path.exists(trigger_path):
        raise UsageError(f"missing trigger record {trigger_path}")
    trig, target, record = load_trigger_record(trigger_path)
    backdoored_path = resolve_path(backdoored or os.path.join(run_dir, 'backdoored.ckpt'))
    clean_path = clean or record.get('clean_checkpoint')
    if not clean_path:
        raise UsageError("no clean checkpoint given and none recorded in the trigger record")
    return trigger_path, trig, target, record, backdoored_path, resolve_path(clean_path)


def process_eval(args, config: Dict) -> int:
    started = time.perf_counter()
    trigger_path, trig, target, record, backdoored_path, clean_path = load_eval_inputs(
        args.run_dir, args.backdoored, args.trigger, args.clean)
    eval_cfg = resolve_section(EvalConfig, config, 'eval', {
        'n_episodes': args.episodes, 'asr_epsilon': args.epsilon, 'r0_eval': args.r0,
        'seeds': tuple(args.seeds) if args.seeds else None,
    })
    if eval_cfg.r0_eval is None:
        eval_cfg.r0_eval = record.get('r0_eval')
    spec = make_env(record.get('env', 'point-goal'))
    backdoored = Checkpoint.load(backdoored_path).model()
    clean = Checkpoint.load(clean_path).model()

    report = evaluate(backdoored, clean, trig, target, spec, eval_cfg, args.persist, args.noise)
    report.config['env'] = spec.env_id
    out_dir = resolve_path(args.out_dir or os.path.join(args.run_dir or '.', 'eval'))
    manifest = RunManifest('eval', {'eval': eval_cfg.to_dict(), 'persist': args.persist, 'noise': args.noise},
                           seeds=list(eval_cfg.seeds))
    for path in (trigger_path, backdoored_path, clean_path):
        manifest.add_input(path)
    for path in write_eval_outputs(report, out_dir, args.plot):
        manifest.add_output(path)
    manifest.result = report.aggregate
    manifest.timings = {'wall_seconds': time.perf_counter() - started}
    manifest.write(os.path.join(out_dir, MANIFEST_NAME))
    aggregate = report.aggregate
    print(f"ASR {aggregate['asr']:.3f}  BTP {aggregate['btp']:.3f}  CP {aggregate['cp']:.3f} -> {out_dir}")
    return 0


def write_eval_outputs(report: EvalReport, out_dir: str, plot: bool) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = [os.path.join(out_dir, 'report.jsonl')]
    report.write_jsonl(written[0])
    persistence_path = os.path.join(out_dir, 'persistence.csv')
    perturbation_path = os.path.join(out_dir, 'perturbation.csv')
    report.write_curves(persistence_path, perturbation_path)
    written += [p for p in (persistence_path, perturbation_path) if os.path.exists(p)]
    if plot:
        from trojanlab import plotting

        if any(s.persistence for s in report.seeds):
            written.append(plotting.plot_persistence({s.seed: s.persistence for s in report.seeds},
                                                     os.path.join(out_dir, 'persistence.png')))
        if any(s.perturbation for s in report.seeds):
            written.append(plotting.plot_perturbation({s.seed: s.perturbation for s in report.seeds},
                                                      os.path.join(out_dir, 'perturbation.png')))
    return written


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def sweep_cells(spec: Dict, config: Dict) -> List[Dict]:
    """Cross product of attacks, targets, seeds and budgets with resolved configs."""
    for key in ('data', 'clean', 'attacks', 'targets', 'seeds'):
        if key not in spec:
            raise UsageError(f"sweep file is missing {key!r}")
    attack_base = dict(config.get('attack', {}))
    attack_base.update(spec.get('attack', {}))
    eval_base = dict(config.get('eval', {}))
    eval_base.update(spec.get('eval', {}))
    data_path = resolve_path(spec['data'])
    clean_path = resolve_path(spec['clean'])
    cells = []
    for attack, target, seed, budget in itertools.product(
            spec['attacks'], spec['targets'], spec['seeds'], spec.get('budgets', [None])):
        overrides = {'seed': seed, 'budget_trajectories': budget}
        attack_cfg = resolve_section(AttackConfig, {'attack': attack_base}, 'attack', overrides)
        attack_cfg.validate()
        eval_cfg = resolve_section(EvalConfig, {'eval': eval_base}, 'eval', {'seeds': (seed,)})
        cells.append({
            'attack': attack,
            'target': target,
            'seed': seed,
            'budget': attack_cfg.budget_trajectories,
            'data': data_path,
            'clean': clean_path,
            'attack_config': attack_cfg.to_dict(),
            'eval_config': eval_cfg.to_dict(),
        })
    return cells


def run_cell(cell: Dict, root: str) -> Dict:
    """Attack plus evaluation for one sweep cell; skipped when a finished manifest matches."""
    from trojanlab.runio import content_hash

    key = json_hash({'cell': cell, 'inputs': [content_hash(cell['data']), content_hash(cell['clean'])]})
    cell_dir = os.path.join(root, 'cells', f"{cell['attack']}-{cell['target']}-b{cell['budget']}-s{cell['seed']}")
    manifest_path = os.path.join(cell_dir, 'cell.json')
    base = {'attack': cell['attack'], 'target_kind': cell['target'], 'budget': cell['budget'], 'seed': cell['seed']}
    if os.path.exists(manifest_path):
        done = RunManifest.load(manifest_path)
        if done.status == 'ok' and done.result.get('key') == key and not done.verify_outputs():
            logger.info(f"Cell {cell_dir} is up to date")
            return dict(base, **done.result['row'])
    started = time.perf_counter()
    manifest = RunManifest('sweep-cell', cell, seeds=[cell['seed']])
    try:
        attack_cfg = AttackConfig.from_dict(cell['attack_config'])
        attack_manifest = execute_attack(cell['attack'], cell['target'], 0, cell['data'], cell['clean'],
                                         attack_cfg, cell_dir, command='sweep-attack')
        trig, target, record = load_trigger_record(os.path.join(cell_dir, 'trigger.json'))
        eval_cfg = EvalConfig.from_dict(cell['eval_config'])
        if eval_cfg.r0_eval is None:
            eval_cfg.r0_eval = record['r0_eval']
        spec = make_env(record['env'])
        backdoored = Checkpoint.load(os.path.join(cell_dir, 'backdoored.ckpt')).model()
        clean = Checkpoint.load(cell['clean']).model()
        report = evaluate(backdoored, clean, trig, target, spec, eval_cfg)
        for path in write_eval_outputs(report, os.path.join(cell_dir, 'eval'), plot=False):
            manifest.add_output(path)
        manifest.add_output(os.path.join(cell_dir, MANIFEST_NAME))
        seed_report = report.seeds[0]
        row = {'env': spec.env_id, 'arch': backdoored.config.arch, 'asr': seed_report.asr,
               'btp': seed_report.btp, 'cp': seed_report.cp, 'status': 'ok'}
        manifest.result = {'key': key, 'row': row, 'attack_digest': attack_manifest.result['digest']}
    except Exception as e:
        if isinstance(e, TrojanLabError):
            logger.error(f"Cell {cell_dir} failed: {e}")
        else:
            logger.exception(f"Cell {cell_dir} failed unexpectedly: {e}")
        row = {'env': '', 'arch': '', 'asr': float('nan'), 'btp': float('nan'), 'cp': float('nan'),
               'status': f'failed: {type(e).__name__}: {e}'}
        manifest.status = 'failed'
        manifest.result = {'key': key, 'row': row}
    manifest.timings = {'wall_seconds': time.perf_counter() - started}
    manifest.write(manifest_path)
    return dict(base, **row)


def process_sweep(args, config: Dict) -> int:
    started = time.perf_counter()
    spec_path = resolve_path(args.spec)
    try:
        with open(spec_path, 'r', encoding='utf-8') as f:
            spec = json.load(f)
    except ValueError as e:
        raise UsageError(f"cannot parse sweep file {spec_path}: {e}") from None
    cells = sweep_cells(spec, config)
    root = resolve_path(args.out_dir)
    os.makedirs(root, exist_ok=True)
    logger.info(f"Sweep of {len(cells)} cells with {args.jobs} job(s)")

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run_cell, cells, [root] * len(cells)))
    else:
        rows = [run_cell(cell, root) for cell in cells]

    table = ResultsTable()
    for row in rows:
        table.add(row)
    csv_path = os.path.join(root, 'results.csv')
    text_path = os.path.join(root, 'results.txt')
    table.write_csv(csv_path)
    table.write_text(text_path)

    manifest = RunManifest('sweep', {'spec': spec, 'jobs': args.jobs}, seeds=sorted(set(spec['seeds'])))
    manifest.add_input(spec_path)
    for path in (csv_path, text_path):
        manifest.add_output(path)
    for cell in cells:
        cell_manifest = os.path.join(root, 'cells',
                                     f"{cell['attack']}-{cell['target']}-b{cell['budget']}-s{cell['seed']}", 'cell.json')
        if os.path.exists(cell_manifest):
            manifest.add_output(cell_manifest)
    failed = [r for r in rows if r['status'] != 'ok']
    manifest.result = {'cells': len(rows), 'failed': len(failed)}
    manifest.timings = {'wall_seconds': time.perf_counter() - started}
    manifest.write(os.path.join(root, MANIFEST_NAME))
    print(table.to_text(), end='')
    if failed:
        logger.warning(f"{len(failed)} of {len(rows)} cells failed")
    return 0


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def report_table(report: EvalReport) -> ResultsTable:
    config = report.config
    table = ResultsTable()
    for s in report.seeds:
        table.add({'env': config.get('env', ''), 'arch': '', 'attack': '', 'target_kind': '', 'budget': '',
                   'seed': s.seed, 'asr': s.asr, 'btp': s.btp, 'cp': s.cp, 'status': 'ok'})
    return table


def process_report(args, config: Dict) -> int:
    source = resolve_path(args.input)
    if os.path.isdir(source):
        candidates = [os.path.join(source, name) for name in ('report.jsonl', 'results.csv', 'snapshots.csv')]
        found = [p for p in candidates if os.path.exists(p)]
        if not found:
            raise UsageError(f"{source} holds no report.jsonl, results.csv or snapshots.csv")
    elif os.path.exists(source):
        found = [source]
    else:
        raise FileNotFoundError(source)
    out_dir = resolve_path(args.out_dir) if args.out_dir else os.path.dirname(found[0])
    os.makedirs(out_dir, exist_ok=True)

    written = []
    for path in found:
        name = os.path.basename(path)
        if name.endswith('.jsonl'):
            report = EvalReport.read_jsonl(path)
            text = report_table(report).to_text()
            print(text, end='')
            written.append(os.path.join(out_dir, 'report.txt'))
            with open(written[-1], 'w', encoding='utf-8') as f:
                f.write(text)
            if args.plot:
                written += [p for p in write_eval_outputs(report, out_dir, plot=True) if p.endswith('.png')]
        elif name == 'snapshots.csv':
            rows = read_csv(path)
            if args.plot and rows:
                from trojanlab import plotting

                written.append(plotting.plot_snapshots(rows, os.path.join(out_dir, 'snapshots.png')))
            for row in rows:
                print(f"step {row['model_step']}: ASR {float(row['asr']):.3f} BTP {float(row['btp']):.3f}")
        else:
            table = ResultsTable.from_csv(path)
            written.append(os.path.join(out_dir, 'results.txt'))
            table.write_text(written[-1])
            print(table.to_text(), end='')

    manifest = RunManifest('report', {'input': source, 'plot': args.plot})
    for path in found:
        manifest.add_input(path)
    for path in written:
        manifest.add_output(path)
    manifest.write(os.path.join(out_dir, 'report.manifest.json'))
    return 0


HANDLERS = {
    'gen-data': process_gen_data,
    'train-clean': process_train_clean,
    'attack': process_attack,
    'eval': process_eval,
    'sweep': process_sweep,
    'report': process_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the CLI."""
    try:
        args = parse_arguments(argv)
    except SystemExit as e:
        return int(e.code or 0)

    # Set logging level
    if args.debug:
        level = logging.DEBUG
    elif args.verbose:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger().setLevel(level)

    try:
        config = load_config(args.config)
        return HANDLERS[args.command](args, config)
    except USAGE_ERRORS as e:
        logger.error(f"{args.command}: {e}")
        return 2
    except TrojanLabError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
