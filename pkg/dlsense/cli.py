# dlsense/cli.py
import os
import sys
import json
import logging

import click

from .config import ExperimentConfig, load_config
from .detectnet import ARCHITECTURES
from .engine import (DB_FILE, coop_eval, ed_baseline, evaluate, generate_dataset, run_experiment,
                     train_detectnet, train_scn, wall_report_files)
from .errors import StageError, ValidationError
from . import db

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

logger = logging.getLogger('dlsense')


def json_dump(obj):
    try:
        return json.dumps(obj, indent=2, default=str)
    except (TypeError, ValueError):
        return str(obj)


def _config(ctx, **overrides) -> ExperimentConfig:
    g = ctx.find_root().obj
    cfg = load_config(g['config']) if g['config'] else ExperimentConfig()
    cfg = cfg.with_(seed=g['seed'], out=g['out'], **overrides)
    if g['reference_precision']:
        cfg = cfg.with_(reference_precision=True)
    return cfg


@click.group()
@click.option('--seed', type=int, default=None, help='Master seed (overrides the config file)')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Flat key-value config file')
@click.option('--out', type=click.Path(file_okay=False), default=None, help='Output directory')
@click.option('--reference-precision', is_flag=True, help='64-bit arithmetic for training and inference')
@click.option('-v', '--verbose', is_flag=True, help='Debug logging')
@click.pass_context
def cli(ctx, seed, config_path, out, reference_precision, verbose):
    """dlsense: deep-learning spectrum sensing benchmark"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    ctx.obj = {'seed': seed, 'config': config_path, 'out': out, 'reference_precision': reference_precision}


@cli.group()
def dataset():
    """Labeled IQ datasets"""


@dataset.command('gen')
@click.option('--schemes', default=None, help='Comma-separated modulation schemes, e.g. QAM16,GFSK')
@click.option('--sample-length', type=int, default=None, help='Complex samples per frame (N)')
@click.option('--n-train', type=int, default=None)
@click.option('--n-val', type=int, default=None)
@click.option('--n-test', type=int, default=None)
@click.option('--snr-min', type=float, default=None)
@click.option('--snr-max', type=float, default=None)
@click.option('--n-jobs', type=int, default=None, help='Parallel synthesis workers')
@click.pass_context
def dataset_gen(ctx, schemes, sample_length, n_train, n_val, n_test, snr_min, snr_max, n_jobs):
    """Synthesize train/val/test splits into an SPSD file"""
    cfg = _config(ctx, schemes=schemes, sample_length=sample_length, n_train=n_train, n_val=n_val,
                  n_test=n_test, snr_min=snr_min, snr_max=snr_max, n_jobs=n_jobs)
    click.echo(json_dump(generate_dataset(cfg)))


@cli.group()
def train():
    """Train DetectNet or SoftCombinationNet"""


@train.command('detectnet')
@click.option('--dataset', 'dataset_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--arch', type=click.Choice(ARCHITECTURES), default=None, help='Detector architecture')
@click.option('--max-epochs', type=int, default=None, help='Stage-1 epoch cap')
@click.option('--patience', type=int, default=None, help='Stage-1 early-stopping patience')
@click.option('--pf-low', type=float, default=None, help='Stage-2 Pf stop interval, lower end')
@click.option('--pf-high', type=float, default=None, help='Stage-2 Pf stop interval, upper end')
@click.pass_context
def train_detectnet_cmd(ctx, dataset_path, arch, max_epochs, patience, pf_low, pf_high):
    """Two-stage training of a detector"""
    cfg = _config(ctx, dataset=dataset_path, arch=arch, max_epochs=max_epochs, patience=patience,
                  pf_low=pf_low, pf_high=pf_high)
    click.echo(json_dump(train_detectnet(cfg)))


@train.command('scn')
@click.option('--checkpoint', 'checkpoints', multiple=True, type=click.Path(exists=True, dir_okay=False),
              help='Node DetectNet checkpoint; give once (shared) or k times (per node)')
@click.option('--k', type=int, default=None, help='Number of cooperating nodes')
@click.option('--n-train', type=int, default=None)
@click.option('--n-val', type=int, default=None)
@click.option('--n-test', type=int, default=None)
@click.pass_context
def train_scn_cmd(ctx, checkpoints, k, n_train, n_val, n_test):
    """Simulate k nodes and train the fusion network"""
    cfg = _config(ctx, k=k, n_train=n_train, n_val=n_val, n_test=n_test)
    click.echo(json_dump(train_scn(cfg, checkpoints)))


@cli.command('eval')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--dataset', 'dataset_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--pd-target', type=float, default=None)
@click.pass_context
def eval_cmd(ctx, checkpoint, dataset_path, pd_target):
    """Detection curve of a checkpoint on a dataset's test split"""
    cfg = _config(ctx, checkpoint=checkpoint, dataset=dataset_path, pd_target=pd_target)
    click.echo(json_dump(evaluate(cfg)))


@cli.command('ed-baseline')
@click.option('--sample-length', type=int, default=None)
@click.option('--pf-target', type=float, default=None)
@click.option('--trials', 'ed_trials', type=int, default=None, help='Monte-Carlo frames per SNR')
@click.option('--m-samples', type=float, default=None, help='Noise-estimation samples (inf = known noise)')
@click.option('--schemes', default=None)
@click.pass_context
def ed_baseline_cmd(ctx, sample_length, pf_target, ed_trials, m_samples, schemes):
    """Energy-detector curves (Monte-Carlo and analytic)"""
    cfg = _config(ctx, sample_length=sample_length, pf_target=pf_target, ed_trials=ed_trials,
                  m_samples=m_samples, schemes=schemes)
    click.echo(json_dump(ed_baseline(cfg)))


def _parse_entry(value: str):
    n, sep, path = value.partition(':')
    if not sep or not n.strip().isdigit():
        raise click.BadParameter(f'expected N:path, got {value!r}')
    return int(n), path


@cli.command('wall-report')
@click.option('--entry', 'entries', multiple=True, required=True,
              help='N:curves.csv, one per sample length')
@click.option('--detector', default=None, help='Pick the curve whose id contains this text')
@click.option('--pd-target', type=float, default=None)
@click.pass_context
def wall_report_cmd(ctx, entries, detector, pd_target):
    """SNR-wall table: EDW, DLW and improvement per sample length"""
    cfg = _config(ctx, pd_target=pd_target)
    res = wall_report_files(cfg, [_parse_entry(e) for e in entries], detector)
    click.echo(res['table'])


@cli.group()
def coop():
    """Cooperative sensing"""


@coop.command('eval')
@click.option('--coop', 'coop_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--scn', 'scn_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def coop_eval_cmd(ctx, coop_path, scn_path):
    """Fused detection curves: OR, MAJORITY, AND and SCN"""
    cfg = _config(ctx)
    click.echo(json_dump(coop_eval(cfg, coop_path or '', scn_path or '')))


@cli.command('run')
@click.pass_context
def run_cmd(ctx):
    """generate -> train -> evaluate from one config"""
    click.echo(json_dump(run_experiment(_config(ctx))))


@cli.command('traceback-log')
@click.option('--limit', default=20, help='Number of traceback rows to show')
@click.option('--context', default=None, help='Only this stage, e.g. train_detectnet')
@click.pass_context
def traceback_log(ctx, limit, context):
    """Show recent internal tracebacks captured in the run registry"""
    cfg = _config(ctx)
    db.configure(os.path.join(cfg.out, DB_FILE))
    click.echo(json_dump(db.fetch_tracebacks(limit, context)))


def main(argv=None) -> int:
    """Run the CLI and map failures to exit codes: 2 validation, 3 runtime."""
    try:
        rv = cli.main(args=argv, prog_name='dlsense', standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return EXIT_VALIDATION
    except click.ClickException as e:
        e.show()
        return EXIT_RUNTIME
    except click.Abort:
        click.echo('Aborted!', err=True)
        return EXIT_RUNTIME
    except ValidationError as e:
        click.echo(f'error: {e}', err=True)
        return EXIT_VALIDATION
    except StageError as e:
        click.echo(f'error: {e}', err=True)
        return EXIT_VALIDATION if isinstance(e.cause, ValidationError) else EXIT_RUNTIME
    except Exception as e:
        logger.debug('unhandled failure', exc_info=True)
        click.echo(f'error: {type(e).__name__}: {e}', err=True)
        return EXIT_RUNTIME
    return rv if isinstance(rv, int) else EXIT_OK


def run():
    sys.exit(main())


if __name__ == '__main__':
    run()
