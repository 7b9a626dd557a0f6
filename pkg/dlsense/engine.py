# dlsense/engine.py
import os
import json
import time
import hashlib
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import db
from .config import ExperimentConfig, config_hash
from .coopfuse import (FusionRule, check_fusion_order, coop_curve, load_coop, load_scn, save_coop, save_scn,
                       scn_build_train, synth_coop_dataset)
from .curves import DetectionCurve, estimate_snr_wall, format_db, read_csv, write_csv, write_dat
from .db import add_traceback
from .detectnet import (append_epoch_log, build, detectnet_from_checkpoint, dl_curve, load_detectnet, save_detectnet,
                        train_two_stage)
from .endet import WallQuery, analytic_curve, ed_curve, snr_wall
from .errors import DLSenseError, StageError, ValidationError
from .sigmod import DatasetSpec, load_dataset, save_dataset, synth_dataset
from .tensornet import load_checkpoint

logger = logging.getLogger(__name__)

DATASET_FILE = 'dataset.spsd'
CHECKPOINT_FILE = 'detectnet.ckpt'
SCN_FILE = 'scn.ckpt'
COOP_FILE = 'coop.spce'
EPOCH_LOG = 'epochs.jsonl'
MANIFEST_FILE = 'manifest.json'
DB_FILE = 'runs.db'


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            h.update(block)
    return h.hexdigest()


class Run:
    """One CLI invocation: output directory, run registry row, manifest."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.hash = config_hash(cfg)
        self.out = cfg.out
        os.makedirs(self.out, exist_ok=True)
        self.run_id = f'{command}-{self.hash[:12]}-{time.strftime("%Y%m%dT%H%M%S")}'
        self.artifacts = []
        self.stages = []
        self.flags = {}
        db.configure(os.path.join(self.out, DB_FILE))
        db.init_db()
        db.start_run(self.run_id, command, self.hash, cfg.seed, asdict(cfg))

    @property
    def meta(self) -> dict:
        return {'config_hash': self.hash, 'seed': self.cfg.seed}

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def record(self, path: str) -> str:
        sha = file_sha256(path)
        self.artifacts.append({'path': os.path.relpath(path, self.out), 'sha256': sha})
        db.add_artifact(self.run_id, path, sha)
        return sha

    def on_epoch(self, metrics):
        append_epoch_log(self.path(EPOCH_LOG), metrics)
        db.log_epoch(self.run_id, metrics.to_dict())

    @contextmanager
    def stage(self, name: str):
        logger.info('[%s] stage %s', self.command, name)
        try:
            yield
        except StageError:
            raise
        except Exception as e:
            self.finish('incomplete', failed_stage=name)
            raise StageError(name, e) from e
        self.stages.append(name)

    def finish(self, status: str, **extra) -> dict:
        manifest = {
            'run_id': self.run_id,
            'command': self.command,
            'status': status,
            'stages': list(self.stages),
            'artifacts': self.artifacts,
            'flags': self.flags,
        }
        manifest.update(self.meta)
        manifest.update(extra)
        with open(self.path(MANIFEST_FILE), 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        db.finish_run(self.run_id, status)
        return manifest


def _input(cfg_value: str, run: Run, default_name: str) -> str:
    path = cfg_value or run.path(default_name)
    if not os.path.exists(path):
        raise ValidationError(f'input file not found: {path}')
    return path


def _write_curves(run: Run, stem: str, curves: Sequence[DetectionCurve]) -> dict:
    csv_path = write_csv(run.path(f'{stem}.csv'), curves)
    dat_path = write_dat(run.path(f'{stem}.dat'), curves, run.meta)
    run.record(csv_path)
    run.record(dat_path)
    return {'csv': csv_path, 'dat': dat_path}


# --- stages ---

def _generate(run: Run) -> dict:
    spec = run.cfg.dataset_spec()
    splits = synth_dataset(spec, n_jobs=run.cfg.n_jobs)
    path = save_dataset(run.path(DATASET_FILE), spec, splits, run.meta)
    sha = run.record(path)
    return {'dataset': path, 'sha256': sha, 'split_sizes': [len(s) for s in splits]}


def _train(run: Run, dataset_path: str) -> dict:
    cfg = run.cfg
    spec, splits, _ = load_dataset(dataset_path)
    net_cfg = cfg.detectnet_config().with_(sample_length=spec.sample_length)
    model = build(net_cfg, seed=cfg.seed)
    result = train_two_stage(model, splits.train, splits.val, cfg.stop_policy(), cfg.seed, run.on_epoch)
    if result.out_of_interval:
        run.flags['out_of_interval'] = True
        logger.warning('validation Pf %.4f outside [%g, %g]: out-of-interval checkpoint',
                       result.metrics.pf, cfg.pf_low, cfg.pf_high)
    meta = dict(run.meta, schemes=[s.name for s in spec.schemes], dataset_sha256=file_sha256(dataset_path),
                in_interval=result.in_interval)
    path = save_detectnet(run.path(CHECKPOINT_FILE), result.model, result.metrics.epoch,
                          result.metrics.to_dict(), meta)
    run.record(path)
    return {
        'checkpoint': path,
        'arch': net_cfg.arch,
        'params': result.model.network.param_count(),
        'epochs': len(result.history),
        'val_pf': result.metrics.pf,
        'val_loss': result.metrics.val_loss,
        'in_interval': result.in_interval,
    }


def _evaluate(run: Run, checkpoint_path: str, dataset_path: str) -> dict:
    cfg = run.cfg
    ckpt = load_checkpoint(checkpoint_path)
    model = detectnet_from_checkpoint(ckpt, cfg.reference_precision, checkpoint_path)
    trained_on = ','.join(ckpt.meta.get('schemes', []))
    spec, splits, _ = load_dataset(dataset_path)
    if spec.sample_length != model.sample_length:
        raise ValidationError(f'dataset N={spec.sample_length} does not match model N={model.sample_length}')
    tested_on = ','.join(s.name for s in spec.schemes)
    det_id = model.detector_id
    if trained_on and trained_on != tested_on:
        det_id = f'{det_id}[train={trained_on};test={tested_on}]'
    curve = dl_curve(model, splits.test, det_id)
    files = _write_curves(run, 'curves', [curve])
    dlw = estimate_snr_wall(curve, cfg.pd_target)
    edw = _ed_wall(curve.pf, spec.sample_length, cfg.pd_target)
    return dict(files, detector=det_id, pf=curve.pf, dlw_db=dlw, edw_db=edw,
                improvement_db=None if (dlw is None or edw is None) else edw - dlw)


def _ed_wall(pf: float, n: int, pd_target: float, m_samples: float = float('inf')) -> Optional[float]:
    if not 0.0 < pf < 1.0:
        return None
    try:
        return snr_wall(WallQuery(pf, pd_target, n, m_samples))
    except ValidationError:
        return None


# --- public entry points (one per subcommand) ---

def generate_dataset(cfg: ExperimentConfig) -> dict:
    try:
        run = Run(cfg, 'dataset-gen')
        with run.stage('generate'):
            res = _generate(run)
        run.finish('complete')
        return res
    except Exception as e:
        add_traceback('generate_dataset', e)
        raise


def train_detectnet(cfg: ExperimentConfig) -> dict:
    try:
        run = Run(cfg, 'train-detectnet')
        with run.stage('train'):
            res = _train(run, _input(cfg.dataset, run, DATASET_FILE))
        run.finish('complete')
        return res
    except Exception as e:
        add_traceback('train_detectnet', e)
        raise


def evaluate(cfg: ExperimentConfig) -> dict:
    try:
        run = Run(cfg, 'eval')
        with run.stage('evaluate'):
            res = _evaluate(run, _input(cfg.checkpoint, run, CHECKPOINT_FILE),
                            _input(cfg.dataset, run, DATASET_FILE))
        run.finish('complete')
        return res
    except Exception as e:
        add_traceback('evaluate', e)
        raise


def ed_baseline(cfg: ExperimentConfig) -> dict:
    """Monte-Carlo and analytic energy-detector curves at cfg.pf_target."""
    try:
        run = Run(cfg, 'ed-baseline')
        with run.stage('ed-baseline'):
            n = cfg.sample_length
            grid = cfg.snr_grid()
            scheme = cfg.scheme_list()[0]
            mc = ed_curve(n, grid, cfg.pf_target, cfg.ed_trials, cfg.seed, scheme=scheme, m_samples=cfg.m_samples)
            an = analytic_curve(n, grid, cfg.pf_target, cfg.m_samples)
            files = _write_curves(run, 'ed_curves', [mc, an])
            res = dict(files, pf=mc.pf, empirical_wall_db=estimate_snr_wall(mc, cfg.pd_target),
                       analytic_wall_db=_ed_wall(cfg.pf_target, n, cfg.pd_target, cfg.m_samples))
        run.finish('complete')
        return res
    except Exception as e:
        add_traceback('ed_baseline', e)
        raise


@dataclass(frozen=True)
class WallRow:
    pf: float
    n: int
    edw_db: Optional[float]
    dlw_db: Optional[float]

    @property
    def improvement_db(self) -> Optional[float]:
        if self.edw_db is None or self.dlw_db is None:
            return None
        return self.edw_db - self.dlw_db

    def to_dict(self) -> dict:
        d = asdict(self)
        d['improvement_db'] = self.improvement_db
        return d


def wall_report(lengths: Sequence[int], pf_observed: Sequence[float], curves: Sequence[DetectionCurve],
                pd_target: float = 0.9) -> List[WallRow]:
    """
    EDW from the closed-form wall (M infinite) at each observed Pf, DLW from the
    detector's empirical curve, one row per sample length. EDW is None where the
    wall is undefined, e.g. a detector that raised no false alarm (Pf = 0).
    """
    if not (len(lengths) == len(pf_observed) == len(curves)):
        raise ValidationError('need one Pf and one curve per sample length')
    rows = []
    for n, pf, curve in zip(lengths, pf_observed, curves):
        if curve is None:
            raise ValidationError(f'missing detection curve for N={n}')
        edw = _ed_wall(float(pf), int(n), pd_target)
        rows.append(WallRow(float(pf), int(n), edw, estimate_snr_wall(curve, pd_target)))
    return rows


def format_wall_table(rows: Sequence[WallRow]) -> str:
    lines = [f'{"Pf":>8} {"N":>6} {"EDW(dB)":>9} {"DLW(dB)":>9} {"gain(dB)":>9}']
    for r in rows:
        lines.append(f'{100 * r.pf:7.2f}% {r.n:6d} {format_db(r.edw_db):>9} {format_db(r.dlw_db):>9} '
                     f'{format_db(r.improvement_db):>9}')
    return '\n'.join(lines)


def wall_report_files(cfg: ExperimentConfig, entries: Sequence[tuple], detector: Optional[str] = None) -> dict:
    """entries: (N, curve CSV path); the first curve in each file (or the one matching ``detector``) is used."""
    try:
        run = Run(cfg, 'wall-report')
        with run.stage('wall-report'):
            lengths, pfs, curves = [], [], []
            for n, path in entries:
                found = [c for c in read_csv(path) if detector is None or detector in c.detector_id]
                if not found:
                    raise ValidationError(f'missing curve for N={n} in {path}')
                lengths.append(int(n))
                pfs.append(found[0].pf)
                curves.append(found[0])
            rows = wall_report(lengths, pfs, curves, cfg.pd_target)
            out = run.path('wall_report.json')
            with open(out, 'w', encoding='utf-8') as f:
                json.dump(dict(run.meta, rows=[r.to_dict() for r in rows]), f, indent=2, sort_keys=True)
            run.record(out)
        run.finish('complete')
        return {'rows': [r.to_dict() for r in rows], 'table': format_wall_table(rows), 'report': out}
    except Exception as e:
        add_traceback('wall_report', e)
        raise


def _coop_spec(cfg: ExperimentConfig, sample_length: int) -> DatasetSpec:
    return cfg.dataset_spec().with_(sample_length=sample_length)


def train_scn(cfg: ExperimentConfig, checkpoints: Sequence[str] = ()) -> dict:
    """Simulate k cooperating nodes running the given DetectNet(s) and train the fusion net."""
    try:
        run = Run(cfg, 'train-scn')
        with run.stage('coop-generate'):
            paths = list(checkpoints) or [_input(cfg.checkpoint, run, CHECKPOINT_FILE)]
            models = [load_detectnet(p, reference_precision=cfg.reference_precision) for p in paths]
            base = _coop_spec(cfg, models[0].sample_length)
            splits = synth_coop_dataset(base, cfg.k, models, n_jobs=cfg.n_jobs)
            coop_path = save_coop(run.path(COOP_FILE), splits, dict(run.meta, base=base.to_header()))
            run.record(coop_path)
        with run.stage('train'):
            result = scn_build_train(cfg.scn_config(), splits.train, splits.val, cfg.stop_policy(),
                                     cfg.seed, run.on_epoch)
            if result.out_of_interval:
                run.flags['out_of_interval'] = True
            path = save_scn(run.path(SCN_FILE), result.model, result.metrics.epoch, result.metrics.to_dict(),
                            dict(run.meta, in_interval=result.in_interval))
            run.record(path)
        run.finish('complete')
        return {'coop_dataset': coop_path, 'scn': path, 'k': cfg.k, 'val_pf': result.metrics.pf,
                'in_interval': result.in_interval, 'epochs': len(result.history)}
    except Exception as e:
        add_traceback('train_scn', e)
        raise


def cooperative_gain(curves: dict, pd_target: float) -> Optional[dict]:
    """
    Lowest SNR where both SCN and LOGICAL_OR reach pd_target, with the Pf each
    rule pays there; None if either rule is missing or they never both reach it.
    """
    scn, lo = curves.get(FusionRule.SCN), curves.get(FusionRule.LOGICAL_OR)
    if scn is None or lo is None:
        return None
    for p in scn.points:
        q = lo.pd_at(p.snr_db)
        if q is not None and p.pd >= pd_target and q >= pd_target:
            return {'snr_db': p.snr_db, 'scn_pf': scn.pf, 'or_pf': lo.pf}
    return None


def mean_cooperative_gain(gains: Sequence[Optional[dict]]) -> dict:
    """Average SCN and OR false-alarm rates over the runs that found a common SNR."""
    found = [g for g in gains if g is not None]
    if not found:
        return {'runs': len(gains), 'found': 0, 'scn_pf': None, 'or_pf': None, 'scn_not_worse': None}
    scn_pf = float(np.mean([g['scn_pf'] for g in found]))
    or_pf = float(np.mean([g['or_pf'] for g in found]))
    return {'runs': len(gains), 'found': len(found), 'scn_pf': scn_pf, 'or_pf': or_pf,
            'scn_not_worse': scn_pf <= or_pf}


def coop_eval(cfg: ExperimentConfig, coop_path: str = '', scn_path: str = '') -> dict:
    try:
        run = Run(cfg, 'coop-eval')
        with run.stage('coop-evaluate'):
            splits, _ = load_coop(coop_path or _input('', run, COOP_FILE))
            test = splits.test
            scn_file = scn_path or run.path(SCN_FILE)
            scn = load_scn(scn_file, reference_precision=cfg.reference_precision) if os.path.exists(scn_file) else None
            rules = [FusionRule.LOGICAL_OR, FusionRule.MAJORITY, FusionRule.LOGICAL_AND]
            if scn is not None:
                rules.append(FusionRule.SCN)
            curves = {r: coop_curve(r, test, scn) for r in rules}
            if not check_fusion_order(test):
                raise DLSenseError('fusion ordering OR >= MAJORITY >= AND violated')
            files = _write_curves(run, 'coop_curves', list(curves.values()))
            gain = cooperative_gain(curves, cfg.pd_target)
            res = dict(files, k=test.k, pf={r.value: c.pf for r, c in curves.items()},
                       common_snr_db=gain['snr_db'] if gain else None, cooperative_gain=gain)
        run.finish('complete')
        return res
    except Exception as e:
        add_traceback('coop_eval', e)
        raise


def run_experiment(cfg: ExperimentConfig) -> dict:
    """generate -> train -> evaluate in one output directory."""
    try:
        run = Run(cfg, 'experiment')
        bundle = {}
        with run.stage('generate'):
            bundle['generate'] = _generate(run)
        with run.stage('train'):
            bundle['train'] = _train(run, bundle['generate']['dataset'])
        with run.stage('evaluate'):
            bundle['evaluate'] = _evaluate(run, bundle['train']['checkpoint'], bundle['generate']['dataset'])
        bundle['manifest'] = run.finish('complete')
        return bundle
    except Exception as e:
        add_traceback('run_experiment', e)
        raise
