# dlsense/config.py
"""
Experiment configuration: one flat key-value document mirroring
ExperimentConfig. CLI flags override file values.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Tuple

import yaml

from .coopfuse import SCNConfig
from .detectnet import DetectNetConfig, StopPolicy
from .errors import ValidationError
from .sigmod import DatasetSpec, ModScheme

# keys that do not change results and are left out of the hash
_UNHASHED = ('out', 'n_jobs')


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = 'out'
    n_jobs: int = 1
    reference_precision: bool = False

    # dataset
    schemes: str = 'QAM16'
    sample_length: int = 128
    samples_per_symbol: int = 8
    snr_min: float = -20.0
    snr_max: float = 20.0
    snr_step: float = 1.0
    n_train: int = 48000
    n_val: int = 16000
    n_test: int = 16000
    positive_fraction: float = 0.5

    # detector
    arch: str = 'cldnn'
    conv_filters: int = 60
    kernel: int = 10
    lstm_cells: int = 128
    fc1_units: int = 128
    dropout: float = 0.2
    lr: float = 0.0003
    batch: int = 200

    # training policy
    patience: int = 6
    max_epochs: int = 100
    pf_low: float = 0.07
    pf_high: float = 0.09
    stage2_max_epochs: int = 50

    # evaluation
    pd_target: float = 0.9
    pf_target: float = 0.0592
    ed_trials: int = 10000
    m_samples: float = math.inf

    # cooperation
    k: int = 2
    scn_hidden1: int = 32
    scn_hidden2: int = 8

    # inputs produced by earlier stages; empty means "the default file in out"
    dataset: str = ''
    checkpoint: str = ''

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.snr_step <= 0 or self.snr_max < self.snr_min:
            raise ValidationError('SNR range must satisfy snr_min <= snr_max with a positive step')
        if self.k < 1:
            raise ValidationError('k must be >= 1')
        if self.ed_trials < 1:
            raise ValidationError('ed_trials must be positive')
        if not 0.0 < self.pd_target < 1.0 or not 0.0 < self.pf_target < 1.0:
            raise ValidationError('pd_target and pf_target must lie in (0, 1)')
        if not self.m_samples >= 1:
            raise ValidationError('m_samples must be >= 1 (use .inf for known noise)')
        self.scheme_list()

    def with_(self, **changes) -> 'ExperimentConfig':
        changes = {k: v for k, v in changes.items() if v is not None}
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ValidationError(f'unknown config keys: {", ".join(sorted(unknown))}')
        return replace(self, **changes)

    def scheme_list(self) -> Tuple[ModScheme, ...]:
        return tuple(ModScheme.parse(s.strip()) for s in self.schemes.split(',') if s.strip())

    def snr_grid(self) -> Tuple[float, ...]:
        count = int(math.floor((self.snr_max - self.snr_min) / self.snr_step + 1e-9)) + 1
        return tuple(round(self.snr_min + i * self.snr_step, 10) for i in range(count))

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            schemes=self.scheme_list(),
            sample_length=self.sample_length,
            samples_per_symbol=self.samples_per_symbol,
            snr_grid=self.snr_grid(),
            counts=(self.n_train, self.n_val, self.n_test),
            positive_fraction=self.positive_fraction,
            seed=self.seed,
        )

    def detectnet_config(self) -> DetectNetConfig:
        return DetectNetConfig(
            sample_length=self.sample_length, conv_filters=self.conv_filters, kernel=self.kernel,
            lstm_cells=self.lstm_cells, fc1_units=self.fc1_units, dropout=self.dropout, lr=self.lr,
            batch=self.batch, arch=self.arch, reference_precision=self.reference_precision,
        )

    def stop_policy(self) -> StopPolicy:
        return StopPolicy(self.patience, self.max_epochs, self.pf_low, self.pf_high, self.stage2_max_epochs)

    def scn_config(self) -> SCNConfig:
        return SCNConfig(self.k, self.scn_hidden1, self.scn_hidden2, lr=self.lr, batch=self.batch,
                         dropout=self.dropout, reference_precision=self.reference_precision)


def _coerce(name: str, default, value):
    if isinstance(value, (dict, list, tuple, set)):
        raise ValidationError(f'{name}: config values must be scalars')
    if value is None:
        return default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f'{name}: expected true/false, got {value!r}')
        return value
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ValidationError(f'{name}: expected a number, got {value!r}') from None
    return str(value)


def config_from_mapping(data: dict, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    if not isinstance(data, dict):
        raise ValidationError('config document must be a flat key-value mapping')
    defaults = {f.name: getattr(base, f.name) for f in fields(base)}
    unknown = set(data) - set(defaults)
    if unknown:
        raise ValidationError(f'unknown config keys: {", ".join(sorted(map(str, unknown)))}')
    return replace(base, **{k: _coerce(k, defaults[k], v) for k, v in data.items()})


def load_config(path) -> ExperimentConfig:
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ValidationError(f'{path}: not a valid key-value document ({e})') from None
    return config_from_mapping(data or {})


def config_hash(cfg: ExperimentConfig) -> str:
    d = {k: v for k, v in asdict(cfg).items() if k not in _UNHASHED}
    canon = json.dumps(d, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canon.encode('utf-8')).hexdigest()


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(asdict(cfg), sort_keys=True)
