# dlsense/detectnet.py
"""
DetectNet: the CLDNN spectrum-sensing detector, its DNN/CNN/LSTM comparison
models, inference and the two-stage CFAR-aware training strategy.

Stage 1 trains to convergence with early stopping on validation loss. Stage 2
continues from the best stage-1 weights and stops as soon as the validation
false-alarm rate falls into a configured interval, which is how the detector
is made to operate at a prescribed Pf.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np
from sklearn.metrics import accuracy_score

from .curves import DetectionCurve, curve_from_decisions, detection_by_snr, false_alarm_rate
from .errors import DivergenceError, ValidationError
from .rng import RngStream
from .sigmod import FrameSet, Hypothesis, energy_normalize, iq_to_channels
from .tensornet import (FAST_DTYPE, REFERENCE_DTYPE, AdamState, Checkpoint, LayerKind, LayerSpec,
                        Network, adam_step, load_checkpoint, save_checkpoint, softmax, softmax_cross_entropy)

logger = logging.getLogger(__name__)

ARCHITECTURES = ('cldnn', 'cnn', 'dnn', 'lstm')
DNN_UNITS = (256, 500, 250, 120)
EVAL_BATCH = 1000

_STAGE1_KEY = 1
_STAGE2_KEY = 2

EpochCallback = Callable[['EpochMetrics'], None]


@dataclass(frozen=True)
class DetectNetConfig:
    sample_length: int
    conv_filters: int = 60
    kernel: int = 10
    lstm_cells: int = 128
    fc1_units: int = 128
    fc2_units: Optional[int] = None
    out_units: int = 2
    dropout: float = 0.2
    lr: float = 0.0003
    batch: int = 200
    arch: str = 'cldnn'
    reference_precision: bool = False

    def __post_init__(self):
        if self.fc2_units is None:
            object.__setattr__(self, 'fc2_units', self.sample_length)
        self.validate()

    def validate(self):
        if self.arch not in ARCHITECTURES:
            raise ValidationError(f'unknown architecture {self.arch!r}; choose from {", ".join(ARCHITECTURES)}')
        sizes = (self.sample_length, self.conv_filters, self.kernel, self.lstm_cells,
                 self.fc1_units, self.fc2_units, self.batch)
        if any(int(s) < 1 for s in sizes):
            raise ValidationError('DetectNet sizes must all be positive')
        if self.out_units != 2:
            raise ValidationError('out_units must be 2 (one per hypothesis)')
        if self.fc2_units != self.sample_length:
            raise ValidationError(f'fc2_units ({self.fc2_units}) must equal sample_length ({self.sample_length})')
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError('dropout ratio must lie in [0, 1)')
        if not self.lr > 0:
            raise ValidationError('learning rate must be positive')

    @property
    def dtype(self):
        return REFERENCE_DTYPE if self.reference_precision else FAST_DTYPE

    def with_(self, **changes) -> 'DetectNetConfig':
        d = asdict(self)
        d.update(changes)
        if 'sample_length' in changes and 'fc2_units' not in changes:
            d['fc2_units'] = None
        return DetectNetConfig(**d)


@dataclass(frozen=True)
class ProbPair:
    p0: float
    p1: float

    def __post_init__(self):
        if not (0.0 <= self.p0 <= 1.0 and 0.0 <= self.p1 <= 1.0) or abs(self.p0 + self.p1 - 1.0) > 1e-6:
            raise ValidationError(f'invalid probability pair ({self.p0}, {self.p1})')


@dataclass
class EpochMetrics:
    epoch: int
    val_loss: float
    val_acc: float
    pf: float
    pd_by_snr: Dict[float, float] = field(default_factory=dict)
    stage: str = ''
    train_loss: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.pf <= 1.0 or any(not 0.0 <= v <= 1.0 for v in self.pd_by_snr.values()):
            raise ValidationError('epoch metrics probabilities must lie in [0, 1]')

    def to_dict(self) -> dict:
        d = asdict(self)
        d['pd_by_snr'] = {repr(float(k)): v for k, v in self.pd_by_snr.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> 'EpochMetrics':
        d = dict(d)
        d['pd_by_snr'] = {float(k): float(v) for k, v in d.get('pd_by_snr', {}).items()}
        return cls(**d)


def append_epoch_log(path, metrics: EpochMetrics):
    """One EpochMetrics JSON object per line."""
    with open(path, 'a', encoding='utf-8', newline='\n') as f:
        f.write(metrics.to_json() + '\n')


def read_epoch_log(path) -> List[EpochMetrics]:
    with open(path, 'r', encoding='utf-8') as f:
        return [EpochMetrics.from_dict(json.loads(line)) for line in f if line.strip()]


class LabeledInputs(NamedTuple):
    """Network-ready inputs with labels and nominal SNRs."""
    x: np.ndarray
    labels: np.ndarray
    snr_db: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> 'LabeledInputs':
        return LabeledInputs(self.x[idx], self.labels[idx], self.snr_db[idx])


class SensingModel:
    """
    Common surface of trainable detectors: a Network, the optimiser settings
    and a conversion from a dataset to LabeledInputs. Subclasses are
    dataclasses so training can swap the network with ``replace``.
    """
    network: Network

    @property
    def lr(self) -> float:
        return self.config.lr

    @property
    def batch(self) -> int:
        return self.config.batch

    @property
    def dtype(self):
        return self.network.dtype

    @property
    def detector_id(self) -> str:
        raise NotImplementedError

    def inputs(self, data) -> LabeledInputs:
        raise NotImplementedError

    def with_network(self, network: Network):
        return replace(self, network=network)

    def logits(self, x: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        out = [self.network.forward(x[a:a + batch_size], 'eval', logits=True)[0]
               for a in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, 2), dtype=self.dtype)
        return np.concatenate(out)

    def predict_proba(self, x: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
        return self.network.predict_proba(x, batch_size)


@dataclass
class DetectNet(SensingModel):
    config: DetectNetConfig
    network: Network

    @property
    def sample_length(self) -> int:
        return self.config.sample_length

    @property
    def detector_id(self) -> str:
        return f'{self.config.arch.upper()}(N={self.sample_length})'

    def prepare(self, iq) -> np.ndarray:
        iq = np.atleast_2d(np.asarray(iq))
        if iq.shape[-1] != self.sample_length:
            raise ValidationError(f'frame length {iq.shape[-1]} != model sample length {self.sample_length}')
        return iq_to_channels(iq, self.dtype)

    def inputs(self, data: FrameSet) -> LabeledInputs:
        return LabeledInputs(self.prepare(data.iq), np.asarray(data.labels, np.int64),
                             np.asarray(data.snr_db, np.float64))

    def to_checkpoint(self, epoch: int = 0, metrics: Optional[dict] = None, meta: Optional[dict] = None) -> Checkpoint:
        m = {'model': 'detectnet', 'config': asdict(self.config)}
        m.update(meta or {})
        return Checkpoint(self.network, epoch, metrics or {}, m)


# --- architectures ---

def _block(kind, name, units=0, kernel=0, dropout=0.0, **kw) -> List[LayerSpec]:
    out = [LayerSpec(kind, name, units=units, kernel=kernel, **kw)]
    if kind not in (LayerKind.LSTM,):
        out.append(LayerSpec(LayerKind.RELU, f'{name}_relu'))
    out.append(LayerSpec(LayerKind.DROPOUT, f'{name}_drop', rate=dropout))
    return out


def _head(n_out: int = 2) -> List[LayerSpec]:
    return [LayerSpec(LayerKind.DENSE, 'fc_out', units=n_out), LayerSpec(LayerKind.SOFTMAX, 'softmax')]


def cldnn_layers(config: DetectNetConfig) -> List[LayerSpec]:
    c, p = config, config.dropout
    return (_block(LayerKind.CONV1D, 'conv1', c.conv_filters, c.kernel, p)
            + _block(LayerKind.CONV1D, 'conv2', c.conv_filters, c.kernel, p)
            + _block(LayerKind.TIME_DENSE, 'fc1', c.fc1_units, dropout=p)
            + _block(LayerKind.LSTM, 'lstm1', c.lstm_cells, dropout=p, return_sequences=True)
            + _block(LayerKind.LSTM, 'lstm2', c.lstm_cells, dropout=p, return_sequences=False)
            + _block(LayerKind.DENSE, 'fc2', c.fc2_units, dropout=p)
            + _head(c.out_units))


def baseline_layers(arch: str, config: DetectNetConfig) -> List[LayerSpec]:
    c, p = config, config.dropout
    if arch == 'cldnn':
        return cldnn_layers(config)
    if arch == 'dnn':
        layers = [LayerSpec(LayerKind.FLATTEN, 'flatten')]
        for i, u in enumerate(DNN_UNITS, start=1):
            layers += _block(LayerKind.DENSE, f'fc{i}', u, dropout=p)
        return layers + _head(c.out_units)
    if arch == 'cnn':
        return (_block(LayerKind.CONV1D, 'conv1', c.conv_filters, c.kernel, p)
                + _block(LayerKind.CONV1D, 'conv2', c.conv_filters, c.kernel, p)
                + [LayerSpec(LayerKind.FLATTEN, 'flatten')]
                + _block(LayerKind.DENSE, 'fc1', c.fc1_units, dropout=p)
                + _head(c.out_units))
    if arch == 'lstm':
        return (_block(LayerKind.LSTM, 'lstm1', c.lstm_cells, dropout=p, return_sequences=True)
                + _block(LayerKind.LSTM, 'lstm2', c.lstm_cells, dropout=p, return_sequences=False)
                + _head(c.out_units))
    raise ValidationError(f'unknown architecture {arch!r}')


def build(config: DetectNetConfig, seed: int = 0) -> DetectNet:
    """DetectNet for 2-channel (I, Q) input of config.sample_length time steps."""
    config.validate()
    net = Network(baseline_layers(config.arch, config), (config.sample_length, 2),
                  dtype=config.dtype, seed=seed)
    logger.info('built %s for N=%d: %d parameters, %d weighted layers', config.arch.upper(),
                config.sample_length, net.param_count(), len(net.weighted_layers()))
    return DetectNet(config, net)


def build_baseline(arch: str, config: DetectNetConfig, seed: int = 0) -> DetectNet:
    return build(config.with_(arch=arch), seed)


def save_detectnet(path, model: DetectNet, epoch: int = 0, metrics: Optional[dict] = None,
                   meta: Optional[dict] = None) -> str:
    return save_checkpoint(path, model.to_checkpoint(epoch, metrics, meta))


def detectnet_from_checkpoint(ckpt: Checkpoint, reference_precision: Optional[bool] = None,
                              source: str = 'checkpoint') -> DetectNet:
    if ckpt.meta.get('model') != 'detectnet':
        raise ValidationError(f'{source}: not a DetectNet checkpoint')
    cfg = dict(ckpt.meta['config'])
    if reference_precision is not None:
        cfg['reference_precision'] = bool(reference_precision)
    config = DetectNetConfig(**cfg)
    return DetectNet(config, ckpt.network.astype(config.dtype))


def load_detectnet(path, reference_precision: Optional[bool] = None) -> DetectNet:
    return detectnet_from_checkpoint(load_checkpoint(path), reference_precision, str(path))


# --- inference ---

def infer(model: DetectNet, frame, normalize: bool = True) -> ProbPair:
    """Eval-mode softmax pair for one frame; energy normalization at the entry point."""
    y = np.asarray(frame)
    if y.ndim != 1 or len(y) != model.sample_length:
        raise ValidationError(f'frame length {y.shape} != model sample length {model.sample_length}')
    if normalize:
        y = energy_normalize(y)
    p = model.predict_proba(model.prepare(y))[0].astype(np.float64)
    return ProbPair(float(p[0]), float(p[1]))


def decide(p: ProbPair) -> Hypothesis:
    """argmax with ties going to H0."""
    return Hypothesis.H1 if p.p1 > p.p0 else Hypothesis.H0


def decisions_from_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs)
    return (probs[:, 1] > probs[:, 0]).astype(np.uint8)


def _as_inputs(model: SensingModel, data) -> LabeledInputs:
    return data if isinstance(data, LabeledInputs) else model.inputs(data)


def evaluate(model: SensingModel, data, epoch: int = 0, stage: str = '',
             train_loss: Optional[float] = None) -> EpochMetrics:
    d = _as_inputs(model, data)
    if len(d) == 0:
        raise ValidationError('empty validation set')
    if not (np.any(d.labels == 0) and np.any(d.labels == 1)):
        raise ValidationError('validation set must contain both H0 and H1 frames')
    z = model.logits(d.x).astype(np.float64)
    loss, _ = softmax_cross_entropy(z, d.labels)
    dec = decisions_from_probs(softmax(z))
    pf, _ = false_alarm_rate(d.labels, dec)
    pd = {p.snr_db: p.pd for p in detection_by_snr(d.labels, dec, d.snr_db)}
    return EpochMetrics(epoch, loss, float(accuracy_score(d.labels, dec)), float(pf), pd, stage, train_loss)


def epoch_metrics(model: SensingModel, validation) -> EpochMetrics:
    return evaluate(model, validation)


def dl_curve(model: SensingModel, test, detector_id: Optional[str] = None) -> DetectionCurve:
    d = _as_inputs(model, test)
    dec = decisions_from_probs(model.predict_proba(d.x))
    return curve_from_decisions(detector_id or model.detector_id, d.labels, dec, d.snr_db)


# --- training ---

@dataclass(frozen=True)
class StopPolicy:
    stage1_patience: int = 6
    stage1_max_epochs: int = 100
    pf_low: float = 0.07
    pf_high: float = 0.09
    stage2_max_epochs: int = 50

    def __post_init__(self):
        if self.stage1_patience < 0 or self.stage1_max_epochs < 1 or self.stage2_max_epochs < 0:
            raise ValidationError('invalid epoch limits')
        if not 0.0 <= self.pf_low < self.pf_high <= 1.0:
            raise ValidationError(f'Pf interval [{self.pf_low}, {self.pf_high}] is not a proper sub-interval of [0, 1]')

    def pf_in_interval(self, pf: float) -> bool:
        return self.pf_low <= pf <= self.pf_high

    def pf_distance(self, pf: float) -> float:
        return max(self.pf_low - pf, pf - self.pf_high, 0.0)


class EarlyStopping:
    """Stops once the monitored loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.wait = 0

    def update(self, loss: float) -> bool:
        """Record one epoch; True when training should stop."""
        if loss < self.best:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainResult:
    model: SensingModel
    metrics: EpochMetrics
    history: List[EpochMetrics]
    epochs_run: int
    in_interval: bool = True

    @property
    def out_of_interval(self) -> bool:
        return not self.in_interval


def train_epoch(model: SensingModel, data: LabeledInputs, adam: AdamState,
                stream: RngStream, epoch: int = 0):
    """One shuffled pass of minibatch Adam; returns (network, adam, mean loss)."""
    net = model.network.copy()
    x = np.asarray(data.x, dtype=net.dtype)
    n = len(data)
    order = stream.child(0).generator().permutation(n)
    total = 0.0
    for b, a in enumerate(range(0, n, model.batch)):
        idx = order[a:a + model.batch]
        loss, grads = net.loss_and_grads(x[idx], data.labels[idx], 'train', stream.child(1, b))
        if not math.isfinite(loss):
            raise DivergenceError(epoch, b, loss)
        net.params, adam = adam_step(net.params, grads, adam, model.lr)
        total += loss * len(idx)
    return net, adam, total / max(n, 1)


def _emit(metrics: EpochMetrics, on_epoch: Optional[EpochCallback]):
    logger.info('%s epoch %d: val_loss=%.4f val_acc=%.4f pf=%.4f', metrics.stage, metrics.epoch,
                metrics.val_loss, metrics.val_acc, metrics.pf)
    if on_epoch is not None:
        on_epoch(metrics)


def train_stage1(model: SensingModel, train, val, policy: StopPolicy, seed: int = 0,
                 on_epoch: Optional[EpochCallback] = None) -> TrainResult:
    tr, va = _as_inputs(model, train), _as_inputs(model, val)
    if len(tr) == 0:
        raise ValidationError('empty training set')
    stream = RngStream(seed).child(_STAGE1_KEY)
    stopper = EarlyStopping(policy.stage1_patience)
    adam = AdamState()
    current = model
    best, best_metrics, history = model, None, []
    for epoch in range(1, policy.stage1_max_epochs + 1):
        net, adam, train_loss = train_epoch(current, tr, adam, stream.child(epoch), epoch)
        current = current.with_network(net)
        m = evaluate(current, va, epoch, 'stage1', train_loss)
        history.append(m)
        _emit(m, on_epoch)
        if not math.isfinite(m.val_loss):
            raise DivergenceError(epoch, -1, m.val_loss)
        if best_metrics is None or m.val_loss < best_metrics.val_loss:
            best, best_metrics = current, m
        if stopper.update(m.val_loss):
            logger.info('stage1 early stop after epoch %d (best epoch %d)', epoch, best_metrics.epoch)
            break
    return TrainResult(best, best_metrics, history, len(history))


def train_stage2(model: SensingModel, train, val, policy: StopPolicy, seed: int = 0,
                 on_epoch: Optional[EpochCallback] = None) -> TrainResult:
    """
    Continue training with a fresh optimiser until validation Pf falls in
    [pf_low, pf_high]. On exhaustion the epoch closest to the interval is
    returned with in_interval False.
    """
    tr, va = _as_inputs(model, train), _as_inputs(model, val)
    m = evaluate(model, va, 0, 'stage2')
    history = [m]
    _emit(m, on_epoch)
    if policy.pf_in_interval(m.pf):
        return TrainResult(model, m, history, 0, True)
    stream = RngStream(seed).child(_STAGE2_KEY)
    adam = AdamState()
    current = model
    closest, closest_metrics = model, m
    for epoch in range(1, policy.stage2_max_epochs + 1):
        net, adam, train_loss = train_epoch(current, tr, adam, stream.child(epoch), epoch)
        current = current.with_network(net)
        m = evaluate(current, va, epoch, 'stage2', train_loss)
        history.append(m)
        _emit(m, on_epoch)
        if policy.pf_in_interval(m.pf):
            return TrainResult(current, m, history, epoch, True)
        if policy.pf_distance(m.pf) < policy.pf_distance(closest_metrics.pf):
            closest, closest_metrics = current, m
    logger.warning('stage2 exhausted %d epochs without Pf in [%g, %g]; closest pf=%.4f at epoch %d',
                   policy.stage2_max_epochs, policy.pf_low, policy.pf_high, closest_metrics.pf,
                   closest_metrics.epoch)
    return TrainResult(closest, closest_metrics, history, policy.stage2_max_epochs, False)


def train_two_stage(model: SensingModel, train, val, policy: StopPolicy, seed: int = 0,
                    on_epoch: Optional[EpochCallback] = None) -> TrainResult:
    tr, va = _as_inputs(model, train), _as_inputs(model, val)
    first = train_stage1(model, tr, va, policy, seed, on_epoch)
    second = train_stage2(first.model, tr, va, policy, seed, on_epoch)
    second.history = first.history + second.history
    return second
