# dlsense/coopfuse.py
"""
Cooperative sensing with k nodes.

Every node sees the same primary transmission through its own Rayleigh
channel and noise, runs a local DetectNet and reports its probability pair.
The fusion centre either applies a hard rule to the node decisions or feeds
all reported pairs to SoftCombinationNet.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .curves import DetectionCurve, curve_from_decisions
from .detectnet import (EpochCallback, LabeledInputs, ProbPair, SensingModel, StopPolicy, TrainResult,
                        DetectNet, decisions_from_probs, train_two_stage)
from .errors import ValidationError
from .rng import RngStream
from .sigmod import (SPLIT_NAMES, ChannelDraw, DatasetSpec, Hypothesis, ModScheme, channel_components,
                     cscg, energy_normalize, frame_plan, modulate, pack_container, unpack_container)
from .tensornet import (FAST_DTYPE, REFERENCE_DTYPE, Checkpoint, LayerKind, LayerSpec, Network,
                        load_checkpoint, save_checkpoint)

logger = logging.getLogger(__name__)

SPCE_MAGIC = b'SPCE'
_COOP_KEY = 7


class FusionRule(str, enum.Enum):
    LOGICAL_OR = 'LOGICAL_OR'
    LOGICAL_AND = 'LOGICAL_AND'
    MAJORITY = 'MAJORITY'
    SCN = 'SCN'

    @classmethod
    def parse(cls, name: str) -> 'FusionRule':
        key = str(name).upper().replace('-', '_')
        aliases = {'OR': 'LOGICAL_OR', 'LO': 'LOGICAL_OR', 'AND': 'LOGICAL_AND', 'MAJ': 'MAJORITY'}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValidationError(f'unknown fusion rule {name!r}') from None


@dataclass(frozen=True)
class CoopExample:
    node_probs: Tuple[ProbPair, ...]
    label: Hypothesis
    snr_db: float

    def __post_init__(self):
        if len(self.node_probs) < 1:
            raise ValidationError('a cooperative example needs at least one node')

    @property
    def k(self) -> int:
        return len(self.node_probs)

    def as_array(self) -> np.ndarray:
        return np.asarray([[p.p0, p.p1] for p in self.node_probs], dtype=np.float64)


@dataclass
class CoopSet:
    """Column-wise cooperative examples of one split."""
    probs: np.ndarray       # (n, k, 2)
    labels: np.ndarray      # (n,) uint8
    snr_db: np.ndarray      # (n,) float64

    def __post_init__(self):
        if self.probs.ndim != 3 or self.probs.shape[2] != 2:
            raise ValidationError(f'node probabilities must be (n, k, 2), got {self.probs.shape}')
        if not len(self.probs) == len(self.labels) == len(self.snr_db):
            raise ValidationError('cooperative set columns differ in length')

    def __len__(self):
        return len(self.labels)

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    def __getitem__(self, i: int) -> CoopExample:
        pairs = tuple(ProbPair(float(a), float(b)) for a, b in self.probs[i].astype(np.float64))
        return CoopExample(pairs, Hypothesis(int(self.labels[i])), float(self.snr_db[i]))

    def node_decisions(self) -> np.ndarray:
        """(n, k) local hard decisions, tie to H0."""
        return (self.probs[:, :, 1] > self.probs[:, :, 0]).astype(np.uint8)

    def subset(self, idx) -> 'CoopSet':
        return CoopSet(self.probs[idx], self.labels[idx], self.snr_db[idx])

    @classmethod
    def from_examples(cls, examples: Sequence[CoopExample]) -> 'CoopSet':
        if not examples:
            raise ValidationError('no cooperative examples')
        k = examples[0].k
        if any(e.k != k for e in examples):
            raise ValidationError('inconsistent node count across examples')
        return cls(np.stack([e.as_array() for e in examples]).astype(np.float32),
                   np.asarray([int(e.label) for e in examples], np.uint8),
                   np.asarray([e.snr_db for e in examples], np.float64))


class CoopSplits(NamedTuple):
    train: CoopSet
    val: CoopSet
    test: CoopSet


# --- synthesis ---

def rayleigh_gain(g: np.random.Generator) -> complex:
    """CN(0, 1) channel coefficient: Rayleigh magnitude, E|h|^2 = 1, uniform phase."""
    return complex(cscg(g, 1, 1.0)[0])


def coop_frames(base: DatasetSpec, split: int, k: int, index: int, normalize: bool = True) -> np.ndarray:
    """
    (k, N) received frames of one cooperative example. Under H1 one symbol
    stream is shared by all nodes; gains and noise are independent per node.
    The nominal SNR is referenced to the transmitted power.
    """
    plan = frame_plan(base, split)
    label, snr = int(plan.labels[index]), float(plan.snr_db[index])
    g = RngStream(base.seed).child(split, _COOP_KEY, k, index).generator()
    n = base.sample_length
    out = np.empty((k, n), np.complex128)
    if label == Hypothesis.H0:
        for j in range(k):
            out[j] = cscg(g, n, 1.0)
    else:
        s = modulate(ModScheme(int(plan.mod_ids[index])), n, g, base.samples_per_symbol, base.rolloff,
                     base.span_symbols, base.mod_index, base.bt)
        for j in range(k):
            hs, w = channel_components(s, ChannelDraw(rayleigh_gain(g), snr, pre_fading=True), g)
            out[j] = hs + w
    if normalize:
        out = np.stack([energy_normalize(y) for y in out])
    return out


def _coop_chunk(base: DatasetSpec, split: int, k: int, start: int, stop: int) -> np.ndarray:
    return np.stack([coop_frames(base, split, k, i) for i in range(start, stop)]).astype(np.complex64)


def _node_probs(model: DetectNet, frames: np.ndarray) -> np.ndarray:
    return model.predict_proba(model.prepare(frames)).astype(np.float32)


def _node_models(node_models: Sequence[DetectNet], k: int, base: DatasetSpec) -> List[DetectNet]:
    models = list(node_models)
    if len(models) == 1:
        models = models * k
    if len(models) != k:
        raise ValidationError(f'need 1 shared or {k} per-node models, got {len(models)}')
    for m in models:
        if m.sample_length != base.sample_length:
            raise ValidationError(f'node model sample length {m.sample_length} != dataset {base.sample_length}')
    return models


def synth_coop_split(base: DatasetSpec, split: int, k: int, node_models: Sequence[DetectNet],
                     n_jobs: int = 1, chunk: int = 1000) -> CoopSet:
    if k < 1:
        raise ValidationError('k must be >= 1')
    models = _node_models(node_models, k, base)
    plan = frame_plan(base, split)
    n = base.counts[split]
    if n == 0:
        return CoopSet(np.zeros((0, k, 2), np.float32), np.zeros(0, np.uint8), np.zeros(0, np.float64))
    bounds = [(a, min(a + chunk, n)) for a in range(0, n, chunk)]
    frames = np.concatenate(Parallel(n_jobs=n_jobs)(
        delayed(_coop_chunk)(base, split, k, a, b) for a, b in bounds))
    probs = Parallel(n_jobs=n_jobs)(delayed(_node_probs)(models[j], frames[:, j]) for j in range(k))
    logger.debug('cooperative %s split: %d examples x %d nodes', SPLIT_NAMES[split], n, k)
    return CoopSet(np.stack(probs, axis=1), plan.labels.copy(), plan.snr_db.copy())


def synth_coop_dataset(base: DatasetSpec, k: int, node_models: Sequence[DetectNet],
                       n_jobs: int = 1) -> CoopSplits:
    base.validate()
    logger.info('synthesizing cooperative dataset: k=%d N=%d counts=%s seed=%d',
                k, base.sample_length, base.counts, base.seed)
    return CoopSplits(*(synth_coop_split(base, s, k, node_models, n_jobs) for s in range(3)))


# --- hard fusion ---

def fuse_hard_batch(rule: FusionRule, decisions: np.ndarray) -> np.ndarray:
    """Row-wise fusion of an (n, k) 0/1 decision matrix."""
    rule = FusionRule.parse(rule) if not isinstance(rule, FusionRule) else rule
    if rule == FusionRule.SCN:
        raise ValidationError('SCN is a learned fusion, not a hard rule')
    d = np.asarray(decisions).astype(bool)
    if d.ndim != 2 or d.shape[1] < 1:
        raise ValidationError('need an (n, k) decision matrix with k >= 1')
    if rule == FusionRule.LOGICAL_OR:
        out = d.any(axis=1)
    elif rule == FusionRule.LOGICAL_AND:
        out = d.all(axis=1)
    else:
        out = 2 * d.sum(axis=1) > d.shape[1]
    return out.astype(np.uint8)


def fuse_hard(rule: FusionRule, decisions: Sequence[Hypothesis]) -> Hypothesis:
    if len(decisions) < 1:
        raise ValidationError('fusion needs at least one decision')
    row = np.asarray([[int(d) for d in decisions]])
    return Hypothesis(int(fuse_hard_batch(rule, row)[0]))


# --- SoftCombinationNet ---

@dataclass(frozen=True)
class SCNConfig:
    k: int
    hidden1: int = 32
    hidden2: int = 8
    out: int = 2
    lr: float = 0.0003
    batch: int = 200
    dropout: float = 0.2
    reference_precision: bool = False

    def __post_init__(self):
        if min(self.k, self.hidden1, self.hidden2, self.batch) < 1:
            raise ValidationError('SCN sizes must be positive')
        if self.out != 2:
            raise ValidationError('SCN output must have 2 units')
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError('dropout ratio must lie in [0, 1)')

    @property
    def dtype(self):
        return REFERENCE_DTYPE if self.reference_precision else FAST_DTYPE


@dataclass
class SoftCombinationNet(SensingModel):
    config: SCNConfig
    network: Network

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def detector_id(self) -> str:
        return f'SCN(k={self.k})'

    def prepare(self, probs) -> np.ndarray:
        p = np.asarray(probs)
        if p.ndim == 2:
            p = p[None]
        if p.shape[1:] != (self.k, 2):
            raise ValidationError(f'SCN expects {self.k} node pairs, got shape {p.shape[1:]}')
        return p.reshape(len(p), 2 * self.k).astype(self.dtype)

    def inputs(self, data: CoopSet) -> LabeledInputs:
        return LabeledInputs(self.prepare(data.probs), np.asarray(data.labels, np.int64),
                             np.asarray(data.snr_db, np.float64))


def scn_layers(config: SCNConfig) -> List[LayerSpec]:
    p = config.dropout
    return [
        LayerSpec(LayerKind.DENSE, 'fc1', units=config.hidden1),
        LayerSpec(LayerKind.RELU, 'fc1_relu'),
        LayerSpec(LayerKind.DROPOUT, 'fc1_drop', rate=p),
        LayerSpec(LayerKind.DENSE, 'fc2', units=config.hidden2),
        LayerSpec(LayerKind.RELU, 'fc2_relu'),
        LayerSpec(LayerKind.DROPOUT, 'fc2_drop', rate=p),
        LayerSpec(LayerKind.DENSE, 'fc_out', units=config.out),
        LayerSpec(LayerKind.SOFTMAX, 'softmax'),
    ]


def scn_build(config: SCNConfig, seed: int = 0) -> SoftCombinationNet:
    net = Network(scn_layers(config), (2 * config.k,), dtype=config.dtype, seed=seed)
    return SoftCombinationNet(config, net)


def scn_build_train(config: SCNConfig, train: CoopSet, val: CoopSet, policy: StopPolicy,
                    seed: int = 0, on_epoch: Optional[EpochCallback] = None) -> TrainResult:
    for name, d in (('train', train), ('val', val)):
        if d.k != config.k:
            raise ValidationError(f'{name} set has k={d.k}, SCN configured for k={config.k}')
    model = scn_build(config, seed)
    logger.info('training SCN k=%d on %d examples', config.k, len(train))
    return train_two_stage(model, train, val, policy, seed, on_epoch)


def scn_infer(model: SoftCombinationNet, example: CoopExample) -> ProbPair:
    if example.k != model.k:
        raise ValidationError(f'example has {example.k} nodes, SCN expects {model.k}')
    p = model.predict_proba(model.prepare(example.as_array()))[0].astype(np.float64)
    return ProbPair(float(p[0]), float(p[1]))


def fused_decisions(rule: FusionRule, test: CoopSet, scn: Optional[SoftCombinationNet] = None) -> np.ndarray:
    rule = FusionRule.parse(rule) if not isinstance(rule, FusionRule) else rule
    if rule == FusionRule.SCN:
        if scn is None:
            raise ValidationError('SCN fusion needs a trained SoftCombinationNet')
        if scn.k != test.k:
            raise ValidationError(f'test set has k={test.k}, SCN expects {scn.k}')
        return decisions_from_probs(scn.predict_proba(scn.prepare(test.probs)))
    return fuse_hard_batch(rule, test.node_decisions())


def coop_curve(rule: FusionRule, test: CoopSet, scn: Optional[SoftCombinationNet] = None,
               detector_id: Optional[str] = None) -> DetectionCurve:
    rule = FusionRule.parse(rule) if not isinstance(rule, FusionRule) else rule
    dec = fused_decisions(rule, test, scn)
    return curve_from_decisions(detector_id or f'{rule.value}(k={test.k})', test.labels, dec, test.snr_db)


def check_fusion_order(test: CoopSet) -> bool:
    """OR >= MAJORITY >= AND holds for every example, hence for Pf and every Pd."""
    d = test.node_decisions()
    o, m, a = (fuse_hard_batch(r, d) for r in (FusionRule.LOGICAL_OR, FusionRule.MAJORITY, FusionRule.LOGICAL_AND))
    return bool(np.all(o >= m) and np.all(m >= a))


# --- SPCE container ---

def _coop_dtype(k: int) -> np.dtype:
    return np.dtype([('label', 'u1'), ('snr', '<i2'), ('k', 'u1'), ('probs', '<f4', (2 * k,))])


def coop_bytes(splits: CoopSplits, header: Optional[dict] = None) -> bytes:
    k = splits.train.k
    if any(s.k != k for s in splits):
        raise ValidationError('splits disagree on node count')
    if k > 255:
        raise ValidationError('SPCE stores k in one byte')
    head = dict(header or {})
    head.update({'k': k, 'split_sizes': [len(s) for s in splits]})
    parts = []
    for s in splits:
        snr = np.asarray(s.snr_db)
        if not np.all(snr == np.round(snr)):
            raise ValidationError('SPCE stores integer dB SNRs')
        rec = np.zeros(len(s), _coop_dtype(k))
        rec['label'] = s.labels
        rec['snr'] = snr.astype(np.int16)
        rec['k'] = k
        rec['probs'] = s.probs.reshape(len(s), 2 * k)
        parts.append(rec.tobytes())
    return pack_container(SPCE_MAGIC, head, b''.join(parts))


def save_coop(path, splits: CoopSplits, header: Optional[dict] = None) -> str:
    with open(path, 'wb') as f:
        f.write(coop_bytes(splits, header))
    return str(path)


def load_coop(path) -> Tuple[CoopSplits, dict]:
    with open(path, 'rb') as f:
        raw = f.read()
    header, body = unpack_container(raw, SPCE_MAGIC)
    k = int(header['k'])
    dt = _coop_dtype(k)
    sizes = header['split_sizes']
    if len(body) != sum(sizes) * dt.itemsize:
        raise ValidationError('SPCE payload length does not match header')
    rec = np.frombuffer(body, dtype=dt)
    if np.any(rec['k'] != k):
        raise ValidationError('SPCE record node count disagrees with header')
    out, start = [], 0
    for n in sizes:
        r = rec[start:start + n]
        start += n
        out.append(CoopSet(r['probs'].reshape(n, k, 2).copy(), r['label'].copy(), r['snr'].astype(np.float64)))
    return CoopSplits(*out), header


# --- SCN checkpoints ---

def save_scn(path, model: SoftCombinationNet, epoch: int = 0, metrics: Optional[dict] = None,
             meta: Optional[dict] = None) -> str:
    m = {'model': 'scn', 'config': asdict(model.config)}
    m.update(meta or {})
    return save_checkpoint(path, Checkpoint(model.network, epoch, metrics or {}, m))


def load_scn(path, reference_precision: Optional[bool] = None) -> SoftCombinationNet:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get('model') != 'scn':
        raise ValidationError(f'{path}: not a SoftCombinationNet checkpoint')
    cfg = dict(ckpt.meta['config'])
    if reference_precision is not None:
        cfg['reference_precision'] = bool(reference_precision)
    config = SCNConfig(**cfg)
    return SoftCombinationNet(config, ckpt.network.astype(config.dtype))
