# dlsense/sigmod.py
"""
Signal synthesis and dataset assembly.

- constellation mapping, root-raised-cosine shaping and continuous-phase FSK
- channel application y(n) = h s(n) + w(n) with CSCG noise
- energy normalization
- labeled train/val/test synthesis with per-frame seeded substreams
- the SPSD dataset container
"""
from __future__ import annotations

import enum
import json
import logging
import math
import struct
from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import signal

from .errors import ValidationError
from .rng import RngStream

logger = logging.getLogger(__name__)

IQFrame = np.ndarray

DEFAULT_SPS = 8
DEFAULT_ROLLOFF = 0.35
DEFAULT_SPAN = 8
DEFAULT_MOD_INDEX = 0.5
DEFAULT_BT = 0.3
GAUSSIAN_SPAN = 4
NONE_MOD_ID = 255

SPLIT_NAMES = ('train', 'val', 'test')
_ORDER_KEY = 0
_FRAME_KEY = 1

SPSD_MAGIC = b'SPSD'
SPSD_VERSION = 1


class ModScheme(enum.IntEnum):
    BPSK = 0
    QPSK = 1
    PSK8 = 2
    CPFSK = 3
    QAM16 = 4
    QAM64 = 5
    GFSK = 6
    PAM4 = 7

    @property
    def is_fsk(self) -> bool:
        return self in (ModScheme.CPFSK, ModScheme.GFSK)

    @classmethod
    def parse(cls, name) -> 'ModScheme':
        if isinstance(name, ModScheme):
            return name
        key = str(name).strip().upper()
        if key == '8PSK':
            key = 'PSK8'
        try:
            return cls[key]
        except KeyError:
            raise ValidationError(f'unknown modulation scheme {name!r}') from None


class Hypothesis(enum.IntEnum):
    H0 = 0
    H1 = 1


def _pam_levels(m: int) -> np.ndarray:
    return np.arange(-(m - 1), m, 2, dtype=np.float64)


def _square_qam(m: int) -> np.ndarray:
    side = int(round(math.sqrt(m)))
    levels = _pam_levels(side)
    k = np.arange(m)
    pts = levels[k % side] + 1j * levels[k // side]
    return pts


@lru_cache(maxsize=None)
def constellation(scheme: ModScheme) -> np.ndarray:
    """Unit average energy constellation of a linear scheme, indexed by symbol id."""
    scheme = ModScheme(scheme)
    if scheme == ModScheme.BPSK:
        pts = np.array([1.0 + 0j, -1.0 + 0j])
    elif scheme == ModScheme.QPSK:
        pts = np.exp(1j * (np.pi / 4 + np.arange(4) * np.pi / 2))
    elif scheme == ModScheme.PSK8:
        pts = np.exp(1j * 2 * np.pi * np.arange(8) / 8)
    elif scheme == ModScheme.QAM16:
        pts = _square_qam(16)
    elif scheme == ModScheme.QAM64:
        pts = _square_qam(64)
    elif scheme == ModScheme.PAM4:
        pts = _pam_levels(4).astype(np.complex128)
    else:
        raise ValidationError(f'{scheme.name} has no constellation; use fsk_modulate')
    pts = pts / np.sqrt(np.mean(np.abs(pts) ** 2))
    pts.setflags(write=False)
    return pts


def map_symbols(scheme: ModScheme, symbol_indices: Sequence[int]) -> np.ndarray:
    scheme = ModScheme(scheme)
    if scheme.is_fsk:
        raise ValidationError(f'{scheme.name} is frequency-shift keyed; use fsk_modulate')
    pts = constellation(scheme)
    idx = np.asarray(symbol_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(pts)):
        raise ValidationError(f'symbol index out of range for {scheme.name} (size {len(pts)})')
    return pts[idx]


def rrc_taps(sps: int, rolloff: float, span_symbols: int) -> np.ndarray:
    """
    Root-raised-cosine FIR taps, span*sps+1 long, scaled so that i.i.d.
    unit-energy symbols upsampled by sps come out at unit average power.
    """
    beta = float(rolloff)
    t = np.arange(-span_symbols * sps / 2, span_symbols * sps / 2 + 1) / sps
    b = np.zeros(len(t))

    centre = np.isclose(t, 0.0)
    b[centre] = 1.0 - beta + 4 * beta / np.pi

    edge = np.abs(np.abs(4 * beta * t) - 1.0) < np.sqrt(np.finfo(float).eps)
    b[edge] = beta / np.sqrt(2) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
                                   + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta)))

    rest = ~(centre | edge)
    tr = t[rest]
    b[rest] = (np.sin(np.pi * tr * (1 - beta)) + 4 * beta * tr * np.cos(np.pi * tr * (1 + beta))) / (
        np.pi * tr * (1 - (4 * beta * tr) ** 2))

    return b * np.sqrt(sps / np.sum(b ** 2))


def _center_crop(x: np.ndarray, length: int, margin: int) -> np.ndarray:
    if len(x) - 2 * margin < length:
        raise ValidationError(
            f'too few samples to fill a {length}-sample frame after trimming '
            f'{margin} transient samples each side (have {len(x)})')
    start = (len(x) - length) // 2
    return x[start:start + length]


def pulse_shape(symbols: Sequence[complex], sps: int, rolloff: float = DEFAULT_ROLLOFF,
                span_symbols: int = DEFAULT_SPAN, sample_length: Optional[int] = None) -> IQFrame:
    """
    RRC interpolation at sps samples/symbol. Symbol k peaks at output index k*sps.
    With sample_length, the result is center-cropped after trimming span symbols
    of transient on each side.
    """
    if sps < 1:
        raise ValidationError('sps must be >= 1')
    if not 0 < rolloff <= 1:
        raise ValidationError('rolloff must lie in (0, 1]')
    if span_symbols < 2:
        raise ValidationError('span must be >= 2 symbols')
    a = np.asarray(symbols, dtype=np.complex128)
    taps = rrc_taps(sps, rolloff, span_symbols)
    delay = (len(taps) - 1) // 2
    full = signal.upfirdn(taps, a, up=sps)
    y = full[delay:delay + len(a) * sps]
    if sample_length is None:
        return y
    return _center_crop(y, sample_length, span_symbols * sps)


def gaussian_taps(sps: int, bt: float, span_symbols: int = GAUSSIAN_SPAN) -> np.ndarray:
    """Gaussian frequency pulse, odd length, unit sum."""
    a = np.sqrt(np.log(2) / 2) / bt
    n = span_symbols * sps + 1
    t = (np.arange(n) - (n - 1) / 2) / sps
    g = np.sqrt(np.pi) / a * np.exp(-(np.pi * t / a) ** 2)
    return g / np.sum(g)


def fsk_frequency(scheme: ModScheme, symbol_indices: Sequence[int], sps: int,
                  bt: float = DEFAULT_BT) -> np.ndarray:
    """Normalized instantaneous frequency in units of +-1 (before mod_index/2 scaling)."""
    scheme = ModScheme(scheme)
    if not scheme.is_fsk:
        raise ValidationError(f'{scheme.name} is not an FSK scheme')
    if sps < 1:
        raise ValidationError('sps must be >= 1')
    bits = np.asarray(symbol_indices, dtype=np.int64)
    if bits.size and not np.all((bits == 0) | (bits == 1)):
        raise ValidationError('FSK symbol indices must be binary')
    nrz = np.repeat(2.0 * bits - 1.0, sps)
    if scheme == ModScheme.GFSK:
        g = gaussian_taps(sps, bt)
        d = (len(g) - 1) // 2
        nrz = np.convolve(nrz, g)[d:d + len(nrz)]
    return nrz


def fsk_modulate(scheme: ModScheme, symbol_indices: Sequence[int], sps: int,
                 mod_index: float = DEFAULT_MOD_INDEX, bt: float = DEFAULT_BT,
                 sample_length: Optional[int] = None, margin_symbols: int = 0) -> IQFrame:
    """Continuous-phase FSK; bit 1 -> +mod_index/2 * symbol rate, bit 0 -> -mod_index/2."""
    freq = fsk_frequency(scheme, symbol_indices, sps, bt)
    phase = np.cumsum(np.pi * mod_index * freq / sps)
    y = np.exp(1j * phase)
    if sample_length is None:
        return y
    return _center_crop(y, sample_length, margin_symbols * sps)


def modulate(scheme: ModScheme, n: int, g: np.random.Generator, sps: int = DEFAULT_SPS,
             rolloff: float = DEFAULT_ROLLOFF, span_symbols: int = DEFAULT_SPAN,
             mod_index: float = DEFAULT_MOD_INDEX, bt: float = DEFAULT_BT) -> IQFrame:
    """n clean baseband samples of i.i.d. random symbols, transients trimmed."""
    scheme = ModScheme(scheme)
    n_sym = -(-n // sps) + 2 * span_symbols + 1
    if scheme.is_fsk:
        bits = g.integers(0, 2, size=n_sym)
        return fsk_modulate(scheme, bits, sps, mod_index, bt, sample_length=n, margin_symbols=span_symbols)
    idx = g.integers(0, len(constellation(scheme)), size=n_sym)
    return pulse_shape(map_symbols(scheme, idx), sps, rolloff, span_symbols, sample_length=n)


@dataclass(frozen=True)
class ChannelDraw:
    """Flat channel for one frame. pre_fading references snr_db to the transmitted power."""
    gain: complex = 1.0 + 0j
    snr_db: float = math.inf
    pre_fading: bool = False


def cscg(g: np.random.Generator, n: int, power: float) -> np.ndarray:
    """Circularly symmetric complex Gaussian samples with E|w|^2 = power."""
    scale = math.sqrt(power / 2.0)
    return scale * (g.standard_normal(n) + 1j * g.standard_normal(n))


def noise_power_for(frame: IQFrame, draw: ChannelDraw) -> float:
    """Per-complex-sample noise power 2*sigma_w^2 implied by a channel draw."""
    x = np.asarray(frame)
    p_s = float(np.mean(np.abs(x.astype(np.complex128)) ** 2)) if x.size else 0.0
    if not np.isfinite(p_s) or p_s <= 0.0:
        raise ValidationError('input frame has zero or non-finite power')
    if math.isinf(draw.snr_db) and draw.snr_db > 0:
        return 0.0
    gain2 = abs(draw.gain) ** 2
    ref = p_s if (draw.pre_fading or gain2 == 0.0) else gain2 * p_s
    return ref / 10.0 ** (draw.snr_db / 10.0)


def channel_components(frame: IQFrame, draw: ChannelDraw, g: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """(h*s(n), w(n)) for one frame."""
    s = np.asarray(frame, dtype=np.complex128)
    power = noise_power_for(s, draw)
    w = cscg(g, len(s), power) if power > 0 else np.zeros(len(s), dtype=np.complex128)
    return complex(draw.gain) * s, w


def apply_channel(frame: IQFrame, draw: ChannelDraw, g: np.random.Generator) -> IQFrame:
    hs, w = channel_components(frame, draw, g)
    return hs + w


def energy_normalize(frame: IQFrame) -> IQFrame:
    y = np.asarray(frame, dtype=np.complex128)
    p = float(np.mean(np.abs(y) ** 2)) if y.size else 0.0
    if p <= 0.0:
        raise ValidationError('cannot energy-normalize an all-zero frame')
    return y / math.sqrt(p)


def uniform_phase_gain(g: np.random.Generator) -> complex:
    return complex(np.exp(1j * g.uniform(0.0, 2 * np.pi)))


@dataclass
class LabeledFrame:
    frame: IQFrame
    label: Hypothesis
    mod_id: Optional[ModScheme]
    snr_db: float


@dataclass(frozen=True)
class DatasetSpec:
    schemes: Tuple[ModScheme, ...]
    sample_length: int
    samples_per_symbol: int = DEFAULT_SPS
    snr_grid: Tuple[float, ...] = tuple(float(s) for s in range(-20, 21))
    counts: Tuple[int, int, int] = (48000, 16000, 16000)
    positive_fraction: float = 0.5
    seed: int = 0
    rolloff: float = DEFAULT_ROLLOFF
    span_symbols: int = DEFAULT_SPAN
    mod_index: float = DEFAULT_MOD_INDEX
    bt: float = DEFAULT_BT

    def __post_init__(self):
        object.__setattr__(self, 'schemes', tuple(ModScheme.parse(s) for s in self.schemes))
        object.__setattr__(self, 'snr_grid', tuple(float(s) for s in self.snr_grid))
        object.__setattr__(self, 'counts', tuple(int(c) for c in self.counts))
        self.validate()

    def validate(self):
        if not self.schemes:
            raise ValidationError('dataset needs at least one modulation scheme')
        if len(set(self.schemes)) != len(self.schemes):
            raise ValidationError('duplicate modulation schemes')
        if self.sample_length < 1:
            raise ValidationError('sample_length must be positive')
        if self.samples_per_symbol < 1:
            raise ValidationError('samples_per_symbol must be >= 1')
        if not self.snr_grid:
            raise ValidationError('snr_grid is empty')
        if any(b <= a for a, b in zip(self.snr_grid, self.snr_grid[1:])):
            raise ValidationError('snr_grid must be strictly increasing')
        if not all(np.isfinite(self.snr_grid)):
            raise ValidationError('snr_grid values must be finite')
        if len(self.counts) != 3 or any(c < 0 for c in self.counts):
            raise ValidationError('counts must be three non-negative integers (train, val, test)')
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValidationError('positive_fraction must lie in (0, 1)')
        if not 0 < self.rolloff <= 1 or self.span_symbols < 2:
            raise ValidationError('invalid pulse-shaping parameters')

    def with_(self, **changes) -> 'DatasetSpec':
        fields_ = asdict(self)
        fields_.update(changes)
        return DatasetSpec(**fields_)

    def to_header(self) -> dict:
        return {
            'schemes': [s.name for s in self.schemes],
            'scheme_ids': [int(s) for s in self.schemes],
            'sample_length': self.sample_length,
            'samples_per_symbol': self.samples_per_symbol,
            'snr_grid': list(self.snr_grid),
            'counts': list(self.counts),
            'positive_fraction': self.positive_fraction,
            'seed': self.seed,
            'rolloff': self.rolloff,
            'span_symbols': self.span_symbols,
            'mod_index': self.mod_index,
            'bt': self.bt,
        }

    @classmethod
    def from_header(cls, header: dict) -> 'DatasetSpec':
        return cls(
            schemes=tuple(ModScheme(i) for i in header['scheme_ids']),
            sample_length=int(header['sample_length']),
            samples_per_symbol=int(header['samples_per_symbol']),
            snr_grid=tuple(header['snr_grid']),
            counts=tuple(header['counts']),
            positive_fraction=float(header['positive_fraction']),
            seed=int(header['seed']),
            rolloff=float(header['rolloff']),
            span_symbols=int(header['span_symbols']),
            mod_index=float(header['mod_index']),
            bt=float(header['bt']),
        )


@dataclass
class FrameSet:
    """Column-wise collection of labeled frames (one split)."""
    iq: np.ndarray                      # (n, N) complex64
    labels: np.ndarray                  # (n,) uint8, Hypothesis values
    mod_ids: np.ndarray                 # (n,) uint8, NONE_MOD_ID for H0
    snr_db: np.ndarray                  # (n,) float64, nominal

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledFrame:
        mod = int(self.mod_ids[i])
        return LabeledFrame(
            frame=self.iq[i],
            label=Hypothesis(int(self.labels[i])),
            mod_id=None if mod == NONE_MOD_ID else ModScheme(mod),
            snr_db=float(self.snr_db[i]),
        )

    @property
    def sample_length(self) -> int:
        return self.iq.shape[1]

    def network_input(self, dtype=np.float32) -> np.ndarray:
        """(n, N, 2) array with I and Q as the two channels of every time step."""
        return iq_to_channels(self.iq, dtype)

    def subset(self, idx) -> 'FrameSet':
        return FrameSet(self.iq[idx], self.labels[idx], self.mod_ids[idx], self.snr_db[idx])

    @classmethod
    def empty(cls, n_samples: int) -> 'FrameSet':
        return cls(np.zeros((0, n_samples), np.complex64), np.zeros(0, np.uint8),
                   np.zeros(0, np.uint8), np.zeros(0, np.float64))


def iq_to_channels(iq: np.ndarray, dtype=np.float32) -> np.ndarray:
    iq = np.asarray(iq)
    return np.stack([iq.real, iq.imag], axis=-1).astype(dtype)


class DatasetSplits(NamedTuple):
    train: FrameSet
    val: FrameSet
    test: FrameSet


class _Plan(NamedTuple):
    labels: np.ndarray
    mod_ids: np.ndarray
    snr_db: np.ndarray


@lru_cache(maxsize=16)
def frame_plan(spec: DatasetSpec, split: int) -> _Plan:
    """
    Labels, schemes and nominal SNRs for every frame of a split. Positives cover
    scheme x snr_grid round-robin; the whole plan is then shuffled.
    """
    n = spec.counts[split]
    n_pos = int(round(n * spec.positive_fraction))
    grid = np.asarray(spec.snr_grid)
    n_cells = len(spec.schemes) * len(grid)
    g = RngStream(spec.seed).child(split, _ORDER_KEY).generator()

    cells = np.arange(n_pos) % n_cells
    scheme_ids = np.asarray([int(s) for s in spec.schemes], dtype=np.uint8)
    labels = np.concatenate([np.ones(n_pos, np.uint8), np.zeros(n - n_pos, np.uint8)])
    mod_ids = np.concatenate([scheme_ids[cells // len(grid)], np.full(n - n_pos, NONE_MOD_ID, np.uint8)])
    snr = np.concatenate([grid[cells % len(grid)], grid[g.integers(0, len(grid), size=n - n_pos)]])

    order = g.permutation(n)
    return _Plan(labels[order], mod_ids[order], snr[order])


def _synth_components(spec: DatasetSpec, label: int, mod_id: int, snr_db: float,
                      stream: RngStream) -> Tuple[np.ndarray, np.ndarray, complex]:
    g = stream.generator()
    n = spec.sample_length
    if label == Hypothesis.H0:
        return np.zeros(n, np.complex128), cscg(g, n, 1.0), 0j
    s = modulate(ModScheme(mod_id), n, g, spec.samples_per_symbol, spec.rolloff,
                 spec.span_symbols, spec.mod_index, spec.bt)
    h = uniform_phase_gain(g)
    hs, w = channel_components(s, ChannelDraw(h, snr_db), g)
    return hs, w, h


def frame_stream(spec: DatasetSpec, split: int, index: int) -> RngStream:
    return RngStream(spec.seed).child(split, _FRAME_KEY, index)


def synth_frame(spec: DatasetSpec, split: int, index: int):
    """
    Frame ``index`` of ``split`` together with its pre-normalization components
    (h*s, w). The returned LabeledFrame is the normalized, stored form.
    """
    plan = frame_plan(spec, split)
    label, mod_id, snr = int(plan.labels[index]), int(plan.mod_ids[index]), float(plan.snr_db[index])
    hs, w, h = _synth_components(spec, label, mod_id, snr, frame_stream(spec, split, index))
    y = energy_normalize(hs + w).astype(np.complex64)
    lf = LabeledFrame(y, Hypothesis(label), None if mod_id == NONE_MOD_ID else ModScheme(mod_id), snr)
    return lf, {'hs': hs, 'w': w, 'h': h}


def _synth_chunk(spec: DatasetSpec, split: int, start: int, stop: int) -> np.ndarray:
    plan = frame_plan(spec, split)
    out = np.empty((stop - start, spec.sample_length), np.complex64)
    for i in range(start, stop):
        hs, w, _ = _synth_components(spec, int(plan.labels[i]), int(plan.mod_ids[i]),
                                     float(plan.snr_db[i]), frame_stream(spec, split, i))
        out[i - start] = energy_normalize(hs + w)
    return out


def synth_split(spec: DatasetSpec, split: int, n_jobs: int = 1, chunk: int = 2000) -> FrameSet:
    n = spec.counts[split]
    plan = frame_plan(spec, split)
    if n == 0:
        return FrameSet.empty(spec.sample_length)
    bounds = [(a, min(a + chunk, n)) for a in range(0, n, chunk)]
    parts = Parallel(n_jobs=n_jobs)(delayed(_synth_chunk)(spec, split, a, b) for a, b in bounds)
    logger.debug('synthesized %s split: %d frames', SPLIT_NAMES[split], n)
    return FrameSet(np.concatenate(parts), plan.labels.copy(), plan.mod_ids.copy(), plan.snr_db.copy())


def synth_dataset(spec: DatasetSpec, n_jobs: int = 1) -> DatasetSplits:
    spec.validate()
    logger.info('synthesizing dataset: schemes=%s N=%d counts=%s seed=%d',
                ','.join(s.name for s in spec.schemes), spec.sample_length, spec.counts, spec.seed)
    return DatasetSplits(*(synth_split(spec, k, n_jobs) for k in range(3)))


# --- SPSD container ---

def _record_dtype(n: int) -> np.dtype:
    return np.dtype([('label', 'u1'), ('mod', 'u1'), ('snr', '<i2'), ('iq', '<f4', (n, 2))])


def _frames_to_records(fs: FrameSet) -> np.ndarray:
    snr = np.asarray(fs.snr_db)
    if not np.all(snr == np.round(snr)):
        raise ValidationError('SPSD stores integer dB SNRs; grid contains fractional values')
    rec = np.zeros(len(fs), dtype=_record_dtype(fs.sample_length))
    rec['label'] = fs.labels
    rec['mod'] = fs.mod_ids
    rec['snr'] = snr.astype(np.int16)
    rec['iq'] = iq_to_channels(fs.iq, np.float32)
    return rec


def pack_container(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return magic + struct.pack('<HI', SPSD_VERSION, len(head)) + head + payload


def unpack_container(raw: bytes, magic: bytes) -> Tuple[dict, memoryview]:
    if raw[:4] != magic:
        raise ValidationError(f'bad magic {raw[:4]!r}, expected {magic!r}')
    version, hlen = struct.unpack_from('<HI', raw, 4)
    if version != SPSD_VERSION:
        raise ValidationError(f'unsupported container version {version}')
    header = json.loads(bytes(raw[10:10 + hlen]).decode('utf-8'))
    return header, memoryview(raw)[10 + hlen:]


def dataset_bytes(spec: DatasetSpec, splits: DatasetSplits, extra: Optional[dict] = None) -> bytes:
    header = spec.to_header()
    header['split_sizes'] = [len(s) for s in splits]
    if extra:
        header.update(extra)
    payload = b''.join(_frames_to_records(s).tobytes() for s in splits)
    return pack_container(SPSD_MAGIC, header, payload)


def save_dataset(path, spec: DatasetSpec, splits: DatasetSplits, extra: Optional[dict] = None) -> str:
    with open(path, 'wb') as f:
        f.write(dataset_bytes(spec, splits, extra))
    return str(path)


def load_dataset(path) -> Tuple[DatasetSpec, DatasetSplits, dict]:
    with open(path, 'rb') as f:
        raw = f.read()
    header, body = unpack_container(raw, SPSD_MAGIC)
    spec = DatasetSpec.from_header(header)
    dt = _record_dtype(spec.sample_length)
    sizes = header['split_sizes']
    if len(body) != sum(sizes) * dt.itemsize:
        raise ValidationError('SPSD payload length does not match header')
    rec = np.frombuffer(body, dtype=dt)
    out = []
    start = 0
    for n in sizes:
        r = rec[start:start + n]
        start += n
        iq = (r['iq'][..., 0] + 1j * r['iq'][..., 1]).astype(np.complex64)
        out.append(FrameSet(iq, r['label'].copy(), r['mod'].copy(), r['snr'].astype(np.float64)))
    return spec, DatasetSplits(*out), header
