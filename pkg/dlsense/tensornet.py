# dlsense/tensornet.py
"""
Minimal neural-network engine on numpy arrays.

Tensors are batch-first arrays: sequences are (batch, time, features), so a
received frame enters as (batch, N, 2) with I and Q as the two channels of
each time step. Every layer kind has a forward that returns (output, cache)
and a backward that consumes that cache. One code path serves 64-bit
reference mode and 32-bit fast mode; the element type is a property of the
Network.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ValidationError
from .rng import RngStream

logger = logging.getLogger(__name__)

ParamSet = Dict[str, np.ndarray]

REFERENCE_DTYPE = np.float64
FAST_DTYPE = np.float32

CHECKPOINT_MAGIC = b'SPCK'
CHECKPOINT_VERSION = 1


class LayerKind(str, enum.Enum):
    CONV1D = 'CONV1D'
    DENSE = 'DENSE'
    TIME_DENSE = 'TIME_DENSE'
    LSTM = 'LSTM'
    RELU = 'RELU'
    SOFTMAX = 'SOFTMAX'
    DROPOUT = 'DROPOUT'
    FLATTEN = 'FLATTEN'


WEIGHTED = (LayerKind.CONV1D, LayerKind.DENSE, LayerKind.TIME_DENSE, LayerKind.LSTM)


@dataclass(frozen=True)
class LayerSpec:
    """
    One layer of a chain. ``units`` is filters for CONV1D, units for
    DENSE/TIME_DENSE and cells for LSTM; ``kernel`` is the CONV1D width;
    ``rate`` the DROPOUT ratio; ``return_sequences`` applies to LSTM.
    """
    kind: LayerKind
    name: str
    units: int = 0
    kernel: int = 0
    rate: float = 0.0
    return_sequences: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, 'kind', LayerKind(self.kind))
        except ValueError:
            raise ValidationError(f'unknown layer kind {self.kind!r}') from None
        if self.kind in WEIGHTED and self.units < 1:
            raise ValidationError(f'{self.name}: units must be positive')
        if self.kind == LayerKind.CONV1D and self.kernel < 1:
            raise ValidationError(f'{self.name}: kernel width must be positive')
        if self.kind == LayerKind.DROPOUT and not 0.0 <= self.rate < 1.0:
            raise ValidationError(f'{self.name}: dropout ratio must lie in [0, 1)')

    def to_dict(self) -> dict:
        d = asdict(self)
        d['kind'] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> 'LayerSpec':
        return cls(**d)


class Cache(NamedTuple):
    kind: LayerKind
    name: str
    data: tuple


def _pname(spec: LayerSpec, p: str) -> str:
    return f'{spec.name}/{p}'


# --- shapes and initialisation ---

def output_shape(spec: LayerSpec, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Per-example output shape (no batch axis)."""
    k = spec.kind
    if k == LayerKind.CONV1D:
        if len(in_shape) != 2:
            raise ValidationError(f'{spec.name}: CONV1D needs (time, channels) input, got {in_shape}')
        return (in_shape[0], spec.units)
    if k == LayerKind.DENSE:
        if len(in_shape) != 1:
            raise ValidationError(f'{spec.name}: DENSE needs a flat input, got {in_shape}')
        return (spec.units,)
    if k == LayerKind.TIME_DENSE:
        if len(in_shape) != 2:
            raise ValidationError(f'{spec.name}: TIME_DENSE needs (time, features) input, got {in_shape}')
        return (in_shape[0], spec.units)
    if k == LayerKind.LSTM:
        if len(in_shape) != 2:
            raise ValidationError(f'{spec.name}: LSTM needs (time, features) input, got {in_shape}')
        return (in_shape[0], spec.units) if spec.return_sequences else (spec.units,)
    if k == LayerKind.FLATTEN:
        return (int(np.prod(in_shape)),)
    return tuple(in_shape)


def _glorot(g: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return g.uniform(-limit, limit, size=shape)


def init_params(spec: LayerSpec, in_shape: Tuple[int, ...], g: np.random.Generator) -> ParamSet:
    k = spec.kind
    if k == LayerKind.CONV1D:
        c = in_shape[-1]
        return {
            _pname(spec, 'W'): _glorot(g, (spec.kernel, c, spec.units), spec.kernel * c, spec.kernel * spec.units),
            _pname(spec, 'b'): np.zeros(spec.units),
        }
    if k in (LayerKind.DENSE, LayerKind.TIME_DENSE):
        d = in_shape[-1]
        return {
            _pname(spec, 'W'): _glorot(g, (d, spec.units), d, spec.units),
            _pname(spec, 'b'): np.zeros(spec.units),
        }
    if k == LayerKind.LSTM:
        d, h = in_shape[-1], spec.units
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        return {
            _pname(spec, 'Wx'): _glorot(g, (d, 4 * h), d, 4 * h),
            _pname(spec, 'Wh'): _glorot(g, (h, 4 * h), h, 4 * h),
            _pname(spec, 'b'): b,
        }
    return {}


# --- forward kernels ---

def _same_pad(kernel: int) -> Tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def _conv_forward(spec, params, x, mode, rng):
    W, b = params[_pname(spec, 'W')], params[_pname(spec, 'b')]
    left, right = _same_pad(spec.kernel)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    win = sliding_window_view(xp, spec.kernel, axis=1)          # (B, T, C, k)
    y = np.tensordot(win, W.transpose(1, 0, 2), axes=([2, 3], [0, 1])) + b
    return y, (win, x.shape)


def _dense_forward(spec, params, x, mode, rng):
    W, b = params[_pname(spec, 'W')], params[_pname(spec, 'b')]
    return x @ W + b, (x,)


def _lstm_forward(spec, params, x, mode, rng):
    Wx, Wh, b = params[_pname(spec, 'Wx')], params[_pname(spec, 'Wh')], params[_pname(spec, 'b')]
    B, T, _ = x.shape
    H = spec.units
    xs = x @ Wx + b
    h = np.zeros((B, H), dtype=x.dtype)
    c = np.zeros((B, H), dtype=x.dtype)
    steps = np.empty((T, 7, B, H), dtype=x.dtype)   # i, f, g, o, c_prev, tanh(c), h_prev
    hs = np.empty((B, T, H), dtype=x.dtype)
    for t in range(T):
        z = xs[:, t] + h @ Wh
        i = expit(z[:, :H])
        f = expit(z[:, H:2 * H])
        gg = np.tanh(z[:, 2 * H:3 * H])
        o = expit(z[:, 3 * H:])
        steps[t, 4] = c
        steps[t, 6] = h
        c = f * c + i * gg
        tc = np.tanh(c)
        h = o * tc
        steps[t, 0], steps[t, 1], steps[t, 2], steps[t, 3], steps[t, 5] = i, f, gg, o, tc
        hs[:, t] = h
    y = hs if spec.return_sequences else h
    return y, (x, steps)


def _relu_forward(spec, params, x, mode, rng):
    mask = x > 0
    return x * mask, (mask,)


def _flatten_forward(spec, params, x, mode, rng):
    return x.reshape(x.shape[0], -1), (x.shape,)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_forward(spec, params, x, mode, rng):
    p = softmax(x)
    return p, (p,)


def _dropout_forward(spec, params, x, mode, rng):
    if mode != 'train' or spec.rate == 0.0:
        return x, (None,)
    if rng is None:
        raise ValidationError(f'{spec.name}: train-mode dropout needs an RngStream')
    keep = rng.generator().random(x.shape) >= spec.rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - spec.rate)
    return x * mask, (mask,)


# --- backward kernels ---

def _conv_backward(spec, params, data, g):
    win, x_shape = data
    W = params[_pname(spec, 'W')]
    left, _ = _same_pad(spec.kernel)
    B, T, C = x_shape
    dW = np.tensordot(win, g, axes=([0, 1], [0, 1])).transpose(1, 0, 2)   # (k, C, F)
    db = g.sum(axis=(0, 1))
    dxp = np.zeros((B, T + spec.kernel - 1, C), dtype=g.dtype)
    for j in range(spec.kernel):
        dxp[:, j:j + T, :] += g @ W[j].T
    return dxp[:, left:left + T, :], {_pname(spec, 'W'): dW, _pname(spec, 'b'): db}


def _dense_backward(spec, params, data, g):
    (x,) = data
    W = params[_pname(spec, 'W')]
    d, u = W.shape
    dW = x.reshape(-1, d).T @ g.reshape(-1, u)
    db = g.reshape(-1, u).sum(axis=0)
    return g @ W.T, {_pname(spec, 'W'): dW, _pname(spec, 'b'): db}


def _lstm_backward(spec, params, data, g):
    x, steps = data
    Wx, Wh = params[_pname(spec, 'Wx')], params[_pname(spec, 'Wh')]
    B, T, D = x.shape
    H = spec.units
    if spec.return_sequences:
        dh_seq = g
    else:
        dh_seq = np.zeros((B, T, H), dtype=g.dtype)
        dh_seq[:, -1] = g
    dz_all = np.empty((B, T, 4 * H), dtype=g.dtype)
    dWh = np.zeros_like(Wh)
    dh_next = np.zeros((B, H), dtype=g.dtype)
    dc_next = np.zeros((B, H), dtype=g.dtype)
    for t in reversed(range(T)):
        i, f, gg, o, c_prev, tc, h_prev = steps[t]
        dh = dh_seq[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_all[:, t]
        dz[:, :H] = dc * gg * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
        dz[:, 3 * H:] = do * o * (1.0 - o)
        dWh += h_prev.T @ dz
        dh_next = dz @ Wh.T
        dc_next = dc * f
    dWx = x.reshape(-1, D).T @ dz_all.reshape(-1, 4 * H)
    db = dz_all.sum(axis=(0, 1))
    return dz_all @ Wx.T, {_pname(spec, 'Wx'): dWx, _pname(spec, 'Wh'): dWh, _pname(spec, 'b'): db}


def _relu_backward(spec, params, data, g):
    (mask,) = data
    return g * mask, {}


def _flatten_backward(spec, params, data, g):
    (shape,) = data
    return g.reshape(shape), {}


def _softmax_backward(spec, params, data, g):
    (p,) = data
    return p * (g - np.sum(g * p, axis=-1, keepdims=True)), {}


def _dropout_backward(spec, params, data, g):
    (mask,) = data
    return (g if mask is None else g * mask), {}


_FORWARD = {
    LayerKind.CONV1D: _conv_forward,
    LayerKind.DENSE: _dense_forward,
    LayerKind.TIME_DENSE: _dense_forward,
    LayerKind.LSTM: _lstm_forward,
    LayerKind.RELU: _relu_forward,
    LayerKind.SOFTMAX: _softmax_forward,
    LayerKind.DROPOUT: _dropout_forward,
    LayerKind.FLATTEN: _flatten_forward,
}

_BACKWARD = {
    LayerKind.CONV1D: _conv_backward,
    LayerKind.DENSE: _dense_backward,
    LayerKind.TIME_DENSE: _dense_backward,
    LayerKind.LSTM: _lstm_backward,
    LayerKind.RELU: _relu_backward,
    LayerKind.SOFTMAX: _softmax_backward,
    LayerKind.DROPOUT: _dropout_backward,
    LayerKind.FLATTEN: _flatten_backward,
}


def layer_forward(spec: LayerSpec, params: ParamSet, x: np.ndarray, mode: str = 'eval',
                  rng: Optional[RngStream] = None) -> Tuple[np.ndarray, Cache]:
    if mode not in ('train', 'eval'):
        raise ValidationError(f'mode must be train or eval, got {mode!r}')
    fn = _FORWARD.get(spec.kind)
    if fn is None:
        raise ValidationError(f'unknown layer kind {spec.kind!r}')
    output_shape(spec, x.shape[1:])
    y, data = fn(spec, params, x, mode, rng)
    return y, Cache(spec.kind, spec.name, data)


def layer_backward(spec: LayerSpec, params: ParamSet, cache: Cache, grad_out: np.ndarray) -> Tuple[np.ndarray, ParamSet]:
    if not isinstance(cache, Cache) or cache.kind != spec.kind or cache.name != spec.name:
        raise ValidationError(f'{spec.name}: cache does not belong to this layer')
    return _BACKWARD[spec.kind](spec, params, cache.data, grad_out)


# --- loss and optimiser ---

def softmax_cross_entropy(logits: np.ndarray, label) -> Tuple[float, np.ndarray]:
    """
    Categorical cross-entropy on raw logits. Rank-1 logits with an int label
    give loss -log p_label and grad p - onehot; a (B, C) batch gives the
    batch-mean loss and its gradient.
    """
    z = np.asarray(logits)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n_cls = z2.shape[-1]
    if z2.ndim != 2 or len(y) != z2.shape[0]:
        raise ValidationError('logits/labels shape mismatch')
    if np.any((y < 0) | (y >= n_cls)):
        raise ValidationError(f'label out of range for {n_cls} classes')
    shifted = z2 - np.max(z2, axis=-1, keepdims=True)
    logp = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    rows = np.arange(len(y))
    loss = float(-np.mean(logp[rows, y]))
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= len(y)
    return loss, (grad[0] if single else grad)


@dataclass
class AdamState:
    m: ParamSet = field(default_factory=dict)
    v: ParamSet = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              t: Optional[int] = None) -> Tuple[ParamSet, AdamState]:
    t = state.t + 1 if t is None else int(t)
    if t < 1:
        raise ValidationError('Adam step counter must be >= 1')
    new_params, m_out, v_out = dict(params), {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValidationError(f'{name}: gradient shape {g.shape} != parameter shape {p.shape}')
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ValidationError(f'{name}: optimizer state shape mismatch')
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = (p - step).astype(p.dtype, copy=False)
        m_out[name] = m.astype(p.dtype, copy=False)
        v_out[name] = v.astype(p.dtype, copy=False)
    return new_params, AdamState(m_out, v_out, t)


# --- networks ---

class Network:
    """A fixed chain of LayerSpecs with its parameters."""

    def __init__(self, layers: Sequence[LayerSpec], input_shape: Tuple[int, ...],
                 params: Optional[ParamSet] = None, dtype=REFERENCE_DTYPE, seed: int = 0):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError('layer names must be unique')
        self.shapes = self._infer_shapes()
        if params is None:
            params = self._init(RngStream(seed).child(0).generator())
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}
        self._check_params()

    def _infer_shapes(self) -> List[Tuple[int, ...]]:
        shapes = [self.input_shape]
        for spec in self.layers:
            shapes.append(output_shape(spec, shapes[-1]))
        return shapes

    def _init(self, g: np.random.Generator) -> ParamSet:
        params = {}
        for spec, shape in zip(self.layers, self.shapes):
            params.update(init_params(spec, shape, g))
        return params

    def _check_params(self):
        expected = self._init(np.random.default_rng(0))
        if set(expected) != set(self.params):
            raise ValidationError('parameter names do not match the layer chain')
        for k, v in expected.items():
            if self.params[k].shape != v.shape:
                raise ValidationError(f'{k}: shape {self.params[k].shape} != {v.shape}')

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.shapes[-1]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def weighted_layers(self) -> List[LayerSpec]:
        return [l for l in self.layers if l.kind in WEIGHTED]

    def _head_index(self) -> int:
        """Index past the last layer that produces logits (a trailing SOFTMAX is skipped)."""
        if self.layers and self.layers[-1].kind == LayerKind.SOFTMAX:
            return len(self.layers) - 1
        return len(self.layers)

    def forward(self, x: np.ndarray, mode: str = 'eval', rng: Optional[RngStream] = None,
                logits: bool = False) -> Tuple[np.ndarray, List[Cache]]:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ValidationError(f'input shape {x.shape[1:]} != network input {self.input_shape}')
        stop = self._head_index() if logits else len(self.layers)
        caches = []
        for idx, spec in enumerate(self.layers[:stop]):
            sub = rng.child(idx) if rng is not None else None
            x, cache = layer_forward(spec, self.params, x, mode, sub)
            caches.append(cache)
        return x, caches

    def backward(self, caches: List[Cache], grad: np.ndarray) -> Tuple[np.ndarray, ParamSet]:
        grads: ParamSet = {}
        g = grad
        for spec, cache in zip(reversed(self.layers[:len(caches)]), reversed(caches)):
            g, gp = layer_backward(spec, self.params, cache, g)
            grads.update(gp)
        return g, grads

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray, mode: str = 'train',
                       rng: Optional[RngStream] = None) -> Tuple[float, ParamSet]:
        z, caches = self.forward(x, mode, rng, logits=True)
        loss, g = softmax_cross_entropy(z, labels)
        _, grads = self.backward(caches, g.astype(self.dtype, copy=False))
        return loss, grads

    def predict_proba(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Eval-mode class probabilities; a trailing SOFTMAX is applied if the chain has one."""
        x = np.asarray(x, dtype=self.dtype)
        out = []
        for a in range(0, len(x), batch_size):
            y, _ = self.forward(x[a:a + batch_size], 'eval')
            out.append(y)
        if not out:
            return np.zeros((0,) + self.output_shape, dtype=self.dtype)
        return np.concatenate(out)

    def copy(self) -> 'Network':
        return Network(self.layers, self.input_shape, {k: v.copy() for k, v in self.params.items()},
                       self.dtype, self.seed)

    def astype(self, dtype) -> 'Network':
        return Network(self.layers, self.input_shape, self.params, dtype, self.seed)

    def with_params(self, params: ParamSet) -> 'Network':
        return Network(self.layers, self.input_shape, params, self.dtype, self.seed)

    def describe(self) -> dict:
        return {
            'layers': [l.to_dict() for l in self.layers],
            'input_shape': list(self.input_shape),
            'seed': self.seed,
            'param_count': self.param_count(),
        }

    def __repr__(self):
        chain = ' -> '.join(f'{l.kind.value}({l.units or l.rate or ""})' for l in self.layers)
        return f'Network[{self.param_count()} params]: {chain}'


# --- gradient checking ---

@dataclass
class GradReport:
    max_rel_error: float
    per_param: Dict[str, float]
    n_checked: int
    n_skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _relu_masks(caches: List[Cache]) -> List[np.ndarray]:
    return [c.data[0] for c in caches if c.kind == LayerKind.RELU]


def _same_kinks(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(network: Network, x: np.ndarray, labels, tolerance: float = 1e-4,
               n_params: int = 200, seed: int = 0, h: float = 1e-5, mode: str = 'eval',
               floor: float = 1e-6) -> GradReport:
    """
    Backprop vs central differences on a stratified random subsample of at
    least n_params parameter entries. Entries whose perturbation flips any
    ReLU are skipped and redrawn, since the loss is not differentiable there.
    """
    if network.dtype != np.float64:
        raise ValidationError('grad_check needs a 64-bit reference network')
    x = np.asarray(x, dtype=np.float64)
    labels = np.atleast_1d(labels)
    rng = RngStream(seed)
    drop_rng = rng.child(1) if mode == 'train' else None

    def loss_at():
        z, caches = network.forward(x, mode, drop_rng, logits=True)
        return softmax_cross_entropy(z, labels)[0], caches

    z, caches = network.forward(x, mode, drop_rng, logits=True)
    _, g = softmax_cross_entropy(z, labels)
    _, grads = network.backward(caches, g)
    base_kinks = _relu_masks(caches)

    g_pick = rng.child(0).generator()
    names = sorted(network.params)
    per_tensor = max(1, -(-n_params // len(names)))
    per_param: Dict[str, float] = {}
    checked = skipped = 0
    for name in names:
        p = network.params[name]
        flat = p.reshape(-1)
        order = g_pick.permutation(flat.size)
        worst = 0.0
        done = 0
        for pos in order:
            if done >= per_tensor:
                break
            old = flat[pos]
            flat[pos] = old + h
            lp, cp = loss_at()
            flat[pos] = old - h
            lm, cm = loss_at()
            flat[pos] = old
            if not (_same_kinks(base_kinks, _relu_masks(cp)) and _same_kinks(base_kinks, _relu_masks(cm))):
                skipped += 1
                continue
            num = (lp - lm) / (2.0 * h)
            ana = float(grads[name].reshape(-1)[pos])
            rel = abs(ana - num) / max(abs(ana) + abs(num), floor)
            worst = max(worst, rel)
            done += 1
        per_param[name] = worst
        checked += done
    report = GradReport(max(per_param.values(), default=0.0), per_param, checked, skipped, tolerance)
    logger.debug('grad_check: max rel err %.3e over %d entries (%d kink skips)', report.max_rel_error, checked, skipped)
    return report


# --- checkpoints ---

@dataclass
class Checkpoint:
    """Architecture + weights + training metadata."""
    network: Network
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        d = self.network.describe()
        d.update({
            'format': 'dlsense-checkpoint',
            'epoch': self.epoch,
            'metrics': self.metrics,
            'meta': self.meta,
            'tensors': [{'name': k, 'shape': list(v.shape)} for k, v in sorted(self.network.params.items())],
        })
        return d


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    manifest = json.dumps(ckpt.manifest(), sort_keys=True, separators=(',', ':')).encode('utf-8')
    blob = b''.join(np.asarray(ckpt.network.params[t['name']], dtype='<f4').tobytes()
                    for t in ckpt.manifest()['tensors'])
    return CHECKPOINT_MAGIC + struct.pack('<HI', CHECKPOINT_VERSION, len(manifest)) + manifest + blob


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    with open(path, 'wb') as f:
        f.write(checkpoint_bytes(ckpt))
    return str(path)


def load_checkpoint(path, dtype=REFERENCE_DTYPE) -> Checkpoint:
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f'{path}: not a dlsense checkpoint')
    version, mlen = struct.unpack_from('<HI', raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f'{path}: unsupported checkpoint version {version}')
    manifest = json.loads(raw[10:10 + mlen].decode('utf-8'))
    offset = 10 + mlen
    counts = [int(np.prod(t['shape'], dtype=np.int64)) for t in manifest['tensors']]
    if offset + 4 * sum(counts) != len(raw):
        raise ValidationError(f'{path}: trailing or missing tensor bytes')
    params = {}
    for t, count in zip(manifest['tensors'], counts):
        arr = np.frombuffer(raw, dtype='<f4', count=count, offset=offset).reshape(t['shape'])
        params[t['name']] = arr.astype(dtype)
        offset += 4 * count
    layers = [LayerSpec.from_dict(d) for d in manifest['layers']]
    net = Network(layers, tuple(manifest['input_shape']), params, dtype, manifest.get('seed', 0))
    return Checkpoint(net, manifest.get('epoch', 0), manifest.get('metrics', {}), manifest.get('meta', {}))
