# dlsense/endet.py
"""
Classical energy detector.

Test statistic, exact CFAR thresholds (Gamma for known noise, F for noise
estimated from M samples), noise estimation, the closed-form SNR-wall and a
Monte-Carlo curve driver.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import special, stats

from .curves import CurvePoint, DetectionCurve, curve_from_decisions
from .errors import ValidationError
from .rng import RngStream
from .sigmod import Hypothesis, IQFrame, ModScheme, cscg, modulate, uniform_phase_gain

logger = logging.getLogger(__name__)

INFINITE = math.inf


def q_func(x):
    """Upper-tail standard normal probability."""
    return special.ndtr(-np.asarray(x, dtype=np.float64))


def q_inv(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValidationError(f'q_inv needs 0 < p < 1, got {p!r}')
    return float(-special.ndtri(p))


def _phi(n: int, m) -> float:
    if m is None or math.isinf(m):
        return 1.0 / n
    return (n + m) / (n * m)


def energy_statistic(frame: IQFrame, sigma2_hat: float) -> float:
    """Lambda = sum |y(n)|^2 / (2 sigma2_hat N)."""
    if not sigma2_hat > 0:
        raise ValidationError('noise variance estimate must be positive')
    y = np.asarray(frame)
    if y.size == 0:
        raise ValidationError('empty frame')
    y = y.astype(np.complex128)
    return float(np.sum(y.real ** 2 + y.imag ** 2) / (2.0 * sigma2_hat * y.shape[-1]))


def energy_statistics(frames: np.ndarray, sigma2_hat) -> np.ndarray:
    """Row-wise statistic for an (n, N) batch; sigma2_hat scalar or per row."""
    y = np.asarray(frames).astype(np.complex128)
    s2 = np.asarray(sigma2_hat, dtype=np.float64)
    if np.any(s2 <= 0):
        raise ValidationError('noise variance estimate must be positive')
    return np.sum(y.real ** 2 + y.imag ** 2, axis=-1) / (2.0 * s2 * y.shape[-1])


def cfar_threshold(pf_target: float, n_samples: int) -> float:
    """
    Threshold with Pr(Lambda > lambda | H0) = pf_target exactly when the noise
    variance is known: N*Lambda ~ Gamma(N, 1).
    """
    if not 0.0 < pf_target < 1.0:
        raise ValidationError('pf_target must lie in (0, 1)')
    if n_samples < 1:
        raise ValidationError('n_samples must be positive')
    return float(special.gammainccinv(n_samples, pf_target) / n_samples)


def cfar_threshold_estimated(pf_target: float, n_samples: int, m_samples: int) -> float:
    """
    Exact threshold when sigma2_hat comes from M fresh noise samples: under H0
    Lambda is the ratio of two independent unit-mean Gammas, i.e. F(2N, 2M).
    """
    if m_samples is None or math.isinf(m_samples):
        return cfar_threshold(pf_target, n_samples)
    if not 0.0 < pf_target < 1.0:
        raise ValidationError('pf_target must lie in (0, 1)')
    if n_samples < 1 or m_samples < 1:
        raise ValidationError('sample counts must be positive')
    return float(stats.f.isf(pf_target, 2 * n_samples, 2 * m_samples))


def estimate_noise(noise_frames, m_samples: int) -> float:
    """sigma2_hat = sum_{m<=M} |w(m)|^2 / (2M) over the first M noise samples."""
    w = np.ravel(np.asarray(noise_frames)).astype(np.complex128)
    if w.size == 0:
        raise ValidationError('no noise samples')
    if m_samples < 1 or w.size < m_samples:
        raise ValidationError(f'need {m_samples} noise samples, have {w.size}')
    w = w[:m_samples]
    return float(np.sum(w.real ** 2 + w.imag ** 2) / (2.0 * m_samples))


@dataclass(frozen=True)
class NoiseModel:
    sigma2: float
    m_samples: float = INFINITE
    sigma2_hat: Optional[float] = None

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValidationError('sigma2 must be positive')
        if math.isinf(self.m_samples):
            object.__setattr__(self, 'sigma2_hat', self.sigma2)
        elif self.sigma2_hat is None or not self.sigma2_hat > 0:
            raise ValidationError('finite M needs a positive sigma2_hat')

    @classmethod
    def known(cls, sigma2: float) -> 'NoiseModel':
        return cls(sigma2)

    @classmethod
    def estimated(cls, sigma2: float, m_samples: int, g: np.random.Generator) -> 'NoiseModel':
        """Fresh estimate from m_samples CSCG samples of per-dimension variance sigma2."""
        w = cscg(g, int(m_samples), 2.0 * sigma2)
        return cls(sigma2, int(m_samples), estimate_noise(w, int(m_samples)))


@dataclass(frozen=True)
class WallQuery:
    pf_target: float
    pd_target: float
    n_samples: int
    m_samples: float = INFINITE

    def __post_init__(self):
        if not 0.0 < self.pf_target < 1.0 or not 0.0 < self.pd_target < 1.0:
            raise ValidationError('P_f and P_d targets must lie in (0, 1)')
        if self.n_samples < 1 or not self.m_samples >= 1:
            raise ValidationError('sample counts must be positive')

    @property
    def phi(self) -> float:
        return _phi(self.n_samples, self.m_samples)


def snr_wall_linear(query: WallQuery) -> float:
    root = math.sqrt(query.phi)
    den = 1.0 - q_inv(query.pf_target) * root
    if den <= 0.0:
        raise ValidationError(
            f'SNR-wall undefined: 1 - Qinv(Pf)*sqrt(phi) = {den:.4g} <= 0 '
            f'(Pf={query.pf_target}, N={query.n_samples}, M={query.m_samples})')
    return (1.0 - q_inv(query.pd_target) * root) / den - 1.0


def snr_wall(query: WallQuery) -> float:
    """SNR-wall in dB; -inf when the requirement holds at every SNR (no wall)."""
    gamma = snr_wall_linear(query)
    if gamma <= 0.0:
        return -math.inf
    return 10.0 * math.log10(gamma)


def analytic_pd(snr_db: float, pf_target: float, n_samples: int, m_samples: float = INFINITE) -> float:
    """Gaussian-approximation Pd consistent with the closed-form wall."""
    gamma = 10.0 ** (snr_db / 10.0)
    root = math.sqrt(_phi(n_samples, m_samples))
    arg = (1.0 - (1.0 + gamma) * (1.0 - q_inv(pf_target) * root)) / root
    return float(q_func(arg))


def ed_detect(frame: IQFrame, noise: NoiseModel, lam: float) -> Hypothesis:
    """H1 iff Lambda > lambda; equality decides H0."""
    return Hypothesis.H1 if energy_statistic(frame, noise.sigma2_hat) > lam else Hypothesis.H0


def _signal_batch(kind, scheme, n, trials, g, sps):
    if kind == 'cscg':
        return cscg(g, n * trials, 1.0).reshape(trials, n)
    rows = np.empty((trials, n), np.complex128)
    for t in range(trials):
        s = modulate(scheme, n, g, sps)
        s = s / math.sqrt(np.mean(np.abs(s) ** 2))
        rows[t] = uniform_phase_gain(g) * s
    return rows


def ed_curve(n_samples: int, snr_grid: Sequence[float], pf_target: float, trials: int,
             seed: int, scheme: ModScheme = ModScheme.QAM16, m_samples: float = INFINITE,
             signal: str = 'modulated', sps: int = 8, sigma2: float = 0.5) -> DetectionCurve:
    """
    Monte-Carlo Pf / Pd-per-SNR of the energy detector on unnormalized frames.
    SNR is received signal power over noise power; with finite M the noise
    variance is re-estimated from M fresh samples every trial.
    """
    if signal not in ('modulated', 'cscg'):
        raise ValidationError(f'unknown signal kind {signal!r}')
    if trials < 1:
        raise ValidationError('trials must be positive')
    finite_m = not math.isinf(m_samples)
    lam = cfar_threshold_estimated(pf_target, n_samples, m_samples)
    root = RngStream(seed)
    noise_power = 2.0 * sigma2

    def s2_hat(g, count):
        if not finite_m:
            return np.full(count, sigma2)
        w = cscg(g, int(m_samples) * count, noise_power).reshape(count, int(m_samples))
        return np.sum(np.abs(w) ** 2, axis=1) / (2.0 * m_samples)

    g0 = root.child(0).generator()
    h0 = cscg(g0, n_samples * trials, noise_power).reshape(trials, n_samples)
    dec0 = energy_statistics(h0, s2_hat(g0, trials)) > lam

    labels = [np.zeros(trials, np.uint8)]
    decisions = [dec0]
    snrs = [np.full(trials, float(snr_grid[0]))]
    for k, snr in enumerate(snr_grid, start=1):
        g = root.child(k).generator()
        s = _signal_batch(signal, scheme, n_samples, trials, g, sps)
        amp = math.sqrt(noise_power * 10.0 ** (snr / 10.0))
        y = amp * s + cscg(g, n_samples * trials, noise_power).reshape(trials, n_samples)
        decisions.append(energy_statistics(y, s2_hat(g, trials)) > lam)
        labels.append(np.ones(trials, np.uint8))
        snrs.append(np.full(trials, float(snr)))
    m_tag = 'inf' if not finite_m else str(int(m_samples))
    det_id = f'ED(N={n_samples},M={m_tag})'
    logger.info('energy detector curve %s: lambda=%.5f over %d SNRs x %d trials', det_id, lam, len(snr_grid), trials)
    return curve_from_decisions(det_id, np.concatenate(labels), np.concatenate(decisions), np.concatenate(snrs))


def analytic_curve(n_samples: int, snr_grid: Sequence[float], pf_target: float,
                   m_samples: float = INFINITE) -> DetectionCurve:
    pts = tuple(CurvePoint(float(s), analytic_pd(s, pf_target, n_samples, m_samples), 0) for s in snr_grid)
    m_tag = 'inf' if math.isinf(m_samples) else str(int(m_samples))
    return DetectionCurve(f'ED-analytic(N={n_samples},M={m_tag})', float(pf_target), 0, pts)
