# dlsense/curves.py
"""
Detection curves: Pf plus a Pd-per-SNR table for one detector on one dataset,
the empirical SNR-wall estimate, and CSV / gnuplot emission.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix

from .errors import ValidationError

CSV_FIELDS = ('detector', 'snr_db', 'pd', 'pf', 'n_pos', 'n_neg')


@dataclass(frozen=True)
class CurvePoint:
    snr_db: float
    pd: float
    n_pos: int


@dataclass(frozen=True)
class DetectionCurve:
    detector_id: str
    pf: float
    n_neg: int
    points: Tuple[CurvePoint, ...] = field(default_factory=tuple)

    def __post_init__(self):
        snrs = [p.snr_db for p in self.points]
        if any(b <= a for a, b in zip(snrs, snrs[1:])):
            raise ValidationError('curve SNRs must be strictly increasing')
        probs = [self.pf] + [p.pd for p in self.points]
        if any(not 0.0 <= v <= 1.0 for v in probs):
            raise ValidationError('curve probabilities must lie in [0, 1]')

    @property
    def snr_db(self) -> List[float]:
        return [p.snr_db for p in self.points]

    @property
    def pd(self) -> List[float]:
        return [p.pd for p in self.points]

    @property
    def pd_by_snr(self) -> dict:
        return {p.snr_db: p.pd for p in self.points}

    def pd_at(self, snr_db: float) -> Optional[float]:
        return self.pd_by_snr.get(float(snr_db))


def false_alarm_rate(labels: np.ndarray, decisions: np.ndarray) -> Tuple[float, int]:
    """(Pf, number of H0 frames) from 0/1 labels and decisions."""
    labels = np.asarray(labels).astype(np.int64)
    decisions = np.asarray(decisions).astype(np.int64)
    tn, fp, _, _ = confusion_matrix(labels, decisions, labels=[0, 1]).ravel()
    n_neg = int(tn + fp)
    if n_neg == 0:
        raise ValidationError('no H0 frames: false-alarm rate undefined')
    return fp / n_neg, n_neg


def detection_by_snr(labels: np.ndarray, decisions: np.ndarray, snr_db: np.ndarray) -> Tuple[CurvePoint, ...]:
    """Pd per nominal SNR over H1 frames; SNRs without positives are omitted."""
    labels = np.asarray(labels).astype(np.int64)
    decisions = np.asarray(decisions).astype(np.int64)
    snr_db = np.asarray(snr_db, dtype=np.float64)
    pos = labels == 1
    grid, inv = np.unique(snr_db[pos], return_inverse=True)
    n_pos = np.bincount(inv, minlength=len(grid))
    hits = np.bincount(inv, weights=decisions[pos], minlength=len(grid))
    return tuple(CurvePoint(float(s), float(h / n), int(n)) for s, h, n in zip(grid, hits, n_pos))


def curve_from_decisions(detector_id: str, labels, decisions, snr_db) -> DetectionCurve:
    pf, n_neg = false_alarm_rate(labels, decisions)
    return DetectionCurve(detector_id, float(pf), n_neg, detection_by_snr(labels, decisions, snr_db))


def estimate_snr_wall(curve: DetectionCurve, pd_target: float) -> Optional[float]:
    """
    Lowest SNR at which the linearly interpolated Pd reaches pd_target and
    stays at or above it at every grid point further up; None if never.
    """
    if not 0.0 < pd_target < 1.0:
        raise ValidationError('pd_target must lie in (0, 1)')
    if not curve.points:
        raise ValidationError('empty detection curve')
    snr = curve.snr_db
    pd = curve.pd
    below = [i for i, v in enumerate(pd) if v < pd_target]
    if not below:
        return snr[0]
    j = below[-1]
    if j == len(pd) - 1:
        return None
    frac = (pd_target - pd[j]) / (pd[j + 1] - pd[j])
    return snr[j] + frac * (snr[j + 1] - snr[j])


# --- emission ---

def curve_rows(curve: DetectionCurve) -> Iterable[dict]:
    for p in curve.points:
        yield {
            'detector': curve.detector_id,
            'snr_db': repr(p.snr_db),
            'pd': repr(p.pd),
            'pf': repr(curve.pf),
            'n_pos': str(p.n_pos),
            'n_neg': str(curve.n_neg),
        }


def curves_to_csv(curves: Iterable[DetectionCurve]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator='\n')
    w.writeheader()
    for c in curves:
        w.writerows(curve_rows(c))
    return buf.getvalue()


def write_csv(path, curves: Iterable[DetectionCurve]) -> str:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(curves_to_csv(curves))
    return str(path)


def parse_csv(text: str) -> List[DetectionCurve]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValidationError(f'curve CSV header must be {",".join(CSV_FIELDS)}')
    grouped = {}
    for row in reader:
        key = row['detector']
        entry = grouped.setdefault(key, {'pf': float(row['pf']), 'n_neg': int(row['n_neg']), 'points': []})
        entry['points'].append(CurvePoint(float(row['snr_db']), float(row['pd']), int(row['n_pos'])))
    return [DetectionCurve(k, v['pf'], v['n_neg'], tuple(v['points'])) for k, v in grouped.items()]


def read_csv(path) -> List[DetectionCurve]:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return parse_csv(f.read())


def write_dat(path, curves: Iterable[DetectionCurve], meta: Optional[dict] = None) -> str:
    """gnuplot data file: one indexed block per detector, columns snr pd pf pmd."""
    lines = [f"# {k}: {v}" for k, v in sorted((meta or {}).items())]
    for c in curves:
        lines.append(f'# detector: {c.detector_id}')
        lines.append('# snr_db pd pf pmd')
        for p in c.points:
            lines.append(f'{p.snr_db:g} {p.pd:.6f} {c.pf:.6f} {1.0 - p.pd:.6f}')
        lines.append('')
        lines.append('')
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write('\n'.join(lines))
    return str(path)


def format_db(value: Optional[float]) -> str:
    if value is None:
        return 'none'
    if math.isinf(value):
        return '-inf'
    return f'{value:.2f}'
