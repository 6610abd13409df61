"""Accelerometer preprocessing: rational resampling, impact windows, min-max scaling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

TARGET_RATE_HZ = 18.4
WS_BACKWARD = 37
WS_FORWARD = 28


@dataclass(frozen=True)
class ResampleFactor:
    """Interpolate by ``p``, decimate by ``q``; kept in lowest terms."""

    p: int
    q: int

    def __post_init__(self):
        if int(self.p) != self.p or int(self.q) != self.q or self.p < 1 or self.q < 1:
            raise ValueError(f"resample factor needs positive integers, got {self.p}/{self.q}")
        g = math.gcd(int(self.p), int(self.q))
        object.__setattr__(self, "p", int(self.p) // g)
        object.__setattr__(self, "q", int(self.q) // g)

    def __str__(self):
        return f"{self.p}/{self.q}"


def rate_factor(source_rate, target_rate, max_decimals=6):
    """Reduced ``p/q`` mapping ``source_rate`` onto ``target_rate``.

    Both rates are scaled by the smallest power of ten (up to ``10**6``) that
    makes them integers.
    """
    if source_rate <= 0 or target_rate <= 0:
        raise ValueError("sample rates must be positive")
    for d in range(max_decimals + 1):
        s, t = source_rate * 10 ** d, target_rate * 10 ** d
        if abs(s - round(s)) < 1e-9 * max(1.0, s) and abs(t - round(t)) < 1e-9 * max(1.0, t):
            frac = Fraction(int(round(t)), int(round(s)))
            return ResampleFactor(frac.numerator, frac.denominator)
    raise ValueError(f"cannot express {target_rate}/{source_rate} with {max_decimals} decimals")


@dataclass(frozen=True)
class WindowConfig:
    ws_b: int = WS_BACKWARD
    ws_f: int = WS_FORWARD
    rate_hz: float = TARGET_RATE_HZ

    def __post_init__(self):
        if self.ws_b < 0 or self.ws_f < 0:
            raise ValueError("sub-window lengths must be non-negative")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")

    @property
    def length(self):
        return self.ws_b + 1 + self.ws_f

    @classmethod
    def from_seconds(cls, backward_s=2.0, forward_s=1.5, rate_hz=TARGET_RATE_HZ):
        return cls(int(round(backward_s * rate_hz)), int(round(forward_s * rate_hz)), rate_hz)


@dataclass
class Segment:
    """One ``(length, 3)`` window around an impact, channels in x/y/z order."""

    values: np.ndarray
    label: str | None = None
    domain: str = "source"
    subject_id: str = ""
    trial_id: str = ""
    impact_index: int = WS_BACKWARD
    meta: dict = field(default_factory=dict)

    @property
    def y(self):
        """1 for Fall, 0 for ADL, -1 when unlabeled."""
        return {"Fall": 1, "ADL": 0}.get(self.label, -1)


def resampled_length(n, factor):
    return (n - 1) * factor.p // factor.q + 1 if n >= 2 else 0


def resample(trial, factor):
    """Linear interpolation at fractional input indices ``k * q / p``."""
    x = np.asarray(trial.samples, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError(f"trial {trial.trial_id}: need at least 2 samples to resample")
    if factor.p == factor.q:
        return replace(trial, samples=x.copy())
    m = resampled_length(n, factor)
    pos = np.arange(m) * factor.q / factor.p
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = (pos - lo)[:, None]
    out = x[lo] * (1.0 - frac) + x[lo + 1] * frac
    return replace(trial, samples=out, sample_rate_hz=trial.sample_rate_hz * factor.p / factor.q)


def norm_xyz(sample):
    ax, ay, az = sample
    return math.sqrt(ax * ax + ay * ay + az * az)


def impact_index(samples):
    """Index of the first maximum of the acceleration norm."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty trial")
    return int(np.argmax(np.sqrt((x * x).sum(axis=1))))


def impact_window(trial, cfg=WindowConfig()):
    """Cut ``ws_b`` samples before and ``ws_f`` after the impact; edges are replicated."""
    x = np.asarray(trial.samples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError(f"trial {trial.trial_id}: empty trial")
    p = impact_index(x)
    idx = np.clip(np.arange(p - cfg.ws_b, p + cfg.ws_f + 1), 0, len(x) - 1)
    return Segment(values=x[idx].copy(), label=trial.label, subject_id=trial.subject_id,
                   trial_id=trial.trial_id, impact_index=cfg.ws_b)


def minmax_normalize(segment):
    """Scale each axis to [0, 1]; constant axes become zeros."""
    v = np.asarray(segment.values, dtype=np.float64)
    lo = v.min(axis=0)
    span = v.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (v - lo) / safe, 0.0)
    return replace(segment, values=out)


def preprocess(trial, target_rate=TARGET_RATE_HZ, cfg=None, domain="source"):
    """Resample -> impact window -> min-max, carrying the trial's tags."""
    cfg = cfg or WindowConfig(rate_hz=target_rate)
    if len(trial.samples) < 2:
        raise ValueError(f"trial {trial.trial_id}: fewer than 2 samples")
    factor = rate_factor(trial.sample_rate_hz, target_rate)
    seg = minmax_normalize(impact_window(resample(trial, factor), cfg))
    seg.domain = domain
    seg.meta = {"dataset_id": trial.dataset_id, "position": trial.position,
                "activity_code": trial.activity_code, "factor": str(factor)}
    return seg


def preprocess_many(trials, target_rate=TARGET_RATE_HZ, cfg=None, domain="source", min_length=None,
                    log=None):
    """Preprocess a list of trials, skipping ones too short after resampling.

    A trial is excluded when it has fewer than ``min_length`` (default: the
    window length) samples at the target rate.  Exclusions are reported via
    ``log`` when given.
    """
    cfg = cfg or WindowConfig(rate_hz=target_rate)
    min_length = cfg.length if min_length is None else min_length
    out = []
    for tr in trials:
        n_res = resampled_length(len(tr.samples), rate_factor(tr.sample_rate_hz, target_rate))
        if n_res < min_length:
            if log is not None:
                log(f"excluded trial={tr.trial_id} reason=short samples_at_target={n_res}")
            continue
        out.append(preprocess(tr, target_rate, cfg, domain))
    return out


def segments_to_array(segments):
    """Stack segments as a ``(n, 3, length)`` network input."""
    if not segments:
        return np.zeros((0, 3, WS_BACKWARD + 1 + WS_FORWARD))
    return np.stack([s.values.T for s in segments])


def write_segment_dump(path, segments):
    """One row per segment: all x values, then y, then z, then label and domain."""
    n = len(segments[0].values) if segments else WS_BACKWARD + 1 + WS_FORWARD
    header = [f"{ax}{i}" for ax in "xyz" for i in range(n)] + ["label", "domain"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in segments:
            w.writerow([repr(float(v)) for v in s.values.T.reshape(-1)]
                       + [s.label or "", s.domain])
    return len(segments)


def read_segment_dump(path):
    segs = []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        n = (len(header) - 2) // 3
        for row in r:
            vals = np.array([float(v) for v in row[:3 * n]]).reshape(3, n).T
            segs.append(Segment(values=vals, label=row[-2] or None, domain=row[-1],
                                impact_index=WS_BACKWARD))
    return segs
