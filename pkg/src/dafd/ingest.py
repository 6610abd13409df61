"""Trial ingestion: canonical manifest I/O, raw-export adapters and a synthetic generator."""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger(__name__)

G = 9.80665
POSITIONS = ("N", "WA", "RP", "LP", "WR", "A", "C")
MANIFEST_COLUMNS = ["trial_id", "subject_id", "dataset_id", "position", "activity_code",
                    "label", "sample_rate_hz", "path"]
TRIAL_COLUMNS = ["ax", "ay", "az"]


class IngestError(ValueError):
    """Bad input data; the message names the file and row."""


@dataclass(frozen=True)
class TrialRecord:
    trial_id: str
    subject_id: str
    dataset_id: str
    position: str
    activity_code: str
    label: str
    sample_rate_hz: float
    samples: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 3 or len(s) == 0:
            raise IngestError(f"trial {self.trial_id}: samples must be a non-empty (n, 3) array")
        if not np.all(np.isfinite(s)):
            raise IngestError(f"trial {self.trial_id}: non-finite samples")
        if not self.sample_rate_hz > 0:
            raise IngestError(f"trial {self.trial_id}: sample_rate_hz must be positive")
        if self.label not in ("ADL", "Fall"):
            raise IngestError(f"trial {self.trial_id}: label must be ADL or Fall")
        if (self.label == "Fall") != self.activity_code.startswith("F"):
            raise IngestError(f"trial {self.trial_id}: label {self.label} contradicts "
                              f"activity code {self.activity_code}")
        object.__setattr__(self, "samples", s)


# ---------------------------------------------------------------------------
# canonical format


def write_canonical(trials, out_dir, manifest_name="manifest.csv"):
    """Write a manifest plus one ``trials/<trial_id>.csv`` per trial.

    Values are written with ``repr`` so reading them back is exact.
    """
    out_dir = Path(out_dir)
    (out_dir / "trials").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for tr in trials:
            rel = f"trials/{tr.trial_id}.csv"
            w.writerow([tr.trial_id, tr.subject_id, tr.dataset_id, tr.position, tr.activity_code,
                        tr.label, repr(float(tr.sample_rate_hz)), rel])
            with open(out_dir / rel, "w", newline="", encoding="utf-8") as tf:
                tw = csv.writer(tf, lineterminator="\n")
                tw.writerow(TRIAL_COLUMNS)
                for row in tr.samples:
                    tw.writerow([repr(float(v)) for v in row])
    return manifest


def _read_trial_csv(path):
    if not path.is_file():
        raise IngestError(f"{path}: trial file not found")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or [h.strip() for h in header] != TRIAL_COLUMNS:
            raise IngestError(f"{path}:1: expected header {','.join(TRIAL_COLUMNS)}")
        for lineno, row in enumerate(r, start=2):
            if len(row) != 3:
                raise IngestError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as e:
                raise IngestError(f"{path}:{lineno}: {e}") from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestError(f"{path}:{lineno}: non-finite sample {row}")
            rows.append(vals)
    if not rows:
        raise IngestError(f"{path}: empty trial")
    return np.array(rows, dtype=np.float64)


def load_canonical(manifest_path):
    """Read a manifest and every trial file it references."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestError(f"{manifest_path}: manifest not found")
    base = manifest_path.parent
    trials = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or [h.strip() for h in header] != MANIFEST_COLUMNS:
            raise IngestError(f"{manifest_path}:1: expected header {','.join(MANIFEST_COLUMNS)}")
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise IngestError(f"{manifest_path}:{lineno}: expected {len(MANIFEST_COLUMNS)} "
                                  f"columns, got {len(row)}")
            rec = dict(zip(MANIFEST_COLUMNS, row))
            try:
                rate = float(rec["sample_rate_hz"])
            except ValueError:
                raise IngestError(f"{manifest_path}:{lineno}: bad sample_rate_hz "
                                  f"{rec['sample_rate_hz']!r}") from None
            if not rate > 0 or not math.isfinite(rate):
                raise IngestError(f"{manifest_path}:{lineno}: non-positive sample rate {rate}")
            samples = _read_trial_csv(base / rec["path"])
            try:
                trials.append(TrialRecord(rec["trial_id"], rec["subject_id"], rec["dataset_id"],
                                          rec["position"], rec["activity_code"], rec["label"],
                                          rate, samples))
            except IngestError as e:
                raise IngestError(f"{manifest_path}:{lineno}: {e}") from None
    return trials


# ---------------------------------------------------------------------------
# raw dataset adapter


@dataclass(frozen=True)
class ColumnMapping:
    """How to read one raw export: which columns hold x/y/z, units and rate.

    Columns may be given as 0-based indices or header names.  File names are
    matched against ``filename_pattern`` whose named groups ``subject``,
    ``activity`` and ``trial`` identify the recording.
    """

    x_col: int | str
    y_col: int | str
    z_col: int | str
    rate_hz: float
    unit: str = "g"
    time_col: int | str | None = None
    label_prefix_fall: str = "F"
    label_prefix_adl: str = "A"
    filename_pattern: str = r"(?P<subject>[^_]+)_(?P<activity>[A-Za-z]+\d+)_(?P<trial>[^_.]+)\.csv"
    delimiter: str = ","
    has_header: bool = True

    def __post_init__(self):
        if len({self.x_col, self.y_col, self.z_col}) != 3:
            raise ValueError("x, y and z columns must be distinct")
        if self.unit not in ("g", "m_per_s2"):
            raise ValueError(f"unit must be 'g' or 'm_per_s2', got {self.unit!r}")
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")

    @property
    def scale(self):
        return 1.0 / G if self.unit == "m_per_s2" else 1.0

    def label_for(self, code):
        if code.startswith(self.label_prefix_fall):
            return "Fall"
        if code.startswith(self.label_prefix_adl):
            return "ADL"
        raise IngestError(f"unknown activity code {code!r}")

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"{path}: unknown mapping keys {sorted(unknown)}")
        return cls(**cfg)


def _resolve(col, header, path):
    if isinstance(col, int):
        return col
    if header is None or col not in header:
        raise IngestError(f"{path}: column {col!r} not found")
    return header.index(col)


def adapt_dataset(raw_dir, mapping, dataset_id, position):
    """Convert every matching raw file under ``raw_dir`` (sorted by name) to trials in g."""
    raw_dir = Path(raw_dir)
    pattern = re.compile(mapping.filename_pattern)
    trials = []
    for path in sorted(p for p in raw_dir.iterdir() if p.is_file()):
        m = pattern.fullmatch(path.name)
        if m is None:
            continue
        subject, code = m.group("subject"), m.group("activity")
        label = mapping.label_for(code)
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh, delimiter=mapping.delimiter))
        header = [h.strip() for h in rows[0]] if mapping.has_header and rows else None
        body = rows[1:] if mapping.has_header else rows
        idx = [_resolve(c, header, path) for c in (mapping.x_col, mapping.y_col, mapping.z_col)]
        samples = []
        for lineno, row in enumerate(body, start=2 if mapping.has_header else 1):
            if not row:
                continue
            try:
                samples.append([float(row[i]) * mapping.scale for i in idx])
            except IndexError:
                raise IngestError(f"{path}:{lineno}: column index out of range") from None
            except ValueError as e:
                raise IngestError(f"{path}:{lineno}: {e}") from None
        arr = np.array(samples, dtype=np.float64).reshape(-1, 3)
        if len(arr) == 0 or not np.all(np.isfinite(arr)):
            log.warning("excluded %s: empty or non-finite samples", path.name)
            continue
        tid = f"{dataset_id}-{position}-{subject}-{code}-{m.group('trial')}"
        trials.append(TrialRecord(tid, subject, dataset_id, position, code, label,
                                  float(mapping.rate_hz), arr))
    return trials


# ---------------------------------------------------------------------------
# synthetic two-domain generator


@dataclass(frozen=True)
class DomainShift:
    rotation_rad: float = 0.0
    gain: tuple = (1.0, 1.0, 1.0)
    offset: tuple = (0.0, 0.0, 0.0)
    rate_hz: float | None = None

    def __post_init__(self):
        if len(self.gain) != 3 or any(g == 0 for g in self.gain):
            raise ValueError("gains must be three non-zero values")
        if len(self.offset) != 3:
            raise ValueError("offset needs three values")
        if self.rate_hz is not None and not self.rate_hz > 0:
            raise ValueError("rate override must be positive")

    def apply(self, samples):
        c, s = math.cos(self.rotation_rad), math.sin(self.rotation_rad)
        # rotation about the vertical (z) axis
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return (samples @ R.T) * np.asarray(self.gain) + np.asarray(self.offset)


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 20
    trials_per_class_per_subject: int = 5
    rate_hz: float = 18.4
    domain_shift: DomainShift = DomainShift()
    noise_sigma: float = 0.03
    seed: int = 0
    duration_s: float = 8.0
    position: str = "WA"
    dataset_id: str = "synth"

    def __post_init__(self):
        if self.n_subjects < 1 or self.trials_per_class_per_subject < 1:
            raise ValueError("n_subjects and trials_per_class_per_subject must be positive")
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.duration_s * min(self.rate_hz, self.domain_shift.rate_hz or self.rate_hz) < 2:
            raise ValueError("duration too short for the sample rate")


# (code, horizontal direction of the motion in degrees, sinusoid frequency range in Hz,
#  amplitude range in g).  Directions are in the body frame: 0 = forward (x),
# 90 = left (y).
ADL_TYPES = (
    ("A1", 90.0, (1.6, 2.2), (0.25, 0.45)),   # walking, lateral sway dominant
    ("A2", 90.0, (0.4, 0.9), (0.15, 0.35)),   # standing, slow lateral shifting
    ("A3", 90.0, (0.8, 1.4), (0.3, 0.55)),    # sitting down / standing up
    ("A4", 90.0, (1.0, 1.6), (0.3, 0.55)),    # picking up an object
    ("A5", 90.0, (2.0, 3.0), (0.4, 0.6)),     # jumping
)
# (code, fall direction in degrees)
FALL_TYPES = (
    ("F1", 0.0),     # forward using hands
    ("F2", 0.0),     # forward using knees
    ("F3", 180.0),   # backwards
    ("F4", 0.0),     # forward, sideward twist
    ("F5", 180.0),   # sitting into empty chair
)

FREE_FALL_S = 0.3
FREE_FALL_NORM = 0.2
IMPACT_MIN_G = 3.5


@dataclass(frozen=True)
class FallTimeline:
    """Event boundaries (seconds) of a synthetic fall."""

    free_fall_start: float
    impact_start: float
    impact_end: float
    rest_start: float


def _unit(v):
    return v / np.linalg.norm(v)


def _rot(axis, angle):
    axis = _unit(np.asarray(axis, dtype=np.float64))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def _subject_params(seed, subject):
    rng = np.random.default_rng([seed, subject, 0xA5])
    tilt = rng.normal(0.0, math.radians(6.0))
    tilt_dir = rng.uniform(0, 2 * math.pi)
    return {
        "mount": _rot([math.cos(tilt_dir), math.sin(tilt_dir), 0.0], tilt),
        "amp": rng.uniform(0.85, 1.15),
        "freq": rng.uniform(0.9, 1.1),
    }


def _adl_latent(rng, kind, subj, duration):
    code, direction, (f_lo, f_hi), (a_lo, a_hi) = kind
    az = math.radians(direction + rng.normal(0.0, 10.0))
    horiz = np.array([math.cos(az), math.sin(az), 0.0])
    vert_share = rng.uniform(0.2, 0.5)
    return {
        "code": code,
        "dir": _unit(horiz + vert_share * np.array([0.0, 0.0, 1.0])),
        "freq": rng.uniform(f_lo, f_hi) * subj["freq"],
        "amp": rng.uniform(a_lo, a_hi) * subj["amp"],
        "phase": rng.uniform(0, 2 * math.pi),
        "h2": rng.uniform(0.0, 0.3),
        "duration": duration,
    }


def _adl_signal(lat, t):
    w = 2 * math.pi * lat["freq"]
    osc = np.sin(w * t + lat["phase"]) + lat["h2"] * np.sin(2 * w * t + 2 * lat["phase"])
    upright = np.array([0.0, 0.0, 1.0])
    return upright[None, :] + lat["amp"] * osc[:, None] * lat["dir"][None, :]


def _fall_latent(rng, kind, subj, duration):
    code, direction = kind
    az = math.radians(direction + rng.normal(0.0, 12.0))
    horiz = np.array([math.cos(az), math.sin(az), 0.0])
    t_ff = rng.uniform(0.45, 0.6) * duration
    return {
        "code": code,
        "horiz": horiz,
        "lie": _unit(horiz + np.array([0.0, 0.0, rng.uniform(0.05, 0.3)])),
        "t_ff": t_ff,
        "impact_g": rng.uniform(IMPACT_MIN_G + 0.5, 6.0) * subj["amp"],
        "impact_dir": _unit(horiz * rng.uniform(0.6, 1.0) + np.array([0.0, 0.0, 1.0])),
        "pre_amp": rng.uniform(0.05, 0.15),
        "pre_freq": rng.uniform(1.5, 2.0) * subj["freq"],
        "pre_phase": rng.uniform(0, 2 * math.pi),
        "vib_amp": rng.uniform(0.3, 0.8),
        "vib_freq": rng.uniform(3.0, 5.0),
        "duration": duration,
    }


def fall_timeline(lat, rate_hz):
    """Impact lasts at least 1.5 sample periods so one sample always lands inside."""
    ff = lat["t_ff"]
    imp = ff + FREE_FALL_S
    imp_end = imp + max(0.08, 1.5 / rate_hz)
    return FallTimeline(ff, imp, imp_end, imp_end + 0.6)


def _fall_signal(lat, t, rate_hz):
    tl = fall_timeline(lat, rate_hz)
    upright = np.array([0.0, 0.0, 1.0])
    lie = lat["lie"]
    out = np.empty((len(t), 3))
    for i, ti in enumerate(t):
        if ti < tl.free_fall_start:
            osc = lat["pre_amp"] * math.sin(2 * math.pi * lat["pre_freq"] * ti + lat["pre_phase"])
            out[i] = upright + osc * np.array([0.3, 0.3, 1.0])
        elif ti < tl.impact_start:
            u = (ti - tl.free_fall_start) / FREE_FALL_S
            ramp = 0.5 - 0.5 * math.cos(math.pi * min(1.0, 2 * u))
            scale = 1.0 - (1.0 - FREE_FALL_NORM) * ramp
            out[i] = scale * _unit((1 - 0.5 * u) * upright + 0.5 * u * lie)
        elif ti < tl.impact_end:
            decay = 1.0 - 0.2 * (ti - tl.impact_start) / (tl.impact_end - tl.impact_start)
            out[i] = lat["impact_g"] * decay * lat["impact_dir"]
        elif ti < tl.rest_start:
            v = (ti - tl.impact_end)
            osc = lat["vib_amp"] * math.exp(-6.0 * v) * math.sin(2 * math.pi * lat["vib_freq"] * v)
            out[i] = lie + osc * np.array([0.5, 0.5, 1.0])
        else:
            out[i] = lie
    return out


def _trial_plan(spec):
    """Latent events in a fixed order, independent of any domain shift."""
    plan = []
    for s in range(spec.n_subjects):
        subj = _subject_params(spec.seed, s)
        for label, kinds in (("ADL", ADL_TYPES), ("Fall", FALL_TYPES)):
            for k in range(spec.trials_per_class_per_subject):
                rng = np.random.default_rng([spec.seed, s, label == "Fall", k])
                kind = kinds[k % len(kinds)]
                make = _fall_latent if label == "Fall" else _adl_latent
                plan.append((s, label, k, subj, make(rng, kind, subj, spec.duration_s)))
    return plan


def synth_latents(spec):
    return _trial_plan(spec)


def synth_trials(spec):
    """Generate one domain's trials.

    Latent events depend only on ``seed`` (not on ``domain_shift``), so two
    calls differing only in the shift describe the same activities seen by
    two different sensors.
    """
    shift = spec.domain_shift
    rate = shift.rate_hz or spec.rate_hz
    n = int(math.floor(spec.duration_s * rate)) + 1
    t = np.arange(n) / rate
    trials = []
    for s, label, k, subj, lat in _trial_plan(spec):
        if label == "Fall":
            body = _fall_signal(lat, t, rate)
        else:
            body = _adl_signal(lat, t)
        noise_rng = np.random.default_rng([spec.seed, s, label == "Fall", k, int(round(rate * 1000))])
        body = body @ subj["mount"].T + noise_rng.normal(0.0, spec.noise_sigma, body.shape)
        samples = shift.apply(body)
        code = lat["code"]
        tid = f"{spec.dataset_id}-{spec.position}-S{s:02d}-{code}-{k:02d}"
        trials.append(TrialRecord(tid, f"S{s:02d}", spec.dataset_id, spec.position, code, label,
                                  float(rate), samples))
    return trials


def synth_fall_timelines(spec):
    """Impact intervals (sample indices, inclusive) of every Fall trial, in generation order."""
    rate = spec.domain_shift.rate_hz or spec.rate_hz
    n = int(math.floor(spec.duration_s * rate)) + 1
    t = np.arange(n) / rate
    out = []
    for _, label, _, _, lat in _trial_plan(spec):
        if label != "Fall":
            continue
        tl = fall_timeline(lat, rate)
        idx = np.nonzero((t >= tl.impact_start) & (t < tl.impact_end))[0]
        out.append((int(idx[0]), int(idx[-1])))
    return out
