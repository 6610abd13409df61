"""Cross-domain evaluation: folds, source/target pairs, metrics, significance, reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dann, nn
from .signal import segments_to_array

FALL, ADL = 1, 0
N_FOLDS = 5
REPORT_MODES = ("SourceOnly", "DAFD_adl", "DAFD", "TargetOnly")
MODE_LABELS = {"SourceOnly": "Source-only", "DAFD_adl": "DAFD_adl", "DAFD": "DAFD",
               "TargetOnly": "Target-only"}
METRICS = ("sen", "spe", "pre", "f1")
SIG_ADL, SIG_DAFD = "*", "†"

UPFALL, UMAFALL = "upfall", "umafall"
# Source -> target pairs, in table order.
UPFALL_CROSS_POSITION = (
    ("N", "WA"), ("N", "RP"), ("N", "WR"), ("N", "A"), ("WA", "RP"), ("WA", "WR"), ("WA", "A"),
    ("WA", "N"), ("RP", "A"), ("RP", "WA"), ("RP", "WR"), ("RP", "N"), ("WR", "N"), ("WR", "RP"),
    ("WR", "A"), ("WR", "WA"), ("A", "WA"), ("A", "N"), ("A", "RP"), ("A", "WR"),
)
UMAFALL_CROSS_POSITION = (
    ("C", "WA"), ("C", "WR"), ("C", "A"), ("WA", "WR"), ("WA", "A"), ("WA", "C"),
    ("WR", "A"), ("WR", "WA"), ("WR", "C"), ("A", "C"), ("A", "WA"), ("A", "WR"),
)
CROSS_CONFIG_POSITIONS = (("WA", "WA"), ("RP", "LP"), ("WR", "WR"), ("A", "A"))


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricSet:
    sen: float
    spe: float
    pre: float
    f1: float
    degenerate: frozenset = frozenset()

    def as_dict(self):
        return {m: getattr(self, m) for m in METRICS}


def _as_class(v):
    if isinstance(v, str):
        if v not in ("Fall", "ADL"):
            raise ValueError(f"unknown class {v!r}")
        return FALL if v == "Fall" else ADL
    return int(v)


def confusion(predictions, labels):
    """Counts with Fall as the positive class."""
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    p = np.array([_as_class(v) for v in predictions], dtype=np.int64)
    y = np.array([_as_class(v) for v in labels], dtype=np.int64)
    return ConfusionCounts(int(np.sum((p == 1) & (y == 1))), int(np.sum((p == 0) & (y == 0))),
                           int(np.sum((p == 1) & (y == 0))), int(np.sum((p == 0) & (y == 1))))


def _ratio(num, den, name, flags):
    if den == 0:
        flags.add(name)
        return 0.0
    return num / den


def metrics(c):
    """SEN, SPE, PRE and the harmonic-mean F1; zero denominators give 0 and a flag."""
    flags = set()
    sen = _ratio(c.tp, c.tp + c.fn, "sen", flags)
    spe = _ratio(c.tn, c.tn + c.fp, "spe", flags)
    pre = _ratio(c.tp, c.tp + c.fp, "pre", flags)
    f1 = _ratio(2 * sen * pre, sen + pre, "f1", flags)
    return MetricSet(sen, spe, pre, f1, frozenset(flags))


def mean_metrics(sets):
    sets = list(sets)
    flags = frozenset().union(*(s.degenerate for s in sets)) if sets else frozenset()
    return MetricSet(*(float(np.mean([getattr(s, m) for s in sets])) for m in METRICS), flags)


# ---------------------------------------------------------------------------
# significance


def _betacf(a, b, x, max_iter=500, tol=1e-15):
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a, b, x):
    """Regularised incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t, df):
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool


def ttest(sample_a, sample_b, alpha=0.05):
    """Two-sided pooled-variance Student t-test."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least 2 values")
    na, nb = len(a), len(b)
    df = na + nb - 2
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / df
    diff = a.mean() - b.mean()
    if pooled == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, 1.0, False)
        return TTestResult(math.copysign(math.inf, diff), 0.0, True)
    t = diff / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    p = t_two_sided_p(t, df)
    return TTestResult(float(t), float(p), p < alpha)


# ---------------------------------------------------------------------------
# protocol


@dataclass(frozen=True)
class FoldPlan:
    groups: tuple
    seed: int

    def test_subjects(self, fold):
        return set(self.groups[fold])


def lsocv_folds(subject_ids, seed, k=N_FOLDS):
    """Shuffle subjects by ``seed`` and deal them round-robin into ``k`` groups."""
    subjects = sorted(set(subject_ids))
    if len(subjects) < k:
        raise ValueError(f"need at least {k} subjects, got {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    groups = [[] for _ in range(k)]
    for i, j in enumerate(order):
        groups[i % k].append(subjects[j])
    return FoldPlan(tuple(tuple(sorted(g)) for g in groups), seed)


@dataclass(frozen=True)
class PairSpec:
    scenario: str
    source: tuple
    target: tuple

    def __post_init__(self):
        (sd, sp), (td, tp) = self.source, self.target
        if self.scenario == "cross_position":
            if sd != td or sp == tp:
                raise ValueError("cross_position pairs share the dataset and differ in position")
        elif self.scenario == "cross_config":
            if sd == td:
                raise ValueError("cross_config pairs differ in dataset")
        else:
            raise ValueError(f"unknown scenario {self.scenario!r}")

    @property
    def column(self):
        if self.scenario == "cross_position":
            return f"cross_position:{self.source[0]}"
        return f"cross_config:{self.source[0]}->{self.target[0]}"

    def __str__(self):
        return f"{self.source[0]}:{self.source[1]}->{self.target[0]}:{self.target[1]}"


def enumerate_pairs(scenario, dataset=None):
    """The fixed source -> target pair list of a scenario.

    ``dataset`` selects one dataset for ``cross_position`` (both when None);
    for ``cross_config`` it selects the source dataset (both directions when None).
    """
    if scenario == "cross_position":
        tables = {UPFALL: UPFALL_CROSS_POSITION, UMAFALL: UMAFALL_CROSS_POSITION}
        names = [dataset] if dataset else [UPFALL, UMAFALL]
        out = []
        for ds in names:
            if ds not in tables:
                raise ValueError(f"no cross_position table for dataset {ds!r}")
            out += [PairSpec(scenario, (ds, s), (ds, t)) for s, t in tables[ds]]
        return out
    if scenario == "cross_config":
        out = []
        if dataset in (None, UPFALL):
            out += [PairSpec(scenario, (UPFALL, s), (UMAFALL, t)) for s, t in CROSS_CONFIG_POSITIONS]
        if dataset in (None, UMAFALL):
            out += [PairSpec(scenario, (UMAFALL, t), (UPFALL, s)) for s, t in CROSS_CONFIG_POSITIONS]
        if not out:
            raise ValueError(f"unknown dataset {dataset!r}")
        return out
    raise ValueError(f"unknown scenario {scenario!r}")


@dataclass
class FoldResult:
    fold: int
    counts: ConfusionCounts
    metrics: MetricSet


@dataclass
class PairResult:
    pair: PairSpec
    mode: str
    folds: list = field(default_factory=list)

    @property
    def mean(self):
        return mean_metrics(f.metrics for f in self.folds)


def _retag(segments, domain):
    return [s if s.domain == domain else replace(s, domain=domain) for s in segments]


def fold_seed(master_seed, fold):
    return int(np.random.SeedSequence([master_seed, fold]).generate_state(1)[0])


def fold_pools(pair, data, fold, plans):
    """(source train, target train, target test) segment lists for one fold."""
    src = _retag(data[tuple(pair.source)], "source")
    tgt = _retag(data[tuple(pair.target)], "target")
    test_src = plans[pair.source[0]].test_subjects(fold)
    test_tgt = plans[pair.target[0]].test_subjects(fold)
    return ([s for s in src if s.subject_id not in test_src],
            [s for s in tgt if s.subject_id not in test_tgt],
            [s for s in tgt if s.subject_id in test_tgt])


def fold_plans(pair, data, seed):
    plans = {}
    for ds in {pair.source[0], pair.target[0]}:
        subjects = set()
        for key in (tuple(pair.source), tuple(pair.target)):
            if key[0] == ds:
                subjects |= {s.subject_id for s in data[key]}
        plans[ds] = lsocv_folds(subjects, seed)
    return plans


def run_pair(pair, data, modes, cfg, hp=None, grid=False, jobs=1, on_fold=None):
    """Train/evaluate every requested mode on every fold of one pair.

    ``data`` maps ``(dataset_id, position)`` to preprocessed segments.  The
    fall head is evaluated in eval mode on the target test-fold subjects.
    """
    hp = hp or dann.Hyperparams()
    for key in (tuple(pair.source), tuple(pair.target)):
        if not data.get(key):
            raise ValueError(f"no segments for {key}")
    plans = fold_plans(pair, data, cfg.seed)
    results = {m: PairResult(pair, dann.canonical_mode(m)) for m in modes}
    for fold in range(N_FOLDS):
        src_tr, tgt_tr, tgt_te = fold_pools(pair, data, fold, plans)
        X_te = segments_to_array(tgt_te)
        y_te = np.array([s.y for s in tgt_te])
        for m in modes:
            mode = dann.canonical_mode(m)
            fcfg = replace(cfg, mode=mode, seed=fold_seed(cfg.seed, fold))
            src_pool = dann.SegmentPool(src_tr, "source")
            tgt_pool = dann.SegmentPool(tgt_tr, "target")
            fold_hp = dann.grid_search(src_pool, tgt_pool, fcfg, jobs=jobs)[0] if grid else hp
            res = dann.fit(src_pool, tgt_pool, fold_hp, fcfg)
            pred = dann.predict(res.model, X_te)
            counts = confusion(pred, y_te)
            results[m].folds.append(FoldResult(fold, counts, metrics(counts)))
            if on_fold:
                on_fold(pair, mode, fold, counts, res)
    return [results[m] for m in modes]


# ---------------------------------------------------------------------------
# output

RESULT_COLUMNS = ["scenario", "source_dataset", "source_position", "target_dataset",
                  "target_position", "mode", "fold", "tp", "tn", "fp", "fn",
                  "sen", "spe", "pre", "f1"]


def write_results_csv(path, results):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in results:
            for f in r.folds:
                c, m = f.counts, f.metrics
                w.writerow([r.pair.scenario, *r.pair.source, *r.pair.target, r.mode, f.fold,
                            c.tp, c.tn, c.fp, c.fn] + [repr(float(getattr(m, k))) for k in METRICS])


def read_results_csv(path):
    grouped = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pair = PairSpec(row["scenario"], (row["source_dataset"], row["source_position"]),
                            (row["target_dataset"], row["target_position"]))
            key = (pair, row["mode"])
            if key not in grouped:
                grouped[key] = PairResult(pair, row["mode"])
            counts = ConfusionCounts(*(int(row[k]) for k in ("tp", "tn", "fp", "fn")))
            grouped[key].folds.append(FoldResult(int(row["fold"]), counts, metrics(counts)))
    return list(grouped.values())


@dataclass
class ReportTable:
    columns: list
    rows: list  # (metric, mode, [cell strings])

    def to_text(self):
        head = ["", ""] + self.columns
        body = [[m.upper() if m != "f1" else "F1", MODE_LABELS[mode]] + cells
                for m, mode, cells in self.rows]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(head, widths)).rstrip()]
        for r in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        lines.append(f"{SIG_ADL} p < 0.05 DAFD_adl vs Source-only; "
                     f"{SIG_DAFD} p < 0.05 DAFD vs Source-only (pooled-variance t-test on fold scores)")
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "mode"] + self.columns)
            for m, mode, cells in self.rows:
                w.writerow([m, mode] + cells)


def _fold_scores(results, mode, metric):
    return [getattr(f.metrics, metric) for r in results if r.mode == mode for f in r.folds]


def _significant(results, mode, metric):
    a = _fold_scores(results, mode, metric)
    b = _fold_scores(results, "SourceOnly", metric)
    if len(a) < 2 or len(b) < 2:
        return False
    return ttest(a, b).significant


def build_report(results):
    """Mean-over-pairs table, one column per scenario, with significance markers."""
    if not results:
        raise ValueError("no results to report")
    columns = sorted({r.pair.column for r in results})
    by_col = {c: [r for r in results if r.pair.column == c] for c in columns}
    rows = []
    for metric in METRICS:
        for mode in REPORT_MODES:
            cells = []
            for c in columns:
                rs = [r for r in by_col[c] if r.mode == mode]
                if not rs:
                    cells.append("-")
                    continue
                val = 100.0 * float(np.mean([getattr(r.mean, metric) for r in rs]))
                mark = ""
                if mode == "DAFD_adl" and _significant(by_col[c], mode, metric):
                    mark = SIG_ADL
                elif mode == "DAFD" and _significant(by_col[c], mode, metric):
                    mark = SIG_DAFD
                cells.append(f"{val:.2f}{mark}")
            rows.append((metric, mode, cells))
    return ReportTable(columns, rows)


def export_features(model, segments, path):
    """Eval-mode extractor features, one CSV row per segment (40 values, label, domain)."""
    X = segments_to_array(segments)
    feats = nn.extract(model, X, "eval")[0] if len(X) else np.zeros((0, nn.FEATURE_DIM))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(nn.FEATURE_DIM)] + ["label", "domain"])
        for s, row in zip(segments, feats):
            w.writerow([repr(float(v)) for v in row] + [s.label or "", s.domain])
    return len(segments)


# ---------------------------------------------------------------------------
# synthetic benchmark

SYNTH_SOURCE, SYNTH_TARGET = ("synth", "WA"), ("synth", "RP")


def synthetic_benchmark(seed=0, n_subjects=20, trials_per_class=5, rotation_deg=25.0,
                        gains=(0.9, 1.1, 1.0), noise_sigma=0.03):
    """Source/target segment pools from one latent population and a shifted second sensor.

    Returns ``(pair, data)`` ready for :func:`run_pair`.
    """
    from .ingest import DomainShift, SynthSpec, synth_trials
    from .signal import preprocess_many

    base = SynthSpec(n_subjects=n_subjects, trials_per_class_per_subject=trials_per_class,
                     noise_sigma=noise_sigma, seed=seed, position=SYNTH_SOURCE[1])
    shifted = replace(base, position=SYNTH_TARGET[1],
                      domain_shift=DomainShift(math.radians(rotation_deg), tuple(gains)))
    data = {SYNTH_SOURCE: preprocess_many(synth_trials(base), domain="source"),
            SYNTH_TARGET: preprocess_many(synth_trials(shifted), domain="target")}
    return PairSpec("cross_position", SYNTH_SOURCE, SYNTH_TARGET), data
