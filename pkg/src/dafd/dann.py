"""Adversarial training protocol: oversampled batches, train step, early stopping, grid search."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .signal import segments_to_array

log = logging.getLogger(__name__)

MODES = ("SourceOnly", "DAFD", "DAFD_adl", "TargetOnly")
ADVERSARIAL_MODES = ("DAFD", "DAFD_adl")
MODE_ALIASES = {
    "source_only": "SourceOnly", "dafd": "DAFD", "dafd_adl": "DAFD_adl", "target_only": "TargetOnly",
}

GRID_DROPOUT = (0.1, 0.2, 0.5)
GRID_LR = (0.001, 0.0005, 0.0001)
GRID_LAMBDA = (0.31, 1.0, 1.3)
WEIGHT_DECAY = 0.01


class TrainingError(RuntimeError):
    pass


def canonical_mode(mode):
    if mode in MODES:
        return mode
    try:
        return MODE_ALIASES[mode]
    except KeyError:
        raise ValueError(f"unknown training mode {mode!r}; expected one of {MODES}") from None


@dataclass(frozen=True)
class Hyperparams:
    dropout: float = 0.1
    lr: float = 0.001
    lam: float = 1.0
    weight_decay: float = WEIGHT_DECAY

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def hyperparameter_grid():
    """The 27 (dropout, lr, lambda) tuples, dropout varying slowest."""
    return [Hyperparams(d, lr, lam) for d, lr, lam in
            itertools.product(GRID_DROPOUT, GRID_LR, GRID_LAMBDA)]


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "DAFD"
    batch_per_domain: int = 4
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if self.batch_per_domain < 1:
            raise ValueError("batch_per_domain must be at least 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be positive")


class SegmentPool:
    """Segments of one domain as a network-ready array plus class indices.

    ``y`` is 1 (Fall), 0 (ADL) or -1 (unlabeled).  ``mask_labels`` hides the
    labels from training code while keeping them in ``true_y`` for filtering
    by construction (the ADL-only target pool) and for evaluation.
    """

    def __init__(self, segments, domain="source", mask_labels=False):
        self.segments = list(segments)
        self.domain = domain
        for s in self.segments:
            if s.domain != domain:
                raise ValueError(f"segment {s.trial_id} has domain {s.domain!r}, pool is {domain!r}")
        self.X = segments_to_array(self.segments)
        self.true_y = np.array([s.y for s in self.segments], dtype=np.int64)
        self.y = np.full(len(self.segments), -1, dtype=np.int64) if mask_labels else self.true_y.copy()
        self.subjects = np.array([s.subject_id for s in self.segments], dtype=object)
        self.mask_labels = mask_labels

    def __len__(self):
        return len(self.segments)

    @property
    def class_index(self):
        return {c: np.nonzero(self.y == c)[0] for c in (0, 1)}

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SegmentPool([self.segments[i] for i in idx], self.domain, self.mask_labels)

    def masked(self):
        return SegmentPool(self.segments, self.domain, mask_labels=True)

    def adl_only(self):
        return self.subset(np.nonzero(self.true_y == 0)[0])

    def by_subjects(self, subjects):
        keep = set(subjects)
        return self.subset([i for i, s in enumerate(self.subjects) if s in keep])


@dataclass
class LossBreakdown:
    loss_fall: float = 0.0
    loss_domain: float = 0.0

    @property
    def loss_total(self):
        return self.loss_fall + self.loss_domain


@dataclass
class TrainHistory:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def rows(self):
        for i, (tr, va) in enumerate(zip(self.train, self.val), start=1):
            yield {"epoch": i,
                   "train_loss_fall": tr.loss_fall, "train_loss_domain": tr.loss_domain,
                   "train_loss_total": tr.loss_total,
                   "val_loss_fall": va.loss_fall, "val_loss_domain": va.loss_domain,
                   "val_loss_total": va.loss_total}


@dataclass
class Batch:
    labeled: np.ndarray
    target: np.ndarray | None = None


def _training_pools(source, target, mode):
    """(labeled pool, unlabeled target pool or None) for a mode."""
    if mode == "TargetOnly":
        if target is None or len(target) == 0:
            raise TrainingError("TargetOnly needs a non-empty target pool")
        return target, None
    if source is None or len(source) == 0:
        raise TrainingError(f"{mode} needs a non-empty source pool")
    if mode == "SourceOnly":
        return source, None
    if target is None or len(target) == 0:
        raise TrainingError(f"{mode} needs a non-empty target pool")
    if mode == "DAFD_adl":
        target = target.adl_only()
        if len(target) == 0:
            raise TrainingError("DAFD_adl: target pool has no ADL segments")
    return source, target.masked()


def oversampling_weights(y):
    """Per-segment sampling weight proportional to 1/class frequency."""
    w = np.zeros(len(y))
    present = [c for c in (0, 1) if np.any(y == c)]
    for c in present:
        idx = y == c
        w[idx] = 1.0 / idx.sum()
    if not present:
        w[:] = 1.0
    return w / w.sum()


def epoch_length(labeled_y, batch_per_domain):
    counts = [int(np.sum(labeled_y == c)) for c in (0, 1)]
    majority = max(counts) if max(counts) else len(labeled_y)
    return max(1, math.ceil(majority / batch_per_domain))


def make_epoch_batches(source, target, cfg, rng):
    """One epoch of index batches into the (mode-resolved) pools.

    Labeled indices are drawn with replacement, class-balanced; target
    indices cycle through a fresh permutation.  ``source``/``target`` here are
    the pools returned by :func:`_training_pools`.
    """
    labeled, unl = source, target
    bpd = cfg.batch_per_domain
    n_batches = epoch_length(labeled.y, bpd)
    w = oversampling_weights(labeled.y)
    draws = rng.choice(len(labeled), size=n_batches * bpd, replace=True, p=w)
    if unl is not None:
        reps = math.ceil(n_batches * bpd / len(unl))
        perm = np.concatenate([rng.permutation(len(unl)) for _ in range(reps)])
    batches = []
    for b in range(n_batches):
        lab = draws[b * bpd:(b + 1) * bpd]
        tgt = perm[b * bpd:(b + 1) * bpd] if unl is not None else None
        batches.append(Batch(lab, tgt))
    return batches


def epoch_batches_for_mode(source, target, cfg, rng):
    """Resolve pools for ``cfg.mode`` and build one epoch of batches."""
    labeled, unl = _training_pools(source, target, cfg.mode)
    return labeled, unl, make_epoch_batches(labeled, unl, cfg, rng)


class Trainer:
    """Owns a model, its Adam state and the dropout stream for one run."""

    def __init__(self, model, hp, mode, rng):
        self.model = model
        self.hp = hp
        self.mode = canonical_mode(mode)
        self.adam = nn.AdamState()
        self.rng = rng
        self.step_count = 0
        if self.mode in ADVERSARIAL_MODES:
            self.keys = list(model.params)
        else:
            self.keys = [k for k in model.params if not k.startswith(nn.DOMAIN_PREFIX)]

    def train_step(self, x_lab, y_lab, x_tgt=None):
        """One update; returns the losses measured before the update."""
        hp, m = self.hp, self.model
        adversarial = self.mode in ADVERSARIAL_MODES
        if adversarial and x_tgt is None:
            raise TrainingError(f"{self.mode} step needs target segments")
        n_total = len(x_lab) + (len(x_tgt) if adversarial else 0)
        _, _, _, c_lab = nn.forward_pass(m, x_lab, hp.lam, "train", self.rng, hp.dropout)
        dom_w = np.full(len(x_lab), 1.0 / n_total) if adversarial else None
        grads, losses = nn.backward_pass(
            m, c_lab, y_lab, np.zeros(len(x_lab), dtype=np.int64) if adversarial else None,
            domain_weights=dom_w)
        caches = [c_lab]
        loss_dom = losses.get("domain", 0.0)
        if adversarial:
            _, _, _, c_tgt = nn.forward_pass(m, x_tgt, hp.lam, "train", self.rng, hp.dropout)
            g_tgt, l_tgt = nn.backward_pass(
                m, c_tgt, None, np.ones(len(x_tgt), dtype=np.int64),
                domain_weights=np.full(len(x_tgt), 1.0 / n_total))
            for k in grads:
                grads[k] = grads[k] + g_tgt[k]
            loss_dom += l_tgt["domain"]
            caches.append(c_tgt)
        out = LossBreakdown(losses["fall"], loss_dom)
        if not math.isfinite(out.loss_total):
            raise TrainingError(f"non-finite loss at step {self.step_count}: {out}")
        nn.adam_step(m, grads, self.adam, hp.lr, hp.weight_decay, keys=self.keys)
        for c in caches:
            nn.apply_running_stats(m, c)
        self.step_count += 1
        return out


def train_step(trainer, batch, labeled, target=None):
    """Run one step for ``batch`` (index sets into ``labeled``/``target``)."""
    x_tgt = target.X[batch.target] if batch.target is not None else None
    return trainer.train_step(labeled.X[batch.labeled], labeled.y[batch.labeled], x_tgt)


def evaluate_losses(model, labeled, target=None, adversarial=False):
    """Eval-mode losses: fall CE over labeled rows, domain CE over both pools."""
    out = LossBreakdown()
    if labeled is not None and len(labeled):
        _, fl, dl, _ = nn.forward_pass(model, labeled.X, 0.0, "eval")
        lab = labeled.y >= 0
        if lab.any():
            out.loss_fall = nn.softmax_ce(fl[lab], labeled.y[lab])[0]
    if adversarial:
        parts, n = 0.0, 0
        for pool, d in ((labeled, 0), (target, 1)):
            if pool is None or not len(pool):
                continue
            _, _, dl, _ = nn.forward_pass(model, pool.X, 0.0, "eval")
            parts += nn.softmax_ce(dl, np.full(len(pool), d))[0] * len(pool)
            n += len(pool)
        out.loss_domain = parts / n if n else 0.0
    return out


def predict_proba(model, X):
    if len(X) == 0:
        return np.zeros((0, 2))
    _, fl, _, _ = nn.forward_pass(model, X, 0.0, "eval")
    return nn.softmax(fl)


def predict(model, X):
    return predict_proba(model, X).argmax(axis=1)


def run_early_stopping(epoch_fn, max_epochs, patience, snapshot=None):
    """Drive ``epoch_fn(epoch) -> (train, val)`` LossBreakdowns until patience runs out.

    ``snapshot()`` is called whenever validation ``loss_total`` improves; its
    latest return value is handed back with the history.
    """
    hist = TrainHistory()
    best, best_state, since = math.inf, None, 0
    for epoch in range(1, max_epochs + 1):
        tr, va = epoch_fn(epoch)
        hist.train.append(tr)
        hist.val.append(va)
        hist.stopped_epoch = epoch
        if va.loss_total < best:
            best, since = va.loss_total, 0
            hist.best_epoch = epoch
            best_state = snapshot() if snapshot else None
        else:
            since += 1
            if since >= patience:
                break
    return best_state, hist


def split_validation(pool, val_fraction, rng):
    """Subject-disjoint (train, val) split of a labeled pool."""
    subjects = sorted(set(pool.subjects))
    if len(subjects) < 2:
        raise TrainingError("need at least 2 subjects to split a validation set")
    n_val = min(len(subjects) - 1, max(1, int(round(val_fraction * len(subjects)))))
    order = rng.permutation(len(subjects))
    val_subj = {subjects[i] for i in order[:n_val]}
    tr = [i for i, s in enumerate(pool.subjects) if s not in val_subj]
    va = [i for i, s in enumerate(pool.subjects) if s in val_subj]
    return pool.subset(tr), pool.subset(va)


@dataclass
class FitResult:
    model: nn.ModelParams
    history: TrainHistory
    hyperparams: Hyperparams
    config: TrainConfig

    @property
    def best_val_loss(self):
        return self.history.val[self.history.best_epoch - 1].loss_total


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def fit(source, target, hp, cfg, model=None, on_epoch=None):
    """Train one model with early stopping on validation ``loss_total``.

    The labeled pool (source, or target for TargetOnly) is split
    subject-disjointly; in adversarial modes a matching number of target
    segments is held out for the validation domain term.  Returns the model
    from the best epoch.
    """
    mode = cfg.mode
    init_rng, split_rng, batch_rng, drop_rng = _streams(cfg.seed)
    labeled, unl = _training_pools(source, target, mode)
    lab_tr, lab_va = split_validation(labeled, cfg.val_fraction, split_rng)
    unl_tr = unl_va = None
    if unl is not None:
        n_va = min(len(lab_va), len(unl) - 1)
        order = split_rng.permutation(len(unl))
        unl_va = unl.subset(np.sort(order[:n_va])) if n_va > 0 else None
        unl_tr = unl.subset(np.sort(order[n_va:]))
    model = model or nn.init_params(init_rng)
    trainer = Trainer(model, hp, mode, drop_rng)
    adversarial = mode in ADVERSARIAL_MODES

    def epoch_fn(epoch):
        batches = make_epoch_batches(lab_tr, unl_tr, cfg, batch_rng)
        acc = LossBreakdown()
        for b in batches:
            step = train_step(trainer, b, lab_tr, unl_tr)
            acc.loss_fall += step.loss_fall
            acc.loss_domain += step.loss_domain
        acc.loss_fall /= len(batches)
        acc.loss_domain /= len(batches)
        va = evaluate_losses(trainer.model, lab_va, unl_va, adversarial)
        if on_epoch:
            on_epoch(epoch, acc, va)
        return acc, va

    best_model, hist = run_early_stopping(epoch_fn, cfg.max_epochs, cfg.patience,
                                          snapshot=lambda: trainer.model.copy())
    return FitResult(best_model, hist, hp, cfg)


@dataclass
class GridResult:
    index: int
    hyperparams: Hyperparams
    seed: int
    best_val_loss: float
    best_epoch: int
    stopped_epoch: int


def tuple_seed(master_seed, index):
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _grid_job(args):
    source, target, hp, cfg, idx = args
    res = fit(source, target, hp, cfg)
    return GridResult(idx, hp, cfg.seed, res.best_val_loss, res.history.best_epoch,
                      res.history.stopped_epoch)


def grid_search(source, target, cfg, grid=None, jobs=1):
    """Fit one model per grid tuple; pick the lowest best-epoch validation loss_total."""
    grid = hyperparameter_grid() if grid is None else list(grid)
    jobs_args = []
    for i, hp in enumerate(grid):
        c = TrainConfig(cfg.mode, cfg.batch_per_domain, cfg.max_epochs, cfg.patience,
                        tuple_seed(cfg.seed, i), cfg.val_fraction)
        jobs_args.append((source, target, hp, c, i))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_grid_job, jobs_args))
    else:
        results = [_grid_job(a) for a in jobs_args]
    best = min(results, key=lambda r: (r.best_val_loss, r.index))
    return best.hyperparams, results


def hyperparams_dict(hp):
    return asdict(hp)
