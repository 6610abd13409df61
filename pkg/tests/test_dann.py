import math
from dataclasses import replace

import numpy as np
import pytest

from dafd import dann, nn
from dafd.signal import Segment


def _segs(n_adl, n_fall, domain="source", n_subjects=5, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_adl + n_fall):
        label = "ADL" if i < n_adl else "Fall"
        out.append(Segment(rng.uniform(0, 1, (66, 3)), label, domain, f"S{i % n_subjects}", f"t{i}"))
    return out


def test_grid_values():
    grid = list(dann.hyperparameter_grid())
    assert len(grid) == 27 and len(set(grid)) == 27
    assert {h.dropout for h in grid} == {0.1, 0.2, 0.5}
    assert {h.lr for h in grid} == {0.001, 0.0005, 0.0001}
    assert {h.lam for h in grid} == {0.31, 1.0, 1.3}


def test_hyperparam_and_config_validation():
    with pytest.raises(ValueError):
        dann.Hyperparams(dropout=1.0)
    with pytest.raises(ValueError):
        dann.Hyperparams(lr=0.0)
    with pytest.raises(ValueError):
        dann.Hyperparams(lam=-0.1)
    with pytest.raises(ValueError):
        dann.TrainConfig(batch_per_domain=0)
    with pytest.raises(ValueError):
        dann.TrainConfig(val_fraction=1.0)
    assert dann.canonical_mode("dafd_adl") == "DAFD_adl"
    with pytest.raises(ValueError):
        dann.canonical_mode("semi")


def test_pool_domain_and_class_index():
    pool = dann.SegmentPool(_segs(6, 4))
    idx = pool.class_index
    assert sorted(np.concatenate([idx[0], idx[1]]).tolist()) == list(range(10))
    with pytest.raises(ValueError):
        dann.SegmentPool(_segs(2, 2, "target"), "source")
    assert np.all(pool.masked().y == -1) and np.array_equal(pool.masked().true_y, pool.true_y)


def test_oversampling_balance():
    pool = dann.SegmentPool(_segs(90, 10))
    cfg = dann.TrainConfig(mode="SourceOnly")
    rng = np.random.default_rng(0)
    falls = total = 0
    for _ in range(50):
        for b in dann.make_epoch_batches(pool, None, cfg, rng):
            falls += int(np.sum(pool.y[b.labeled] == 1))
            total += len(b.labeled)
    assert 0.45 <= falls / total <= 0.55
    assert dann.epoch_length(pool.y, 4) == math.ceil(90 / 4)


def test_batches_by_mode():
    src = dann.SegmentPool(_segs(12, 8))
    tgt = dann.SegmentPool(_segs(10, 10, "target", seed=1), "target")
    rng = np.random.default_rng(0)
    lab, unl, batches = dann.epoch_batches_for_mode(src, tgt, dann.TrainConfig(mode="SourceOnly"), rng)
    assert unl is None and all(b.target is None for b in batches)

    lab, unl, batches = dann.epoch_batches_for_mode(src, tgt, dann.TrainConfig(mode="DAFD"), rng)
    assert all(len(b.labeled) == 4 and len(b.target) == 4 for b in batches)
    assert np.all(unl.y == -1)

    for _ in range(20):
        lab, unl, batches = dann.epoch_batches_for_mode(src, tgt, dann.TrainConfig(mode="DAFD_adl"), rng)
        for b in batches:
            assert np.all(unl.true_y[b.target] == 0)

    lab, unl, batches = dann.epoch_batches_for_mode(src, tgt, dann.TrainConfig(mode="TargetOnly"), rng)
    assert lab is tgt and unl is None


def test_oversampling_never_fabricates():
    pool = dann.SegmentPool(_segs(9, 3))
    originals = {s.values.tobytes() for s in pool.segments}
    for b in dann.make_epoch_batches(pool, None, dann.TrainConfig(mode="SourceOnly"), np.random.default_rng(3)):
        for row in pool.X[b.labeled]:
            assert row.T.copy().tobytes() in originals


def test_pool_errors():
    src = dann.SegmentPool(_segs(4, 4))
    only_falls = dann.SegmentPool(_segs(0, 6, "target"), "target")
    with pytest.raises(dann.TrainingError):
        dann.epoch_batches_for_mode(src, only_falls, dann.TrainConfig(mode="DAFD_adl"), np.random.default_rng())
    with pytest.raises(dann.TrainingError):
        dann.epoch_batches_for_mode(src, dann.SegmentPool([], "target"), dann.TrainConfig(mode="DAFD"),
                                    np.random.default_rng())
    with pytest.raises(dann.TrainingError):
        dann.epoch_batches_for_mode(dann.SegmentPool([]), None, dann.TrainConfig(mode="SourceOnly"),
                                    np.random.default_rng())


def _xy(seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (4, 3, 66)), np.array([0, 1, 0, 1]), rng.uniform(0, 1, (4, 3, 66))


def test_source_only_step_leaves_domain_head():
    m = nn.init_params(np.random.default_rng(0))
    init = m.copy()
    tr = dann.Trainer(m, dann.Hyperparams(0.2), "SourceOnly", np.random.default_rng(1))
    x, y, _ = _xy()
    for _ in range(3):
        out = tr.train_step(x, y)
        assert out.loss_domain == 0.0
    for k in m.group("domain."):
        assert m.params[k].tobytes() == init.params[k].tobytes()
    assert not np.array_equal(m.params["fall.W1"], init.params["fall.W1"])


def test_step_loss_total_and_determinism():
    x, y, xt = _xy(4)
    runs = []
    for _ in range(2):
        m = nn.init_params(np.random.default_rng(0))
        tr = dann.Trainer(m, dann.Hyperparams(0.5, 0.001, 1.3), "DAFD", np.random.default_rng(2))
        out = tr.train_step(x, y, xt)
        assert out.loss_total == out.loss_fall + out.loss_domain
        assert out.loss_domain > 0
        runs.append(m)
    for k in runs[0].params:
        assert runs[0].params[k].tobytes() == runs[1].params[k].tobytes()


def test_lambda_zero_extractor_grads_match_source_only():
    x, y, xt = _xy(5)
    m = nn.init_params(np.random.default_rng(0))
    captured = []
    real = nn.adam_step

    def spy(model, grads, state, lr, weight_decay=0.0, keys=None):
        captured.append({k: grads[k].copy() for k in grads})
        return real(model, grads, state, lr, weight_decay, keys)

    nn.adam_step = spy
    try:
        dann.Trainer(m.copy(), dann.Hyperparams(0.0, lam=0.0), "DAFD", np.random.default_rng(0)).train_step(x, y, xt)
        dann.Trainer(m.copy(), dann.Hyperparams(0.0, lam=0.0), "SourceOnly", np.random.default_rng(0)).train_step(x, y)
    finally:
        nn.adam_step = real
    for k in m.group("f."):
        np.testing.assert_array_equal(captured[0][k], captured[1][k])


def test_non_finite_loss_aborts():
    m = nn.init_params(np.random.default_rng(0))
    m.params["fall.b2"][:] = np.inf
    tr = dann.Trainer(m, dann.Hyperparams(), "SourceOnly", np.random.default_rng(0))
    x, y, _ = _xy()
    with pytest.raises((dann.TrainingError, FloatingPointError)):
        tr.train_step(x, y)


def _stub(vals):
    seq = iter(vals)

    def epoch_fn(epoch):
        v = next(seq)
        return dann.LossBreakdown(v, 0.0), dann.LossBreakdown(v, 0.0)
    return epoch_fn


def test_early_stopping_state_machine():
    best, hist = dann.run_early_stopping(_stub([5, 3, 4, 4, 4, 4]), 100, 2, snapshot=lambda: "snap")
    assert (hist.best_epoch, hist.stopped_epoch) == (2, 4) and best == "snap"
    _, hist = dann.run_early_stopping(_stub([5, 4, 3]), 3, 10)
    assert (hist.best_epoch, hist.stopped_epoch) == (3, 3)


def test_split_validation_subject_disjoint():
    pool = dann.SegmentPool(_segs(20, 20, n_subjects=10))
    tr, va = dann.split_validation(pool, 0.2, np.random.default_rng(0))
    assert len(set(va.subjects)) == 2
    assert not set(tr.subjects) & set(va.subjects)
    with pytest.raises(dann.TrainingError):
        dann.split_validation(dann.SegmentPool(_segs(3, 3, n_subjects=1)), 0.2, np.random.default_rng(0))


def test_fit_one_epoch(small_segments):
    src, tgt = small_segments
    cfg = dann.TrainConfig(mode="DAFD", max_epochs=1, seed=3)
    res = dann.fit(dann.SegmentPool(src), dann.SegmentPool(tgt, "target"), dann.Hyperparams(), cfg)
    assert len(res.history.train) == 1 and res.history.best_epoch == 1
    for tr, va in zip(res.history.train, res.history.val):
        assert tr.loss_total == tr.loss_fall + tr.loss_domain


def test_fit_mode_isolation(small_segments):
    src, tgt = small_segments
    init = nn.init_params(np.random.default_rng(8))
    res = dann.fit(dann.SegmentPool(src), dann.SegmentPool(tgt, "target"), dann.Hyperparams(),
                   dann.TrainConfig(mode="TargetOnly", max_epochs=3, seed=1), model=init.copy())
    for k in init.group("domain."):
        assert res.model.params[k].tobytes() == init.params[k].tobytes()
    assert all(h.loss_domain == 0.0 for h in res.history.train)


def test_target_only_learns(small_segments):
    """Validation fall accuracy above 0.9 within 50 epochs."""
    from dafd.evaluation import synthetic_benchmark
    _, data = synthetic_benchmark(seed=0, n_subjects=10, trials_per_class=4)
    tgt = dann.SegmentPool([replace(s, domain="target") for s in data[("synth", "RP")]], "target")
    cfg = dann.TrainConfig(mode="TargetOnly", max_epochs=50, seed=0)
    res = dann.fit(dann.SegmentPool([]), tgt, dann.Hyperparams(), cfg)
    _, va = dann.split_validation(tgt, cfg.val_fraction, dann._streams(cfg.seed)[1])
    acc = np.mean(dann.predict(res.model, va.X) == va.true_y)
    assert acc > 0.9


def test_loss_fall_decreases_early():
    from dafd.evaluation import synthetic_benchmark
    drops = []
    for seed in range(5):
        _, data = synthetic_benchmark(seed=seed, n_subjects=8, trials_per_class=4)
        src = dann.SegmentPool(data[("synth", "WA")])
        res = dann.fit(src, None, dann.Hyperparams(), dann.TrainConfig(mode="SourceOnly", max_epochs=5,
                                                                       patience=10, seed=seed))
        drops.append(res.history.train[0].loss_fall - res.history.train[-1].loss_fall)
    assert np.median(drops) > 0


def test_grid_search_small(small_segments):
    src, tgt = small_segments
    cfg = dann.TrainConfig(mode="DAFD", max_epochs=1, seed=0)
    grid = list(dann.hyperparameter_grid())[:3]
    best, results = dann.grid_search(dann.SegmentPool(src), dann.SegmentPool(tgt, "target"), cfg, grid)
    assert len(results) == 3
    assert min(r.best_val_loss for r in results) == [r for r in results if r.hyperparams == best][0].best_val_loss
    assert len({r.seed for r in results}) == 3
    best2, results2 = dann.grid_search(dann.SegmentPool(src), dann.SegmentPool(tgt, "target"), cfg, grid)
    assert [r.best_val_loss for r in results] == [r.best_val_loss for r in results2]
