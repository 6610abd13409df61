import math

import numpy as np
import pytest

from dafd import ingest
from dafd.ingest import ColumnMapping, DomainShift, IngestError, SynthSpec, TrialRecord
from dafd.signal import impact_index


def _trial(tid="t1", n=100, code="A1", label="ADL", rate=20.0, seed=0):
    x = np.random.default_rng(seed).normal(0, 1, (n, 3))
    return TrialRecord(tid, "S1", "umafall", "WA", code, label, rate, x)


def test_trial_validation():
    with pytest.raises(ValueError):
        _trial(code="F1", label="ADL")
    with pytest.raises(ValueError):
        _trial(rate=0.0)
    with pytest.raises(ValueError):
        TrialRecord("t", "S", "d", "WA", "A1", "ADL", 20.0, np.zeros((0, 3)))
    bad = np.zeros((5, 3))
    bad[2, 0] = np.nan
    with pytest.raises(ValueError):
        TrialRecord("t", "S", "d", "WA", "A1", "ADL", 20.0, bad)


def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.csv").write_text(",".join(ingest.MANIFEST_COLUMNS) + "\n")
    assert ingest.load_canonical(tmp_path / "manifest.csv") == []


def test_roundtrip_two_trials(tmp_path):
    trials = [_trial("a", seed=1), _trial("b", code="F2", label="Fall", seed=2)]
    manifest = ingest.write_canonical(trials, tmp_path)
    back = ingest.load_canonical(manifest)
    assert len(back) == 2
    for a, b in zip(trials, back):
        assert len(b.samples) == 100
        assert (a.trial_id, a.label, a.activity_code) == (b.trial_id, b.label, b.activity_code)
        np.testing.assert_allclose(b.samples, a.samples, rtol=1e-12)


def test_nan_in_trial_names_file_and_line(tmp_path):
    manifest = ingest.write_canonical([_trial("a", n=5)], tmp_path)
    path = tmp_path / "trials" / "a.csv"
    lines = path.read_text().splitlines()
    parts = lines[3].split(",")
    parts[0] = "NaN"
    lines[3] = ",".join(parts)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(IngestError, match=r"a\.csv:4"):
        ingest.load_canonical(manifest)


def test_manifest_errors(tmp_path):
    with pytest.raises(IngestError):
        ingest.load_canonical(tmp_path / "missing.csv")
    m = tmp_path / "manifest.csv"
    m.write_text(",".join(ingest.MANIFEST_COLUMNS) + "\nx,y\n")
    with pytest.raises(IngestError, match="manifest.csv:2"):
        ingest.load_canonical(m)


def _write_raw(d, name, rows, header="t,ax,ay,az"):
    (d / name).write_text(header + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")


def test_adapt_units_and_labels(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    _write_raw(raw, "S2_F3_1.csv", [[0, 9.80665, 0, 0], [1, 0, 9.80665, 0]])
    _write_raw(raw, "S1_A6_1.csv", [[0, 0, 0, 9.80665], [1, 0, 0, 9.80665]])
    _write_raw(raw, "notes.txt", [[1]])
    mapping = ColumnMapping("ax", "ay", "az", rate_hz=50.0, unit="m_per_s2", time_col="t")
    trials = ingest.adapt_dataset(raw, mapping, "umafall", "WA")
    assert [t.subject_id for t in trials] == ["S1", "S2"]   # sorted by file name
    assert trials[0].label == "ADL" and trials[1].label == "Fall"
    assert trials[1].samples[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_mapping_from_yaml(tmp_path):
    p = tmp_path / "m.yaml"
    p.write_text("x_col: 1\ny_col: 2\nz_col: 3\nrate_hz: 20\nunit: g\nlabel_prefix_fall: F\n")
    m = ColumnMapping.from_file(p)
    assert m.x_col == 1 and m.rate_hz == 20
    assert m.label_for("F3") == "Fall" and m.label_for("A6") == "ADL"
    with pytest.raises(IngestError):
        m.label_for("X1")
    p.write_text("x_col: 1\ny_col: 2\nz_col: 3\nrate_hz: 20\ncolour: red\n")
    with pytest.raises(ValueError):
        ColumnMapping.from_file(p)


def test_synth_counts_and_determinism():
    spec = SynthSpec(n_subjects=2, trials_per_class_per_subject=3, seed=5)
    a, b = ingest.synth_trials(spec), ingest.synth_trials(spec)
    assert len(a) == 12
    assert sum(t.label == "Fall" for t in a) == 6
    for x, y in zip(a, b):
        assert x.samples.tobytes() == y.samples.tobytes()


def test_synth_identity_shift_matches():
    spec = SynthSpec(n_subjects=2, trials_per_class_per_subject=2, seed=9)
    same = SynthSpec(n_subjects=2, trials_per_class_per_subject=2, seed=9, position="RP",
                     domain_shift=DomainShift())
    for x, y in zip(ingest.synth_trials(spec), ingest.synth_trials(same)):
        assert np.array_equal(x.samples, y.samples)


def test_synth_fall_phenomenology():
    spec = SynthSpec(n_subjects=4, trials_per_class_per_subject=5, seed=11)
    falls = [t for t in ingest.synth_trials(spec) if t.label == "Fall"]
    for tr, (lo, hi) in zip(falls, ingest.synth_fall_timelines(spec)):
        norm = np.linalg.norm(tr.samples, axis=1)
        p = impact_index(tr.samples)
        assert lo <= p <= hi
        assert norm[p] >= 3.0
        assert norm[:p].min() < 0.5           # free-fall dip precedes the impact
        assert abs(np.median(norm[-10:]) - 1.0) < 0.15   # resting plateau


def test_domain_shift_rotation_keeps_vertical():
    x = np.array([[1.0, 0.0, 1.0]])
    out = DomainShift(math.pi / 2).apply(x)
    np.testing.assert_allclose(out, [[0.0, 1.0, 1.0]], atol=1e-15)
    with pytest.raises(ValueError):
        DomainShift(gain=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        DomainShift(rate_hz=0.0)


def test_synth_rate_override():
    spec = SynthSpec(n_subjects=1, trials_per_class_per_subject=1, domain_shift=DomainShift(rate_hz=20.0))
    trials = ingest.synth_trials(spec)
    assert all(t.sample_rate_hz == 20.0 for t in trials)
