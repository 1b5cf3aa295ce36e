import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msgtl.funnelgen import (DatasetValidationError, FunnelConfig, FunnelConfigError, StageSpec,
                             check_invariants, export_dataset, generate, load_stage_csv,
                             minimal_config, paper_like_config, prepare_features)


def _expected_counts(config):
    out, m = [], float(config.m0)
    for s in config.stages:
        out.append(m)
        m *= s.survival_rate
    return out, m


def _chain_sigma(config, q):
    # binomial spread of the count reaching stage q from m0 draws
    p = math.prod(s.survival_rate for s in config.stages[:q])
    return math.sqrt(config.m0 * p * (1.0 - p))


# -- generate: examples ------------------------------------------------------

def test_full_survival_keeps_everyone():
    cfg = FunnelConfig([StageSpec(f"s{q}", 2, 1.0, 0.5) for q in range(4)], m0=150, seed=2)
    ds = generate(cfg)
    for s in ds.stages:
        assert s.m == 150
        assert (s.y == 1).all()


def test_paper_like_counts_follow_survival_products():
    cfg = paper_like_config(seed=0)
    ds = generate(cfg)
    expected, finalists = _expected_counts(cfg)
    assert len(ds) == 12 and ds[0].m == 10000
    for q, (st_, e) in enumerate(zip(ds.stages, expected)):
        assert abs(st_.m - e) <= 3 * _chain_sigma(cfg, q) + 1, (q, st_.m, e)
    n_final = int(ds[-1].y.sum())
    assert abs(n_final - finalists) <= 3 * _chain_sigma(cfg, 12) + 1
    assert 15 <= ds[-1].m <= 35
    ms = [s.m for s in ds.stages]
    ns = [s.n for s in ds.stages]
    assert all(a > b for a, b in zip(ms, ms[1:]))
    assert all(a < b for a, b in zip(ns, ns[1:]))


def test_paper_like_phases_and_wide_blocks():
    ds = generate(paper_like_config(seed=1, m0=500))
    phases = [s.phase for s in ds.stages]
    assert phases == ["conversion"] * 7 + ["evaluation"] * 5
    assert max(s.n_new for s in ds.stages) == 300


def _max_abs_corr(X, y):
    yc = y - y.mean()
    Xc = X - X.mean(axis=0)
    den = np.sqrt((Xc ** 2).sum(axis=0) * (yc ** 2).sum())
    den[den == 0] = np.inf
    return float(np.max(np.abs(Xc.T @ yc) / den))


def test_zero_informativeness_labels_independent_of_features():
    stages = [StageSpec(f"s{q}", 4, 0.5, 0.0, categorical=(3,) if q == 0 else ()) for q in range(3)]
    ds = generate(FunnelConfig(stages, m0=2000, seed=5))
    rng = np.random.default_rng(0)
    for s in ds.stages:
        observed = _max_abs_corr(s.X, s.y.astype(float))
        null = [_max_abs_corr(s.X, rng.permutation(s.y).astype(float)) for _ in range(199)]
        p = (1 + sum(v >= observed for v in null)) / 200
        assert p > 0.01, (s.name, observed, p)


def test_informative_stage_is_not_independent():
    stages = [StageSpec(f"s{q}", 4, 0.5, 0.8) for q in range(2)]
    ds = generate(FunnelConfig(stages, m0=2000, seed=5))
    s = ds[0]
    rng = np.random.default_rng(0)
    observed = _max_abs_corr(s.X, s.y.astype(float))
    null = [_max_abs_corr(s.X, rng.permutation(s.y).astype(float)) for _ in range(99)]
    assert observed > max(null)


@pytest.mark.parametrize("bad", [
    dict(stages=[StageSpec("a", 2, 0.5, 0.5)]),
    dict(m0=99),
    dict(drift=-0.1),
    dict(stages=[StageSpec("a", 2, 0.0, 0.5), StageSpec("b", 2, 0.5, 0.5)]),
    dict(stages=[StageSpec("a", 2, 1.2, 0.5), StageSpec("b", 2, 0.5, 0.5)]),
    dict(stages=[StageSpec("a", 2, 0.5, 1.5), StageSpec("b", 2, 0.5, 0.5)]),
])
def test_invalid_configs_rejected(bad):
    cfg = minimal_config(n_stages=2).replace(**bad)
    with pytest.raises(FunnelConfigError):
        generate(cfg)


# -- generate: properties ----------------------------------------------------

stage_specs = st.builds(
    StageSpec,
    name=st.sampled_from(["a", "b", "c"]),
    new_features=st.integers(1, 6),
    survival_rate=st.floats(0.2, 1.0),
    informativeness=st.floats(0.0, 1.0),
    categorical=st.lists(st.integers(2, 4), max_size=2).map(tuple),
    stage_noise=st.floats(0.0, 2.0),
)


@given(stages=st.lists(stage_specs, min_size=2, max_size=5), m0=st.integers(100, 600),
       seed=st.integers(0, 10 ** 6), drift=st.floats(0.0, 1.0), cohort=st.integers(0, 2))
def test_generated_datasets_satisfy_invariants(stages, m0, seed, drift, cohort):
    cfg = FunnelConfig(stages, m0=m0, drift=drift, seed=seed, cohort=cohort)
    ds = generate(cfg)
    check_invariants(ds)
    m_prev = m0
    n_prev = 0
    for q, (s, spec) in enumerate(zip(ds.stages, stages)):
        assert s.m == m_prev
        assert s.n == n_prev + spec.n_columns
        assert s.columns[:n_prev] == ds[q - 1].columns if q else True
        # realized survival: deterministic top share, well inside a 3 sigma binomial band
        n_pos = int(s.y.sum())
        assert abs(n_pos - spec.survival_rate * s.m) <= 3 * math.sqrt(
            s.m * spec.survival_rate * (1 - spec.survival_rate)) + 1
        m_prev, n_prev = n_pos, s.n
        if q > 0:
            assert set(s.ids.tolist()) <= set(ds[q - 1].ids.tolist())


def test_check_invariants_reports_coordinates():
    ds = generate(minimal_config(n_stages=3, m0=200, seed=4))
    ds.stages[2].X[1, 0] += 1.0
    with pytest.raises(DatasetValidationError, match=r"stage 2 .*row 1 .*column 0"):
        check_invariants(ds)


def test_monotone_informativeness():
    grid = [0.0, 0.1, 0.25, 0.4, 0.55, 0.7, 0.85, 1.0]
    for seed in range(3):
        seps = []
        for a in grid:
            stages = [StageSpec("s0", 5, 0.5, a), StageSpec("s1", 5, 0.5, 0.5)]
            s = generate(FunnelConfig(stages, m0=2000, seed=seed))[0]
            seps.append(_max_abs_corr(s.X, s.y.astype(float)))
        assert all(b >= a for a, b in zip(seps, seps[1:])), (seed, np.round(seps, 4))


@pytest.mark.parametrize("drift", [0.0, 0.3, 0.8])
def test_drift_shifts_feature_means(drift):
    stages = [StageSpec("s0", 40, 0.5, 0.5), StageSpec("s1", 2, 0.5, 0.5)]
    a = generate(FunnelConfig(stages, m0=5000, drift=drift, seed=9, cohort=0))[0].X
    b = generate(FunnelConfig(stages, m0=5000, drift=drift, seed=9, cohort=1))[0].X
    shift = np.abs(b.mean(axis=0) - a.mean(axis=0))
    sigma = np.sqrt(a.var(axis=0) / a.shape[0] + b.var(axis=0) / b.shape[0])
    assert (np.abs(shift - drift) <= 3 * sigma).mean() >= 0.95
    if drift > 0:
        assert (b.std(axis=0) > a.std(axis=0)).all()


def test_cohorts_share_schema_but_not_applicants():
    a = generate(paper_like_config(seed=3, m0=300, cohort=0))
    b = generate(paper_like_config(seed=3, m0=300, cohort=1))
    assert [s.columns for s in a.stages] == [s.columns for s in b.stages]
    assert not np.array_equal(a[0].X, b[0].X)


def test_generation_is_deterministic():
    a = generate(paper_like_config(seed=3, m0=300))
    b = generate(paper_like_config(seed=3, m0=300))
    for s, t in zip(a.stages, b.stages):
        assert np.array_equal(s.X, t.X) and np.array_equal(s.y, t.y)


# -- feature preparation -----------------------------------------------------

def test_prepare_categorical_one_hot():
    X, names, _ = prepare_features({"c": ["A", "B", "C", "B"]}, {"c": "categorical"})
    assert names == ["c=A", "c=B", "c=C"]
    assert X[1].tolist() == [0.0, 1.0, 0.0]


def test_prepare_numeric_z_score():
    # mean 10, population sd 2
    X, _, fitted = prepare_features({"x": ["8", "12", "8", "12"]}, {"x": "numeric"})
    X2, _, _ = prepare_features({"x": ["12"]}, {"x": "numeric"}, fitted)
    assert fitted[0].mean == 10.0 and fitted[0].sd == 2.0
    assert X2[0, 0] == 1.0
    assert X[:, 0].tolist() == [-1.0, 1.0, -1.0, 1.0]


def test_prepare_unseen_category_is_all_zeros():
    _, _, fitted = prepare_features({"c": ["A", "B", "C"]}, {"c": "categorical"})
    X, _, _ = prepare_features({"c": ["D"]}, {"c": "categorical"}, fitted)
    assert X[0].tolist() == [0.0, 0.0, 0.0]


def test_prepare_zero_variance_warns_and_zeroes(caplog):
    X, _, _ = prepare_features({"x": ["3", "3", "3"]}, {"x": "numeric"})
    assert (X == 0).all()
    assert "zero variance" in caplog.text


def test_prepare_non_numeric_value_names_row():
    with pytest.raises(DatasetValidationError, match="row 1"):
        prepare_features({"x": ["1", "oops"]}, {"x": "numeric"})


# -- CSV ingestion -----------------------------------------------------------

def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fixture(tmp_path, stage2_rows=None, schema=True):
    _write(tmp_path / "s1.csv", ["id", "label", "age", "city"],
           [[1, 1, 20, "X"], [2, 0, 30, "Y"], [3, 1, 40, "X"], [4, 0, 50, "Z"]])
    _write(tmp_path / "s2.csv", ["id", "label", "age", "city", "score"],
           stage2_rows or [[1, 1, 20, "X", 0.5], [3, 0, 40, "X", 1.5]])
    lines = []
    for name, f in (("one", "s1.csv"), ("two", "s2.csv")):
        lines += ["[stage]", f"name = {name}", f"csv = {f}", "id_column = id",
                  "label_column = label"]
        if schema:
            lines.append("schema = schema.txt")
    (tmp_path / "schema.txt").write_text("age = numeric\ncity = categorical\nscore = numeric\n")
    (tmp_path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return tmp_path / "manifest.txt"


def test_load_well_formed_fixture(tmp_path):
    ds = load_stage_csv(_fixture(tmp_path))
    check_invariants(ds)
    assert [s.m for s in ds.stages] == [4, 2]
    assert ds[0].columns == ["age", "city=X", "city=Y", "city=Z"]
    assert ds[1].columns == ds[0].columns + ["score"]
    assert ds[1].ids.tolist() == [1, 3]
    assert ds[1].X[:, 4].tolist() == [-1.0, 1.0]


def test_load_without_schema_reads_numbers(tmp_path):
    _write(tmp_path / "s1.csv", ["id", "label", "a"], [[1, 1, 2.5], [2, 0, 3.5]])
    _write(tmp_path / "s2.csv", ["id", "label", "a", "b"], [[1, 1, 2.5, 7]])
    (tmp_path / "m.txt").write_text(
        "[stage]\nname=a\ncsv=s1.csv\nid_column=id\nlabel_column=label\n"
        "[stage]\nname=b\ncsv=s2.csv\nid_column=id\nlabel_column=label\n")
    ds = load_stage_csv(tmp_path / "m.txt")
    assert ds[1].X.tolist() == [[2.5, 7.0]]


def test_load_missing_id_names_it(tmp_path):
    m = _fixture(tmp_path, [[1, 1, 20, "X", 0.5], [9, 0, 40, "X", 1.5]])
    with pytest.raises(DatasetValidationError, match="id 9 absent"):
        load_stage_csv(m)


def test_load_shared_column_mismatch_gives_coordinates(tmp_path):
    m = _fixture(tmp_path, [[1, 1, 20, "X", 0.5], [3, 0, 41, "X", 1.5]])
    with pytest.raises(DatasetValidationError, match=r"row 1 \(id 3\), column 'age'"):
        load_stage_csv(m)


def test_load_non_numeric_cell(tmp_path):
    m = _fixture(tmp_path, [[1, 1, 20, "X", "abc"], [3, 0, 40, "X", 1.5]])
    with pytest.raises(DatasetValidationError, match="non-numeric"):
        load_stage_csv(m)


@pytest.mark.parametrize("rows,match", [
    ([[1, 2, 20, "X", 0.5]], "not 0/1"),
    ([[1, 1, 20, "X", 0.5], [1, 0, 20, "X", 0.5]], "duplicate"),
    ([["x", 1, 20, "X", 0.5]], "not an integer"),
    ([[1, 1, 20, "X"]], "fields"),
])
def test_load_rejects_bad_rows(tmp_path, rows, match):
    with pytest.raises(DatasetValidationError, match=match):
        load_stage_csv(_fixture(tmp_path, rows))


def test_load_rejects_reordered_columns(tmp_path):
    m = _fixture(tmp_path)
    _write(tmp_path / "s2.csv", ["id", "label", "city", "age", "score"], [[1, 1, "X", 20, 0.5]])
    with pytest.raises(DatasetValidationError, match="start with"):
        load_stage_csv(m)


def test_load_empty_file_and_missing_key(tmp_path):
    m = _fixture(tmp_path)
    (tmp_path / "s2.csv").write_text("")
    with pytest.raises(DatasetValidationError, match="header"):
        load_stage_csv(m)
    (tmp_path / "bad.txt").write_text("[stage]\nname = a\ncsv = s1.csv\n")
    with pytest.raises(DatasetValidationError, match="id_column"):
        load_stage_csv(tmp_path / "bad.txt")


def test_validation_cohort_uses_training_statistics(tmp_path):
    train = load_stage_csv(_fixture(tmp_path))
    other = tmp_path / "other"
    other.mkdir()
    _fixture(other, [[1, 1, 20, "Q", 0.5]])
    _write(other / "s1.csv", ["id", "label", "age", "city"], [[1, 1, 20, "Q"], [2, 0, 35, "Y"]])
    val = load_stage_csv(other / "manifest.txt", fitted=train.prep)
    assert val[0].columns == train[0].columns
    assert val[0].X[0, 1:].tolist() == [0.0, 0.0, 0.0]        # unseen city
    assert val[0].X[0, 0] == train[0].X[0, 0]                  # age 20 scaled alike


def test_export_round_trip(tmp_path):
    ds = generate(paper_like_config(seed=2, m0=200))
    back = load_stage_csv(export_dataset(ds, tmp_path))
    assert len(back) == len(ds)
    for a, b in zip(ds.stages, back.stages):
        assert a.name == b.name and a.phase == b.phase and a.columns == b.columns
        assert np.array_equal(a.ids, b.ids)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.X, b.X)
