import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tarnn_hybrid.cohort import CohortTable, Demographics, Patient, VisitRecord, split_patients
from tarnn_hybrid.errors import ConfigError, DataError
from tarnn_hybrid.preprocess import (
    PreprocessConfig, apply_normalizer, assemble_dataset, compute_elapsed, dataset_manifest, demographic_vector,
    filter_patients, fit_normalizer, fit_preprocessing, load_samples, make_windows, max_gap, reindex_visits,
    save_samples,
)


def _visits(pid, n, start=0, gap=10, codes=("1",)):
    return [VisitRecord(pid, start + gap * t, tuple(codes), t % 2) for t in range(n)]


def _cohort(lengths):
    return CohortTable({f"p{i}": Patient(Demographics(), _visits(f"p{i}", n)) for i, n in enumerate(lengths)}, {})


@pytest.mark.parametrize("n, expected", [(3, [0, 6, 12]), (1, [0]), (5, [0, 6, 12, 18, 24])])
def test_reindex(n, expected):
    assert reindex_visits(_visits("x", n)) == expected


def test_reindex_empty():
    with pytest.raises(DataError):
        reindex_visits([])


def test_filter_boundary_and_count():
    assert len(filter_patients(_cohort([4]), 2, 2)) == 1
    assert len(filter_patients(_cohort([3]), 2, 2)) == 0
    assert len(filter_patients(_cohort([5, 3, 8]), 3, 2)) == 2


def test_compute_elapsed_examples():
    np.testing.assert_array_equal(compute_elapsed([0, 30, 90], 60), [0, 0.5, 1.0])
    np.testing.assert_array_equal(compute_elapsed([7], 60), [0.0])
    np.testing.assert_array_equal(compute_elapsed([0, 5, 10, 15], 5), [0, 1, 1, 1])
    # gaps larger than the training maximum are clipped
    np.testing.assert_array_equal(compute_elapsed([0, 120], 60), [0, 1.0])


def test_compute_elapsed_rejects_non_increasing():
    with pytest.raises(DataError):
        compute_elapsed([0, 10, 10], 60)


@pytest.mark.parametrize("n, expected", [(4, 1), (6, 3)])
def test_window_count(n, expected):
    windows = list(make_windows(_visits("x", n), 2, 2))
    assert len(windows) == expected == n - 2 - 2 + 1


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 15), t_s=st.integers(1, 5), f_ts=st.integers(1, 3))
def test_windows_causal_and_counted(n, t_s, f_ts):
    visits = _visits("x", n)
    windows = list(make_windows(visits, t_s, f_ts))
    assert len(windows) == max(n - t_s - f_ts + 1, 0)
    for k, inputs, future in windows:
        assert len(inputs) == t_s and len(future) == f_ts
        assert max(v.visit_date for v in inputs) < min(v.visit_date for v in future)


def test_normalizer_examples():
    demo = [Demographics({}, {"x": 0.0, "c": 3.0}), Demographics({}, {"x": 10.0, "c": 3.0})]
    stats = fit_normalizer(demo, {"x": "numeric", "c": "numeric"})
    assert apply_normalizer(stats, "x", 5.0) == 0.0
    assert abs(apply_normalizer(stats, "x", 10.0) - 5.0 / (5.0 + 1e-8)) < 1e-15
    assert apply_normalizer(stats, "c", 3.0) == 0.0
    with pytest.raises(DataError):
        apply_normalizer(stats, "x", float("nan"))


def test_demographic_vector_unseen_category_and_missing():
    demo = [Demographics({"sex": "F"}, {"age": 50.0}), Demographics({"sex": "M"}, {"age": 70.0})]
    stats = fit_normalizer(demo, {"sex": "categorical", "age": "numeric"})
    assert stats.feature_names() == ["sex=F", "sex=M", "age"]
    np.testing.assert_allclose(demographic_vector(stats, Demographics({"sex": "M"}, {"age": 80.0})),
                               [0, 1, 20 / (10 + 1e-8)])
    np.testing.assert_array_equal(demographic_vector(stats, Demographics({"sex": "X"}, {})), [0, 0, 0])


def test_padding_rows_for_empty_visit():
    visits = [VisitRecord("p", 0, (), 0), VisitRecord("p", 10, ("1",), 0), VisitRecord("p", 20, ("1",), 1)]
    c = CohortTable({"p": Patient(Demographics(), visits)}, {})
    pc = PreprocessConfig(t_s=2, f_ts=1, k_max=4)
    stats = fit_preprocessing(c, pc)
    (sample,) = assemble_dataset(c, pc, stats, lambda code: 5)
    np.testing.assert_array_equal(sample.code_ids, [[0, 0, 0, 0], [5, 0, 0, 0]])
    assert sample.target == 1


def test_sample_invariants_and_count(small_cohort, small_matrix, small_data):
    pc = small_data["config"]
    train, _ = split_patients(small_cohort, 0.25, 0)
    eligible = filter_patients(train, pc.t_s, pc.f_ts)
    expected = sum(len(p.visits) - pc.t_s - pc.f_ts + 1 for p in eligible.patients.values())
    assert len(small_data["train"]) == expected
    for s in small_data["train"] + small_data["test"]:
        assert s.code_ids.shape == (pc.t_s, pc.k_max)
        assert s.elapsed[0] == 0 and np.all((s.elapsed >= 0) & (s.elapsed <= 1))
        assert s.code_ids.min() >= 0 and s.code_ids.max() < small_matrix.n_rows
        assert set(np.unique(s.labels)) <= {0, 1}


def test_leakage_freedom(small_cohort, small_data):
    pc = small_data["config"]
    train, test = split_patients(small_cohort, 0.25, 0)
    stats = small_data["stats"]
    assert stats.to_dict() == fit_preprocessing(train, pc).to_dict()
    both = fit_preprocessing(small_cohort, pc)
    assert stats.mean != both.mean
    assert stats.delta_max == max_gap(filter_patients(train, pc.t_s, pc.f_ts))


def test_test_sample_uses_train_statistics(small_cohort, small_data):
    stats = small_data["stats"]
    s = small_data["test"][0]
    demo = small_cohort.patients[s.patient_id].demographics
    np.testing.assert_array_equal(s.demo_vec, demographic_vector(stats, demo))


def test_config_file(tmp_path):
    p = tmp_path / "pre.json"
    p.write_text(json.dumps({"t_s": 3, "f_ts": 2, "k_max": 16}))
    assert PreprocessConfig.from_file(p) == PreprocessConfig(t_s=3, f_ts=2, k_max=16)
    p.write_text(json.dumps({"window": 3}))
    with pytest.raises(ConfigError):
        PreprocessConfig.from_file(p)
    with pytest.raises(ConfigError):
        PreprocessConfig(t_s=0)


def test_samples_round_trip(tmp_path, small_data):
    path = save_samples(small_data["test"], tmp_path / "t.npz")
    loaded = load_samples(path)
    assert len(loaded) == len(small_data["test"])
    for a, b in zip(loaded, small_data["test"]):
        assert np.array_equal(a.code_ids, b.code_ids) and np.array_equal(a.elapsed, b.elapsed)
        assert np.array_equal(a.demo_vec, b.demo_vec) and np.array_equal(a.labels, b.labels)
        assert (a.patient_id, a.window_start, a.codes) == (b.patient_id, b.window_start, b.codes)


def test_manifest(small_data):
    m = dataset_manifest(small_data["train"])
    assert m["n_samples"] == len(small_data["train"])
    assert 0 < m["label_prevalence"] < 1
