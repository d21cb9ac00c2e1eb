import numpy as np
import pytest
import torch

from tarnn_hybrid.cohort import SyntheticConfig, generate_synthetic_cohort
from tarnn_hybrid.ontology import GraphEmbedConfig, HashingTextEmbedder, build_from_bundle, generate_synthetic_ontology
from tarnn_hybrid.preprocess import PreprocessConfig, assemble_dataset, fit_preprocessing, stack_samples
from tarnn_hybrid.cohort import split_patients

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_bundle():
    return generate_synthetic_ontology(n_systems=3, n_categories=3, leaves_per_category=4, seed=0)


@pytest.fixture(scope="session")
def small_cohort(small_bundle):
    return generate_synthetic_cohort(SyntheticConfig(n_patients=80, seed=3), small_bundle)


@pytest.fixture(scope="session")
def small_matrix(small_cohort, small_bundle):
    return build_from_bundle(small_cohort.code_vocabulary, small_bundle, HashingTextEmbedder(dim=8),
                             GraphEmbedConfig(d_g=8, epochs=5))


@pytest.fixture(scope="session")
def small_data(small_cohort, small_matrix):
    pc = PreprocessConfig(t_s=3, k_max=8)
    train, test = split_patients(small_cohort, 0.25, 0)
    stats = fit_preprocessing(train, pc)
    tr = assemble_dataset(train, pc, stats, small_matrix)
    te = assemble_dataset(test, pc, stats, small_matrix)
    return {"config": pc, "stats": stats, "train": tr, "test": te,
            "train_batch": stack_samples(tr), "test_batch": stack_samples(te)}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def accept():
    """Record one acceptance criterion: prints a PASS/FAIL line, then asserts."""

    def record(number, name, passed, detail=""):
        line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
