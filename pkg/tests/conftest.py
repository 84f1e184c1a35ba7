import numpy as np
import pytest

from softseg.phantom import PhantomSpec, default_centers, gen_dataset, write_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    """Four centers x 3 subjects of single-blob phantoms."""
    return gen_dataset(PhantomSpec(size_mm=(8.0, 16.0), seed=7), default_centers(3.0), 3)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, small_dataset):
    """The small dataset written to disk once per session."""
    out = tmp_path_factory.mktemp("data") / "phantoms"
    write_dataset(small_dataset, out)
    return out


@pytest.fixture(scope="session")
def tiny_results(tmp_path_factory, dataset_dir):
    """A complete two-iteration, five-candidate result store."""
    from helpers import tiny_config
    from softseg.config import RunConfig
    from softseg.experiment import ExperimentPlan, run_experiment

    out = tmp_path_factory.mktemp("results") / "store"
    run_experiment(ExperimentPlan(RunConfig.from_dict(tiny_config(dataset_dir, out))), out)
    return out
