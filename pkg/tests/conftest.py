import numpy as np
import pytest

from fediskit.config import LearnerConfig, RunConfig
from fediskit.data import gen_gaussian_mixture


@pytest.fixture(scope="session")
def digits():
    from fediskit.data import load_digits_dataset

    return load_digits_dataset()


@pytest.fixture
def blob_pair():
    """Two well-separated 2-D Gaussian blobs; trivially separable."""
    means = np.array([[0.0, 0.0], [6.0, 6.0]])
    return gen_gaussian_mixture(2, 100, 2, means, 0.5, seed=7)


def tuned_learner(**kwargs) -> LearnerConfig:
    """Distillation settings strong enough to converge at desk scale."""
    defaults = dict(distill_epochs=8, distill_lr=0.2, lr=0.05, temperature=1.0)
    defaults.update(kwargs)
    return LearnerConfig(**defaults)


def small_synthetic_config(**kwargs) -> RunConfig:
    """A seconds-fast config on separated synthetic blobs."""
    from fediskit.config import DatasetSpec

    defaults = dict(
        dataset=DatasetSpec(kind="synthetic", num_classes=5, per_class=60, dim=8),
        num_clients=5,
        rounds=3,
        scheme="strong_noniid",
        filter_mode="kmeans",
        learner=tuned_learner(),
        seed=0,
    )
    defaults.update(kwargs)
    return RunConfig(**defaults)
