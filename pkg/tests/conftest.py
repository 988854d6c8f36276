import numpy as np
import pytest

from gazehmm.gaze_io import load_bundled_models
from gazehmm.hmm import GaussianHmm

CONDITIONS = ["truth_familiar", "truth_unfamiliar", "lie_familiar", "lie_unfamiliar"]


def random_spd(rng, d=2, lo=20.0, hi=400.0):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return (Q * rng.uniform(lo, hi, size=d)) @ Q.T


def random_model(rng, K=None, spread=100.0, cov_range=(20.0, 400.0)):
    K = K or int(rng.integers(1, 4))
    return GaussianHmm(
        prior=rng.dirichlet(np.ones(K)),
        transition=rng.dirichlet(np.ones(K), size=K),
        means=rng.uniform(0, spread, size=(K, 2)),
        covs=np.stack([random_spd(rng, 2, *cov_range) for _ in range(K)]),
    )


def jittered(model, rng, mean_px=5.0, concentration=50.0):
    A = np.array([rng.dirichlet(concentration * row) for row in model.transition])
    return GaussianHmm(model.prior, A, model.means + rng.uniform(-mean_px, mean_px, model.means.shape),
                       model.covs, label=model.label)


def jittered_population(seed, per_condition=21):
    rng = np.random.default_rng(seed)
    fixtures = bundled_models()
    models, labels = [], []
    for ci, c in enumerate(CONDITIONS):
        for _ in range(per_condition):
            models.append(jittered(fixtures[c], rng))
            labels.append(ci)
    return models, labels


def bundled_models():
    return {k: GaussianHmm.from_record(v) for k, v in load_bundled_models().items()}


@pytest.fixture(scope="session")
def bundled():
    return bundled_models()


@pytest.fixture(scope="session")
def records():
    return load_bundled_models()
