import time

import numpy as np
import pytest

from sgblasso.bloch import AnalyticModel, EpgModel, FispSequence, synthetic_flip_schedule
from sgblasso.surrogate import MlpSurrogate, epg_training_set, train_surrogate

# wall-clock seconds of the session fixtures, read by the acceptance runtime checks
TIMINGS = {}

# desk-scale surrogate: ~10k log-spaced training fingerprints, H=500, tau=10
DESK_GRID_PER_AXIS = 130
DESK_HIDDEN = 500
DESK_TAU = 10


@pytest.fixture(scope="session")
def analytic():
    return AnalyticModel(np.linspace(5.0, 3000.0, 64))


@pytest.fixture(scope="session")
def short_seq():
    return FispSequence(synthetic_flip_schedule(200))


@pytest.fixture(scope="session")
def epg_short(short_seq):
    return EpgModel(short_seq)


def random_surrogate(hidden=32, tau=6, seed=0):
    rng = np.random.Generator(np.random.Philox(seed))
    return MlpSurrogate(
        rng.normal(0, 1.5, (2, hidden)), rng.uniform(-1, 1, hidden),
        rng.normal(0, 1 / np.sqrt(hidden), (hidden, tau)), rng.normal(0, 0.3, tau),
    )


@pytest.fixture(scope="session")
def desk_training():
    """EPG training set on the default 1000-frame schedule, simulated once per session."""
    t0 = time.perf_counter()
    out = epg_training_set(EpgModel(), per_axis=DESK_GRID_PER_AXIS, tau=DESK_TAU)
    TIMINGS["desk_training"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def desk_surrogate(desk_training):
    """Surrogate retrained from scratch once per session (acceptance 10 inspects it)."""
    thetas, targets, subspace = desk_training
    t0 = time.perf_counter()
    s = train_surrogate(thetas, targets, hidden=DESK_HIDDEN, epochs=100, seed=0)
    TIMINGS["desk_surrogate"] = time.perf_counter() - t0
    s.basis = subspace.basis
    return s
