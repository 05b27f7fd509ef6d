import numpy as np
import pytest

from gajourney.features import EncodedJourney
from gajourney.ingest import join_journeys
from gajourney.synthgen import SynthConfig, generate


@pytest.fixture(scope="session")
def small_corpus():
    tables, truth = generate(SynthConfig(n_users=50, seed=11, empty_user_rate=0.1))
    return tables, truth


@pytest.fixture(scope="session")
def small_journeys(small_corpus):
    tables, _ = small_corpus
    journeys, _ = join_journeys(tables.users, tables.sessions, tables.hits)
    return journeys


def random_encoded(rng, n_sessions, max_hits=3, hit_dim=2, session_dim=3, user_dim=2, client_id="u"):
    """Random normalized-looking journey with the given dimensions."""
    return EncodedJourney(
        client_id=client_id,
        user_vec=rng.normal(size=user_dim),
        session_vecs=rng.normal(size=(n_sessions, session_dim)),
        hit_vecs=[rng.normal(size=(int(rng.integers(1, max_hits + 1)), hit_dim)) for _ in range(n_sessions)],
        class_ids=rng.integers(0, 6, size=n_sessions),
    )


def finite_difference_check(params, journey, labels, rng, n_coords=40, h=1e-5):
    """Compare analytic gradients to central differences on sampled coordinates.

    Returns the list of ``(analytic, numeric)`` pairs.
    """
    from gajourney.model import ModelParams, backward, forward, mse_loss

    _, trace = forward(params, journey)
    grad = backward(params, trace, labels).flat()
    base = params.flat()
    coords = rng.choice(base.size, size=min(n_coords, base.size), replace=False)
    pairs = []
    for k in coords:
        vals = []
        for sign in (1.0, -1.0):
            v = base.copy()
            v[k] += sign * h
            y, _ = forward(ModelParams.from_flat(params.config, v), journey)
            vals.append(mse_loss(y, labels))
        pairs.append((grad[k], (vals[0] - vals[1]) / (2 * h)))
    return pairs


def gradient_close(analytic, numeric, rel=1e-4, floor=1e-8):
    return abs(analytic - numeric) <= max(rel * max(abs(analytic), abs(numeric)), floor)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
