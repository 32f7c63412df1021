import numpy as np
import pytest

from clickpredict import pipeline
from clickpredict.config import from_dict
from clickpredict.model import ModelConfig
from clickpredict.sessions import Event, UrlParts, UserAgentSummary
from clickpredict.synth import generate_events

T0 = 1_767_225_600_000

CHROME = UserAgentSummary("Chrome", "Windows", False)


def make_event(ts, anon="a1", kind="page", path="/", user_id=None, ua=CHROME, **payload):
    return Event(T0 + ts, anon, kind, user_id, dict(payload), UrlParts("shop.example", path, ()), ua)


def raw_event(ts, anon="a1", kind="page", url="https://shop.example/", ua="Mozilla/5.0 Chrome/120.0", **extra):
    payload = {"url": url, "userAgent": ua}
    payload.update(extra)
    return {"timestamp": T0 + ts, "anonymousId": anon, "userId": None, "type": kind, "payload": payload}


@pytest.fixture
def tiny_config():
    return ModelConfig(seq_len=3, event_dim=5, metadata_dim=4, gru_units=4, mlp_layer_sizes=(3, 3),
                       merge_units=3, dropout_rate=0.3, l2_lambda=0.01, pos_weight=2.5)


def small_config(**sections):
    """A config sized for tests: small site, single grid point, few epochs."""
    base = {
        "synth": {"n_users": 3000},
        "model": {"grid": {"gru_units": [16]}, "epochs": 5},
        "lifecycle": {"min_examples": 200, "verification_sample_size": 200},
    }
    for name, values in sections.items():
        base.setdefault(name, {}).update(values)
    return from_dict(base)


@pytest.fixture(scope="session")
def small_site():
    cfg = small_config()
    events, truth = generate_events(cfg.synth)
    return cfg, events, truth


@pytest.fixture(scope="session")
def small_examples(small_site):
    cfg, events, _ = small_site
    train, test = pipeline.split_test(pipeline.make_examples(events, cfg), cfg.evaluation.test_fraction)
    return train, test


@pytest.fixture(scope="session")
def trained(small_site, small_examples):
    cfg = small_site[0]
    model, arrays = pipeline.train_model(small_examples[0], cfg, "purchase")
    return model, arrays


def random_instance_arrays(cfg: ModelConfig, batch: int, rng: np.random.Generator):
    X = (rng.random((batch, cfg.seq_len, cfg.event_dim)) < 0.3).astype(np.float64)
    M = rng.random((batch, cfg.metadata_dim))
    return X, M


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
