import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctr.data_io import synth_blobs
from ctr.model import build_model
from ctr.training import Trainer, TrainSpec, make_rngs

settings.register_profile(
    "ctr", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ctr")


@st.composite
def prob_rows(draw, min_classes=3, max_classes=10, min_rows=1, max_rows=6):
    """(probs [B, C] strictly inside the simplex, labels [B])."""
    C = draw(st.integers(min_classes, max_classes))
    B = draw(st.integers(min_rows, max_rows))
    logits = draw(arrays(np.float64, (B, C), elements=st.floats(-4.0, 4.0)))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    labels = draw(arrays(np.int64, (B,), elements=st.integers(0, C - 1)))
    return p, labels


def random_probs(rng, B, C, scale=2.0):
    z = scale * rng.standard_normal((B, C))
    p = np.exp(z - z.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.fixture(scope="session")
def blobs():
    train = synth_blobs(0, 60, C=4, dim=6, spread=0.08)
    test = synth_blobs(1, 30, C=4, dim=6, spread=0.08, split="test")
    return train, test


def fit_blobs(method="NaturalCE", seed=0, epochs=8, C=4, dim=6, **kw):
    train = synth_blobs(seed, 60, C=C, dim=dim, spread=0.08)
    spec = TrainSpec(method=method, epochs=epochs, batch_size=32, lr=0.1, scheduler="Cyclic",
                     seed=seed, **kw)
    rngs = make_rngs(seed)
    model = build_model("mlp", dim, C, 0.5, hidden=(32, 16), rng=rngs["init"])
    trainer = Trainer(spec, model, rngs)
    trainer.fit(train)
    return model, trainer


@pytest.fixture(scope="session")
def blob_model():
    model, _ = fit_blobs()
    return model


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
