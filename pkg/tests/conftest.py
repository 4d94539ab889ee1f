import numpy as np
import pytest

from relstab.data import fit_standardizer, make_blobs, make_circles, split
from relstab.model import LR, MLP, ModelArtifact, TrainConfig, init_model, softmax, train


def random_mlp(rng, d=5, h=16, c=2, scale=1.0):
    return ModelArtifact(
        MLP,
        rng.normal(0, scale, (h, d)),
        rng.normal(0, scale, h),
        rng.normal(0, scale, (c, h)),
        rng.normal(0, scale, c),
    )


def random_lr(rng, d=3, c=2):
    return ModelArtifact(LR, rng.normal(size=(c, d)), rng.normal(size=c))


class ConstantModel:
    """Test double whose logits, representation and prediction never change."""

    kind = "MLP"

    def __init__(self, logits=(0.3, -0.2), hidden=(1.0, -2.0, 0.5)):
        self._logits = np.asarray(logits, dtype=float)
        self._hidden = np.asarray(hidden, dtype=float)
        self.n_classes = self._logits.size

    def _rows(self, X, v):
        X = np.asarray(X, dtype=float)
        return v.copy() if X.ndim == 1 else np.tile(v, (X.shape[0], 1))

    def hidden_pre(self, X):
        return self._rows(X, self._hidden)

    def logits(self, X):
        return self._rows(X, self._logits)

    def probs(self, X):
        return softmax(self.logits(X))

    def predict(self, X):
        return np.argmax(self.logits(X), axis=-1)

    def gradient(self, X, target):
        return np.zeros_like(np.asarray(X, dtype=float))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs_splits():
    ds = make_blobs(500, 2, separation=6.0, seed=3)
    tr, va, te = split(ds, seed=3)
    std = fit_standardizer(tr)
    return std.transform(tr), std.transform(va), std.transform(te)


@pytest.fixture(scope="session")
def trained_lr(blobs_splits):
    tr, va, _ = blobs_splits
    return train(init_model(LR, 2, 2, seed=5), tr, va, TrainConfig(epochs=20))


@pytest.fixture(scope="session")
def trained_circles_mlp():
    ds = make_circles(1000, 0.05, 0.5, seed=11)
    tr, va, te = split(ds, seed=11)
    std = fit_standardizer(tr)
    tr, va, te = std.transform(tr), std.transform(va), std.transform(te)
    model = train(init_model(MLP, 2, 2, 100, seed=11), tr, va, TrainConfig(epochs=30))
    return model, tr, va, te


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
