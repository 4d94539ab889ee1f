import numpy as np
import pytest

from conftest import ConstantModel, random_lr, random_mlp
from relstab.explain import (
    INTEGRATED_GRADIENTS,
    METHODS,
    ExplainError,
    exact_shapley_oracle,
    explain,
    grad_x_input,
    integrated_gradients,
    kernel_shap,
    lime,
    random_baseline,
    smoothgrad,
    vanilla_grad,
)
from relstab.model import LR, MLP, ModelArtifact, init_model


def lr_with_row(w, b=0.0):
    """Two-class LR whose class-1 logit is ``w.x + b`` and class-0 logit is zero."""
    w = np.asarray(w, dtype=float)
    return ModelArtifact(LR, np.vstack([np.zeros_like(w), w]), [0.0, b])


class TestGradientMethods:
    def test_vanilla_grad_lr(self):
        m = lr_with_row([3.0, -2.0])
        np.testing.assert_array_equal(vanilla_grad(m, [0.4, 7.0], 1).values, [3.0, 2.0])
        np.testing.assert_array_equal(vanilla_grad(m, [-5.0, 1.0], 1).values, [3.0, 2.0])

    def test_vanilla_grad_dead_relu(self):
        m = ModelArtifact(MLP, [[1.0, 1.0]], [-10.0], [[1.0], [2.0]], [0.0, 0.0])
        np.testing.assert_array_equal(vanilla_grad(m, [0.1, 0.2], 0).values, [0.0, 0.0])

    def test_grad_x_input(self, rng):
        m = lr_with_row([3.0, -2.0])
        np.testing.assert_array_equal(grad_x_input(m, [1.0, 1.0], 1).values, [3.0, -2.0])
        np.testing.assert_array_equal(grad_x_input(m, [0.0, 0.0], 1).values, [0.0, 0.0])
        w = rng.normal(size=5)
        x = rng.normal(size=5)
        np.testing.assert_array_equal(grad_x_input(lr_with_row(w), x, 1).values, w * x)

    @pytest.mark.parametrize("n,std", [(1, 0.05), (7, 1.0), (50, 3.0)])
    def test_smoothgrad_lr_equals_vanilla(self, n, std, rng):
        m = lr_with_row(rng.normal(size=4))
        x = rng.normal(size=4)
        assert np.array_equal(smoothgrad(m, x, 1, n=n, std=std, seed=3).values, vanilla_grad(m, x, 1).values)

    def test_smoothgrad_zero_std_is_vanilla_bitwise(self, rng):
        for _ in range(20):
            m = random_mlp(rng, d=4, h=12)
            x = rng.normal(size=4)
            sg = smoothgrad(m, x, 0, n=13, std=0.0, seed=1).values
            assert sg.tobytes() == vanilla_grad(m, x, 0).values.tobytes()

    def test_smoothgrad_monte_carlo_convergence(self, rng):
        m = random_mlp(rng, d=3, h=30)
        x = rng.normal(size=3)
        a = smoothgrad(m, x, 0, n=1000, std=0.5, seed=1).values
        b = smoothgrad(m, x, 0, n=2000, std=0.5, seed=2).values
        # per-draw spread estimated from a separate batch of single-draw runs
        draws = np.array([smoothgrad(m, x, 0, n=1, std=0.5, seed=s).values for s in range(400)])
        se = draws.std(axis=0) * np.sqrt(1 / 1000 + 1 / 2000)
        assert np.all(np.abs(a - b) < 3 * se + 1e-12)

    def test_integrated_gradients_lr(self, rng):
        w = rng.normal(size=4)
        m = lr_with_row(w)
        x, base = rng.normal(size=4), rng.normal(size=4)
        for steps in (1, 2, 17, 64):
            np.testing.assert_allclose(integrated_gradients(m, x, 1, base, steps).values, (x - base) * w, atol=1e-12)

    def test_integrated_gradients_at_baseline(self, rng):
        m = random_mlp(rng)
        x = rng.normal(size=5)
        np.testing.assert_array_equal(integrated_gradients(m, x, 1, x, 32).values, np.zeros(5))

    def test_integrated_gradients_completeness(self, rng):
        # standardised input, train-mean (zero) baseline, default initialisation scale
        for i in range(10):
            m = init_model(MLP, 5, 2, 100, seed=i)
            x, base = rng.normal(size=5), np.zeros(5)
            ig = integrated_gradients(m, x, 0, base, 256).values
            gap = ig.sum() - (m.logits(x)[0] - m.logits(base)[0])
            assert abs(gap) < 1e-3

    def test_gradient_rows_independent_of_batch(self, rng):
        m = random_mlp(rng, d=6, h=40)
        X = rng.normal(size=(9, 6))
        batch = m.gradient(X, 1)
        for i, x in enumerate(X):
            assert m.gradient(x, 1).tobytes() == batch[i].tobytes()


class TestLime:
    def test_recovers_local_probability_gradient(self, rng):
        w = np.array([1.5, -0.7])
        m = lr_with_row(w, 0.2)
        x = np.array([0.3, 0.1])
        coef = lime(m, x, 1, seed=0).values
        p = m.probs(x)[1]
        analytic = p * (1 - p) * w
        cos = coef @ analytic / np.linalg.norm(coef) / np.linalg.norm(analytic)
        assert cos > 0.99

    def test_constant_model_gives_zero(self):
        coef = lime(ConstantModel(), np.array([0.1, 0.2, 0.3]), 0, seed=4).values
        assert np.all(np.abs(coef) < 1e-6)

    def test_seed_determinism(self, rng):
        m = random_mlp(rng, d=3, h=8)
        x = rng.normal(size=3)
        a = lime(m, x, 0, seed=11).values
        b = lime(m, x, 0, seed=11).values
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, lime(m, x, 0, seed=12).values)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_vanished_kernel(self, rng):
        with pytest.raises(ExplainError):
            lime(random_mlp(rng, d=2), np.zeros(2), 0, kernel_width=1e-200, std=1.0)


class TestShapley:
    def test_oracle_single_player(self, rng):
        m = random_mlp(rng, d=1, h=5)
        x, base = np.array([0.7]), np.array([-0.4])
        phi = exact_shapley_oracle(m, x, 1, base)
        assert phi[0] == pytest.approx(m.logits(x)[1] - m.logits(base)[1], abs=1e-12)

    def test_oracle_linear(self, rng):
        w = rng.normal(size=3)
        m = lr_with_row(w, 0.5)
        x, base = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(exact_shapley_oracle(m, x, 1, base), w * (x - base), atol=1e-12)

    def test_oracle_symmetry(self, rng):
        W1 = rng.normal(size=(6, 3))
        W1[:, 1] = W1[:, 0]  # duplicate feature
        m = ModelArtifact(MLP, W1, rng.normal(size=6), rng.normal(size=(2, 6)), np.zeros(2))
        x = np.array([0.8, 0.8, -0.3])
        phi = exact_shapley_oracle(m, x, 0, np.zeros(3))
        assert phi[0] == pytest.approx(phi[1], abs=1e-12)

    def test_kernel_shap_linear(self, rng):
        for d in (2, 5, 10):
            w = rng.normal(size=d)
            m = lr_with_row(w)
            x, base = rng.normal(size=d), rng.normal(size=d)
            np.testing.assert_allclose(kernel_shap(m, x, 1, base, seed=1).values, w * (x - base), atol=1e-6)

    def test_kernel_shap_at_baseline(self, rng):
        m = random_mlp(rng, d=4)
        x = rng.normal(size=4)
        np.testing.assert_allclose(kernel_shap(m, x, 0, x).values, 0.0, atol=1e-12)

    @pytest.mark.parametrize("d", [2, 3, 5, 8])
    def test_kernel_shap_matches_oracle(self, d, rng):
        m = random_mlp(rng, d=d, h=12)
        x, base = rng.normal(size=d), rng.normal(size=d)
        phi = kernel_shap(m, x, 0, base, n_samples=500).values
        np.testing.assert_allclose(phi, exact_shapley_oracle(m, x, 0, base), atol=1e-6)

    def test_kernel_shap_sampled_efficiency(self, rng):
        m = random_mlp(rng, d=12, h=10)
        x, base = rng.normal(size=12), rng.normal(size=12)
        phi = kernel_shap(m, x, 1, base, n_samples=500, seed=3).values
        total = m.logits(x)[1] - m.logits(base)[1]
        assert abs(phi.sum() - total) < 1e-9

    def test_too_few_coalitions(self, rng):
        m = random_mlp(rng, d=12, h=4)
        with pytest.raises(ExplainError, match="distinct coalitions"):
            kernel_shap(m, rng.normal(size=12), 0, np.zeros(12), n_samples=8)

    def test_needs_two_features(self, rng):
        with pytest.raises(ExplainError):
            kernel_shap(random_mlp(rng, d=1), np.ones(1), 0)

    def test_constant_model(self):
        assert np.linalg.norm(kernel_shap(ConstantModel(), np.ones(3), 0, np.zeros(3)).values) < 1e-6


class TestRandomBaseline:
    def test_reproducible(self):
        assert np.array_equal(random_baseline(5, seed=2).values, random_baseline(5, seed=2).values)

    def test_standard_normal(self):
        v = random_baseline(100_000, seed=0).values
        assert abs(v.mean()) < 0.02 and abs(v.std() - 1) < 0.02

    def test_model_independent(self, rng):
        a = explain("Random", random_mlp(rng, d=3), np.zeros(3), 0, seed=5).values
        b = explain("Random", lr_with_row([1.0, 2.0, 3.0]), np.ones(3), 1, seed=5).values
        assert np.array_equal(a, b)


@pytest.mark.parametrize("method", METHODS)
def test_every_method_deterministic(method, rng):
    m = random_mlp(rng, d=4, h=10)
    x = rng.normal(size=4)
    base = rng.normal(size=4)
    a = explain(method, m, x, 1, seed=8, baseline=base)
    b = explain(method, m, x, 1, seed=8, baseline=base)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.shape == (4,) and np.all(np.isfinite(a.values))
    assert a.to_dict()["method"] == method


def test_dispatch_rejects_unknown(rng):
    with pytest.raises(ExplainError):
        explain("Anchors", random_mlp(rng), np.zeros(5), 0)


def test_ig_gap_shrinks_on_average(rng):
    gaps = {s: [] for s in (16, 32, 64, 128)}
    for _ in range(30):
        m = random_mlp(rng, d=5, h=16)
        x, base = rng.normal(size=5), rng.normal(size=5)
        total = m.logits(x)[0] - m.logits(base)[0]
        for s in gaps:
            gaps[s].append(abs(integrated_gradients(m, x, 0, base, s).values.sum() - total))
    means = [np.mean(gaps[s]) for s in sorted(gaps)]
    assert all(b <= 1.1 * a for a, b in zip(means, means[1:]))
    assert INTEGRATED_GRADIENTS in METHODS
