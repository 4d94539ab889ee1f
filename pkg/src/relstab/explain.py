"""Feature-attribution methods over duck-typed models.

A model here is anything exposing ``logits(X)``, ``probs(X)`` and
``gradient(X, target)`` on batches (see :class:`relstab.model.ModelArtifact`).
Every method is a pure function of its inputs and ``seed``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

VANILLA_GRAD = "VanillaGrad"
GRAD_X_INPUT = "GradXInput"
SMOOTHGRAD = "SmoothGrad"
INTEGRATED_GRADIENTS = "IntegratedGradients"
LIME = "LIME"
KERNEL_SHAP = "KernelSHAP"
RANDOM = "Random"

METHODS = (VANILLA_GRAD, GRAD_X_INPUT, SMOOTHGRAD, INTEGRATED_GRADIENTS, LIME, KERNEL_SHAP, RANDOM)
GRADIENT_METHODS = (VANILLA_GRAD, GRAD_X_INPUT, SMOOTHGRAD, INTEGRATED_GRADIENTS)

DEFAULT_HYPER: dict[str, dict[str, Any]] = {
    VANILLA_GRAD: {},
    GRAD_X_INPUT: {},
    SMOOTHGRAD: {"n": 50, "std": 0.05},
    INTEGRATED_GRADIENTS: {"steps": 64},
    LIME: {"n_samples": 1000, "kernel_width": 0.75, "std": 0.05, "ridge": 1e-3},
    KERNEL_SHAP: {"n_samples": 500},
    RANDOM: {},
}


class ExplainError(RuntimeError):
    pass


@dataclass(frozen=True)
class Attribution:
    values: np.ndarray
    method: str
    target: int
    hyper: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise ExplainError(f"{self.method}: attribution must be a finite vector")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "target": int(self.target),
            "seed": self.seed,
            "hyper": {k: v for k, v in self.hyper.items() if k != "baseline"},
            "values": self.values.tolist(),
        }


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).ravel()


def _target_logit(model, X: np.ndarray, target: int) -> np.ndarray:
    return np.atleast_2d(model.logits(X))[:, target]


def vanilla_grad(model, x, target: int) -> Attribution:
    g = np.abs(model.gradient(_vec(x), target))
    return Attribution(np.ravel(g), VANILLA_GRAD, target)


def grad_x_input(model, x, target: int) -> Attribution:
    x = _vec(x)
    return Attribution(np.ravel(model.gradient(x, target)) * x, GRAD_X_INPUT, target)


def smoothgrad(model, x, target: int, n: int = 50, std: float = 0.05, seed: int = 0) -> Attribution:
    if n < 1:
        raise ExplainError("smoothgrad needs n >= 1")
    x = _vec(x)
    rng = np.random.default_rng(seed)
    noisy = x + rng.normal(0.0, 1.0, size=(n, x.size)) * std
    g = np.abs(model.gradient(noisy, target))
    # Shifted mean: exact when every draw has the same gradient.
    values = g[0] + (g - g[0]).mean(axis=0)
    return Attribution(values, SMOOTHGRAD, target, {"n": n, "std": std}, seed)


def integrated_gradients(model, x, target: int, baseline=None, steps: int = 64) -> Attribution:
    """Midpoint-rule path integral of the target-logit gradient from ``baseline`` to ``x``."""
    if steps < 1:
        raise ExplainError("integrated gradients needs steps >= 1")
    x = _vec(x)
    baseline = np.zeros_like(x) if baseline is None else _vec(baseline)
    delta = x - baseline
    alphas = (np.arange(steps) + 0.5) / steps
    path = baseline + alphas[:, None] * delta
    g = model.gradient(path, target)
    values = delta * (g[0] + (g - g[0]).mean(axis=0))
    return Attribution(values, INTEGRATED_GRADIENTS, target, {"steps": steps, "baseline": baseline}, None)


def lime(
    model,
    x,
    target: int,
    n_samples: int = 1000,
    kernel_width: float = 0.75,
    std: float = 0.05,
    ridge: float = 1e-3,
    seed: int = 0,
) -> Attribution:
    """Weighted ridge surrogate of the target-class probability around ``x``.

    Samples are Gaussian around ``x``; weights use an exponential kernel on the
    squared Euclidean distance. The intercept is fitted but not penalised.
    """
    x = _vec(x)
    rng = np.random.default_rng(seed)
    Z = x + rng.normal(0.0, 1.0, size=(n_samples, x.size)) * std
    y = np.atleast_2d(model.probs(Z))[:, target]
    w = np.exp(-np.sum((Z - x) ** 2, axis=1) / kernel_width**2)
    sw = w.sum()
    if sw <= 0:
        raise ExplainError("LIME kernel weights vanished; kernel_width too small for the sampling std")
    z_bar = w @ Z / sw
    y_bar = w @ y / sw
    Zc, yc = Z - z_bar, y - y_bar
    A = (Zc * w[:, None]).T @ Zc + ridge * np.eye(x.size)
    b = (Zc * w[:, None]).T @ yc
    try:
        coef = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise ExplainError(f"LIME normal equations are singular: {exc}") from exc
    hyper = {"n_samples": n_samples, "kernel_width": kernel_width, "std": std, "ridge": ridge}
    return Attribution(coef, LIME, target, hyper, seed)


def shapley_kernel_weight(d: int, size: int) -> float:
    return (d - 1) / (math.comb(d, size) * size * (d - size))


def _sample_coalitions(d: int, n_samples: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Non-trivial coalitions and their regression weights.

    Enumerates every proper coalition when the budget allows; otherwise draws
    sizes from the Shapley kernel mass and members uniformly, so duplicates
    are merged into counts and the kernel weight is implicit.
    """
    budget = n_samples - 2
    if 2**d - 2 <= budget:
        masks = np.array([[(k >> i) & 1 for i in range(d)] for k in range(1, 2**d - 1)], dtype=bool)
        weights = np.array([shapley_kernel_weight(d, int(m.sum())) for m in masks])
        return masks, weights
    sizes = np.arange(1, d)
    mass = np.array([(d - 1) / (s * (d - s)) for s in sizes])
    drawn = rng.choice(sizes, size=budget, p=mass / mass.sum())
    counts: dict[bytes, int] = {}
    rows: dict[bytes, np.ndarray] = {}
    for s in drawn:
        m = np.zeros(d, dtype=bool)
        m[rng.choice(d, size=s, replace=False)] = True
        key = m.tobytes()
        counts[key] = counts.get(key, 0) + 1
        rows.setdefault(key, m)
    keys = list(rows)
    return np.array([rows[k] for k in keys]), np.array([counts[k] for k in keys], dtype=np.float64)


def kernel_shap(model, x, target: int, baseline=None, n_samples: int = 500, seed: int = 0) -> Attribution:
    """Shapley-kernel weighted least squares on the target-class logit.

    Features off the coalition take their ``baseline`` value. The efficiency
    constraint is imposed exactly by eliminating the last coefficient.
    """
    x = _vec(x)
    d = x.size
    if d < 2:
        raise ExplainError("KernelSHAP needs at least two features")
    baseline = np.zeros_like(x) if baseline is None else _vec(baseline)
    rng = np.random.default_rng(seed)
    masks, weights = _sample_coalitions(d, n_samples, rng)
    if masks.shape[0] + 2 < d + 2:
        raise ExplainError(f"only {masks.shape[0] + 2} distinct coalitions sampled; need at least {d + 2}")

    inputs = np.where(masks, x, baseline)
    v = _target_logit(model, np.vstack([baseline, x, inputs]), target)
    v_empty, v_full, v_s = v[0], v[1], v[2:]
    total = v_full - v_empty

    Z = masks.astype(np.float64)
    # phi_last = total - sum(phi_rest)
    A = Z[:, :-1] - Z[:, -1:]
    r = v_s - v_empty - Z[:, -1] * total
    Aw = A * weights[:, None]
    phi_rest, *_ = np.linalg.lstsq(Aw.T @ A, Aw.T @ r, rcond=None)
    phi = np.append(phi_rest, total - phi_rest.sum())
    return Attribution(phi, KERNEL_SHAP, target, {"n_samples": n_samples, "baseline": baseline}, seed)


def exact_shapley_oracle(model, x, target: int, baseline=None) -> np.ndarray:
    """Exact Shapley values of the baseline-masking game, by full enumeration."""
    x = _vec(x)
    d = x.size
    if d > 12:
        raise ExplainError("exact Shapley enumeration is limited to d <= 12")
    baseline = np.zeros_like(x) if baseline is None else _vec(baseline)
    subsets = list(itertools.product((0, 1), repeat=d))
    inputs = np.array([[x[i] if s[i] else baseline[i] for i in range(d)] for s in subsets])
    value = dict(zip(subsets, _target_logit(model, inputs, target)))
    phi = np.zeros(d)
    for i in range(d):
        for s in subsets:
            if s[i]:
                continue
            k = sum(s)
            with_i = s[:i] + (1,) + s[i + 1 :]
            coef = math.factorial(k) * math.factorial(d - k - 1) / math.factorial(d)
            phi[i] += coef * (value[with_i] - value[s])
    return phi


def random_baseline(d: int, seed: int = 0, target: int = 0) -> Attribution:
    values = np.random.default_rng(seed).standard_normal(d)
    return Attribution(values, RANDOM, target, {}, seed)


def explain(method: str, model, x, target: int, seed: int = 0, baseline=None, **hyper) -> Attribution:
    """Dispatch to one method with its default hyperparameters overridden by ``hyper``."""
    if method not in METHODS:
        raise ExplainError(f"unknown method {method!r}; expected one of {METHODS}")
    params = {**DEFAULT_HYPER[method], **hyper}
    if method == VANILLA_GRAD:
        return vanilla_grad(model, x, target)
    if method == GRAD_X_INPUT:
        return grad_x_input(model, x, target)
    if method == SMOOTHGRAD:
        return smoothgrad(model, x, target, seed=seed, **params)
    if method == INTEGRATED_GRADIENTS:
        return integrated_gradients(model, x, target, baseline=baseline, **params)
    if method == LIME:
        return lime(model, x, target, seed=seed, **params)
    if method == KERNEL_SHAP:
        return kernel_shap(model, x, target, baseline=baseline, seed=seed, **params)
    return random_baseline(_vec(x).size, seed=seed, target=target)
