"""Layer Lipschitz constants and empirical checks of the stability-metric bounds.

For a one-hidden-layer network with pre-activation ``h1(x) = W1 x + b1`` and
logits ``h2``, the checked inequalities are, per anchor ``x``::

    RIS <= lambda1 * L1 * RRS      lambda1 = ||h1(x)|| / ||x||
    RRS <= lambda2 * L2 * ROS      lambda2 = ||h1(x)||

with ``L1``, ``L2`` the operator norms of the two linear layers. Both are
meaningful only for metrics computed in ``norm_ratio`` mode.

Bounding ``||h1(x) - h1(x')|| <= L1 ||x - x'||`` directly gives the factor
``||x|| / ||h1(x)||`` for the first inequality instead of ``lambda1``; that
variant is reported as ``bound_ris_direct`` and is never asserted.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .stability import NORM_RATIO, StabilityRecord, norm_label, parse_norm_order


class PowerIterationError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"power iteration did not converge after {iterations} iterations (residual {residual:.3e})")


def spectral_norm(W: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value by power iteration on the smaller Gram matrix.

    ``tol`` bounds the relative error of the eigenvalue estimate. The
    remaining error is extrapolated from the geometric decay of successive
    updates, so a small spectral gap cannot end the iteration early.
    """
    W = np.asarray(W, dtype=np.float64)
    G = W.T @ W if W.shape[1] <= W.shape[0] else W @ W.T
    v = np.random.default_rng(seed).standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    lam = prev_delta = None
    for _ in range(max_iter):
        u = G @ v
        new_lam = float(v @ u)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = u / nu
        if lam is not None:
            delta = abs(new_lam - lam)
            if delta <= 1e-15 * new_lam:
                return math.sqrt(new_lam)
            if prev_delta is not None:
                q = delta / prev_delta
                if q < 1 and delta * q / (1 - q) <= tol * new_lam:
                    return math.sqrt(new_lam)
            prev_delta = delta
        lam = new_lam
    residual = float(np.linalg.norm(G @ v - lam * v))
    raise PowerIterationError(residual, max_iter)


def operator_norm(W: np.ndarray, p: float = 2.0, **power_kw) -> float:
    """Induced l_p operator norm for p in {1, 2, inf}."""
    p = parse_norm_order(p)
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if p == 1:
        return float(np.abs(W).sum(axis=0).max())
    if math.isinf(p):
        return float(np.abs(W).sum(axis=1).max())
    return spectral_norm(W, **power_kw)


@dataclass(frozen=True)
class LayerLipschitz:
    L1: float
    L2: float
    p: float
    degenerate: bool


@lru_cache(maxsize=64)
def _cached_norm(key: bytes, shape: tuple, p: float) -> float:
    return operator_norm(np.frombuffer(key, dtype=np.float64).reshape(shape), p)


def _norm_of(W: np.ndarray, p: float) -> float:
    return _cached_norm(np.ascontiguousarray(W).tobytes(), W.shape, p)


def layer_lipschitz(model, p: float = 2.0) -> LayerLipschitz:
    """Lipschitz constants of input->representation (L1) and representation->logits (L2).

    MLP: operator norms of W1 and W2 (ReLU is 1-Lipschitz in every l_p).
    LR: the representation is the logit vector, so L1 = ||W1|| and L2 = 1.
    """
    p = parse_norm_order(p)
    L1 = _norm_of(model.W1, p)
    L2 = _norm_of(model.W2, p) if model.kind == "MLP" else 1.0
    return LayerLipschitz(L1=L1, L2=L2, p=p, degenerate=(L1 == 0.0 or L2 == 0.0))


@dataclass
class BoundRecord:
    point_id: int
    method: str
    L1: float
    L2: float
    lambda1: float
    lambda2: float
    ris: float
    rrs: float
    ros: float
    bound_ris: float
    bound_rrs: float
    bound_ris_via_ros: float
    bound_ris_direct: float
    slack_ris: float
    slack_rrs: float
    violated_ris: bool
    violated_rrs: bool

    @property
    def violated(self) -> bool:
        return self.violated_ris or self.violated_rrs

    def to_dict(self) -> dict:
        return asdict(self)


def _slack(bound: float, empirical: float) -> float:
    if empirical == 0.0:
        return math.inf
    return bound / empirical


def _exceeds(value: float, bound: float, tol: float) -> bool:
    return value > bound * (1 + tol) + tol


def verify_bounds(
    records: list[StabilityRecord],
    model,
    anchors: dict[int, np.ndarray],
    p: float = 2.0,
    tol: float = 1e-9,
) -> list[BoundRecord]:
    """Check both bounds for every record; ``anchors`` maps point_id to its input."""
    p = parse_norm_order(p)
    lip = layer_lipschitz(model, p)
    out = []
    for rec in records:
        if rec.denom_mode != NORM_RATIO:
            raise ValueError("bounds are only defined for norm_ratio metrics")
        x = np.asarray(anchors[rec.point_id], dtype=np.float64)
        h1_norm = float(np.linalg.norm(model.hidden_pre(x), ord=p))
        x_norm = float(np.linalg.norm(x, ord=p))
        lambda1 = h1_norm / x_norm if x_norm > 0 else math.inf
        lambda2 = h1_norm
        bound_ris = lambda1 * lip.L1 * rec.rrs
        bound_rrs = lambda2 * lip.L2 * rec.ros
        direct = (x_norm / h1_norm if h1_norm > 0 else math.inf) * lip.L1 * rec.rrs
        out.append(
            BoundRecord(
                point_id=rec.point_id,
                method=rec.method,
                L1=lip.L1,
                L2=lip.L2,
                lambda1=lambda1,
                lambda2=lambda2,
                ris=rec.ris,
                rrs=rec.rrs,
                ros=rec.ros,
                bound_ris=bound_ris,
                bound_rrs=bound_rrs,
                bound_ris_via_ros=lambda1 * lambda2 * lip.L1 * lip.L2 * rec.ros,
                bound_ris_direct=direct,
                slack_ris=_slack(bound_ris, rec.ris),
                slack_rrs=_slack(bound_rrs, rec.rrs),
                violated_ris=_exceeds(rec.ris, bound_ris, tol),
                violated_rrs=_exceeds(rec.rrs, bound_rrs, tol),
            )
        )
    return out


def _log_stats(values: list[float]) -> dict:
    # sorted so the float sums do not depend on record order
    finite = np.sort([v for v in values if math.isfinite(v) and v > 0])
    if finite.size == 0:
        return {"n": 0, "mean": None, "median": None, "log_mean": None, "geometric_mean": None}
    logs = np.log(finite)
    return {
        "n": int(finite.size),
        "mean": float(finite.mean()),
        "median": float(np.median(finite)),
        "log_mean": float(logs.mean()),
        "geometric_mean": float(np.exp(logs.mean())),
    }


def tightness_summary(bound_records: list[BoundRecord]) -> dict:
    """Per-method slack statistics (arithmetic and log-space) and violation counts.

    Records whose empirical metric is zero have infinite slack; they are
    counted separately and excluded from the statistics.
    """
    by_method: dict[str, list[BoundRecord]] = {}
    for r in bound_records:
        by_method.setdefault(r.method, []).append(r)
    summary = {}
    for method in sorted(by_method):
        recs = by_method[method]
        summary[method] = {
            "n_records": len(recs),
            "slack_ris": _log_stats([r.slack_ris for r in recs]),
            "slack_rrs": _log_stats([r.slack_rrs for r in recs]),
            "infinite_slack_ris": sum(math.isinf(r.slack_ris) for r in recs),
            "infinite_slack_rrs": sum(math.isinf(r.slack_rrs) for r in recs),
            "violations_ris": sum(r.violated_ris for r in recs),
            "violations_rrs": sum(r.violated_rrs for r in recs),
        }
    return summary


def lipschitz_info(model, p: float) -> dict:
    lip = layer_lipschitz(model, p)
    return {"L1": lip.L1, "L2": lip.L2, "p": norm_label(lip.p), "degenerate": lip.degenerate}
