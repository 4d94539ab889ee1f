"""Explanation stability metrics over a label-preserving neighbourhood.

All relative metrics share one numerator, the l_p norm of the element-wise
percent change from the anchor's explanation to a neighbour's. They differ in
the denominator:

* input stability: change of the input itself,
* representation stability: change of the first-layer pre-activation,
* output stability: raw change of the logit vector.

Input and representation denominators come in two flavours. ``elementwise``
divides component-wise before taking the norm; ``norm_ratio`` takes
``||a - b|| / ||a||``. Every denominator is clamped below at ``eps_min``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

ELEMENTWISE = "elementwise"
NORM_RATIO = "norm_ratio"
DENOM_MODES = (ELEMENTWISE, NORM_RATIO)


def parse_norm_order(p) -> float:
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "infinity", "max"):
            return math.inf
        p = float(p)
    p = float(p)
    if p not in (1.0, 2.0, math.inf):
        raise ValueError(f"norm order must be 1, 2 or inf, got {p}")
    return p


def norm_label(p: float) -> str:
    return "inf" if math.isinf(p) else str(int(p))


@dataclass(frozen=True)
class MetricConfig:
    p: float = 2.0
    eps_min: float = 1e-6
    eps_div: float = 1e-8
    denom_mode: str = ELEMENTWISE

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm_order(self.p))
        if self.eps_min <= 0 or self.eps_div <= 0:
            raise ValueError("eps_min and eps_div must be positive")
        if self.denom_mode not in DENOM_MODES:
            raise ValueError(f"denom_mode must be one of {DENOM_MODES}")

    def to_dict(self) -> dict:
        return {"p": norm_label(self.p), "eps_min": self.eps_min, "eps_div": self.eps_div, "denom_mode": self.denom_mode}


def percent_change(a, b, eps_div: float = 1e-8) -> np.ndarray:
    """``(a - b) / a`` component-wise, with ``|a|`` floored at ``eps_div`` and sign(0) = +1.

    Broadcasts, so ``a`` may be a single vector and ``b`` a stack of rows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sign = np.where(a < 0, -1.0, 1.0)
    return (a - b) / (sign * np.maximum(np.abs(a), eps_div))


def _row_norms(V: np.ndarray, p: float) -> np.ndarray:
    return np.linalg.norm(np.atleast_2d(V), ord=p, axis=1)


def explanation_change(e_x, e_nbrs, cfg: MetricConfig = MetricConfig()) -> np.ndarray:
    """Per-neighbour numerator shared by every relative metric."""
    return _row_norms(percent_change(e_x, e_nbrs, cfg.eps_div), cfg.p)


def _relative_change(a, B, cfg: MetricConfig) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if cfg.denom_mode == ELEMENTWISE:
        return _row_norms(percent_change(a, B, cfg.eps_div), cfg.p)
    scale = max(float(np.linalg.norm(a, ord=cfg.p)), cfg.eps_div)
    return _row_norms(a - np.atleast_2d(B), cfg.p) / scale


def input_change(x, points, cfg: MetricConfig = MetricConfig()) -> np.ndarray:
    return _relative_change(x, points, cfg)


def representation_change(model, x, points, cfg: MetricConfig = MetricConfig()) -> np.ndarray:
    return _relative_change(model.hidden_pre(x), model.hidden_pre(points), cfg)


def output_change(model, x, points, cfg: MetricConfig = MetricConfig()) -> np.ndarray:
    return _row_norms(model.logits(x) - np.atleast_2d(model.logits(points)), cfg.p)


def ratios(numerators: np.ndarray, denominators: np.ndarray, eps_min: float) -> np.ndarray:
    """Per-neighbour ratios ``num / max(den, eps_min)``; NaN marks skipped neighbours.

    A neighbour is skipped when numerator and denominator are both exactly zero.
    """
    num = np.asarray(numerators, dtype=np.float64)
    den = np.asarray(denominators, dtype=np.float64)
    out = num / np.maximum(den, eps_min)
    out[(num == 0) & (den == 0)] = np.nan
    return out


def _max_ratio(per: np.ndarray) -> tuple[float, int]:
    if per.size == 0 or np.all(np.isnan(per)):
        return 0.0, -1
    i = int(np.nanargmax(per))
    return float(per[i]), i


def relative_input_stability(e_x, e_nbrs, x, points, cfg: MetricConfig = MetricConfig()) -> float:
    per = ratios(explanation_change(e_x, e_nbrs, cfg), input_change(x, points, cfg), cfg.eps_min)
    return _max_ratio(per)[0]


def relative_representation_stability(e_x, e_nbrs, model, x, points, cfg: MetricConfig = MetricConfig()) -> float:
    per = ratios(explanation_change(e_x, e_nbrs, cfg), representation_change(model, x, points, cfg), cfg.eps_min)
    return _max_ratio(per)[0]


def relative_output_stability(e_x, e_nbrs, model, x, points, cfg: MetricConfig = MetricConfig()) -> float:
    per = ratios(explanation_change(e_x, e_nbrs, cfg), output_change(model, x, points, cfg), cfg.eps_min)
    return _max_ratio(per)[0]


def pointwise_lipschitz_stability(e_x, e_nbrs, x, points, p: float = 2.0) -> float:
    """Max over neighbours of ``||e_x - e_x'|| / ||x - x'||``.

    Neighbours identical to ``x`` are skipped; if all are, NaN is returned.
    """
    p = parse_norm_order(p)
    dist = _row_norms(np.asarray(x, dtype=np.float64) - np.atleast_2d(points), p)
    diff = _row_norms(np.asarray(e_x, dtype=np.float64) - np.atleast_2d(e_nbrs), p)
    ok = dist > 0
    if not ok.any():
        log.warning("Lipschitz stability undefined: every neighbour coincides with the anchor")
        return math.nan
    return float(np.max(diff[ok] / dist[ok]))


@dataclass
class StabilityRecord:
    point_id: int
    method: str
    ris: float
    rrs: float
    ros: float
    lipschitz_eq1: float
    argmax_neighbor_ris: int
    argmax_neighbor_rrs: int
    argmax_neighbor_ros: int
    n_skipped: dict = field(default_factory=dict)
    denom_mode: str = ELEMENTWISE
    per_neighbor: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "point_id": self.point_id,
            "method": self.method,
            "denom_mode": self.denom_mode,
            "ris": self.ris,
            "rrs": self.rrs,
            "ros": self.ros,
            "lipschitz_eq1": self.lipschitz_eq1,
            "argmax_neighbor_ris": self.argmax_neighbor_ris,
            "argmax_neighbor_rrs": self.argmax_neighbor_rrs,
            "argmax_neighbor_ros": self.argmax_neighbor_ros,
            "n_skipped": self.n_skipped,
        }
        if self.per_neighbor is not None:
            out["per_neighbor"] = {k: [None if math.isnan(v) else v for v in vals.tolist()]
                                   for k, vals in self.per_neighbor.items()}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "StabilityRecord":
        per = raw.get("per_neighbor")
        if per is not None:
            per = {k: np.array([math.nan if v is None else v for v in vals]) for k, vals in per.items()}
        return cls(
            point_id=raw["point_id"],
            method=raw["method"],
            ris=raw["ris"],
            rrs=raw["rrs"],
            ros=raw["ros"],
            lipschitz_eq1=raw["lipschitz_eq1"],
            argmax_neighbor_ris=raw["argmax_neighbor_ris"],
            argmax_neighbor_rrs=raw["argmax_neighbor_rrs"],
            argmax_neighbor_ros=raw["argmax_neighbor_ros"],
            n_skipped=raw.get("n_skipped", {}),
            denom_mode=raw.get("denom_mode", ELEMENTWISE),
            per_neighbor=per,
        )


class LabelMismatch(ValueError):
    pass


def evaluate(
    model,
    x,
    points,
    e_x,
    e_nbrs,
    cfg: MetricConfig = MetricConfig(),
    *,
    method: str = "",
    point_id: int = 0,
    keep_per_neighbor: bool = False,
) -> StabilityRecord:
    """All four metrics for one (point, method) pair.

    Re-checks that every neighbour shares the anchor's predicted label.
    """
    x = np.asarray(x, dtype=np.float64)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    label = int(np.ravel(model.predict(x))[0])
    bad = np.flatnonzero(np.ravel(model.predict(points)) != label)
    if bad.size:
        raise LabelMismatch(f"neighbours {bad.tolist()} change the predicted label {label}")

    num = explanation_change(e_x, e_nbrs, cfg)
    per = {
        "ris": ratios(num, input_change(x, points, cfg), cfg.eps_min),
        "rrs": ratios(num, representation_change(model, x, points, cfg), cfg.eps_min),
        "ros": ratios(num, output_change(model, x, points, cfg), cfg.eps_min),
    }
    best = {k: _max_ratio(v) for k, v in per.items()}
    return StabilityRecord(
        point_id=point_id,
        method=method,
        ris=best["ris"][0],
        rrs=best["rrs"][0],
        ros=best["ros"][0],
        lipschitz_eq1=pointwise_lipschitz_stability(e_x, e_nbrs, x, points, cfg.p),
        argmax_neighbor_ris=best["ris"][1],
        argmax_neighbor_rrs=best["rrs"][1],
        argmax_neighbor_ros=best["ros"][1],
        n_skipped={k: int(np.isnan(v).sum()) for k, v in per.items()},
        denom_mode=cfg.denom_mode,
        per_neighbor=per if keep_per_neighbor else None,
    )
