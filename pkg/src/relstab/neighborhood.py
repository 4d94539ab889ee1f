"""Label-preserving perturbation neighbourhoods around an anchor point."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class AcceptanceExhausted(RuntimeError):
    def __init__(self, accepted_so_far: int, requested: int, attempts: int):
        self.accepted_so_far = accepted_so_far
        self.requested = requested
        self.attempts = attempts
        super().__init__(
            f"accepted {accepted_so_far} of {requested} label-preserving perturbations in {attempts} attempts"
        )


@dataclass(frozen=True)
class Neighborhood:
    anchor: np.ndarray
    anchor_label: int
    points: np.ndarray
    gen_params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def m(self) -> int:
        return self.points.shape[0]


def norm(v: np.ndarray, p: float) -> float:
    return float(np.linalg.norm(np.ravel(v), ord=p))


def perturbation_distance(x, z, p: float = 2) -> float:
    return norm(np.asarray(x, dtype=np.float64) - np.asarray(z, dtype=np.float64), p)


def sample_neighborhood(
    model,
    x,
    m: int = 50,
    std: float = 0.05,
    p_flip: float = 0.03,
    binary_mask: np.ndarray | None = None,
    max_attempts: int | None = None,
    seed: int = 0,
) -> Neighborhood:
    """Rejection-sample ``m`` perturbations of ``x`` sharing its predicted label.

    Continuous features get additive N(0, std^2) noise; each binary feature is
    flipped independently with probability ``p_flip``. Candidates are drawn in
    fixed-size chunks so the result depends only on ``seed``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    d = x.size
    binary = np.zeros(d, dtype=bool) if binary_mask is None else np.asarray(binary_mask, dtype=bool)
    if max_attempts is None:
        max_attempts = 100 * m
    label = int(np.ravel(model.predict(x))[0])
    rng = np.random.default_rng(seed)

    accepted: list[np.ndarray] = []
    n_accepted = attempts = 0
    chunk = max(m, 1)
    while n_accepted < m and attempts < max_attempts:
        size = min(chunk, max_attempts - attempts)
        noise = rng.normal(0.0, 1.0, size=(size, d)) * std
        flips = rng.random((size, d)) < p_flip
        Z = np.where(binary, np.where(flips, 1.0 - x, x), x + noise)
        keep = Z[np.ravel(model.predict(Z)) == label]
        take = keep[: m - n_accepted]
        accepted.append(take)
        n_accepted += take.shape[0]
        attempts += size
    if n_accepted < m:
        raise AcceptanceExhausted(n_accepted, m, attempts)

    points = np.vstack(accepted) if accepted else np.empty((0, d))
    params = {"std": std, "p_flip": p_flip, "max_attempts": max_attempts, "attempts": attempts}
    return Neighborhood(anchor=x, anchor_label=label, points=points, gen_params=params, seed=seed)


def dump_neighborhood_csv(nbhd: Neighborhood, path: str | Path) -> None:
    """Debug dump: anchor row first, then the accepted perturbations."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row"] + [f"x{i}" for i in range(nbhd.anchor.size)])
        writer.writerow(["anchor"] + [repr(float(v)) for v in nbhd.anchor])
        for i, z in enumerate(nbhd.points):
            writer.writerow([i] + [repr(float(v)) for v in z])
