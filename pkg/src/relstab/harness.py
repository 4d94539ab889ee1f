"""End-to-end experiment pipeline: train, sample, explain, score, verify, summarise.

Every random stage draws its seed from :func:`derive_seed`, keyed by the
global seed, the anchor index and a stage tag, so worker count and method
order never change the outputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .bounds import BoundRecord, lipschitz_info, tightness_summary, verify_bounds
from .data import (
    DataError,
    Dataset,
    fit_standardizer,
    load_csv,
    load_schema,
    make_blobs,
    make_circles,
    split,
)
from .explain import DEFAULT_HYPER, GRADIENT_METHODS, METHODS, SMOOTHGRAD, explain
from .model import ModelArtifact, TrainConfig, init_model, load_model, save_model, train
from .neighborhood import AcceptanceExhausted, dump_neighborhood_csv, sample_neighborhood
from .stability import DENOM_MODES, ELEMENTWISE, NORM_RATIO, MetricConfig, StabilityRecord, evaluate, parse_norm_order

log = logging.getLogger(__name__)

STABILITY_FILE = "stability.jsonl"
BOUNDS_FILE = "bounds.jsonl"
ANCHORS_FILE = "anchors.csv"
MODEL_FILE = "model.json"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"

METRICS = ("ris", "rrs", "ros", "lipschitz_eq1")
LOG_FLOOR = 1e-300

# Reference values reported next to ours for manual comparison.
REFERENCE_SMOOTHGRAD_MARGIN_PCT = 12.7
REFERENCE_MEAN_BOUND_EXCESS_PCT = 233.0


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


@contextmanager
def stage(name: str):
    try:
        yield
    except (StageError, ConfigError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def derive_seed(global_seed: int, *tags) -> int:
    """Stable 63-bit seed from the global seed and any JSON-serialisable tags."""
    digest = hashlib.sha256(json.dumps([global_seed, *tags]).encode()).hexdigest()
    return int(digest[:15], 16)


def _default_dataset() -> dict:
    return {"kind": "synthetic", "name": "circles", "n": 1000, "noise_std": 0.05, "factor": 0.5}


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=_default_dataset)
    model: str = "mlp"
    seed: int = 0
    n_test_points: int = 100
    m_perturbations: int = 50
    explainers: list = field(default_factory=lambda: list(METHODS))
    hyper: dict = field(default_factory=dict)
    metric: dict = field(default_factory=lambda: {"p": "2", "eps_min": 1e-6, "eps_div": 1e-8})
    neighborhood: dict = field(default_factory=lambda: {"std": 0.05, "p_flip": 0.03, "max_attempts": None})
    train: dict = field(default_factory=lambda: {"lr": 2e-3, "batch_size": 32, "epochs": 100})
    hidden_width: int = 100
    model_path: str | None = None
    output_dir: str = "results"
    workers: int = 1
    keep_per_neighbor: bool = False
    dump_neighborhoods: bool = False

    # Fields that may change without changing any record.
    _UNHASHED = ("output_dir", "workers", "dump_neighborhoods")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        try:
            cfg = cls(**raw)
            cfg.validate()
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def metric_config(self, denom_mode: str = ELEMENTWISE) -> MetricConfig:
        return MetricConfig(denom_mode=denom_mode, **self.metric)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def config_hash(self) -> str:
        raw = {k: v for k, v in self.to_dict().items() if k not in self._UNHASHED}
        return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        kind = self.dataset.get("kind")
        if kind == "csv":
            for key in ("path", "schema"):
                if key not in self.dataset:
                    raise ConfigError(f"csv dataset needs {key!r}")
                if not Path(self.dataset[key]).exists():
                    raise ConfigError(f"dataset {key} {self.dataset[key]!r} does not exist")
        elif kind == "synthetic":
            if self.dataset.get("name") not in ("circles", "blobs"):
                raise ConfigError("synthetic dataset name must be 'circles' or 'blobs'")
        else:
            raise ConfigError("dataset.kind must be 'csv' or 'synthetic'")
        if self.model.lower() not in ("lr", "mlp"):
            raise ConfigError(f"model must be 'lr' or 'mlp', got {self.model!r}")
        bad = [m for m in self.explainers if m not in METHODS]
        if bad or not self.explainers:
            raise ConfigError(f"unsupported explainer(s) {bad}; choose from {list(METHODS)}")
        for method, params in self.hyper.items():
            if method not in METHODS:
                raise ConfigError(f"hyper overrides for unknown explainer {method!r}")
            extra = set(params) - set(DEFAULT_HYPER[method])
            if extra:
                raise ConfigError(f"{method}: unknown hyperparameter(s) {sorted(extra)}")
        if self.n_test_points < 1 or self.m_perturbations < 1:
            raise ConfigError("n_test_points and m_perturbations must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.model_path is not None and not Path(self.model_path).exists():
            raise ConfigError(f"model_path {self.model_path!r} does not exist")
        try:
            self.metric_config()
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class PreparedData:
    full: Dataset
    train: Dataset
    val: Dataset
    test: Dataset


def load_dataset(spec: dict, seed: int) -> Dataset:
    if spec["kind"] == "csv":
        return load_csv(spec["path"], load_schema(spec["schema"]))
    params = {k: v for k, v in spec.items() if k not in ("kind", "name")}
    params.setdefault("seed", seed)
    if spec["name"] == "circles":
        return make_circles(**params)
    return make_blobs(**params)


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    full = load_dataset(cfg.dataset, derive_seed(cfg.seed, "dataset"))
    tr, va, te = split(full, seed=derive_seed(cfg.seed, "split"))
    std = fit_standardizer(tr)
    return PreparedData(full, std.transform(tr), std.transform(va), std.transform(te))


def fit_model(cfg: ExperimentConfig, data: PreparedData) -> ModelArtifact:
    if cfg.model_path:
        model = load_model(cfg.model_path)
        if model.d != data.train.d:
            raise ConfigError(f"loaded model expects {model.d} features, data has {data.train.d}")
        return model
    model = init_model(cfg.model, data.train.d, data.train.n_classes, cfg.hidden_width, derive_seed(cfg.seed, "model"))
    return train(model, data.train, data.val, cfg.train_config())


# ---------------------------------------------------------------------------
# per-anchor work


@dataclass
class AnchorResult:
    point_id: int
    records: list[StabilityRecord] = field(default_factory=list)
    skipped: dict | None = None
    neighborhood: Any = None


def _process_anchor(cfg: ExperimentConfig, model, x: np.ndarray, point_id: int, binary_mask, baseline) -> AnchorResult:
    nb_params = dict(cfg.neighborhood)
    try:
        nbhd = sample_neighborhood(
            model,
            x,
            m=cfg.m_perturbations,
            std=nb_params.get("std", 0.05),
            p_flip=nb_params.get("p_flip", 0.03),
            binary_mask=binary_mask,
            max_attempts=nb_params.get("max_attempts"),
            seed=derive_seed(cfg.seed, "neighborhood", point_id),
        )
    except AcceptanceExhausted as exc:
        log.info("anchor %d skipped: %s", point_id, exc)
        return AnchorResult(point_id, skipped={"point_id": point_id, "accepted_so_far": exc.accepted_so_far})

    target = nbhd.anchor_label
    result = AnchorResult(point_id, neighborhood=nbhd)
    configs = [cfg.metric_config(mode) for mode in DENOM_MODES]
    for method in cfg.explainers:
        hyper = cfg.hyper.get(method, {})

        def run(z, j):
            seed = derive_seed(cfg.seed, "explain", method, point_id, j)
            return explain(method, model, z, target, seed=seed, baseline=baseline, **hyper).values

        e_x = run(x, -1)
        e_nbrs = np.array([run(z, j) for j, z in enumerate(nbhd.points)])
        for mcfg in configs:
            result.records.append(
                evaluate(
                    model,
                    x,
                    nbhd.points,
                    e_x,
                    e_nbrs,
                    mcfg,
                    method=method,
                    point_id=point_id,
                    keep_per_neighbor=cfg.keep_per_neighbor,
                )
            )
    return result


# ---------------------------------------------------------------------------
# persistence


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(_dumps(row) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _flatten(row: dict) -> dict:
    flat = {}
    for k, v in row.items():
        if isinstance(v, dict):
            for kk, vv in v.items():
                flat[f"{k}_{kk}"] = vv
        elif isinstance(v, list):
            flat[k] = json.dumps(v)
        else:
            flat[k] = v
    return flat


def write_csv_mirror(path: Path, rows: list[dict]) -> None:
    flat = [_flatten(r) for r in rows]
    columns: list[str] = []
    for r in flat:
        columns.extend(c for c in r if c not in columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in flat:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_anchors(path: Path, anchors: list[tuple[int, int, np.ndarray]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        d = anchors[0][2].size if anchors else 0
        writer.writerow(["point_id", "test_row"] + [f"x{i}" for i in range(d)])
        for pid, row, x in anchors:
            writer.writerow([pid, row] + [repr(float(v)) for v in x])


def read_anchors(path: Path) -> dict[int, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {int(r[0]): np.array([float(v) for v in r[2:]]) for r in reader}


def bound_records_from_rows(rows: list[dict]) -> list[BoundRecord]:
    fields = BoundRecord.__dataclass_fields__
    return [BoundRecord(**{k: v for k, v in r.items() if k in fields}) for r in rows]


# ---------------------------------------------------------------------------
# pipeline


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Run the full pipeline and return the results directory."""
    cfg.validate()
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    chash = cfg.config_hash()

    with stage("data"):
        data = prepare_data(cfg)
    with stage("train"):
        model = fit_model(cfg, data)
        save_model(model, out / MODEL_FILE)

    with stage("anchors"):
        n_anchors = min(cfg.n_test_points, data.test.n)
        rng = np.random.default_rng(derive_seed(cfg.seed, "anchors"))
        rows = np.sort(rng.choice(data.test.n, size=n_anchors, replace=False))
        anchors = [(pid, int(data.test.row_ids[r]), data.test.X[r]) for pid, r in enumerate(rows)]
        write_anchors(out / ANCHORS_FILE, anchors)
        baseline = data.train.X.mean(axis=0)

    with stage("explain"):
        def task(a):
            pid, _, x = a
            return _process_anchor(cfg, model, x, pid, data.test.binary_mask, baseline)

        if cfg.workers == 1:
            results = [task(a) for a in anchors]
        else:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(task, anchors))
        if cfg.dump_neighborhoods:
            nb_dir = out / "neighborhoods"
            nb_dir.mkdir(exist_ok=True)
            for r in results:
                if r.neighborhood is not None:
                    dump_neighborhood_csv(r.neighborhood, nb_dir / f"anchor_{r.point_id:04d}.csv")

    test_row = {pid: row for pid, row, _ in anchors}
    records = [rec for r in results for rec in r.records]
    skipped = [r.skipped for r in results if r.skipped]

    with stage("score"):
        stab_rows = [{**rec.to_dict(), "test_row": test_row[rec.point_id], "config_hash": chash} for rec in records]
        write_jsonl(out / STABILITY_FILE, stab_rows)
        write_csv_mirror(out / "stability.csv", stab_rows)

    with stage("verify"):
        anchor_x = {pid: x for pid, _, x in anchors}
        norm_records = [r for r in records if r.denom_mode == NORM_RATIO]
        bounds = verify_bounds(norm_records, model, anchor_x, p=cfg.metric_config().p)
        bound_rows = [{**b.to_dict(), "config_hash": chash} for b in bounds]
        write_jsonl(out / BOUNDS_FILE, bound_rows)
        write_csv_mirror(out / "bounds.csv", bound_rows)

    with stage("summarize"):
        summary = build_summary(stab_rows, bound_rows, cfg.explainers)
        (out / SUMMARY_FILE).write_text(_dumps(summary) + "\n", encoding="utf-8")

    labels = [int(data.test.y[r]) for r in rows]
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": chash,
        "seed": cfg.seed,
        "versions": {"relstab": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "n_anchors": n_anchors,
        "anchor_class_mix": {str(c): labels.count(c) for c in sorted(set(labels))},
        "skipped_anchors": skipped,
        "n_stability_records": len(stab_rows),
        "n_bound_records": len(bound_rows),
        "n_bound_violations": sum(b.violated for b in bounds),
        "model": {"kind": model.kind, **model.training_meta, "lipschitz": lipschitz_info(model, cfg.metric_config().p)},
        "test_accuracy": float(np.mean(model.predict(data.test.X) == data.test.y)),
        "started_at": started,
        "elapsed_seconds": time.time() - started,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def reverify(results_dir: str | Path, tol: float = 1e-9) -> list[BoundRecord]:
    """Recompute bound records from persisted norm-ratio records, model and anchors."""
    out = Path(results_dir)
    manifest = json.loads((out / MANIFEST_FILE).read_text(encoding="utf-8"))
    p = parse_norm_order(manifest["config"]["metric"].get("p", 2))
    model = load_model(out / MODEL_FILE)
    anchors = read_anchors(out / ANCHORS_FILE)
    records = [StabilityRecord.from_dict(r) for r in read_jsonl(out / STABILITY_FILE) if r["denom_mode"] == NORM_RATIO]
    return verify_bounds(records, model, anchors, p=p, tol=tol)


# ---------------------------------------------------------------------------
# summaries


def log10_stats(values: list[float]) -> dict:
    v = np.maximum(np.asarray(values, dtype=np.float64), LOG_FLOOR)
    logs = np.log10(v)
    q1, med, q3 = np.percentile(logs, [25, 50, 75])
    return {
        "n": int(v.size),
        "zero_count": int(np.sum(np.asarray(values) == 0)),
        "median_log10": float(med),
        "q1_log10": float(q1),
        "q3_log10": float(q3),
        "min_log10": float(logs.min()),
        "max_log10": float(logs.max()),
        "median": float(np.median(values)),
    }


def _rank(cells: dict, methods: list[str], metric: str) -> list[dict]:
    present = [(cells[m][metric]["median"], m) for m in methods if not cells[m].get("absent")]
    return [{"rank": i + 1, "method": m, "median": v} for i, (v, m) in enumerate(sorted(present))]


def _stability_trend(cells: dict, methods: list[str]) -> dict:
    present = [m for m in methods if not cells[m].get("absent")]
    ris_lowest = {
        m: cells[m]["ris"]["median"] < cells[m]["rrs"]["median"] and cells[m]["ris"]["median"] < cells[m]["ros"]["median"]
        for m in present
    }
    grad = [m for m in GRADIENT_METHODS if m in present]
    trend = {"ris_median_below_rrs_and_ros": ris_lowest, "smoothgrad": None}
    if SMOOTHGRAD in grad and len(grad) > 1:
        sg = {}
        for metric in ("rrs", "ros"):
            order = sorted(grad, key=lambda m: cells[m][metric]["median"])
            others = [cells[m][metric]["median"] for m in present if m != SMOOTHGRAD]
            best_other = min(others)
            margin = 100.0 * (best_other - cells[SMOOTHGRAD][metric]["median"]) / best_other if best_other > 0 else None
            sg[metric] = {
                "rank_among_gradient_methods": order.index(SMOOTHGRAD) + 1,
                "n_gradient_methods": len(grad),
                "margin_vs_best_other_pct": margin,
            }
        trend["smoothgrad"] = sg
    trend["reference_smoothgrad_margin_pct"] = REFERENCE_SMOOTHGRAD_MARGIN_PCT
    return trend


def build_summary(stab_rows: list[dict], bound_rows: list[dict], methods: list[str]) -> dict:
    """Order-free statistics of persisted record rows."""
    tables = {}
    for mode in DENOM_MODES:
        cells = {}
        for method in methods:
            rows = [r for r in stab_rows if r["method"] == method and r["denom_mode"] == mode]
            if not rows:
                cells[method] = {"absent": True}
                continue
            cells[method] = {
                metric: log10_stats([r[metric] for r in rows if r[metric] is not None and not math.isnan(r[metric])])
                for metric in METRICS
            }
        tables[mode] = {
            "cells": cells,
            "rank_rrs": _rank(cells, methods, "rrs"),
            "rank_ros": _rank(cells, methods, "ros"),
            "trend": _stability_trend(cells, methods),
        }
    bounds = tightness_summary(bound_records_from_rows(bound_rows))
    finite = sorted(r["slack_ris"] for r in bound_rows if math.isfinite(r["slack_ris"]))
    mean_excess = 100.0 * (float(np.mean(finite)) - 1.0) if finite else None
    return {
        "modes": tables,
        "bounds": bounds,
        "bounds_overall": {
            "n_records": len(bound_rows),
            "violations_ris": sum(r["violated_ris"] for r in bound_rows),
            "violations_rrs": sum(r["violated_rrs"] for r in bound_rows),
            "mean_bound_excess_ris_pct": mean_excess,
            "reference_mean_bound_excess_pct": REFERENCE_MEAN_BOUND_EXCESS_PCT,
        },
    }


def summarize(results_dir: str | Path) -> dict:
    out = Path(results_dir)
    manifest = json.loads((out / MANIFEST_FILE).read_text(encoding="utf-8"))
    stab_rows = read_jsonl(out / STABILITY_FILE)
    bound_path = out / BOUNDS_FILE
    bound_rows = read_jsonl(bound_path) if bound_path.exists() else []
    return build_summary(stab_rows, bound_rows, manifest["config"]["explainers"])


def format_summary(summary: dict, mode: str = ELEMENTWISE) -> str:
    table = summary["modes"][mode]
    lines = [f"# log10 stability ({mode} denominators): median [q1, q3]"]
    header = f"{'method':<20}" + "".join(f"{m:>26}" for m in METRICS)
    lines.append(header)
    for method, cell in table["cells"].items():
        if cell.get("absent"):
            lines.append(f"{method:<20}{'absent':>26}")
            continue
        parts = [f"{c['median_log10']:8.3f} [{c['q1_log10']:6.2f},{c['q3_log10']:6.2f}]" for c in (cell[m] for m in METRICS)]
        lines.append(f"{method:<20}" + "".join(f"{p:>26}" for p in parts))
    for metric in ("rrs", "ros"):
        ranking = ", ".join(f"{r['rank']}. {r['method']}" for r in table[f"rank_{metric}"])
        lines.append(f"rank by median {metric.upper()}: {ranking}")
    trend = table["trend"]
    below = trend["ris_median_below_rrs_and_ros"]
    lines.append(f"median RIS below RRS and ROS: {sum(below.values())}/{len(below)} methods")
    if trend["smoothgrad"]:
        for metric, info in trend["smoothgrad"].items():
            margin = info["margin_vs_best_other_pct"]
            margin_txt = "n/a" if margin is None else f"{margin:+.1f}%"
            lines.append(
                f"SmoothGrad {metric.upper()}: rank {info['rank_among_gradient_methods']}/{info['n_gradient_methods']}"
                f" among gradient methods, margin vs best other {margin_txt}"
                f" (reference: best, {trend['reference_smoothgrad_margin_pct']}%)"
            )
    bo = summary["bounds_overall"]
    if bo["n_records"]:
        excess = bo["mean_bound_excess_ris_pct"]
        lines.append(
            f"bounds: {bo['n_records']} records, violations RIS {bo['violations_ris']}, RRS {bo['violations_rrs']};"
            f" mean RIS bound excess {'n/a' if excess is None else f'{excess:.0f}%'}"
            f" (reference {bo['reference_mean_bound_excess_pct']:.0f}%)"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# embedding analysis on a 2-D toy problem


@dataclass
class CirclesConfig:
    dataset: str = "circles"
    model: str = "mlp"
    n: int = 1000
    noise_std: float = 0.05
    factor: float = 0.5
    separation: float = 6.0
    seed: int = 0
    n_anchors: int = 100
    m_perturbations: int = 50
    perturbation_std: float = 0.05
    grid_resolution: int = 60
    hidden_width: int = 100
    train: dict = field(default_factory=lambda: {"lr": 2e-3, "batch_size": 32, "epochs": 100})
    min_val_accuracy: float = 0.95

    @classmethod
    def from_dict(cls, raw: dict) -> "CirclesConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown circles config field(s): {', '.join(sorted(unknown))}")
        return cls(**raw)


def _nearest_other_fraction(emb: np.ndarray, own: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Boolean per row: some other class centroid is strictly nearer than the own-class one."""
    dist = np.linalg.norm(emb[:, None, :] - centroids[None, :, :], axis=2)
    own_d = dist[np.arange(len(own)), own]
    dist[np.arange(len(own)), own] = np.inf
    return dist.min(axis=1) < own_d


def circles_report(cfg: CirclesConfig, out_dir: str | Path | None = None) -> dict:
    """Measure how often label-preserving perturbations land nearer the other class in embedding space.

    Class centroids are means of the training-set representations per true
    label. Writes ``circles_report.json`` and, for 2-D data,
    ``confidence_grid.csv`` when ``out_dir`` is given.
    """
    if cfg.dataset == "circles":
        full = make_circles(cfg.n, cfg.noise_std, cfg.factor, seed=derive_seed(cfg.seed, "dataset"))
    elif cfg.dataset == "blobs":
        full = make_blobs(cfg.n, 2, cfg.separation, seed=derive_seed(cfg.seed, "dataset"))
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    tr, va, te = split(full, seed=derive_seed(cfg.seed, "split"))
    std = fit_standardizer(tr)
    tr, va, te = std.transform(tr), std.transform(va), std.transform(te)
    model = init_model(cfg.model, tr.d, tr.n_classes, cfg.hidden_width, derive_seed(cfg.seed, "model"))
    model = train(model, tr, va, TrainConfig(**cfg.train))
    val_acc = model.training_meta["best_val_accuracy"]

    centroids = np.array([model.hidden_pre(tr.X[tr.y == c]).mean(axis=0) for c in range(tr.n_classes)])
    n_anchors = min(cfg.n_anchors, te.n)
    anchors = te.X[:n_anchors]
    anchor_labels = model.predict(anchors)
    anchor_flags = _nearest_other_fraction(model.hidden_pre(anchors), anchor_labels, centroids)

    flags, skipped = [], 0
    for i, (x, label) in enumerate(zip(anchors, anchor_labels)):
        try:
            nb = sample_neighborhood(
                model, x, m=cfg.m_perturbations, std=cfg.perturbation_std, p_flip=0.0,
                seed=derive_seed(cfg.seed, "circles-neighborhood", i),
            )
        except AcceptanceExhausted:
            skipped += 1
            continue
        own = np.full(nb.m, label)
        flags.append(_nearest_other_fraction(model.hidden_pre(nb.points), own, centroids))
    all_flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)

    report = {
        "dataset": cfg.dataset,
        "model": model.kind,
        "val_accuracy": val_acc,
        "training_ok": val_acc > cfg.min_val_accuracy,
        "n_anchors": int(n_anchors),
        "skipped_anchors": skipped,
        "n_perturbations": int(all_flags.size),
        "opposite_centroid_fraction": float(all_flags.mean()) if all_flags.size else 0.0,
        "anchor_opposite_centroid_fraction": float(anchor_flags.mean()) if n_anchors else 0.0,
        "centroid_distance": float(np.linalg.norm(centroids[0] - centroids[-1])),
        "config": asdict(cfg),
    }
    if not report["training_ok"]:
        log.warning("validation accuracy %.3f does not exceed %.2f", val_acc, cfg.min_val_accuracy)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "circles_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if tr.d == 2:
            _write_confidence_grid(out / "confidence_grid.csv", model, tr.X, cfg.grid_resolution)
    return report


def _write_confidence_grid(path: Path, model, X: np.ndarray, resolution: int) -> None:
    lo, hi = X.min(axis=0) - 0.5, X.max(axis=0) + 0.5
    g0, g1 = np.meshgrid(np.linspace(lo[0], hi[0], resolution), np.linspace(lo[1], hi[1], resolution))
    grid = np.c_[g0.ravel(), g1.ravel()]
    probs = model.probs(grid)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x0", "x1", "prob_class1", "predicted"])
        for (a, b), pr in zip(grid, probs):
            writer.writerow([repr(float(a)), repr(float(b)), repr(float(pr[1])), int(np.argmax(pr))])
