"""Open-set metrics, evaluation reports and the ablation grid.

Index ``K`` stands for "unknown" everywhere: in confusion matrices, predicted
labels and reports.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import LabeledImageSet, SplitSpec, generate_synthetic, split
from .detector import OpenSetDetector
from .errors import CGDLError, ConfigError
from .ladder import LadderConfig, LadderModel, infer
from .numerics import make_rng
from .trainer import TrainConfig, closed_set_accuracy, train

log = logging.getLogger(__name__)


def openness(n_train: int, n_test: int, n_target: int) -> float:
    """``1 - sqrt(2 n_train / (n_test + n_target))`` over class counts."""
    if min(n_train, n_test, n_target) <= 0:
        raise ValueError("class counts must be positive")
    if 2 * n_train > n_test + n_target:
        raise ValueError("need 2 * n_train <= n_test + n_target")
    return 1.0 - math.sqrt(2.0 * n_train / (n_test + n_target))


def openness_for(num_known: int, num_unknown: int) -> float:
    """Openness when ``num_unknown`` unseen classes join ``num_known`` at test time."""
    return openness(num_known, num_known + num_unknown, num_known)


def confusion_counts(truth, pred, num_known: int) -> np.ndarray:
    """(K+1) x (K+1) counts, rows = truth, columns = prediction."""
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if truth.shape != pred.shape:
        raise ValueError("truth and prediction lengths differ")
    size = num_known + 1
    if truth.size and (truth.min() < 0 or truth.max() >= size or pred.min() < 0 or pred.max() >= size):
        raise ValueError(f"labels must lie in [0, {num_known}]")
    counts = np.zeros((size, size), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return counts


def per_class_f1(counts) -> np.ndarray:
    """F1 per class; a zero precision or recall denominator counts as 0."""
    counts = np.asarray(counts, dtype=np.float64)
    tp = np.diag(counts)
    pred_tot = counts.sum(axis=0)
    true_tot = counts.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(counts, classes: Sequence[int] | None = None) -> float:
    """Unweighted mean of per-class F1 over all classes (or just ``classes``)."""
    counts = np.asarray(counts)
    if counts.sum() <= 0:
        raise ValueError("confusion matrix is empty")
    f1 = per_class_f1(counts)
    if classes is not None:
        f1 = f1[list(classes)]
    return float(f1.mean())


# ---------------------------------------------------------------- single evaluation


@dataclass
class EvalReport:
    closed_set_accuracy: float
    macro_f1: float
    macro_f1_classes: int
    openness: float
    tau_l: float
    tau_r: float
    detector: str
    confusion: list[list[int]]
    per_class_f1: list[float]
    num_known_samples: int
    num_unknown_samples: int
    unknown_rejection_rate: float | None
    known_rejection_rate: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(
    model: LadderModel,
    detector: OpenSetDetector,
    known_test: LabeledImageSet,
    unknown_sets: Sequence[LabeledImageSet] = (),
    num_unknown_classes: int | None = None,
) -> EvalReport:
    """Run the detector over known and unknown test samples.

    With no unknown samples the macro-F1 is taken over the K known classes
    only, and the unknown row of the confusion matrix is all zero.
    """
    K = model.config.num_classes
    unknown = [u for u in unknown_sets if len(u)]
    n_unk = sum(len(u) for u in unknown)
    pred_known = detector.predict(model, known_test.flat()) if len(known_test) else np.zeros(0, np.int64)
    preds = [pred_known] + [detector.predict(model, u.flat()) for u in unknown]
    truth = np.concatenate([known_test.labels] + [np.full(len(u), K) for u in unknown])
    pred = np.concatenate(preds) if preds else np.zeros(0, np.int64)
    counts = confusion_counts(truth, pred, K)
    classes = None if n_unk else range(K)
    if num_unknown_classes is None:
        num_unknown_classes = sum(len(np.unique(u.labels)) for u in unknown)
    pred_unknown = np.concatenate(preds[1:]) if n_unk else np.zeros(0)
    return EvalReport(
        closed_set_accuracy=closed_set_accuracy(model, known_test.flat(), known_test.labels),
        macro_f1=macro_f1(counts, classes),
        macro_f1_classes=K if classes is not None else K + 1,
        openness=openness_for(K, num_unknown_classes) if num_unknown_classes else 0.0,
        tau_l=detector.thresholds.tau_l,
        tau_r=detector.thresholds.tau_r,
        detector=detector.kind,
        confusion=counts.tolist(),
        per_class_f1=per_class_f1(counts).tolist(),
        num_known_samples=len(known_test),
        num_unknown_samples=n_unk,
        unknown_rejection_rate=float(np.mean(pred_unknown == K)) if n_unk else None,
        known_rejection_rate=float(np.mean(pred_known == K)) if len(pred_known) else 0.0,
    )


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationVariant:
    name: str
    ladder_enabled: bool
    detector: str
    decoder_losses: bool = True

    @property
    def profile(self) -> tuple[bool, bool]:
        """Training profile key; variants sharing it share one trained model."""
        return (self.ladder_enabled, self.decoder_losses)


VARIANTS: dict[str, AblationVariant] = {
    "I": AblationVariant("I", False, "softmax_threshold", decoder_losses=False),
    "II": AblationVariant("II", False, "softmax_threshold"),
    "III": AblationVariant("III", True, "softmax_threshold"),
    "IV": AblationVariant("IV", False, "cgd"),
    "V": AblationVariant("V", True, "cgd"),
    "VI": AblationVariant("VI", True, "re"),
    "VII": AblationVariant("VII", True, "cgd_and_re"),
}
VARIANT_ALIASES = {
    "CNN": "I", "CVAE": "II", "LCVAE": "III", "CVAE+CGD": "IV",
    "LCVAE+CGD": "V", "LCVAE+RE": "VI", "CGDL": "VII",
}


def resolve_variant(name: str) -> AblationVariant:
    key = VARIANT_ALIASES.get(name.upper(), name.upper())
    if key not in VARIANTS:
        valid = ", ".join(list(VARIANTS) + list(VARIANT_ALIASES))
        raise ConfigError(f"unknown variant {name!r}; valid names: {valid}")
    return VARIANTS[key]


@dataclass
class AblationSpec:
    """Synthetic open-set benchmark plus model/training settings for the grid."""

    pool_classes: int = 10
    num_known: int = 4
    per_class: int = 400
    test_fraction: float = 0.25
    unknown_per_class: int = 100
    image_side: int = 10
    noise_sigma: float = 0.1
    data_seed: int = 123
    layer_dims: tuple[int, ...] = (64, 48)
    latent_dim: int = 32
    epochs: int = 200
    learning_rate: float = 0.001
    batch_size: int = 64
    lam: float = 100.0
    tau_l: float = 0.5

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        return d


@dataclass
class AblationCell:
    variant: str
    unknown_classes: int
    openness: float
    seed: int
    macro_f1: float | None
    error: str | None = None


@dataclass
class AblationRow:
    variant: str
    unknown_classes: int
    openness: float
    mean_f1: float | None
    std_f1: float | None
    runs: int
    failed: int


@dataclass
class AblationResult:
    cells: list[AblationCell]
    rows: list[AblationRow]
    spec: dict = field(default_factory=dict)

    def row(self, variant: str, unknown_classes: int) -> AblationRow:
        for r in self.rows:
            if r.variant == variant and r.unknown_classes == unknown_classes:
                return r
        raise KeyError((variant, unknown_classes))

    def grid_mean(self, variant: str) -> float:
        vals = [c.macro_f1 for c in self.cells if c.variant == variant and c.macro_f1 is not None]
        return float(np.mean(vals)) if vals else float("nan")


def _train_profile(spec: AblationSpec, train_set: LabeledImageSet, ladder: bool,
                   decoder_losses: bool, seed: int) -> tuple[LadderModel, OpenSetDetector]:
    cfg = LadderConfig(
        input_dim=int(np.prod(train_set.image_shape)),
        layer_dims=spec.layer_dims,
        num_classes=spec.num_known,
        latent_dim=spec.latent_dim,
        ladder=ladder,
    )
    model = LadderModel.init(cfg, seed)
    tc = TrainConfig(
        epochs=spec.epochs,
        learning_rate=spec.learning_rate,
        batch_size=spec.batch_size,
        lam=spec.lam,
        seed=seed,
        recon_weight=1.0 if decoder_losses else 0.0,
        beta_max=1.0 if decoder_losses else 0.0,
    )
    train(model, train_set, tc)
    det = OpenSetDetector.calibrate(model, train_set.flat(), train_set.labels, tau_l=spec.tau_l)
    return model, det


def _known_and_pool(spec: AblationSpec, seed: int):
    if spec.num_known + 1 > spec.pool_classes:
        raise ConfigError("pool_classes must exceed num_known")
    pool = generate_synthetic(spec.pool_classes, spec.per_class, spec.image_side,
                              spec.noise_sigma, spec.data_seed)
    order = make_rng(seed, "ablation-known").permutation(spec.pool_classes)
    return pool, [int(k) for k in order[: spec.num_known]], [int(k) for k in order[spec.num_known:]]


def _run_seed(spec: AblationSpec, variants: Sequence[AblationVariant],
              unknown_counts: Sequence[int], seed: int) -> list[AblationCell]:
    """All cells for one seed. Known classes depend only on the seed, so one
    trained model per profile serves every openness level."""
    cells: list[AblationCell] = []
    pool, known, rest = _known_and_pool(spec, seed)
    train_set, _, _ = split(pool, SplitSpec(known, (), seed, spec.test_fraction))
    trained: dict[tuple[bool, bool], tuple[LadderModel, OpenSetDetector] | Exception] = {}
    for v in variants:
        if v.profile not in trained:
            try:
                trained[v.profile] = _train_profile(spec, train_set, *v.profile, seed)
            except CGDLError as exc:
                trained[v.profile] = exc
    for u in unknown_counts:
        op = openness_for(spec.num_known, u)
        if u > len(rest):
            for v in variants:
                cells.append(AblationCell(v.name, u, op, seed, None,
                                          f"only {len(rest)} unknown classes in the pool"))
            continue
        _, test_known, test_unknown = split(
            pool, SplitSpec(known, rest[:u], seed, spec.test_fraction, spec.unknown_per_class)
        )
        for v in variants:
            got = trained[v.profile]
            if isinstance(got, Exception):
                cells.append(AblationCell(v.name, u, op, seed, None, f"{type(got).__name__}: {got}"))
                continue
            model, det = got
            try:
                rep = evaluate(model, det.with_kind(v.detector), test_known, [test_unknown], u)
                cells.append(AblationCell(v.name, u, op, seed, rep.macro_f1))
            except CGDLError as exc:
                cells.append(AblationCell(v.name, u, op, seed, None, f"{type(exc).__name__}: {exc}"))
    return cells


def run_ablation(
    spec: AblationSpec,
    variants: Sequence[str | AblationVariant],
    unknown_counts: Sequence[int],
    seeds: Sequence[int],
    workers: int | None = None,
) -> AblationResult:
    """Macro-F1 for every (variant, openness level, seed) and its mean/std over seeds.

    ``unknown_counts`` fixes the openness levels as numbers of unseen classes
    added at test time. Seeds run in parallel when ``workers > 1``; results
    are reduced in a fixed order so the output does not depend on scheduling.
    """
    vs = [v if isinstance(v, AblationVariant) else resolve_variant(v) for v in variants]
    if not vs:
        raise ConfigError("no variants requested")
    if workers is None:
        workers = int(os.environ.get("CGDL_THREADS", "1") or 1)
    seeds = list(seeds)
    if workers > 1 and len(seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            per_seed = list(ex.map(_run_seed, [spec] * len(seeds), [vs] * len(seeds),
                                   [list(unknown_counts)] * len(seeds), seeds))
    else:
        per_seed = [_run_seed(spec, vs, unknown_counts, s) for s in seeds]
    cells = [c for group in per_seed for c in group]
    rows = []
    for v in vs:
        for u in unknown_counts:
            mine = [c for c in cells if c.variant == v.name and c.unknown_classes == u]
            ok = [c.macro_f1 for c in mine if c.macro_f1 is not None]
            rows.append(AblationRow(
                variant=v.name,
                unknown_classes=u,
                openness=openness_for(spec.num_known, u),
                mean_f1=float(np.mean(ok)) if ok else None,
                std_f1=float(np.std(ok)) if ok else None,
                runs=len(ok),
                failed=len(mine) - len(ok),
            ))
    for c in cells:
        if c.error:
            log.warning("cell %s/u=%d/seed=%d failed: %s", c.variant, c.unknown_classes, c.seed, c.error)
    return AblationResult(cells, rows, spec.to_dict())


GRID_COLUMNS = ("variant", "unknown_classes", "openness", "seed", "macro_f1", "error")
TABLE_COLUMNS = ("variant", "unknown_classes", "openness", "mean_f1", "std_f1", "runs", "failed")


def write_ablation(result: AblationResult, out_dir, config: dict | None = None) -> dict[str, Path]:
    """Write ``ablation_cells.csv``, ``ablation_table.csv`` and ``ablation_summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "cells": out / "ablation_cells.csv",
        "table": out / "ablation_table.csv",
        "summary": out / "ablation_summary.json",
    }
    with open(paths["cells"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=GRID_COLUMNS)
        w.writeheader()
        for c in result.cells:
            w.writerow({k: ("" if v is None else v) for k, v in dataclasses.asdict(c).items()})
    with open(paths["table"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for r in result.rows:
            w.writerow({k: ("" if v is None else v) for k, v in dataclasses.asdict(r).items()})
    summary = {
        "tool_version": __version__,
        "config": config if config is not None else {},
        "spec": result.spec,
        "rows": [dataclasses.asdict(r) for r in result.rows],
    }
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths


# ---------------------------------------------------------------- latents


def export_latents(model: LadderModel, dataset: LabeledImageSet, path) -> Path:
    """CSV of deterministic latent codes: ``sample_id, label, z_1 .. z_J``."""
    path = Path(path)
    J = model.config.latent_dim
    z = infer(model, dataset.flat())["z"] if len(dataset) else np.zeros((0, J))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label"] + [f"z_{j + 1}" for j in range(J)])
            for i in range(len(dataset)):
                w.writerow([i, int(dataset.labels[i])] + [repr(float(v)) for v in z[i]])
    except OSError as exc:
        raise OSError(f"could not write latents to {path}: {exc}") from exc
    return path


def read_latents(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_latents`: (sample_ids, labels, codes)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    J = len(header) - 2
    if not body:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, J))
    ids = np.array([int(r[0]) for r in body])
    labels = np.array([int(r[1]) for r in body])
    z = np.array([[float(v) for v in r[2:]] for r in body])
    return ids, labels, z
