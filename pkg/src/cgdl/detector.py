"""Unknown detection from class-conditional latent Gaussians and reconstruction error.

After training, each class gets a diagonal Gaussian fitted to the latent codes
of its correctly classified training samples. A test code's membership in
class ``k`` is one minus the Gaussian mass of the axis-aligned box centred on
the class mean and reaching out to the code; for a diagonal Gaussian that box
mass factorises into a product of per-axis ``erf`` terms. A sample is rejected
as unknown when no class reaches the membership threshold, or when its L1
reconstruction error exceeds the 95th-percentile training error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import special

from .errors import CalibrationError, ConfigError
from .ladder import LadderModel, infer

VAR_FLOOR = 1e-6
DEFAULT_TAU_L = 0.5
DEFAULT_QUANTILE = 0.95
SOFTMAX_THRESHOLD = 0.5

DetectorKind = Literal["softmax_threshold", "cgd", "re", "cgd_and_re"]
DETECTOR_KINDS: tuple[str, ...] = ("softmax_threshold", "cgd", "re", "cgd_and_re")


@dataclass
class ClassGaussian:
    class_id: int
    m: np.ndarray
    var: np.ndarray
    count: int


@dataclass
class DetectorThresholds:
    tau_l: float = DEFAULT_TAU_L
    tau_r: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.tau_l < 1.0:
            raise ConfigError(f"tau_l must lie in (0, 1), got {self.tau_l}")
        if self.tau_r < 0:
            raise ConfigError(f"tau_r must be >= 0, got {self.tau_r}")


@dataclass
class Decision:
    verdict: Literal["known", "unknown"]
    predicted_label: int | None
    max_membership: float
    recon_error: float

    def __post_init__(self):
        if self.verdict == "known" and self.predicted_label is None:
            raise ValueError("a known verdict needs a predicted label")


def class_statistics(latents: np.ndarray, class_id: int = 0) -> ClassGaussian:
    """Per-dimension mean and population variance (floored) of ``latents``."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] < 2:
        n = latents.shape[0] if latents.ndim == 2 else 0
        raise CalibrationError(
            f"class {class_id}: need at least 2 correctly classified samples, got {n}"
        )
    m = latents.mean(axis=0)
    var = np.maximum(latents.var(axis=0), VAR_FLOOR)
    return ClassGaussian(class_id=int(class_id), m=m, var=var, count=int(latents.shape[0]))


def fit_class_gaussians(model: LadderModel, images, labels) -> list[ClassGaussian]:
    """Fit one Gaussian per class on correctly classified training codes."""
    out = infer(model, images)
    labels = np.asarray(labels, dtype=np.int64)
    pred = out["probs"].argmax(axis=1)
    gaussians = []
    for k in range(model.config.num_classes):
        mask = (labels == k) & (pred == k)
        gaussians.append(class_statistics(out["z"][mask], k))
    return gaussians


def membership_probability(z, g: ClassGaussian) -> float | np.ndarray:
    """``1 - prod_j erf(|z_j - m_j| / (sigma_j sqrt 2))``.

    ``z`` may be a single code or a batch (rows); the result has matching
    leading shape.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != g.m.shape[0]:
        raise ValueError(f"code width {z.shape[-1]} != gaussian width {g.m.shape[0]}")
    half_width = np.abs(z - g.m) / (np.sqrt(g.var) * math.sqrt(2.0))
    p = 1.0 - np.prod(special.erf(half_width), axis=-1)
    return float(p) if np.ndim(p) == 0 else p


def membership_matrix(z: np.ndarray, gaussians: Sequence[ClassGaussian]) -> np.ndarray:
    """Membership of every code (rows) in every class (columns)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if not gaussians:
        return np.zeros((z.shape[0], 0))
    return np.stack([membership_probability(z, g) for g in gaussians], axis=1).reshape(
        z.shape[0], len(gaussians)
    )


def nearest_rank(values, q: float = DEFAULT_QUANTILE) -> float:
    """Smallest value with at least fraction ``q`` of samples at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise CalibrationError("cannot take a percentile of an empty set")
    rank = max(1, math.ceil(q * v.size - 1e-12))
    return float(v[rank - 1])


def reconstruction_errors(model: LadderModel, images) -> np.ndarray:
    """Per-sample L1 distance between input and deterministic reconstruction."""
    images = np.asarray(images, dtype=np.float64)
    flat = images.reshape(images.shape[0], -1)
    recon = infer(model, flat)["recon"]
    return np.abs(flat - recon).sum(axis=1)


def calibrate_tau_r(model: LadderModel, images, q: float = DEFAULT_QUANTILE) -> float:
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise CalibrationError("cannot calibrate the reconstruction threshold on an empty set")
    return nearest_rank(reconstruction_errors(model, images), q)


@dataclass
class OpenSetDetector:
    """Fitted detector state: class Gaussians, thresholds and the rejection rule."""

    gaussians: list[ClassGaussian]
    thresholds: DetectorThresholds = field(default_factory=DetectorThresholds)
    kind: str = "cgd_and_re"
    softmax_threshold: float = SOFTMAX_THRESHOLD

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ConfigError(f"unknown detector kind {self.kind!r}; valid: {', '.join(DETECTOR_KINDS)}")

    @property
    def num_classes(self) -> int:
        return len(self.gaussians)

    @classmethod
    def calibrate(
        cls,
        model: LadderModel,
        images,
        labels,
        tau_l: float = DEFAULT_TAU_L,
        kind: str = "cgd_and_re",
        quantile: float = DEFAULT_QUANTILE,
    ) -> OpenSetDetector:
        gaussians = fit_class_gaussians(model, images, labels)
        tau_r = calibrate_tau_r(model, images, quantile)
        return cls(gaussians, DetectorThresholds(tau_l=tau_l, tau_r=tau_r), kind=kind)

    def with_kind(self, kind: str) -> OpenSetDetector:
        return OpenSetDetector(self.gaussians, self.thresholds, kind, self.softmax_threshold)

    def scores(self, model: LadderModel, images) -> dict[str, np.ndarray]:
        """Codes, predictions, memberships and reconstruction errors for a batch."""
        images = np.asarray(images, dtype=np.float64)
        flat = images.reshape(images.shape[0], -1)
        out = infer(model, flat)
        member = membership_matrix(out["z"], self.gaussians)
        return {
            "z": out["z"],
            "probs": out["probs"],
            "pred": out["probs"].argmax(axis=1) if len(flat) else np.zeros(0, dtype=np.int64),
            "membership": member,
            "max_membership": member.max(axis=1) if len(flat) else np.zeros(0),
            "recon_error": np.abs(flat - out["recon"]).sum(axis=1),
        }

    def reject_mask(self, scores: dict[str, np.ndarray]) -> np.ndarray:
        t = self.thresholds
        if self.kind == "softmax_threshold":
            return scores["probs"].max(axis=1) < self.softmax_threshold
        cgd = np.all(scores["membership"] < t.tau_l, axis=1)
        re = scores["recon_error"] > t.tau_r
        if self.kind == "cgd":
            return cgd
        if self.kind == "re":
            return re
        return cgd | re

    def predict(self, model: LadderModel, images) -> np.ndarray:
        """Labels in [0, K] where K means unknown."""
        s = self.scores(model, images)
        pred = s["pred"].astype(np.int64).copy()
        pred[self.reject_mask(s)] = self.num_classes
        return pred

    def decide(self, model: LadderModel, x) -> Decision:
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        s = self.scores(model, x)
        unknown = bool(self.reject_mask(s)[0])
        return Decision(
            verdict="unknown" if unknown else "known",
            predicted_label=None if unknown else int(s["pred"][0]),
            max_membership=float(s["max_membership"][0]),
            recon_error=float(s["recon_error"][0]),
        )


def decide_from_scores(
    memberships: Sequence[float],
    recon_error: float,
    predicted_label: int,
    thresholds: DetectorThresholds,
) -> Decision:
    """The combined rejection rule on precomputed scores.

    Unknown when every class membership is below ``tau_l`` or the
    reconstruction error is strictly above ``tau_r``.
    """
    memberships = np.asarray(memberships, dtype=np.float64)
    unknown = bool(np.all(memberships < thresholds.tau_l) or recon_error > thresholds.tau_r)
    return Decision(
        verdict="unknown" if unknown else "known",
        predicted_label=None if unknown else int(predicted_label),
        max_membership=float(memberships.max()) if memberships.size else 0.0,
        recon_error=float(recon_error),
    )


def decide(x, model: LadderModel, gaussians: Sequence[ClassGaussian], thresholds: DetectorThresholds) -> Decision:
    """Classify one sample as a known class or reject it as unknown."""
    return OpenSetDetector(list(gaussians), thresholds, kind="cgd_and_re").decide(model, x)
