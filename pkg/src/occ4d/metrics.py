"""Evaluation metrics: per-class IoU plus feature-space generative metrics.

The feature-space metrics (inception score, Frechet distance, kernel distance,
precision/recall) are closed-form over pluggable feature sets; no pretrained
backbone is bundled.  Feature files are flat little-endian f32 tensors behind
a (u32 N, u32 D) header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sp_stats

from .occgrid import SemanticGrid


class MetricInputError(ValueError):
    """Shapes, sizes or normalizations that make a metric undefined."""


@dataclass
class FeatureSet:
    """N x D feature vectors tagged with their provenance."""

    vectors: np.ndarray
    source: str = "real"  # "real" | "generated"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise MetricInputError(f"features must be N x D, got shape {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise MetricInputError("features contain non-finite values")
        if self.source not in ("real", "generated"):
            raise MetricInputError(f"unknown source tag {self.source!r}")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


_FEAT_HEADER = struct.Struct("<II")


def write_features(fs: FeatureSet, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(fs.n, fs.dim))
        fh.write(fs.vectors.astype(np.float32).tobytes(order="C"))


def read_features(path: str | Path, source: str = "real") -> FeatureSet:
    raw = Path(path).read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise MetricInputError(f"{path}: missing feature header")
    n, d = _FEAT_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f4", offset=_FEAT_HEADER.size)
    if body.size != n * d:
        raise MetricInputError(f"{path}: expected {n * d} values, found {body.size}")
    return FeatureSet(vectors=body.reshape(n, d).astype(np.float64), source=source)


@dataclass
class IoUReport:
    """Per-class IoU (None where the class is absent from both grids) and their mean."""

    per_class: tuple[float | None, ...]
    miou: float

    def present(self) -> list[float]:
        return [v for v in self.per_class if v is not None]


def miou(pred: SemanticGrid, truth: SemanticGrid, ignore_free: bool = False) -> IoUReport:
    """Intersection over union per class; classes absent from both sides are skipped."""
    if pred.shape != truth.shape:
        raise MetricInputError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.num_classes != truth.num_classes:
        raise MetricInputError("class count mismatch")
    return miou_arrays(pred.labels, truth.labels, pred.num_classes, ignore_free)


def miou_arrays(pred: np.ndarray, truth: np.ndarray, num_classes: int,
                ignore_free: bool = False) -> IoUReport:
    p = pred.reshape(-1).astype(np.int64)
    t = truth.reshape(-1).astype(np.int64)
    if p.shape != t.shape:
        raise MetricInputError("flattened label arrays differ in length")
    k = num_classes
    confusion = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    inter = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - inter
    per_class: list[float | None] = []
    start = 1 if ignore_free else 0
    for c in range(k):
        if c < start or union[c] == 0:
            per_class.append(None)
        else:
            per_class.append(float(inter[c] / union[c]))
    present = [v for v in per_class if v is not None]
    mean = float(np.mean(present)) if present else float("nan")
    return IoUReport(per_class=tuple(per_class), miou=mean)


def inception_score(probs: np.ndarray) -> float:
    """exp of the mean KL divergence between each row and the marginal row mean."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise MetricInputError("probs must be N x K")
    if (probs < 0).any():
        raise MetricInputError("probabilities must be non-negative")
    sums = probs.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise MetricInputError("each row must sum to 1 within 1e-6")
    marginal = probs.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logratio = np.where(probs > 0, np.log(probs / marginal), 0.0)
    kls = (probs * logratio).sum(axis=1)
    return float(np.exp(kls.mean()))


def _mean_cov(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = vectors.mean(axis=0)
    cov = np.cov(vectors, rowvar=False, ddof=1)
    return mu, np.atleast_2d(cov)


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((sigma_a sigma_b)^{1/2}) via the symmetric form b^{1/2} a b^{1/2}."""
    vals_b, vecs_b = np.linalg.eigh(sigma_b)
    vals_b = np.clip(vals_b, 0.0, None)
    root_b = (vecs_b * np.sqrt(vals_b)) @ vecs_b.T
    inner = root_b @ sigma_a @ root_b
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def fid_from_moments(mu_r: np.ndarray, sigma_r: np.ndarray,
                     mu_g: np.ndarray, sigma_g: np.ndarray) -> float:
    diff = np.asarray(mu_r, dtype=np.float64) - np.asarray(mu_g, dtype=np.float64)
    return float(
        diff @ diff
        + np.trace(sigma_r) + np.trace(sigma_g)
        - 2.0 * _trace_sqrt_product(np.asarray(sigma_r, float), np.asarray(sigma_g, float))
    )


def fid(real: FeatureSet, gen: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets."""
    if real.dim != gen.dim:
        raise MetricInputError("feature dimensions differ")
    if real.n < 2 or gen.n < 2:
        raise MetricInputError("need at least 2 samples per side for covariance")
    mu_r, sig_r = _mean_cov(real.vectors)
    mu_g, sig_g = _mean_cov(gen.vectors)
    return fid_from_moments(mu_r, sig_r, mu_g, sig_g)


def kid(real: FeatureSet, gen: FeatureSet, c: float = 1.0, d: int = 3) -> float:
    """Squared MMD with the polynomial kernel k(x, y) = (x.y / D + c)^d.

    Within-set sums skip the diagonal.  When the two sets have equal size the
    cross-sum also skips aligned pairs, which keeps the estimator unbiased and
    makes identical sets evaluate to exactly zero.
    """
    if real.dim != gen.dim:
        raise MetricInputError("feature dimensions differ")
    m, n = real.n, gen.n
    if m < 2 or n < 2:
        raise MetricInputError("need at least 2 samples per side")
    scale = 1.0 / real.dim
    x, y = real.vectors, gen.vectors

    def kernel(a, b):
        return (scale * (a @ b.T) + c) ** d

    kxx = kernel(x, x)
    kyy = kernel(y, y)
    kxy = kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        sum_xy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        sum_xy = kxy.sum() / (m * n)
    return float(sum_xx + sum_yy - 2.0 * sum_xy)


def precision_recall(real: FeatureSet, gen: FeatureSet,
                     quantile: float = 0.95) -> tuple[float, float]:
    """Fractions of each set inside the other's Mahalanobis chi-squared gate."""
    if real.dim != gen.dim:
        raise MetricInputError("feature dimensions differ")
    d = real.dim
    if real.n < d + 1 or gen.n < d + 1:
        raise MetricInputError(f"need at least D+1={d + 1} samples per side")
    if not (0.0 < quantile < 1.0):
        raise MetricInputError("quantile must be in (0, 1)")
    threshold = float(sp_stats.chi2.ppf(quantile, df=d))

    def coverage(points: np.ndarray, reference: np.ndarray) -> float:
        mu, sigma = _mean_cov(reference)
        sigma = sigma + 1e-6 * np.eye(d)
        try:
            inv = np.linalg.inv(sigma)
        except np.linalg.LinAlgError as exc:
            raise MetricInputError("degenerate covariance after regularization") from exc
        centered = points - mu
        dist2 = np.einsum("nd,de,ne->n", centered, inv, centered)
        return float((dist2 <= threshold).mean())

    precision = coverage(gen.vectors, real.vectors)
    recall = coverage(real.vectors, gen.vectors)
    return precision, recall
