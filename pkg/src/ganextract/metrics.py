"""Fréchet distance, accuracy/fidelity reports and k-means/JS dissection."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .gan import ConfigError, GanModel, generate
from .nnet import NumericError
from .worlds import MixtureSpec, UndefinedInputError, as_points, high_quality_fraction
from .worlds import sample as sample_world

PSD_TOL = 1e-10


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (len(mean), len(mean)):
            raise ValueError(f"covariance {cov.shape} does not match mean of length {len(mean)}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise NumericError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def moments(batch) -> GaussianMoments:
    """Sample mean and unbiased covariance."""
    pts = as_points(batch)
    if len(pts) < 2:
        raise UndefinedInputError("moments need at least two samples")
    # shift by one sample first: exact for constant batches, better conditioned otherwise
    origin = pts[0]
    centered = pts - origin
    shift = centered.mean(axis=0)
    dev = centered - shift
    cov = dev.T @ dev / (len(pts) - 1)
    return GaussianMoments(origin + shift, 0.5 * (cov + cov.T))


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    scale = max(1.0, np.abs(vals).max(initial=0.0))
    if vals.min(initial=0.0) < -PSD_TOL * scale:
        raise NumericError(f"matrix is not positive semi-definite (eigenvalue {vals.min():.3g})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, vals


def frechet_distance(a: GaussianMoments, b: GaussianMoments) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the square root is taken from the symmetric matrix
    ``S_a^{1/2} S_b S_a^{1/2}``, which shares its spectrum with ``S_a S_b``.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("moments have different dimensions")
    root_a, _ = _psd_sqrt(a.cov)
    _psd_sqrt(b.cov)
    inner = root_a @ b.cov @ root_a
    _, vals = _psd_sqrt(inner)
    diff = a.mean - b.mean
    dist = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(vals).sum()
    return float(max(dist, 0.0))


def frechet_between(x, y) -> float:
    return frechet_distance(moments(x), moments(y))


@dataclass(frozen=True)
class ClassDistribution:
    centroids: np.ndarray
    proportions: np.ndarray

    def __post_init__(self):
        centroids = np.atleast_2d(np.asarray(self.centroids, dtype=float))
        props = np.asarray(self.proportions, dtype=float)
        if len(centroids) != len(props):
            raise ValueError("one proportion per centroid is required")
        if abs(props.sum() - 1.0) > 1e-12:
            raise ValueError("proportions must sum to 1")
        object.__setattr__(self, "centroids", centroids)
        object.__setattr__(self, "proportions", props)

    def to_dict(self) -> dict:
        return {"centroids": self.centroids.tolist(), "proportions": self.proportions.tolist()}


def _sq_dists(points, centroids):
    return (
        (points ** 2).sum(axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids ** 2).sum(axis=1)[None, :]
    )


def _plusplus_init(points, k, rng):
    centers = [points[rng.integers(len(points))]]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(len(points))
        else:
            idx = rng.choice(len(points), p=closest / total)
        centers.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def lloyd(points, centroids, max_iter=300):
    """Lloyd iterations until the assignment stops changing.

    Returns ``(centroids, labels, objective trace)``.
    """
    k = len(centroids)
    labels = None
    trace = []
    for _ in range(max_iter):
        d = _sq_dists(points, centroids)
        new_labels = d.argmin(axis=1)
        trace.append(float(np.maximum(d[np.arange(len(points)), new_labels], 0).sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        empty = counts == 0
        centroids = np.where(empty[:, None], centroids, sums / np.maximum(counts, 1)[:, None])
        if empty.any():
            # re-seed empty clusters at the worst-fit points
            worst = np.argsort(-d[np.arange(len(points)), labels])[: empty.sum()]
            centroids[empty] = points[worst]
    return centroids, labels, trace


def kmeans(points, k: int, seed=0, restarts: int = 10, max_iter: int = 300) -> ClassDistribution:
    """Best-of-``restarts`` k-means with k-means++ seeding."""
    pts = as_points(points)
    if k < 1 or k > len(pts):
        raise ConfigError(f"k={k} is invalid for {len(pts)} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centroids, labels, trace = lloyd(pts, _plusplus_init(pts, k, rng), max_iter)
        if best is None or trace[-1] < best[0]:
            best = (trace[-1], centroids, labels)
    _, centroids, labels = best
    props = np.bincount(labels, minlength=k) / len(pts)
    return ClassDistribution(centroids, props)


def class_proportions(batch, reference: ClassDistribution) -> np.ndarray:
    pts = as_points(batch)
    if len(reference.centroids) == 0:
        raise UndefinedInputError("reference clustering is empty")
    if len(pts) == 0:
        raise UndefinedInputError("cannot assign an empty batch")
    labels = _sq_dists(pts, reference.centroids).argmin(axis=1)
    return np.bincount(labels, minlength=len(reference.centroids)) / len(pts)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise UndefinedInputError("distributions have different lengths")
    for v in (p, q):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise UndefinedInputError("inputs must be probability vectors")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return np.sum(a[nz] * np.log(a[nz] / m[nz]))

    return float(min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), np.log(2)))


REPORT_FIELDS = ("accuracy", "fidelity", "js_accuracy", "js_fidelity", "hq_fraction", "queries")


@dataclass
class AttackReport:
    accuracy: float
    fidelity: float
    js_accuracy: float = float("nan")
    js_fidelity: float = float("nan")
    hq_fraction: float = float("nan")
    queries: int = 0

    def to_json(self) -> str:
        return json.dumps({f: getattr(self, f) for f in REPORT_FIELDS})

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([getattr(self, f) for f in REPORT_FIELDS])
        return buf.getvalue()

    def as_dict(self) -> dict:
        return asdict(self)


class Judge:
    """Experimenter-side scorer holding the target, the world and a fixed real reference sample.

    The adversary never sees this object; pipelines receive it only to
    report results.
    """

    def __init__(self, target: GanModel, world: MixtureSpec, n: int = 50_000, seed=0, k: int | None = 30):
        if n < 2:
            raise UndefinedInputError("evaluation needs at least two samples")
        self.target, self.world, self.n, self.seed = target, world, n, seed
        self.real = sample_world(world, n, seed=[seed, 1]).points
        self.target_samples = generate(target, n, seed=[seed, 2]).points
        self.real_moments = moments(self.real)
        self.target_moments = moments(self.target_samples)
        self.reference = kmeans(self.real, k, seed=seed) if k else None

    def accuracy_and_fidelity(self, attack: GanModel, eval_seed=3):
        x = generate(attack, self.n, seed=[self.seed, eval_seed]).points
        m = moments(x)
        return frechet_distance(m, self.target_moments), frechet_distance(m, self.real_moments), x

    def accuracy(self, attack: GanModel) -> float:
        return self.accuracy_and_fidelity(attack)[0]

    def report(self, attack: GanModel, queries: int = 0) -> AttackReport:
        acc, fid, x = self.accuracy_and_fidelity(attack)
        js_acc = js_fid = float("nan")
        if self.reference is not None:
            p_attack = class_proportions(x, self.reference)
            js_acc = js_divergence(p_attack, class_proportions(self.target_samples, self.reference))
            js_fid = js_divergence(p_attack, class_proportions(self.real, self.reference))
        return AttackReport(acc, fid, js_acc, js_fid, high_quality_fraction(x, self.world), int(queries))


def accuracy_and_fidelity(attack: GanModel, target: GanModel, world: MixtureSpec, n: int = 50_000,
                          seed=0) -> AttackReport:
    return Judge(target, world, n, seed, k=None).report(attack)

