"""Analytic 2-D Gaussian-mixture data distributions and sample batches."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp


class UndefinedInputError(ValueError):
    """Raised when an operation is asked about an empty or degenerate input."""


class Provenance(str, enum.Enum):
    REAL = "real"
    GENERATED = "generated"
    REFINED = "refined"


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture with a shared standard deviation."""

    means: np.ndarray
    sigma: float
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        if weights.shape != (len(means),):
            raise ValueError("one weight per component is required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def translated(self, offset) -> "MixtureSpec":
        return MixtureSpec(self.means + np.asarray(offset, dtype=float), self.sigma, self.weights)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "sigma": self.sigma, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureSpec":
        means = np.asarray(data["means"], dtype=float)
        weights = data.get("weights")
        if weights is None:
            weights = np.full(len(means), 1.0 / len(means))
        return cls(means, float(data["sigma"]), np.asarray(weights, dtype=float))


def grid25(sigma: float = 0.05, span: float = 2.0) -> MixtureSpec:
    """5x5 grid of equally weighted modes on ``{-span..span}^2``."""
    ticks = np.linspace(-span, span, 5)
    means = np.array([(a, b) for a in ticks for b in ticks])
    return MixtureSpec(means, sigma, np.full(25, 1.0 / 25))


def gaussian(mean=(0.0, 0.0), sigma: float = 1.0) -> MixtureSpec:
    return MixtureSpec(np.atleast_2d(mean), sigma, np.ones(1))


def shifted_grid25(offset=(0.5, 0.5), sigma: float = 0.05) -> MixtureSpec:
    return grid25(sigma).translated(offset)


@dataclass
class SampleBatch:
    points: np.ndarray
    provenance: Provenance = Provenance.GENERATED
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, pts.shape[1] if pts.ndim == 2 else 2)
        if pts.ndim != 2:
            raise ValueError(f"points must be a 2-D array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("sample coordinates must be finite")
        self.points = pts
        self.provenance = Provenance(self.provenance)

    def __len__(self):
        return len(self.points)

    def concat(self, other: "SampleBatch") -> "SampleBatch":
        prov = self.provenance if self.provenance == other.provenance else Provenance.GENERATED
        return SampleBatch(np.vstack([self.points, other.points]), prov)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y"])
            for x, y in self.points:
                writer.writerow([f"{x:.17g}", f"{y:.17g}"])

    @classmethod
    def load_csv(cls, path, provenance=Provenance.GENERATED) -> "SampleBatch":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(np.array(rows, dtype=float).reshape(-1, 2), provenance)

    def save_npz(self, path) -> None:
        np.savez(path, points=self.points, provenance=self.provenance.value)

    @classmethod
    def load_npz(cls, path) -> "SampleBatch":
        with np.load(path) as data:
            return cls(data["points"], Provenance(str(data["provenance"])))


def as_points(batch) -> np.ndarray:
    if isinstance(batch, SampleBatch):
        return batch.points
    return np.atleast_2d(np.asarray(batch, dtype=float))


def sample(spec: MixtureSpec, n: int, seed=None) -> SampleBatch:
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(spec.weights), size=n, p=spec.weights)
    noise = rng.standard_normal((n, spec.dim))
    return SampleBatch(spec.means[comp] + spec.sigma * noise, Provenance.REAL)


def log_density(spec: MixtureSpec, x) -> np.ndarray | float:
    """Log of the mixture density; vectorized over leading axes of ``x``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    sq = ((pts[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=-1)
    var = spec.sigma ** 2
    log_norm = -0.5 * spec.dim * np.log(2 * np.pi * var)
    with np.errstate(divide="ignore"):
        log_w = np.log(spec.weights)
    out = logsumexp(log_w[None, :] - sq / (2 * var), axis=1) + log_norm
    return float(out[0]) if single else out


def density(spec: MixtureSpec, x):
    return np.exp(log_density(spec, x))


def nearest_mean_distance(spec: MixtureSpec, points) -> np.ndarray:
    pts = as_points(points)
    sq = ((pts[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=-1)
    return np.sqrt(sq.min(axis=1))


def high_quality_fraction(batch, spec: MixtureSpec) -> float:
    """Share of points within four standard deviations of their nearest mode."""
    pts = as_points(batch)
    if len(pts) == 0:
        raise UndefinedInputError("high-quality fraction of an empty batch")
    return float(np.mean(nearest_mean_distance(spec, pts) <= 4 * spec.sigma))


def optimal_discriminator(p_r: MixtureSpec, p_g, x):
    """``p_r / (p_r + p_g)`` evaluated in log space.

    ``p_g`` is either a :class:`MixtureSpec` or a callable returning log
    densities.
    """
    log_g = log_density(p_g, x) if isinstance(p_g, MixtureSpec) else p_g(x)
    log_r = log_density(p_r, x)
    with np.errstate(over="ignore", invalid="ignore"):
        return 1.0 / (1.0 + np.exp(np.asarray(log_g) - np.asarray(log_r)))
