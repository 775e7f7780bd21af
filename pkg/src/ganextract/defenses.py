"""Perturbation defenses installed on a provider.

Input defenses replace the latent codes a client submits; output defenses
perturb the generated samples. All of them return exactly as many codes or
samples as they receive, so the query cost seen by the client is unchanged.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .worlds import SampleBatch


class DegenerateLabelsError(ValueError):
    """The scorer did not separate the latent pool into two classes."""


# -- input perturbation ----------------------------------------------------

def interpolate(z_a, z_b, k: int) -> np.ndarray:
    """``k`` points strictly between ``z_a`` and ``z_b`` at ``t = i / (k + 1)``."""
    z_a, z_b = np.asarray(z_a, dtype=float), np.asarray(z_b, dtype=float)
    t = np.arange(1, k + 1)[:, None] / (k + 1)
    return (1.0 - t) * z_a + t * z_b


def linear_interp_defense(codes, k: int = 9, seed=None) -> np.ndarray:
    """Replace ``n`` codes by ``ceil(n / k)`` rounds of ``k`` interpolants between random pairs."""
    codes = np.atleast_2d(np.asarray(codes, dtype=float))
    n = len(codes)
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < 2:
        warnings.warn("linear interpolation needs at least two codes; passing through", stacklevel=2)
        return codes.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rounds = math.ceil(n / k)
    first = rng.integers(n, size=rounds)
    # second index drawn from the n - 1 others so every pair is distinct
    second = (first + 1 + rng.integers(n - 1, size=rounds)) % n
    t = np.arange(1, k + 1) / (k + 1)
    z_a, z_b = codes[first][:, None, :], codes[second][:, None, :]
    out = (1.0 - t[None, :, None]) * z_a + t[None, :, None] * z_b
    return out.reshape(-1, codes.shape[1])[:n]


@dataclass(frozen=True)
class Hyperplane:
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(normal) - 1.0) > 1e-12:
            raise ValueError("hyperplane normal must have unit length")
        object.__setattr__(self, "normal", normal)

    def signed_distance(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) @ self.normal + self.offset


def train_linear_svm(x, y, lam: float = 1e-3, steps: int = 10_000, lr: float = 0.1):
    """Full-batch subgradient descent on ``lam/2 |w|^2 + mean(hinge)``.

    Returns ``(w, b, hinge)`` for the iterate with the lowest objective.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.zeros(x.shape[1])
    b = 0.0
    best = (np.inf, w.copy(), b, np.inf)
    for t in range(steps):
        margins = y * (x @ w + b)
        active = margins < 1.0
        hinge = float(np.mean(np.maximum(0.0, 1.0 - margins)))
        objective = 0.5 * lam * w @ w + hinge
        if objective < best[0]:
            best = (objective, w.copy(), b, hinge)
        eta = lr / (1.0 + lam * lr * t)
        grad_w = lam * w - (y[active, None] * x[active]).sum(axis=0) / len(y)
        grad_b = -y[active].sum() / len(y)
        w = w - eta * grad_w
        b = b - eta * grad_b
    return best[1], best[2], best[3]


def fit_semantic_hyperplane(generator, scorer, pool_size: int = 10_000, top_k: int = 1000, seed=0,
                            latent_dim: int = 2, lam: float = 1e-3, steps: int = 10_000) -> Hyperplane:
    """Latent-space boundary between the highest- and lowest-scoring generated samples.

    ``generator`` maps an ``(n, latent_dim)`` array of codes to samples and
    ``scorer`` maps samples to one real score each.
    """
    if pool_size < 2 * top_k or top_k < 1:
        raise ValueError("pool must hold at least 2 * top_k codes")
    rng = np.random.default_rng(seed)
    codes = rng.standard_normal((pool_size, latent_dim))
    samples = generator(codes)
    samples = samples.points if isinstance(samples, SampleBatch) else np.asarray(samples)
    scores = np.asarray(scorer(samples), dtype=float)
    if np.ptp(scores) == 0:
        raise DegenerateLabelsError("scorer is constant on the latent pool")
    order = np.argsort(scores, kind="stable")
    neg, pos = order[:top_k], order[-top_k:]
    if scores[pos].min() <= scores[neg].max():
        raise DegenerateLabelsError("top and bottom score groups overlap")
    x = np.vstack([codes[pos], codes[neg]])
    y = np.concatenate([np.ones(top_k), -np.ones(top_k)])
    w, b, _ = train_linear_svm(x, y, lam, steps)
    norm = np.linalg.norm(w)
    if norm == 0:
        raise DegenerateLabelsError("SVM collapsed to a zero normal")
    return Hyperplane(w / norm, b / norm)


def semantic_interp_defense(codes, planes, schedule=(-1.0, 1.0)) -> np.ndarray:
    """Move each code along a hyperplane normal.

    Code ``i`` is shifted by ``s * normal`` where ``(plane, s)`` is the
    ``i``-th entry of the cycle over every plane and every step of the
    schedule, so each output sits at distance ``|s|`` from its input.
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=float))
    if not planes:
        raise ValueError("at least one hyperplane is required")
    if len(schedule) == 0:
        raise ValueError("step schedule is empty")
    shifts = np.array([s * p.normal for p in planes for s in schedule])
    return codes + shifts[np.arange(len(codes)) % len(shifts)]


# -- output perturbation ---------------------------------------------------

def gaussian_noise_defense(batch, variance: float = 0.001, seed=None):
    if variance < 0:
        raise ValueError("variance must be non-negative")
    pts = batch.points if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=float)
    if variance == 0:
        out = pts.copy()
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        out = pts + rng.normal(0.0, math.sqrt(variance), size=pts.shape)
    return SampleBatch(out, batch.provenance) if isinstance(batch, SampleBatch) else out


def quantize_defense(batch, step: float):
    """Round every coordinate to the nearest multiple of ``step``, ties away from zero."""
    if not step > 0:
        raise ValueError("step must be positive")
    pts = batch.points if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=float)
    out = np.sign(pts) * np.floor(np.abs(pts) / step + 0.5) * step
    return SampleBatch(out, batch.provenance) if isinstance(batch, SampleBatch) else out


# -- policies --------------------------------------------------------------

@dataclass(frozen=True)
class DefensePolicy:
    """A defense as installed on a provider.

    ``kind`` is one of ``none``, ``linear_interp``, ``semantic_interp``,
    ``gaussian_noise`` or ``quantize``.
    """

    kind: str = "none"
    k: int = 9
    planes: tuple = field(default_factory=tuple)
    schedule: tuple = (-1.0, 1.0)
    variance: float = 0.001
    step: float = 0.05

    def __post_init__(self):
        if self.kind not in ("none", "linear_interp", "semantic_interp", "gaussian_noise", "quantize"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.k < 1 or self.variance < 0 or not self.step > 0:
            raise ValueError("invalid defense parameters")
        if self.kind == "semantic_interp" and not self.planes:
            raise ValueError("semantic interpolation needs at least one hyperplane")

    def perturb_codes(self, codes, rng):
        if self.kind == "linear_interp":
            return linear_interp_defense(codes, self.k, rng)
        if self.kind == "semantic_interp":
            return semantic_interp_defense(codes, list(self.planes), self.schedule)
        return codes

    def perturb_samples(self, batch, rng):
        if self.kind == "gaussian_noise":
            return gaussian_noise_defense(batch, self.variance, rng)
        if self.kind == "quantize":
            return quantize_defense(batch, self.step)
        return batch

    def to_dict(self) -> dict:
        data = {"kind": self.kind}
        if self.kind == "linear_interp":
            data["k"] = self.k
        elif self.kind == "semantic_interp":
            data["planes"] = [{"normal": p.normal.tolist(), "offset": p.offset} for p in self.planes]
            data["schedule"] = list(self.schedule)
        elif self.kind == "gaussian_noise":
            data["variance"] = self.variance
        elif self.kind == "quantize":
            data["step"] = self.step
        return {"defense": data}

    @classmethod
    def from_dict(cls, data: dict) -> "DefensePolicy":
        data = dict(data.get("defense", data))
        kind = data.pop("kind", "none")
        if "planes" in data:
            data["planes"] = tuple(Hyperplane(np.asarray(p["normal"]), float(p["offset"]))
                                   for p in data["planes"])
        if "schedule" in data:
            data["schedule"] = tuple(data["schedule"])
        return cls(kind=kind, **data)


SCORERS = {
    "x": lambda s: s[:, 0],
    "y": lambda s: s[:, 1],
    "radius": lambda s: np.linalg.norm(s, axis=1),
}
