"""Two-class 2D toy distribution and the core-segment distance metric.

Each class lives on a short horizontal segment: class 0 near the origin,
class 1 near (4, 0). Points get jittered off the segment by isotropic
noise plus a skew term that shifts x1 by three times |noise_y|, so the
clean class manifold is strictly lower-dimensional than the data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .rng import Rng

CLASS_SHIFT = 4.0
CORE_HALF_WIDTH = 0.1
NOISE_STD = 0.1
SKEW_GAIN = 3.0


@dataclass
class LabeledSample:
    x: np.ndarray
    y: int


@dataclass
class ToyDataset:
    samples: list[LabeledSample]
    seed: int

    def xs(self) -> np.ndarray:
        return np.stack([s.x for s in self.samples])

    def ys(self) -> np.ndarray:
        return np.array([s.y for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)


def toy_point(y: int, u: float, eps: np.ndarray) -> np.ndarray:
    """Apply the generative equations to explicit latent draws."""
    eps = np.asarray(eps, dtype=np.float64)
    x1 = u + CLASS_SHIFT * y + eps[0] + SKEW_GAIN * abs(eps[1])
    return np.array([x1, eps[1]])


def sample_dataset(n: int, rng: Rng) -> ToyDataset:
    """Draw n labeled points: y ~ Bernoulli(1/2), u ~ U(-0.1, 0.1), eps ~ N(0, 0.01 I)."""
    if n < 1:
        raise InvalidInputError("sample_dataset needs n >= 1")
    y = rng.integers(0, 2, size=n)
    u = rng.uniform(-CORE_HALF_WIDTH, CORE_HALF_WIDTH, size=n)
    eps = NOISE_STD * rng.normal((n, 2))
    x1 = u + CLASS_SHIFT * y + eps[:, 0] + SKEW_GAIN * np.abs(eps[:, 1])
    samples = [LabeledSample(x=np.array([x1[i], eps[i, 1]]), y=int(y[i])) for i in range(n)]
    return ToyDataset(samples=samples, seed=rng.seed)


def distance_to_core_segment(x, y: int) -> float:
    """Euclidean distance from x to the class-y core segment on the x1 axis."""
    if y not in (0, 1):
        raise InvalidInputError(f"class id must be 0 or 1, got {y}")
    x = np.asarray(x, dtype=np.float64)
    center = CLASS_SHIFT * y
    x1 = float(np.clip(x[0], center - CORE_HALF_WIDTH, center + CORE_HALF_WIDTH))
    return float(np.hypot(x[0] - x1, x[1]))


def bayes_rule(xs) -> np.ndarray:
    """Optimal classifier for the toy distribution: class 1 iff x1 > 2."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    return (xs[:, 0] > 0.5 * CLASS_SHIFT).astype(np.int64)


def save_csv(dataset: ToyDataset, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x1", "x2", "label"])
        for s in dataset.samples:
            w.writerow([f"{s.x[0]:.6f}", f"{s.x[1]:.6f}", s.y])


def load_csv(path: str) -> ToyDataset:
    samples = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        for row in r:
            samples.append(LabeledSample(x=np.array([float(row[0]), float(row[1])]), y=int(row[2])))
    return ToyDataset(samples=samples, seed=0)
