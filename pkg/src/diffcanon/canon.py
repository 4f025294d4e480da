"""Canonical latent extraction.

Invert a sample to the projection timestep, take the Jacobian of the
denoiser's hidden features with respect to the latent coordinates, and
project the latent off the top right singular vectors (the directions
the feature map is most sensitive to, which carry appearance rather
than class). Decoding the projected latent yields a Canonical Sample;
re-inverting that to a shallow timestep and reading the hidden layer
yields its Canonical Feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffusion import (CondDenoiser, LatentState, NoiseSchedule, decode_batch,
                        invert_batch, two_stage_batch)
from .errors import DegenerateInputError, InvalidInputError, NumericalError
from .numerics import elbow_index, kmeans, nmi, svd
from .rng import Rng


@dataclass
class ExtraneousBasis:
    v: np.ndarray            # (input_dim, n) orthonormal columns, descending sigma
    sigma: np.ndarray        # (n,)
    n: int


@dataclass
class CanonicalBundle:
    seed_sample_id: int
    t_e: int
    k: int
    latent: np.ndarray
    canonical_sample: np.ndarray
    canonical_feature: np.ndarray
    cond: int


@dataclass
class TeSearchReport:
    grid: list[int]
    accuracies: list[float]
    chosen: int
    tol: float


@dataclass
class FeatureQualityReport:
    nmi: float
    within_class_var: dict[int, float]


def jacobian(model, state: LatentState, layer: int = 2) -> np.ndarray:
    """Exact Jacobian of the hidden features wrt the latent coordinates.

    Assembled column by column from directional derivatives along the
    input basis vectors; (feature_dim x input_dim).
    """
    if state.t < 1:
        raise InvalidInputError("jacobian requires t >= 1")
    d = len(np.asarray(state.x))
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        cols.append(model.feature_jvp(state.x, state.t, state.cond, e, layer))
    j = np.stack(cols, axis=1)
    if not np.all(np.isfinite(j)):
        raise NumericalError("non-finite activations in jacobian")
    return j


def extraneous_directions(j: np.ndarray, n: int) -> ExtraneousBasis:
    """Top-n right singular vectors of the feature Jacobian."""
    j = np.asarray(j, dtype=np.float64)
    if n < 1 or n > min(j.shape):
        raise InvalidInputError(f"n must be in [1, {min(j.shape)}], got {n}")
    res = svd(j)
    return ExtraneousBasis(v=res.v[:, :n], sigma=res.sigma[:n], n=n)


def evr_sequence(basis: ExtraneousBasis) -> np.ndarray:
    """Cumulative squared-singular-value ratios S_1..S_n."""
    s2 = basis.sigma ** 2
    total = s2.sum()
    if total <= 0.0:
        raise DegenerateInputError("all singular values are zero")
    return np.cumsum(s2) / total


def select_k(s) -> int:
    """Number of directions to remove: elbow of the EVR sequence plus one."""
    s = np.asarray(s, dtype=np.float64)
    if len(s) < 2:
        return 1
    return elbow_index(s) + 1


def project_out(x_te, basis: ExtraneousBasis, k: int) -> np.ndarray:
    """Remove the span of the first k basis columns from x_te."""
    if k > basis.n:
        raise InvalidInputError(f"k={k} exceeds basis size n={basis.n}")
    x = np.asarray(x_te, dtype=np.float64)
    if k == 0:
        return x.copy()
    vk = basis.v[:, :k]
    return x - vk @ (vk.T @ x)


def canonicalize_batch(xs: np.ndarray, ys: np.ndarray, model: CondDenoiser,
                       sched: NoiseSchedule, t_e: int, n: int = 2,
                       cfg_scale: float = 1.0, t_r: int | None = None,
                       layer: int = 2) -> list[CanonicalBundle]:
    """Run the full extraction pipeline over a batch of labeled samples.

    Inversion and decoding are batched; the Jacobian/projection step is
    per sample. cfg_scale = 1 decodes without guidance.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.int64))
    if t_r is None:
        t_r = max(1, round(0.1 * sched.t_max))
    x_te = invert_batch(xs, t_e, ys, model, sched)
    latents = np.empty_like(x_te)
    ks = []
    for i in range(len(xs)):
        state = LatentState(x=x_te[i], t=t_e, cond=int(ys[i]))
        basis = extraneous_directions(jacobian(model, state, layer), n)
        k = select_k(evr_sequence(basis)) if n >= 2 else 1
        ks.append(k)
        latents[i] = project_out(x_te[i], basis, k)
    samples = decode_batch(latents, t_e, ys, model, sched, cfg_scale)
    feat_latents = invert_batch(samples, t_r, ys, model, sched)
    feats = model.hidden(feat_latents, t_r, ys, layer)
    return [CanonicalBundle(seed_sample_id=i, t_e=t_e, k=ks[i], latent=latents[i],
                            canonical_sample=samples[i], canonical_feature=feats[i],
                            cond=int(ys[i]))
            for i in range(len(xs))]


def canonicalize(x, y: int, model: CondDenoiser, sched: NoiseSchedule, t_e: int,
                 n: int = 2, cfg_scale: float = 1.0, t_r: int | None = None,
                 layer: int = 2) -> CanonicalBundle:
    return canonicalize_batch(np.atleast_2d(x), [y], model, sched, t_e, n,
                              cfg_scale, t_r, layer)[0]


def plain_roundtrip(xs: np.ndarray, ys: np.ndarray, model: CondDenoiser,
                    sched: NoiseSchedule, t_e: int, cfg_scale: float = 1.0) -> np.ndarray:
    """Invert to t_e and decode back with no projection (baseline)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.int64))
    x_te = invert_batch(xs, t_e, ys, model, sched)
    return decode_batch(x_te, t_e, ys, model, sched, cfg_scale)


def saturation_choice(grid: list[int], accuracies: list[float], tol: float) -> int:
    """Largest grid value whose accuracy is within tol of the curve maximum."""
    if len(grid) == 0 or len(grid) != len(accuracies):
        raise InvalidInputError("grid and accuracies must be equal-length and non-empty")
    best = max(accuracies)
    return max(t for t, a in zip(grid, accuracies) if a >= best - tol)


def find_te(model: CondDenoiser, sched: NoiseSchedule, classifier_rule: Callable,
            grid: list[int], m: int, rng: Rng, tol: float = 0.02) -> TeSearchReport:
    """Pick the projection timestep from the two-stage accuracy curve.

    For each candidate, m samples per class are drawn with the
    condition switched on at that timestep and scored by the classifier
    rule; the chosen value is the largest candidate whose accuracy is
    within tol of the curve maximum.
    """
    if len(grid) == 0:
        raise InvalidInputError("empty candidate grid")
    if sorted(grid) != list(grid):
        raise InvalidInputError("candidate grid must be sorted ascending")
    if m < 1:
        raise InvalidInputError("m must be >= 1")
    accuracies = []
    for t_e in grid:
        correct = 0
        for c in range(model.n_classes):
            xs = two_stage_batch(m, t_e, c, model, sched, rng.split(f"te-{t_e}-c{c}"))
            correct += int(np.sum(np.asarray(classifier_rule(xs)) == c))
        accuracies.append(correct / (m * model.n_classes))
    chosen = saturation_choice(grid, accuracies, tol)
    return TeSearchReport(grid=list(grid), accuracies=accuracies, chosen=chosen, tol=tol)


def save_bundles(bundles: list[CanonicalBundle], path: str) -> None:
    """Write bundles as JSON lines, one record per bundle, full precision."""
    import json
    with open(path, "w") as f:
        for b in bundles:
            record = {
                "seed_sample_id": b.seed_sample_id,
                "t_e": b.t_e,
                "k": b.k,
                "cond": b.cond,
                "latent": b.latent.tolist(),
                "canonical_sample": b.canonical_sample.tolist(),
                "canonical_feature": b.canonical_feature.tolist(),
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_bundles(path: str) -> list[CanonicalBundle]:
    import json
    bundles = []
    with open(path) as f:
        for line in f:
            r = json.loads(line)
            bundles.append(CanonicalBundle(
                seed_sample_id=r["seed_sample_id"], t_e=r["t_e"], k=r["k"],
                latent=np.asarray(r["latent"]),
                canonical_sample=np.asarray(r["canonical_sample"]),
                canonical_feature=np.asarray(r["canonical_feature"]),
                cond=r["cond"]))
    return bundles


def feature_quality(features: np.ndarray, labels, k_clusters: int,
                    rng: Rng) -> FeatureQualityReport:
    """Cluster the features and score agreement with the labels.

    Reports the normalized mutual information between k-means
    assignments and labels, plus per-class feature variance (mean
    squared distance to the class centroid).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if k_clusters != len(classes):
        raise InvalidInputError(
            f"k_clusters must equal the number of distinct labels ({len(classes)})")
    assignments, _ = kmeans(features, k_clusters, rng)
    score = nmi(assignments, labels)
    within = {}
    for c in classes:
        rows = features[labels == c]
        centroid = rows.mean(axis=0)
        within[int(c)] = float(np.mean(np.sum((rows - centroid) ** 2, axis=1)))
    return FeatureQualityReport(nmi=score, within_class_var=within)
