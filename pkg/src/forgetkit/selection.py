"""Data selection: squared-gradient features with four samplers, and
embedding -> PCA -> diagonal GMM -> cluster-uniform sampling."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import numcore as nc
from .data import NoTargetsError, mask_batch
from .model import Model, mlm_forward

STRATEGIES = ("random", "low", "high", "uniform")
VAR_FLOOR = 1e-6


class GmmError(RuntimeError):
    pass


# scalar gradient feature -------------------------------------------------------

def gradient_feature(model: Model, segment, mask_seed: int, mask_rate: float = 0.15) -> float:
    """Squared L2 norm of the full MLM gradient on a single segment."""
    ids = segment.ids if hasattr(segment, "ids") else np.asarray(segment)
    if len(ids) > model.config.max_len:
        raise ValueError("segment longer than the model's max_len")
    batch = mask_batch([ids], mask_rate, mask_seed, model.config.vocab_size)
    loss, _ = mlm_forward(model, batch)
    grads = nc.backprop(loss)
    return float(sum(np.sum(g * g) for g in grads.values()))


def gradient_features(model: Model, segments: Sequence, seed: int, mask_rate: float = 0.15) -> np.ndarray:
    out = np.empty(len(segments))
    for i, seg in enumerate(segments):
        try:
            out[i] = gradient_feature(model, seg, seed + i, mask_rate)
        except NoTargetsError:
            # too short to mask reliably; counts as uninformative
            out[i] = 0.0
    return out


def feature_stats(features) -> dict:
    f = np.asarray(features, dtype=float)
    if f.size == 0:
        raise ValueError("no features")
    return {
        "count": int(f.size),
        "mean": float(f.mean()),
        "std": float(f.std()),
        "min": float(f.min()),
        "max": float(f.max()),
        "median": float(np.median(f)),
    }


def _round_robin(groups: list[np.ndarray], n: int, rng: np.random.Generator) -> np.ndarray:
    pools = [list(rng.permutation(g)) for g in groups if len(g)]
    picked: list[int] = []
    while len(picked) < n:
        for pool in pools:
            if pool and len(picked) < n:
                picked.append(int(pool.pop()))
    return np.array(picked, dtype=np.int64)


def select_by_strategy(features, n: int, strategy: str, num_bins: int = 10, seed: int = 0) -> np.ndarray:
    """Indices of ``n`` segments chosen by ``strategy``.

    ``low``/``high`` slice the stably sorted feature list from either end;
    ``uniform`` cycles over equal-width bins, drawing at random within each.
    """
    f = np.asarray(features, dtype=float)
    if n > f.size:
        raise ValueError(f"cannot select {n} of {f.size}")
    if n < 0:
        raise ValueError("n must be non-negative")
    if strategy == "low":
        return np.argsort(f, kind="stable")[:n]
    if strategy == "high":
        # largest first; ties keep the lower index
        return np.lexsort((np.arange(f.size), -f))[:n]
    rng = np.random.default_rng(seed)
    if strategy == "random":
        return rng.choice(f.size, size=n, replace=False).astype(np.int64)
    if strategy == "uniform":
        if num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        lo, hi = f.min(), f.max()
        if hi == lo:
            bins = np.zeros(f.size, dtype=int)
        else:
            bins = np.minimum(((f - lo) / (hi - lo) * num_bins).astype(int), num_bins - 1)
        groups = [np.flatnonzero(bins == b) for b in range(num_bins)]
        return _round_robin(groups, n, rng)
    raise ValueError(f"unknown strategy {strategy!r}")


def write_feature_csv(path, features) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "scalar_feature"])
        for i, v in enumerate(features):
            w.writerow([i, repr(float(v))])


def read_feature_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["scalar_feature"]) for r in rows])


def write_manifest(path, strategy: str, params: dict, seed: int, chosen, stats: dict | None) -> dict:
    manifest = {
        "strategy": strategy,
        "parameters": params,
        "seed": int(seed),
        "chosen_ids": [int(i) for i in chosen],
        "feature_stats": stats,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# PCA -------------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray          # (d, D), orthonormal rows
    explained_variance: np.ndarray  # (d,), non-increasing
    total_variance: float
    degenerate: bool = False

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance == 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance


def pca_fit(X, d: int) -> PcaModel:
    X = np.asarray(X, dtype=float)
    n, D = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    if not 1 <= d <= min(n, D):
        raise ValueError(f"d={d} outside [1, {min(n, D)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=True)
    var = np.zeros(D)
    var[:s.size] = s ** 2 / (n - 1)
    comps = vt[:d].copy()
    # deterministic sign: largest-magnitude entry positive
    flip = np.sign(comps[np.arange(d), np.abs(comps).argmax(axis=1)])
    comps *= np.where(flip == 0, 1.0, flip)[:, None]
    total = float(var.sum())
    return PcaModel(mean, comps, var[:d].copy(), total, degenerate=total == 0.0)


def pca_transform(model: PcaModel, X) -> np.ndarray:
    return (np.asarray(X, dtype=float) - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, Z) -> np.ndarray:
    return np.asarray(Z) @ model.components + model.mean


# GMM -------------------------------------------------------------------------

@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: float
    iterations: int
    history: list[float] = field(default_factory=list)
    repairs: int = 0


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _log_joint(X, weights, means, variances) -> np.ndarray:
    # log w_k + log N(x | mu_k, diag var_k), shape (n, k)
    d = X.shape[1]
    log_det = np.log(variances).sum(axis=1)
    maha = (((X[:, None, :] - means[None]) ** 2) / variances[None]).sum(axis=2)
    with np.errstate(divide="ignore"):
        lw = np.log(weights)
    return lw[None] - 0.5 * (d * np.log(2 * np.pi) + log_det[None] + maha)


def gmm_fit(X, k: int, max_iters: int = 100, tol: float = 1e-6, seed: int = 0,
            max_repairs: int = 3) -> GmmModel:
    """Diagonal-covariance EM, initialised by k-means++.

    A component whose responsibility mass vanishes is moved onto the worst-explained
    point; more than ``max_repairs`` such repairs raise :class:`GmmError`.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if k < 1 or n < k:
        raise ValueError(f"need 1 <= k <= n (k={k}, n={n})")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(X, k, rng)
    global_var = np.maximum(X.var(axis=0), VAR_FLOOR)
    # first M-step from hard nearest-centre assignment
    nearest = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    counts = np.bincount(nearest, minlength=k).astype(float)
    weights = np.maximum(counts, 1.0) / np.maximum(counts, 1.0).sum()
    means = centers.copy()
    variances = np.tile(global_var, (k, 1))
    for c in np.flatnonzero(counts):
        pts = X[nearest == c]
        means[c] = pts.mean(axis=0)
        if len(pts) > 1:
            variances[c] = np.maximum(pts.var(axis=0), VAR_FLOOR)
    history: list[float] = []
    repairs = 0
    it = 0
    for it in range(1, max_iters + 1):
        lj = _log_joint(X, weights, means, variances)
        lse = logsumexp(lj, axis=1)
        ll = float(lse.sum())
        resp = np.exp(lj - lse[:, None])
        mass = resp.sum(axis=0)
        empty = np.flatnonzero(mass < 1e-10 * n)
        if empty.size:
            repairs += 1
            if repairs > max_repairs:
                raise GmmError(f"empty mixture component after {max_repairs} repairs")
            worst = np.argsort(lse, kind="stable")
            for j, c in enumerate(empty):
                means[c] = X[worst[j]]
                variances[c] = global_var
                weights[c] = 1.0 / k
            weights /= weights.sum()
            history = []  # the monotone record restarts after a repair
            continue
        history.append(ll)
        weights = mass / n
        means = (resp.T @ X) / mass[:, None]
        sq = (resp.T @ (X * X)) / mass[:, None] - means ** 2
        variances = np.maximum(sq, VAR_FLOOR)
        if len(history) >= 2 and history[-1] - history[-2] < tol:
            break
    final = float(logsumexp(_log_joint(X, weights, means, variances), axis=1).sum())
    return GmmModel(weights, means, variances, final, it, history, repairs)


def gmm_assign(model: GmmModel, X) -> np.ndarray:
    return np.argmax(_log_joint(np.asarray(X, dtype=float), model.weights, model.means, model.variances),
                     axis=1)


def cluster_uniform_sample(labels, n: int, seed: int = 0) -> np.ndarray:
    labels = np.asarray(labels)
    if n > labels.size:
        raise ValueError(f"cannot select {n} of {labels.size}")
    rng = np.random.default_rng(seed)
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    return _round_robin(groups, n, rng)


def latent_cluster_select(embeddings, n: int, d: int = 100, k: int = 5, seed: int = 0,
                          normalize: bool = False) -> tuple[np.ndarray, dict]:
    """Embeddings -> PCA(d) -> GMM(k) -> cluster-uniform draw of ``n`` rows."""
    E = np.asarray(embeddings, dtype=float)
    if normalize:
        E = E / np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-12)
    d = min(d, E.shape[0], E.shape[1])
    pca = pca_fit(E, d)
    Z = pca_transform(pca, E)
    k = min(k, E.shape[0])
    gmm = gmm_fit(Z, k, seed=seed)
    labels = gmm_assign(gmm, Z)
    chosen = cluster_uniform_sample(labels, n, seed)
    info = {
        "pca_dim": d,
        "k": k,
        "explained_variance_ratio": float(pca.explained_variance_ratio.sum()),
        "cluster_sizes": np.bincount(labels, minlength=k).tolist(),
        "gmm_log_likelihood": gmm.log_likelihood,
        "gmm_iterations": gmm.iterations,
    }
    return chosen, info
