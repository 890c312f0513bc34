"""Diagonal-covariance GMM (EM with k-means++ seeding), k-medoid prototype
selection per cluster, and Hungarian matching of per-modality cluster models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .errors import InputError, NumericGuardError

COV_FLOOR = 1e-6
WEIGHT_FLOOR = 1e-8
DEFAULT_COMPONENTS = 8


@dataclass
class GmmModel:
    weights: np.ndarray      # (N,)
    means: np.ndarray        # (N, d)
    variances: np.ndarray    # (N, d) diagonal covariances
    n_components: int
    log_likelihoods: list[float] = field(default_factory=list)
    converged: bool = False


def _log_prob(x: np.ndarray, means: np.ndarray, variances: np.ndarray,
              weights: np.ndarray) -> np.ndarray:
    """(n, N) joint log densities log w_k + log N(x | mu_k, diag sigma_k)."""
    n, d = x.shape
    delta = x[:, None, :] - means[None, :, :]
    maha = (delta ** 2 / variances[None, :, :]).sum(axis=2)
    log_det = np.log(variances).sum(axis=1)
    return np.log(weights)[None, :] - 0.5 * (maha + log_det[None, :] + d * np.log(2 * np.pi))


def _kmeanspp_init(x: np.ndarray, n_components: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    means = [x[rng.integers(n)]]
    for _ in range(n_components - 1):
        d2 = np.min(((x[:, None, :] - np.stack(means)[None, :, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0.0:
            means.append(x[rng.integers(n)])
            continue
        means.append(x[rng.choice(n, p=d2 / total)])
    return np.stack(means)


def gmm_fit(x: np.ndarray, n_components: int = DEFAULT_COMPONENTS, seed: int = 0,
            max_iter: int = 200, tol: float = 1e-7) -> GmmModel:
    """EM for a diagonal GMM. Log-likelihood is non-decreasing across
    iterations; a starved component (weight < 1e-8) is reinitialized once from
    the point worst explained by the current model, a second starvation is an
    error."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"expected (n, d) data, got shape {x.shape}")
    n, d = x.shape
    if n < n_components:
        raise InputError(f"need at least {n_components} points, got {n}")
    rng = np.random.default_rng(seed)
    means = _kmeanspp_init(x, n_components, rng)
    global_var = np.maximum(x.var(axis=0), COV_FLOOR)
    variances = np.tile(global_var, (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)
    lls: list[float] = []
    reinitialized = False
    converged = False
    for _ in range(max_iter):
        joint = _log_prob(x, means, variances, weights)
        norm = logsumexp(joint, axis=1)
        lls.append(float(norm.sum()))
        resp = np.exp(joint - norm[:, None])
        nk = resp.sum(axis=0)
        new_weights = nk / n
        starved = np.where(new_weights < WEIGHT_FLOOR)[0]
        if starved.size:
            if reinitialized:
                raise NumericGuardError(
                    f"GMM components {starved.tolist()} starved twice; data cannot "
                    f"support {n_components} components")
            reinitialized = True
            worst = int(np.argmin(norm))  # the point the model explains worst
            for k in starved:
                means[k] = x[worst]
                variances[k] = global_var
            new_weights[starved] = 1.0 / n
            weights = new_weights / new_weights.sum()
            continue  # redo the E-step with the revived component
        weights = new_weights
        means = resp.T @ x / nk[:, None]
        second = resp.T @ (x ** 2) / nk[:, None]
        variances = np.maximum(second - means ** 2, COV_FLOOR)
        if len(lls) > 1 and abs(lls[-1] - lls[-2]) < tol * (1.0 + abs(lls[-1])):
            converged = True
            break
    joint = _log_prob(x, means, variances, weights)
    lls.append(float(logsumexp(joint, axis=1).sum()))
    return GmmModel(weights, means, variances, n_components, lls, converged)


def gmm_assign(model: GmmModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hard component ids plus responsibilities (rows sum to 1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.means.shape[1]:
        raise InputError(f"data shape {x.shape} does not match model dim {model.means.shape[1]}")
    joint = _log_prob(x, model.means, model.variances, model.weights)
    resp = np.exp(joint - logsumexp(joint, axis=1)[:, None])
    return joint.argmax(axis=1), resp


def kmedoids_prototypes(model: GmmModel, x: np.ndarray, ids: list, k: int) -> list[list]:
    """Per-component prototype ids. The first medoid minimizes the summed
    Euclidean distance to the component's members; further medoids are added
    greedily, each maximizing the drop in summed distance-to-nearest-medoid
    (max coverage). Components smaller than k return all their members."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    x = np.asarray(x, dtype=np.float64)
    if len(ids) != x.shape[0]:
        raise InputError("ids must align with data rows")
    assign, _ = gmm_assign(model, x)
    prototypes: list[list] = []
    for comp in range(model.n_components):
        member_idx = np.where(assign == comp)[0]
        if member_idx.size == 0:
            prototypes.append([])
            continue
        if member_idx.size <= k:
            prototypes.append([ids[i] for i in member_idx])
            continue
        members = x[member_idx]
        dist = np.sqrt(((members[:, None, :] - members[None, :, :]) ** 2).sum(axis=2))
        chosen = [int(np.argmin(dist.sum(axis=1)))]
        nearest = dist[:, chosen[0]].copy()
        while len(chosen) < k:
            coverage = np.minimum(dist, nearest[:, None]).sum(axis=0)
            coverage[chosen] = np.inf
            nxt = int(np.argmin(coverage))
            chosen.append(nxt)
            nearest = np.minimum(nearest, dist[:, nxt])
        prototypes.append([ids[member_idx[i]] for i in chosen])
    return prototypes


@dataclass
class MatchResult:
    permutation: np.ndarray   # permutation[i] = component of model_b matched to a's i
    mean_cosine: float
    agreement: float | None   # pair agreement rate, when pair assignments given


def match_clusters(model_a: GmmModel, model_b: GmmModel,
                   pair_assign_a: np.ndarray | None = None,
                   pair_assign_b: np.ndarray | None = None) -> MatchResult:
    """Hungarian matching of cluster means by cosine similarity; optionally
    reports how often registered pairs land in matched components."""
    if model_a.n_components != model_b.n_components:
        raise InputError("models must have the same number of components")
    a = model_a.means / np.linalg.norm(model_a.means, axis=1, keepdims=True).clip(1e-12)
    b = model_b.means / np.linalg.norm(model_b.means, axis=1, keepdims=True).clip(1e-12)
    cosine = a @ b.T
    rows, cols = linear_sum_assignment(-cosine)
    permutation = np.empty(model_a.n_components, dtype=int)
    permutation[rows] = cols
    mean_cosine = float(cosine[rows, cols].mean())
    agreement = None
    if pair_assign_a is not None or pair_assign_b is not None:
        if pair_assign_a is None or pair_assign_b is None:
            raise InputError("both pair assignment arrays are required for agreement")
        pa = np.asarray(pair_assign_a)
        pb = np.asarray(pair_assign_b)
        if pa.shape != pb.shape:
            raise InputError("pair assignment arrays must align")
        agreement = float((permutation[pa] == pb).mean())
    return MatchResult(permutation, mean_cosine, agreement)
