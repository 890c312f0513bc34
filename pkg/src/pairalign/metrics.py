"""Cross-modal alignment metrics and 2-D projections over frozen embeddings."""

from __future__ import annotations

import numpy as np
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score
from sklearn.model_selection import StratifiedKFold

from .data import CorpusIndex, MODALITIES
from .embed import EmbeddingRecord
from .errors import InputError


def _modality_arrays(records: list[EmbeddingRecord]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([r.vector for r in records]).astype(np.float64)
    y = np.array([MODALITIES.index(r.modality) for r in records])
    return x, y


def domain_probe_accuracy(x: np.ndarray, y: np.ndarray, seed: int = 0,
                          n_folds: int = 5, groups: list | None = None) -> float:
    """Mean accuracy of a 5-fold logistic probe predicting the label y.

    When `groups` is given (one id per row), folds are split by group so that
    the two modalities of a registered pair never straddle the train/test
    boundary — with row-wise folds the probe can memorize a training pair's
    idiosyncrasies and then systematically mislabel its held-out partner,
    biasing merged embeddings *below* chance."""
    if len(np.unique(y)) < 2:
        raise InputError("probe needs at least two classes")
    splits = []
    if groups is None:
        folds = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
        splits = list(folds.split(x, y))
    else:
        if len(groups) != len(x):
            raise InputError("groups must align with data rows")
        uniq = sorted(set(groups))
        order = np.random.default_rng(seed).permutation(len(uniq))
        row_groups = np.array([uniq.index(g) for g in groups])
        for fold in np.array_split(order, n_folds):
            test_mask = np.isin(row_groups, fold)
            splits.append((np.where(~test_mask)[0], np.where(test_mask)[0]))
    accs = []
    for train_idx, test_idx in splits:
        clf = LogisticRegression(max_iter=1000)
        clf.fit(x[train_idx], y[train_idx])
        accs.append(clf.score(x[test_idx], y[test_idx]))
    return float(np.mean(accs))


def paired_matrices(records: list[EmbeddingRecord]) -> tuple[np.ndarray, np.ndarray, list]:
    """Aligned (P, d) matrices for the two modalities over registered pairs,
    ordered by (slide_id, patch_id)."""
    by_key: dict[tuple, dict[str, np.ndarray]] = {}
    for rec in records:
        by_key.setdefault(rec.key, {})[rec.modality] = rec.vector
    keys = sorted(k for k, v in by_key.items() if set(v) == set(MODALITIES))
    if not keys:
        raise InputError("no registered pairs present in the records")
    he = np.stack([by_key[k]["he"] for k in keys]).astype(np.float64)
    sim = np.stack([by_key[k]["sim"] for k in keys]).astype(np.float64)
    return he, sim, keys


def _recall_one_direction(queries: np.ndarray, candidates: np.ndarray, k: int) -> float:
    qn = queries / np.linalg.norm(queries, axis=1, keepdims=True).clip(1e-12)
    cn = candidates / np.linalg.norm(candidates, axis=1, keepdims=True).clip(1e-12)
    sims = qn @ cn.T
    # stable sort on -similarity: equal similarities rank by candidate id order
    order = np.argsort(-sims, axis=1, kind="stable")
    ranks = np.argmax(order == np.arange(len(queries))[:, None], axis=1)
    return float((ranks < k).mean())


def recall_at_k(he: np.ndarray, sim: np.ndarray, k: int) -> float:
    """Symmetric cross-modal retrieval: the he->sim and sim->he recalls of the
    true partner under cosine similarity, averaged."""
    if he.shape != sim.shape:
        raise InputError("paired matrices must share a shape")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    return 0.5 * (_recall_one_direction(he, sim, k) + _recall_one_direction(sim, he, k))


def alignment_metrics(records: list[EmbeddingRecord], seed: int = 0) -> dict:
    """domain_probe_acc, recall_at_1/5, and the modality silhouette (lower
    silhouette = more merged modality clouds)."""
    x, y = _modality_arrays(records)
    he, sim, _ = paired_matrices(records)
    return {
        "domain_probe_acc": domain_probe_accuracy(x, y, seed,
                                                  groups=[r.key for r in records]),
        "recall_at_1": recall_at_k(he, sim, 1),
        "recall_at_5": recall_at_k(he, sim, 5),
        "silhouette_by_modality": float(silhouette_score(x, y)),
        "n_pairs": he.shape[0],
    }


def raw_pixel_probe_accuracy(index: CorpusIndex, seed: int = 0) -> float:
    """Modality probe on per-channel pixel means — the floor any encoder
    inherits from the raw intensity statistics."""
    feats, labels, groups = [], [], []
    for rec in index.records:
        for modality in MODALITIES:
            img = index.image(rec, modality)
            feats.append(img.mean(dim=(1, 2)).numpy())
            labels.append(MODALITIES.index(modality))
            groups.append(rec.key)
    return domain_probe_accuracy(np.stack(feats), np.array(labels), seed,
                                 groups=groups)


def project_2d(vectors: np.ndarray, method: str = "pca", seed: int = 0) -> np.ndarray:
    """Deterministic 2-D projection for plotting."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise InputError("need at least 3 records to project")
    if method == "pca":
        return PCA(n_components=2, svd_solver="full").fit_transform(x)
    if method == "tsne":
        perplexity = min(30.0, (x.shape[0] - 1) / 3.0)
        tsne = TSNE(n_components=2, random_state=seed, init="pca",
                    perplexity=perplexity, learning_rate="auto")
        return tsne.fit_transform(x)
    raise InputError(f"unknown projection method {method!r}")


def pca_top2_residual(vectors: np.ndarray) -> tuple[float, float]:
    """(reconstruction error of the top-2 PCA, total variance minus top-2
    eigenvalues) — the two sides of the eigen-decomposition identity."""
    x = np.asarray(vectors, dtype=np.float64)
    centered = x - x.mean(axis=0)
    pca = PCA(n_components=2, svd_solver="full").fit(x)
    coords = pca.transform(x)
    recon = pca.inverse_transform(coords)
    err = float(((x - recon) ** 2).sum() / x.shape[0])
    cov = centered.T @ centered / x.shape[0]
    eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
    residual = float(eigvals[2:].sum())
    return err, residual
