"""Refined spectral clustering with cosine K-means.

Pipeline: cosine affinity, affinity refinement (diagonal replacement,
row thresholding, symmetrisation, diffusion, normalisation), eigengap
cluster-count selection in a fixed range, then cosine K-means on the
rows of the leading eigenvectors.  Output labels are canonicalised so
they are directly comparable with the neural clusterer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nclust.core import CanonicalLabelSequence, EmbeddingSequence, canonicalize


@dataclass(frozen=True)
class RefineConfig:
    """Affinity refinement knobs.

    ``row_keep_fraction`` is the fraction of entries kept (largest
    first) in each row before symmetrisation; ``diffusion`` toggles the
    A @ A.T sharpening step; ``use_laplacian`` switches the eigengap to
    the unnormalised Laplacian's smallest eigenvalues.
    """

    row_keep_fraction: float = 0.4
    diffusion: bool = True
    use_laplacian: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.row_keep_fraction <= 1.0:
            raise ValueError("row_keep_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class BaselineConfig:
    refine: RefineConfig = RefineConfig()
    k_min: int = 2
    k_max: int = 4
    restarts: int = 10
    max_iterations: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("need 1 <= k_min <= k_max")


def cosine_affinity(x: EmbeddingSequence) -> np.ndarray:
    """Pairwise (1 + cos) / 2 affinities in [0, 1] for unit-norm rows."""
    data = x.data
    if x.scaled:
        norms = np.linalg.norm(data, axis=1, keepdims=True)
        data = data / norms
    return (1.0 + data @ data.T) / 2.0


def refine(affinity: np.ndarray, config: RefineConfig = RefineConfig()) -> np.ndarray:
    """Sharpen an affinity matrix before eigen-analysis.

    In order: replace the diagonal by each row's maximum (a no-op for
    cosine affinities, whose diagonal is already maximal), keep only the
    top fraction of each row, symmetrise by elementwise max, optionally
    diffuse (A @ A.T), and normalise rows by their maxima (applied
    symmetrically so the result stays symmetric).
    """
    a = np.asarray(affinity, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("affinity must be square")
    if np.max(np.abs(a - a.T)) > 1e-10:
        raise ValueError("affinity must be symmetric")
    n = a.shape[0]
    p = config.row_keep_fraction

    a = a.copy()
    np.fill_diagonal(a, a.max(axis=1))

    keep = max(1, int(np.ceil(p * n)))
    if keep < n:
        # Zero everything below each row's keep-th largest entry.
        order = np.argsort(a, axis=1)
        mask = np.zeros_like(a, dtype=bool)
        np.put_along_axis(mask, order[:, n - keep:], True, axis=1)
        a = np.where(mask, a, 0.0)

    a = np.maximum(a, a.T)
    if config.diffusion:
        a = a @ a.T

    row_max = a.max(axis=1)
    row_max[row_max <= 0] = 1.0
    a = a / np.sqrt(np.outer(row_max, row_max))
    return (a + a.T) / 2.0


def eigengap_details(
    affinity: np.ndarray, k_min: int = 2, k_max: int = 4, use_laplacian: bool = False
) -> tuple[int, bool]:
    """Cluster count by largest eigenvalue gap, plus a floor flag.

    Eigenvalues of the affinity are sorted descending (for the Laplacian
    variant, ascending) and the count is the k in [k_min, k_max]
    maximising the drop between the k-th and (k+1)-th values; ties go to
    the smallest k.  The flag is True when no k in range showed a real
    drop (all gaps numerically zero, as for a single cluster), so the
    answer is the floor k_min by tie-break alone.
    """
    a = np.asarray(affinity, dtype=np.float64)
    n = a.shape[0]
    if n < k_min:
        raise ValueError(f"{n} samples cannot form {k_min} clusters")
    if np.max(np.abs(a - a.T)) > 1e-8:
        raise ValueError("affinity must be symmetric")

    if use_laplacian:
        lap = np.diag(a.sum(axis=1)) - a
        values = np.sort(np.linalg.eigvalsh(lap))          # ascending
        spectrum = -values                                 # gaps of small eigenvalues
    else:
        spectrum = np.sort(np.linalg.eigvalsh(a))[::-1]    # descending

    # Gaps below a scale-relative floor count as exactly zero, so ties
    # (including the all-zero single-cluster case) resolve to the
    # smallest k and the result is invariant to rescaling the affinity.
    floor = 1e-8 * float(np.max(np.abs(spectrum)))

    def gap(k: int) -> float:
        nxt = spectrum[k] if k < n else 0.0
        drop = spectrum[k - 1] - nxt
        return drop if drop > floor else 0.0

    hi = min(k_max, n)
    best_k, best_gap = k_min, gap(k_min)
    for k in range(k_min + 1, hi + 1):
        if gap(k) > best_gap:
            best_gap, best_k = gap(k), k
    return best_k, best_gap == 0.0


def eigengap_count(
    affinity: np.ndarray, k_min: int = 2, k_max: int = 4, use_laplacian: bool = False
) -> int:
    """Cluster count by the largest eigenvalue gap in [k_min, k_max]."""
    count, _ = eigengap_details(affinity, k_min, k_max, use_laplacian)
    return count


def _cosine_to_centroids(rows: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return (rows / norms) @ centroids.T


def kmeans_cosine(
    rows: np.ndarray,
    k: int,
    rng: np.random.Generator,
    restarts: int = 10,
    max_iterations: int = 100,
    trace: list | None = None,
) -> np.ndarray:
    """K-means with cosine similarity as the distance measure.

    Centroids are renormalised to the unit sphere after every update;
    a centroid left with no members is re-seeded to the point that is
    currently worst served.  The best of ``restarts`` runs by total
    within-cluster cosine similarity wins (ties to the earliest run).

    When ``trace`` is a list, one cost list per restart is appended,
    holding the negative total cosine similarity after each iteration
    (non-increasing whenever no re-seed fires).
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("rows must be a non-empty matrix")
    if not 1 <= k <= rows.shape[0]:
        raise ValueError(f"k={k} invalid for {rows.shape[0]} rows")
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms <= 0):
        raise ValueError("rows must be non-zero")
    unit = rows / norms[:, None]

    best_labels: np.ndarray | None = None
    best_objective = -np.inf
    for _ in range(max(1, restarts)):
        seeds = rng.choice(rows.shape[0], size=k, replace=False)
        centroids = unit[seeds].copy()
        labels = np.zeros(rows.shape[0], dtype=int)
        costs: list[float] = []
        for _ in range(max_iterations):
            sims = unit @ centroids.T
            new_labels = np.argmax(sims, axis=1)
            for c in range(k):
                members = unit[new_labels == c]
                if len(members) == 0:
                    worst = int(np.argmin(np.max(sims, axis=1)))
                    centroids[c] = unit[worst]
                    new_labels[worst] = c
                    continue
                mean = members.mean(axis=0)
                norm = np.linalg.norm(mean)
                if norm > 0:
                    centroids[c] = mean / norm
            if trace is not None:
                assigned = (unit @ centroids.T)[np.arange(unit.shape[0]), new_labels]
                costs.append(-float(assigned.sum()))
            if np.array_equal(new_labels, labels):
                labels = new_labels
                break
            labels = new_labels
        if trace is not None:
            trace.append(costs)
        objective = float(np.sum(unit @ centroids.T * np.eye(k)[labels]))
        if objective > best_objective + 1e-12:
            best_objective = objective
            best_labels = labels.copy()
    return best_labels


def spectral_embedding(affinity: np.ndarray, k: int) -> np.ndarray:
    """Rows of the k leading eigenvectors of a symmetric affinity."""
    values, vectors = np.linalg.eigh(np.asarray(affinity, dtype=np.float64))
    order = np.argsort(values)[::-1]
    return vectors[:, order[:k]]


def spectral_cluster_details(
    x: EmbeddingSequence, config: BaselineConfig = BaselineConfig()
) -> tuple[CanonicalLabelSequence, dict]:
    """Cluster an embedding sequence; labels plus {k, floored} details."""
    if x.n < 2:
        raise ValueError("need at least two segments to cluster")
    affinity = cosine_affinity(x)
    refined = refine(affinity, config.refine)
    k, floored = eigengap_details(
        refined, config.k_min, config.k_max, config.refine.use_laplacian
    )
    embedding = spectral_embedding(refined, k)
    # Guard against numerically zero rows (possible in exactly
    # block-structured cases): nudge them off the origin deterministically.
    norms = np.linalg.norm(embedding, axis=1)
    dead = norms < 1e-12
    if np.any(dead):
        embedding = embedding.copy()
        embedding[dead] = 1.0
    rng = np.random.default_rng(config.seed)
    raw = kmeans_cosine(
        embedding, k, rng, restarts=config.restarts,
        max_iterations=config.max_iterations,
    )
    return canonicalize([str(int(c)) for c in raw]), {"k": k, "floored": floored}


def spectral_cluster(
    x: EmbeddingSequence, config: BaselineConfig = BaselineConfig()
) -> CanonicalLabelSequence:
    """Cluster an embedding sequence; returns canonical labels."""
    labels, _ = spectral_cluster_details(x, config)
    return labels
