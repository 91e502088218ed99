"""Diagnostics for learned features and gates.

Covers lowest-variance subspaces, intra/inter similarity histograms and
their overlap, singular spectra with effective rank, a cosine KNN probe,
gate statistics, k-means pseudo-labels and input-gradient saliency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError
from .model import FilterParams, ModelParams, class_gates, encode, gates_for_pair, project

DEFAULT_BINS = 100


def _unit_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised copy of ``m`` and a mask of rows with nonzero norm."""
    norms = np.linalg.norm(m, axis=1)
    ok = norms > 0
    u = np.zeros_like(m)
    u[ok] = m[ok] / norms[ok, None]
    return u, ok


# -- subspace discovery ------------------------------------------------------


def lowest_variance_subspace(features, d: int) -> list[int]:
    """The ``d`` coordinates with smallest variance over the given rows (ties: lower index)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ContractError("need a 2-D matrix with at least 2 rows")
    if not 0 < d <= f.shape[1]:
        raise ContractError(f"d={d} must lie in [1, {f.shape[1]}]")
    var = f.var(axis=0)
    return sorted(int(j) for j in np.argsort(var, kind="stable")[:d])


def pair_rows(labels, pair: tuple[int, int]) -> np.ndarray:
    labels = np.asarray(labels)
    return np.flatnonzero((labels == pair[0]) | (labels == pair[1]))


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    total: int
    mean: float = 0.0
    excluded: int = 0

    def normalized(self) -> np.ndarray:
        return self.counts / self.total if self.total else np.zeros_like(self.counts, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "total": int(self.total),
            "mean": float(self.mean),
            "excluded": int(self.excluded),
        }


def histogram(values: np.ndarray, bins: int = DEFAULT_BINS, excluded: int = 0) -> Histogram:
    edges = np.linspace(-1.0, 1.0, bins + 1)
    v = np.clip(np.asarray(values, dtype=np.float64).reshape(-1), -1.0, 1.0)
    counts, _ = np.histogram(v, bins=edges)
    return Histogram(edges, counts.astype(np.int64), int(v.size), float(v.mean()) if v.size else 0.0, excluded)


def similarity_distributions(
    features, labels, pair: tuple[int, int], subspace: Sequence[int] | None = None, bins: int = DEFAULT_BINS
) -> tuple[Histogram, Histogram]:
    """Cosine similarities restricted to ``subspace``.

    ``intra``: every unordered pair of distinct samples pooled from both
    classes. ``inter``: each pooled sample against every other-class sample.
    Rows whose restricted norm is zero are dropped and counted in ``excluded``.
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if subspace is not None:
        subspace = list(subspace)
        if not subspace:
            raise ContractError("subspace must be nonempty")
        f = f[:, subspace]
    in_pool = (labels == pair[0]) | (labels == pair[1])
    if not (labels == pair[0]).any() or not (labels == pair[1]).any():
        raise ContractError(f"both classes of {pair} must be populated")
    u, ok = _unit_rows(f)
    excluded = int((~ok).sum())
    pool = u[in_pool & ok]
    other = u[~in_pool & ok]
    s = pool @ pool.T
    intra = s[np.triu_indices(pool.shape[0], k=1)]
    inter = (pool @ other.T).reshape(-1)
    return histogram(intra, bins, excluded), histogram(inter, bins, excluded)


def distribution_overlap(h1: Histogram, h2: Histogram) -> float:
    """Histogram intersection of the two normalised distributions."""
    if h1.bin_edges.shape != h2.bin_edges.shape or not np.array_equal(h1.bin_edges, h2.bin_edges):
        raise ContractError("histograms must share bin edges")
    return float(np.minimum(h1.normalized(), h2.normalized()).sum())


def similarity_gap(features, labels, pair: tuple[int, int], subspace=None) -> float:
    """Mean intra similarity minus mean inter similarity for ``pair``."""
    intra, inter = similarity_distributions(features, labels, pair, subspace)
    return intra.mean - inter.mean


def class_similarity_matrix(features, labels, num_classes: int | None = None) -> np.ndarray:
    """Average cosine similarity between samples of each class pair."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    K = num_classes or int(labels.max()) + 1
    u, _ = _unit_rows(f)
    sums = np.zeros((K, f.shape[1]))
    np.add.at(sums, labels, u)
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    # mean over sample pairs = dot of class-mean unit vectors (self-pairs included on the diagonal)
    means = sums / np.maximum(counts, 1.0)[:, None]
    return means @ means.T


def block_contrast(similarity: np.ndarray, groups: Sequence[int]) -> tuple[float, float]:
    """Average off-diagonal similarity within groups and across groups."""
    s = np.asarray(similarity, dtype=np.float64)
    g = np.asarray(groups)
    same = g[:, None] == g[None, :]
    off = ~np.eye(len(g), dtype=bool)
    return float(s[same & off].mean()), float(s[~same].mean())


# -- spectra ------------------------------------------------------------------


@dataclass
class SpectrumReport:
    singular_values: np.ndarray
    log_values: np.ndarray
    effective_rank: float

    def to_json(self) -> dict:
        return {
            "singular_values": self.singular_values.tolist(),
            "log_values": self.log_values.tolist(),
            "effective_rank": self.effective_rank,
        }


def effective_rank(singular_values) -> float:
    """exp of the Shannon entropy of the normalised singular values."""
    s = np.asarray(singular_values, dtype=np.float64)
    total = s.sum()
    if total <= 0:
        return 1.0
    p = s[s > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def singular_spectrum(features) -> SpectrumReport:
    """Singular values of the column-centred feature matrix (rows are samples)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ContractError("need at least 2 rows")
    s = np.linalg.svd(f - f.mean(axis=0), compute_uv=False)
    logs = np.log(np.maximum(s, np.finfo(np.float64).tiny))
    return SpectrumReport(s, logs, effective_rank(s))


# -- KNN probe ----------------------------------------------------------------


def knn_predict(train_features, train_labels, test_features, k: int) -> np.ndarray:
    """Cosine KNN majority vote; a tie goes to the tied class owning the nearest neighbour."""
    tr = np.asarray(train_features, dtype=np.float64)
    te = np.asarray(test_features, dtype=np.float64)
    y = np.asarray(train_labels)
    if not 1 <= k <= tr.shape[0]:
        raise ContractError(f"k={k} must lie in [1, {tr.shape[0]}]")
    ut, _ = _unit_rows(tr)
    ue, _ = _unit_rows(te)
    sim = ue @ ut.T
    # stable sort on -sim keeps lower training index first among equal similarities
    nn = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    votes = y[nn]
    K = int(y.max()) + 1
    counts = np.zeros((te.shape[0], K), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(te.shape[0]), k), votes.reshape(-1)), 1)
    best = counts.max(axis=1, keepdims=True)
    tied = counts == best
    # first neighbour (in similarity order) whose class is among the tied winners
    first = np.argmax(tied[np.arange(te.shape[0])[:, None], votes], axis=1)
    return votes[np.arange(te.shape[0]), first]


def knn_eval(train_features, train_labels, test_features, test_labels, k: int = 10) -> float:
    test_labels = np.asarray(test_labels)
    if test_labels.size == 0:
        raise ContractError("empty test set")
    pred = knn_predict(train_features, train_labels, test_features, k)
    return float((pred == test_labels).mean())


# -- gates --------------------------------------------------------------------


@dataclass
class GateReport:
    gate_matrix: np.ndarray
    binary_matrix: np.ndarray
    subspace_sizes: np.ndarray
    pairwise_gate_similarity: np.ndarray
    threshold: float = 0.5

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "gate_matrix": self.gate_matrix.tolist(),
            "binary_matrix": self.binary_matrix.astype(int).tolist(),
            "subspace_sizes": self.subspace_sizes.tolist(),
            "pairwise_gate_similarity": self.pairwise_gate_similarity.tolist(),
        }


def binary_gate_similarity(binary: np.ndarray) -> np.ndarray:
    """Cosine similarity of binary gate rows; an all-zero row scores 0 against everything."""
    u, _ = _unit_rows(np.asarray(binary, dtype=np.float64))
    return u @ u.T


def gate_report(filt: FilterParams, threshold: float = 0.5) -> GateReport:
    """Eval-mode class gates for all K classes with binarised statistics."""
    g = class_gates(filt, "eval")
    b = g > threshold
    return GateReport(g, b, g.sum(axis=1), binary_gate_similarity(b), threshold)


def top_k_dims(values, k: int) -> list[int]:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if not 0 < k <= v.size:
        raise ContractError(f"k={k} must lie in [1, {v.size}]")
    return sorted(int(j) for j in np.argsort(-v, kind="stable")[:k])


def top_activation_dims(filt: FilterParams, pair: tuple[int, int], k: int) -> list[int]:
    """The ``k`` most strongly gated coordinates for a class pair."""
    return top_k_dims(gates_for_pair(filt, pair[0], pair[1]), k)


# -- k-means ------------------------------------------------------------------


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    iterations: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pseudo_labels(features, K: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until assignments stop changing."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < K:
        raise ContractError(f"need at least K={K} rows, got {n}")
    rng = np.random.default_rng(seed)
    centers = np.empty((K, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, K):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else rng.integers(n)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j : j + 1])[:, 0])

    labels = np.full(n, -1)
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centers)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(K):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
    d = _sq_dists(x, centers)
    inertia = float(d[np.arange(n), labels].sum())
    return KMeansResult(labels, centers, inertia, history, it)


# -- saliency -----------------------------------------------------------------


def _embed_tensor(params: ModelParams, x: Tensor, space: str, gate) -> Tensor:
    h = encode(params.encoder, x, "eval")
    if space == "encoder":
        return h
    z = project(params.projector, h, "eval")
    if space == "projector":
        return z
    if space == "gated":
        if gate is None:
            raise ContractError("gated space needs a gate vector")
        return z * np.asarray(gate, dtype=np.float64).reshape(1, -1)
    raise ContractError(f"unknown space {space!r}")


def clam_saliency(
    params: ModelParams,
    anchor,
    positive,
    views: int = 8,
    rng: np.random.Generator | None = None,
    noise_sigma: float = 0.0,
    dropout_prob: float = 0.0,
    space: str = "projector",
    gate=None,
) -> np.ndarray:
    """Gradient of the mean cosine similarity between augmented anchors and the positive.

    Each view is ``(anchor + noise) * keep_mask``; the gradient is taken with
    respect to the clean anchor and so averages over views. Sign is kept.
    """
    if views < 1:
        raise ContractError("views must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(1, -1)
    width = anchor.shape[1]
    noise = rng.normal(0.0, noise_sigma, size=(views, width)) if noise_sigma > 0 else np.zeros((views, width))
    keep = (rng.random((views, width)) >= dropout_prob).astype(np.float64) if dropout_prob > 0 else np.ones((views, width))

    p = _embed_tensor(params, Tensor(np.asarray(positive, dtype=np.float64).reshape(1, -1)), space, gate).data
    p_norm = np.linalg.norm(p)
    if p_norm == 0:
        raise ContractError("positive embedding has zero norm")
    x = Tensor(anchor, requires_grad=True)
    with Tape() as tape:
        xv = (ad.matmul(np.ones((views, 1)), x) + noise) * keep
        e = _embed_tensor(params, xv, space, gate)
        norms = ad.sqrt(ad.tsum(e * e, axis=1))
        sim = (e @ p.T) / (norms * p_norm)
        objective = ad.mean(sim)
    tape.backward(objective)
    return tape.grad(x)[0].copy()
