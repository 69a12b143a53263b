"""UMAP-style 2-D embedding of the feature matrix.

Pipeline: exact kNN -> per-point (rho, sigma) calibration -> fuzzy union
graph -> spectral initialisation -> SGD on the cross-entropy layout
objective with negative sampling.

Determinism: random draws inside the optimizer come from a stateless
counter-based hash keyed by (seed, edge, epoch, draw), so the sequence of
random numbers does not depend on the execution schedule. ``embed``
canonicalises row order by row id before doing any work, which makes the
result equivariant under row permutations.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
from scipy.optimize import curve_fit
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .preprocess import FeatureMatrix

log = logging.getLogger(__name__)

SMOOTH_K_TOLERANCE = 1e-5
MIN_K_DIST_SCALE = 1e-3
MAX_K_DIST_SCALE = 1e3
DENSE_EIGEN_LIMIT = 1500


class EmbeddingError(RuntimeError):
    pass


class FitError(RuntimeError):
    pass


@dataclass
class UmapConfig:
    n_neighbors: int = 15
    min_dist: float = 0.1
    spread: float = 1.0
    n_epochs: int = 500
    negative_sample_rate: int = 5
    initial_lr: float = 1.0
    repulsion_strength: float = 1.0
    seed: int = 0
    metric: str = "euclidean"
    deterministic: bool = True

    def validate(self, n: int | None = None) -> None:
        if self.n_neighbors < 2:
            raise ValueError("n_neighbors must be >= 2")
        if n is not None and self.n_neighbors >= n:
            raise ValueError(f"n_neighbors={self.n_neighbors} must be < n={n}")
        if not self.min_dist > 0:
            raise ValueError("min_dist must be > 0")
        if self.min_dist > self.spread:
            raise ValueError("min_dist must be <= spread")
        if self.n_epochs < 0:
            raise ValueError("n_epochs must be >= 0")
        if self.negative_sample_rate < 0:
            raise ValueError("negative_sample_rate must be >= 0")
        if self.metric != "euclidean":
            raise ValueError("only the euclidean metric is supported")


@dataclass
class KnnGraph:
    indices: np.ndarray  # n x k, int64
    distances: np.ndarray  # n x k, ascending per row

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass
class FuzzyGraph:
    matrix: sp.csr_matrix
    rhos: np.ndarray = field(default=None)
    sigmas: np.ndarray = field(default=None)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass
class Embedding2D:
    row_ids: list[str]
    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape != (len(self.row_ids), 2):
            raise ValueError("coords must be n x 2 and aligned with row_ids")

    def to_csv(self) -> str:
        lines = ["admission_id,x,y"]
        for rid, (x, y) in zip(self.row_ids, self.coords):
            lines.append(f"{rid},{float(x)!r},{float(y)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "Embedding2D":
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        ids = [r[0] for r in rows]
        coords = np.array([[float(r[1]), float(r[2])] for r in rows]).reshape(-1, 2)
        return cls(ids, coords)


# --------------------------------------------------------------------------
# exact kNN
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _knn_row(X, i, k, out_idx, out_dist):
    n, d = X.shape
    filled = 0
    for j in range(n):
        if j == i:
            continue
        s = 0.0
        for c in range(d):
            diff = X[i, c] - X[j, c]
            s += diff * diff
        dist = math.sqrt(s)
        if filled == k and dist >= out_dist[k - 1]:
            continue
        # insert after any equal distances: earlier (smaller) indices win ties
        pos = filled if filled < k else k - 1
        while pos > 0 and out_dist[pos - 1] > dist:
            if pos < k:
                out_dist[pos] = out_dist[pos - 1]
                out_idx[pos] = out_idx[pos - 1]
            pos -= 1
        out_dist[pos] = dist
        out_idx[pos] = j
        if filled < k:
            filled += 1


@numba.njit(cache=True, parallel=True)
def _knn_kernel(X, k):
    n = X.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k), dtype=np.float64)
    for i in numba.prange(n):
        _knn_row(X, i, k, idx[i], dist[i])
    return idx, dist


def knn_exact(matrix, k: int) -> KnnGraph:
    """Exact Euclidean k nearest neighbours, self excluded, ties to the
    smaller index."""
    X = matrix.values if isinstance(matrix, FeatureMatrix) else np.asarray(matrix, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than n={n}")
    if k < 1:
        raise ValueError("k must be positive")
    idx, dist = _knn_kernel(X, k)
    return KnnGraph(idx, dist)


# --------------------------------------------------------------------------
# smooth kNN calibration
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _membership_sum(dists, rho, sigma):
    s = 0.0
    for d in dists:
        gap = d - rho
        s += math.exp(-gap / sigma) if gap > 0.0 else 1.0
    return s


@numba.njit(cache=True)
def _smooth_knn_row(dists, target):
    k = dists.shape[0]
    rho = 0.0
    for d in dists:
        if d > 0.0:
            rho = d
            break
    mean = 0.0
    for d in dists:
        mean += d
    mean /= k
    lo = MIN_K_DIST_SCALE * mean if mean > 0.0 else MIN_K_DIST_SCALE
    hi = MAX_K_DIST_SCALE * mean if mean > 0.0 else MIN_K_DIST_SCALE
    f_lo = _membership_sum(dists, rho, lo) - target
    if f_lo >= 0.0:
        return rho, lo, True
    f_hi = _membership_sum(dists, rho, hi) - target
    if f_hi <= 0.0:
        return rho, hi, True
    mid = 0.5 * (lo + hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f = _membership_sum(dists, rho, mid) - target
        if abs(f) < 1e-12 or hi - lo <= 1e-15 * hi:
            break
        if f > 0.0:
            hi = mid
        else:
            lo = mid
    return rho, mid, False


@numba.njit(cache=True, parallel=True)
def _smooth_knn_kernel(distances, target):
    n = distances.shape[0]
    rhos = np.empty(n)
    sigmas = np.empty(n)
    clamped = np.empty(n, dtype=np.bool_)
    for i in numba.prange(n):
        rhos[i], sigmas[i], clamped[i] = _smooth_knn_row(distances[i], target)
    return rhos, sigmas, clamped


def smooth_knn(distances) -> tuple[float, float]:
    """(rho, sigma) for one sorted neighbour-distance row.

    rho is the smallest positive distance. sigma solves
    sum(exp(-max(d - rho, 0) / sigma)) = log2(k) by bisection; when no
    solution exists inside [1e-3, 1e3] x mean(d) it is clamped to the
    nearer end.
    """
    rho, sigma, _ = smooth_knn_detail(distances)
    return rho, sigma


def smooth_knn_detail(distances) -> tuple[float, float, bool]:
    d = np.ascontiguousarray(distances, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("need a 1-D row of at least 2 distances")
    if np.any(np.diff(d) < 0):
        raise ValueError("distances must be sorted ascending")
    if not np.any(d > 0):
        warnings.warn("all neighbour distances are zero; sigma clamped", RuntimeWarning, stacklevel=2)
    rho, sigma, clamped = _smooth_knn_row(d, math.log2(d.size))
    return float(rho), float(sigma), bool(clamped)


def smooth_knn_residual(distances, rho: float, sigma: float) -> float:
    d = np.asarray(distances, dtype=np.float64)
    return float(_membership_sum(d, rho, sigma) - math.log2(d.size))


# --------------------------------------------------------------------------
# fuzzy simplicial set
# --------------------------------------------------------------------------

def fuzzy_union(a, b):
    """Probabilistic t-conorm a + b - a*b."""
    return a + b - a * b


def fuzzy_simplicial_set(knn: KnnGraph) -> FuzzyGraph:
    n, k = knn.indices.shape
    rhos, sigmas, clamped = _smooth_knn_kernel(np.ascontiguousarray(knn.distances), math.log2(k))
    if clamped.any():
        log.debug("%d of %d sigma values clamped", int(clamped.sum()), n)
    gaps = np.maximum(knn.distances - rhos[:, None], 0.0)
    vals = np.exp(-gaps / sigmas[:, None])
    rows = np.repeat(np.arange(n), k)
    directed = sp.csr_matrix((vals.ravel(), (rows, knn.indices.ravel())), shape=(n, n))
    directed.sum_duplicates()
    transpose = directed.T.tocsr()
    prod = directed.multiply(transpose)
    graph = (directed + transpose - prod).tocsr()
    graph.eliminate_zeros()
    graph.sort_indices()
    return FuzzyGraph(graph, rhos, sigmas)


# --------------------------------------------------------------------------
# low-dimensional curve
# --------------------------------------------------------------------------

def ab_target_curve(x, min_dist: float, spread: float):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= min_dist, 1.0, np.exp(-(x - min_dist) / spread))


def ab_curve(x, a: float, b: float):
    return 1.0 / (1.0 + a * np.asarray(x, dtype=np.float64) ** (2.0 * b))


def ab_grid(spread: float) -> np.ndarray:
    return np.linspace(0.0, 3.0 * spread, 301)[1:]


def fit_ab(min_dist: float, spread: float, return_residual: bool = False):
    """Least-squares fit of 1 / (1 + a x^(2b)) to the offset exponential."""
    if not 0 < min_dist <= spread:
        raise ValueError("need 0 < min_dist <= spread")
    xv = ab_grid(spread)
    yv = ab_target_curve(xv, min_dist, spread)
    try:
        (a, b), _ = curve_fit(ab_curve, xv, yv, p0=(1.0, 1.0), maxfev=10000)
    except RuntimeError as exc:
        raise FitError(f"a/b fit did not converge for min_dist={min_dist}, spread={spread}: {exc}") from exc
    residual = float(np.sum((ab_curve(xv, a, b) - yv) ** 2))
    if not (np.isfinite(a) and np.isfinite(b) and a > 0 and b > 0):
        raise FitError(f"a/b fit diverged: a={a}, b={b}, residual={residual}")
    if return_residual:
        return float(a), float(b), residual
    return float(a), float(b)


# --------------------------------------------------------------------------
# gradients of the layout objective
# --------------------------------------------------------------------------

def attractive_grad(yi, yj, a: float, b: float) -> np.ndarray:
    """Gradient w.r.t. yi of log f(|yi - yj|), f = 1 / (1 + a d^(2b))."""
    diff = np.asarray(yi, dtype=np.float64) - np.asarray(yj, dtype=np.float64)
    d2 = float(diff @ diff)
    if d2 <= 0.0:
        return np.zeros_like(diff)
    coeff = -2.0 * a * b * d2 ** (b - 1.0) / (1.0 + a * d2 ** b)
    return coeff * diff


def repulsive_grad(yi, yj, a: float, b: float, eps: float = 1e-3) -> np.ndarray:
    """Gradient w.r.t. yi of log(1 - f(|yi - yj|)). ``eps`` regularises
    1/d^2 near zero; with eps=0 this is the exact gradient."""
    diff = np.asarray(yi, dtype=np.float64) - np.asarray(yj, dtype=np.float64)
    d2 = float(diff @ diff)
    if d2 <= 0.0:
        return np.zeros_like(diff)
    coeff = 2.0 * b / ((eps + d2) * (1.0 + a * d2 ** b))
    return coeff * diff


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

def _component_spectral(W: sp.csr_matrix, rng: np.random.Generator) -> np.ndarray | None:
    n = W.shape[0]
    deg = np.asarray(W.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    D = sp.diags(inv_sqrt)
    M = (D @ W @ D).tocsr()
    if n <= DENSE_EIGEN_LIMIT:
        L = np.eye(n) - M.toarray()
        vals, vecs = np.linalg.eigh((L + L.T) / 2.0)
        coords = vecs[:, 1:3]
    else:
        v0 = rng.uniform(0.5, 1.5, size=n)
        try:
            vals, vecs = eigsh(M, k=3, which="LA", v0=v0, tol=1e-8, maxiter=max(n * 5, 5000))
        except ArpackNoConvergence:
            return None
        order = np.argsort(vals)[::-1]
        coords = vecs[:, order[1:3]]
    # fix eigenvector signs so the output does not depend on solver internals
    for c in range(coords.shape[1]):
        pivot = np.argmax(np.abs(coords[:, c]))
        if coords[pivot, c] < 0:
            coords[:, c] = -coords[:, c]
    return coords


def spectral_init(graph: FuzzyGraph, seed: int, row_ids: list[str] | None = None) -> Embedding2D:
    """Two nontrivial eigenvectors of the symmetric normalised Laplacian.

    Each connected component is laid out on its own and placed in a cell
    of a grid whose cell order is a seeded permutation. Components with
    fewer than three points get uniform random coordinates in their cell.
    """
    W = graph.matrix.tocsr()
    n = W.shape[0]
    row_ids = list(row_ids) if row_ids is not None else [str(i) for i in range(n)]
    rng = np.random.default_rng([seed, 0x5EED])
    n_comp, comp = connected_components(W, directed=False)
    coords = np.zeros((n, 2))
    side = int(math.ceil(math.sqrt(n_comp)))
    cells = rng.permutation(side * side)[:n_comp]
    failed = False
    for c in range(n_comp):
        members = np.flatnonzero(comp == c)
        if members.size >= 3:
            local = _component_spectral(W[members][:, members], rng)
            if local is None:
                failed = True
                break
        else:
            local = rng.uniform(-1.0, 1.0, size=(members.size, 2))
        scale = np.abs(local).max()
        if scale > 0:
            local = local / scale
        if n_comp > 1:
            local = local + 3.0 * np.array([cells[c] % side, cells[c] // side], dtype=float)
        coords[members] = local

    if failed:
        warnings.warn("spectral initialisation did not converge; using random init", RuntimeWarning, stacklevel=2)
        coords = rng.uniform(-10.0, 10.0, size=(n, 2))
        return Embedding2D(row_ids, coords)

    coords = coords - coords.mean(axis=0)
    extent = np.abs(coords).max()
    if extent > 0:
        coords = coords * (10.0 / extent)
    coords = coords + rng.normal(scale=1e-4, size=coords.shape)
    return Embedding2D(row_ids, coords)


# --------------------------------------------------------------------------
# SGD layout
# --------------------------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _draw_index(seed, edge, epoch, draw, n):
    z = _mix64(seed + np.uint64(edge) * np.uint64(0x9E3779B97F4A7C15))
    z = _mix64(z ^ (np.uint64(epoch) * np.uint64(0xD1B54A32D192ED03)))
    z = _mix64(z + np.uint64(draw))
    return np.int64(z % np.uint64(n))


@numba.njit(cache=True)
def _clip(v):
    if v > 4.0:
        return 4.0
    if v < -4.0:
        return -4.0
    return v


@numba.njit(cache=True)
def _edge_update(Y, e, j, k, epoch, alpha, a, b, gamma, n_neg, seed):
    """Attractive step on edge (j, k) then n_neg repulsive steps for j.
    Returns False if a coordinate became non-finite."""
    n, dim = Y.shape
    d2 = 0.0
    for c in range(dim):
        diff = Y[j, c] - Y[k, c]
        d2 += diff * diff
    if d2 > 0.0:
        coeff = -2.0 * a * b * d2 ** (b - 1.0) / (a * d2 ** b + 1.0)
        for c in range(dim):
            g = _clip(coeff * (Y[j, c] - Y[k, c]))
            Y[j, c] += g * alpha
            Y[k, c] -= g * alpha
    for p in range(n_neg):
        m = _draw_index(seed, e, epoch, p, n)
        if m == j:
            continue
        d2 = 0.0
        for c in range(dim):
            diff = Y[j, c] - Y[m, c]
            d2 += diff * diff
        if d2 > 0.0:
            coeff = 2.0 * gamma * b / ((0.001 + d2) * (a * d2 ** b + 1.0))
            for c in range(dim):
                Y[j, c] += _clip(coeff * (Y[j, c] - Y[m, c])) * alpha
        else:
            for c in range(dim):
                Y[j, c] += 4.0 * alpha
    for c in range(dim):
        if not math.isfinite(Y[j, c]) or not math.isfinite(Y[k, c]):
            return False
    return True


@numba.njit(cache=True)
def _optimize_sequential(Y, head, tail, eps, eps_neg, n_epochs, a, b, gamma, lr, seed):
    next_sample = eps.copy()
    next_neg = eps_neg.copy()
    alpha = lr
    for epoch in range(n_epochs):
        for e in range(head.shape[0]):
            if next_sample[e] > epoch:
                continue
            n_neg = int((epoch - next_neg[e]) / eps_neg[e])
            if not _edge_update(Y, e, head[e], tail[e], epoch, alpha, a, b, gamma, n_neg, seed):
                return epoch, e
            next_sample[e] += eps[e]
            next_neg[e] += n_neg * eps_neg[e]
        alpha = lr * (1.0 - (epoch + 1) / n_epochs)
    return -1, -1


@numba.njit(cache=True, parallel=True)
def _optimize_parallel(Y, head, tail, eps, eps_neg, n_epochs, a, b, gamma, lr, seed):
    next_sample = eps.copy()
    next_neg = eps_neg.copy()
    alpha = lr
    bad = np.zeros(head.shape[0], dtype=np.bool_)
    for epoch in range(n_epochs):
        for e in numba.prange(head.shape[0]):
            if next_sample[e] > epoch:
                continue
            n_neg = int((epoch - next_neg[e]) / eps_neg[e])
            if not _edge_update(Y, e, head[e], tail[e], epoch, alpha, a, b, gamma, n_neg, seed):
                bad[e] = True
            next_sample[e] += eps[e]
            next_neg[e] += n_neg * eps_neg[e]
        for e in range(head.shape[0]):
            if bad[e]:
                return epoch, e
        alpha = lr * (1.0 - (epoch + 1) / n_epochs)
    return -1, -1


def epochs_per_sample(weights: np.ndarray, n_epochs: int) -> np.ndarray:
    """Edge e is sampled every eps[e] epochs, i.e. n_epochs * w_e / w_max
    times in total. Unsampled edges get +inf."""
    weights = np.asarray(weights, dtype=np.float64)
    out = np.full(weights.shape, np.inf)
    if weights.size == 0:
        return out
    n_samples = n_epochs * (weights / weights.max())
    pos = n_samples > 0
    out[pos] = n_epochs / n_samples[pos]
    return out


def optimize_embedding(graph: FuzzyGraph, init: Embedding2D, config: UmapConfig,
                       a: float | None = None, b: float | None = None) -> Embedding2D:
    if config.n_epochs == 0:
        return Embedding2D(list(init.row_ids), init.coords.copy())
    if a is None or b is None:
        a, b = fit_ab(config.min_dist, config.spread)
    coo = graph.matrix.tocoo()
    head = coo.row.astype(np.int64)
    tail = coo.col.astype(np.int64)
    eps = epochs_per_sample(coo.data, config.n_epochs)
    eps_neg = eps / config.negative_sample_rate if config.negative_sample_rate > 0 else np.full_like(eps, np.inf)
    Y = np.ascontiguousarray(init.coords.copy())
    runner = _optimize_sequential if config.deterministic else _optimize_parallel
    epoch, edge = runner(Y, head, tail, eps, eps_neg, int(config.n_epochs), float(a), float(b),
                         float(config.repulsion_strength), float(config.initial_lr),
                         np.uint64(config.seed))
    if epoch >= 0:
        raise EmbeddingError(
            f"non-finite coordinate at epoch {epoch}, edge {edge} ({head[edge]} -> {tail[edge]})")
    return Embedding2D(list(init.row_ids), Y)


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

@dataclass
class UmapModel:
    embedding: Embedding2D
    graph: FuzzyGraph
    a: float
    b: float
    config: UmapConfig

    def state_json(self, scaler_ref: str | None = None) -> str:
        coo = self.graph.matrix.tocoo()
        state = {
            "config": asdict(self.config),
            "a": self.a,
            "b": self.b,
            "seed": self.config.seed,
            "scaler_ref": scaler_ref,
            "row_ids": list(self.embedding.row_ids),
            "graph": {
                "n": int(self.graph.n),
                "row": coo.row.tolist(),
                "col": coo.col.tolist(),
                "weight": coo.data.tolist(),
            },
        }
        return json.dumps(state, sort_keys=True)


def embed(features: FeatureMatrix, config: UmapConfig | None = None) -> UmapModel:
    """Full UMAP run. Rows are processed in row-id order internally and
    returned in input order."""
    config = config or UmapConfig()
    n = len(features)
    config.validate(n)
    order = sorted(range(n), key=lambda i: features.row_ids[i])
    canon = features.take(order)

    knn = knn_exact(canon, config.n_neighbors)
    graph = fuzzy_simplicial_set(knn)
    a, b = fit_ab(config.min_dist, config.spread)
    init = spectral_init(graph, config.seed, canon.row_ids)
    emb = optimize_embedding(graph, init, config, a, b)

    inverse = np.empty(n, dtype=np.int64)
    inverse[np.asarray(order)] = np.arange(n)
    coords = emb.coords[inverse]
    perm = sp.csr_matrix((np.ones(n), (np.arange(n), inverse)), shape=(n, n))
    matrix = (perm @ graph.matrix @ perm.T).tocsr()
    matrix.sort_indices()
    graph_in_input_order = FuzzyGraph(matrix, graph.rhos[inverse], graph.sigmas[inverse])
    return UmapModel(Embedding2D(list(features.row_ids), coords), graph_in_input_order, a, b, config)
