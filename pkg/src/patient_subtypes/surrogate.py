"""Per-cluster surrogate explanations.

For each cluster, perturbed copies of cohort rows are labelled
one-vs-rest by the cluster of their nearest clustered cohort row, and a
shallow CART tree is fitted to those labels. The tree's Gini importances
say how much each vital drives membership of that cluster.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .hdbscan_cluster import ClusterLabels
from .preprocess import FEATURES, FeatureMatrix

log = logging.getLogger(__name__)


class ExplainError(RuntimeError):
    pass


@dataclass
class ExplainerConfig:
    n_samples: int = 25_000
    mutation_sd_scale: float = 0.3
    tree_max_depth: int = 4
    min_leaf: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if not 0 < self.mutation_sd_scale <= 1:
            raise ValueError("mutation_sd_scale must lie in (0, 1]")
        if self.tree_max_depth < 0:
            raise ValueError("tree_max_depth must be >= 0")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")


# --------------------------------------------------------------------------
# CART
# --------------------------------------------------------------------------

def gini(pos: float, n: float) -> float:
    if n == 0:
        return 0.0
    p = pos / n
    return 2.0 * p * (1.0 - p)


@dataclass
class Node:
    n_samples: int
    n_pos: int
    impurity: float
    depth: int
    feature: int = -1
    threshold: float = np.nan
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    @property
    def prediction(self) -> int:
        # majority class; an exact tie goes to the negative class
        return int(2 * self.n_pos > self.n_samples)


@dataclass
class DecisionTreeSurrogate:
    nodes: list[Node] = field(default_factory=list)
    n_features: int = 0

    @property
    def depth(self) -> int:
        return max((nd.depth for nd in self.nodes if nd.is_leaf), default=0)

    @property
    def n_splits(self) -> int:
        return sum(not nd.is_leaf for nd in self.nodes)

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        leaf = np.zeros(X.shape[0], dtype=np.int64)
        active = np.arange(X.shape[0])
        stack = [(0, active)]
        while stack:
            idx, rows = stack.pop()
            nd = self.nodes[idx]
            if nd.is_leaf:
                leaf[rows] = idx
                continue
            go_left = X[rows, nd.feature] <= nd.threshold
            stack.append((nd.left, rows[go_left]))
            stack.append((nd.right, rows[~go_left]))
        return leaf

    def predict(self, X: np.ndarray) -> np.ndarray:
        preds = np.array([nd.prediction for nd in self.nodes], dtype=np.int64)
        return preds[self.apply(X)]

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def _best_split(X: np.ndarray, y: np.ndarray, min_leaf: int):
    """Lowest weighted child Gini over all features and midpoint
    thresholds. Returns (score, feature, threshold) or None."""
    n = len(y)
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cum_pos = np.cumsum(y[order])
        total_pos = cum_pos[-1]
        # split after position i: left = 0..i
        n_left = np.arange(1, n)
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        i = np.flatnonzero(valid)
        nl = n_left[i].astype(np.float64)
        nr = n - nl
        pl = cum_pos[i] / nl
        pr = (total_pos - cum_pos[i]) / nr
        score = (nl * 2.0 * pl * (1.0 - pl) + nr * 2.0 * pr * (1.0 - pr)) / n
        j = int(np.argmin(score))
        if best is None or score[j] < best[0]:
            lo, hi = xs[i[j]], xs[i[j] + 1]
            thr = 0.5 * (lo + hi)
            if not lo <= thr < hi:
                thr = lo
            best = (float(score[j]), f, float(thr))
    return best


def fit_tree(samples, labels, config: ExplainerConfig | None = None,
             max_depth: int | None = None, min_leaf: int | None = None) -> DecisionTreeSurrogate:
    """Greedy CART with hard (non-probabilistic) leaf predictions.

    A node is split while it is impure, above max_depth and a split with
    at least ``min_leaf`` rows per side exists. Zero-gain splits are
    allowed, which is what lets depth 2 solve XOR.
    """
    config = config or ExplainerConfig()
    max_depth = config.tree_max_depth if max_depth is None else max_depth
    min_leaf = config.min_leaf if min_leaf is None else min_leaf
    X = np.asarray(samples, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError("samples must be a non-empty m x d matrix aligned with labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    if y.min() == y.max():
        warnings.warn("single-class input; fitting a stump", RuntimeWarning, stacklevel=2)

    tree = DecisionTreeSurrogate(n_features=X.shape[1])

    def grow(rows: np.ndarray, depth: int) -> int:
        pos = int(y[rows].sum())
        node = Node(len(rows), pos, gini(pos, len(rows)), depth)
        idx = len(tree.nodes)
        tree.nodes.append(node)
        if depth >= max_depth or pos == 0 or pos == len(rows) or len(rows) < 2 * min_leaf:
            return idx
        split = _best_split(X[rows], y[rows], min_leaf)
        if split is None:
            return idx
        _, f, thr = split
        go_left = X[rows, f] <= thr
        node.feature, node.threshold = f, thr
        node.left = grow(rows[go_left], depth + 1)
        node.right = grow(rows[~go_left], depth + 1)
        return idx

    grow(np.arange(X.shape[0]), 0)
    return tree


def feature_importance(tree: DecisionTreeSurrogate, names=FEATURES) -> dict[str, float]:
    """Normalised Gini importance (impurity decrease weighted by the node's
    share of samples). All zeros when no split reduces impurity."""
    names = list(names)
    if len(names) != tree.n_features:
        names = [f"f{i}" for i in range(tree.n_features)]
    total_n = tree.nodes[0].n_samples
    raw = np.zeros(tree.n_features)
    for nd in tree.nodes:
        if nd.is_leaf:
            continue
        left, right = tree.nodes[nd.left], tree.nodes[nd.right]
        decrease = (nd.n_samples * nd.impurity
                    - left.n_samples * left.impurity
                    - right.n_samples * right.impurity) / total_n
        raw[nd.feature] += decrease
    s = raw.sum()
    if s <= 0:
        return {name: 0.0 for name in names}
    return {name: float(v / s) for name, v in zip(names, raw)}


# --------------------------------------------------------------------------
# sampling and labelling
# --------------------------------------------------------------------------

def generate_samples(features, config: ExplainerConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniformly resampled cohort rows plus Gaussian noise with per-feature
    sd = mutation_sd_scale * empirical sd."""
    X = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if X.shape[0] == 0:
        raise ExplainError("cannot sample from an empty cohort")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    rows = rng.integers(0, X.shape[0], size=config.n_samples)
    sd = X.std(axis=0, ddof=0)
    noise = rng.normal(size=(config.n_samples, X.shape[1])) * (config.mutation_sd_scale * sd)
    return X[rows] + noise


class NearestClusterLabeler:
    """1-NN cluster lookup among the non-noise cohort rows."""

    def __init__(self, clustered_features, labels: ClusterLabels):
        X = clustered_features.values if isinstance(clustered_features, FeatureMatrix) else np.asarray(clustered_features)
        lab = np.asarray(labels.labels if isinstance(labels, ClusterLabels) else labels)
        keep = np.flatnonzero(lab >= 0)
        if keep.size == 0:
            raise ExplainError("no clustered (non-noise) rows to label against")
        self.ref_index = keep
        self.ref_labels = lab[keep]
        self._tree = cKDTree(X[keep])

    def nearest(self, samples: np.ndarray) -> np.ndarray:
        """Cohort row index of each sample's nearest clustered row; exact
        distance ties go to the smaller row index."""
        k = min(4, self.ref_index.size)
        dist, pos = self._tree.query(samples, k=k)
        dist = dist.reshape(len(samples), k)
        pos = pos.reshape(len(samples), k)
        cand = np.where(dist == dist[:, :1], self.ref_index[pos], np.iinfo(np.int64).max)
        return cand.min(axis=1)

    def cluster_of(self, samples: np.ndarray) -> np.ndarray:
        idx = self.nearest(samples)
        lookup = dict(zip(self.ref_index.tolist(), self.ref_labels.tolist()))
        return np.array([lookup[i] for i in idx.tolist()], dtype=np.int64)


def label_samples(samples, clustered_features, labels: ClusterLabels, target_cluster: int,
                  labeler: NearestClusterLabeler | None = None) -> np.ndarray:
    lab = np.asarray(labels.labels if isinstance(labels, ClusterLabels) else labels)
    if target_cluster not in set(lab.tolist()):
        raise ExplainError(f"cluster {target_cluster} not present in labels")
    labeler = labeler or NearestClusterLabeler(clustered_features, labels)
    return (labeler.cluster_of(np.asarray(samples, dtype=np.float64)) == target_cluster).astype(np.int64)


# --------------------------------------------------------------------------
# per-cluster driver
# --------------------------------------------------------------------------

@dataclass
class ClusterExplanation:
    cluster: int
    importance: dict[str, float]
    tree_accuracy: float
    n_samples: int
    positive_share: float
    tree: DecisionTreeSurrogate | None = None
    samples: np.ndarray | None = None
    sample_labels: np.ndarray | None = None
    anchors: np.ndarray | None = None
    error: str | None = None


def explain_cluster(features: FeatureMatrix, labels: ClusterLabels, target: int,
                    config: ExplainerConfig, labeler: NearestClusterLabeler) -> ClusterExplanation:
    rng = np.random.default_rng([config.seed, target])
    samples = generate_samples(features, config, rng)
    anchors = labeler.nearest(samples)
    assigned = np.asarray(labels.labels)[anchors]
    y = (assigned == target).astype(np.int64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tree = fit_tree(samples, y, config)
    return ClusterExplanation(
        cluster=target,
        importance=feature_importance(tree),
        tree_accuracy=tree.accuracy(samples, y),
        n_samples=len(samples),
        positive_share=float(y.mean()),
        tree=tree,
        samples=samples,
        sample_labels=y,
        anchors=anchors,
    )


def explain_all_clusters(features: FeatureMatrix, labels: ClusterLabels,
                         config: ExplainerConfig | None = None) -> dict[int, ClusterExplanation]:
    config = config or ExplainerConfig()
    config.validate()
    clusters = sorted(k for k in set(np.asarray(labels.labels).tolist()) if k >= 0)
    if not clusters:
        raise ExplainError("no non-noise clusters to explain")
    labeler = NearestClusterLabeler(features, labels)
    out = {}
    for k in clusters:
        try:
            out[k] = explain_cluster(features, labels, k, config, labeler)
        except Exception as exc:  # one failing cluster must not sink the rest
            log.error("explanation for cluster %d failed: %s", k, exc)
            out[k] = ClusterExplanation(k, {f: float("nan") for f in FEATURES}, float("nan"), 0, float("nan"),
                                        error=str(exc))
    return out


def explanations_json(explanations: dict[int, ClusterExplanation]) -> str:
    payload = {}
    for k, ex in sorted(explanations.items()):
        entry = dict(ex.importance)
        entry["tree_accuracy"] = ex.tree_accuracy
        entry["n_samples"] = ex.n_samples
        if ex.error:
            entry["error"] = ex.error
        payload[str(k)] = entry
    return json.dumps(payload, indent=2, sort_keys=True)


def explanations_csv(explanations: dict[int, ClusterExplanation]) -> str:
    lines = ["cluster,feature,importance"]
    for k, ex in sorted(explanations.items()):
        for name in FEATURES:
            lines.append(f"{k},{name},{ex.importance[name]!r}")
    return "\n".join(lines) + "\n"


def tree_to_dict(tree: DecisionTreeSurrogate, names=FEATURES) -> dict:
    nodes = []
    for nd in tree.nodes:
        entry = {"n_samples": nd.n_samples, "n_pos": nd.n_pos, "impurity": nd.impurity, "depth": nd.depth}
        if not nd.is_leaf:
            entry.update(feature=names[nd.feature], threshold=nd.threshold, left=nd.left, right=nd.right)
        else:
            entry["prediction"] = nd.prediction
        nodes.append(entry)
    return {"n_features": tree.n_features, "nodes": nodes}


def trees_json(explanations: dict[int, ClusterExplanation]) -> str:
    payload = {str(k): tree_to_dict(ex.tree) for k, ex in sorted(explanations.items()) if ex.tree is not None}
    return json.dumps(payload, indent=2, sort_keys=True)
