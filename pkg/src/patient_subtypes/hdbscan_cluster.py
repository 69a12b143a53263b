"""HDBSCAN on the 2-D embedding.

Core distances -> Prim MST over mutual reachability -> single linkage
dendrogram -> condensed tree -> excess-of-mass cluster selection.
All tie-breaking is by index so that results are replayable.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass

import numba
import numpy as np

from .umap_embed import _knn_kernel

log = logging.getLogger(__name__)

# lambda = 1 / distance; zero distances are floored so lambdas stay finite
MIN_LAMBDA_DISTANCE = 1e-12


@dataclass
class HdbscanConfig:
    min_cluster_size: int = 100
    min_samples: int | None = None
    allow_single_cluster: bool = False
    seed: int = 0

    @property
    def effective_min_samples(self) -> int:
        return self.min_cluster_size if self.min_samples is None else self.min_samples

    def validate(self, n: int | None = None) -> None:
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be >= 2")
        if self.effective_min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if n is not None and self.effective_min_samples > n - 1:
            raise ValueError(f"min_samples={self.effective_min_samples} must be <= n - 1 = {n - 1}")


@dataclass
class Mst:
    u: np.ndarray
    v: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.weight)

    @property
    def n_points(self) -> int:
        return len(self.weight) + 1

    def total_weight(self) -> float:
        return math.fsum(np.sort(self.weight))


@dataclass
class CondensedTree:
    """Rows (parent, child, lambda, child_size).

    Point ids are 0..n-1; cluster node ids start at n, the root being n.
    A row with child < n records the lambda at which that point left its
    parent cluster.
    """
    parent: np.ndarray
    child: np.ndarray
    lambda_val: np.ndarray
    child_size: np.ndarray
    n_points: int

    @property
    def root(self) -> int:
        return self.n_points

    def cluster_nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([[self.root], self.child[self.child >= self.n_points]]))

    def lambda_birth(self) -> dict[int, float]:
        births = {self.root: 0.0}
        mask = self.child >= self.n_points
        for c, lam in zip(self.child[mask], self.lambda_val[mask]):
            births[int(c)] = float(lam)
        return births

    def node_sizes(self) -> dict[int, int]:
        sizes = {self.root: self.n_points}
        mask = self.child >= self.n_points
        for c, s in zip(self.child[mask], self.child_size[mask]):
            sizes[int(c)] = int(s)
        return sizes

    def children_clusters(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {int(c): [] for c in self.cluster_nodes()}
        mask = self.child >= self.n_points
        for p, c in zip(self.parent[mask], self.child[mask]):
            out[int(p)].append(int(c))
        return out

    def to_json(self) -> str:
        births = self.lambda_birth()
        sizes = self.node_sizes()
        parents = {self.root: None}
        mask = self.child >= self.n_points
        for p, c in zip(self.parent[mask], self.child[mask]):
            parents[int(c)] = int(p)
        stab = stability(self)
        nodes = [
            {"id": c, "parent": parents[c], "lambda_birth": births[c], "size": sizes[c],
             "stability": stab[c]}
            for c in sorted(births)
        ]
        return json.dumps({"n_points": self.n_points, "nodes": nodes}, sort_keys=True, indent=1)


@dataclass
class ClusterLabels:
    row_ids: list[str]
    labels: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size and self.labels.max() >= 0 else 0

    def sizes(self) -> list[int]:
        return [int(np.sum(self.labels == k)) for k in range(self.n_clusters)]

    def noise_share(self) -> float:
        return float(np.mean(self.labels == -1)) if self.labels.size else 0.0

    def to_csv(self) -> str:
        lines = ["admission_id,cluster"]
        lines += [f"{rid},{int(lab)}" for rid, lab in zip(self.row_ids, self.labels)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ClusterLabels":
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        return cls([r[0] for r in rows], np.array([int(r[1]) for r in rows], dtype=np.int64))


# --------------------------------------------------------------------------
# distances
# --------------------------------------------------------------------------

def _coords(embedding) -> np.ndarray:
    X = getattr(embedding, "coords", embedding)
    return np.ascontiguousarray(X, dtype=np.float64)


def core_distances(embedding, min_samples: int) -> np.ndarray:
    """Distance from each point to its min_samples-th nearest neighbour,
    the point itself excluded."""
    X = _coords(embedding)
    if not 1 <= min_samples <= X.shape[0] - 1:
        raise ValueError("need 1 <= min_samples <= n - 1")
    _, dist = _knn_kernel(X, min_samples)
    return dist[:, min_samples - 1].copy()


def mutual_reachability(d_ab: float, core_a: float, core_b: float) -> float:
    return max(core_a, core_b, d_ab)


# --------------------------------------------------------------------------
# minimum spanning tree
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _prim(X, core):
    n, dim = X.shape
    in_tree = np.zeros(n, dtype=np.bool_)
    key = np.full(n, np.inf)
    parent = np.full(n, n, dtype=np.int64)
    eu = np.empty(n - 1, dtype=np.int64)
    ev = np.empty(n - 1, dtype=np.int64)
    ew = np.empty(n - 1, dtype=np.float64)
    current = 0
    in_tree[0] = True
    for step in range(n - 1):
        best = -1
        best_key = np.inf
        for v in range(n):
            if in_tree[v]:
                continue
            s = 0.0
            for c in range(dim):
                diff = X[current, c] - X[v, c]
                s += diff * diff
            mr = math.sqrt(s)
            if core[current] > mr:
                mr = core[current]
            if core[v] > mr:
                mr = core[v]
            if mr < key[v] or (mr == key[v] and current < parent[v]):
                key[v] = mr
                parent[v] = current
            if key[v] < best_key:
                best_key = key[v]
                best = v
        in_tree[best] = True
        eu[step] = parent[best]
        ev[step] = best
        ew[step] = best_key
        current = best
    return eu, ev, ew


def build_mst(embedding, cores) -> Mst:
    """Prim's algorithm over the implicit complete mutual-reachability
    graph, O(n^2) time and O(n) memory."""
    X = _coords(embedding)
    if X.shape[0] < 2:
        raise ValueError("need at least two points")
    cores = np.ascontiguousarray(cores, dtype=np.float64)
    u, v, w = _prim(X, cores)
    return Mst(u, v, w)


# --------------------------------------------------------------------------
# single linkage and condensation
# --------------------------------------------------------------------------

def single_linkage(mst: Mst) -> np.ndarray:
    """Dendrogram rows (left, right, distance, size); node n+i is created
    by row i. Edges are merged in ascending weight, ties by edge order."""
    n = mst.n_points
    order = np.argsort(mst.weight, kind="stable")
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)
    rows = np.empty((n - 1, 4))

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for i, e in enumerate(order):
        a, b = find(mst.u[e]), find(mst.v[e])
        new = n + i
        parent[a] = parent[b] = new
        size[new] = size[a] + size[b]
        rows[i] = (min(a, b), max(a, b), mst.weight[e], size[new])
    return rows


def _leaves(linkage: np.ndarray, node: int, n: int) -> list[int]:
    out, stack = [], [node]
    while stack:
        x = stack.pop()
        if x < n:
            out.append(x)
        else:
            left, right = linkage[x - n, 0], linkage[x - n, 1]
            stack.append(int(right))
            stack.append(int(left))
    return sorted(out)


def condense_tree(mst: Mst, min_cluster_size: int) -> CondensedTree:
    """Walk the dendrogram from the root. A split is kept only if both
    sides hold at least min_cluster_size points; otherwise the small side's
    points fall out of the current cluster at lambda = 1 / distance."""
    n = mst.n_points
    linkage = single_linkage(mst)
    root = 2 * n - 2

    def node_size(x):
        return 1 if x < n else int(linkage[x - n, 3])

    relabel = {root: n}
    next_label = n + 1
    parents, children, lambdas, sizes = [], [], [], []

    def emit(p, c, lam, s):
        parents.append(p)
        children.append(c)
        lambdas.append(lam)
        sizes.append(s)

    queue = deque([root])
    while queue:
        node = queue.popleft()
        left, right, dist, _ = linkage[node - n]
        left, right = int(left), int(right)
        lam = 1.0 / max(dist, MIN_LAMBDA_DISTANCE)
        ls, rs = node_size(left), node_size(right)
        cur = relabel[node]
        if ls >= min_cluster_size and rs >= min_cluster_size:
            for side, s in ((left, ls), (right, rs)):
                relabel[side] = next_label
                emit(cur, next_label, lam, s)
                next_label += 1
                queue.append(side)
            continue
        for side, s in ((left, ls), (right, rs)):
            if s >= min_cluster_size:
                relabel[side] = cur
                queue.append(side)
            else:
                for p in _leaves(linkage, side, n):
                    emit(cur, p, lam, 1)
    # single points below the root: n == 1 never reaches here (mst needs n >= 2)
    return CondensedTree(
        np.asarray(parents, dtype=np.int64),
        np.asarray(children, dtype=np.int64),
        np.asarray(lambdas, dtype=np.float64),
        np.asarray(sizes, dtype=np.int64),
        n,
    )


# --------------------------------------------------------------------------
# selection
# --------------------------------------------------------------------------

def stability(tree: CondensedTree) -> dict[int, float]:
    """Excess of mass: sum over rows of (lambda - lambda_birth) * size."""
    births = tree.lambda_birth()
    stab = {c: 0.0 for c in births}
    for p, lam, s in zip(tree.parent, tree.lambda_val, tree.child_size):
        stab[int(p)] += (lam - births[int(p)]) * s
    return stab


def select_clusters(tree: CondensedTree, allow_single_cluster: bool = False) -> list[int]:
    stab = stability(tree)
    kids = tree.children_clusters()
    candidates = sorted(stab, reverse=True)
    if not allow_single_cluster:
        candidates = [c for c in candidates if c != tree.root]
    selected = {c: True for c in candidates}
    propagated = dict(stab)
    for node in candidates:
        child_sum = sum(propagated[c] for c in kids[node])
        if child_sum > propagated[node]:
            selected[node] = False
            propagated[node] = child_sum
        else:
            stack = list(kids[node])
            while stack:
                d = stack.pop()
                selected[d] = False
                stack.extend(kids[d])
    return sorted(c for c, keep in selected.items() if keep)


def _relabel_by_size(raw: np.ndarray) -> np.ndarray:
    ids = [k for k in np.unique(raw) if k >= 0]
    # size descending, then smallest member index
    ids.sort(key=lambda k: (-int(np.sum(raw == k)), int(np.argmax(raw == k))))
    out = np.full(raw.shape, -1, dtype=np.int64)
    for new, k in enumerate(ids):
        out[raw == k] = new
    return out


def extract_clusters(tree: CondensedTree, config: HdbscanConfig, row_ids=None) -> ClusterLabels:
    n = tree.n_points
    row_ids = list(row_ids) if row_ids is not None else [str(i) for i in range(n)]
    chosen = set(select_clusters(tree, config.allow_single_cluster))
    up = {}
    mask = tree.child >= n
    for p, c in zip(tree.parent[mask], tree.child[mask]):
        up[int(c)] = int(p)

    resolved: dict[int, int] = {}

    def owner(node: int) -> int:
        path = []
        while node not in resolved:
            if node in chosen:
                resolved[node] = node
                break
            if node == tree.root:
                resolved[node] = -1
                break
            path.append(node)
            node = up[node]
        result = resolved[node]
        for x in path:
            resolved[x] = result
        return result

    raw = np.full(n, -1, dtype=np.int64)
    point_rows = tree.child < n
    for p, c in zip(tree.parent[point_rows], tree.child[point_rows]):
        raw[int(c)] = owner(int(p))
    return ClusterLabels(row_ids, _relabel_by_size(raw))


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

@dataclass
class HdbscanResult:
    labels: ClusterLabels
    tree: CondensedTree
    mst: Mst
    cores: np.ndarray


def cluster(embedding, config: HdbscanConfig | None = None, row_ids=None) -> HdbscanResult:
    config = config or HdbscanConfig()
    X = _coords(embedding)
    config.validate(X.shape[0])
    if row_ids is None:
        row_ids = getattr(embedding, "row_ids", None)
    cores = core_distances(X, config.effective_min_samples)
    mst = build_mst(X, cores)
    tree = condense_tree(mst, config.min_cluster_size)
    labels = extract_clusters(tree, config, row_ids)
    log.info("hdbscan: %d clusters, noise share %.4f", labels.n_clusters, labels.noise_share())
    return HdbscanResult(labels, tree, mst, cores)
