"""KNN similarity graph and two-level map-equation clustering.

The map equation here is the undirected, teleportation-free form: node
visit rates are strength / (2 * total weight) and a module's exit rate is
its cut weight / (2 * total weight).  Non-positive edges carry no flow
and are ignored by the partitioner.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

OUTLIER = -1


class GraphError(ValueError):
    pass


class DegenerateCentroidError(ValueError):
    pass


@dataclass
class KnnGraph:
    n_nodes: int
    src: np.ndarray  # i < j
    dst: np.ndarray
    weight: np.ndarray
    n_neighbors: int = 0

    @property
    def n_edges(self) -> int:
        return len(self.weight)

    def edge_dict(self) -> dict:
        return {(int(i), int(j)): float(w) for i, j, w in zip(self.src, self.dst, self.weight)}

    def adjacency(self):
        adj = [dict() for _ in range(self.n_nodes)]
        for i, j, w in zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist()):
            adj[i][j] = adj[i].get(j, 0.0) + w
            adj[j][i] = adj[j].get(i, 0.0) + w
        return adj

    def write_edgelist(self, path):
        with open(path, "w") as fh:
            for i, j, w in zip(self.src, self.dst, self.weight):
                fh.write(f"{i} {j} {w:.9g}\n")


def graph_from_edges(n_nodes, edges) -> KnnGraph:
    """Build a graph from ``(i, j, w)`` triples (undirected, i != j)."""
    acc = {}
    for i, j, w in edges:
        i, j = int(i), int(j)
        if i == j:
            raise GraphError("self loop")
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise GraphError(f"edge ({i}, {j}) outside 0..{n_nodes - 1}")
        a, b = min(i, j), max(i, j)
        acc[(a, b)] = float(w)
    keys = sorted(acc)
    src = np.array([k[0] for k in keys], dtype=np.int64)
    dst = np.array([k[1] for k in keys], dtype=np.int64)
    return KnnGraph(n_nodes, src, dst, np.array([acc[k] for k in keys], dtype=np.float64))


def knn_graph(embeddings, n: int, mutual: bool = False) -> KnnGraph:
    """Top-``n`` cosine neighbours per node, symmetrized by union (or mutual)."""
    E = np.asarray(embeddings, dtype=np.float64)
    N = len(E)
    if n < 1:
        raise GraphError("n must be >= 1")
    if N < 2:
        raise GraphError("need at least 2 embeddings")
    sim = np.clip(E @ E.T, -1.0, 1.0)
    k = min(n, N - 1)
    picks = np.zeros((N, N), dtype=bool)
    for i in range(N):
        row = -sim[i]
        row[i] = np.inf  # self last
        order = np.argsort(row, kind="stable")[:k]
        picks[i, order] = True
    sym = picks & picks.T if mutual else picks | picks.T
    iu, ju = np.nonzero(np.triu(sym, 1))
    return KnnGraph(N, iu.astype(np.int64), ju.astype(np.int64), sim[iu, ju].copy(), n)


def prune(graph: KnnGraph, s_up: float) -> KnnGraph:
    keep = graph.weight >= s_up
    return KnnGraph(graph.n_nodes, graph.src[keep], graph.dst[keep], graph.weight[keep],
                    graph.n_neighbors)


# --------------------------------------------------------------------------
# map equation

def _plogp(x):
    return x * math.log2(x) if x > 0 else 0.0


def map_equation(graph: KnnGraph, partition) -> float:
    """Two-level codelength in bits of ``partition`` (one module id per node)."""
    if graph.n_nodes == 0:
        raise GraphError("empty graph")
    part = np.asarray(partition)
    if len(part) != graph.n_nodes:
        raise GraphError("partition must cover every node")
    pos = graph.weight > 0
    src, dst, w = graph.src[pos], graph.dst[pos], graph.weight[pos]
    total = float(w.sum())
    if total <= 0:
        return 0.0
    strength = np.zeros(graph.n_nodes)
    np.add.at(strength, src, w)
    np.add.at(strength, dst, w)
    flow = strength / (2 * total)
    mods = {m: i for i, m in enumerate(dict.fromkeys(part.tolist()))}
    mi = np.array([mods[m] for m in part.tolist()])
    cut = np.zeros(len(mods))
    crossing = mi[src] != mi[dst]
    np.add.at(cut, mi[src][crossing], w[crossing])
    np.add.at(cut, mi[dst][crossing], w[crossing])
    exit_ = cut / (2 * total)
    mflow = np.zeros(len(mods))
    np.add.at(mflow, mi, flow)
    return _codelength(exit_, mflow, sum(_plogp(f) for f in flow))


def _codelength(exit_, mflow, node_plogp):
    q = float(np.sum(exit_))
    return (_plogp(q) - 2 * sum(_plogp(e) for e in exit_) - node_plogp
            + sum(_plogp(e + f) for e, f in zip(exit_, mflow)))


# --------------------------------------------------------------------------
# greedy search

@dataclass
class Partition:
    modules: np.ndarray
    codelength: float
    move_log: list = field(default_factory=list)


class _Level:
    """Working state for local moving on one aggregation level.

    Plain Python lists on purpose: the sweep is scalar code and numpy
    scalar indexing would dominate its cost.
    """

    def __init__(self, adj, flow, total2, node_plogp, modules=None):
        n = len(adj)
        self.n = n
        self.total2 = total2
        self.node_plogp = node_plogp
        # neighbour lists with weights already converted to flow units
        self.nbrs = [list(a.keys()) for a in adj]
        self.wts = [[w / total2 for w in a.values()] for a in adj]
        self.flow = [float(f) for f in flow]
        self.out = [sum(ws) for ws in self.wts]
        self.mod = list(range(n)) if modules is None else [int(m) for m in modules]
        self.mexit = [0.0] * n
        self.mflow = [0.0] * n
        self.msize = [0] * n
        mod = self.mod
        for v in range(n):
            m = mod[v]
            self.mflow[m] += self.flow[v]
            self.msize[m] += 1
            for u, w in zip(self.nbrs[v], self.wts[v]):
                if mod[u] != m:
                    self.mexit[m] += w
        self.empty = [m for m in range(n - 1, -1, -1) if self.msize[m] == 0]
        self.sum_exit = sum(self.mexit)
        self.sum_plogp_exit = sum(_plogp(e) for e in self.mexit)
        self.sum_plogp_ef = sum(_plogp(e + f) for e, f in zip(self.mexit, self.mflow))

    def codelength(self):
        return (_plogp(self.sum_exit) - 2 * self.sum_plogp_exit - self.node_plogp
                + self.sum_plogp_ef)

    def delta(self, v, old, new, w_old, w_new):
        """Codelength change if node v moves from module old to new.

        w_old / w_new: flow between v and the rest of old / new.
        """
        o = self.out[v]
        f = self.flow[v]
        eo, fo = self.mexit[old], self.mflow[old]
        en, fn = self.mexit[new], self.mflow[new]
        eo2 = eo - o + 2 * w_old
        fo2 = fo - f
        en2 = en + o - 2 * w_new
        fn2 = fn + f
        sum_exit2 = self.sum_exit - eo - en + eo2 + en2
        d = (_plogp(sum_exit2) - _plogp(self.sum_exit)
             - 2 * (_plogp(eo2) + _plogp(en2) - _plogp(eo) - _plogp(en))
             + _plogp(eo2 + fo2) + _plogp(en2 + fn2) - _plogp(eo + fo) - _plogp(en + fn))
        return d, (eo2, fo2, en2, fn2, sum_exit2)

    def apply(self, v, old, new, upd):
        eo2, fo2, en2, fn2, sum_exit2 = upd
        eo, fo = self.mexit[old], self.mflow[old]
        en, fn = self.mexit[new], self.mflow[new]
        self.sum_plogp_exit += _plogp(eo2) + _plogp(en2) - _plogp(eo) - _plogp(en)
        self.sum_plogp_ef += (_plogp(eo2 + fo2) + _plogp(en2 + fn2)
                              - _plogp(eo + fo) - _plogp(en + fn))
        self.sum_exit = sum_exit2
        self.mexit[old], self.mflow[old] = max(eo2, 0.0), max(fo2, 0.0)
        self.mexit[new], self.mflow[new] = en2, fn2
        if self.msize[new] == 0:
            self.empty.remove(new)
        self.msize[old] -= 1
        self.msize[new] += 1
        if self.msize[old] == 0:
            self.empty.append(old)
        self.mod[v] = new

    def sweep_until_stable(self, rng, move_log, tol=1e-12, max_sweeps=200):
        mod, msize, empty = self.mod, self.msize, self.empty
        moved_any = False
        for _ in range(max_sweeps):
            moved = 0
            for v in rng.permutation(self.n).tolist():
                old = mod[v]
                links = {}
                for u, w in zip(self.nbrs[v], self.wts[v]):
                    m = mod[u]
                    links[m] = links.get(m, 0.0) + w
                w_old = links.pop(old, 0.0)
                best, best_d, best_upd = None, -tol, None
                cands = sorted(links)
                if msize[old] > 1 and empty:
                    # a free slot: v leaves to become its own module
                    cands.append(empty[-1])
                for m in cands:
                    d, upd = self.delta(v, old, m, w_old, links.get(m, 0.0))
                    if d < best_d:
                        best, best_d, best_upd = m, d, upd
                if best is not None:
                    self.apply(v, old, best, best_upd)
                    move_log.append(self.codelength())
                    moved += 1
            if not moved:
                break
            moved_any = True
        return moved_any


def _aggregate(adj, flow, modules):
    ids = {m: i for i, m in enumerate(dict.fromkeys(modules.tolist()))}
    k = len(ids)
    new_adj = [defaultdict(float) for _ in range(k)]
    new_flow = np.zeros(k)
    for v, nbrs in enumerate(adj):
        a = ids[modules[v]]
        new_flow[a] += flow[v]
        for u, w in nbrs.items():
            b = ids[modules[u]]
            if a != b:
                new_adj[a][b] += w
    return [dict(d) for d in new_adj], new_flow, np.array([ids[m] for m in modules.tolist()])


def _one_trial(adj, flow, total2, node_plogp, rng, move_log, init=None):
    n = len(adj)
    node_to_super = np.arange(n) if init is None else init.copy()
    level_adj, level_flow = adj, flow
    if init is not None:
        level_adj, level_flow, node_to_super = _aggregate(adj, flow, init)
    while True:
        lvl = _Level(level_adj, level_flow, total2, node_plogp)
        moved = lvl.sweep_until_stable(rng, move_log)
        if not moved:
            break
        level_adj, level_flow, relabel = _aggregate(level_adj, level_flow,
                                                    np.asarray(lvl.mod))
        node_to_super = relabel[node_to_super]
        if len(level_adj) == 1:
            break
    return node_to_super


def infomap_partition(graph: KnnGraph, seed: int = 0, trials: int = 3,
                      refine_rounds: int = 2) -> Partition:
    """Greedy two-level map-equation minimization.

    Each trial starts from singletons, moves nodes to the neighbouring
    module with the largest codelength decrease until no move helps, then
    aggregates modules into super-nodes and repeats.  Refinement rounds
    re-run single-node moves from the coarse solution (to undo early
    mistakes) and aggregate again.  The best trial wins.
    """
    if graph.n_nodes == 0:
        raise GraphError("empty graph")
    pos = graph.weight > 0
    g = KnnGraph(graph.n_nodes, graph.src[pos], graph.dst[pos], graph.weight[pos])
    adj = g.adjacency()
    total = float(g.weight.sum())
    singletons = np.arange(g.n_nodes)
    if total <= 0:
        return Partition(singletons, 0.0, [])
    total2 = 2 * total
    flow = np.array([sum(a.values()) for a in adj]) / total2
    node_plogp = sum(_plogp(f) for f in flow)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, trials)):
        log_ = [map_equation(g, singletons)]
        mods = _one_trial(adj, flow, total2, node_plogp, rng, log_)
        for _ in range(refine_rounds):
            # single-node fine tuning starting from the current modules
            lvl = _Level(adj, flow, total2, node_plogp, modules=mods)
            lvl.sweep_until_stable(rng, log_)
            mods2 = _one_trial(adj, flow, total2, node_plogp, rng, log_,
                               init=np.asarray(lvl.mod))
            if np.array_equal(_canon(mods2), _canon(mods)):
                break
            mods = mods2
        L = map_equation(g, mods)
        if best is None or L < best.codelength - 1e-12:
            best = Partition(_canon(mods), L, log_)
    return best


def _canon(modules) -> np.ndarray:
    """Relabel modules densely by order of smallest member index."""
    ids = {}
    out = np.empty(len(modules), dtype=np.int64)
    for i, m in enumerate(np.asarray(modules).tolist()):
        out[i] = ids.setdefault(m, len(ids))
    return out


@dataclass
class PseudoLabels:
    assignment: np.ndarray  # cluster id per sequence, OUTLIER = -1

    @property
    def n_clusters(self) -> int:
        a = self.assignment
        return int(a.max() + 1) if len(a) and a.max() >= 0 else 0

    def members(self, k) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def n_outliers(self) -> int:
        return int(np.sum(self.assignment == OUTLIER))


def densify(assignment) -> np.ndarray:
    """Dense cluster ids ordered by smallest member index; OUTLIER kept."""
    a = np.asarray(assignment)
    ids = {}
    out = np.full(len(a), OUTLIER, dtype=np.int64)
    for i, m in enumerate(a.tolist()):
        if m != OUTLIER:
            out[i] = ids.setdefault(m, len(ids))
    return out


def cluster_embeddings(embeddings, n_neighbors=40, s_up=0.7, seed=0, trials=3,
                       mutual=False) -> tuple[PseudoLabels, Partition]:
    g = prune(knn_graph(embeddings, n_neighbors, mutual=mutual), s_up)
    part = infomap_partition(g, seed=seed, trials=trials)
    return PseudoLabels(densify(part.modules)), part


def compute_centroids(embeddings, labels) -> np.ndarray:
    """Unit-norm mean embedding of each cluster 0..Q-1 (outliers skipped)."""
    a = labels.assignment if isinstance(labels, PseudoLabels) else np.asarray(labels)
    E = np.asarray(embeddings, dtype=np.float64)
    Q = int(a.max() + 1) if len(a) and a.max() >= 0 else 0
    sums = np.zeros((Q, E.shape[1]))
    counts = np.zeros(Q)
    ok = a >= 0
    np.add.at(sums, a[ok], E[ok])
    np.add.at(counts, a[ok], 1)
    if np.any(counts == 0):
        raise DegenerateCentroidError(f"cluster {int(np.flatnonzero(counts == 0)[0])} is empty")
    means = sums / counts[:, None]
    norms = np.linalg.norm(means, axis=1)
    bad = np.flatnonzero(norms < 1e-8)
    if len(bad):
        raise DegenerateCentroidError(f"cluster {int(bad[0])} has a near-zero mean")
    return means / norms[:, None]
