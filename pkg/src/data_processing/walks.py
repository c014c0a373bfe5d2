# This file is part of the UrbanVerse tool

# src/data_processing/walks.py
"""
Cell graph and node2vec-style second-order random walks over it.

A walk sequence for root c is [c, w1_1..w1_l, w2_1..w2_l, ..., wk_1..wk_l]:
the root token followed by k independent walks of l steps, each starting
at the root (the root itself is not repeated inside the walks).
"""
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import networkx as nx
import numpy as np

from common.errors import ConfigError, DataError
from urban_models.numerics import Rng

logger = logging.getLogger(__name__)


def create_alias_table(probs):
    """Vose alias table for O(1) sampling from a discrete distribution"""
    n = len(probs)
    accept = np.asarray(probs, dtype=float) * n
    alias = np.zeros(n, dtype=np.int64)
    small = [i for i, v in enumerate(accept) if v < 1.0]
    large = [i for i, v in enumerate(accept) if v >= 1.0]
    while small and large:
        s, g = small.pop(), large.pop()
        alias[s] = g
        accept[g] = accept[g] + accept[s] - 1.0
        (small if accept[g] < 1.0 else large).append(g)
    for i in small + large:
        accept[i] = 1.0
    return accept, alias


def alias_sample(accept, alias, rng):
    i = int(rng.np.random() * len(accept))
    i = min(i, len(accept) - 1)
    return i if rng.np.random() < accept[i] else int(alias[i])


class CellGraph:
    """
    Class to store the grid graph G = (V, E, A) of one study area
    """

    def __init__(self, cells, name="city"):
        self.name = name
        self.graph = nx.Graph()
        self.graph.add_nodes_from(range(len(cells)))
        for a, b in cells.edges():
            if a != b:
                self.graph.add_edge(a, b)
        self._neighbors = [sorted(self.graph.neighbors(i)) for i in range(len(cells))]
        self._alias_edges = {}
        self._lock = threading.Lock()
        self.dead_end_roots = 0

    @property
    def n(self):
        return self.graph.number_of_nodes()

    def neighbors(self, node):
        return self._neighbors[node]

    def adjacency_matrix(self):
        return nx.to_numpy_array(self.graph, nodelist=range(self.n), dtype=np.int64)

    def transition_probs(self, prev, cur, p, q):
        """Normalized node2vec weights over neighbors(cur) after arriving from prev"""
        weights = []
        for x in self._neighbors[cur]:
            if x == prev:
                weights.append(1.0 / p)
            elif self.graph.has_edge(x, prev):
                weights.append(1.0)
            else:
                weights.append(1.0 / q)
        weights = np.asarray(weights)
        return weights / weights.sum()

    def alias_edge(self, prev, cur, p, q):
        key = (prev, cur, p, q)
        table = self._alias_edges.get(key)
        if table is None:
            table = create_alias_table(self.transition_probs(prev, cur, p, q))
            self._alias_edges[key] = table
        return table

    def note_dead_end(self, root):
        with self._lock:
            self.dead_end_roots += 1
        logger.warning(f"{self.name}: cell {root} has no neighbours, walk filled with root repeats")

    def __str__(self):
        return f"CellGraph {self.name} with {self.n} nodes and {self.graph.number_of_edges()} edges"


@dataclass
class WalkSequence:
    root: int
    nodes: list

    def to_json(self):
        return json.dumps({"root": int(self.root), "nodes": [int(n) for n in self.nodes]})


@dataclass
class FeatureSequence:
    root: int
    matrix: np.ndarray  # (k*l+1, 15)


def _check_walk_params(k, l, p, q):
    if k < 1 or l < 1:
        raise ConfigError(f"walk count k and length l must be >= 1, got k={k}, l={l}")
    if p <= 0 or q <= 0:
        raise ConfigError(f"node2vec p and q must be positive, got p={p}, q={q}")


def sample_walks(graph, root, k, l, p, q, rng):
    """k second-order walks of l steps from root, concatenated after the root token"""
    _check_walk_params(k, l, p, q)
    if not 0 <= root < graph.n:
        raise DataError(f"unknown root cell {root}")
    if not graph.neighbors(root):
        graph.note_dead_end(root)
        return WalkSequence(root=root, nodes=[root] * (k * l + 1))

    nodes = [root]
    for _ in range(k):
        prev, cur = None, root
        for _ in range(l):
            nbrs = graph.neighbors(cur)
            if prev is None:
                nxt = nbrs[int(rng.integers(0, len(nbrs)))]
            else:
                accept, alias = graph.alias_edge(prev, cur, p, q)
                nxt = nbrs[alias_sample(accept, alias, rng)]
            nodes.append(nxt)
            prev, cur = cur, nxt
    return WalkSequence(root=root, nodes=nodes)


def sample_corpus_walks(graph, k, l, p, q, seed, epoch=0, roots=None, threads=1):
    """One walk sequence per root, each from its own (seed, city, root, epoch) substream"""
    roots = range(graph.n) if roots is None else roots

    def walk(root):
        return sample_walks(graph, root, k, l, p, q, Rng(seed, ("walks", graph.name, root, epoch)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(walk, roots))
    return [walk(root) for root in roots]


def build_feature_sequence(seq, cells):
    """S[j] = poi vector of nodes[j]"""
    n = len(cells)
    for node in seq.nodes:
        if not 0 <= node < n:
            raise DataError(f"walk from root {seq.root} references unknown cell {node}")
    poi = cells.poi_matrix().astype(float)
    return FeatureSequence(root=seq.root, matrix=poi[np.asarray(seq.nodes, dtype=np.int64)])


def feature_batch(walks, poi_matrix):
    """Stack walk sequences into an (n, k*l+1, 15) float array"""
    index = np.asarray([w.nodes for w in walks], dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= len(poi_matrix)):
        raise DataError("walk references a cell outside the POI matrix")
    return np.asarray(poi_matrix, dtype=float)[index]


def dump_walks_jsonl(walks, path):
    with open(path, "w") as f:
        for w in walks:
            f.write(w.to_json() + "\n")
    logger.info(f"Wrote {len(walks)} walks to {path}")


def load_walks_jsonl(path):
    walks = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                walks.append(WalkSequence(root=int(record["root"]), nodes=[int(n) for n in record["nodes"]]))
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"malformed walk record ({e})", path=path, line=line_no) from None
    return walks
