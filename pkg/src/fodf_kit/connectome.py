"""Weighted-graph measures for structural connectomes.

Edge length is ``1 / weight``; a zero weight means no edge. Matrices are
symmetric, non-negative and have a zero diagonal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AsymmetricMatrix,
    DataError,
    DisconnectedGraph,
    IoFailure,
    NegativeWeight,
    ParseError,
    ZeroWeightGraph,
)

__all__ = [
    "Connectome",
    "shortest_path_lengths",
    "characteristic_path_length",
    "global_efficiency",
    "betweenness_centrality",
    "avg_betweenness_centrality",
    "modularity",
    "partition_modularity",
    "connectome_metrics",
    "load_connectome",
    "save_connectome",
]

SYMMETRY_TOL = 1e-9
LOAD_SYMMETRY_TOL = 1e-6
EXACT_MODULARITY_MAX_N = 10
LOUVAIN_RESTARTS = 10
_TIE_RTOL = 1e-12


@dataclass
class Connectome:
    w: np.ndarray
    labels: list | None = field(default=None)

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DataError(f"connectome must be square, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise DataError("connectome contains non-finite weights")
        if np.any(w < 0):
            raise NegativeWeight("connectome weights must be non-negative")
        if np.max(np.abs(w - w.T), initial=0.0) > SYMMETRY_TOL:
            raise AsymmetricMatrix("connectome matrix is not symmetric")
        if np.any(np.diag(w) != 0):
            raise DataError("connectome diagonal must be zero")
        self.w = w
        if self.labels is not None and len(self.labels) != len(w):
            raise DataError(f"{len(self.labels)} labels for {len(w)} nodes")

    @property
    def n(self) -> int:
        return len(self.w)

    def permuted(self, perm) -> "Connectome":
        perm = np.asarray(perm)
        labels = None if self.labels is None else [self.labels[i] for i in perm]
        return Connectome(self.w[np.ix_(perm, perm)], labels)


def _lengths(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(w > 0, 1.0 / np.where(w > 0, w, 1.0), np.inf)


def _dijkstra(length: np.ndarray, s: int):
    """Distances, shortest-path counts, predecessors and settle order from ``s``."""
    n = len(length)
    dist = np.full(n, np.inf)
    sigma = np.zeros(n)
    preds = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    dist[s] = 0.0
    sigma[s] = 1.0
    order = []
    for _ in range(n):
        cand = np.where(done, np.inf, dist)
        u = int(np.argmin(cand))
        if not np.isfinite(cand[u]):
            break
        done[u] = True
        order.append(u)
        for v in np.flatnonzero(np.isfinite(length[u]) & ~done):
            alt = dist[u] + length[u, v]
            tol = _TIE_RTOL * max(1.0, alt)
            if alt < dist[v] - tol:
                dist[v] = alt
                sigma[v] = sigma[u]
                preds[v] = [u]
            elif abs(alt - dist[v]) <= tol:
                sigma[v] += sigma[u]
                preds[v].append(u)
    return dist, sigma, preds, order


def shortest_path_lengths(g: Connectome) -> np.ndarray:
    """All-pairs weighted shortest-path distances (``inf`` when unreachable)."""
    length = _lengths(g.w)
    return np.array([_dijkstra(length, s)[0] for s in range(g.n)]).reshape(g.n, g.n)


def _pairs(g: Connectome) -> np.ndarray:
    return ~np.eye(g.n, dtype=bool)


def characteristic_path_length(g: Connectome) -> float:
    """Mean shortest-path length over ordered node pairs."""
    if g.n < 2:
        raise DataError("path length needs at least two nodes")
    d = shortest_path_lengths(g)[_pairs(g)]
    if not np.all(np.isfinite(d)):
        raise DisconnectedGraph("characteristic path length is undefined on a disconnected graph")
    return float(d.mean())


def global_efficiency(g: Connectome) -> float:
    """Mean inverse shortest-path length over ordered pairs (unreachable pairs give 0)."""
    if g.n < 2:
        raise DataError("global efficiency needs at least two nodes")
    d = shortest_path_lengths(g)[_pairs(g)]
    return float(np.mean(np.where(np.isfinite(d), 1.0 / d, 0.0)))


def betweenness_centrality(g: Connectome, normalized: bool = True) -> np.ndarray:
    """Per-node betweenness by Brandes' accumulation over weighted shortest paths.

    Undirected: each unordered pair counts once. Normalisation divides by
    ``(n-1)(n-2)/2``.
    """
    n = g.n
    length = _lengths(g.w)
    bc = np.zeros(n)
    for s in range(n):
        _, sigma, preds, order = _dijkstra(length, s)
        delta = np.zeros(n)
        for v in reversed(order):
            for u in preds[v]:
                delta[u] += sigma[u] / sigma[v] * (1.0 + delta[v])
            if v != s:
                bc[v] += delta[v]
    bc /= 2.0
    if normalized and n > 2:
        bc /= (n - 1) * (n - 2) / 2.0
    return bc


def avg_betweenness_centrality(g: Connectome) -> float:
    if g.n < 3:
        raise DataError("betweenness needs at least three nodes")
    return float(betweenness_centrality(g).mean())


# ---------------------------------------------------------------- modularity

def partition_modularity(g: Connectome, partition, gamma: float = 1.0) -> float:
    """Newman modularity of a given community assignment (one label per node)."""
    w = g.w
    two_m = w.sum()
    if two_m <= 0:
        raise ZeroWeightGraph("modularity is undefined on a graph without edges")
    labels = np.asarray(partition)
    k = w.sum(axis=1)
    q = 0.0
    for c in np.unique(labels):
        idx = labels == c
        q += w[np.ix_(idx, idx)].sum() / two_m - gamma * (k[idx].sum() / two_m) ** 2
    return float(q)


def _canonical(labels) -> np.ndarray:
    """Relabel communities 0, 1, ... in order of first appearance."""
    out = np.empty(len(labels), dtype=int)
    seen = {}
    for i, c in enumerate(labels):
        out[i] = seen.setdefault(c, len(seen))
    return out


def _exact_modularity(w: np.ndarray, gamma: float):
    """Optimal partition by dynamic programming over node subsets.

    ``best[S] = max over blocks T of S holding S's lowest node of
    q(T) + best[S \\ T]``; O(3^n).
    """
    n = len(w)
    two_m = w.sum()
    k = w.sum(axis=1)
    full = (1 << n) - 1
    bits = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
    inner = np.einsum("si,ij,sj->s", bits, w, bits) if n else np.zeros(1)
    ks = bits @ k
    q = inner / two_m - gamma * (ks / two_m) ** 2
    best = np.full(1 << n, -np.inf)
    choice = np.zeros(1 << n, dtype=np.int64)
    best[0] = 0.0
    for S in range(1, full + 1):
        low = S & -S
        rest = S ^ low
        T = rest
        b, arg = -np.inf, S
        while True:
            block = T | low
            val = q[block] + best[S ^ block]
            if val > b + 1e-15:
                b, arg = val, block
            if T == 0:
                break
            T = (T - 1) & rest
        best[S] = b
        choice[S] = arg
    labels = np.empty(n, dtype=int)
    S, c = full, 0
    while S:
        block = int(choice[S])
        labels[[i for i in range(n) if block >> i & 1]] = c
        S ^= block
        c += 1
    return float(best[full]), labels


def _louvain_once(w: np.ndarray, gamma: float, rng) -> np.ndarray:
    n0 = len(w)
    node_comm = np.arange(n0)
    A = w.copy()
    two_m = w.sum()
    while True:
        n = len(A)
        k = A.sum(axis=1)
        comm = np.arange(n)
        tot = k.copy()
        moved_any = False
        improved = True
        while improved:
            improved = False
            for i in rng.permutation(n):
                ci = comm[i]
                links = np.bincount(comm, weights=A[i], minlength=n)
                links[ci] -= A[i, i]
                tot[ci] -= k[i]
                gains = links - gamma * tot * k[i] / two_m
                neighbours = np.unique(comm[A[i] > 0])
                cands = np.union1d(neighbours, [ci])
                g_best = gains[cands].max()
                ties = cands[np.isclose(gains[cands], g_best, rtol=0, atol=1e-14)]
                target = ci if ci in ties else ties[rng.integers(len(ties))]
                if gains[target] > gains[ci] + 1e-14 and target != ci:
                    comm[i] = target
                    improved = moved_any = True
                tot[comm[i]] += k[i]
        if not moved_any:
            return _canonical(node_comm)
        comm = _canonical(comm)
        node_comm = comm[node_comm]
        m = comm.max() + 1
        P = np.zeros((n, m))
        P[np.arange(n), comm] = 1.0
        A = P.T @ A @ P


def modularity(g: Connectome, gamma: float = 1.0, seed: int = 0,
               restarts: int = LOUVAIN_RESTARTS) -> tuple[float, np.ndarray]:
    """Best Newman modularity ``Q`` and its partition.

    Graphs of up to :data:`EXACT_MODULARITY_MAX_N` nodes are solved exactly;
    larger ones take the best of ``restarts`` seeded Louvain runs.
    """
    w = g.w
    if w.sum() <= 0:
        raise ZeroWeightGraph("modularity is undefined on a graph without edges")
    if g.n <= EXACT_MODULARITY_MAX_N:
        q, labels = _exact_modularity(w, gamma)
        return q, _canonical(labels)
    best_q, best_labels = -np.inf, None
    for r in range(restarts):
        labels = _louvain_once(w, gamma, np.random.default_rng([seed, r]))
        q = partition_modularity(g, labels, gamma)
        if q > best_q + 1e-15:
            best_q, best_labels = q, labels
    return float(best_q), best_labels


def connectome_metrics(g: Connectome, gamma: float = 1.0, seed: int = 0) -> dict:
    """The four summary measures, keyed as in the metrics JSON."""
    q, _ = modularity(g, gamma, seed)
    return {
        "modularity": q,
        "avg_betweenness": avg_betweenness_centrality(g),
        "char_path_length": characteristic_path_length(g),
        "global_efficiency": global_efficiency(g),
    }


# ---------------------------------------------------------------- I/O

def _from_matrix(m, labels=None) -> Connectome:
    w = np.asarray(m, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ParseError(f"connectome matrix must be square, got {w.shape}")
    if np.any(w < 0):
        raise NegativeWeight("connectome weights must be non-negative")
    asym = np.max(np.abs(w - w.T), initial=0.0)
    if asym > LOAD_SYMMETRY_TOL:
        raise AsymmetricMatrix(f"max asymmetry {asym:.3g} exceeds {LOAD_SYMMETRY_TOL}")
    return Connectome((w + w.T) / 2.0, labels)


def load_connectome(path) -> Connectome:
    """Read a CSV (comma or whitespace separated) or JSON connectome.

    JSON is either a bare matrix or ``{"weights": [[...]], "labels": [...]}``.
    Asymmetry up to 1e-6 is averaged away.
    """
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if p.suffix.lower() == ".json":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{p}: {exc}") from exc
        if isinstance(obj, dict):
            return _from_matrix(obj.get("weights"), obj.get("labels"))
        return _from_matrix(obj)
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(v) for v in line.replace(",", " ").split()])
        except ValueError as exc:
            raise ParseError(f"{p}: {exc}") from exc
    if len({len(r) for r in rows}) > 1:
        raise ParseError(f"{p}: ragged rows")
    return _from_matrix(np.array(rows).reshape(len(rows), -1))


def save_connectome(g: Connectome, path) -> None:
    p = Path(path)
    try:
        if p.suffix.lower() == ".json":
            obj = {"weights": [[float(v) for v in row] for row in g.w]}
            if g.labels is not None:
                obj["labels"] = list(g.labels)
            p.write_text(json.dumps(obj) + "\n")
        else:
            p.write_text("".join(",".join(repr(float(v)) for v in row) + "\n" for row in g.w))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
