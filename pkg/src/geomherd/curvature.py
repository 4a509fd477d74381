"""Ollivier-Ricci curvature on agent graphs and its sign-decomposed summaries.

Edge length equals edge weight, so high-agreement edges are long in the
ground metric used by W1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .agent_graph import AgentGraphSnapshot
from .io import write_csv
from .transport import reduced_cost, sinkhorn_w1, w1_metric

KAPPA_PLUS = 0.1
KAPPA_MINUS = -0.1
DIJKSTRA_CROSSOVER = 10_000


@dataclass
class LazyKernel:
    center: int
    support: np.ndarray
    mass: np.ndarray

    def as_dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.support] = self.mass
        return out


@dataclass
class EdgeCurvature:
    edge: tuple[int, int]
    kappa: float
    w1: float
    dist: float

    @property
    def defined(self) -> bool:
        return bool(np.isfinite(self.kappa))


@dataclass
class CurvatureSummary:
    t: int
    mean_all: float
    mean_pos: float
    frac_neg: float
    n_edges: int
    n_pos: int
    n_zero: int
    n_neg: int
    n_undefined: int = 0
    degenerate: bool = False

    @classmethod
    def missing(cls, t: int, n_edges: int = 0, n_undefined: int = 0) -> "CurvatureSummary":
        nan = float("nan")
        return cls(t, nan, nan, nan, n_edges, 0, 0, 0, n_undefined, True)


@dataclass(frozen=True)
class CurvatureConfig:
    alpha: float = 0.5
    kappa_plus: float = KAPPA_PLUS
    kappa_minus: float = KAPPA_MINUS
    transport: str = "exact"
    reg: float = 0.01
    certify: bool = True

    def validate(self) -> None:
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if self.kappa_minus > self.kappa_plus:
            raise ValueError("kappa_minus must not exceed kappa_plus")
        if self.transport not in ("exact", "sinkhorn"):
            raise ValueError("transport must be 'exact' or 'sinkhorn'")
        if self.reg <= 0:
            raise ValueError("reg must be positive")


# ---------------------------------------------------------------- kernels


def lazy_kernel(graph: AgentGraphSnapshot, node: int, alpha: float = 0.5) -> LazyKernel:
    """Lazy random-walk kernel at ``node``: mass ``alpha`` stays put."""
    nb = graph.neighbors(node)
    if not nb:
        raise ValueError(f"node {node} is isolated")
    ids = np.array(sorted(nb), dtype=np.int64)
    w = np.array([nb[k] for k in ids])
    mass = np.concatenate([[alpha], (1 - alpha) * w / w.sum()])
    return LazyKernel(int(node), np.concatenate([[int(node)], ids]), mass)


def kernel_matrix(W: np.ndarray, alpha: float) -> np.ndarray:
    """Row ``i`` is the lazy kernel at ``i`` (zero rows for isolated nodes)."""
    deg = W.sum(axis=1)
    K = np.zeros_like(W)
    nz = deg > 0
    K[nz] = (1 - alpha) * W[nz] / deg[nz, None]
    K[np.flatnonzero(nz), np.flatnonzero(nz)] = alpha
    return K


# ---------------------------------------------------------------- metric


class DistanceTable:
    """Shortest-path distances from a set of source nodes."""

    def __init__(self, sources: np.ndarray, rows: np.ndarray, n: int):
        self.sources = np.asarray(sources, dtype=np.int64)
        self.rows = rows
        self.n = n
        self._pos = np.full(n, -1, dtype=np.int64)
        self._pos[self.sources] = np.arange(self.sources.size)

    def __call__(self, u, v) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=np.int64))
        v = np.atleast_1d(np.asarray(v, dtype=np.int64))
        p = self._pos[u]
        if np.any(p < 0):
            raise KeyError("distance requested from a node that is not a source")
        return self.rows[np.ix_(p, v)]

    def dist(self, u: int, v: int) -> float:
        return float(self(u, v)[0, 0])


def _csr(graph: AgentGraphSnapshot, weight: np.ndarray | None = None) -> csr_matrix:
    w = graph.weight if weight is None else weight
    return csr_matrix((w, (graph.src, graph.dst)), shape=(graph.n, graph.n))


def shortest_path_metric(graph: AgentGraphSnapshot, sources=None) -> DistanceTable:
    """Dijkstra distances with edge length equal to edge weight.

    ``sources`` restricts the rows computed (default: all non-isolated
    nodes). Unreachable pairs are ``inf``.
    """
    if graph.n_edges == 0:
        raise ValueError("graph has no edges")
    if sources is None:
        sources = np.flatnonzero(graph.degree() > 0)
    sources = np.unique(np.asarray(sources, dtype=np.int64))
    rows = dijkstra(_csr(graph), directed=False, indices=sources)
    return DistanceTable(sources, np.atleast_2d(rows), graph.n)


# ---------------------------------------------------------------- W1 / curvature


def wasserstein1(mu: LazyKernel, nu: LazyKernel, metric: DistanceTable, check: bool = True) -> float:
    """Exact W1 between two kernels under ``metric``."""
    support = np.union1d(mu.support, nu.support)
    a = np.zeros(support.size)
    b = np.zeros(support.size)
    a[np.searchsorted(support, mu.support)] = mu.mass
    b[np.searchsorted(support, nu.support)] = nu.mass
    D = _support_metric(metric, support, a, b)
    return w1_metric(a, b, D, check=check)


def _support_metric(metric: DistanceTable, support, a, b) -> np.ndarray:
    rows = support if np.all(metric._pos[support] >= 0) else None
    if rows is None:
        raise KeyError("metric does not cover the kernel supports")
    D = metric(support, support)
    # only pairs that carry mass need finite cost
    if not np.all(np.isfinite(D[np.ix_(a > 0, b > 0)])):
        raise ValueError("kernel supports are mutually unreachable")
    return np.where(np.isfinite(D), D, 0.0)


def kernel_sinkhorn(mu: LazyKernel, nu: LazyKernel, metric: DistanceTable, reg: float, **kw) -> float:
    support = np.union1d(mu.support, nu.support)
    a = np.zeros(support.size)
    b = np.zeros(support.size)
    a[np.searchsorted(support, mu.support)] = mu.mass
    b[np.searchsorted(support, nu.support)] = nu.mass
    D = _support_metric(metric, support, a, b)
    return sinkhorn_w1(a, b, D, reg, **kw)


def edge_curvature(graph: AgentGraphSnapshot, edge: tuple[int, int], alpha: float = 0.5,
                   metric: DistanceTable | None = None, transport: str = "exact",
                   reg: float = 0.01, check: bool = True) -> EdgeCurvature:
    """``kappa = 1 - W1(mu_i, mu_j) / d(i, j)`` for one edge.

    Returns NaN curvature when the distance is zero or undefined.
    """
    i, j = int(edge[0]), int(edge[1])
    mu = lazy_kernel(graph, i, alpha)
    nu = lazy_kernel(graph, j, alpha)
    if metric is None:
        metric = shortest_path_metric(graph, np.union1d(mu.support, nu.support))
    d = metric.dist(i, j)
    if not (np.isfinite(d) and d > 0):
        return EdgeCurvature((i, j), float("nan"), float("nan"), d)
    try:
        if transport == "exact":
            w1 = wasserstein1(mu, nu, metric, check=check)
        else:
            w1 = kernel_sinkhorn(mu, nu, metric, reg)
    except ValueError:
        return EdgeCurvature((i, j), float("nan"), float("nan"), d)
    return EdgeCurvature((i, j), 1.0 - w1 / d, w1, d)


def twin_classes(W: np.ndarray) -> np.ndarray:
    """Representative node for each class of structurally equivalent nodes.

    Nodes ``u`` and ``v`` are twins when ``W[u, k] == W[v, k]`` for every
    ``k`` outside ``{u, v}``. Swapping twins is a graph automorphism, so
    edges mapped onto each other by twin swaps share their curvature.
    """
    n = W.shape[0]
    rep = np.arange(n)
    key = np.sort(W, axis=1)
    groups: dict[bytes, list[int]] = {}
    for u in range(n):
        groups.setdefault(key[u].tobytes(), []).append(u)
    for members in groups.values():
        if len(members) < 2:
            continue
        for a_idx, u in enumerate(members):
            if rep[u] != u:
                continue
            for v in members[a_idx + 1:]:
                if rep[v] != v:
                    continue
                mask = np.ones(n, dtype=bool)
                mask[[u, v]] = False
                if np.array_equal(W[u, mask], W[v, mask]):
                    rep[v] = u
    return rep


def edge_curvatures(graph: AgentGraphSnapshot, alpha: float = 0.5, transport: str = "exact",
                    reg: float = 0.01, check: bool = True, weight: np.ndarray | None = None) -> np.ndarray:
    """Curvature of every edge of ``graph`` (aligned with ``graph.src``).

    ``weight`` overrides the stored edge weights (used by the flow).
    Undefined edges are NaN. Edges related by twin swaps are solved once.
    """
    m = graph.n_edges
    if m == 0:
        return np.zeros(0)
    n = graph.n
    w = graph.weight if weight is None else np.asarray(weight, dtype=float)
    W = np.zeros((n, n))
    W[graph.src, graph.dst] = w
    W[graph.dst, graph.src] = w
    K = kernel_matrix(W, alpha)
    active = np.flatnonzero(W.sum(axis=1) > 0)
    csr = csr_matrix((w, (graph.src, graph.dst)), shape=(n, n))
    rep = twin_classes(W)

    mean_support = 2.0 * m / active.size + 1.0
    if m * mean_support > DIJKSTRA_CROSSOVER:
        D = np.full((n, n), np.inf)
        D[active] = dijkstra(csr, directed=False, indices=active)
        have = np.zeros(n, dtype=bool)
        have[active] = True
    else:
        D = np.full((n, n), np.inf)
        have = np.zeros(n, dtype=bool)

    def dist(u, v):
        u = np.atleast_1d(u)
        need = u[~have[u]]
        if need.size:
            D[need] = dijkstra(csr, directed=False, indices=need)
            have[need] = True
        return D[np.ix_(u, np.atleast_1d(v))]

    kappa = np.full(m, np.nan)
    solved: dict[tuple[int, int], float] = {}
    for e in range(m):
        i, j = int(graph.src[e]), int(graph.dst[e])
        ri, rj = int(rep[i]), int(rep[j])
        key = (ri, rj) if ri <= rj else (rj, ri)
        if key in solved:
            kappa[e] = solved[key]
            continue
        kappa[e] = solved[key] = _one_edge(i, j, K, dist, transport, reg, check)
    return kappa


def _one_edge(i, j, K, dist, transport, reg, check) -> float:
    d = float(dist(i, j)[0, 0])
    if not (np.isfinite(d) and d > 0):
        return float("nan")
    if transport == "exact":
        diff = K[i] - K[j]
        pos = np.flatnonzero(diff > 1e-15)
        neg = np.flatnonzero(diff < -1e-15)
        if pos.size == 0 or neg.size == 0:
            return 1.0
        C = dist(pos, neg)
        if not np.all(np.isfinite(C)):
            return float("nan")
        a, b = diff[pos], -diff[neg]
        w1 = reduced_cost(a, b * (a.sum() / b.sum()), C, check=check)
    else:
        supp = np.flatnonzero((K[i] > 0) | (K[j] > 0))
        C = dist(supp, supp)
        if not np.all(np.isfinite(C)):
            return float("nan")
        w1 = sinkhorn_w1(K[i, supp], K[j, supp], C, reg)
    return 1.0 - w1 / d


# ---------------------------------------------------------------- summaries


def summarize(t: int, kappas, kappa_plus: float = KAPPA_PLUS, kappa_minus: float = KAPPA_MINUS,
              degenerate: bool = False) -> CurvatureSummary:
    """Sign-decomposed summary with strict thresholds; NaN edges are excluded."""
    k = np.asarray(kappas, dtype=float)
    n_total = k.size
    defined = k[np.isfinite(k)]
    n_undef = n_total - defined.size
    if degenerate or defined.size == 0:
        return CurvatureSummary.missing(t, n_total, n_undef)
    pos = defined[defined > kappa_plus]
    neg = defined[defined < kappa_minus]
    n_zero = defined.size - pos.size - neg.size
    return CurvatureSummary(
        t=t,
        mean_all=float(defined.mean()),
        mean_pos=float(pos.mean()) if pos.size else float("nan"),
        frac_neg=neg.size / defined.size,
        n_edges=int(defined.size),
        n_pos=int(pos.size),
        n_zero=int(n_zero),
        n_neg=int(neg.size),
        n_undefined=int(n_undef),
        degenerate=False,
    )


def snapshot_summary(graph: AgentGraphSnapshot, config: CurvatureConfig = CurvatureConfig()) -> CurvatureSummary:
    if graph.degenerate or graph.n_edges == 0:
        return CurvatureSummary.missing(graph.t)
    k = edge_curvatures(graph, config.alpha, config.transport, config.reg, config.certify)
    return summarize(graph.t, k, config.kappa_plus, config.kappa_minus)


SERIES_COLUMNS = ["t", "mean_all", "mean_pos", "frac_neg", "n_edges", "n_pos", "n_zero", "n_neg",
                  "n_undefined", "degenerate"]


def write_series(path: str | Path, summaries: Sequence[CurvatureSummary], extra: dict | None = None) -> Path:
    """Write the curvature series CSV; ``extra`` maps column name to per-row values."""
    extra = extra or {}
    header = SERIES_COLUMNS + list(extra)
    rows = []
    for r, s in enumerate(summaries):
        row = [getattr(s, c) for c in SERIES_COLUMNS] + [extra[c][r] for c in extra]
        rows.append(row)
    return write_csv(path, header, rows)


def read_series(path: str | Path) -> dict[str, np.ndarray]:
    """Read a series CSV into float columns (empty cells become NaN)."""
    with open(path) as fh:
        reader = csv.DictReader(fh)
        cols: dict[str, list] = {k: [] for k in reader.fieldnames or []}
        for row in reader:
            for k, v in row.items():
                cols[k].append(float(v) if v != "" else np.nan)
    return {k: np.asarray(v, dtype=float) for k, v in cols.items()}
