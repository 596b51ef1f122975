"""Exact finite metrics: construction, closure, MST, incremental reveal.

A `MetricInstance` is a complete metric over vertices 0..n-1 with exact
Fraction distances; vertex 0 is always the broadcast root.  Instances come
from three constructors (the closure of a positively-weighted graph, grid-
rounded Euclidean point sets, or an explicit matrix) and can grow via
`reveal_vertices`, which re-validates the metric axioms on the new triples.

A float64 mirror of the matrix is kept alongside the exact one.  It is used
strictly as a conservative pre-filter (see `float_margin`): any comparison the
mirror cannot settle by more than the margin is re-done with Fractions, and
nothing is ever decided by floats alone.
"""

from __future__ import annotations

import heapq
from fractions import Fraction

import numpy as np

from .errors import ConfigError, MetricError
from .rationals import format_rational, parse_rational, sqrt_ceil_grid

ROOT = 0

#: Relative slack under which float comparisons defer to exact arithmetic.
#: Path-length sums here accumulate well under 1e-12 relative error, so 1e-9
#: leaves three orders of magnitude of headroom.
MARGIN_REL = 1e-9

EUCLIDEAN_GRID = 10**6


class MetricInstance:
    """Immutable complete metric over vertices 0..n-1 (0 is the root)."""

    __slots__ = ("n", "kind", "meta", "_cost", "_costf", "float_margin")

    def __init__(self, cost_rows, kind, meta, *, _validated=False):
        self.n = len(cost_rows)
        self.kind = kind
        self.meta = meta
        self._cost = cost_rows
        self._costf = np.array([[float(c) for c in row] for row in cost_rows], dtype=np.float64)
        scale = float(self._costf.max()) if self.n > 1 else 1.0
        self.float_margin = MARGIN_REL * max(1.0, scale)
        if not _validated:
            _check_metric(cost_rows, self._costf, self.float_margin)

    def cost(self, u, v) -> Fraction:
        return self._cost[u][v]

    @property
    def costf(self) -> np.ndarray:
        """Float mirror of the distance matrix. Pre-filtering only."""
        return self._costf

    def vertices(self):
        return range(self.n)

    def __repr__(self):
        return f"MetricInstance(n={self.n}, kind={self.kind!r})"


def _check_metric(rows, costf, margin):
    n = len(rows)
    for i in range(n):
        if len(rows[i]) != n:
            raise MetricError(f"row {i} has length {len(rows[i])}, expected {n}")
        if rows[i][i] != 0:
            raise MetricError(f"nonzero self-distance at vertex {i}")
        for j in range(i + 1, n):
            if rows[i][j] != rows[j][i]:
                raise MetricError(f"asymmetric distance between {i} and {j}")
            if rows[i][j] <= 0:
                raise MetricError(f"non-positive distance between {i} and {j}")
    _check_triangle(rows, costf, margin)


def _check_triangle(rows, costf, margin, new_from=0):
    """Verify d(i,j) <= d(i,k) + d(k,j) for all triples touching i >= new_from.

    The float mirror rules out the overwhelming majority of triples; anything
    within the margin is confirmed exactly.
    """
    n = len(rows)
    if n < 3:
        return
    for k in range(n):
        # slack[i, j] = d(i,k) + d(k,j) - d(i,j); suspicious when < margin
        slack = costf[:, k][:, None] + costf[k, :][None, :] - costf
        sus = np.argwhere(slack < margin)
        for i, j in sus:
            i, j = int(i), int(j)
            if i == k or j == k or i == j:
                continue
            if max(i, j, k) < new_from:
                continue  # old triple, validated earlier
            if rows[i][j] > rows[i][k] + rows[k][j]:
                raise MetricError(
                    f"triangle inequality fails: d({i},{j}) > d({i},{k}) + d({k},{j})"
                )


def metric_closure(n, weighted_edges) -> MetricInstance:
    """Shortest-path closure of a connected, positively weighted graph.

    `weighted_edges` is an iterable of (u, v, cost) with exact Fractions.
    The closure is computed with exact Dijkstra (Fractions order fine in a
    heap), so the result is a metric by construction and skips re-validation.
    """
    adj = [[] for _ in range(n)]
    edges = []
    for u, v, c in weighted_edges:
        c = Fraction(c)
        if not (0 <= u < n and 0 <= v < n):
            raise ConfigError(f"edge ({u},{v}) out of range for n={n}")
        if u == v:
            raise ConfigError(f"self-loop at vertex {u}")
        if c <= 0:
            raise ConfigError(f"edge ({u},{v}) has non-positive cost {c}")
        adj[u].append((v, c))
        adj[v].append((u, c))
        edges.append((u, v, c))

    rows = []
    for src in range(n):
        dist = {src: Fraction(0)}
        done = [False] * n
        heap = [(Fraction(0), src)]
        while heap:
            d, x = heapq.heappop(heap)
            if done[x]:
                continue
            done[x] = True
            for y, c in adj[x]:
                nd = d + c
                if y not in dist or nd < dist[y]:
                    dist[y] = nd
                    heapq.heappush(heap, (nd, y))
        if len(dist) != n:
            raise MetricError("weighted graph is disconnected; closure undefined")
        rows.append([dist[v] for v in range(n)])

    meta = {"edges": [[u, v, format_rational(c)] for u, v, c in edges]}
    return MetricInstance(rows, "weighted-graph", meta, _validated=True)


def euclidean_instance(points) -> MetricInstance:
    """Metric over 2-D rational points, distances ceiling-rounded to 1/10^6.

    Rounding *up* preserves the triangle inequality exactly (see
    sqrt_ceil_grid), so no re-validation pass is needed.  Duplicate points
    would create zero distances and are rejected.
    """
    pts = [(Fraction(x), Fraction(y)) for x, y in points]
    if len(set(pts)) != len(pts):
        raise MetricError("duplicate points produce zero distances")
    n = len(pts)
    rows = [[Fraction(0)] * n for _ in range(n)]
    for i in range(n):
        xi, yi = pts[i]
        for j in range(i + 1, n):
            dx = xi - pts[j][0]
            dy = yi - pts[j][1]
            d = sqrt_ceil_grid(dx * dx + dy * dy, EUCLIDEAN_GRID)
            rows[i][j] = rows[j][i] = d
    meta = {"points": [[format_rational(x), format_rational(y)] for x, y in pts]}
    return MetricInstance(rows, "euclidean", meta, _validated=True)


def explicit_metric(n, pair_costs) -> MetricInstance:
    """Metric from explicit pairwise costs {(u, v): Fraction} (u < v).

    Fully validated: symmetry comes from the keying, positivity and the
    triangle inequality are checked.
    """
    rows = [[Fraction(0)] * n for _ in range(n)]
    seen = set()
    for (u, v), c in pair_costs.items():
        a, b = (u, v) if u < v else (v, u)
        if not (0 <= a < b < n):
            raise ConfigError(f"bad vertex pair ({u},{v}) for n={n}")
        if (a, b) in seen:
            raise ConfigError(f"duplicate cost for pair ({a},{b})")
        seen.add((a, b))
        rows[a][b] = rows[b][a] = Fraction(c)
    if len(seen) != n * (n - 1) // 2:
        raise ConfigError("explicit metric must specify every vertex pair")
    meta = {
        "costs": [[a, b, format_rational(rows[a][b])] for a in range(n) for b in range(a + 1, n)]
    }
    return MetricInstance(rows, "metric", meta)


def reveal_vertices(instance, new_vertices, new_costs) -> MetricInstance:
    """Extend an instance with newly revealed vertices.

    `new_vertices` must continue the dense id sequence (n, n+1, ...);
    `new_costs` maps vertex pairs (either order) to exact costs and must cover
    every pair involving a new vertex.  The triangle inequality is re-verified
    over all triples that touch a new vertex.
    """
    old_n = instance.n
    expected = list(range(old_n, old_n + len(new_vertices)))
    if list(new_vertices) != expected:
        raise ConfigError(
            f"new vertices must be {expected} (dense ids), got {list(new_vertices)}"
        )
    n = old_n + len(expected)

    lookup = {}
    for (u, v), c in new_costs.items():
        a, b = (u, v) if u < v else (v, u)
        lookup[(a, b)] = Fraction(c)

    rows = [list(instance._cost[i]) + [None] * len(expected) for i in range(old_n)]
    rows += [[None] * n for _ in expected]
    for v in expected:
        rows[v][v] = Fraction(0)
        for u in range(n):
            if u == v or rows[u][v] is not None:
                continue
            key = (u, v) if u < v else (v, u)
            if key not in lookup:
                raise ConfigError(f"missing cost for revealed pair {key}")
            c = lookup[key]
            if c <= 0:
                raise MetricError(f"non-positive distance between {u} and {v}")
            rows[u][v] = rows[v][u] = c

    out = MetricInstance(rows, instance.kind, dict(instance.meta), _validated=True)
    _check_triangle(rows, out.costf, out.float_margin, new_from=old_n)
    return out


def mst_cost(instance, vertex_subset) -> Fraction:
    """Exact minimum spanning tree cost over a subset of vertices (Prim)."""
    nodes = sorted(set(vertex_subset))
    if any(not 0 <= v < instance.n for v in nodes):
        raise ConfigError(f"subset {nodes} out of range for n={instance.n}")
    if len(nodes) <= 1:
        return Fraction(0)
    cost = instance._cost
    in_tree = {nodes[0]}
    best = {v: cost[nodes[0]][v] for v in nodes[1:]}
    total = Fraction(0)
    while best:
        v = min(best, key=lambda x: (best[x], x))
        total += best.pop(v)
        in_tree.add(v)
        row = cost[v]
        for u in best:
            if row[u] < best[u]:
                best[u] = row[u]
    return total


def min_max_positive_distance(instance, subset=None):
    """(min, max) over positive pairwise distances of a vertex subset.

    Float argext plus exact confirmation of everything inside the margin.
    Returns (None, None) for fewer than two vertices.
    """
    nodes = sorted(set(subset)) if subset is not None else list(range(instance.n))
    if len(nodes) < 2:
        return None, None
    sub = instance._costf[np.ix_(nodes, nodes)]
    iu = np.triu_indices(len(nodes), k=1)
    vals = sub[iu]
    margin = instance.float_margin
    lo_f, hi_f = vals.min(), vals.max()
    lo_candidates = np.nonzero(vals <= lo_f + margin)[0]
    hi_candidates = np.nonzero(vals >= hi_f - margin)[0]
    cost = instance._cost
    pairs = [(nodes[iu[0][k]], nodes[iu[1][k]]) for k in lo_candidates]
    lo = min(cost[a][b] for a, b in pairs)
    pairs = [(nodes[iu[0][k]], nodes[iu[1][k]]) for k in hi_candidates]
    hi = max(cost[a][b] for a, b in pairs)
    return lo, hi


# ---------------------------------------------------------------------------
# serialization

def instance_to_dict(instance) -> dict:
    out = {"kind": instance.kind, "n": instance.n}
    out.update(instance.meta)
    return out


def instance_from_dict(data) -> MetricInstance:
    try:
        kind = data["kind"]
    except (KeyError, TypeError):
        raise ConfigError("instance object needs a 'kind' field") from None
    if kind == "euclidean":
        pts = [(parse_rational(x), parse_rational(y)) for x, y in data["points"]]
        return euclidean_instance(pts)
    if kind == "weighted-graph":
        edges = [(int(u), int(v), parse_rational(c)) for u, v, c in data["edges"]]
        return metric_closure(int(data["n"]), edges)
    if kind == "metric":
        pairs = {(int(u), int(v)): parse_rational(c) for u, v, c in data["costs"]}
        return explicit_metric(int(data["n"]), pairs)
    raise ConfigError(f"unknown instance kind {kind!r}")
