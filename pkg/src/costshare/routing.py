"""Routing states, shared costs, best responses, and tree-follow moves.

A `RoutingState` is a value: every operation returns a new state and never
mutates its input.  The state stores, for each active terminal vertex, how
many agents sit there and the single root-terminated path they all use, plus
the per-edge user counts implied by those paths.

Cost sharing is Shapley: an edge of cost c used by N agents costs c/N to each.
Best responses minimize (shared cost, number of fresh edges, vertex-id
sequence) lexicographically, where a fresh edge is one no *other* agent uses.

Everything that decides anything runs on exact Fractions.  float64 mirrors
(`instance.costf`, the A/B prefix arrays) only discard candidates that lose by
more than the instance's float margin; whatever survives the screen is settled
exactly.  Comments below mark each such screen with its soundness argument.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import EngineInvariantError
from .metric import ROOT, MetricInstance
from .rationals import harmonic

Edge = tuple[int, int]
Path = tuple[int, ...]


def edge_key(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


def path_edges(path):
    return [edge_key(a, b) for a, b in zip(path, path[1:])]


@dataclass(frozen=True)
class RoutingState:
    """Immutable snapshot of who routes where.

    counts: active terminal vertex -> number of co-located agents (> 0)
    paths:  active terminal vertex -> its path to the root (shared by all its
            agents), a tuple starting at the terminal and ending at 0
    usage:  undirected edge -> total agents whose path uses it (> 0 entries only)
    revealed: vertices visible to searches, in revelation order (0 first)
    """

    instance: MetricInstance
    revealed: tuple[int, ...]
    counts: dict
    paths: dict
    usage: dict
    last_mover: Optional[int] = None

    def is_active(self, v) -> bool:
        return v in self.counts

    def on_tree(self, v) -> bool:
        if v == ROOT:
            return bool(self.paths)
        return any(v in p for p in self.paths.values())


@dataclass(frozen=True)
class BestResponse:
    path: Path
    cost: Fraction
    fresh_edges: int


@dataclass(frozen=True)
class Witness:
    """Evidence that some agent can strictly lower its shared cost."""

    kind: str  # "terminal" or "steiner"
    vertex: int
    via_terminal: int
    path: Path
    current: Fraction
    candidate: Fraction


@dataclass(frozen=True)
class EquilibriumVerdict:
    ok: bool
    witness: Optional[Witness]


def initial_state(instance) -> RoutingState:
    return RoutingState(instance, (ROOT,), {}, {}, {}, None)


def with_revealed(state, new_vertices) -> RoutingState:
    seen = set(state.revealed)
    added = []
    for v in new_vertices:
        if v in seen:
            continue
        if not 0 <= v < state.instance.n:
            raise EngineInvariantError(f"vertex {v} outside instance range")
        seen.add(v)
        added.append(v)
    if not added:
        return state
    return replace(state, revealed=state.revealed + tuple(added))


def add_terminal(state, vertex, count, path) -> RoutingState:
    if count <= 0:
        raise EngineInvariantError(f"arrival with non-positive count {count}")
    path = tuple(path)
    if not path or path[0] != vertex or path[-1] != ROOT or len(set(path)) != len(path):
        raise EngineInvariantError(f"malformed arrival path {path} for vertex {vertex}")
    revealed = set(state.revealed)
    if any(v not in revealed for v in path):
        raise EngineInvariantError("arrival path routes through unrevealed vertices")
    counts = dict(state.counts)
    paths = dict(state.paths)
    usage = dict(state.usage)
    if vertex in counts:
        if paths[vertex] != path:
            raise EngineInvariantError(
                f"vertex {vertex} is already routed via {paths[vertex]}, not {path}"
            )
        counts[vertex] += count
    else:
        counts[vertex] = count
        paths[vertex] = path
    for e in path_edges(path):
        usage[e] = usage.get(e, 0) + count
    return replace(state, counts=counts, paths=paths, usage=usage)


def prune_departures(state, departing) -> RoutingState:
    departing = set(departing)
    missing = departing - set(state.counts)
    if missing:
        raise EngineInvariantError(f"departure of inactive vertices {sorted(missing)}")
    counts = {t: k for t, k in state.counts.items() if t not in departing}
    paths = {t: p for t, p in state.paths.items() if t not in departing}
    # Recompute from scratch: the surviving paths are the authority.
    usage: dict = {}
    for t, p in paths.items():
        k = counts[t]
        for e in path_edges(p):
            usage[e] = usage.get(e, 0) + k
    last = state.last_mover
    if last is not None and not any(last in p for p in paths.values()):
        last = None
    return replace(state, counts=counts, paths=paths, usage=usage, last_mover=last)


def shared_cost(state, terminal) -> Fraction:
    if terminal not in state.counts:
        raise EngineInvariantError(f"shared_cost of inactive vertex {terminal}")
    cost = state.instance.cost
    total = Fraction(0)
    for a, b in zip(state.paths[terminal], state.paths[terminal][1:]):
        total += cost(a, b) / state.usage[edge_key(a, b)]
    return total


def solution_cost(state) -> Fraction:
    """Total cost of all edges in use (each edge once, however many users)."""
    cost = state.instance.cost
    return sum((cost(a, b) for a, b in state.usage), Fraction(0))


def potential(state) -> Fraction:
    """Rosenthal potential: sum over edges of c_e * H(N_e).

    Strictly decreases under every improving move — single agents or whole
    subtree blocks, which decompose into single-agent improving moves.
    """
    total = Fraction(0)
    cost = state.instance.cost
    for (a, b), n in state.usage.items():
        total += cost(a, b) * harmonic(n)
    return total


# ---------------------------------------------------------------------------
# tree view


class _Tree:
    """Derived view of a state whose paths form a rooted tree.

    Carries parent/children/depth/Euler intervals plus the two prefix sums
    A(x) = sum of c_e/N_e and B(x) = sum of c_e/(N_e+1) along x -> root,
    in exact and float forms.  Raises EngineInvariantError if the paths do
    not form a tree (conflicting parents, cycles) or a leaf is not a terminal.
    """

    __slots__ = (
        "parent", "children", "depth", "tin", "tout",
        "order", "A", "B", "Af", "Bf", "leaves",
    )

    def __init__(self, state: RoutingState):
        parent = {}
        for path in state.paths.values():
            for child, par in zip(path, path[1:]):
                if parent.setdefault(child, par) != par:
                    raise EngineInvariantError(
                        f"routing paths disagree on the parent of {child}"
                    )
        if ROOT in parent:
            raise EngineInvariantError("the root has a parent edge")
        children: dict = {v: [] for v in parent}
        children[ROOT] = []
        for child, par in parent.items():
            children.setdefault(par, []).append(child)
        for v in children:
            children[v].sort()

        cost = state.instance.cost
        depth, tin, tout = {ROOT: 0}, {}, {}
        A = {ROOT: Fraction(0)}
        B = {ROOT: Fraction(0)}
        Af = {ROOT: 0.0}
        Bf = {ROOT: 0.0}
        clock = 0
        stack = [(ROOT, False)]
        while stack:
            x, closing = stack.pop()
            if closing:
                tout[x] = clock
                clock += 1
                continue
            tin[x] = clock
            clock += 1
            stack.append((x, True))
            for ch in reversed(children[x]):
                n = state.usage.get(edge_key(ch, x))
                if not n:
                    raise EngineInvariantError(f"tree edge ({ch},{x}) has no recorded usage")
                c = cost(ch, x)
                A[ch] = A[x] + c / n
                B[ch] = B[x] + c / (n + 1)
                Af[ch] = Af[x] + float(c) / n
                Bf[ch] = Bf[x] + float(c) / (n + 1)
                depth[ch] = depth[x] + 1
                stack.append((ch, False))
        if len(tin) != len(children):
            raise EngineInvariantError("routing paths contain a cycle")

        self.parent = parent
        self.children = children
        self.depth = depth
        self.tin = tin
        self.tout = tout
        self.order = sorted(children)
        self.A, self.B, self.Af, self.Bf = A, B, Af, Bf
        self.leaves = {v for v in children if not children[v] and v != ROOT}
        bad = self.leaves - set(state.counts)
        if bad:
            raise EngineInvariantError(f"tree leaves without terminals: {sorted(bad)}")

    def __contains__(self, v):
        return v in self.children

    def in_subtree(self, x, u) -> bool:
        return self.tin[u] <= self.tin[x] and self.tout[x] <= self.tout[u]

    def lca(self, a, b) -> int:
        while self.depth[a] > self.depth[b]:
            a = self.parent[a]
        while self.depth[b] > self.depth[a]:
            b = self.parent[b]
        while a != b:
            a, b = self.parent[a], self.parent[b]
        return a

    def path_to_root(self, v) -> Path:
        seq = [v]
        while seq[-1] != ROOT:
            seq.append(self.parent[seq[-1]])
        return tuple(seq)

    def terminals_through(self, state, u):
        return sorted(t for t in state.counts if self.in_subtree(t, u))


def tree_view(state) -> _Tree:
    return _Tree(state)


def tree_path(state, v, view=None) -> Path:
    view = view or _Tree(state)
    if v not in view:
        raise EngineInvariantError(f"vertex {v} is not on the routing tree")
    return view.path_to_root(v)


# ---------------------------------------------------------------------------
# best response search


class _Search:
    """(cost, fresh)-lexicographic shortest paths to the root, exact.

    Dense Dijkstra over the revealed vertices.  Selection and relaxation are
    float-screened: a candidate is dropped without exact work only when it
    loses by more than the margin, which is sound because the float mirror of
    any exact distance reached here drifts by orders of magnitude less than
    the margin (a few hundred additions of correctly rounded floats).
    """

    __slots__ = ("state", "nodes", "pos", "dist", "_wf", "_distf", "_margin",
                 "_own", "_mover_count", "_wcache")

    def __init__(self, state, *, mover, own_path, excluded=frozenset()):
        inst = state.instance
        excluded = set(excluded)
        nodes = [v for v in state.revealed if v not in excluded]
        if ROOT not in nodes:
            raise EngineInvariantError("search excludes the root")
        self.state = state
        self.nodes = nodes
        self.pos = {v: i for i, v in enumerate(nodes)}
        self._own = frozenset(path_edges(own_path)) if own_path else frozenset()
        self._mover_count = state.counts.get(mover, 0)
        self._margin = inst.float_margin
        self._wcache: dict = {}

        wf = inst.costf[np.ix_(nodes, nodes)].copy()
        for (a, b), n in state.usage.items():
            ia, ib = self.pos.get(a), self.pos.get(b)
            if ia is None or ib is None:
                continue
            d = n if (a, b) in self._own else n + 1
            w = wf[ia, ib] / d
            wf[ia, ib] = w
            wf[ib, ia] = w
        self._wf = wf
        self.dist = {}
        self._run()

    def _edge_weight(self, x, y):
        """Exact (hypothetical share, fresh flag) of edge (x, y) for the mover."""
        e = edge_key(x, y)
        got = self._wcache.get(e)
        if got is None:
            n = self.state.usage.get(e, 0)
            c = self.state.instance.cost(x, y)
            if e in self._own:
                share = c / n
                others = n - self._mover_count
            else:
                share = c / (n + 1)
                others = n
            got = (share, 1 if others == 0 else 0)
            self._wcache[e] = got
        return got

    def _run(self):
        nodes, pos, wf = self.nodes, self.pos, self._wf
        k = len(nodes)
        margin = self._margin
        distf = np.full(k, np.inf)
        done = np.zeros(k, dtype=bool)
        ri = pos[ROOT]
        distf[ri] = 0.0
        exact = {ri: (Fraction(0), 0)}

        for _ in range(k):
            masked = np.where(done, np.inf, distf)
            i = int(np.argmin(masked))
            if masked[i] == np.inf:
                break
            near = np.nonzero(masked <= masked[i] + margin)[0]
            if len(near) > 1:
                # float ties: settle the pop order exactly (cost, fresh, id)
                i = int(min(near, key=lambda j: (exact[j][0], exact[j][1], nodes[j])))
            done[i] = True
            base_f = distf[i]
            base_e = exact[i]
            row = wf[i]
            cand = np.nonzero(~done & (base_f + row < distf + margin))[0]
            for j in cand:
                j = int(j)
                share, fresh = self._edge_weight(nodes[i], nodes[j])
                nd = (base_e[0] + share, base_e[1] + fresh)
                old = exact.get(j)
                if old is None or nd < old:
                    exact[j] = nd
                    distf[j] = base_f + row[j]

        self._distf = distf
        self.dist = {nodes[i]: d for i, d in exact.items()}

    def cost_fresh(self, v):
        got = self.dist.get(v)
        if got is None:
            raise EngineInvariantError(f"no path from {v} to the root was found")
        return got

    def path_from(self, source) -> Path:
        """Greedy smallest-id walk along exact-optimal continuations.

        At each step the smallest-id next hop y with
        weight(cur, y) + dist(y) == dist(cur) (exact pair equality) is taken;
        every such y extends to an optimal path, so the walk realizes the
        lexicographically smallest optimal id sequence.  All distances are
        positive, so the walk cannot revisit a vertex.
        """
        seq = [source]
        seen = {source}
        budget = self.dist[source]
        cur = source
        margin = self._margin
        while cur != ROOT:
            ic = self.pos[cur]
            bf = self._distf[ic]
            nxt = None
            for y in self.nodes:  # ascending vertex id order
                if y in seen:
                    continue
                iy = self.pos[y]
                # float screen: exact equality implies |float residue| << margin
                if abs(self._distf[iy] + self._wf[ic, iy] - bf) > margin:
                    continue
                share, fresh = self._edge_weight(cur, y)
                dy = self.dist.get(y)
                if dy is not None and (dy[0] + share, dy[1] + fresh) == budget:
                    nxt = y
                    budget = dy
                    break
            if nxt is None:
                raise EngineInvariantError("optimal-path walk got stuck (engine bug)")
            seq.append(nxt)
            seen.add(nxt)
            cur = nxt
            if len(seq) > len(self.nodes):
                raise EngineInvariantError("optimal-path walk cycled (engine bug)")
        return tuple(seq)


def best_response(state, vertex) -> BestResponse:
    """Best path for one (possibly hypothetical) agent at `vertex`.

    Shares are hypothetical: edges on the vertex's current path keep their
    user count, all other edges gain one user.  Ties broken by fewer fresh
    edges, then by the lexicographically smallest vertex-id sequence.
    """
    if vertex == ROOT:
        raise EngineInvariantError("the root does not route")
    if vertex not in set(state.revealed):
        raise EngineInvariantError(f"best response for unrevealed vertex {vertex}")
    search = _Search(state, mover=vertex, own_path=state.paths.get(vertex))
    cost, fresh = search.cost_fresh(vertex)
    return BestResponse(search.path_from(vertex), cost, fresh)


def has_improving_move(state, vertex) -> Optional[Witness]:
    """Witness that `vertex` (terminal or interior) can improve, else None.

    For an active terminal: compare its best response to its current share.
    For an interior (Steiner) vertex w: terminals routing through w are tried
    in id order; each keeps its segment below w fixed and searches for a
    cheaper replacement of the segment above w.
    """
    if state.is_active(vertex):
        br = best_response(state, vertex)
        cur = shared_cost(state, vertex)
        if br.cost < cur:
            return Witness("terminal", vertex, vertex, br.path, cur, br.cost)
        return None

    view = _Tree(state)
    if vertex == ROOT or vertex not in view:
        raise EngineInvariantError(
            f"vertex {vertex} is neither an active terminal nor on the routing tree"
        )
    above = view.A[vertex]  # current share of the segment above `vertex`
    for t in view.terminals_through(state, vertex):
        tpath = state.paths[t]
        cut = tpath.index(vertex)
        prefix = tpath[: cut + 1]
        search = _Search(state, mover=t, own_path=tpath, excluded=frozenset(prefix[:-1]))
        cand, _fresh = search.cost_fresh(vertex)
        if cand < above:
            cur = shared_cost(state, t)
            full = prefix[:-1] + search.path_from(vertex)
            return Witness("steiner", vertex, t, full, cur, cur - above + cand)
    return None


def verify_equilibrium(state, *, cross_check=True) -> EquilibriumVerdict:
    """Full sweep: every active terminal, then every interior tree vertex.

    With cross_check on, the verdict is compared against the improving
    tree-move scan; an improving path exists iff an improving tree-follow
    move does, so disagreement is an engine bug and raises.
    """
    witness = None
    for t in sorted(state.counts):
        witness = has_improving_move(state, t)
        if witness:
            break
    try:
        view = _Tree(state)
    except EngineInvariantError:
        view = None
    if witness is None and view is not None:
        for w in view.order:
            if w == ROOT or state.is_active(w):
                continue
            witness = has_improving_move(state, w)
            if witness:
                break
    if witness is None and view is None and state.paths:
        # No terminal can improve, yet the paths are not a tree: impossible
        # (non-tree routings always leave some terminal an improving
        # segment swap -- the downward-closure argument).
        raise EngineInvariantError("equilibrium verdict on a non-tree routing")
    if cross_check and view is not None:
        pair = find_improving_tree_move(state, view)
        if (pair is None) != (witness is None):
            raise EngineInvariantError(
                "best-response sweep and tree-move scan disagree: "
                f"witness={witness}, pair={pair}"
            )
    return EquilibriumVerdict(witness is None, witness)


# ---------------------------------------------------------------------------
# improving tree-follow moves


def is_improving_tree_move(state, u, v, view=None) -> bool:
    """Would rerouting u (and its subtree) onto v strictly help its users?

    Exact O(depth) test via the prefix sums: with L = lca(u, v),
        c(u,v) + B(v) - B(L)  <  A(u) - A(L).
    This is the hypothetical saving of any witness terminal in u's subtree:
    edges on v -> L are newly adopted (count+1), edges on L -> root stay on
    the witness's path (count unchanged), everything below u moves rigidly.
    """
    view = view or _Tree(state)
    if u == ROOT or u not in view.parent:
        raise EngineInvariantError(f"{u} has no parent edge to swap")
    if v not in view:
        raise EngineInvariantError(f"move target {v} is not on the tree")
    if v == u or view.in_subtree(v, u):
        raise EngineInvariantError(f"move target {v} lies in the subtree of {u}")
    ell = view.lca(u, v)
    lhs = state.instance.cost(u, v) + view.B[v] - view.B[ell]
    return lhs < view.A[u] - view.A[ell]


def is_legal_improving(state, u, v, view=None) -> bool:
    """Like is_improving_tree_move, but illegal pairs answer False quietly.

    Illegal means: u is the root or off the tree, v is off the tree, or v
    lies (weakly) inside u's subtree.  Used where a candidate pair comes from
    a heuristic and not from an enumerated legal set.
    """
    view = view or _Tree(state)
    if u == ROOT or u not in view.parent or v not in view:
        return False
    if v == u or view.in_subtree(v, u):
        return False
    return is_improving_tree_move(state, u, v, view)


def _candidate_screen(state, view):
    """Float pre-screen for improving pairs.

    A(u) - B(v) - c(u,v) > A(L) - B(L) >= 0 is necessary for u -> v to
    improve, so no improving pair scores below -margin: the screen is
    conservative and complete.
    """
    verts = view.order
    a = np.array([view.Af[x] for x in verts])
    b = np.array([view.Bf[x] for x in verts])
    c = state.instance.costf[np.ix_(verts, verts)]
    return verts, a[:, None] - b[None, :] - c


def find_improving_tree_move(state, view=None):
    """First (u, v) in id order whose tree-follow move improves, or None."""
    view = view or _Tree(state)
    if len(view.order) <= 1:
        return None
    verts, screen = _candidate_screen(state, view)
    margin = state.instance.float_margin
    for i, u in enumerate(verts):
        if u == ROOT:
            continue
        for j in np.nonzero(screen[i] > -margin)[0]:
            v = verts[int(j)]
            if v == u or view.in_subtree(v, u):
                continue
            if is_improving_tree_move(state, u, v, view):
                return u, v
    return None


def closest_improving_target(state, view, u, allowed=None, screen_row=None, verts=None):
    """Closest v (exact c(u,v), ties by id) with an improving move u -> v.

    `allowed` optionally restricts the target set; returns None if nothing
    improves.  Candidates are walked in float-distance order; once a hit is
    found only candidates within the margin of its distance can still win,
    and those are settled exactly.
    """
    if screen_row is None:
        verts, screen = _candidate_screen(state, view)
        screen_row = screen[verts.index(u)]
    margin = state.instance.float_margin
    costf = state.instance.costf
    cands = []
    for j in np.nonzero(screen_row > -margin)[0]:
        v = verts[int(j)]
        if v == u or view.in_subtree(v, u):
            continue
        if allowed is not None and v not in allowed:
            continue
        cands.append((costf[u, v], v))
    cands.sort()
    best = None  # (exact cost, v)
    best_f = None
    for cf, v in cands:
        if best is not None and cf > best_f + margin:
            break
        if is_improving_tree_move(state, u, v, view):
            c = state.instance.cost(u, v)
            if best is None or (c, v) < best:
                best = (c, v)
                best_f = cf
    return None if best is None else best[1]


def tree_follow_move(state, u, v) -> RoutingState:
    """Atomic reroute: u swaps its parent edge for (u, v); its subtree follows.

    Terminals outside u's subtree are untouched.  Usage counts are updated by
    the subtree's total agent count along the abandoned and adopted segments.
    """
    view = _Tree(state)
    if u == ROOT or u not in view.parent:
        raise EngineInvariantError(f"{u} has no parent edge to swap")
    if v not in view:
        raise EngineInvariantError(f"move target {v} is not on the tree")
    if v == u or view.in_subtree(v, u):
        raise EngineInvariantError(f"illegal move {u} -> {v}: target inside the subtree")

    movers = view.terminals_through(state, u)
    block = sum(state.counts[t] for t in movers)
    if block <= 0:
        raise EngineInvariantError(f"subtree of {u} carries no agents")
    old_above = view.path_to_root(u)  # (u, parent, ..., 0)
    new_tail = view.path_to_root(v)  # (v, ..., 0)

    paths = dict(state.paths)
    for t in movers:
        p = paths[t]
        cut = p.index(u)
        paths[t] = p[: cut + 1] + new_tail

    usage = dict(state.usage)
    for e in path_edges(old_above):
        left = usage[e] - block
        if left:
            usage[e] = left
        else:
            del usage[e]
    for e in [edge_key(u, v)] + path_edges(new_tail):
        usage[e] = usage.get(e, 0) + block

    return replace(state, paths=paths, usage=usage, last_mover=u)


def audit_state(state) -> None:
    """Re-derive everything derivable and compare; raises on any mismatch."""
    revealed = set(state.revealed)
    if ROOT not in revealed:
        raise EngineInvariantError("root is not revealed")
    if set(state.paths) != set(state.counts):
        raise EngineInvariantError("terminals with paths and with counts differ")
    recomputed: dict = {}
    for t, path in state.paths.items():
        k = state.counts[t]
        if k <= 0:
            raise EngineInvariantError(f"terminal {t} has non-positive count")
        if path[0] != t or path[-1] != ROOT or len(set(path)) != len(path):
            raise EngineInvariantError(f"malformed path for terminal {t}: {path}")
        if any(v not in revealed for v in path):
            raise EngineInvariantError(f"path of {t} uses unrevealed vertices")
        for e in path_edges(path):
            recomputed[e] = recomputed.get(e, 0) + k
    if recomputed != state.usage:
        raise EngineInvariantError("stored usage counts disagree with recomputation")
