"""Online distance-scale partitions, cut charging, and cost accounting.

For each integer level j we maintain a partition of the revealed vertices
(departed ones included) into components of diameter < 2^j whose centers are
pairwise >= 2^{j-1} apart.  Each partition doubles as a spanning-tree lower
bound: any tree over the vertices must connect the component centers.

A routing tree is charged against the partitions: every non-root tree vertex
charges its parent-edge cost c to its own component at level
floor(log2(c)) - 2 (so 2^{j+2} <= c < 2^{j+3} charges level j).  The number
of distinct non-leaf chargers per component ("cut") drives a four-way
classification of tree states, and on states where every cut is charged at
most once the per-level charges telescope into a logarithmic bound on the
tree's cost relative to the minimum spanning tree.

Partitions are built greedily in revelation order and never rebalanced, so
every query is reproducible from the insertion sequence alone.  Levels are
materialized only inside a window where the answer is not forced: below it
every vertex is its own component, above it everything shares one component,
and those answers are synthesized rather than stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import ClosureViolationError, EngineInvariantError, VerificationError
from .metric import ROOT, MetricInstance, mst_cost
from .rationals import ceil_log2, floor_log2, pow2
from .routing import RoutingState, find_improving_tree_move, solution_cost, tree_view


def charge_level(cost) -> int:
    """The level an edge of this cost charges: j with 2^{j+2} <= cost < 2^{j+3}."""
    if cost <= 0:
        raise EngineInvariantError(f"charge_level of non-positive cost {cost}")
    return floor_log2(cost) - 2


class LevelPartition:
    """One level's greedy online partition.

    A vertex joins the first component (in creation order) whose center lies
    strictly within half the level's diameter bound; otherwise it founds a
    new component with itself as center.  Every member is therefore strictly
    within 2^{level-1} of its center, and centers are pairwise >= 2^{level-1}
    apart, which caps the component diameter below 2^level.
    """

    __slots__ = ("level", "radius", "radius_f", "centers", "members", "of")

    def __init__(self, level: int):
        self.level = level
        self.radius = pow2(level - 1)  # join strictly below this
        self.radius_f = float(self.radius)
        self.centers: list = []
        self.members: list = []
        self.of: dict = {}

    def insert(self, v: int, instance: MetricInstance) -> int:
        costf = instance.costf
        margin = instance.float_margin
        rf = self.radius_f
        for idx, c in enumerate(self.centers):
            df = costf[c, v]
            if df > rf + margin:
                continue
            if df < rf - margin or instance.cost(c, v) < self.radius:
                self.members[idx].append(v)
                self.of[v] = idx
                return idx
        idx = len(self.centers)
        self.centers.append(v)
        self.members.append([v])
        self.of[v] = idx
        return idx


class DualFamily:
    """All levels' partitions over the vertices inserted so far.

    Vertices must be inserted in revelation order, root first, and are never
    removed (a departed terminal still shapes the partitions).  The stored
    window [jmin, jmax] covers every level where the partition is not forced;
    it is derived from the min/max positive pairwise distance and extended by
    replaying the insertion history whenever new distances widen it.
    """

    __slots__ = ("instance", "inserted", "_pos", "levels", "jmin", "jmax",
                 "_minpos", "_maxd")

    def __init__(self, instance: MetricInstance):
        self.instance = instance
        self.inserted: list = []
        self._pos: dict = {}
        self.levels: dict = {}
        self.jmin: Optional[int] = None
        self.jmax: Optional[int] = None
        self._minpos: Optional[Fraction] = None
        self._maxd: Optional[Fraction] = None

    def __contains__(self, v) -> bool:
        return v in self._pos

    def extend(self, instance: MetricInstance, vertices) -> None:
        """Adopt a grown instance and insert newly revealed vertices in order."""
        if instance.n < self.instance.n:
            raise EngineInvariantError("dual family handed a shrunken instance")
        self.instance = instance
        for v in vertices:
            self.insert(v)

    def insert(self, v: int) -> None:
        if v in self._pos:
            raise EngineInvariantError(f"vertex {v} inserted into the duals twice")
        if not 0 <= v < self.instance.n:
            raise EngineInvariantError(f"vertex {v} outside instance range")
        if not self.inserted and v != ROOT:
            raise EngineInvariantError("the first inserted vertex must be the root")
        cost = self.instance.cost
        for u in self.inserted:
            d = cost(u, v)
            if self._minpos is None or d < self._minpos:
                self._minpos = d
            if self._maxd is None or d > self._maxd:
                self._maxd = d
        self._pos[v] = len(self.inserted)
        self.inserted.append(v)

        if self._minpos is not None:
            lo = floor_log2(self._minpos) - 4
            hi = ceil_log2(self._maxd) + 1
            if self.jmin is None:
                new = range(lo, hi + 1)
            else:
                if lo > self.jmin or hi < self.jmax:
                    raise EngineInvariantError("dual level window shrank")
                new = [*range(lo, self.jmin), *range(self.jmax + 1, hi + 1)]
            for j in new:
                # replay history so the level looks as if maintained all along
                lp = LevelPartition(j)
                for w in self.inserted[:-1]:
                    lp.insert(w, self.instance)
                self.levels[j] = lp
            self.jmin, self.jmax = lo, hi
        for lp in self.levels.values():
            lp.insert(v, self.instance)

    # -- queries ----------------------------------------------------------

    def num_components(self, j: int) -> int:
        if not self.inserted:
            return 0
        if self.jmin is None or j < self.jmin:
            return len(self.inserted)  # all singletons: nothing is close enough
        if j > self.jmax:
            return 1  # everything joins the root's component
        return len(self.levels[j].centers)

    def component_of(self, v: int, j: int) -> tuple:
        """Stable cut key (level, component index) of v's level-j component."""
        pos = self._pos.get(v)
        if pos is None:
            raise EngineInvariantError(f"vertex {v} was never inserted into the duals")
        if self.jmin is None or j < self.jmin:
            return (j, pos)
        if j > self.jmax:
            return (j, 0)
        return (j, self.levels[j].of[v])

    def component_members(self, v: int, j: int) -> tuple:
        if self.jmin is None or j < self.jmin:
            _ = self.component_of(v, j)
            return (v,)
        if j > self.jmax:
            return tuple(self.inserted)
        return tuple(self.levels[j].members[self.levels[j].of[v]])

    # -- self-checks --------------------------------------------------------

    def check_invariants(self) -> None:
        """Exhaustively re-verify every stored level; raises on any breach.

        Float matrices screen the O(k^2) distance comparisons; every pair
        within the margin of a boundary is settled exactly.
        """
        inst = self.instance
        margin = inst.float_margin
        all_vs = set(self._pos)
        for j, lp in sorted(self.levels.items()):
            rf, radius = lp.radius_f, lp.radius
            diam, diam_f = pow2(j), float(pow2(j))
            seen: dict = {}
            for idx, mem in enumerate(lp.members):
                if not mem or mem[0] != lp.centers[idx]:
                    raise EngineInvariantError(
                        f"level {j} component {idx} lost its founding center"
                    )
                for v in mem:
                    if v in seen or lp.of.get(v) != idx:
                        raise EngineInvariantError(
                            f"level {j}: vertex {v} is not in exactly one component"
                        )
                    seen[v] = idx
                rows = inst.costf[np.ix_([lp.centers[idx]], mem)][0]
                for t, v in enumerate(mem):
                    if rows[t] > rf - margin and not inst.cost(lp.centers[idx], v) < radius:
                        raise EngineInvariantError(
                            f"level {j}: member {v} strays >= 2^{j-1} from its center"
                        )
                block = inst.costf[np.ix_(mem, mem)]
                for a, b in zip(*np.nonzero(block > diam_f - margin)):
                    if a < b and not inst.cost(mem[a], mem[b]) < diam:
                        raise EngineInvariantError(
                            f"level {j}: component {idx} has diameter >= 2^{j}"
                        )
            if set(seen) != all_vs:
                raise EngineInvariantError(f"level {j} does not partition the vertices")
            cf = inst.costf[np.ix_(lp.centers, lp.centers)]
            for a, b in zip(*np.nonzero(cf < rf + margin)):
                if a < b and inst.cost(lp.centers[a], lp.centers[b]) < radius:
                    raise EngineInvariantError(
                        f"level {j}: centers {lp.centers[a]},{lp.centers[b]} too close"
                    )


def dual_lower_bound(family: DualFamily, level: int) -> Fraction:
    """Spanning-tree lower bound certified by one level: 2^{level-1}(k - 1)."""
    k = family.num_components(level)
    if k <= 1:
        return Fraction(0)
    return pow2(level - 1) * (k - 1)


# ---------------------------------------------------------------------------
# charging and classification


@dataclass(frozen=True)
class ChargeRecord:
    vertex: int
    level: int
    cut: tuple  # (level, component index)
    cost: Fraction
    leaf: bool


@dataclass(frozen=True)
class ChargeMap:
    records: tuple
    by_cut: dict  # cut key -> tuple of ChargeRecords, insertion-ordered


def compute_charges(state: RoutingState, family: DualFamily, view=None) -> ChargeMap:
    """Charge every tree vertex's parent edge to its cut, indexed by cut."""
    if set(family.inserted) != set(state.revealed):
        raise EngineInvariantError("dual family out of sync with revealed vertices")
    view = view or tree_view(state)
    cost = state.instance.cost
    records = []
    by_cut: dict = {}
    for u in view.order:
        if u == ROOT:
            continue
        c = cost(u, view.parent[u])
        j = charge_level(c)
        cut = family.component_of(u, j)
        rec = ChargeRecord(u, j, cut, c, u in view.leaves)
        records.append(rec)
        by_cut.setdefault(cut, []).append(rec)
    return ChargeMap(tuple(records), {k: tuple(v) for k, v in by_cut.items()})


BALANCED_EQUILIBRIUM, BALANCED, LEAF_UNBALANCED, NONLEAF_UNBALANCED = range(4)
CLASS_NAMES = (
    "balanced-equilibrium",
    "balanced",
    "leaf-unbalanced",
    "nonleaf-unbalanced",
)


@dataclass(frozen=True)
class StateClass:
    """Tightest of the four nested charge-structure classes a state fits.

    rank 0: every cut charged at most once and no improving move exists.
    rank 1: every cut charged at most once.
    rank 2: every cut has at most one non-leaf charger (leaves unlimited).
    rank 3: exactly one cut has two non-leaf chargers, one of whom made the
            most recent move; all other cuts as in rank 2.
    Anything looser raises ClosureViolationError.
    """

    rank: int
    charges: ChargeMap
    heavy_cut: Optional[tuple] = None
    heavy_chargers: Optional[tuple] = None  # (last mover, the other one)

    @property
    def name(self) -> str:
        return CLASS_NAMES[self.rank]


def classify(state: RoutingState, family: DualFamily, view=None, *,
             decide_equilibrium: bool = True) -> StateClass:
    """Rank the state on the balanced/unbalanced ladder.

    `decide_equilibrium=False` skips the quadratic improving-move scan that
    separates the bottom two rungs and reports every every-cut-at-most-once
    state as merely "balanced"; useful when only the upper bounds matter.
    """
    view = view or tree_view(state)
    charges = compute_charges(state, family, view)

    crowded = {}  # cut -> non-leaf charger vertices, when there are >= 2
    for cut, recs in charges.by_cut.items():
        nonleaf = [r.vertex for r in recs if not r.leaf]
        if len(nonleaf) >= 2:
            crowded[cut] = nonleaf

    if not crowded:
        if all(len(recs) <= 1 for recs in charges.by_cut.values()):
            if not decide_equilibrium:
                return StateClass(BALANCED, charges)
            if find_improving_tree_move(state, view) is None:
                return StateClass(BALANCED_EQUILIBRIUM, charges)
            return StateClass(BALANCED, charges)
        return StateClass(LEAF_UNBALANCED, charges)

    if len(crowded) > 1:
        raise ClosureViolationError(
            "multiple cuts with two or more non-leaf chargers",
            details={"cuts": {str(k): v for k, v in crowded.items()}},
        )
    (cut, nonleaf), = crowded.items()
    if len(nonleaf) > 2:
        raise ClosureViolationError(
            f"cut {cut} has {len(nonleaf)} non-leaf chargers",
            details={"cut": str(cut), "chargers": nonleaf},
        )
    if state.last_mover not in nonleaf:
        raise ClosureViolationError(
            f"neither non-leaf charger of cut {cut} made the last move",
            details={"cut": str(cut), "chargers": nonleaf,
                     "last_mover": state.last_mover},
        )
    other = nonleaf[0] if nonleaf[1] == state.last_mover else nonleaf[1]
    return StateClass(
        NONLEAF_UNBALANCED, charges,
        heavy_cut=cut, heavy_chargers=(state.last_mover, other),
    )


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class LevelRow:
    level: int
    charges: int
    charged_cost: Fraction
    components: int
    dual_bound: Fraction


@dataclass(frozen=True)
class AccountingReport:
    n: int
    total_cost: Fraction
    opt_cost: Fraction
    ratio: Fraction
    gate: float  # 32 * (log2 n + 1)
    certified: bool
    max_edge: Fraction
    ignored_cost: Fraction
    ignored_count: int
    rows: tuple
    levels_charged: int
    level_budget: int  # floor(log2 n) + 2


def logn_accounting(state: RoutingState, family: DualFamily,
                    opt=None) -> AccountingReport:
    """Certify the routing tree's cost against the dual family.

    `opt` is the spanning-tree optimum to compare against; when omitted it
    is the MST over all revealed vertices.  Requires every cut to carry at
    most one above-threshold charge (raises VerificationError otherwise;
    classify() is the diagnostic for *why*).  Edges of cost <= D/n (D = max
    tree-edge cost, n = revealed count) are set aside — they sum to at most
    D, which any spanning tree already pays.  Each charged level then
    certifies charged_cost <= 32 * its dual bound, and at most
    floor(log2 n) + 2 levels are charged at all; both facts follow
    unconditionally from the at-most-once premise, so their failure raises
    EngineInvariantError.  The reported `certified` flag is the measured
    gate: total/opt <= 32 * (log2 n + 1).
    """
    n = len(state.revealed)
    if not state.usage:
        zero = Fraction(0)
        return AccountingReport(n, zero, zero, zero, 32.0 * (math.log2(max(n, 2)) + 1),
                                True, zero, zero, 0, (), 0, 0)

    view = tree_view(state)
    charges = compute_charges(state, family, view)
    total = solution_cost(state)
    max_edge = max(rec.cost for rec in charges.records)
    threshold = max_edge / n

    counted_by_cut: dict = {}
    ignored_cost, ignored_count = Fraction(0), 0
    per_level: dict = {}
    for rec in charges.records:
        if rec.cost <= threshold:
            ignored_cost += rec.cost
            ignored_count += 1
            continue
        if rec.cut in counted_by_cut:
            raise VerificationError(
                f"cut {rec.cut} is charged more than once "
                f"(by {counted_by_cut[rec.cut]} and {rec.vertex}); "
                "the logarithmic accounting only covers balanced states"
            )
        counted_by_cut[rec.cut] = rec.vertex
        cnt, csum = per_level.get(rec.level, (0, Fraction(0)))
        per_level[rec.level] = (cnt + 1, csum + rec.cost)

    rows = []
    for j in sorted(per_level):
        cnt, csum = per_level[j]
        comps = family.num_components(j)
        if comps < 2:
            raise EngineInvariantError(
                f"level {j} received charges but has a single component"
            )
        bound = dual_lower_bound(family, j)
        if csum > 32 * bound:
            raise EngineInvariantError(
                f"level {j} charges {csum} exceed 32x its dual bound {bound}"
            )
        rows.append(LevelRow(j, cnt, csum, comps, bound))

    level_budget = (n.bit_length() - 1) + 2
    if len(rows) > level_budget:
        raise EngineInvariantError(
            f"{len(rows)} levels charged; at most {level_budget} are possible "
            f"after ignoring edges below {threshold}"
        )

    if opt is None:
        opt = mst_cost(state.instance, state.revealed)
    else:
        opt = Fraction(opt)
    if opt <= 0:
        raise EngineInvariantError("revealed vertices span no positive-cost tree")
    ratio = total / opt
    gate = 32.0 * (math.log2(n) + 1.0)
    return AccountingReport(
        n=n, total_cost=total, opt_cost=opt, ratio=ratio, gate=gate,
        certified=float(ratio) <= gate, max_edge=max_edge,
        ignored_cost=ignored_cost, ignored_count=ignored_count,
        rows=tuple(rows), levels_charged=len(rows), level_budget=level_budget,
    )
