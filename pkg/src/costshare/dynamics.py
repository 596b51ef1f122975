"""Arrival/departure schedules and the dynamics that run them.

Two runners share the event vocabulary:

- `run_eqp`: after every event, prioritized tree-follow moves fire until the
  state is a balanced equilibrium again.  Along the way the engine asserts
  the class-transition contract of each move rule (see `select_tree_move`)
  and that the exact potential strictly drops on every move.
- `run_noneqp`: agents best-respond once on arrival and never reroute.  The
  run log records how far each intermediate state strays from the class
  hierarchy, and the final state is (optionally) verified to be an
  equilibrium.

Events may arrive in batches; an arrival item can carry an expected path,
and the engine raises the moment a best response deviates from it, so
scripted schedules double as executable proofs of where agents route.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .duals import (
    BALANCED,
    BALANCED_EQUILIBRIUM,
    CLASS_NAMES,
    LEAF_UNBALANCED,
    NONLEAF_UNBALANCED,
    AccountingReport,
    DualFamily,
    StateClass,
    charge_level,
    classify,
    logn_accounting,
)
from .errors import (
    ClosureViolationError,
    ConfigError,
    EngineInvariantError,
    VerificationError,
)
from .metric import ROOT, MetricInstance
from .rationals import pow2
from .routing import (
    EquilibriumVerdict,
    RoutingState,
    _candidate_screen,
    add_terminal,
    best_response,
    closest_improving_target,
    initial_state,
    is_legal_improving,
    potential,
    prune_departures,
    solution_cost,
    tree_follow_move,
    tree_view,
    verify_equilibrium,
    with_revealed,
)

MOVE_CEILING_FACTOR = 10  # moves allowed per epoch: factor * revealed^3


# ---------------------------------------------------------------------------
# schedule vocabulary


@dataclass(frozen=True)
class ArrivalItem:
    """`count` agents appear at `vertex`; optionally pin the path they must pick."""

    vertex: int
    count: int = 1
    expect_path: Optional[tuple] = None


@dataclass(frozen=True)
class ArrivalEvent:
    items: tuple
    reveal: tuple = ()  # extra vertices revealed by this event, before the items

    def vertices(self) -> tuple:
        return tuple(it.vertex for it in self.items)


@dataclass(frozen=True)
class DepartureEvent:
    vertices: tuple


def check_schedule(instance: MetricInstance, events) -> None:
    """Static validation of a schedule against an instance (ConfigError)."""
    for i, ev in enumerate(events):
        if isinstance(ev, ArrivalEvent):
            if not ev.items:
                raise ConfigError(f"event {i}: arrival with no items")
            for it in ev.items:
                if not 0 <= it.vertex < instance.n:
                    raise ConfigError(f"event {i}: vertex {it.vertex} out of range")
                if it.vertex == ROOT:
                    raise ConfigError(f"event {i}: the root hosts no agents")
                if it.count < 1:
                    raise ConfigError(f"event {i}: count {it.count} below 1")
                if it.expect_path is not None:
                    p = it.expect_path
                    if (not p or p[0] != it.vertex or p[-1] != ROOT
                            or len(set(p)) != len(p)
                            or any(not 0 <= v < instance.n for v in p)):
                        raise ConfigError(
                            f"event {i}: expected path {p} is not a simple "
                            f"{it.vertex}->root vertex sequence"
                        )
            for v in ev.reveal:
                if not 0 <= v < instance.n:
                    raise ConfigError(f"event {i}: revealed vertex {v} out of range")
        elif isinstance(ev, DepartureEvent):
            if not ev.vertices:
                raise ConfigError(f"event {i}: departure with no vertices")
            for v in ev.vertices:
                if not 0 <= v < instance.n or v == ROOT:
                    raise ConfigError(f"event {i}: cannot depart vertex {v}")
        else:
            raise ConfigError(f"event {i}: unknown event object {ev!r}")


def _as_int(x, what):
    if type(x) is not int:
        raise ConfigError(f"{what} must be an integer, got {x!r}")
    return x


def schedule_to_jsonable(events) -> dict:
    rows = []
    for ev in events:
        if isinstance(ev, ArrivalEvent):
            row = {"type": "arrive", "items": []}
            for it in ev.items:
                item = {"vertex": it.vertex, "count": it.count}
                if it.expect_path is not None:
                    item["expect_path"] = list(it.expect_path)
                row["items"].append(item)
            if ev.reveal:
                row["reveal"] = list(ev.reveal)
        else:
            row = {"type": "depart", "vertices": list(ev.vertices)}
        rows.append(row)
    return {"events": rows}


def schedule_from_jsonable(data) -> tuple:
    if not isinstance(data, dict) or not isinstance(data.get("events"), list):
        raise ConfigError("schedule must be an object with an 'events' list")
    events = []
    for i, row in enumerate(data["events"]):
        if not isinstance(row, dict):
            raise ConfigError(f"event {i} must be an object")
        kind = row.get("type")
        if kind == "arrive":
            items_raw = row.get("items")
            if not isinstance(items_raw, list) or not items_raw:
                raise ConfigError(f"event {i}: 'items' must be a non-empty list")
            items = []
            for item in items_raw:
                if not isinstance(item, dict):
                    raise ConfigError(f"event {i}: items must be objects")
                vertex = _as_int(item.get("vertex"), f"event {i} item vertex")
                count = item.get("count", 1)
                count = _as_int(count, f"event {i} item count")
                expect = item.get("expect_path")
                if expect is not None:
                    if not isinstance(expect, list):
                        raise ConfigError(f"event {i}: expect_path must be a list")
                    expect = tuple(_as_int(v, f"event {i} expect_path entry")
                                   for v in expect)
                items.append(ArrivalItem(vertex, count, expect))
            reveal = row.get("reveal", [])
            if not isinstance(reveal, list):
                raise ConfigError(f"event {i}: reveal must be a list")
            reveal = tuple(_as_int(v, f"event {i} reveal entry") for v in reveal)
            events.append(ArrivalEvent(tuple(items), reveal))
        elif kind == "depart":
            vs = row.get("vertices")
            if not isinstance(vs, list) or not vs:
                raise ConfigError(f"event {i}: 'vertices' must be a non-empty list")
            events.append(DepartureEvent(tuple(
                _as_int(v, f"event {i} departing vertex") for v in vs)))
        else:
            raise ConfigError(f"event {i}: unknown type {kind!r}")
    return tuple(events)


# ---------------------------------------------------------------------------
# move selection


@dataclass(frozen=True)
class SelectedMove:
    mover: int
    target: int
    tag: str  # "balanced" | "lu-a" | "lu-b" | "lu-c" | "lu-d" | "nlu"
    before: StateClass
    context_cut: Optional[tuple] = None  # lu-c: the shared cut; nlu: the old S*


def select_tree_move(state, family, *, view=None, cls=None) -> Optional[SelectedMove]:
    """Pick the next tree-follow move by the class-driven priority rules.

    balanced: the smallest-id vertex with an improving move goes to its
      closest improving target.
    leaf-unbalanced, tried in order:
      (a) smallest leaf with an improving move to a non-leaf goes to the
          closest such target;
      (b) smallest non-leaf with an improving move to a non-leaf, closest
          such target;
      (c) first cut (by level, then component) charged by both a non-leaf u
          and a leaf v: u moves to v (one of the two directions must improve,
          and (a) already ruled out v's);
      (d) otherwise any improving move - necessarily leaf-to-leaf.
    non-leaf-unbalanced: of the two non-leaf chargers of the special cut,
      the last mover goes if its move to the other one improves, else the
      other one goes; either way to its closest improving target.

    Within each rule, "smallest id" and then "closest target (ties by id)"
    make the choice deterministic.  Returns None only on balanced
    equilibria.  A rule whose backing claim fails raises
    ClosureViolationError with the evidence.
    """
    view = view or tree_view(state)
    cls = cls or classify(state, family, view)
    if cls.rank == BALANCED_EQUILIBRIUM:
        return None

    verts, screen = _candidate_screen(state, view)
    at = {v: i for i, v in enumerate(verts)}

    def closest(u, allowed=None):
        return closest_improving_target(
            state, view, u, allowed=allowed, screen_row=screen[at[u]], verts=verts)

    if cls.rank == BALANCED:
        for u in verts:
            if u == ROOT:
                continue
            tgt = closest(u)
            if tgt is not None:
                return SelectedMove(u, tgt, "balanced", cls)
        raise EngineInvariantError(
            "classified as having an improving move, but none was found")

    if cls.rank == LEAF_UNBALANCED:
        non_leaves = frozenset(v for v in verts if v not in view.leaves)
        for u in sorted(view.leaves):
            tgt = closest(u, allowed=non_leaves)
            if tgt is not None:
                return SelectedMove(u, tgt, "lu-a", cls)
        for u in verts:
            if u == ROOT or u in view.leaves:
                continue
            tgt = closest(u, allowed=non_leaves)
            if tgt is not None:
                return SelectedMove(u, tgt, "lu-b", cls)
        for cut in sorted(cls.charges.by_cut):
            recs = cls.charges.by_cut[cut]
            chargers_nl = [r.vertex for r in recs if not r.leaf]
            chargers_lf = sorted(r.vertex for r in recs if r.leaf)
            if not chargers_nl or not chargers_lf:
                continue
            if len(chargers_nl) > 1:
                raise EngineInvariantError(
                    f"leaf-unbalanced state has {len(chargers_nl)} non-leaf "
                    f"chargers at cut {cut}")
            u = chargers_nl[0]
            for v in chargers_lf:
                if is_legal_improving(state, u, v, view):
                    if not state.instance.cost(u, v) < pow2(cut[0]):
                        raise EngineInvariantError(
                            f"co-members {u},{v} of a level-{cut[0]} component "
                            f"are {state.instance.cost(u, v)} apart")
                    return SelectedMove(u, v, "lu-c", cls, context_cut=cut)
            raise ClosureViolationError(
                f"cut {cut} is charged by non-leaf {u} and leaves "
                f"{chargers_lf}, but no move between them improves",
                details={"cut": str(cut), "non_leaf": u, "leaves": chargers_lf},
            )
        for u in verts:
            if u == ROOT:
                continue
            tgt = closest(u)
            if tgt is not None:
                if u not in view.leaves or tgt not in view.leaves:
                    raise ClosureViolationError(
                        f"fallback move {u}->{tgt} should be leaf-to-leaf "
                        "after the three leaf-unbalanced rules are exhausted",
                        details={"mover": u, "target": tgt},
                    )
                return SelectedMove(u, tgt, "lu-d", cls)
        raise ClosureViolationError(
            "unbalanced state admits no improving tree move at all",
            details={"cuts": {str(k): [r.vertex for r in v]
                              for k, v in cls.charges.by_cut.items()
                              if len(v) > 1}},
        )

    # non-leaf-unbalanced
    c1, c2 = cls.heavy_chargers  # (last mover, the other charger)
    if is_legal_improving(state, c1, c2, view):
        mover, other = c1, c2
    elif is_legal_improving(state, c2, c1, view):
        mover, other = c2, c1
    else:
        raise ClosureViolationError(
            f"neither charger of the special cut {cls.heavy_cut} has an "
            f"improving move to the other ({c1} <-> {c2})",
            details={"cut": str(cls.heavy_cut), "chargers": [c1, c2]},
        )
    tgt = closest(mover)
    if tgt is None:
        raise EngineInvariantError(
            f"{mover} improves toward {other} yet has no closest target")
    if not state.instance.cost(mover, tgt) < pow2(cls.heavy_cut[0]):
        raise EngineInvariantError(
            f"closest target {tgt} of {mover} is farther than the special "
            f"cut's diameter bound 2^{cls.heavy_cut[0]}")
    return SelectedMove(mover, tgt, "nlu", cls, context_cut=cls.heavy_cut)


# ---------------------------------------------------------------------------
# applying moves, with the class-transition contract


@dataclass(frozen=True)
class MoveRecord:
    index: int  # position within the epoch, 0-based
    mover: int
    target: int
    tag: str
    move_cost: Fraction
    pre_rank: int
    post_rank: int
    phi_pre: Fraction
    phi_post: Fraction
    mover_new_cut: tuple
    pre_heavy_cut: Optional[tuple]
    post_heavy_cut: Optional[tuple]
    context_cut: Optional[tuple]
    mover_was_leaf: bool
    target_was_leaf: bool


def _assert_move_contract(sel: SelectedMove, post: StateClass, new_cut) -> None:
    """Each rule promises where the move may land; breaches raise loudly."""
    tag = sel.tag
    if tag in ("lu-a", "lu-d"):
        if post.rank > LEAF_UNBALANCED:
            raise ClosureViolationError(
                f"a {tag} move left a {post.name} state",
                details={"tag": tag, "mover": sel.mover, "target": sel.target},
            )
        return
    if post.rank != NONLEAF_UNBALANCED:
        return
    if tag in ("balanced", "lu-b"):
        # only the mover's fresh charge can have crowded a cut
        if post.heavy_cut != new_cut:
            raise ClosureViolationError(
                f"a {tag} move crowded cut {post.heavy_cut}, not the mover's "
                f"new cut {new_cut}",
                details={"tag": tag, "heavy": str(post.heavy_cut),
                         "mover_cut": str(new_cut)},
            )
    elif tag in ("lu-c", "nlu"):
        if post.heavy_cut == sel.context_cut:
            raise ClosureViolationError(
                f"a {tag} move left its own context cut {sel.context_cut} "
                "crowded",
                details={"tag": tag, "cut": str(sel.context_cut)},
            )


def _apply_move(state, family, sel, view, phi, index):
    move_cost = state.instance.cost(sel.mover, sel.target)
    new_state = tree_follow_move(state, sel.mover, sel.target)
    new_phi = potential(new_state)
    if not new_phi < phi:
        raise EngineInvariantError(
            f"move {sel.mover}->{sel.target} did not lower the potential "
            f"({phi} -> {new_phi})")
    new_view = tree_view(new_state)
    post = classify(new_state, family, new_view)
    new_cut = family.component_of(sel.mover, charge_level(move_cost))
    _assert_move_contract(sel, post, new_cut)
    record = MoveRecord(
        index=index, mover=sel.mover, target=sel.target, tag=sel.tag,
        move_cost=move_cost, pre_rank=sel.before.rank, post_rank=post.rank,
        phi_pre=phi, phi_post=new_phi, mover_new_cut=new_cut,
        pre_heavy_cut=sel.before.heavy_cut, post_heavy_cut=post.heavy_cut,
        context_cut=sel.context_cut,
        mover_was_leaf=sel.mover in view.leaves,
        target_was_leaf=sel.target in view.leaves,
    )
    return new_state, new_view, post, new_phi, record


# ---------------------------------------------------------------------------
# the equilibrium-preserving runner


@dataclass(frozen=True)
class EpochRecord:
    index: int
    kind: str  # "arrive" | "depart"
    post_event_rank: int
    moves: tuple
    phi_end: Fraction
    cost_end: Fraction
    agents_end: int


@dataclass(frozen=True)
class RunResult:
    state: RoutingState
    family: DualFamily
    epochs: tuple
    verdict: Optional[EquilibriumVerdict]
    accounting: Optional[AccountingReport]


def _reveal_for_event(state, family, event):
    seen = set(state.revealed)
    order = []
    wanted = ()
    if isinstance(event, ArrivalEvent):
        wanted = tuple(event.reveal) + event.vertices()
    for v in wanted:
        if v not in seen:
            seen.add(v)
            order.append(v)
    if order:
        state = with_revealed(state, order)
        family.extend(state.instance, order)
    return state


def _arrival_path(state, view, item, *, adopt_tree_paths):
    v = item.vertex
    if adopt_tree_paths and state.is_active(v):
        path = state.paths[v]
    elif adopt_tree_paths and v in view:
        path = view.path_to_root(v)
    else:
        path = best_response(state, v).path
        if adopt_tree_paths:
            # into an equilibrium, a new terminal grafts by one fresh edge
            w = path[1]
            if w not in view or path[1:] != view.path_to_root(w):
                raise EngineInvariantError(
                    f"arrival at {v} routed {path} instead of attaching to "
                    "the tree by a single fresh edge")
    if item.expect_path is not None and tuple(item.expect_path) != tuple(path):
        raise EngineInvariantError(
            f"scheduled arrival at {v} expected path {item.expect_path}, "
            f"but the engine chose {path}")
    return path


def _apply_arrival(state, event, *, batch_order, adopt_tree_paths):
    if batch_order == "snapshot":
        base_view = tree_view(state)
        plans = [(it, _arrival_path(state, base_view, it,
                                    adopt_tree_paths=adopt_tree_paths))
                 for it in event.items]
        for it, path in plans:
            state = add_terminal(state, it.vertex, it.count, path)
        return state
    if batch_order != "sequential":
        raise ConfigError(f"unknown batch order {batch_order!r}")
    for it in event.items:
        path = _arrival_path(state, tree_view(state), it,
                             adopt_tree_paths=adopt_tree_paths)
        state = add_terminal(state, it.vertex, it.count, path)
    return state


def _check_departure(state, event):
    missing = [v for v in event.vertices if not state.is_active(v)]
    if missing:
        raise ConfigError(f"departure of vertices with no agents: {missing}")


def run_epoch_eqp(state, family, event, *, epoch_index=0,
                  batch_order="sequential", on_move=None,
                  ceiling_factor=MOVE_CEILING_FACTOR):
    """One event, then prioritized moves until balanced equilibrium again."""
    state = _reveal_for_event(state, family, event)
    if isinstance(event, ArrivalEvent):
        kind = "arrive"
        state = _apply_arrival(state, event, batch_order=batch_order,
                               adopt_tree_paths=True)
        allowed_rank = LEAF_UNBALANCED
    elif isinstance(event, DepartureEvent):
        kind = "depart"
        _check_departure(state, event)
        state = prune_departures(state, event.vertices)
        allowed_rank = BALANCED
    else:
        raise EngineInvariantError(f"unknown event object {event!r}")

    view = tree_view(state)
    cls = classify(state, family, view)
    if cls.rank > allowed_rank:
        raise ClosureViolationError(
            f"state is {cls.name} immediately after a {kind} event "
            f"(allowed: {CLASS_NAMES[allowed_rank]} or tighter)",
            details={"epoch": epoch_index, "kind": kind, "rank": cls.rank},
        )

    post_event_rank = cls.rank
    phi = potential(state)
    ceiling = ceiling_factor * len(state.revealed) ** 3
    moves = []
    while cls.rank != BALANCED_EQUILIBRIUM:
        sel = select_tree_move(state, family, view=view, cls=cls)
        state, view, cls, phi, record = _apply_move(
            state, family, sel, view, phi, len(moves))
        moves.append(record)
        if on_move is not None:
            on_move(epoch_index, record)
        if len(moves) > ceiling:
            raise EngineInvariantError(
                f"epoch {epoch_index} exceeded the move ceiling {ceiling}")

    rec = EpochRecord(
        index=epoch_index, kind=kind, post_event_rank=post_event_rank,
        moves=tuple(moves), phi_end=phi, cost_end=solution_cost(state),
        agents_end=sum(state.counts.values()),
    )
    return state, rec


def run_eqp(instance, events, *, batch_order="sequential", on_move=None,
            verify=True, accounting=True,
            ceiling_factor=MOVE_CEILING_FACTOR) -> RunResult:
    """Run a whole schedule under equilibrium-preserving dynamics."""
    check_schedule(instance, events)
    state = initial_state(instance)
    family = DualFamily(instance)
    family.insert(ROOT)
    epochs = []
    for i, ev in enumerate(events):
        state, rec = run_epoch_eqp(
            state, family, ev, epoch_index=i, batch_order=batch_order,
            on_move=on_move, ceiling_factor=ceiling_factor)
        epochs.append(rec)
    verdict = verify_equilibrium(state) if verify else None
    if verdict is not None and not verdict.ok:
        raise VerificationError(
            f"final state is not an equilibrium: {verdict.witness}")
    report = logn_accounting(state, family) if accounting else None
    return RunResult(state, family, tuple(epochs), verdict, report)


# ---------------------------------------------------------------------------
# the one-shot (non-rerouting) runner


@dataclass(frozen=True)
class EventRecord:
    index: int
    kind: str
    marker: str  # class name, or "non-tree" / "beyond-nonleaf-unbalanced"
    phi: Fraction
    cost: Fraction
    agents: int


def _class_marker(state, family) -> str:
    # Skips the equilibrium scan: per-event markers only need the upper
    # rungs, and the scan would make long schedules quadratic per event.
    try:
        return classify(state, family, decide_equilibrium=False).name
    except ClosureViolationError:
        return "beyond-nonleaf-unbalanced"
    except EngineInvariantError:
        return "non-tree"


def run_noneqp(instance, events, *, batch_order="sequential", verify=True,
               on_event=None) -> RunResult:
    """Run a schedule where nobody ever reroutes after arriving.

    Arrivals always compute a full best response (an arrival at an occupied
    vertex must agree with the incumbents' path; anything else is a modeling
    error and raises).  With verify=True the final state must pass the full
    equilibrium sweep, else VerificationError.
    """
    check_schedule(instance, events)
    state = initial_state(instance)
    family = DualFamily(instance)
    family.insert(ROOT)
    rows = []
    for i, ev in enumerate(events):
        state = _reveal_for_event(state, family, ev)
        if isinstance(ev, ArrivalEvent):
            kind = "arrive"
            state = _apply_arrival(state, ev, batch_order=batch_order,
                                   adopt_tree_paths=False)
        else:
            kind = "depart"
            _check_departure(state, ev)
            state = prune_departures(state, ev.vertices)
        row = EventRecord(
            index=i, kind=kind, marker=_class_marker(state, family),
            phi=potential(state), cost=solution_cost(state),
            agents=sum(state.counts.values()),
        )
        rows.append(row)
        if on_event is not None:
            on_event(row)
    verdict = verify_equilibrium(state) if verify else None
    if verdict is not None and not verdict.ok:
        raise VerificationError(
            f"final state is not an equilibrium: {verdict.witness}")
    return RunResult(state, family, tuple(rows), verdict, None)
