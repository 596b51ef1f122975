"""Routing states, best responses, and tree-follow moves.

The heavy lifting here is comparing the engine's closed-form/screened
computations against the brute-force oracles: exhaustive path enumeration for
best responses and explicit subtree rerouting for improving-move checks.
"""

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from costshare import (
    EngineInvariantError,
    ROOT,
    add_terminal,
    best_response,
    explicit_metric,
    find_improving_tree_move,
    initial_state,
    is_improving_tree_move,
    potential,
    prune_departures,
    shared_cost,
    solution_cost,
    tree_follow_move,
    tree_path,
    tree_view,
    verify_equilibrium,
    with_revealed,
)
from costshare.routing import audit_state, is_legal_improving
from conftest import line_instance, random_metric, random_tree_state
from oracles import (
    brute_improving_tree_move,
    enumerate_best_response,
    recompute_potential,
    reroute_subtree,
    shared_cost_of,
    tree_parent_map,
    usage_from_paths,
)


def _matrix(inst):
    return [[inst.cost(i, j) for j in range(inst.n)] for i in range(inst.n)]


def _revealed_state(inst):
    return with_revealed(initial_state(inst), range(1, inst.n))


# ---------------------------------------------------------------------------
# state plumbing


def test_add_terminal_validation():
    inst = line_instance(0, 5, 9)
    state = _revealed_state(inst)
    with pytest.raises(EngineInvariantError):
        add_terminal(state, 1, 0, (1, 0))
    with pytest.raises(EngineInvariantError):
        add_terminal(state, 1, 1, (2, 0))  # path does not start at the vertex
    with pytest.raises(EngineInvariantError):
        add_terminal(state, 1, 1, (1, 2))  # does not end at the root
    with pytest.raises(EngineInvariantError):
        add_terminal(state, 1, 1, (1, 2, 1, 0))  # revisits a vertex
    hidden = with_revealed(initial_state(inst), [1])
    with pytest.raises(EngineInvariantError, match="unrevealed"):
        add_terminal(hidden, 1, 1, (1, 2, 0))


def test_add_terminal_merges_colocated_agents():
    inst = line_instance(0, 5, 9)
    state = _revealed_state(inst)
    state = add_terminal(state, 2, 1, (2, 1, 0))
    state = add_terminal(state, 2, 3, (2, 1, 0))
    assert state.counts == {2: 4}
    assert state.usage == {(1, 2): 4, (0, 1): 4}
    with pytest.raises(EngineInvariantError, match="already routed"):
        add_terminal(state, 2, 1, (2, 0))


def test_prune_departures_recomputes_usage():
    inst = line_instance(0, 5, 9)
    state = _revealed_state(inst)
    state = add_terminal(state, 1, 2, (1, 0))
    state = add_terminal(state, 2, 1, (2, 1, 0))
    out = prune_departures(state, [1])
    assert out.counts == {2: 1}
    assert out.usage == {(1, 2): 1, (0, 1): 1}
    audit_state(out)
    with pytest.raises(EngineInvariantError, match="inactive"):
        prune_departures(out, [1])


def test_prune_departures_clears_dangling_last_mover():
    inst = line_instance(0, 5, 9)
    state = _revealed_state(inst)
    state = add_terminal(state, 1, 1, (1, 0))
    state = add_terminal(state, 2, 1, (2, 0))
    moved = tree_follow_move(state, 2, 1)
    assert moved.last_mover == 2
    assert prune_departures(moved, [2]).last_mover is None
    assert prune_departures(moved, [1]).last_mover == 2  # 2 still routes


@pytest.mark.parametrize("seed", range(12))
def test_state_accounting_identities(seed):
    rng = random.Random(500 + seed)
    inst = random_metric(rng, rng.randint(3, 9))
    state = random_tree_state(rng, inst)
    audit_state(state)
    matrix = _matrix(inst)
    assert state.usage == usage_from_paths(state.paths, state.counts)
    assert potential(state) == recompute_potential(matrix, state.usage)
    # Every agent pays its shared cost; shares add up to the tree cost.
    total = sum(state.counts[t] * shared_cost(state, t) for t in state.counts)
    assert total == solution_cost(state)
    for t in state.counts:
        assert shared_cost(state, t) == shared_cost_of(matrix, state.usage, state.paths[t])


# ---------------------------------------------------------------------------
# best response


@pytest.mark.parametrize("seed", range(20))
def test_best_response_matches_exhaustive_search(seed):
    rng = random.Random(7000 + seed)
    inst = random_metric(rng, rng.randint(2, 8))
    state = random_tree_state(rng, inst)
    matrix = _matrix(inst)
    for source in range(1, inst.n):
        got = best_response(state, source)
        share, fresh, path = enumerate_best_response(
            matrix, state.counts, state.paths, source
        )
        assert (got.cost, got.fresh_edges, got.path) == (share, fresh, path)


@given(st.integers(min_value=0, max_value=2**30))
@settings(max_examples=40, deadline=None)
def test_best_response_matches_exhaustive_search_fuzz(seed):
    rng = random.Random(seed)
    inst = random_metric(rng, rng.randint(2, 7))
    state = random_tree_state(rng, inst)
    matrix = _matrix(inst)
    source = rng.randrange(1, inst.n)
    got = best_response(state, source)
    assert (got.cost, got.fresh_edges, got.path) == enumerate_best_response(
        matrix, state.counts, state.paths, source
    )


def test_best_response_prefers_fewer_fresh_edges_on_cost_ties():
    # Terminal 4 routes 4 -> 3 -> 2 -> 1 -> 0, so every edge of the chain
    # below 4 is occupied.  For an agent at 3, riding the chain costs
    # 1/2 + 2/2 + 2/2 = 5/2 with zero fresh edges; the direct edge also
    # costs 5/2 but is fresh, and loses the tie -- even though "(3, 0)"
    # precedes "(3, 2, 1, 0)" lexicographically.
    inst = explicit_metric(
        5,
        {
            (0, 1): 2, (0, 2): 3, (0, 3): Fraction(5, 2), (0, 4): 8,
            (1, 2): 2, (1, 3): 3, (1, 4): 8,
            (2, 3): 1, (2, 4): Fraction(19, 2),
            (3, 4): 10,
        },
    )
    state = _revealed_state(inst)
    state = add_terminal(state, 4, 1, (4, 3, 2, 1, 0))
    got = best_response(state, 3)
    assert got.cost == Fraction(5, 2)
    assert got.fresh_edges == 0
    assert got.path == (3, 2, 1, 0)


def test_best_response_breaks_full_ties_by_id_sequence():
    inst = explicit_metric(
        4, {(0, 1): 2, (0, 2): 2, (1, 2): 2, (1, 3): 1, (2, 3): 1, (0, 3): 3}
    )
    state = _revealed_state(inst)
    state = add_terminal(state, 1, 1, (1, 0))
    state = add_terminal(state, 2, 1, (2, 0))
    got = best_response(state, 3)
    # (3,1,0) and (3,2,0) both cost 1 + 2/2 = 2 with one fresh edge each.
    assert got.cost == 2
    assert got.path == (3, 1, 0)


def test_best_response_rejects_root_and_unrevealed():
    inst = line_instance(0, 5, 9)
    state = with_revealed(initial_state(inst), [1])
    with pytest.raises(EngineInvariantError):
        best_response(state, ROOT)
    with pytest.raises(EngineInvariantError, match="unrevealed"):
        best_response(state, 2)


def test_best_response_only_uses_revealed_vertices():
    # Vertex 2 would be a great relay, but it has not been revealed yet.
    inst = line_instance(0, 10, 9)
    state = with_revealed(initial_state(inst), [1])
    got = best_response(state, 1)
    assert got.path == (1, 0)
    grown = with_revealed(state, [2])
    grown = add_terminal(grown, 2, 1, (2, 0))
    assert best_response(grown, 1).path == (1, 2, 0)


# ---------------------------------------------------------------------------
# tree view


def test_tree_view_rejects_conflicting_parents():
    inst = line_instance(0, 5, 9, 14)
    state = _revealed_state(inst)
    state = add_terminal(state, 1, 1, (1, 0))
    state = add_terminal(state, 2, 1, (2, 1, 0))
    bad = add_terminal(state, 3, 1, (3, 1, 0))
    assert tree_view(bad)  # still a tree
    worse = add_terminal(state, 3, 1, (3, 2, 0))  # 2's parent is now 0 and 1
    with pytest.raises(EngineInvariantError, match="parent"):
        tree_view(worse)


def test_tree_path_matches_terminal_paths():
    rng = random.Random(42)
    inst = random_metric(rng, 8)
    state = random_tree_state(rng, inst)
    view = tree_view(state)
    for t, p in state.paths.items():
        assert tree_path(state, t, view) == p
    with pytest.raises(EngineInvariantError, match="not on the routing tree"):
        off = next(v for v in range(inst.n) if v not in view.children)
        tree_path(state, off, view)


def test_tree_view_parents_match_oracle():
    rng = random.Random(43)
    for _ in range(10):
        inst = random_metric(rng, rng.randint(3, 9))
        state = random_tree_state(rng, inst)
        assert tree_view(state).parent == tree_parent_map(state.paths)


# ---------------------------------------------------------------------------
# improving tree-follow moves


def _legal_pairs(state, view):
    verts = view.order
    for u in verts:
        if u == ROOT:
            continue
        for v in verts:
            if v == u or view.in_subtree(v, u):
                continue
            yield u, v


@pytest.mark.parametrize("seed", range(25))
def test_is_improving_matches_witness_oracle(seed):
    rng = random.Random(9000 + seed)
    inst = random_metric(rng, rng.randint(3, 9))
    state = random_tree_state(rng, inst)
    view = tree_view(state)
    matrix = _matrix(inst)
    for u, v in _legal_pairs(state, view):
        got = is_improving_tree_move(state, u, v, view)
        want = brute_improving_tree_move(matrix, state.counts, state.paths, u, v)
        assert got == want, (u, v, state.paths)


def test_is_improving_rejects_illegal_pairs():
    inst = line_instance(0, 5, 9)
    state = _revealed_state(inst)
    state = add_terminal(state, 2, 1, (2, 1, 0))
    view = tree_view(state)
    with pytest.raises(EngineInvariantError):
        is_improving_tree_move(state, ROOT, 1, view)
    with pytest.raises(EngineInvariantError):
        is_improving_tree_move(state, 1, 2, view)  # target inside subtree
    with pytest.raises(EngineInvariantError):
        is_improving_tree_move(state, 1, 1, view)
    assert is_legal_improving(state, ROOT, 1, view) is False
    assert is_legal_improving(state, 1, 2, view) is False
    assert is_legal_improving(state, 1, 1, view) is False


def test_improving_move_strictly_decreases_potential():
    rng = random.Random(77)
    hits = 0
    while hits < 12:
        inst = random_metric(rng, rng.randint(3, 8))
        state = random_tree_state(rng, inst)
        view = tree_view(state)
        for u, v in _legal_pairs(state, view):
            if is_improving_tree_move(state, u, v, view):
                moved = tree_follow_move(state, u, v)
                assert potential(moved) < potential(state)
                hits += 1


def test_find_improving_tree_move_is_first_in_id_order():
    rng = random.Random(78)
    for _ in range(15):
        inst = random_metric(rng, rng.randint(3, 9))
        state = random_tree_state(rng, inst)
        view = tree_view(state)
        want = None
        for u, v in sorted(_legal_pairs(state, view)):
            if is_improving_tree_move(state, u, v, view):
                want = (u, v)
                break
        assert find_improving_tree_move(state, view) == want


def test_tree_follow_move_matches_reroute_oracle():
    rng = random.Random(79)
    done = 0
    while done < 15:
        inst = random_metric(rng, rng.randint(3, 9))
        state = random_tree_state(rng, inst)
        view = tree_view(state)
        pairs = list(_legal_pairs(state, view))
        if not pairs:
            continue
        u, v = rng.choice(pairs)
        moved = tree_follow_move(state, u, v)
        assert moved.paths == reroute_subtree(state.paths, u, v)
        assert moved.usage == usage_from_paths(moved.paths, moved.counts)
        assert moved.counts == state.counts
        assert moved.last_mover == u
        audit_state(moved)
        done += 1


def test_tree_follow_move_rejects_illegal_targets():
    inst = line_instance(0, 5, 9)
    state = _revealed_state(inst)
    state = add_terminal(state, 2, 1, (2, 1, 0))
    with pytest.raises(EngineInvariantError):
        tree_follow_move(state, 1, 2)
    with pytest.raises(EngineInvariantError):
        tree_follow_move(state, ROOT, 1)


# ---------------------------------------------------------------------------
# sequential decomposition of block moves

# A block move is improving in the witness sense; peeling it into per-terminal
# reroutes (id order) must leave every single reroute strictly improving for
# the terminal that performs it.


@pytest.mark.parametrize("seed", range(15))
def test_block_moves_decompose_into_improving_steps(seed):
    rng = random.Random(11000 + seed)
    inst = random_metric(rng, rng.randint(3, 9))
    state = random_tree_state(rng, inst)
    view = tree_view(state)
    matrix = _matrix(inst)
    for u, v in _legal_pairs(state, view):
        if not is_improving_tree_move(state, u, v, view):
            continue
        after = reroute_subtree(state.paths, u, v)
        movers = sorted(t for t in state.counts if after[t] != state.paths[t])
        usage = dict(state.usage)
        for t in movers:
            k = state.counts[t]
            before_share = shared_cost_of(matrix, usage, state.paths[t])
            for e in zip(state.paths[t], state.paths[t][1:]):
                e = (min(e), max(e))
                usage[e] -= k
                if not usage[e]:
                    del usage[e]
            for e in zip(after[t], after[t][1:]):
                e = (min(e), max(e))
                usage[e] = usage.get(e, 0) + k
            assert shared_cost_of(matrix, usage, after[t]) < before_share


# ---------------------------------------------------------------------------
# move stability under other moves


def test_non_improving_pairs_stay_non_improving_after_moves():
    rng = random.Random(12000)
    checked = 0
    while checked < 60:
        inst = random_metric(rng, rng.randint(4, 9))
        state = random_tree_state(rng, inst)
        view = tree_view(state)
        pairs = list(_legal_pairs(state, view))
        dead = [(u, v) for u, v in pairs if not is_improving_tree_move(state, u, v, view)]
        live = [(u, v) for u, v in pairs if is_improving_tree_move(state, u, v, view)]
        if not dead or not live:
            continue
        for u, x in live:
            stale = [(a, b) for a, b in dead if a == u and b != x]
            if not stale:
                continue
            moved = tree_follow_move(state, u, x)
            for a, b in stale:
                assert is_legal_improving(moved, a, b) is False
                checked += 1


# ---------------------------------------------------------------------------
# equilibrium verification


def _settle(state, cap=3000):
    """Run improving tree-follow moves to a fixpoint."""
    for _ in range(cap):
        pair = find_improving_tree_move(state)
        if pair is None:
            return state
        state = tree_follow_move(state, *pair)
    raise AssertionError("did not settle")


def test_settled_states_verify_as_equilibria():
    rng = random.Random(13000)
    for _ in range(10):
        inst = random_metric(rng, rng.randint(3, 9))
        state = _settle(random_tree_state(rng, inst))
        verdict = verify_equilibrium(state)
        assert verdict.ok and verdict.witness is None
        # Downward closure: all paths sharing a vertex agree from it onward.
        for t, p in state.paths.items():
            for s, q in state.paths.items():
                common = set(p) & set(q)
                for w in common:
                    assert p[p.index(w):] == q[q.index(w):]


def test_unsettled_states_produce_witnesses():
    rng = random.Random(13500)
    found = 0
    while found < 8:
        inst = random_metric(rng, rng.randint(3, 8))
        state = random_tree_state(rng, inst)
        if find_improving_tree_move(state) is None:
            continue
        verdict = verify_equilibrium(state)
        assert not verdict.ok
        w = verdict.witness
        assert w.candidate < w.current
        matrix = _matrix(inst)
        if w.kind == "terminal":
            # The witness path really is available at the claimed price.
            share, _, _ = enumerate_best_response(
                matrix, state.counts, state.paths, w.vertex
            )
            assert share <= w.candidate < shared_cost(state, w.vertex)
        found += 1


def test_single_terminal_direct_route_is_equilibrium():
    inst = line_instance(0, 7)
    state = _revealed_state(inst)
    state = add_terminal(state, 1, 3, (1, 0))
    assert verify_equilibrium(state).ok
    assert find_improving_tree_move(state) is None
