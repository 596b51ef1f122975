"""Shared builders for randomized tests.

Everything takes an explicit random.Random so individual tests stay
reproducible; no module-level RNG state.
"""

from fractions import Fraction
import random

from costshare import (
    DualFamily,
    add_terminal,
    euclidean_instance,
    initial_state,
    metric_closure,
    with_revealed,
)


def random_metric(rng: random.Random, n: int):
    """Closure of a random connected weighted graph on n vertices.

    Weights are small rationals with mixed denominators, so exact arithmetic
    actually gets exercised (pure integers would hide Fraction bugs).
    """
    denoms = (1, 1, 2, 3, 4)
    edges = []
    seen = set()
    for v in range(1, n):
        u = rng.randrange(v)
        edges.append((u, v, Fraction(rng.randint(1, 48), rng.choice(denoms))))
        seen.add((u, v))
    for _ in range(rng.randrange(n + 1)):
        a = rng.randrange(n)
        b = rng.randrange(n)
        if a == b:
            continue
        key = (min(a, b), max(a, b))
        if key in seen:
            continue
        seen.add(key)
        edges.append((key[0], key[1], Fraction(rng.randint(1, 48), rng.choice(denoms))))
    return metric_closure(n, edges)


def line_instance(*xs):
    """Collinear rational points: distances are exact absolute differences."""
    return euclidean_instance([(Fraction(x), Fraction(0)) for x in xs])


def random_tree_state(rng: random.Random, instance, *, max_terminals=None,
                      max_count=3, chain_chance=0.35):
    """A valid routing state whose paths form a random tree.

    Terminals attach to a uniformly chosen tree vertex, sometimes through a
    chain of not-yet-used vertices (those become interior relays, so the
    generated trees have non-terminal branch points too).
    """
    n = instance.n
    state = with_revealed(initial_state(instance), range(1, n))
    pool = list(range(1, n))
    rng.shuffle(pool)
    on_tree = {0: (0,)}  # vertex -> its root path
    cap = max_terminals or max(1, n - 1)
    want = rng.randint(1, min(cap, len(pool)))
    placed = 0
    while placed < want and pool:
        t = pool.pop()
        if t in on_tree:
            continue
        chain = [t]
        while pool and rng.random() < chain_chance:
            nxt = pool[-1]
            if nxt in on_tree:
                break
            chain.append(pool.pop())
        attach = rng.choice(sorted(on_tree))
        path = tuple(chain) + on_tree[attach]
        state = add_terminal(state, t, rng.randint(1, max_count), path)
        for i, v in enumerate(chain):
            on_tree[v] = path[i:]
        placed += 1
    return state


def family_for(state) -> DualFamily:
    """Dual family with the state's revealed vertices, in revelation order."""
    family = DualFamily(state.instance)
    for v in state.revealed:
        family.insert(v)
    return family
