"""Reference solvers: exact brute force for tiny instances, nearest neighbour, 2-OPT."""

from itertools import permutations

import numpy as np

from .instance import Solution, check_solution, join_routes, split_routes

MAX_BRUTE_FORCE_N = 8
IMPROVEMENT_EPS = 1e-10


def _split_cost(dist, demands, capacity, perm):
    """Optimal depot-return placement for a fixed customer order (Bellman over split points).

    Returns ``(cost, breaks)`` where ``breaks`` are the route start positions.
    """
    n = len(perm)
    best = np.full(n + 1, np.inf)
    best[0] = 0.0
    back = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        if not np.isfinite(best[i]):
            continue
        load = 0
        inner = 0.0
        for j in range(i, n):
            load += demands[perm[j]]
            if load > capacity:
                break
            if j > i:
                inner += dist[perm[j - 1], perm[j]]
            cost = best[i] + dist[0, perm[i]] + inner + dist[perm[j], 0]
            if cost < best[j + 1]:
                best[j + 1] = cost
                back[j + 1] = i
    breaks, j = [], n
    while j > 0:
        breaks.append(back[j])
        j = back[j]
    return best[n], breaks[::-1]


def _split_all(dist, demands, capacity, perms):
    """Vectorised split over many permutations at once; returns each optimum cost."""
    p, n = perms.shape
    dem = demands[perms]
    cum_dem = np.concatenate([np.zeros((p, 1), dtype=np.int64), np.cumsum(dem, axis=1)], axis=1)
    legs = dist[perms[:, :-1], perms[:, 1:]]
    cum_len = np.concatenate([np.zeros((p, 1)), np.cumsum(legs, axis=1)], axis=1)
    out_leg = dist[0, perms]
    best = np.full((p, n + 1), np.inf)
    best[:, 0] = 0.0
    for j in range(1, n + 1):
        for i in range(j):
            ok = cum_dem[:, j] - cum_dem[:, i] <= capacity
            cost = best[:, i] + out_leg[:, i] + (cum_len[:, j - 1] - cum_len[:, i]) + out_leg[:, j - 1]
            best[:, j] = np.where(ok, np.minimum(best[:, j], cost), best[:, j])
    return best[:, n]


def brute_force_optimal(inst):
    """Provably optimal solution for ``n <= 8`` customers.

    Every customer order is split optimally into capacity-feasible routes;
    among equal-cost optima the lexicographically first order wins.
    """
    n = inst.n
    if n > MAX_BRUTE_FORCE_N:
        raise ValueError(f"brute force is limited to n <= {MAX_BRUTE_FORCE_N}, got {n}")
    dist = inst.distances()
    demands = np.asarray(inst.demands)
    perms = np.array(list(permutations(range(1, n + 1))), dtype=np.int64)
    costs = _split_all(dist, demands, inst.capacity, perms)
    k = int(np.argmin(costs))
    perm = [int(c) for c in perms[k]]
    _, breaks = _split_cost(dist, demands, inst.capacity, perm)
    routes = [perm[b:e] for b, e in zip(breaks, breaks[1:] + [n])]
    return Solution.from_visits(inst, join_routes(routes))


def nearest_neighbor(inst):
    """Go to the nearest customer that still fits; return to the depot when none does."""
    dist = inst.distances()
    demands = inst.demands
    unvisited = np.ones(inst.n + 1, dtype=bool)
    unvisited[0] = False
    pos, load = 0, inst.capacity
    visits = []
    while unvisited.any():
        cand = np.flatnonzero(unvisited & (demands <= load))
        if cand.size == 0:
            visits.append(0)
            pos, load = 0, inst.capacity
            continue
        # argmin returns the lowest index among ties
        nxt = int(cand[np.argmin(dist[pos, cand])])
        visits.append(nxt)
        unvisited[nxt] = False
        load -= int(demands[nxt])
        pos = nxt
    return Solution.from_visits(inst, visits)


def route_length(dist, route):
    path = [0] + list(route) + [0]
    return float(sum(dist[a, b] for a, b in zip(path, path[1:])))


def best_reversal(dist, route):
    """Best single segment reversal of one route as ``(gain, i, j)``; gain <= 0 if none helps."""
    path = [0] + list(route) + [0]
    best = (0.0, -1, -1)
    k = len(route)
    for i in range(1, k):
        a, c = path[i - 1], path[i]
        for j in range(i + 1, k + 1):
            e, f = path[j], path[j + 1]
            gain = dist[a, c] + dist[e, f] - dist[a, e] - dist[c, f]
            if gain > best[0]:
                best = (gain, i, j)
    return best


def two_opt_route(dist, route):
    route = list(route)
    while True:
        gain, i, j = best_reversal(dist, route)
        if gain <= IMPROVEMENT_EPS:
            return route
        # path positions i..j are route positions i-1..j-1
        route[i - 1 : j] = route[i - 1 : j][::-1]


def two_opt(inst, sol):
    """Best-improvement 2-OPT inside each route; route membership is never changed."""
    check_solution(inst, sol)
    dist = inst.distances()
    routes = [two_opt_route(dist, r) for r in split_routes(sol)]
    return Solution.from_visits(inst, join_routes(routes))


def is_two_opt_local(inst, sol, eps=IMPROVEMENT_EPS):
    dist = inst.distances()
    return all(best_reversal(dist, r)[0] <= eps for r in split_routes(sol, inst))
