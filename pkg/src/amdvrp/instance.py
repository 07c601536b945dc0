"""CVRP instances and solutions: generation, feasibility, lengths and text files."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as _rng

# Vehicle capacity used for the standard problem sizes.
STANDARD_CAPACITY = {20: 30, 50: 40, 100: 50}
MAX_DEMAND = 9


def default_capacity(n):
    """Capacity for ``n`` customers: the standard value, else that of the next larger size."""
    if n in STANDARD_CAPACITY:
        return STANDARD_CAPACITY[n]
    for size in sorted(STANDARD_CAPACITY):
        if n <= size:
            return STANDARD_CAPACITY[size]
    return STANDARD_CAPACITY[max(STANDARD_CAPACITY)]


class InfeasibleSolutionError(ValueError):
    """Raised when a solution breaks a routing constraint."""

    def __init__(self, violation):
        super().__init__(str(violation))
        self.violation = violation


@dataclass(frozen=True)
class VrpInstance:
    """Depot (row 0) plus ``n`` customers with integer demands and a vehicle capacity."""

    coords: np.ndarray
    demands: np.ndarray
    capacity: int

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        demands = np.array(self.demands, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
            raise ValueError(f"coords must have shape (n+1, 2), got {coords.shape}")
        if demands.shape != (coords.shape[0],):
            raise ValueError(
                f"demands must have shape ({coords.shape[0]},), got {demands.shape}"
            )
        capacity = int(self.capacity)
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        if demands[0] != 0:
            raise ValueError("depot demand must be 0")
        if np.any(demands[1:] <= 0) or np.any(demands[1:] > capacity):
            raise ValueError("customer demands must satisfy 0 < d_i <= capacity")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coordinates must be finite")
        coords.setflags(write=False)
        demands.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "demands", demands)
        object.__setattr__(self, "capacity", capacity)

    @property
    def n(self):
        return self.coords.shape[0] - 1

    def features(self):
        """Node features ``(x, y, d_i / D)``; the depot's demand slot is 0."""
        feats = np.empty((self.n + 1, 3))
        feats[:, :2] = self.coords
        feats[:, 2] = self.demands / self.capacity
        return feats

    def distances(self):
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def subinstance(self, keep):
        """Instance restricted to the depot and the customers in ``keep``, in that order."""
        idx = [0] + [int(i) for i in keep if int(i) != 0]
        return VrpInstance(self.coords[idx], self.demands[idx], self.capacity)

    def __eq__(self, other):
        if not isinstance(other, VrpInstance):
            return NotImplemented
        return (
            self.capacity == other.capacity
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.demands, other.demands)
        )

    def __hash__(self):
        return hash((self.capacity, self.coords.tobytes(), self.demands.tobytes()))


@dataclass(frozen=True)
class Violation:
    kind: str
    index: int
    message: str

    def __str__(self):
        return f"{self.kind} at {self.index}: {self.message}"


@dataclass(frozen=True)
class Solution:
    """Visit sequence; the depot is 0 and the closing return leg is implicit."""

    visits: tuple
    length: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(int(v) for v in self.visits))

    @classmethod
    def from_visits(cls, inst, visits):
        """Build a solution and cache its length; raises on infeasible input."""
        sol = cls(tuple(visits))
        return cls(sol.visits, tour_length(inst, sol))

    def __len__(self):
        return len(self.visits)


def _as_visits(sol):
    return sol.visits if isinstance(sol, Solution) else tuple(int(v) for v in sol)


def generate_instance(n, capacity, seed):
    """Random instance: uniform coordinates in the unit square, demands uniform on 1..9."""
    if n < 1:
        raise ValueError(f"need at least one customer, got n={n}")
    if capacity < MAX_DEMAND:
        raise ValueError(f"capacity must be >= {MAX_DEMAND}, got {capacity}")
    gen = _rng.stream(seed, _rng.INSTANCE)
    coords = gen.random((n + 1, 2))
    demands = np.zeros(n + 1, dtype=np.int64)
    demands[1:] = gen.integers(1, MAX_DEMAND + 1, size=n)
    return VrpInstance(coords, demands, capacity)


def generate_batch(n, capacity, count, gen):
    """``count`` instances drawn from one generator (used for training batches)."""
    if n < 1 or capacity < MAX_DEMAND:
        raise ValueError("need n >= 1 and capacity >= 9")
    coords = gen.random((count, n + 1, 2))
    demands = np.zeros((count, n + 1), dtype=np.int64)
    demands[:, 1:] = gen.integers(1, MAX_DEMAND + 1, size=(count, n))
    return [VrpInstance(coords[i], demands[i], capacity) for i in range(count)]


def validate_solution(inst, sol):
    """Return the first violated constraint as a :class:`Violation`, or ``None``."""
    visits = _as_visits(sol)
    n = inst.n
    seen = set()
    load = 0
    route = 0
    prev = 0
    for pos, v in enumerate(visits):
        if v < 0 or v > n:
            return Violation("index", pos, f"node {v} out of range 0..{n}")
        if v == 0:
            if prev == 0:
                return Violation("consecutive_depot", pos, "depot visited twice in a row")
            route += 1
            load = 0
        else:
            if v in seen:
                return Violation("duplicate", v, f"customer {v} visited more than once")
            seen.add(v)
            load += int(inst.demands[v])
            if load > inst.capacity:
                return Violation(
                    "capacity", route, f"route {route} demand {load} exceeds {inst.capacity}"
                )
        prev = v
    if len(seen) != n:
        missing = min(set(range(1, n + 1)) - seen)
        return Violation("missing", missing, f"customer {missing} never visited")
    return None


def check_solution(inst, sol):
    violation = validate_solution(inst, sol)
    if violation is not None:
        raise InfeasibleSolutionError(violation)


def tour_length(inst, sol):
    """Closed-walk length from the depot through ``sol`` and back."""
    check_solution(inst, sol)
    path = np.array((0,) + _as_visits(sol) + (0,))
    legs = np.diff(inst.coords[path], axis=0)
    return float(np.sqrt((legs**2).sum(-1)).sum())


def split_routes(sol, inst=None):
    """Depot-separated customer sequences. ``inst`` enables the feasibility check."""
    if inst is not None:
        check_solution(inst, sol)
    routes, cur = [], []
    for v in _as_visits(sol):
        if v == 0:
            if cur:
                routes.append(cur)
            cur = []
        else:
            cur.append(v)
    if cur:
        routes.append(cur)
    return routes


def join_routes(routes):
    visits = []
    for i, r in enumerate(routes):
        if i:
            visits.append(0)
        visits.extend(int(v) for v in r)
    return tuple(visits)


# -- text formats ----------------------------------------------------------


def format_instance(inst):
    lines = [f"vrp {inst.n} {inst.capacity}"]
    for i, ((x, y), d) in enumerate(zip(inst.coords, inst.demands)):
        lines.append(f"{i} {x:.17g} {y:.17g} {int(d)}")
    return "\n".join(lines) + "\n"


def parse_instance(text):
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not lines or len(lines[0]) != 3 or lines[0][0] != "vrp":
        raise ValueError("instance header must be 'vrp <n> <capacity>'")
    try:
        n, capacity = int(lines[0][1]), int(lines[0][2])
    except ValueError as exc:
        raise ValueError(f"bad instance header: {exc}") from None
    body = lines[1:]
    if len(body) != n + 1:
        raise ValueError(f"expected {n + 1} node lines, found {len(body)}")
    coords = np.empty((n + 1, 2))
    demands = np.empty(n + 1, dtype=np.int64)
    for lineno, fields in enumerate(body, start=2):
        if len(fields) != 4:
            raise ValueError(f"line {lineno}: expected '<index> <x> <y> <demand>'")
        try:
            idx = int(fields[0])
            x, y, d = float(fields[1]), float(fields[2]), int(fields[3])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if idx != lineno - 2:
            raise ValueError(f"line {lineno}: expected index {lineno - 2}, got {idx}")
        coords[idx] = (x, y)
        demands[idx] = d
    return VrpInstance(coords, demands, capacity)


def write_instance(path, inst):
    Path(path).write_text(format_instance(inst), encoding="utf-8")


def read_instance(path):
    return parse_instance(Path(path).read_text(encoding="utf-8"))


def format_solution(sol):
    return " ".join(str(v) for v in _as_visits(sol)) + "\n"


def parse_solution(text):
    try:
        return Solution(tuple(int(tok) for tok in text.split()))
    except ValueError as exc:
        raise ValueError(f"bad solution file: {exc}") from None


def write_solution(path, sol):
    Path(path).write_text(format_solution(sol), encoding="utf-8")


def read_solution(path):
    return parse_solution(Path(path).read_text(encoding="utf-8"))
