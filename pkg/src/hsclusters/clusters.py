"""Cluster statistics extracted from a collision log.

Particle indices are 0-based here; tree parent labels follow the
discovery-order convention where the root is 1, the first fresh particle 2,
and so on, so a tree is a tuple ``(k_1, ..., k_n)`` with ``1 <= k_r <= r``.

The interacting backwards flow (IBF) rebuilds a cluster trajectory from the
root state, creation times, contact normals and created velocities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .dynamics import CollisionLog, SystemState, evolve, evolve_backward
from .torus import collision_time, minimal_image, wrap

TIME_SLACK = 1e-9


@dataclass(frozen=True)
class ClusterTree:
    root: int
    n: int
    parents: tuple[int, ...]
    members: tuple[int, ...]
    creation_times: tuple[float, ...]
    recollisions: int = 0
    direction: str = "backward"

    def __post_init__(self):
        if not (len(self.parents) == len(self.members) == len(self.creation_times) == self.n):
            raise ValueError("parents, members and creation_times must all have length n")
        for r, k in enumerate(self.parents, start=1):
            if not 1 <= k <= r:
                raise ValueError(f"parent k_{r}={k} outside 1..{r}")
        if len(set(self.members)) != self.n or self.root in self.members:
            raise ValueError("members must be distinct and exclude the root")
        d = np.diff(self.creation_times)
        ok = np.all(d < 0) if self.direction == "backward" else np.all(d > 0)
        if not ok:
            raise ValueError(f"creation times not strictly monotone for a {self.direction} cluster")

    @property
    def gamma(self) -> tuple[int, ...]:
        return self.parents

    def member_set(self) -> frozenset[int]:
        return frozenset(self.members)

    def to_text(self) -> str:
        """``root n parents... members... times... recollisions``"""
        fields = [str(self.root), str(self.n)]
        fields += [str(k) for k in self.parents]
        fields += [str(i) for i in self.members]
        fields += [f"{s:.17g}" for s in self.creation_times]
        fields.append(str(self.recollisions))
        return " ".join(fields)

    @classmethod
    def from_text(cls, line: str, direction: str = "backward") -> "ClusterTree":
        tok = line.split()
        root, n = int(tok[0]), int(tok[1])
        if len(tok) != 3 + 3 * n:
            raise ValueError(f"expected {3 + 3 * n} fields for n={n}, got {len(tok)}")
        parents = tuple(int(x) for x in tok[2:2 + n])
        members = tuple(int(x) for x in tok[2 + n:2 + 2 * n])
        times = tuple(float(x) for x in tok[2 + 2 * n:2 + 3 * n])
        return cls(root, n, parents, members, times, int(tok[-1]), direction)


@numba.njit(cache=True)
def _scan(times, pairs, root, lo, hi, backward, pos_of, order, parents, ctimes):
    """Single pass over events with lo <= time <= hi.

    pos_of must be all -1 on entry and is restored on exit.  Returns
    (n, recollisions); order[0] is the root.
    """
    n_ev = len(times)
    pos_of[root] = 0
    order[0] = root
    n = 0
    rec = 0
    for step in range(n_ev):
        e = n_ev - 1 - step if backward else step
        s = times[e]
        if s < lo or s > hi:
            continue
        i = pairs[e, 0]
        j = pairs[e, 1]
        pi = pos_of[i]
        pj = pos_of[j]
        if pi >= 0 and pj >= 0:
            rec += 1
        elif pi >= 0 or pj >= 0:
            inside = pi if pi >= 0 else pj
            new = j if pi >= 0 else i
            n += 1
            order[n] = new
            pos_of[new] = n
            parents[n - 1] = inside + 1
            ctimes[n - 1] = s
    for q in range(n + 1):
        pos_of[order[q]] = -1
    return n, rec


@numba.njit(cache=True)
def _all_roots(times, pairs, n_particles, grid, lo, backward, kmax):
    g = len(grid)
    sizes = np.zeros((g, n_particles), dtype=np.int64)
    recs = np.zeros((g, n_particles), dtype=np.int64)
    trees = np.zeros((g, n_particles, kmax), dtype=np.int64)
    pos_of = -np.ones(n_particles, dtype=np.int64)
    order = np.empty(n_particles, dtype=np.int64)
    parents = np.empty(n_particles, dtype=np.int64)
    ctimes = np.empty(n_particles)
    for a in range(g):
        if backward:
            lo_a, hi_a = lo, grid[a]
        else:
            lo_a, hi_a = -np.inf, grid[a]
        for root in range(n_particles):
            n, rec = _scan(times, pairs, root, lo_a, hi_a, backward, pos_of, order, parents, ctimes)
            sizes[a, root] = n
            recs[a, root] = rec
            for q in range(min(n, kmax)):
                trees[a, root, q] = parents[q]
    return sizes, recs, trees


def _check_query(log: CollisionLog, root: int, t: float, lo: float = 0.0) -> None:
    if not 0 <= root < log.n_particles:
        raise ValueError(f"root {root} outside 0..{log.n_particles - 1}")
    if not (lo <= t <= log.duration * (1 + 1e-12) + TIME_SLACK) or lo < 0:
        raise ValueError(f"query interval [{lo}, {t}] outside the log's [0, {log.duration}]")


def _extract(log: CollisionLog, root: int, lo: float, hi: float, backward: bool) -> ClusterTree:
    n_part = log.n_particles
    pos_of = -np.ones(n_part, dtype=np.int64)
    order = np.empty(n_part, dtype=np.int64)
    parents = np.empty(n_part, dtype=np.int64)
    ctimes = np.empty(n_part)
    n, rec = _scan(log.times, log.pairs, root, lo, hi, backward, pos_of, order, parents, ctimes)
    return ClusterTree(
        root, int(n), tuple(int(k) for k in parents[:n]), tuple(int(i) for i in order[1:n + 1]),
        tuple(float(s) for s in ctimes[:n]), int(rec), "backward" if backward else "forward",
    )


def backward_cluster(log: CollisionLog, root: int, t: float, t_star: float = 0.0) -> ClusterTree:
    """Backward cluster of ``root`` at time ``t``, restricted to ``[t_star, t]``."""
    _check_query(log, root, t, t_star)
    return _extract(log, root, t_star, t, True)


def forward_cluster(log: CollisionLog, root: int, t: float) -> ClusterTree:
    """Forward cluster of ``root`` built from time 0 up to ``t``."""
    _check_query(log, root, t)
    return _extract(log, root, -math.inf, t, False)


def all_root_sizes(log: CollisionLog, grid, t_star: float = 0.0, kmax: int = 4, backward: bool = True):
    """Cluster sizes for every root at every grid time, in one compiled pass.

    Returns ``(sizes, recollisions, trees)`` with shapes ``(G, N)``, ``(G, N)``
    and ``(G, N, kmax)``; ``trees`` holds the first ``kmax`` parent labels.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1)
    for t in grid:
        _check_query(log, 0, float(t), t_star if backward else 0.0)
    return _all_roots(log.times, log.pairs, log.n_particles, grid, t_star, backward, kmax)


@dataclass(frozen=True)
class DynamicalPartition:
    partition: tuple[frozenset[int], ...]
    largest_size: int
    labels: np.ndarray = field(repr=False, compare=False)

    def block_of(self, i: int) -> frozenset[int]:
        return self.partition[self.labels[i]]


def component_labels(log: CollisionLog, t: float) -> np.ndarray:
    n = log.n_particles
    m = int(np.searchsorted(log.times, t, side="right"))
    p = log.pairs[:m]
    graph = coo_matrix((np.ones(m), (p[:, 0], p[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def largest_block_sizes(log: CollisionLog, grid) -> np.ndarray:
    return np.array([np.bincount(component_labels(log, t)).max() if log.n_particles else 0
                     for t in grid], dtype=np.int64)


@numba.njit(cache=True)
def _largest_history(pairs, n):
    parent = np.arange(n)
    size = np.ones(n, dtype=np.int64)
    out = np.empty(len(pairs), dtype=np.int64)
    best = 1 if n else 0
    for e in range(len(pairs)):
        a = pairs[e, 0]
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        b = pairs[e, 1]
        while parent[b] != b:
            parent[b] = parent[parent[b]]
            b = parent[b]
        if a != b:
            if size[a] < size[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]
            if size[a] > best:
                best = size[a]
        out[e] = best
    return out


def largest_block_history(log: CollisionLog) -> np.ndarray:
    """Largest dynamical-cluster size right after each logged event."""
    return _largest_history(log.pairs, log.n_particles)


def largest_block_at(log: CollisionLog, grid, history: np.ndarray | None = None) -> np.ndarray:
    h = largest_block_history(log) if history is None else history
    idx = np.searchsorted(log.times, np.asarray(grid, float), side="right")
    base = 1 if log.n_particles else 0
    return np.where(idx > 0, h[np.maximum(idx - 1, 0)] if len(h) else base, base)


def crossing_time(log: CollisionLog, fraction: float = 0.5) -> float:
    """First event time at which the largest block exceeds ``fraction * N`` (inf if never)."""
    h = largest_block_history(log)
    hit = np.nonzero(h > fraction * log.n_particles)[0]
    return float(log.times[hit[0]]) if len(hit) else math.inf


def dynamical_clusters(log: CollisionLog, t: float) -> DynamicalPartition:
    """Bogolyubov clusters: connected components of the collision graph on [0, t]."""
    labels = component_labels(log, t)
    blocks: list[list[int]] = [[] for _ in range(labels.max() + 1 if len(labels) else 0)]
    for i, b in enumerate(labels):
        blocks[b].append(i)
    part = tuple(frozenset(b) for b in blocks)
    return DynamicalPartition(part, max((len(b) for b in part), default=0), labels)


# interacting backwards flow ---------------------------------------------------


class IBFOverlapError(ValueError):
    """A creation puts a sphere within eps of an existing one."""

    def __init__(self, r: int, other: int, distance: float):
        super().__init__(f"creation r={r} overlaps particle {other} (distance {distance!r})")
        self.r = r
        self.other = other
        self.distance = distance


@dataclass(frozen=True)
class IBFVariables:
    gamma: tuple[int, ...]
    z1: tuple[np.ndarray, np.ndarray]
    times: tuple[float, ...]
    omegas: np.ndarray
    velocities: np.ndarray
    t: float
    t_star: float = 0.0

    def __post_init__(self):
        n = len(self.gamma)
        for r, k in enumerate(self.gamma, start=1):
            if not 1 <= k <= r:
                raise ValueError(f"k_{r}={k} outside 1..{r}")
        times = tuple(float(s) for s in self.times)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "omegas", np.asarray(self.omegas, float).reshape(n, 3))
        object.__setattr__(self, "velocities", np.asarray(self.velocities, float).reshape(n, 3))
        if len(times) != n:
            raise ValueError("need one creation time per tree node")
        chain = (self.t,) + times + (self.t_star,)
        if not all(a > b for a, b in zip(chain, chain[1:])):
            raise ValueError("creation times must be strictly decreasing inside (t_star, t)")
        if n and not np.allclose(np.linalg.norm(self.omegas, axis=1), 1.0, atol=1e-12):
            raise ValueError("omegas must be unit vectors")

    @property
    def n(self) -> int:
        return len(self.gamma)


@dataclass
class IBFKnot:
    """Configuration at ``time`` and the velocities it carries going backward."""

    time: float
    positions: np.ndarray
    velocities: np.ndarray
    event: str  # "start", "creation", "collision", "end"


@dataclass
class IBFResult:
    knots: list[IBFKnot]
    final: SystemState
    eps: float
    creation_normal_speeds: list[float]

    def segments(self):
        """Straight pieces ``(p, s_lo, s_hi, x(s_lo), v)`` of the trajectory."""
        out = []
        for a, b in zip(self.knots, self.knots[1:]):
            if b.time < a.time:
                dt = b.time - a.time
                for p in range(len(a.positions)):
                    out.append((p, b.time, a.time, wrap(a.positions[p] + a.velocities[p] * dt),
                                a.velocities[p]))
        return out

    def energy(self) -> float:
        return float(np.sum(self.final.velocities**2))

    def energies(self) -> list[tuple[float, float]]:
        """(time, sum of v^2 over existing spheres) at every knot."""
        return [(k.time, float(np.sum(k.velocities**2))) for k in self.knots]


class IBFBuilder:
    """Step-by-step construction, shared by construct_ibf and the random sampler."""

    def __init__(self, x1, v1, t: float, eps: float):
        self.eps = float(eps)
        self.state = SystemState(np.reshape(x1, (1, 3)), np.reshape(v1, (1, 3)), self.eps, t)
        self.knots = [self._knot("start")]
        self.normal_speeds: list[float] = []
        self.creation_positions: dict[int, np.ndarray] = {}

    def _knot(self, event: str) -> IBFKnot:
        s = self.state
        return IBFKnot(float(s.current_time), s.positions.copy(), s.velocities.copy(), event)

    @property
    def now(self) -> float:
        return float(self.state.current_time)

    def advance_to(self, s: float) -> None:
        """Interacting backward flow of the existing spheres down to time s."""
        while self.now > s:
            nxt, log = evolve_backward(self.state, self.now - s, max_events=1)
            if not len(log):
                nxt.current_time = s
                nxt.last_update[:] = s
                self.state = nxt
                break
            self.state = nxt
            self.knots.append(self._knot("collision"))

    def velocity(self, k: int) -> np.ndarray:
        return self.state.velocities[k].copy()

    def create(self, r: int, k: int, omega, v_new) -> None:
        """Insert particle r (the root is 0) in contact with particle k."""
        omega = np.asarray(omega, float)
        v_new = np.asarray(v_new, float)
        cur = self.state.synchronized()
        eta = cur.velocities[k]
        c = float(omega @ (v_new - eta))
        if c < 0:
            raise ValueError(f"creation r={r} is pre-collisional: omega.(v - eta) = {c!r} < 0")
        x_new = wrap(cur.positions[k] + omega * self.eps)
        d = np.linalg.norm(minimal_image(cur.positions, x_new[None, :]), axis=1)
        d[k] = np.inf
        if d.min() < self.eps:
            q = int(np.argmin(d))
            raise IBFOverlapError(r, q, float(d[q]))
        # instantaneous backward collision gives the velocities below t_r
        vel = cur.velocities.copy()
        vel[k] = eta + omega * c
        self.state = SystemState(np.vstack([cur.positions, x_new]),
                                 np.vstack([vel, v_new - omega * c]), self.eps, cur.current_time)
        self.normal_speeds.append(c)
        self.creation_positions[r] = x_new
        self.knots.append(self._knot("creation"))

    def finish(self, t_star: float) -> IBFResult:
        self.advance_to(t_star)
        self.knots.append(self._knot("end"))
        final = self.state.synchronized()
        final.collision_counts[:] = 0
        return IBFResult(self.knots, final, self.eps, list(self.normal_speeds))


def construct_ibf(vars: IBFVariables, eps: float) -> IBFResult:
    """Build the interacting backwards flow on [t_star, t].

    Creation r puts particle r (0-based; the root is particle 0) at
    ``xi_{k_r} + eps * omega_r`` with velocity ``v_{1+r}`` and applies the
    backward collision.  Raises IBFOverlapError carrying the offending ``r``
    (1-based) if the new sphere overlaps anything other than its parent.
    """
    b = IBFBuilder(vars.z1[0], vars.z1[1], vars.t, eps)
    for r in range(1, vars.n + 1):
        b.advance_to(vars.times[r - 1])
        b.create(r, vars.gamma[r - 1] - 1, vars.omegas[r - 1], vars.velocities[r - 1])
    return b.finish(vars.t_star)


def _lines_interfere(x0, v0, y0, w0, span, eps) -> bool:
    """Do two straight motions starting at x0, y0 touch within ``span``?"""
    if span <= 0:
        return False
    d = minimal_image(x0, y0)
    if np.linalg.norm(d) < eps * (1 - 1e-9):
        return True
    dv = np.asarray(v0) - np.asarray(w0)
    if not np.any(dv):
        return False
    try:
        return collision_time(d, dv, eps, horizon=span) is not None
    except ValueError:
        return True


def ghost_conflicts(res: IBFResult, vars: IBFVariables,
                    spectators: SystemState | None = None) -> list[tuple]:
    """Interference that would make the true flow differ from the IBF.

    In the true forward dynamics a created sphere keeps moving after its
    creation time with its created velocity, while the IBF drops it there;
    spectators move freely on [t_star, t].  Returns the clashing pairs among
    these free flights and between them and the IBF segments.
    """
    eps = res.eps
    creation = {r: k for r, k in zip(range(1, vars.n + 1), (k for k in res.knots if k.event == "creation"))}
    free = []  # (label, s_from, x(s_from), v)
    for r in range(1, vars.n + 1):
        knot = creation[r]
        free.append((("ghost", r), knot.time, knot.positions[r], vars.velocities[r - 1]))
    if spectators is not None:
        for q in range(spectators.n_particles):
            free.append((("spectator", q), vars.t_star, spectators.positions[q], spectators.velocities[q]))
    out = []
    segs = res.segments()
    for label, s_from, x, v in free:
        for p, lo, hi, xp, vp in segs:
            a, b = max(lo, s_from), min(hi, vars.t)
            if b > a and _lines_interfere(x + v * (a - s_from), v, xp + vp * (a - lo), vp, b - a, eps):
                out.append((label, ("ibf", p)))
    for u in range(len(free)):
        for w in range(u + 1, len(free)):
            lu, su, xu, vu = free[u]
            lw, sw, xw, vw = free[w]
            a = max(su, sw)
            if _lines_interfere(xu + vu * (a - su), vu, xw + vw * (a - sw), vw, vars.t - a, eps):
                out.append((lu, lw))
    return out


class _Redraw(Exception):
    pass


def random_ibf_variables(rng: np.random.Generator, n: int, eps: float, t: float = 1.0,
                         t_star: float = 0.0, beta: float = 1.0, max_tries: int = 1000):
    """Valid IBF variables with ``n`` creations drawn at random.

    Velocities are Maxwellian, normals uniform on the post-collisional
    hemisphere, parents uniform.  Draws whose creations overlap are redrawn.
    """
    for _ in range(max_tries):
        x1 = rng.uniform(0, 2 * math.pi, 3)
        v1 = rng.standard_normal(3) / math.sqrt(beta)
        times = np.sort(rng.uniform(t_star, t, n))[::-1]
        gamma = tuple(int(rng.integers(1, r + 1)) for r in range(1, n + 1))
        b = IBFBuilder(x1, v1, t, eps)
        omegas, vels = [], []
        try:
            if n > 1 and np.min(-np.diff(times)) < 1e-3 * (t - t_star):
                raise _Redraw
            for r in range(1, n + 1):
                b.advance_to(float(times[r - 1]))
                k = gamma[r - 1] - 1
                v = rng.standard_normal(3) / math.sqrt(beta)
                w = rng.standard_normal(3)
                w /= np.linalg.norm(w)
                c = w @ (v - b.velocity(k))
                if abs(c) < 1e-3:
                    raise _Redraw
                w = w if c > 0 else -w
                b.create(r, k, w, v)
                omegas.append(w)
                vels.append(v)
        except (_Redraw, IBFOverlapError):
            continue
        return IBFVariables(gamma, (x1, v1), tuple(float(s) for s in times),
                            np.array(omegas).reshape(n, 3), np.array(vels).reshape(n, 3), t, t_star)
    raise RuntimeError("could not draw non-overlapping IBF variables")


def far_spectators(rng, res: IBFResult, vars: IBFVariables, count: int, beta: float = 1.0,
                   max_tries: int = 10000) -> SystemState:
    """Spectator spheres whose free flights never touch the cluster or each other."""
    pos, vel = [], []
    for _ in range(max_tries):
        if len(pos) == count:
            break
        x = rng.uniform(0, 2 * math.pi, 3)
        v = rng.standard_normal(3) / math.sqrt(beta)
        trial = SystemState(np.array(pos + [x]), np.array(vel + [v]), res.eps, vars.t_star)
        if not ghost_conflicts(res, vars, trial):
            pos.append(x)
            vel.append(v)
    if len(pos) < count:
        raise RuntimeError("could not place spectators")
    return SystemState(np.array(pos).reshape(-1, 3), np.array(vel).reshape(-1, 3), res.eps, vars.t_star)


@dataclass
class RoundTrip:
    vars: IBFVariables
    tree: ClusterTree
    ok: bool
    max_time_error: float


def ibf_round_trip(vars: IBFVariables, eps: float, spectators: SystemState | None = None,
                   tol: float = 1e-8) -> RoundTrip:
    """Build the IBF, embed it among spectators, run forward, re-extract the cluster."""
    res = construct_ibf(vars, eps)
    z = res.final
    if spectators is not None and spectators.n_particles:
        z = SystemState(np.vstack([z.positions, spectators.positions]),
                        np.vstack([z.velocities, spectators.velocities]), eps, vars.t_star)
    _, log = evolve(z, vars.t)
    tree = backward_cluster(log, 0, log.duration)
    ok = tree.parents == tuple(vars.gamma) and tree.members == tuple(range(1, vars.n + 1))
    want = np.array(vars.times) - vars.t_star
    err = float(np.max(np.abs(np.array(tree.creation_times) - want))) if ok and vars.n else 0.0
    return RoundTrip(vars, tree, ok and err <= tol, err)
