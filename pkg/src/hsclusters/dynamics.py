"""Event-driven hard-sphere flow on the 3-torus.

Pair collisions are scheduled in a binary heap.  Each particle owns at most
one live heap entry: its earliest predicted collision, or a *wakeup* entry
at the end of its prediction horizon when nothing was found.  Entries carry
the collision counters of both particles at prediction time; a popped entry
whose counters are stale is dropped, and its owner is re-predicted if the
owner itself has not collided since.

Positions are synchronized lazily: particle ``i`` stores its position at
``last_update[i]`` and is only advanced when it collides, or when the whole
system is synchronized at the end of a run.
"""

from __future__ import annotations

import contextlib
import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .torus import TWO_PI, _min_image_1d, _pair_time, minimal_image, wrap

OVERLAP_RTOL = 1e-6


class OverlapError(RuntimeError):
    """Two spheres were found closer than their diameter."""


@dataclass
class ParticleState:
    position: np.ndarray
    velocity: np.ndarray
    last_update: float


@dataclass
class SystemState:
    positions: np.ndarray
    velocities: np.ndarray
    eps: float
    current_time: float = 0.0
    last_update: np.ndarray | None = None
    collision_counts: np.ndarray | None = None

    def __post_init__(self):
        if self.is_precise:
            # multi-precision state from the precise engine; kept as is
            self.positions = np.asarray(self.positions, dtype=object).reshape(-1, 3)
            self.velocities = np.asarray(self.velocities, dtype=object).reshape(-1, 3)
            n = len(self.positions)
            if self.last_update is None:
                self.last_update = np.array([self.current_time] * n, dtype=object)
            if self.collision_counts is None:
                self.collision_counts = np.zeros(n, dtype=np.int64)
            return
        self.positions = wrap(np.array(self.positions, dtype=float).reshape(-1, 3))
        self.velocities = np.array(self.velocities, dtype=float).reshape(-1, 3)
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities must have the same shape")
        if not np.all(np.isfinite(self.velocities)):
            raise ValueError("velocities must be finite")
        n = len(self.positions)
        if self.last_update is None:
            self.last_update = np.full(n, float(self.current_time))
        else:
            self.last_update = np.array(self.last_update, dtype=float)
        if self.collision_counts is None:
            self.collision_counts = np.zeros(n, dtype=np.int64)
        else:
            self.collision_counts = np.array(self.collision_counts, dtype=np.int64)

    @property
    def n_particles(self) -> int:
        return len(self.positions)

    @property
    def is_precise(self) -> bool:
        return getattr(self.positions, "dtype", None) == object

    def to_float(self) -> "SystemState":
        """Plain float64 copy (rounds a precise state)."""
        if not self.is_precise:
            return self.copy()
        f = lambda a: np.array([float(x) for x in np.ravel(a)]).reshape(np.shape(a))
        return SystemState(f(self.positions), f(self.velocities), self.eps,
                           float(self.current_time), f(self.last_update), self.collision_counts)

    def particle(self, i: int) -> ParticleState:
        return ParticleState(self.positions[i].copy(), self.velocities[i].copy(), float(self.last_update[i]))

    def copy(self) -> "SystemState":
        return SystemState(
            self.positions.copy(),
            self.velocities.copy(),
            self.eps,
            self.current_time,
            self.last_update.copy(),
            self.collision_counts.copy(),
        )

    def synchronized(self) -> "SystemState":
        """Copy with every position advanced to ``current_time``."""
        out = self.copy()
        if self.is_precise:
            from .precise import context_for, wrap_precise

            with context_for(self.positions, self.velocities, self.last_update):
                dt = (self.current_time - self.last_update)[:, None]
                out.positions = wrap_precise(self.positions + self.velocities * dt)
        else:
            dt = (self.current_time - self.last_update)[:, None]
            out.positions = wrap(self.positions + self.velocities * dt)
        out.last_update[:] = self.current_time
        return out

    def kinetic_energy(self) -> float:
        return 0.5 * float(np.sum(self.velocities**2))

    def momentum(self) -> np.ndarray:
        return self.velocities.sum(axis=0)

    def min_distance(self) -> float:
        """Smallest pairwise torus distance (positions synchronized first)."""
        if self.n_particles < 2:
            return math.inf
        return float(np.sqrt(_min_pair_dist2(self.to_float().synchronized().positions)))


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    i: int
    j: int
    omega: np.ndarray
    v_i_pre: np.ndarray
    v_j_pre: np.ndarray
    v_i_post: np.ndarray
    v_j_post: np.ndarray


@dataclass
class CollisionLog:
    """Time-ordered collisions of one run, stored column-wise.

    Times are measured from the start of the run, so ``0 <= time <= duration``.
    """

    n_particles: int
    eps: float
    duration: float
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    omegas: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    v_pre: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 3)))
    v_post: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 3)))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        m = len(self.times)
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(m, 2)
        self.omegas = np.asarray(self.omegas, dtype=float).reshape(m, 3)
        self.v_pre = np.asarray(self.v_pre, dtype=float).reshape(m, 2, 3)
        self.v_post = np.asarray(self.v_post, dtype=float).reshape(m, 2, 3)

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, k: int) -> CollisionEvent:
        i, j = self.pairs[k]
        return CollisionEvent(
            float(self.times[k]), int(i), int(j), self.omegas[k].copy(),
            self.v_pre[k, 0].copy(), self.v_pre[k, 1].copy(),
            self.v_post[k, 0].copy(), self.v_post[k, 1].copy(),
        )

    @property
    def events(self) -> list[CollisionEvent]:
        return [self[k] for k in range(len(self))]

    @classmethod
    def from_pairs(cls, n_particles: int, entries, duration: float | None = None, eps: float = 0.0):
        """Scripted log from ``(time, i, j)`` triples; kinematics are zero-filled.

        Entries are sorted by time.  Handy for testing the cluster algorithms.
        """
        entries = sorted((float(t), min(i, j), max(i, j)) for t, i, j in entries)
        times = [e[0] for e in entries]
        if duration is None:
            duration = times[-1] if times else 0.0
        m = len(entries)
        return cls(
            n_particles, eps, float(duration), times,
            [(e[1], e[2]) for e in entries],
            np.zeros((m, 3)), np.zeros((m, 2, 3)), np.zeros((m, 2, 3)),
        )

    def to_text(self) -> str:
        lines = [
            f"# hsclusters collision log: n_particles={self.n_particles} "
            f"eps={self.eps:.17g} duration={self.duration:.17g} events={len(self)}",
            "# time i j omega_x omega_y omega_z vi_pre(3) vj_pre(3) vi_post(3) vj_post(3)",
        ]
        for k in range(len(self)):
            i, j = self.pairs[k]
            nums = np.concatenate([self.omegas[k], self.v_pre[k].ravel(), self.v_post[k].ravel()])
            lines.append(f"{self.times[k]:.17g} {i} {j} " + " ".join(f"{x:.17g}" for x in nums))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CollisionLog":
        rows = text.splitlines()
        header = parse_header(rows[0])
        data = [r.split() for r in rows if r.strip() and not r.startswith("#")]
        m = len(data)
        arr = np.array(data, dtype=float).reshape(m, 18)
        return cls(
            int(header["n_particles"]), float(header["eps"]), float(header["duration"]),
            arr[:, 0], arr[:, 1:3].astype(np.int64), arr[:, 3:6],
            arr[:, 6:12].reshape(m, 2, 3), arr[:, 12:18].reshape(m, 2, 3),
        )

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path) -> "CollisionLog":
        return cls.from_text(Path(path).read_text())


def parse_header(line: str) -> dict[str, str]:
    """``key=value`` tokens of a ``#`` header line."""
    return dict(tok.split("=", 1) for tok in line.lstrip("#").split() if "=" in tok)


def state_to_text(state: SystemState) -> str:
    s = state.synchronized()
    lines = [
        f"# hsclusters state: n_particles={s.n_particles} eps={s.eps:.17g} "
        f"time={s.current_time:.17g}",
        "# x y z vx vy vz",
    ]
    for x, v in zip(s.positions, s.velocities):
        lines.append(" ".join(f"{c:.17g}" for c in (*x, *v)))
    return "\n".join(lines) + "\n"


def state_from_text(text: str) -> SystemState:
    rows = text.splitlines()
    header = parse_header(rows[0])
    data = np.array([r.split() for r in rows if r.strip() and not r.startswith("#")], dtype=float)
    data = data.reshape(-1, 6)
    return SystemState(data[:, :3], data[:, 3:], float(header["eps"]), float(header["time"]))


# ---------------------------------------------------------------------------
# compiled kernels

@numba.njit(cache=True)
def _min_pair_dist2(pos):
    n = pos.shape[0]
    best = math.inf
    for i in range(n):
        for j in range(i + 1, n):
            dx = _min_image_1d(pos[i, 0] - pos[j, 0])
            dy = _min_image_1d(pos[i, 1] - pos[j, 1])
            dz = _min_image_1d(pos[i, 2] - pos[j, 2])
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
    return best


@numba.njit(cache=True)
def _predict(p, now, pos, vel, tlast, eps, horizon):
    """Earliest collision of particle ``p`` after ``now``.

    Returns ``(delay, partner, min_dist2)``; ``delay`` is inf and
    ``partner`` -1 when nothing happens within ``horizon``.
    """
    n = pos.shape[0]
    dtp = now - tlast[p]
    px = pos[p, 0] + vel[p, 0] * dtp
    py = pos[p, 1] + vel[p, 1] * dtp
    pz = pos[p, 2] + vel[p, 2] * dtp
    best = math.inf
    partner = -1
    mind2 = math.inf
    for k in range(n):
        if k == p:
            continue
        dtk = now - tlast[k]
        dx = _min_image_1d(px - pos[k, 0] - vel[k, 0] * dtk)
        dy = _min_image_1d(py - pos[k, 1] - vel[k, 1] * dtk)
        dz = _min_image_1d(pz - pos[k, 2] - vel[k, 2] * dtk)
        d2 = dx * dx + dy * dy + dz * dz
        if d2 < mind2:
            mind2 = d2
        s = _pair_time(dx, dy, dz, vel[p, 0] - vel[k, 0], vel[p, 1] - vel[k, 1],
                       vel[p, 2] - vel[k, 2], eps, horizon)
        if s < best:
            best = s
            partner = k
    return best, partner, mind2


@numba.njit(cache=True)
def _predict_all(now, pos, vel, tlast, eps, horizon):
    """Per-particle earliest collision, each pair solved once."""
    n = pos.shape[0]
    best = np.full(n, math.inf)
    partner = np.full(n, -1, dtype=np.int64)
    mind2 = math.inf
    for i in range(n):
        dti = now - tlast[i]
        ix = pos[i, 0] + vel[i, 0] * dti
        iy = pos[i, 1] + vel[i, 1] * dti
        iz = pos[i, 2] + vel[i, 2] * dti
        for j in range(i + 1, n):
            dtj = now - tlast[j]
            dx = _min_image_1d(ix - pos[j, 0] - vel[j, 0] * dtj)
            dy = _min_image_1d(iy - pos[j, 1] - vel[j, 1] * dtj)
            dz = _min_image_1d(iz - pos[j, 2] - vel[j, 2] * dtj)
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < mind2:
                mind2 = d2
            s = _pair_time(dx, dy, dz, vel[i, 0] - vel[j, 0], vel[i, 1] - vel[j, 1],
                           vel[i, 2] - vel[j, 2], eps, horizon)
            if s < best[i]:
                best[i] = s
                partner[i] = j
            if s < best[j]:
                best[j] = s
                partner[j] = i
    return best, partner, mind2


# ---------------------------------------------------------------------------

def reflect(v_i, v_j, omega):
    """Elastic hard-sphere collision with contact normal ``omega``.

    ``omega`` points from j to i.  The pair must be incoming,
    ``omega . (v_i - v_j) < 0``.
    """
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if abs(float(np.dot(omega, omega)) - 1.0) > 2e-12:
        raise ValueError(f"contact normal is not a unit vector: {omega!r}")
    w = float(np.dot(omega, v_i - v_j))
    if not w < 0.0:
        raise ValueError(f"pair is not incoming (omega.(v_i - v_j) = {w!r}); scheduling bug")
    return v_i - omega * w, v_j + omega * w


def default_horizon(velocities: np.ndarray) -> float:
    """Prediction horizon: eight box crossings at the rms relative speed.

    Pairs are only solved this far ahead; particles with nothing scheduled
    get a wakeup entry instead.  Longer horizons cost proportionally more per
    prediction, shorter ones cost more wakeups.
    """
    if len(velocities) == 0:
        return 1.0
    v2 = float(np.mean(np.sum(velocities**2, axis=1)))
    if v2 == 0.0:
        return 1.0
    return 8.0 * TWO_PI / math.sqrt(2.0 * v2)


class _Engine:
    """Mutable working copy of a state plus its event queue."""

    def __init__(self, state: SystemState, horizon: float):
        self.pos = state.positions.copy()
        self.vel = state.velocities.copy()
        self.tlast = state.last_update.copy()
        self.counts = state.collision_counts.copy()
        self.eps = float(state.eps)
        self.now = float(state.current_time)
        self.horizon = float(horizon)
        self.heap: list[tuple] = []
        self.min_ok = self.eps * (1.0 - OVERLAP_RTOL)

    def _time(self, t):
        return float(t)

    def dump(self) -> str:
        return (f"time={self.now!r} eps={self.eps!r}\npositions(last update)=\n{self.pos!r}\n"
                f"last_update={self.tlast!r}\nvelocities=\n{self.vel!r}")

    def _schedule(self, p: int, delay: float, q: int) -> None:
        if q < 0 or delay > self.horizon:
            heapq.heappush(self.heap, (self.now + self.horizon, p, -1, int(self.counts[p]), -1, p))
        else:
            i, j = (p, q) if p < q else (q, p)
            heapq.heappush(
                self.heap, (self.now + delay, i, j, int(self.counts[i]), int(self.counts[j]), p)
            )

    def start(self) -> None:
        n = len(self.pos)
        if n < 2:
            return
        best, partner, mind2 = _predict_all(self.now, self.pos, self.vel, self.tlast,
                                            self.eps, self.horizon)
        if math.sqrt(mind2) < self.min_ok:
            raise OverlapError(f"initial configuration overlaps: min distance "
                               f"{math.sqrt(mind2)!r} < eps\n{self.dump()}")
        for p in range(n):
            self._schedule(p, float(best[p]), int(partner[p]))

    def repredict(self, p: int) -> float:
        delay, q, mind2 = _predict(p, self.now, self.pos, self.vel, self.tlast,
                                   self.eps, self.horizon)
        self._schedule(p, delay, q)
        return mind2

    def collide(self, i: int, j: int):
        now = self.now
        for p in (i, j):
            self.pos[p] = wrap(self.pos[p] + self.vel[p] * (now - self.tlast[p]))
            self.tlast[p] = now
        d = minimal_image(self.pos[i], self.pos[j])
        r = math.sqrt(float(np.dot(d, d)))
        if r < self.min_ok:
            raise OverlapError(f"pair ({i}, {j}) at distance {r!r} < eps at collision\n{self.dump()}")
        omega = d / r
        vi, vj = self.vel[i].copy(), self.vel[j].copy()
        vi_post, vj_post = reflect(vi, vj, omega)
        self.vel[i] = vi_post
        self.vel[j] = vj_post
        self.counts[i] += 1
        self.counts[j] += 1
        for p in (i, j):
            mind2 = self.repredict(p)
            if math.sqrt(mind2) < self.min_ok:
                raise OverlapError(f"particle {p} overlaps another sphere after collision "
                                   f"with distance {math.sqrt(mind2)!r}\n{self.dump()}")
        return omega, vi, vj, vi_post, vj_post

    def run(self, t_end: float, max_events: int | None, t0: float) -> dict:
        t_end = self._time(t_end)
        rec = {"times": [], "pairs": [], "omegas": [], "v_pre": [], "v_post": []}
        heap = self.heap
        counts = self.counts
        n_events = 0
        while heap and heap[0][0] <= t_end:
            if max_events is not None and n_events >= max_events:
                break
            t, i, j, ci, cj, owner = heapq.heappop(heap)
            self.now = t
            if j < 0:
                if counts[i] == ci:
                    self.repredict(i)
                continue
            if counts[i] != ci or counts[j] != cj:
                if counts[owner] == (ci if owner == i else cj):
                    self.repredict(owner)
                continue
            omega, vi, vj, vi_post, vj_post = self.collide(i, j)
            n_events += 1
            rec["times"].append(t - t0)
            rec["pairs"].append((i, j))
            rec["omegas"].append(omega)
            rec["v_pre"].append((vi, vj))
            rec["v_post"].append((vi_post, vj_post))
        if max_events is None or n_events < max_events:
            self.now = t_end
        return rec

    def to_state(self) -> SystemState:
        dt = (self.now - self.tlast)[:, None]
        pos = wrap(self.pos + self.vel * dt) if len(self.pos) else self.pos
        return SystemState(pos, self.vel, self.eps, self.now,
                           np.full(len(self.pos), self.now), self.counts)


def evolve(
    state: SystemState,
    t_end: float,
    *,
    max_events: int | None = None,
    horizon: float | None = None,
    precision: int | None = None,
) -> tuple[SystemState, CollisionLog]:
    """Run the hard-sphere flow from ``state.current_time`` to ``t_end``.

    With ``max_events`` the run stops right after that many collisions (the
    returned state is then at the time of the last one) unless ``t_end``
    comes first.  The input state is not modified; the returned state is
    fully synchronized.

    ``precision`` (bits) switches to the MPFR engine and returns a precise
    state; the log is always float64.
    """
    t0 = state.current_time
    if not t_end > t0:
        raise ValueError(f"t_end={t_end!r} must exceed current time {t0!r}")
    if math.isinf(t_end) and max_events is None:
        raise ValueError("an unbounded run needs max_events")
    if horizon is None:
        horizon = default_horizon(state.to_float().velocities if state.is_precise else state.velocities)
    if precision is not None or state.is_precise:
        from .precise import DEFAULT_BITS, PreciseEngine

        engine = PreciseEngine(state, horizon, precision or DEFAULT_BITS)
    else:
        engine = _Engine(state, horizon)
    engine.start()
    rec = engine.run(t_end, max_events, t0)
    final = engine.to_state()
    log = CollisionLog(
        state.n_particles, float(state.eps), float(final.current_time - t0),
        rec["times"], rec["pairs"], rec["omegas"], rec["v_pre"], rec["v_post"],
    )
    return final, log


def evolve_backward(state: SystemState, duration: float, **kwargs) -> tuple[SystemState, CollisionLog]:
    """Flow backward in time by ``duration``.

    Implemented as velocity reversal, a forward run, and reversal again.  The
    log is that of the reversed run: its times count elapsed backward time
    and its velocities are those of the reversed motion.
    """
    rev = state.synchronized()
    # mpfr negation rounds to the ambient precision too
    with _arithmetic_context(state, kwargs.get("precision")):
        rev.velocities = -rev.velocities
        t_end = rev.current_time + duration
    out, log = evolve(rev, t_end, **kwargs)
    with _arithmetic_context(state, kwargs.get("precision")):
        out.velocities = -out.velocities
        out.current_time = state.current_time - (out.current_time - rev.current_time)
    out.last_update[:] = out.current_time
    return out, log


def _arithmetic_context(state: SystemState, precision: int | None):
    if precision is None and not state.is_precise:
        return contextlib.nullcontext()
    from .precise import DEFAULT_BITS, bits_of, precision_context

    bits = max(precision or DEFAULT_BITS, bits_of(state.positions) if state.is_precise else 0)
    return precision_context(bits)
