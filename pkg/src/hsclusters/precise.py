"""Multi-precision variant of the event engine (MPFR through gmpy2).

Hard-sphere dynamics at low density amplifies perturbations by roughly
``2 * mean_free_path / eps`` per collision, so float64 trajectories lose all
memory of their round-off after a dozen collisions.  Running the same event
logic in MPFR with a few hundred bits makes forward/backward round trips
exact to far below any test tolerance for small systems.

Precise states carry ``object`` arrays of ``mpfr``; pass them back into
``evolve(..., precision=bits)`` to keep full precision across calls.
"""

from __future__ import annotations

import heapq
import math

import gmpy2
import numpy as np
from gmpy2 import mpfr

from .dynamics import OVERLAP_RTOL, OverlapError, SystemState, _Engine

DEFAULT_BITS = 256


def precision_context(bits: int):
    return gmpy2.context(gmpy2.get_context(), precision=bits)


def _two_pi():
    return 2 * gmpy2.const_pi()


def to_precise(a) -> np.ndarray:
    """Exact conversion of a float (or already precise) array to mpfr objects."""
    a = np.asarray(a)
    out = np.empty(a.shape, dtype=object)
    flat = out.reshape(-1)
    for k, x in enumerate(a.reshape(-1)):
        flat[k] = mpfr(x)
    return out


def to_float(a) -> np.ndarray:
    return np.array([float(x) for x in np.asarray(a).reshape(-1)]).reshape(np.shape(a))


def bits_of(a) -> int:
    """Largest mpfr precision found in ``a`` (DEFAULT_BITS if none)."""
    bits = [x.precision for x in np.asarray(a, dtype=object).reshape(-1) if isinstance(x, type(mpfr(0)))]
    return max(bits, default=DEFAULT_BITS)


def context_for(*arrays):
    """gmpy2 context wide enough for arithmetic on the given precise values."""
    return precision_context(max(bits_of(a) for a in arrays))


def wrap_precise(p) -> np.ndarray:
    # arithmetic outside a wide context would silently round to 53 bits
    with context_for(p):
        two_pi = _two_pi()
        out = np.empty(np.shape(p), dtype=object)
        flat = out.reshape(-1)
        for k, x in enumerate(np.asarray(p).reshape(-1)):
            y = x - two_pi * gmpy2.floor(x / two_pi)
            flat[k] = y if y < two_pi else mpfr(0)
    return out


def _min_image(d, two_pi, pi):
    return d - two_pi * gmpy2.floor((d + pi) / two_pi)


def pair_time(d, v, eps, horizon, two_pi):
    """Same lattice-cell walk as the compiled kernel, in MPFR."""
    a = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    if a == 0:
        return None
    eps2 = eps * eps
    graze = mpfr("1e-12") * a * eps2
    half = two_pi / 2
    m = [0, 0, 0]
    step = [0, 0, 0]
    t_next = [None, None, None]
    t_delta = [None, None, None]
    for c in range(3):
        if v[c] > 0:
            step[c], t_next[c], t_delta[c] = 1, (half - d[c]) / v[c], two_pi / v[c]
        elif v[c] < 0:
            step[c], t_next[c], t_delta[c] = -1, (-half - d[c]) / v[c], -two_pi / v[c]
    while True:
        e = [d[c] - two_pi * m[c] for c in range(3)]
        b = e[0] * v[0] + e[1] * v[1] + e[2] * v[2]
        if b < 0:
            cc = e[0] * e[0] + e[1] * e[1] + e[2] * e[2] - eps2
            disc = b * b - a * cc
            if disc > graze:
                s = cc / (-b + gmpy2.sqrt(disc))
                if s < 0:
                    s = mpfr(0)
                return s if s <= horizon else None
        live = [c for c in range(3) if step[c] != 0]
        c = min(live, key=lambda k: (t_next[k], k))
        if t_next[c] > horizon:
            return None
        m[c] += step[c]
        t_next[c] += t_delta[c]


class PreciseEngine(_Engine):
    def __init__(self, state: SystemState, horizon: float, bits: int):
        self.bits = bits
        with precision_context(bits):
            super().__init__(state, horizon)
            self.pos = to_precise(state.positions)
            self.vel = to_precise(state.velocities)
            self.tlast = to_precise(state.last_update)
            self.now = mpfr(state.current_time)
            self.eps_p = mpfr(state.eps)
            self.horizon = mpfr(horizon)
            self.min_ok = self.eps_p * (1 - mpfr(OVERLAP_RTOL))
            self.two_pi = _two_pi()
            self.pi = gmpy2.const_pi()

    def _time(self, t):
        return mpfr(t)

    def _position(self, k, now):
        return [self.pos[k, c] + self.vel[k, c] * (now - self.tlast[k]) for c in range(3)]

    def _pair(self, p, k, xp):
        xk = self._position(k, self.now)
        d = [_min_image(xp[c] - xk[c], self.two_pi, self.pi) for c in range(3)]
        v = [self.vel[p, c] - self.vel[k, c] for c in range(3)]
        d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
        return pair_time(d, v, self.eps_p, self.horizon, self.two_pi), d2

    def _check(self, d2, what):
        if gmpy2.sqrt(d2) < self.min_ok:
            raise OverlapError(f"{what}: distance {float(gmpy2.sqrt(d2))!r} < eps\n{self.dump()}")

    def start(self) -> None:
        with precision_context(self.bits):
            self._start()

    def _start(self) -> None:
        n = len(self.pos)
        if n < 2:
            return
        best = [None] * n
        partner = [-1] * n
        for i in range(n):
            xi = self._position(i, self.now)
            for j in range(i + 1, n):
                s, d2 = self._pair(i, j, xi)
                self._check(d2, f"initial configuration overlaps ({i}, {j})")
                if s is None:
                    continue
                if best[i] is None or s < best[i]:
                    best[i], partner[i] = s, j
                if best[j] is None or s < best[j]:
                    best[j], partner[j] = s, i
        for p in range(n):
            self._schedule(p, best[p], partner[p])

    def _schedule(self, p, delay, q):
        if q < 0 or delay is None or delay > self.horizon:
            heapq.heappush(self.heap, (self.now + self.horizon, p, -1, int(self.counts[p]), -1, p))
        else:
            i, j = (p, q) if p < q else (q, p)
            heapq.heappush(
                self.heap, (self.now + delay, i, j, int(self.counts[i]), int(self.counts[j]), p)
            )

    def repredict(self, p: int):
        xp = self._position(p, self.now)
        best, partner, mind2 = None, -1, None
        for k in range(len(self.pos)):
            if k == p:
                continue
            s, d2 = self._pair(p, k, xp)
            if mind2 is None or d2 < mind2:
                mind2 = d2
            if s is not None and (best is None or s < best):
                best, partner = s, k
        self._schedule(p, best, partner)
        return mind2

    def collide(self, i: int, j: int):
        now = self.now
        for p in (i, j):
            self.pos[p] = wrap_precise(self._position(p, now))
            self.tlast[p] = now
        d = [_min_image(self.pos[i, c] - self.pos[j, c], self.two_pi, self.pi) for c in range(3)]
        r = gmpy2.sqrt(sum(x * x for x in d))
        if r < self.min_ok:
            raise OverlapError(f"pair ({i}, {j}) at distance {float(r)!r} < eps at collision")
        w = [x / r for x in d]
        vi = list(self.vel[i])
        vj = list(self.vel[j])
        c = sum(w[k] * (vi[k] - vj[k]) for k in range(3))
        if not c < 0:
            raise ValueError(f"pair ({i}, {j}) is not incoming; scheduling bug")
        for k in range(3):
            self.vel[i, k] = vi[k] - w[k] * c
            self.vel[j, k] = vj[k] + w[k] * c
        self.counts[i] += 1
        self.counts[j] += 1
        for p in (i, j):
            mind2 = self.repredict(p)
            if mind2 is not None:
                self._check(mind2, f"particle {p} overlaps after collision")
        return (
            to_float(w), to_float(vi), to_float(vj),
            to_float(self.vel[i]), to_float(self.vel[j]),
        )

    def run(self, t_end, max_events, t0):
        with precision_context(self.bits):
            rec = super().run(t_end, max_events, t0)
        rec["times"] = [float(t) for t in rec["times"]]
        return rec

    def to_state(self) -> SystemState:
        with precision_context(self.bits):
            pos = np.empty_like(self.pos)
            for k in range(len(self.pos)):
                pos[k] = wrap_precise(self._position(k, self.now))
            return SystemState(pos, self.vel.copy(), self.eps, self.now,
                               np.array([self.now] * len(self.pos), dtype=object), self.counts)
