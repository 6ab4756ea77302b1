"""Independent reference computations used by the tests.

None of these share code paths with the package beyond plain numpy.
"""

from __future__ import annotations

import itertools
import math

import numba
import numpy as np

TWO_PI = 2.0 * math.pi


@numba.njit(cache=True)
def _torus_gap(x, v, s, eps):
    d2 = 0.0
    for c in range(3):
        y = x[c] + v[c] * s
        y = y - TWO_PI * math.floor(y / TWO_PI + 0.5)
        d2 += y * y
    return math.sqrt(d2) - eps


@numba.njit(cache=True)
def stepping_collision_time(x, v, eps):
    """First contact by fine time stepping of the torus distance plus bisection.

    Steps of 1e-4 * eps / |v| over one relative period; returns -1.0 for a miss.
    """
    speed = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
    if speed == 0.0:
        return -1.0
    h = 1e-4 * eps / speed
    horizon = TWO_PI / speed
    n_steps = int(horizon / h) + 1
    prev = _torus_gap(x, v, 0.0, eps)
    for k in range(1, n_steps + 1):
        s = min(k * h, horizon)
        g = _torus_gap(x, v, s, eps)
        if prev > 0.0 and g <= 0.0:
            lo = s - h if k > 1 else 0.0
            hi = s
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if _torus_gap(x, v, mid, eps) > 0.0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-15:
                    break
            return 0.5 * (lo + hi)
        prev = g
    return -1.0


IMAGES = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float) * TWO_PI


def image_enumeration_time(x, v, eps):
    """Smallest approaching root over the 27 images within one period, or None."""
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    a = v @ v
    if a == 0:
        return None
    best = None
    for shift in IMAGES:
        d = x + shift
        b = d @ v
        c = d @ d - eps * eps
        disc = b * b - a * c
        if b >= 0 or disc <= 1e-12 * a * eps * eps:
            continue
        s = (-b - math.sqrt(disc)) / a
        if 0 <= s <= TWO_PI / math.sqrt(a) and (best is None or s < best):
            best = s
    return best


def random_prediction_instance(rng, aimed: bool):
    """Random (x_rel, v_rel, eps); aimed instances head for a random image."""
    eps = rng.uniform(0.2, 1.5)
    while True:
        x = rng.uniform(-math.pi, math.pi, 3)
        if np.linalg.norm(x) > eps * 1.01:
            break
    if aimed:
        target = rng.integers(-1, 2, 3) * TWO_PI
        off = rng.normal(size=3)
        off *= rng.uniform(0, 1.2 * eps) / np.linalg.norm(off)
        direction = -(x + target) + off
        speed = rng.uniform(0.3, 3.0)
        v = direction / np.linalg.norm(direction) * speed
    else:
        v = rng.normal(size=3)
    return x, v, eps


def rescan_backward_cluster(times, pairs, root, t, t_star=0.0):
    """Member set of the backward cluster by fixed-point rescanning.

    Repeatedly sweeps the whole log in stored (ascending) order, so
    information travels backward only one step per sweep; each sweep admitting a particle j through an event (i, j) at time s only
    if i is already a member whose own admission time is later than s.
    Stops when nothing changes.  Returns {member: admission time}.
    """
    joined = {root: math.inf}
    changed = True
    while changed:
        changed = False
        for k in range(len(times)):
            s = times[k]
            if not (t_star <= s <= t):
                continue
            i, j = pairs[k]
            for a, b in ((i, j), (j, i)):
                if a in joined and joined[a] > s and joined.get(b, -math.inf) < s:
                    joined[b] = s
                    changed = True
    joined.pop(root)
    return joined


def rescan_forward_cluster(times, pairs, root, t):
    joined = {root: -math.inf}
    changed = True
    while changed:
        changed = False
        for k in reversed(range(len(times))):
            s = times[k]
            if s > t:
                continue
            i, j = pairs[k]
            for a, b in ((i, j), (j, i)):
                if a in joined and joined[a] < s:
                    if b not in joined or joined[b] > s:
                        changed = True
                        joined[b] = s
    joined.pop(root)
    return joined
