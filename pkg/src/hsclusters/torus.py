"""Geometry of the flat 3-torus [0, 2*pi)^3.

Collision prediction walks the line of relative motion through the cubic
cells of the periodic lattice (one cell per image of the partner sphere).
A sphere of diameter ``eps < pi/2`` around an image never leaves that
image's cell, so the first cell whose image is hit gives the earliest
contact.  Restricted to one relative period this visits exactly the 27
nearest images.
"""

from __future__ import annotations

import math

import numba
import numpy as np

TWO_PI = 2.0 * math.pi

# grazing contacts: impact parameter within this relative distance of eps
GRAZE_TOL = 1e-12


def wrap(p) -> np.ndarray:
    """Reduce each coordinate of ``p`` into ``[0, 2*pi)``."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"cannot wrap non-finite coordinates {p!r}")
    out = np.mod(p, TWO_PI)
    # np.mod may round tiny negatives up to exactly 2*pi
    out[out >= TWO_PI] = 0.0
    return out


def minimal_image(a, b) -> np.ndarray:
    """Representative of ``a - b`` with every component in ``[-pi, pi)``."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - TWO_PI * np.floor((d + math.pi) / TWO_PI)


def torus_distance(a, b) -> float:
    return float(np.linalg.norm(minimal_image(a, b)))


@numba.njit(cache=True)
def _min_image_1d(d):
    return d - TWO_PI * math.floor((d + math.pi) / TWO_PI)


@numba.njit(cache=True)
def _pair_time(dx, dy, dz, vx, vy, vz, eps, horizon):
    """Earliest approaching contact of a pair, or inf.

    ``(dx, dy, dz)`` is the minimal-image displacement x_i - x_j and
    ``(vx, vy, vz)`` the relative velocity v_i - v_j.  Only contacts with
    ``0 <= s <= horizon`` are reported.
    """
    a = vx * vx + vy * vy + vz * vz
    if a == 0.0:
        return math.inf
    eps2 = eps * eps
    graze = GRAZE_TOL * a * eps2
    # lattice cell currently holding the relative position; the contact
    # with cell m is |d + v s - 2 pi m| = eps
    mx = 0
    my = 0
    mz = 0
    half = 0.5 * TWO_PI
    if vx > 0.0:
        sx, tmx, tdx = 1, (half - dx) / vx, TWO_PI / vx
    elif vx < 0.0:
        sx, tmx, tdx = -1, (-half - dx) / vx, -TWO_PI / vx
    else:
        sx, tmx, tdx = 0, math.inf, math.inf
    if vy > 0.0:
        sy, tmy, tdy = 1, (half - dy) / vy, TWO_PI / vy
    elif vy < 0.0:
        sy, tmy, tdy = -1, (-half - dy) / vy, -TWO_PI / vy
    else:
        sy, tmy, tdy = 0, math.inf, math.inf
    if vz > 0.0:
        sz, tmz, tdz = 1, (half - dz) / vz, TWO_PI / vz
    elif vz < 0.0:
        sz, tmz, tdz = -1, (-half - dz) / vz, -TWO_PI / vz
    else:
        sz, tmz, tdz = 0, math.inf, math.inf
    while True:
        ex = dx - TWO_PI * mx
        ey = dy - TWO_PI * my
        ez = dz - TWO_PI * mz
        b = ex * vx + ey * vy + ez * vz
        if b < 0.0:
            c = ex * ex + ey * ey + ez * ez - eps2
            disc = b * b - a * c
            if disc > graze:
                # stable form of (-b - sqrt(disc)) / a
                s = c / (-b + math.sqrt(disc))
                if s < 0.0:
                    s = 0.0
                if s <= horizon:
                    return s
                return math.inf
        # advance to the next cell along the line
        if tmx <= tmy and tmx <= tmz:
            if tmx > horizon:
                return math.inf
            mx += sx
            tmx += tdx
        elif tmy <= tmz:
            if tmy > horizon:
                return math.inf
            my += sy
            tmy += tdy
        else:
            if tmz > horizon:
                return math.inf
            mz += sz
            tmz += tdz


def collision_time(x_rel, v_rel, eps: float, horizon: float | None = None):
    """Time until two spheres first touch while approaching, or ``None``.

    ``x_rel`` is the minimal-image displacement x_i - x_j, ``v_rel`` the
    relative velocity v_i - v_j.  By default the search covers one relative
    period, ``2*pi / |v_rel|``.
    """
    x = np.asarray(x_rel, dtype=float)
    v = np.asarray(v_rel, dtype=float)
    if not (0.0 < eps < math.pi / 2):
        raise ValueError(f"eps must lie in (0, pi/2), got {eps}")
    dist = float(np.linalg.norm(x))
    if dist < eps * (1.0 - 1e-6):
        raise ValueError(
            f"overlapping spheres: |x_rel| = {dist!r} < eps = {eps!r}; state is corrupted"
        )
    speed = float(np.linalg.norm(v))
    if speed == 0.0:
        return None
    if horizon is None:
        horizon = TWO_PI / speed
    s = _pair_time(x[0], x[1], x[2], v[0], v[1], v[2], float(eps), float(horizon))
    return None if math.isinf(s) else float(s)
