"""Independent reference implementations shared by the unit and acceptance
tests: exact-cost Dijkstra on grids and arbitrary-precision basis functions."""
import heapq
import math

import mpmath
import numpy as np

SQ2 = math.sqrt(2.0)


class Cost:
    """a + b*sqrt(2) with exact ordering by integer arithmetic."""

    __slots__ = ("a", "b")

    def __init__(self, a, b):
        self.a, self.b = a, b

    def __lt__(self, o):
        da, db = self.a - o.a, o.b - self.b  # self < o  <=>  da < db*sqrt2
        if da < 0 and db >= 0:
            return True
        if da >= 0 and db <= 0:
            return False
        if da < 0:  # both negative
            return da * da > 2 * db * db
        return da * da < 2 * db * db


def dijkstra_oracle(grid, start, goal):
    """Plain Dijkstra (no heuristic) with exact costs."""
    if grid[start] or grid[goal]:
        return None
    rows, cols = grid.shape
    best = {start: Cost(0, 0)}
    heap = [(Cost(0, 0), 0, start)]
    tick = 0
    done = set()
    while heap:
        c, _, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == goal:
            return (c.a, c.b)
        r, q = node
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == dc == 0:
                    continue
                nr, nc = r + dr, q + dc
                if 0 <= nr < rows and 0 <= nc < cols and not grid[nr, nc]:
                    diag = int(dr != 0 and dc != 0)
                    cand = Cost(c.a + 1 - diag, c.b + diag)
                    old = best.get((nr, nc))
                    if old is None or cand < old:
                        best[(nr, nc)] = cand
                        tick += 1
                        heapq.heappush(heap, (cand, tick, (nr, nc)))
    return None


def float_dijkstra(grid, goal):
    """Distance in cells from every cell to ``goal``."""
    rows, cols = grid.shape
    dist = np.full(grid.shape, np.inf)
    if grid[goal]:
        return dist
    dist[goal] = 0.0
    heap = [(0.0, goal)]
    while heap:
        d, (r, c) = heapq.heappop(heap)
        if d > dist[r, c]:
            continue
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                nr, nc = r + dr, c + dc
                if (dr or dc) and 0 <= nr < rows and 0 <= nc < cols and not grid[nr, nc]:
                    nd = d + (SQ2 if dr and dc else 1.0)
                    if nd < dist[nr, nc]:
                        dist[nr, nc] = nd
                        heapq.heappush(heap, (nd, (nr, nc)))
    return dist


# -- basis functions --------------------------------------------------

mpmath.mp.dps = 40
C = 5.0


# -- arbitrary-precision oracles -----------------------------------------------

def mp_sph_jn(l, x):
    x = mpmath.mpf(x)
    return mpmath.sqrt(mpmath.pi / (2 * x)) * mpmath.besselj(l + mpmath.mpf(1) / 2, x)


def mp_root(l, n):
    """n-th positive zero of j_l, i.e. of J_{l+1/2}."""
    return mpmath.besseljzero(l + mpmath.mpf(1) / 2, n)


def mp_bbf(r, n, c=C):
    r = mpmath.mpf(r)
    return mpmath.sqrt(2 / mpmath.mpf(c)) * mpmath.sin(n * mpmath.pi * r / c) / r


def mp_sbf_radial(r, l, n, c=C):
    z = mp_root(l, n)
    norm = mpmath.sqrt(2 / (mpmath.mpf(c) ** 3 * mp_sph_jn(l + 1, z) ** 2))
    return norm * mp_sph_jn(l, z * mpmath.mpf(r) / c)


def mp_y0(l, theta):
    return mpmath.sqrt((2 * l + 1) / (4 * mpmath.pi)) * mpmath.legendre(l, mpmath.cos(mpmath.mpf(theta)))
