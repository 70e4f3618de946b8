"""Power-law fits and the small deterministic optimizers used by the pipelines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "PowerLawFit",
    "fit_power_law",
    "top_octaves",
    "OptimizeResult",
    "optimize_scalar",
    "optimize_grid2",
]

_GOLD = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class PowerLawFit:
    """y = prefactor * N**exponent, fitted on logs over ``fit_range``."""

    exponent: float
    prefactor: float
    r_squared: float
    fit_range: tuple

    def __call__(self, n):
        return self.prefactor * np.asarray(n, dtype=float) ** self.exponent


def fit_power_law(points: Sequence[tuple]) -> PowerLawFit:
    pts = [(float(n), float(y)) for n, y in points]
    if len(pts) < 3:
        raise ValueError("a power-law fit needs at least three points")
    n, y = np.array(pts).T
    if np.any(n <= 0) or np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise ValueError("power-law fits need positive, finite N and y")
    x, ly = np.log(n), np.log(y)
    slope, icpt = np.polyfit(x, ly, 1)
    resid = ly - (slope * x + icpt)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 if ss_tot == 0 else 1.0 - np.sum(resid**2) / ss_tot
    return PowerLawFit(float(slope), float(math.exp(icpt)), float(min(max(r2, 0.0), 1.0)),
                       (float(n.min()), float(n.max())))


def top_octaves(points: Sequence[tuple], octaves: float) -> list:
    """Points whose N lies within ``octaves`` doublings of the largest N."""
    nmax = max(p[0] for p in points)
    return [p for p in points if p[0] >= nmax / 2**octaves * (1 - 1e-12)]


@dataclass(frozen=True)
class OptimizeResult:
    x: object
    fun: float
    flagged: bool = False
    evaluations: int = 0
    message: str = ""


def _finite(v: float) -> bool:
    return v is not None and math.isfinite(v)


def optimize_scalar(f: Callable[[float], float], bracket: tuple, budget: int = 60,
                    grid: int = 0, xtol: float = 1e-9) -> OptimizeResult:
    """Minimize ``f`` on ``bracket`` by golden-section search.

    With ``grid > 0`` the bracket is first sampled on that many points and the
    search is restricted to the cell around the best sample.  Infinite values
    are skipped.  If the samples are not unimodal around the final bracket the
    best point seen is returned with ``flagged=True``.
    """
    a, b = map(float, bracket)
    if not b > a:
        raise ValueError("bracket must satisfy a < b")
    seen = []

    def ev(x):
        v = float(f(x))
        seen.append((x, v))
        return v

    if grid:
        xs = np.linspace(a, b, int(grid))
        vs = [ev(x) for x in xs]
        ok = [i for i, v in enumerate(vs) if _finite(v)]
        if not ok:
            raise ValueError("objective is infinite on the whole grid")
        i = min(ok, key=lambda k: vs[k])
        a, b = xs[max(i - 1, 0)], xs[min(i + 1, len(xs) - 1)]
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = ev(c), ev(d)
    n = 0
    while n < budget and (b - a) > xtol * max(1.0, abs(a) + abs(b)):
        if (fc if _finite(fc) else math.inf) < (fd if _finite(fd) else math.inf):
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = ev(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = ev(d)
        n += 1
    finite = [(x, v) for x, v in seen if _finite(v)]
    if not finite:
        raise ValueError("objective is infinite at every evaluated point")
    xbest, vbest = min(finite, key=lambda p: p[1])
    inner = min((p for p in finite if a - 1e-15 <= p[0] <= b + 1e-15), key=lambda p: p[1],
                default=None)
    flagged = inner is None or inner[1] > vbest + 1e-12 * max(1.0, abs(vbest))
    msg = "objective not unimodal; best sample returned" if flagged else ""
    return OptimizeResult(float(xbest), float(vbest), flagged, len(seen), msg)


def optimize_grid2(f: Callable[[float, float], float], grids: tuple, refine: int = 2,
                   points: int = 5) -> OptimizeResult:
    """Coarse 2-D grid search followed by ``refine`` rounds of local regridding.

    Each round lays a ``points`` x ``points`` grid over the cells adjacent to
    the current best point.
    """
    gx, gy = (np.asarray(g, dtype=float) for g in grids)
    if len(gx) < 2 or len(gy) < 2:
        raise ValueError("each grid needs at least two points")
    best = (None, math.inf)
    count = 0

    def scan(xs, ys):
        nonlocal best, count
        for x in xs:
            for y in ys:
                v = float(f(x, y))
                count += 1
                if _finite(v) and v < best[1]:
                    best = ((float(x), float(y)), v)

    scan(gx, gy)
    if best[0] is None:
        raise ValueError("objective is infinite on the whole grid")
    hx, hy = np.diff(gx).max(), np.diff(gy).max()
    for _ in range(refine):
        (x0, y0) = best[0]
        xs = np.clip(np.linspace(x0 - hx, x0 + hx, points), gx.min(), gx.max())
        ys = np.clip(np.linspace(y0 - hy, y0 + hy, points), gy.min(), gy.max())
        scan(np.unique(xs), np.unique(ys))
        hx, hy = 2 * hx / (points - 1), 2 * hy / (points - 1)
    return OptimizeResult(best[0], best[1], False, count)
