"""Hyperbolic time detection and expansion-time statistics.

A time n is a sigma-hyperbolic time for an orbit with log contraction
factors a_1, a_2, ... when every backward window satisfies
a_{n-k+1} + ... + a_n <= k log sigma.  Writing b_j = a_j - log sigma and
B_n for the prefix sums of b (B_0 = 0), this is equivalent to B_n being a
record minimum: B_n <= B_m for all 0 <= m < n, which a running-minimum
scan detects in linear time.

The expansion time of an orbit is the first index N from which every
running average of the a_j stays below -c.  On a finite horizon the tail
of the condition is unobservable, so results whose certifying suffix is
shorter than a guard window are reported as censored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import LogSeries, ModelSystem, circle_offset
from .errors import EmptySubset

DEFAULT_GUARD_FRAC = 0.1


@dataclass
class HyperbolicTimeSet:
    times: np.ndarray          # sorted 1-based hyperbolic times
    sigma: float
    series_length: int

    def density(self, n):
        return float(np.searchsorted(self.times, n, side="right")) / n

    def __contains__(self, n):
        i = np.searchsorted(self.times, n)
        return i < len(self.times) and self.times[i] == n


@dataclass
class ExpansionTime:
    value: int
    censored: bool
    horizon: int
    c: float


@dataclass
class TailCurve:
    """Survival curve value[i] = Leb{ quantity > n_values[i] } on a disk."""

    n_values: np.ndarray
    survival: np.ndarray
    censored_mass: float = 0.0


def pliss_times(series: LogSeries, sigma: float) -> HyperbolicTimeSet:
    """All sigma-hyperbolic times of the series, by running-minimum scan."""
    if not 0.0 < sigma < 1.0:
        raise ValueError("sigma must lie in (0, 1)")
    vals = np.asarray(series.values if isinstance(series, LogSeries) else series, dtype=float)
    if len(vals) < 1:
        raise ValueError("series must have length >= 1")
    b = vals - math.log(sigma)
    prefix = np.concatenate([[0.0], np.cumsum(b)])
    running_min = np.minimum.accumulate(prefix)
    # n >= 1 is hyperbolic iff B_n <= min over 0 <= m < n
    hyp = prefix[1:] <= running_min[:-1]
    times = np.flatnonzero(hyp) + 1
    return HyperbolicTimeSet(times=times, sigma=sigma, series_length=len(vals))


def expansion_time(series: LogSeries, c: float, horizon: int,
                   guard_frac: float = DEFAULT_GUARD_FRAC) -> ExpansionTime:
    """First N with all running averages on [N, horizon] below -c.

    The certifying suffix must be at least ``guard_frac * horizon`` long,
    otherwise the result is censored (a lucky suffix at the very end of the
    observation window says nothing about the true expansion time).
    """
    if c <= 0.0:
        raise ValueError("c must be > 0")
    vals = np.asarray(series.values if isinstance(series, LogSeries) else series, dtype=float)
    if horizon > len(vals):
        raise ValueError("horizon exceeds series length")
    n = np.arange(1, horizon + 1)
    avg = np.cumsum(vals[:horizon]) / n
    failing = np.flatnonzero(avg >= -c)
    last_fail = int(failing[-1]) + 1 if len(failing) else 0
    value = last_fail + 1
    guard = max(1, int(math.ceil(guard_frac * horizon)))
    if value > horizon - guard + 1:
        return ExpansionTime(value=horizon, censored=True, horizon=horizon, c=c)
    return ExpansionTime(value=value, censored=False, horizon=horizon, c=c)


def hyperbolic_density(series: LogSeries, sigma: float, n: int) -> float:
    """Fraction of [1, n] that are sigma-hyperbolic times."""
    vals = series.values if isinstance(series, LogSeries) else np.asarray(series)
    if n > len(vals):
        raise ValueError("n exceeds series length")
    return pliss_times(series, sigma).density(n)


def theta_pliss(c: float, sigma: float, expansion_bound: float) -> float:
    """Pliss density floor (c - c2) / (A - c2) with c2 = -log sigma.

    ``expansion_bound`` is an upper bound A on the one-step expansion logs
    -a_j.  Valid whenever 0 < c2 < c <= A.
    """
    c2 = -math.log(sigma)
    if not 0.0 < c2 < c:
        raise ValueError("need 0 < -log(sigma) < c")
    if expansion_bound <= c:
        raise ValueError("expansion bound must exceed c")
    return (c - c2) / (expansion_bound - c2)


def default_sigma(c: float) -> float:
    """Default rate sigma = exp(-c/2), splitting the NUE rate in half."""
    return math.exp(-c / 2.0)


# ---------------------------------------------------------------------------
# disk-wide scans


@dataclass
class DiskScan:
    """Pointwise expansion/hyperbolicity data over a grid on a base arc."""

    points: np.ndarray          # base coordinates of the grid
    expansion_time: np.ndarray  # pointwise E (== horizon for censored points)
    censored: np.ndarray        # bool mask
    hyp_count: np.ndarray       # number of hyperbolic times in [1, horizon]
    hyp_count_at: dict          # n -> counts in [1, n] for requested checkpoints
    max_expansion_log: float    # sup of -a_j over the whole scan
    horizon: int
    sigma: float
    c: float


def disk_grid_points(center: float, radius: float, grid: int) -> np.ndarray:
    """Cell-center sample of the base arc of given radius around center."""
    h = 2.0 * radius / grid
    return (center - radius + h * (np.arange(grid) + 0.5)) % 1.0


def disk_scan(sys: ModelSystem, points, horizon: int, sigma: float, c: float,
              checkpoints=(), guard_frac: float = DEFAULT_GUARD_FRAC) -> DiskScan:
    """Vectorized orbit scan computing E and hyperbolic-time counts per point.

    Runs the tangent cocycle along every orbit simultaneously; memory stays
    O(grid) by streaming over time instead of materializing the series.
    """
    t = np.array(points, dtype=float)
    m = len(t)
    s1 = np.zeros(m)
    s2 = np.zeros(m)
    ssum = np.zeros(m)            # prefix sum of a_j
    bsum = np.zeros(m)            # prefix sum of a_j - log sigma
    bmin = np.zeros(m)            # running minimum of bsum over m < n
    last_fail = np.zeros(m, dtype=np.int64)
    hyp_count = np.zeros(m, dtype=np.int64)
    hyp_count_at = {}
    log_sigma = math.log(sigma)
    max_neg_a = 0.0
    checkpoints = sorted(set(int(k) for k in checkpoints))
    for n in range(1, horizon + 1):
        s1n, s2n, expansion = sys.push_tangent(t, s1, s2)
        a = -np.log(expansion)
        max_neg_a = max(max_neg_a, float(np.max(-a)))
        ssum += a
        bsum += a - log_sigma
        hyp = bsum <= bmin
        hyp_count += hyp
        np.minimum(bmin, bsum, out=bmin)
        np.copyto(last_fail, n, where=(ssum >= -c * n))
        if checkpoints and n == checkpoints[0]:
            hyp_count_at[n] = hyp_count.copy()
            checkpoints.pop(0)
        t = sys.base_map(t)
        s1, s2 = s1n, s2n
    evalue = last_fail + 1
    guard = max(1, int(math.ceil(guard_frac * horizon)))
    censored = evalue > horizon - guard + 1
    evalue = np.where(censored, horizon, evalue)
    return DiskScan(points=np.array(points, dtype=float), expansion_time=evalue,
                    censored=censored, hyp_count=hyp_count, hyp_count_at=hyp_count_at,
                    max_expansion_log=max_neg_a, horizon=horizon, sigma=sigma, c=c)


def geometric_grid(horizon: int, ratio: float = 1.25) -> np.ndarray:
    """n-grid ceil(ratio^k) up to horizon, deduplicated, for log-log fits."""
    out = []
    x = 1.0
    while True:
        n = int(math.ceil(x))
        if n > horizon:
            break
        if not out or n != out[-1]:
            out.append(n)
        x *= ratio
    return np.array(out, dtype=np.int64)


def expansion_tail(sys: ModelSystem, disk_grid: int, c: float, horizon: int,
                   sigma: float | None = None, center: float = 0.25,
                   radius: float = 0.45, scan: DiskScan | None = None) -> TailCurve:
    """Survival curve Leb_D{ E > n } on a geometric n-grid.

    Censored grid points count toward the survival at every n <= horizon.
    """
    if disk_grid < 1000:
        raise ValueError("disk_grid must be >= 1000")
    if sigma is None:
        sigma = default_sigma(c)
    if scan is None:
        pts = disk_grid_points(center, radius, disk_grid)
        scan = disk_scan(sys, pts, horizon, sigma, c)
    m = len(scan.points)
    evals = np.where(scan.censored, np.iinfo(np.int64).max, scan.expansion_time)
    ngrid = geometric_grid(horizon)
    survival = np.array([np.count_nonzero(evals > n) for n in ngrid], dtype=float) / m
    return TailCurve(n_values=ngrid, survival=survival,
                     censored_mass=float(np.count_nonzero(scan.censored)) / m)


def summed_density_check(sys: ModelSystem, subset_mask, sigma: float, n: int,
                         scan: DiskScan | None = None, disk_grid: int = 2 ** 14,
                         c: float = 0.1, center: float = 0.25,
                         radius: float = 0.45) -> float:
    """Average over the subset of the hyperbolic-time density up to n.

    Computes (1/n) sum_j Leb_D(A cap H_j) / Leb_D(A), which equals the mean
    over A of the pointwise density of hyperbolic times in [1, n].  The
    caller is responsible for A avoiding { E > n }.
    """
    if scan is None:
        pts = disk_grid_points(center, radius, disk_grid)
        scan = disk_scan(sys, pts, n, sigma, c, checkpoints=(n,))
    mask = np.asarray(subset_mask, dtype=bool)
    if not mask.any():
        raise EmptySubset("subset mask selects no grid points")
    counts = scan.hyp_count_at.get(n)
    if counts is None:
        if n != scan.horizon:
            raise ValueError(f"scan has no checkpoint at n={n}")
        counts = scan.hyp_count
    return float(np.mean(counts[mask])) / n


def contraction_slack(series, sigma: float, times=None):
    """Worst relative slack of exp(sum a_j) <= sigma^k over detected times.

    For each hyperbolic time n the binding window ends at the running
    minimum of the adjusted prefix sums, so the maximum over k of
    exp(S_n - S_{n-k} - k log sigma) equals exp(B_n - min_{m<n} B_m).
    Returns max over detected times of that quantity minus one.
    """
    vals = np.asarray(series.values if isinstance(series, LogSeries) else series, dtype=float)
    b = vals - math.log(sigma)
    prefix = np.concatenate([[0.0], np.cumsum(b)])
    running_min = np.minimum.accumulate(prefix)
    if times is None:
        times = np.flatnonzero(prefix[1:] <= running_min[:-1]) + 1
    if len(times) == 0:
        return 0.0
    slack = np.exp(prefix[times] - running_min[times - 1]) - 1.0
    return float(np.max(slack))
