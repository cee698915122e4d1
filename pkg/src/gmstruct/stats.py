"""Empirical SRB measure and limit-law experiments.

Correlation decay, the central limit theorem, and large deviations for
Hölder observables of the solenoid models, plus the power-law fitting
used to compare measured decay rates against the return-time tail
exponent.

All ensemble computations run as vectorized parallel orbits with the
sub-resolution dither (binary base maps would otherwise collapse onto
the fixed point once the mantissa is exhausted), seeded through a single
counter-based generator so results are reproducible bit-for-bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ModelSystem, Point
from .errors import DegenerateVariance, InsufficientData

DITHER = 2.0 ** -51


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True)
class Observable:
    """Hölder observable, normalized to sup norm <= 1.

    kinds: ``trig`` (cos(2 pi k t)), ``fiber_norm`` (|(u, v)| scaled),
    ``distance`` (3-d distance to a reference point, scaled).
    """

    kind: str
    k: int = 1
    point: tuple = (0.0, 0.0, 0.0)

    def __call__(self, t, u, v):
        if self.kind == "trig":
            return np.cos(2.0 * math.pi * self.k * np.asarray(t))
        if self.kind == "fiber_norm":
            return np.hypot(u, v)
        if self.kind == "distance":
            p = self.point
            dt = np.abs((np.asarray(t) - p[0] + 0.5) % 1.0 - 0.5)
            d = np.sqrt(dt ** 2 + (np.asarray(u) - p[1]) ** 2
                        + (np.asarray(v) - p[2]) ** 2)
            return d / math.sqrt(0.25 + 2.0)      # diameter bound of S^1 x D^2
        if self.kind == "constant":
            return np.ones_like(np.asarray(t, dtype=float))
        raise ValueError(f"unknown observable kind {self.kind!r}")


def trig_base(k: int = 1) -> Observable:
    return Observable(kind="trig", k=k)


def fiber_norm() -> Observable:
    return Observable(kind="fiber_norm")


def distance_to(point) -> Observable:
    return Observable(kind="distance", point=tuple(point))


# ---------------------------------------------------------------------------
# orbits


def _advance(sys, t, u, v, rng):
    t, u, v = sys.step_arrays(t, u, v)
    t = (t + rng.random(np.shape(t)) * DITHER) % 1.0
    return t, u, v


def _ensemble_series(sys, observables, walkers, steps, burn, seed):
    """Per-step observable values over a burned-in vectorized ensemble.

    Returns a list of arrays of shape (steps, walkers), one per observable.
    """
    rng = _rng(seed)
    t = rng.random(walkers)
    u = np.zeros(walkers)
    v = np.zeros(walkers)
    for _ in range(burn):
        t, u, v = _advance(sys, t, u, v, rng)
    out = [np.empty((steps, walkers)) for _ in observables]
    for j in range(steps):
        for row, phi in zip(out, observables):
            row[j] = phi(t, u, v)
        t, u, v = _advance(sys, t, u, v, rng)
    return out


# ---------------------------------------------------------------------------
# SRB measure


@dataclass
class EmpiricalMeasure:
    """Histogram over base x fiber-norm cells from one long orbit."""

    histogram: np.ndarray
    orbit_length: int
    burn_in: int
    base_edges: np.ndarray
    fiber_edges: np.ndarray
    means: dict = field(default_factory=dict)

    def base_marginal(self):
        return self.histogram.sum(axis=1)

    def tv_distance(self, other):
        return 0.5 * float(np.sum(np.abs(self.histogram - other.histogram)))


def srb_measure(sys: ModelSystem, x0: Point, burn_in: int, n: int,
                base_cells: int = 64, fiber_cells: int = 16,
                seed: int = 0) -> EmpiricalMeasure:
    """Empirical physical measure from the orbit of x0 after burn-in."""
    if n < 10 ** 5:
        raise ValueError("n must be >= 1e5")
    if burn_in < 10 ** 3:
        raise ValueError("burn_in must be >= 1e3")
    if burn_in >= n:
        raise ValueError("burn_in must be < n (histogram would be empty)")
    rng = _rng(seed)
    r_max = sys.lambda_s + sys.coupling / 2.0 + 1e-12
    t = np.array([x0.base])
    u = np.array([x0.fiber[0]])
    v = np.array([x0.fiber[1]])
    # chunked scalar orbit: keep positions, histogram in blocks
    hist = np.zeros((base_cells, fiber_cells))
    block = 4096
    done = 0
    for _ in range(burn_in):
        t, u, v = _advance(sys, t, u, v, rng)
    ts = np.empty(block)
    rs = np.empty(block)
    fill = 0
    obs_sums = np.zeros(3)
    while done < n - burn_in:
        ts[fill] = t[0]
        rs[fill] = np.hypot(u[0], v[0])
        fill += 1
        done += 1
        if fill == block or done == n - burn_in:
            bi = np.minimum((ts[:fill] * base_cells).astype(int), base_cells - 1)
            fi = np.minimum((rs[:fill] / r_max * fiber_cells).astype(int),
                            fiber_cells - 1)
            np.add.at(hist, (bi, fi), 1.0)
            obs_sums += [np.sum(np.cos(2 * math.pi * ts[:fill])),
                         np.sum(rs[:fill]), float(fill)]
            fill = 0
        t, u, v = _advance(sys, t, u, v, rng)
    hist /= hist.sum()
    means = {"trig1": obs_sums[0] / obs_sums[2], "fiber_norm": obs_sums[1] / obs_sums[2]}
    return EmpiricalMeasure(histogram=hist, orbit_length=n, burn_in=burn_in,
                            base_edges=np.linspace(0, 1, base_cells + 1),
                            fiber_edges=np.linspace(0, r_max, fiber_cells + 1),
                            means=means)


# ---------------------------------------------------------------------------
# correlation decay


@dataclass
class CorrelationCurve:
    n_values: np.ndarray
    values: np.ndarray
    monte_carlo_error: float


@dataclass
class DeviationCurve:
    n_values: np.ndarray
    values: np.ndarray
    monte_carlo_error: float
    eps: float = 0.0


def correlation(sys: ModelSystem, phi: Observable, psi: Observable,
                n_max: int, orbit_len: int, walkers: int = 64,
                burn: int = 1000, seed: int = 0, n_values=None) -> CorrelationCurve:
    """C_n = |avg phi(f^{n+j}x) psi(f^j x) - avg phi avg psi| on pooled orbits.

    ``orbit_len`` is the total pooled length, split over independent
    burned-in walkers (each walker must still cover n_max lags).
    """
    if orbit_len < 100 * n_max:
        raise ValueError("orbit_len must be >= 100 * n_max")
    steps = max(orbit_len // walkers, 2 * n_max)
    series = _ensemble_series(sys, [phi, psi], walkers, steps, burn, seed)
    a, b = series
    mean_a = float(np.mean(a))
    mean_b = float(np.mean(b))
    if n_values is None:
        n_values = _geometric_with_zero(n_max)
    vals = np.empty(len(n_values))
    for i, n in enumerate(n_values):
        vals[i] = abs(float(np.mean(a[n:] * b[:steps - n])) - mean_a * mean_b)
    mc = 1.0 / math.sqrt(walkers * steps)
    return CorrelationCurve(n_values=np.asarray(n_values, dtype=np.int64),
                            values=vals, monte_carlo_error=mc)


def _geometric_with_zero(n_max, ratio=1.25):
    out = [0]
    x = 1.0
    while True:
        n = int(math.ceil(x))
        if n > n_max:
            break
        if n != out[-1]:
            out.append(n)
        x *= ratio
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# central limit theorem


def green_kubo_sigma2(sys: ModelSystem, phi: Observable, n_max: int = 200,
                      orbit_len: int = 10 ** 5, walkers: int = 64,
                      seed: int = 0) -> dict:
    """sigma^2 = c_0 + 2 sum_{k>=1} c_k, truncated at the MC noise floor."""
    steps = max(orbit_len // walkers, 2 * n_max)
    (a,) = _ensemble_series(sys, [phi], walkers, steps, 1000, seed)
    mean_a = float(np.mean(a))
    ac = a - mean_a
    mc = 1.0 / math.sqrt(walkers * steps)
    sigma2 = float(np.mean(ac * ac))
    lag = 0
    for k in range(1, n_max + 1):
        ck = float(np.mean(ac[k:] * ac[:steps - k]))
        if abs(2.0 * ck) < mc:
            lag = k
            break
        sigma2 += 2.0 * ck
        lag = k
    return {"sigma2": sigma2, "truncation_lag": lag, "mc_error": mc,
            "mean": mean_a}


def clt_test(sys: ModelSystem, phi: Observable, n: int, ensemble: int,
             seed: int = 0, burn: int = 1000) -> dict:
    """KS distance of normalized Birkhoff sums to Normal(0, sigma2)."""
    if ensemble < 10 ** 3:
        raise ValueError("ensemble must be >= 1e3")
    if n < 10 ** 3:
        raise ValueError("n must be >= 1e3")
    from scipy import stats as sps
    gk = green_kubo_sigma2(sys, phi, seed=seed + 1)
    sigma2, mc = gk["sigma2"], gk["mc_error"]
    if sigma2 < 10.0 * mc:
        raise DegenerateVariance(
            f"sigma2 = {sigma2:.3e} below noise floor {mc:.3e} (near-coboundary)")
    rng = _rng(seed)
    t = rng.random(ensemble)
    u = np.zeros(ensemble)
    v = np.zeros(ensemble)
    for _ in range(burn):
        t, u, v = _advance(sys, t, u, v, rng)
    s = np.zeros(ensemble)
    for _ in range(n):
        s += phi(t, u, v)
        t, u, v = _advance(sys, t, u, v, rng)
    # center with the pooled ensemble mean (n * ensemble samples): the
    # short Green-Kubo orbit mean has MC error that sqrt(n) would amplify
    mean = float(np.mean(s)) / n
    z = (s - n * mean) / math.sqrt(n)
    ks = sps.kstest(z, "norm", args=(0.0, math.sqrt(sigma2))).statistic
    return {"ks_distance": float(ks), "sigma2": sigma2,
            "ensemble_var": float(np.var(z)),
            "truncation_lag": gk["truncation_lag"], "n": n, "ensemble": ensemble}


# ---------------------------------------------------------------------------
# large deviations


def large_deviations(sys: ModelSystem, phi: Observable, eps: float,
                     n_grid, ensemble: int, seed: int = 0,
                     burn: int = 1000, mean: float = None) -> DeviationCurve:
    """D_n = fraction of ensemble starts with |n-average - mu(phi)| > eps."""
    if eps <= 0.0:
        raise ValueError("eps must be > 0")
    if ensemble < 10 ** 4:
        raise ValueError("ensemble must be >= 1e4")
    n_grid = np.asarray(sorted(int(n) for n in n_grid), dtype=np.int64)
    rng = _rng(seed)
    t = rng.random(ensemble)
    u = np.zeros(ensemble)
    v = np.zeros(ensemble)
    for _ in range(burn):
        t, u, v = _advance(sys, t, u, v, rng)
    if mean is None:
        gk = green_kubo_sigma2(sys, phi, seed=seed + 1)
        mean = gk["mean"]
    s = np.zeros(ensemble)
    vals = np.empty(len(n_grid))
    step_no = 0
    for i, n in enumerate(n_grid):
        while step_no < n:
            s += phi(t, u, v)
            t, u, v = _advance(sys, t, u, v, rng)
            step_no += 1
        vals[i] = float(np.mean(np.abs(s / n - mean) > eps))
    return DeviationCurve(n_values=n_grid, values=vals,
                          monte_carlo_error=1.0 / math.sqrt(ensemble), eps=eps)


# ---------------------------------------------------------------------------
# power-law fitting


@dataclass
class RateFit:
    exponent: float
    intercept: float
    r_squared: float
    window: tuple
    points: int = 0


def fit_power_law(curve, window=None) -> RateFit:
    """Least squares on (log n, log value); decay exponent is positive.

    ``curve`` is anything with ``n_values`` and ``values`` (or ``survival``)
    arrays.  The default window [10, n_max/10] drops the transient decade
    and the noise-floor decade.
    """
    n = np.asarray(curve.n_values, dtype=float)
    vals = np.asarray(getattr(curve, "values", None)
                      if getattr(curve, "values", None) is not None
                      else curve.survival, dtype=float)
    if window is None:
        window = (10, max(int(np.max(n)) // 10, 11))
    lo, hi = window
    keep = (n >= lo) & (n <= hi) & (vals > 0.0)
    if np.count_nonzero(keep) < 8:
        raise InsufficientData(
            f"only {np.count_nonzero(keep)} positive points in window {window}")
    lx = np.log(n[keep])
    ly = np.log(vals[keep])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    denom = float(np.sum((ly - ly.mean()) ** 2))
    ss = 1.0 - float(np.sum(resid ** 2)) / denom if denom > 0 else 1.0
    return RateFit(exponent=float(-slope), intercept=float(intercept),
                   r_squared=float(min(max(ss, 0.0), 1.0)), window=(lo, hi),
                   points=int(np.count_nonzero(keep)))


# ---------------------------------------------------------------------------
# artifact emitters (17 significant digits)


def _fmt(x):
    return format(float(x), ".17g")


def write_tail_csv(path, curve, censored=True):
    """tail_E.csv / tail_R.csv writer."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if censored:
            w.writerow(["n", "survival", "censored_mass"])
            for n, s in zip(curve.n_values, curve.survival):
                w.writerow([int(n), _fmt(s), _fmt(curve.censored_mass)])
        else:
            w.writerow(["n", "survival"])
            for n, s in zip(curve.n_values, curve.survival):
                w.writerow([int(n), _fmt(s)])


def write_correlation_csv(path, curve: CorrelationCurve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "value", "mc_error"])
        for n, val in zip(curve.n_values, curve.values):
            w.writerow([int(n), _fmt(val), _fmt(curve.monte_carlo_error)])


def write_ld_csv(path, curve: DeviationCurve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "value"])
        for n, val in zip(curve.n_values, curve.values):
            w.writerow([int(n), _fmt(val)])


def write_clt_json(path, result: dict):
    with open(path, "w") as fh:
        json.dump({"ks_distance": result["ks_distance"],
                   "sigma2": result["sigma2"],
                   "ensemble": result["ensemble"], "n": result["n"]}, fh, indent=1)


def write_fits_json(path, fits: dict):
    """fits.json: array of RateFit records keyed by curve identifier."""
    records = []
    for name, fit in fits.items():
        records.append({"curve": name, "exponent": fit.exponent,
                        "intercept": fit.intercept, "r_squared": fit.r_squared,
                        "window": list(fit.window), "points": fit.points})
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)
