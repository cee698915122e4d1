"""Skew-product solenoid models on the solid torus S^1 x D^2.

Two families are provided:

* ``UNIFORM`` -- angle doubling on the base, uniformly contracting fiber.
  Every orbit expands at the constant rate log 2 along the unstable
  direction, so this is the baseline where all the machinery is exact.
* ``INTERMITTENT`` -- a Manneville-Pomeau style base map with a neutral
  fixed point at t = 0, producing polynomial tails for the expansion time.

Both maps have the form f(t, u, v) = (g(t), L u + (A/4) cos(2 pi t),
L v + (A/4) sin(2 pi t)) with L the fiber contraction rate and A the
coupling amplitude.  The fiber derivative is L * Id, so the stable bundle
is exactly the vertical plane and stable leaves are vertical fibers.  The
unstable bundle is one-dimensional and is computed by pushing a tangent
vector forward along the orbit (power iteration in the cone).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NotSettled

TWO_PI = 2.0 * math.pi


class Family(enum.Enum):
    UNIFORM = "uniform"
    INTERMITTENT = "intermittent"


@dataclass(frozen=True)
class ModelSystem:
    """A concrete skew-product diffeomorphism with its splitting data.

    ``base_param`` is the base expansion factor (must be 2) for the uniform
    family and the intermittency exponent alpha in (0, 1) for the
    intermittent family.  ``lambda_s`` is the fiber contraction rate,
    ``coupling`` the amplitude A of the base-to-fiber coupling, and
    ``cone_width`` the half-width of the cone fields used in diagnostics.
    """

    family: Family
    base_param: float
    lambda_s: float = 0.25
    coupling: float = 0.0
    cone_width: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.lambda_s < 1.0:
            raise ValueError("lambda_s must lie in (0, 1)")
        if self.coupling < 0.0:
            raise ValueError("coupling must be >= 0")
        if not 0.0 < self.cone_width < 1.0:
            raise ValueError("cone_width must lie in (0, 1)")
        if self.family is Family.UNIFORM and self.base_param != 2.0:
            raise ValueError("uniform family is defined with base_param = 2")
        if self.family is Family.INTERMITTENT and not 0.0 < self.base_param < 1.0:
            raise ValueError("intermittency exponent must lie in (0, 1)")
        if self.lambda_s + self.coupling / 2.0 > 1.0:
            raise ValueError("lambda_s + coupling/2 must be <= 1 to keep the fiber invariant")

    # -- base circle map -------------------------------------------------

    def base_map(self, t):
        """Apply g to base coordinates (vectorized, result in [0, 1))."""
        t = np.asarray(t, dtype=float)
        if self.family is Family.UNIFORM:
            return np.mod(2.0 * t, 1.0)
        a = self.base_param
        left = t * (1.0 + (2.0 * t) ** a)
        right = 2.0 * t - 1.0
        return np.mod(np.where(t < 0.5, left, right), 1.0)

    def base_deriv(self, t):
        """g'(t), always >= 1 for the intermittent family, == 2 for uniform."""
        t = np.asarray(t, dtype=float)
        if self.family is Family.UNIFORM:
            return np.full_like(t, 2.0)
        a = self.base_param
        left = 1.0 + (1.0 + a) * (2.0 * t) ** a
        return np.where(t < 0.5, left, 2.0)

    def base_inverse(self, t, branch):
        """Inverse branch of g: branch 0 lands in [0, 1/2), branch 1 in [1/2, 1).

        The intermittent left branch has no closed form and is solved by
        bisection to full double precision.
        """
        t = np.asarray(t, dtype=float)
        if self.family is Family.UNIFORM:
            return (t + branch) / 2.0
        if np.ndim(branch) == 0 and branch == 1:
            return (t + 1.0) / 2.0
        branch = np.broadcast_to(np.asarray(branch), t.shape)
        left = _invert_intermittent_left(t, self.base_param)
        return np.where(branch == 0, left, (t + 1.0) / 2.0)

    # -- full map --------------------------------------------------------

    def step_arrays(self, t, u, v):
        """One application of f to coordinate arrays."""
        tn = self.base_map(t)
        c = self.coupling / 4.0
        un = self.lambda_s * u + c * np.cos(TWO_PI * t)
        vn = self.lambda_s * v + c * np.sin(TWO_PI * t)
        return tn, un, vn

    def push_tangent(self, t, s1, s2):
        """Push the cu-cone vector (1, s1, s2) at base t forward by Df.

        Returns (new_s1, new_s2, expansion) where expansion is
        ||Df w|| / ||w|| for w = (1, s1, s2).
        """
        gp = self.base_deriv(t)
        c = self.coupling * math.pi / 2.0
        f1 = -c * np.sin(TWO_PI * t) + self.lambda_s * s1
        f2 = c * np.cos(TWO_PI * t) + self.lambda_s * s2
        n1 = f1 / gp
        n2 = f2 / gp
        expansion = gp * np.sqrt((1.0 + n1 * n1 + n2 * n2) / (1.0 + s1 * s1 + s2 * s2))
        return n1, n2, expansion

    @property
    def max_base_deriv(self):
        if self.family is Family.UNIFORM:
            return 2.0
        return 1.0 + (1.0 + self.base_param)

    @property
    def min_base_deriv(self):
        return 2.0 if self.family is Family.UNIFORM else 1.0


def _invert_intermittent_left(t, alpha, iters=80):
    """Solve s (1 + (2 s)^alpha) = t on [0, 1/2] by bisection."""
    lo = np.zeros_like(t)
    hi = np.full_like(t, 0.5)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        val = mid * (1.0 + (2.0 * mid) ** alpha)
        smaller = val < t
        lo = np.where(smaller, mid, lo)
        hi = np.where(smaller, hi, mid)
    return 0.5 * (lo + hi)


def uniform_solenoid(lambda_s=0.25, coupling=0.0, cone_width=0.5):
    return ModelSystem(Family.UNIFORM, 2.0, lambda_s, coupling, cone_width)


def intermittent_solenoid(alpha=0.5, lambda_s=0.1, coupling=0.0, cone_width=0.5):
    return ModelSystem(Family.INTERMITTENT, alpha, lambda_s, coupling, cone_width)


# ---------------------------------------------------------------------------
# points, distances


@dataclass
class Point:
    """A point of S^1 x D^2: circle coordinate plus two fiber coordinates."""

    base: float
    fiber: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.base = float(self.base) % 1.0
        if math.hypot(*self.fiber) > 1.0 + 1e-12:
            raise ValueError("fiber norm must be <= 1")


def circle_dist(a, b):
    """Distance on the unit circle R/Z (vectorized)."""
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % 1.0
    return np.minimum(d, 1.0 - d)


def circle_offset(a, b):
    """Signed representative of a - b in (-1/2, 1/2]."""
    d = (np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % 1.0
    return np.where(d > 0.5, d - 1.0, d)


def point_dist(p: Point, q: Point):
    """Product metric: circle distance on the base, Euclidean on the fiber."""
    db = float(circle_dist(p.base, q.base))
    du = p.fiber[0] - q.fiber[0]
    dv = p.fiber[1] - q.fiber[1]
    return math.sqrt(db * db + du * du + dv * dv)


def step(sys: ModelSystem, x: Point) -> Point:
    """Apply f to a single point."""
    t, u, v = sys.step_arrays(np.float64(x.base), np.float64(x.fiber[0]), np.float64(x.fiber[1]))
    return Point(float(t), (float(u), float(v)))


def orbit_base(sys: ModelSystem, t0, n):
    """Forward base orbit [t0, g(t0), ..., g^n(t0)] as an array of length n+1."""
    out = np.empty(n + 1)
    out[0] = t0 % 1.0
    t = out[0]
    for j in range(n):
        t = float(sys.base_map(t))
        out[j + 1] = t
    return out


def backward_base_orbit(sys: ModelSystem, t, n, rng=None, branches=None):
    """Backward base orbit [t_{-n}, ..., t_{-1}, t] choosing inverse branches.

    Branches are drawn uniformly at random unless given explicitly.  On the
    attractor every backward itinerary corresponds to one solenoid sheet.
    """
    if branches is None:
        if rng is None:
            rng = np.random.default_rng(0)
        branches = rng.integers(0, 2, size=n)
    out = np.empty(n + 1)
    out[-1] = t % 1.0
    cur = out[-1]
    for j in range(n):
        cur = float(sys.base_inverse(cur, int(branches[j])))
        out[-2 - j] = cur
    return out


# ---------------------------------------------------------------------------
# unstable direction and the log-contraction cocycle


@dataclass
class SplittingFrame:
    """Unit cu-direction and a stable basis at a point."""

    at: Point
    e_cu: np.ndarray
    e_s_basis: tuple = (np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]))


@dataclass
class LogSeries:
    """Per-orbit log contraction factors a_j = log ||Df^{-1} | E^cu_{f^j x}||.

    ``values[j-1]`` holds a_j for j = 1..n.  Because E^cu is one-dimensional,
    a_j = -log ||Df e_cu|| evaluated at f^{j-1}(x).
    """

    values: np.ndarray
    origin: Point = field(default_factory=lambda: Point(0.0))

    def __len__(self):
        return len(self.values)

    def prefix_sums(self):
        """S with S[0] = 0 and S[j] = a_1 + ... + a_j."""
        out = np.empty(len(self.values) + 1)
        out[0] = 0.0
        np.cumsum(self.values, out=out[1:])
        return out


def cu_direction(sys: ModelSystem, x: Point, settle: int = 100, history=None,
                 rng=None, tol=1e-10):
    """Unit vector spanning E^cu at x, by cone power iteration.

    ``history`` is a backward base orbit ending at x (as produced by
    :func:`backward_base_orbit`); one is sampled at random if absent.  The
    horizontal vector is pushed forward from the start of the history; the
    result using the full history is compared against the result dropping
    the earliest step, and ``NotSettled`` is raised if they differ by more
    than ``tol``.
    """
    if settle < 1:
        raise ValueError("settle must be >= 1")
    if sys.coupling == 0.0:
        return np.array([1.0, 0.0, 0.0])
    if history is None:
        history = backward_base_orbit(sys, x.base, settle, rng=rng)
    hist = np.asarray(history, dtype=float)
    if len(hist) < settle + 1:
        raise NotSettled(f"history of length {len(hist) - 1} shorter than settle={settle}")

    def run(ts):
        s1 = s2 = 0.0
        for t in ts:
            s1, s2, _ = sys.push_tangent(t, s1, s2)
        return s1, s2

    full = run(hist[-settle - 1:-1])
    short = run(hist[-settle:-1])
    v_full = np.array([1.0, full[0], full[1]])
    v_short = np.array([1.0, short[0], short[1]])
    v_full /= np.linalg.norm(v_full)
    v_short /= np.linalg.norm(v_short)
    if np.linalg.norm(v_full - v_short) > tol:
        raise NotSettled("cu direction not converged within the provided history")
    return v_full


def log_contraction_series(sys: ModelSystem, x0: Point, n: int,
                           slopes0=(0.0, 0.0)) -> LogSeries:
    """Series a_j = -log ||Df e_cu|| along the forward orbit of x0.

    The tangent slopes start at ``slopes0`` (horizontal by default) and are
    pushed forward with the orbit; by domination they converge to the true
    unstable direction at rate lambda_s / g'.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    t = np.float64(x0.base)
    s1, s2 = map(np.float64, slopes0)
    vals = np.empty(n)
    for j in range(n):
        s1n, s2n, expansion = sys.push_tangent(t, s1, s2)
        vals[j] = -np.log(expansion)
        t = sys.base_map(t)
        s1, s2 = s1n, s2n
    return LogSeries(vals, origin=x0)


def check_domination(sys: ModelSystem, samples: int = 1000, seed=0, settle=100):
    """Measure max ||Df|E^s|| * ||Df^-1|E^cu|| over random attractor points.

    ||Df|E^s|| = lambda_s exactly (the fiber derivative is lambda_s * Id) and
    ||Df^-1|E^cu_{f x}|| = 1 / ||Df e_cu(x)|| since E^cu is one-dimensional.
    """
    if samples < 100:
        raise ValueError("samples must be >= 100")
    rng = np.random.default_rng(seed)
    t = rng.random(samples)
    s1 = np.zeros(samples)
    s2 = np.zeros(samples)
    # settle the directions onto the attractor field first
    for _ in range(settle):
        s1, s2, _ = sys.push_tangent(t, s1, s2)
        t = sys.base_map(t)
    _, _, expansion = sys.push_tangent(t, s1, s2)
    lam = sys.lambda_s / np.min(expansion)
    return {"lambda_measured": float(lam), "pass": bool(lam < 1.0)}


def cone_invariance_violations(sys: ModelSystem, samples=10000, directions=16, seed=0,
                               settle=60):
    """Count violations of Df C_a^cu(x) subset C_{lambda a}^cu(f x).

    Cones are centered on the computed cu-direction with the (exact)
    vertical stable plane as complement; the contraction factor checked is
    the measured domination constant.
    """
    rng = np.random.default_rng(seed)
    a = sys.cone_width
    t = rng.random(samples)
    s1 = np.zeros(samples)
    s2 = np.zeros(samples)
    for _ in range(settle):
        s1, s2, _ = sys.push_tangent(t, s1, s2)
        t = sys.base_map(t)
    _, _, expansion = sys.push_tangent(t, s1, s2)
    lam = float(sys.lambda_s / np.min(expansion))
    violations = 0
    theta = np.linspace(0.0, TWO_PI, directions, endpoint=False)
    for th in theta:
        # boundary vector e_cu + a * (unit stable vector)
        w1 = s1 + a * math.cos(th) * np.sqrt(1.0 + s1 * s1 + s2 * s2)
        w2 = s2 + a * math.sin(th) * np.sqrt(1.0 + s1 * s1 + s2 * s2)
        n1, n2, _ = sys.push_tangent(t, w1, w2)
        c1, c2, _ = sys.push_tangent(t, s1, s2)
        # stable component of the image relative to the image cu-direction
        d1 = n1 - c1
        d2 = n2 - c2
        ratio = np.sqrt(d1 * d1 + d2 * d2) / np.sqrt(1.0 + c1 * c1 + c2 * c2)
        violations += int(np.sum(ratio > lam * a * (1.0 + 1e-9)))
    return violations
