"""Inductive construction of the Gibbs-Markov inducing structure.

The reference unstable disk D is a horizontal base arc of radius delta1
around a base point p; the partitioned disk is the sub-arc of radius
delta0.  Because stable leaves are exact vertical fibers in the
skew-product models, the stable-holonomy projection is the base
coordinate map, so "the image u-crosses the cylinder C^i" is exactly
"the base projection of the image covers the radius-i arc around p".

The construction is pointwise: the radius-delta0 arc is sampled on a
uniform grid (cell width = the resolution parameter) and every grid
point carries its own orbit, tangent slope, hyperbolic-time scan state,
wait value t and return time R.  A point is carved into an element
{R = n} when, at a step n > R0, it sits in A^eps_{n-1}, had a recent
sigma-hyperbolic time (within N0 steps, so a hyperbolic pre-ball
certifies that its component fully u-crosses), and its image lands
within delta0 of p.  Points landing in the surrounding ring annulus get
wait values from the ring index of their image and count down.  Mass is
accounted in exact integer grid-point counts, so per-step conservation
is exact.

True element intervals are recovered on demand by Newton root-finding
on the base coordinate (solving for image offset = +-delta0), which is
possible whenever the element is wide enough for double precision; the
verification routines restrict themselves to such elements and report
how many were skipped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ModelSystem, Point, circle_offset, log_contraction_series
from .errors import BoundaryClipped, DensityNotReached, EmptySubset
from .pliss import geometric_grid, pliss_times

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# parameters and rings


@dataclass
class ConstructionParams:
    """Constants of the inductive construction.

    ``delta0`` is the radius of the partitioned arc, ``delta1`` the radius
    of the reference disk (and of hyperbolic pre-ball images), ``delta2``
    the guaranteed image-disk radius at hyperbolic times, ``delta_s`` the
    stable-leaf length of the cylinders, ``epsilon`` the A^eps margin.
    ``resolution`` is the sampling cell width of the pointwise grid.
    """

    delta0: float
    sigma: float
    c: float
    n_max: int
    delta1: float = 0.45
    delta2: float = None
    delta_s: float = None
    epsilon: float = None
    N0: int = 64
    R0: int = 20
    resolution: float = 2.0 ** -20
    C0: float = 2.0   # backward-contraction constant of eq. (P3), calibrated
    C1: float = 1.0   # stable/cu angle constant; exactly 1 for vertical fibers
    K0: float = 1.0   # sup ||Df^-1|E^cu||; <= 1 when the base map never contracts

    def __post_init__(self):
        if self.delta2 is None:
            self.delta2 = self.delta1 / 4.0
        if self.delta_s is None:
            self.delta_s = self.delta1 / 4.0
        if self.epsilon is None:
            self.epsilon = 0.5 * self.epsilon_max()

    def epsilon_max(self):
        """Largest admissible A^eps margin keeping carves off waiting points."""
        return (self.C1 / self.C0) * self.delta0 * (self.sigma ** -0.5 - 1.0)

    def validate(self):
        """Check the constant ordering; returns a list of soft warnings."""
        warnings = []
        if not 0.0 < self.sigma < 1.0:
            raise ValueError("sigma must lie in (0, 1)")
        if self.c <= 0.0:
            raise ValueError("c must be > 0")
        if self.delta0 <= 0.0 or self.delta1 <= 0.0:
            raise ValueError("radii must be positive")
        if 2.0 * math.sqrt(self.delta0) >= self.delta1:
            raise ValueError("outer cylinder 2*sqrt(delta0) must fit inside delta1")
        if not self.delta_s < self.delta1 / 2.0:
            raise ValueError("delta_s must be < delta1/2")
        if not self.epsilon < self.epsilon_max():
            raise ValueError("epsilon exceeds the admissible bound")
        if not self.epsilon <= self.delta0 / 2.0:
            raise ValueError("epsilon must be << delta0")
        if self.resolution <= 0.0 or self.resolution >= self.delta0:
            raise ValueError("resolution must be positive and below delta0")
        if not 2.0 * self.delta0 <= self.delta2 < self.delta1:
            warnings.append("delta0 not small relative to delta2")
        if not 5.0 * self.delta0 * self.K0 ** self.N0 < self.delta1 / 4.0:
            warnings.append("5*delta0*K0^N0 >= delta1/4 (worst-case window bound fails)")
        return warnings

    @property
    def grid_size(self):
        return int(math.ceil(2.0 * self.delta0 / self.resolution))


@dataclass
class RingTable:
    """Ring annuli I_k of the wait-assignment, by distance from p."""

    delta0: float
    sigma: float
    k_max: int
    boundaries: np.ndarray   # boundaries[k] = delta0 (1 + sigma^{k/2}), k = 0..k_max

    def ring_index(self, d):
        """Index s with d in I_s, for delta0 < d < 2 delta0; clipped to [1, k_max].

        Rings below the resolution were merged into ring k_max.
        """
        d = np.asarray(d, dtype=float)
        ratio = np.maximum(d / self.delta0 - 1.0, 1e-300)
        k = np.floor(2.0 * np.log(ratio) / math.log(self.sigma)).astype(np.int64) + 1
        return np.clip(k, 1, self.k_max)

    def width(self, k):
        return self.delta0 * (self.sigma ** ((k - 1) / 2.0) - self.sigma ** (k / 2.0))


def build_rings(params: ConstructionParams) -> RingTable:
    """The I_k table, truncated at the first sub-resolution ring."""
    d0, s = params.delta0, params.sigma
    k_max = 1
    while d0 * (s ** (k_max / 2.0) - s ** ((k_max + 1) / 2.0)) >= params.resolution:
        k_max += 1
    bnd = d0 * (1.0 + s ** (np.arange(k_max + 1) / 2.0))
    return RingTable(delta0=d0, sigma=s, k_max=k_max, boundaries=bnd)


# ---------------------------------------------------------------------------
# base point


def choose_base_point(sys: ModelSystem, rho: float, search_len: int,
                      seed: int = 0) -> dict:
    """Pick q with a rho-dense backward orbit and the disk point p over it.

    Density is checked against a 1000-point attractor sample (a burned-in
    forward orbit).  Stable fibers are vertical, so p simply shares the
    base coordinate of q.
    """
    if rho <= 0.0:
        raise ValueError("rho must be > 0")
    if search_len < 1000:
        raise ValueError("search_len must be >= 1000")
    rng = np.random.default_rng(seed)
    # attractor sample on the base circle
    t = rng.random(1000)
    u = np.zeros(1000)
    v = np.zeros(1000)
    for _ in range(100):
        t, u, v = sys.step_arrays(t, u, v)
    sample = np.sort(t)
    q_base = float(rng.random())
    if rho >= 1.0:
        q = _attractor_point(sys, q_base)
        return {"p": q, "q": q, "N0": 0}
    # grow the backward orbit one preimage at a time until rho-dense
    orbit = [q_base]
    cur = q_base
    uncovered = np.ones(len(sample), dtype=bool)
    uncovered &= _circ_dist_arr(sample, q_base) > rho
    for n in range(1, search_len + 1):
        cur = float(sys.base_inverse(cur, int(rng.integers(0, 2))))
        orbit.append(cur)
        uncovered &= _circ_dist_arr(sample, cur) > rho
        if not uncovered.any():
            q = _attractor_point(sys, q_base)
            return {"p": q, "q": q, "N0": n}
    raise DensityNotReached(f"no backward orbit of length <= {search_len} is {rho}-dense")


def _circ_dist_arr(a, b):
    d = np.abs(a - b) % 1.0
    return np.minimum(d, 1.0 - d)


def _attractor_point(sys, base, burn=200):
    """A point of the attractor on the given vertical fiber."""
    # run any point forward, then adjust the base to the requested fiber:
    # the fiber coordinate of the attractor over a base t is a function of
    # the backward itinerary; for the uncoupled case it is just 0.
    if sys.coupling == 0.0:
        return Point(base, (0.0, 0.0))
    t, u, v = float(base), 0.0, 0.0
    hist = [t]
    for _ in range(burn):
        t = float(sys.base_inverse(t, 0))
        hist.append(t)
    for t_prev in reversed(hist[1:]):
        _, u, v = sys.step_arrays(t_prev, u, v)
    return Point(base, (float(u), float(v)))


# ---------------------------------------------------------------------------
# construction state machine


@dataclass
class ConstructionState:
    """Pointwise state of the inductive partition at time n."""

    n: int
    p_base: float
    points: np.ndarray       # grid points in the radius-delta0 arc (fixed)
    x: np.ndarray            # g^n of each point (frozen at carve time)
    s1: np.ndarray
    s2: np.ndarray
    bsum: np.ndarray         # prefix sums of a_j - log sigma
    bmin: np.ndarray
    last_hyp: np.ndarray
    log_deriv: np.ndarray    # log (g^n)' along the orbit
    log_deriv_hyp: np.ndarray
    hyp_now: np.ndarray      # bool: n is a hyperbolic time
    t: np.ndarray            # wait function t_n (valid on active points)
    R: np.ndarray            # return time; 0 = not carved
    n_hyp: np.ndarray        # hyperbolic-time tag of carved points
    log_deriv_carve: np.ndarray
    rng: np.random.Generator = None
    violations: int = 0
    trace: list = field(default_factory=list)

    @property
    def active(self):
        return self.R == 0

    def mass_counts(self):
        act = self.active
        return {"delta_n": int(np.count_nonzero(act)),
                "A_n": int(np.count_nonzero(act & (self.t == 0))),
                "B_n": int(np.count_nonzero(act & (self.t > 0)))}


DITHER = 2.0 ** -51


def init_state(sys: ModelSystem, params: ConstructionParams, p_base: float,
               seed: int = 0) -> ConstructionState:
    m = params.grid_size
    h = 2.0 * params.delta0 / m
    pts = (p_base - params.delta0 + h * (np.arange(m) + 0.5)) % 1.0
    z = np.zeros(m)
    return ConstructionState(
        n=0, p_base=p_base, points=pts, x=pts.copy(), s1=z.copy(), s2=z.copy(),
        bsum=z.copy(), bmin=z.copy(), last_hyp=np.zeros(m, dtype=np.int64),
        log_deriv=z.copy(), log_deriv_hyp=z.copy(),
        hyp_now=np.zeros(m, dtype=bool),
        t=np.zeros(m, dtype=np.int64), R=np.zeros(m, dtype=np.int64),
        n_hyp=np.zeros(m, dtype=np.int64), log_deriv_carve=z.copy(),
        rng=np.random.Generator(np.random.Philox(seed)))


def _stable_burn_in(sys: ModelSystem, params: ConstructionParams) -> int:
    """Steps until every fiber is within delta_s/4 of the attractor."""
    return max(1, int(math.ceil(math.log(8.0 / params.delta_s)
                                / math.log(1.0 / sys.lambda_s))))


def step_partition(state: ConstructionState, sys: ModelSystem,
                   params: ConstructionParams, rings: RingTable = None) -> ConstructionState:
    """Advance the construction from time n-1 to n (mutates state).

    Orbit and hyperbolic-time bookkeeping always advances; carving only
    happens for n > R0 (first-step convention: A_n = Delta_0, B_n = empty).
    """
    if rings is None:
        rings = build_rings(params)
    n = state.n + 1
    act = state.active
    # advance the cocycle on active points only (carved points stay frozen
    # at their return image, which compose_returns uses later)
    gp = sys.base_deriv(state.x)
    s1n, s2n, expansion = sys.push_tangent(state.x, state.s1, state.s2)
    a = -np.log(expansion)
    state.bsum = np.where(act, state.bsum + (a - math.log(params.sigma)), state.bsum)
    hyp = act & (state.bsum <= state.bmin)
    state.hyp_now = hyp
    np.copyto(state.last_hyp, n, where=hyp)
    state.bmin = np.where(act, np.minimum(state.bmin, state.bsum), state.bmin)
    state.log_deriv = np.where(act, state.log_deriv + np.log(gp), state.log_deriv)
    np.copyto(state.log_deriv_hyp, state.log_deriv, where=hyp)
    # sub-resolution dither models each grid point as a real point drawn
    # from its cell: pure binary base maps otherwise exhaust the mantissa
    # and collapse every orbit onto the fixed point after ~52 steps
    dither = state.rng.random(len(state.x)) * DITHER if state.rng is not None else 0.0
    state.x = np.where(act, (sys.base_map(state.x) + dither) % 1.0, state.x)
    state.s1 = np.where(act, s1n, state.s1)
    state.s2 = np.where(act, s2n, state.s2)
    state.n = n

    t_prev = state.t.copy()
    a_prev = act & (t_prev == 0)
    b_prev = act & (t_prev > 0)
    rec = {"n": n, "delta_prev": int(np.count_nonzero(act)),
           "A_prev": int(np.count_nonzero(a_prev)),
           "B_prev": int(np.count_nonzero(b_prev)),
           "A_prev_hyp": int(np.count_nonzero(a_prev & hyp)),
           "carved": 0, "ringed_from_A": 0, "B_to_A": 0, "violations": 0}

    if n > params.R0 and n >= _stable_burn_in(sys, params):
        d = np.abs(circle_offset(state.x, state.p_base))
        # A^eps_{n-1}: A itself plus active neighbors within epsilon along
        # the image curve; the curve length between adjacent cells is
        # cell * (g^n)' (circle offsets would alias across curve wraps)
        aeps = a_prev.copy()
        cell = 2.0 * params.delta0 / len(state.x)
        seglen = cell * np.exp(0.5 * (state.log_deriv[1:] + state.log_deriv[:-1]))
        near = seglen < params.epsilon
        aeps[1:] |= act[1:] & a_prev[:-1] & near
        aeps[:-1] |= act[:-1] & a_prev[1:] & near
        # recent hyperbolic time => a pre-ball certifies the u-crossing,
        # provided the pre-ball fits inside D and the image ball of radius
        # delta1 contains the outer cylinder arc
        fits = state.log_deriv_hyp >= math.log(params.delta1 / (params.delta1 - params.delta0))
        gate = act & aeps & (n - state.last_hyp <= params.N0) & fits \
            & (d + 2.0 * math.sqrt(params.delta0) <= params.delta1)
        carve = gate & (d < params.delta0)
        ring = gate & ~carve & (d >= params.delta0) & (d < 2.0 * params.delta0)
        bad = int(np.count_nonzero((carve | ring) & (t_prev >= 1)))
        state.violations += bad
        rec["violations"] = bad
        # carve {R = n}
        state.R[carve] = n
        state.n_hyp[carve] = state.last_hyp[carve]
        state.log_deriv_carve[carve] = state.log_deriv[carve]
        # three-case wait update on the remaining active points
        new_t = np.where(t_prev > 0, t_prev - 1, 0)
        new_t[ring] = rings.ring_index(d[ring])
        new_t[carve] = 0
        state.t = np.where(act, new_t, state.t)
        still = act & ~carve
        rec["carved"] = int(np.count_nonzero(carve))
        rec["ringed_from_A"] = int(np.count_nonzero(a_prev & still & (state.t > 0)))
        rec["B_to_A"] = int(np.count_nonzero(b_prev & still & (state.t == 0)))
        # exact per-step mass conservation in counts
        assert rec["delta_prev"] == int(np.count_nonzero(state.active)) + rec["carved"]
    else:
        rec["B_to_A"] = 0
    state.trace.append(rec)
    return state


# ---------------------------------------------------------------------------
# finished structure


@dataclass
class GibbsMarkovStructure:
    params: ConstructionParams
    p_base: float
    points: np.ndarray
    R: np.ndarray              # per grid point; 0 = leftover
    n_hyp: np.ndarray
    log_deriv_carve: np.ndarray
    x_final: np.ndarray        # g^R at carve time (g^{n_max} on leftover)
    ring_table: RingTable
    violations: int
    trace: list
    nonconvergent: bool
    elem_lo: np.ndarray = None   # grid-index runs of equal R (computed on build)
    elem_hi: np.ndarray = None   # inclusive
    _edges: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.elem_lo is None:
            carved = self.R > 0
            brk = np.flatnonzero((self.R[1:] != self.R[:-1])) + 1
            starts = np.concatenate([[0], brk])
            ends = np.concatenate([brk - 1, [len(self.R) - 1]])
            keep = carved[starts]
            self.elem_lo = starts[keep]
            self.elem_hi = ends[keep]

    @property
    def n_elements(self):
        return len(self.elem_lo)

    @property
    def grid_size(self):
        return len(self.R)

    @property
    def cell_width(self):
        return 2.0 * self.params.delta0 / self.grid_size

    def element_R(self):
        return self.R[self.elem_lo]

    def element_counts(self):
        return self.elem_hi - self.elem_lo + 1

    def element_width_est(self):
        """Crude width estimate 2 delta0 / (g^R)' from the carve derivative."""
        return 2.0 * self.params.delta0 * np.exp(-self.log_deriv_carve[self.elem_lo])

    def leftover_mass(self):
        return float(np.count_nonzero(self.R == 0)) / self.grid_size

    def carved_mass(self):
        return 1.0 - self.leftover_mass()

    def gcd_R(self):
        vals = np.unique(self.R[self.R > 0])
        return int(np.gcd.reduce(vals)) if len(vals) else 0


def run_construction(sys: ModelSystem, params: ConstructionParams,
                     p_base: float = None, seed: int = 0) -> GibbsMarkovStructure:
    """Iterate the step machine to n_max and package the result."""
    params.validate()
    if p_base is None:
        p_base = choose_base_point(sys, rho=1.0, search_len=1000, seed=seed)["p"].base
    rings = build_rings(params)
    state = init_state(sys, params, p_base, seed=seed)
    for _ in range(params.n_max):
        step_partition(state, sys, params, rings)
    leftover = float(np.count_nonzero(state.R == 0)) / len(state.R)
    return GibbsMarkovStructure(
        params=params, p_base=p_base, points=state.points, R=state.R,
        n_hyp=state.n_hyp, log_deriv_carve=state.log_deriv_carve,
        x_final=state.x, ring_table=rings, violations=state.violations,
        trace=state.trace, nonconvergent=leftover > 0.5)


# ---------------------------------------------------------------------------
# element interval recovery (Newton on the base coordinate)


def _evolve_with_deriv(sys, t, steps, mask_steps):
    """g^{n}(t) and (g^{n})'(t) with per-entry step counts."""
    val = np.array(t, dtype=float)
    der = np.ones_like(val)
    for n in range(1, int(np.max(mask_steps)) + 1 if len(mask_steps) else 0):
        m = n <= mask_steps
        gp = sys.base_deriv(val)
        der = np.where(m, der * gp, der)
        val = np.where(m, sys.base_map(val), val)
    return val, der


def _newton_edges(sys, t0, steps, center, targets, max_move, iters=60, tol=1e-12):
    """Solve circle_offset(g^steps(t), center) = target near t0 (vectorized)."""
    t = np.array(t0, dtype=float)
    lo = t0 - max_move
    hi = t0 + max_move
    best_t = t.copy()
    best_err = np.full_like(t, np.inf)
    for _ in range(iters):
        val, der = _evolve_with_deriv(sys, t, steps, steps)
        err = circle_offset(val, center) - targets
        better = np.abs(err) < best_err
        np.copyto(best_t, t, where=better)
        np.copyto(best_err, np.abs(err), where=better)
        if np.max(best_err) < tol:
            break
        t = np.clip(t - err / der, lo, hi)
    return best_t, best_err


def element_edges(structure: GibbsMarkovStructure, sys: ModelSystem, idx,
                  radius: float = None):
    """Refined (lo, hi) base intervals of the selected elements.

    ``idx`` indexes into the element arrays; ``radius`` is the image
    half-width to solve for (delta0 for omega^0, 2*delta0 / sqrt(delta0) /
    2*sqrt(delta0) for the enclosing rings).  Results are cached.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if radius is None:
        radius = structure.params.delta0
    key = float(radius)
    cache = structure._edges.setdefault(key, {})
    missing = [i for i in idx.tolist() if i not in cache]
    if missing:
        miss = np.array(missing, dtype=np.int64)
        steps = structure.R[miss]
        # both edges are seeded from the carved sample itself, which sits
        # inside the true element up to dither drift (~2^-50 in base
        # coordinate).  The search clamp only spans the pullback of the
        # target offset -- never a whole grid cell, which would let the
        # solve escape into a neighboring injectivity branch of g^R once
        # elements are narrower than a cell.
        t_seed = structure.points[miss]
        move = 1e-12 + 4.0 * (radius + structure.params.delta0) * np.exp(
            -structure.log_deriv_carve[miss])
        lo_vals, e1 = _newton_edges(sys, t_seed, steps, structure.p_base,
                                    np.full(len(miss), -radius), move)
        hi_vals, e2 = _newton_edges(sys, t_seed, steps, structure.p_base,
                                    np.full(len(miss), radius), move)
        for j, i in enumerate(missing):
            cache[i] = (float(lo_vals[j]), float(hi_vals[j]),
                        max(float(e1[j]), float(e2[j])))
    lo = np.array([cache[i][0] for i in idx.tolist()])
    hi = np.array([cache[i][1] for i in idx.tolist()])
    err = max((cache[i][2] for i in idx.tolist()), default=0.0)
    return lo, hi, err


def _verifiable_elements(structure, width_floor, max_elements, seed):
    """Carved-sample representatives of distinct true elements (point indices).

    At fine resolutions a contiguous carved run spans many true elements,
    each narrower than a grid cell, so every carved sample certifies its
    own element.  At coarse resolutions many samples share one wide element
    and the runs are thinned to about one sample per predicted width.
    """
    cell = structure.cell_width
    w_all = 2.0 * structure.params.delta0 * np.exp(-structure.log_deriv_carve)
    reps = []
    for lo, hi in zip(structure.elem_lo, structure.elem_hi):
        stride = max(1, int(round(w_all[lo] / cell)))
        reps.extend(range(int(lo), int(hi) + 1, stride))
    reps = np.array(reps, dtype=np.int64)
    reps = reps[w_all[reps] >= width_floor]
    if max_elements is not None and len(reps) > max_elements:
        rng = np.random.default_rng(seed)
        reps = np.sort(rng.choice(reps, size=max_elements, replace=False))
    return reps


def hyperbolic_preball(sys: ModelSystem, x: float, n: int,
                       params: ConstructionParams, p_base: float):
    """The connected preimage V_n(x) of the delta1-ball around g^n(x).

    Requires n to be a sigma-hyperbolic time for x (checked; ValueError
    otherwise) and raises BoundaryClipped if the preimage leaves the
    reference disk.
    """
    series = log_contraction_series(sys, Point(float(x)), n)
    if n not in pliss_times(series, params.sigma):
        raise ValueError(f"{n} is not a sigma-hyperbolic time for this point")
    img = float(x)
    der = 1.0
    for _ in range(n):
        der *= float(sys.base_deriv(img))
        img = float(sys.base_map(img))
    move = 2.0 * params.delta1 / der + 4.0 * params.delta1 / der
    steps = np.array([n, n])
    lo, err = _newton_edges(sys, np.array([x]), steps[:1], img,
                            np.array([-params.delta1]), move)
    hi, err2 = _newton_edges(sys, np.array([x]), steps[:1], img,
                             np.array([params.delta1]), move)
    lo, hi = float(lo[0]), float(hi[0])
    for edge in (lo, hi):
        if abs(circle_offset(edge, p_base)) > params.delta1:
            raise BoundaryClipped("hyperbolic pre-ball reaches the disk boundary")
    return lo, hi


# ---------------------------------------------------------------------------
# verification


def verify_markov(structure: GibbsMarkovStructure, sys: ModelSystem,
                  width_floor: float = 1e-11, max_elements: int = 400,
                  tol: float = 1e-9, seed: int = 0,
                  intervals=None) -> dict:
    """Check (P1): disjoint elements whose f^R images cover the delta0 arc.

    ``intervals`` may supply explicit (lo, hi, R) triples (used by negative
    tests); otherwise elements are refined from the structure, restricted
    to those wide enough to resolve in double precision.
    """
    report = {"checked": 0, "skipped": 0, "covering_violations": 0,
              "overlap_violations": 0, "max_edge_err": 0.0}
    d0 = structure.params.delta0
    p = structure.p_base
    if intervals is None:
        idx = _verifiable_elements(structure, width_floor, max_elements, seed)
        report["skipped"] = int(np.count_nonzero(structure.R > 0)) - len(idx)
        if len(idx) == 0:
            return report
        lo, hi, err = element_edges(structure, sys, idx)
        steps = structure.R[idx]
        report["max_edge_err"] = err
    else:
        lo = np.array([iv[0] for iv in intervals])
        hi = np.array([iv[1] for iv in intervals])
        steps = np.array([iv[2] for iv in intervals], dtype=np.int64)
        err = 0.0
    report["checked"] = len(lo)
    # covering: the endpoint images must hit the arc boundary, and the map
    # must be monotone across the element (checked at interior samples)
    vlo, _ = _evolve_with_deriv(sys, lo, steps, steps)
    vhi, _ = _evolve_with_deriv(sys, hi, steps, steps)
    olo = circle_offset(vlo, p)
    ohi = circle_offset(vhi, p)
    bad = (np.abs(olo + d0) > tol + err) | (np.abs(ohi - d0) > tol + err)
    interior = lo + 0.5 * (hi - lo)
    vmid, _ = _evolve_with_deriv(sys, interior, steps, steps)
    omid = circle_offset(vmid, p)
    bad |= (omid <= -d0) | (omid >= d0)
    report["covering_violations"] = int(np.count_nonzero(bad))
    # pairwise disjointness; two representatives may resolve to the same
    # true element, which shows up as near-identical intervals, not overlap
    order = np.argsort(lo)
    slo, shi = lo[order], hi[order]
    dup_tol = tol + err
    dup = (np.abs(np.diff(slo)) <= dup_tol) & (np.abs(np.diff(shi)) <= dup_tol)
    overlap = (slo[1:] < shi[:-1] - 1e-15) & ~dup
    report["overlap_violations"] = int(np.count_nonzero(overlap))
    report["duplicates"] = int(np.count_nonzero(dup))
    return report


def _sample_pairs(structure, sys, idx, pairs_per_element, seed):
    """Pair sample inside refined element intervals; returns y, z, steps."""
    lo, hi, _ = element_edges(structure, sys, idx)
    steps = structure.R[idx]
    rng = np.random.default_rng(seed)
    k = pairs_per_element
    u1 = rng.random((len(idx), k))
    u2 = rng.random((len(idx), k))
    w = (hi - lo)[:, None]
    y = lo[:, None] + u1 * w
    z = lo[:, None] + u2 * w
    # keep pairs separated so distances stay resolvable
    tiny = np.abs(u1 - u2) < 0.05
    z = np.where(tiny, lo[:, None] + ((u1 + 0.5) % 1.0) * w, z)
    steps = np.repeat(steps, k)
    return y.ravel(), z.ravel(), steps


def verify_backward_contraction(structure: GibbsMarkovStructure, sys: ModelSystem,
                                pairs_per_element: int = 8, width_floor: float = 1e-11,
                                max_elements: int = 300, seed: int = 0) -> dict:
    """Check (P3): dist(f^{R-k}y, f^{R-k}z) <= C sigma^{k/2} dist(f^Ry, f^Rz).

    C_fit is the smallest constant making every sampled pair pass, so the
    violation count against C_fit is zero by construction; the ratio
    distribution is reported instead.
    """
    sigma = structure.params.sigma
    idx = _verifiable_elements(structure, width_floor, max_elements, seed)
    out = {"C_fit": 0.0, "violations": 0, "pairs": 0,
           "skipped_elements": int(np.count_nonzero(structure.R > 0)) - len(idx),
           "ratio_p50": 0.0, "ratio_p90": 0.0}
    if len(idx) == 0:
        return out
    y, z, steps = _sample_pairs(structure, sys, idx, pairs_per_element, seed)
    # running max of d_n sigma^{n/2} for n < R gives the binding k at once
    run_max = np.abs(circle_offset(y, z))   # n = 0 term
    yv, zv = y.copy(), z.copy()
    d_final = np.zeros_like(yv)
    n_max = int(np.max(steps))
    for n in range(1, n_max + 1):
        m = n <= steps
        yv = np.where(m, sys.base_map(yv), yv)
        zv = np.where(m, sys.base_map(zv), zv)
        d = np.abs(circle_offset(yv, zv))
        run_max = np.where(m, np.maximum(run_max, d * sigma ** (n / 2.0)), run_max)
        np.copyto(d_final, d, where=m & (n == steps))
    ratios = run_max / (sigma ** (steps / 2.0) * d_final)
    out["C_fit"] = float(np.max(ratios))
    out["pairs"] = len(ratios)
    out["ratio_p50"] = float(np.percentile(ratios, 50))
    out["ratio_p90"] = float(np.percentile(ratios, 90))
    return out


def verify_distortion(structure: GibbsMarkovStructure, sys: ModelSystem,
                      pairs_per_element: int = 8, width_floor: float = 1e-11,
                      max_elements: int = 300, seed: int = 0) -> dict:
    """Check (P4): |log det ratio of D(f^R)^u| <= C dist(f^Ry, f^Rz)^eta.

    eta comes from least squares on the log-log cloud; C is then lifted to
    the envelope value making the bound an inequality for every sampled
    pair, so max_residual_factor <= 1 by construction and the least-squares
    residuals are reported separately.
    """
    idx = _verifiable_elements(structure, width_floor, max_elements, seed)
    out = {"C2_fit": 0.0, "eta_fit": 1.0, "max_residual_factor": 0.0,
           "r_squared": 1.0, "pairs": 0, "exact_zero": False,
           "skipped_elements": int(np.count_nonzero(structure.R > 0)) - len(idx)}
    if len(idx) == 0:
        return out
    y, z, steps = _sample_pairs(structure, sys, idx, pairs_per_element, seed)
    ys1 = np.zeros_like(y)
    ys2 = np.zeros_like(y)
    zs1 = np.zeros_like(z)
    zs2 = np.zeros_like(z)
    logratio = np.zeros_like(y)
    yv, zv = y.copy(), z.copy()
    n_max = int(np.max(steps))
    for n in range(1, n_max + 1):
        m = n <= steps
        a1, a2, ey = sys.push_tangent(yv, ys1, ys2)
        b1, b2, ez = sys.push_tangent(zv, zs1, zs2)
        logratio = np.where(m, logratio + np.log(ey) - np.log(ez), logratio)
        yv = np.where(m, sys.base_map(yv), yv)
        zv = np.where(m, sys.base_map(zv), zv)
        ys1, ys2 = np.where(m, a1, ys1), np.where(m, a2, ys2)
        zs1, zs2 = np.where(m, b1, zs1), np.where(m, b2, zs2)
    d = np.abs(circle_offset(yv, zv))
    r = np.abs(logratio)
    out["pairs"] = len(r)
    if np.max(r) < 1e-14:
        out["exact_zero"] = True
        out["C2_fit"] = 0.0
        return out
    keep = (r > 1e-14) & (d > 1e-14)
    lx = np.log(d[keep])
    ly = np.log(r[keep])
    eta, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (eta * lx + intercept)
    ss = 1.0 - np.sum(resid ** 2) / max(np.sum((ly - ly.mean()) ** 2), 1e-300)
    env = intercept + float(np.max(resid))
    out["eta_fit"] = float(eta)
    out["C2_fit"] = float(math.exp(env))
    out["ls_intercept"] = float(intercept)
    out["r_squared"] = float(ss)
    # residual factor relative to the envelope line (<= 1 by construction)
    out["max_residual_factor"] = float(np.max(np.exp(ly - (eta * lx + env))))
    return out


# ---------------------------------------------------------------------------
# tails, flow constants, composed returns


def return_tail(structure: GibbsMarkovStructure):
    """Survival Leb{R > n} (leftover counts as R = infinity)."""
    from .pliss import TailCurve
    m = structure.grid_size
    rvals = np.where(structure.R == 0, np.iinfo(np.int64).max, structure.R)
    ngrid = np.concatenate([[0], geometric_grid(structure.params.n_max)])
    survival = np.array([np.count_nonzero(rvals > n) for n in ngrid], dtype=float) / m
    return TailCurve(n_values=ngrid, survival=survival,
                     censored_mass=structure.leftover_mass())


def measure_flow_constants(structure: GibbsMarkovStructure) -> dict:
    """The (m2)-(m4) constants measured from the per-step trace."""
    trace = structure.trace
    a0 = None
    a0_zero_steps = 0
    b0 = 0.0
    c0 = 0.0
    carved_at = np.zeros(structure.params.n_max + 1, dtype=np.int64)
    denoms = {}
    for rec in trace:
        if rec["B_prev"] > 0:
            if rec["B_to_A"] == 0:
                # the maturing outer ring of some waiting component fell
                # below grid resolution; the ratio measures an empty
                # intersection, not the ring-to-component mass comparison
                a0_zero_steps += 1
            else:
                ratio = rec["B_to_A"] / rec["B_prev"]
                a0 = ratio if a0 is None else min(a0, ratio)
        if rec["A_prev"] > 0:
            b0 = max(b0, rec["ringed_from_A"] / rec["A_prev"])
            c0 = max(c0, rec["carved"] / rec["A_prev"])
        carved_at[rec["n"]] = rec["carved"]
        if rec["A_prev_hyp"] > 0:
            denoms[rec["n"]] = rec["A_prev_hyp"]
    # carve-gap window: largest wait between a step with A cap H_n nonempty
    # and the next carve anywhere (Prop-4.3 style window, measured)
    n_max = structure.params.n_max
    next_carve = np.full(n_max + 2, -1, dtype=np.int64)
    nxt = -1
    for n in range(n_max, 0, -1):
        if carved_at[n] > 0:
            nxt = n
        next_carve[n] = nxt
    gaps = [next_carve[n] - n for n in denoms if next_carve[n] >= 0]
    window = int(max(gaps)) if gaps else 0
    c1 = None
    censored = 0
    for n, den in denoms.items():
        hi = n + window
        if hi > n_max:
            censored += 1
            continue
        num = int(np.sum(carved_at[n:hi + 1]))
        ratio = num / den
        c1 = ratio if c1 is None else min(c1, ratio)
    return {"a0": a0 if a0 is not None else 1.0, "b0": b0, "c0": c0,
            "a0_zero_steps": a0_zero_steps,
            "c1": c1 if c1 is not None else 0.0, "window_N": window,
            "c1_censored_steps": censored,
            "a0_ring_prediction": 1.0 - math.sqrt(structure.params.sigma)}


def compose_returns(structure: GibbsMarkovStructure, depth: int) -> dict:
    """Consecutive return times s_n by element-table lookup of the images.

    Images are resolved at grid-cell precision: the cell of the return
    image (stored frozen at carve time) decides which element continues
    the itinerary; landing in a leftover cell drops the point (mass
    logged per level).
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    m = structure.grid_size
    d0 = structure.params.delta0
    alive = structure.R > 0
    s = structure.R.astype(np.int64).copy()
    cur_img = structure.x_final.copy()
    levels = [{"depth": 1, "resolved_mass": float(np.count_nonzero(alive)) / m,
               "min_s": int(np.min(s[alive])) if alive.any() else 0}]
    for level in range(2, depth + 1):
        off = circle_offset(cur_img, structure.p_base)
        cells = np.clip(np.floor((off + d0) / structure.cell_width).astype(np.int64),
                        0, m - 1)
        next_r = np.where(alive, structure.R[cells], 0)
        alive = alive & (next_r > 0)
        s = s + np.where(alive, next_r, 0)
        cur_img = np.where(alive, structure.x_final[cells], cur_img)
        levels.append({"depth": level,
                       "resolved_mass": float(np.count_nonzero(alive)) / m,
                       "min_s": int(np.min(s[alive])) if alive.any() else 0})
    return {"s": s, "resolved": alive, "levels": levels}


# ---------------------------------------------------------------------------
# serialization


def structure_to_json(structure: GibbsMarkovStructure, sys: ModelSystem = None,
                      refine: bool = False, width_floor: float = 1e-11) -> dict:
    """JSON document with element intervals, leftover, params and gcd."""
    cell = structure.cell_width
    lo = (structure.points[structure.elem_lo] - 0.5 * cell) % 1.0
    hi = (structure.points[structure.elem_hi] + 0.5 * cell) % 1.0
    if refine and sys is not None:
        idx = np.flatnonzero(structure.element_width_est() >= width_floor)
        if len(idx):
            rlo, rhi, _ = element_edges(structure, sys, structure.elem_lo[idx])
            lo = lo.copy()
            hi = hi.copy()
            lo[idx] = rlo % 1.0
            hi[idx] = rhi % 1.0
    elements = [{"lo": float(a), "hi": float(b), "R": int(r), "n_hyp": int(h)}
                for a, b, r, h in zip(lo, hi, structure.element_R(),
                                      structure.n_hyp[structure.elem_lo])]
    leftover = _runs_to_intervals(structure, structure.R == 0)
    p = structure.params
    return {
        "schema": SCHEMA_VERSION,
        "elements": elements,
        "leftover": leftover,
        "leftover_mass": structure.leftover_mass(),
        "gcd_R": structure.gcd_R(),
        "violations": structure.violations,
        "nonconvergent": structure.nonconvergent,
        "p_base": structure.p_base,
        "params": {"delta0": p.delta0, "delta1": p.delta1, "delta2": p.delta2,
                   "delta_s": p.delta_s, "epsilon": p.epsilon, "N0": p.N0,
                   "R0": p.R0, "sigma": p.sigma, "c": p.c, "n_max": p.n_max,
                   "resolution": p.resolution},
    }


def _runs_to_intervals(structure, mask):
    cell = structure.cell_width
    out = []
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return out
    brk = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[brk + 1]])
    ends = np.concatenate([idx[brk], [idx[-1]]])
    for a, b in zip(starts, ends):
        out.append({"lo": float((structure.points[a] - 0.5 * cell) % 1.0),
                    "hi": float((structure.points[b] + 0.5 * cell) % 1.0)})
    return out


def write_structure_json(structure: GibbsMarkovStructure, path, sys: ModelSystem = None):
    doc = structure_to_json(structure, sys)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def calibrate_construction_constants(sys: ModelSystem, params: ConstructionParams,
                                     p_base: float, probe_grid: int = 2048,
                                     probe_steps: int = 400) -> dict:
    """Measure C0 (expansion overshoot between hyperbolic time and carve site).

    C0 bounds how much the sigma^{k/2} pre-ball contraction can be beaten
    by the <= N0 extra iterates between the certifying hyperbolic time and
    the actual carve; C1 = 1 exactly because stable fibers are vertical.
    """
    h = 2.0 * params.delta0 / probe_grid
    t = (p_base - params.delta0 + h * (np.arange(probe_grid) + 0.5)) % 1.0
    s1 = np.zeros(probe_grid)
    s2 = np.zeros(probe_grid)
    bsum = np.zeros(probe_grid)
    bmin = np.zeros(probe_grid)
    last_hyp = np.zeros(probe_grid, dtype=np.int64)
    logd = np.zeros(probe_grid)
    logd_hyp = np.zeros(probe_grid)
    log_sigma = math.log(params.sigma)
    c0 = 1.0
    for n in range(1, probe_steps + 1):
        gp = sys.base_deriv(t)
        s1n, s2n, expansion = sys.push_tangent(t, s1, s2)
        bsum += -np.log(expansion) - log_sigma
        hyp = bsum <= bmin
        np.copyto(last_hyp, n, where=hyp)
        np.minimum(bmin, bsum, out=bmin)
        logd += np.log(gp)
        np.copyto(logd_hyp, logd, where=hyp)
        t = sys.base_map(t)
        s1, s2 = s1n, s2n
        if n > params.R0:
            d = np.abs(circle_offset(t, p_base))
            site = (d < 2.0 * params.delta0) & (n - last_hyp <= params.N0)
            if site.any():
                c0 = max(c0, float(np.max(np.exp(logd[site] - logd_hyp[site]))))
    eps_max = (params.C1 / c0) * params.delta0 * (params.sigma ** -0.5 - 1.0)
    return {"C0": c0, "C1": 1.0, "eps_max": eps_max, "epsilon": 0.5 * eps_max}
