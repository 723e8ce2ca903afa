"""Curves that locally deform the x3-axis, their Frenet frames, and the tube map.

The curve is described by its curvature and torsion on a compact arclength
interval; the Serret-Frenet system is integrated with fixed-step RK4 starting
from the inertial frame of the straight axis.  Outside the deformed interval
the curve is the x3-axis itself, so the straight tails are handled in closed
form.

Tube coordinates follow

    x(s, r, theta) = Gamma(s) - r [n(s) cos(theta - alpha) + b(s) sin(theta - alpha)]

with the cross-section point (y1, y2) = (r cos theta, r sin theta).  On the
straight tails this gives x = (-y1, -y2, x3).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree


class CurveError(ValueError):
    """Raised when a curve profile is rejected (e.g. not C^2)."""


class OutOfRange(ValueError):
    """Arclength outside the sampled range of a FrameField."""


# ---------------------------------------------------------------------------
# curvature profiles
# ---------------------------------------------------------------------------

def smoothstep(u):
    """Quintic step, C^2 at both ends: 0 for u <= 0, 1 for u >= 1."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)


def plateau_pulse(s, start, angle, kmax, ramp):
    """Curvature pulse turning the tangent by `angle`.

    Rises from 0 to `kmax` over `ramp`, stays flat, and falls back over
    `ramp`.  The integral is exactly `angle`.  Returns (values, width).
    """
    flat = abs(angle) / kmax - ramp
    if flat < 0:
        raise CurveError(
            f"bend of {angle:.4g} rad cannot reach curvature {kmax:.4g} with ramp {ramp:.4g}")
    width = flat + 2.0 * ramp
    s = np.asarray(s, dtype=float)
    vals = math.copysign(kmax, angle) * smoothstep((s - start) / ramp) \
        * smoothstep((start + width - s) / ramp)
    return vals, width


@dataclass(frozen=True)
class CurveSpec:
    """Parametric description of a local deformation of the x3-axis.

    kind:
      "straight"  no deformation.
      "bump"      tangent rotated by amplitude * v (1 - v^2)^3, v = s'/half_width,
                  inside the plane spanned by e3 and the initial normal.  The
                  polynomial is odd, so the curve returns to the axis.
      "hairpin"   bends of +90, -180, +90 degrees with curvature `bend_curvature`,
                  C^2 ramps of length `ramp` and straight runs of length `run`.
                  Produces two nearly parallel runs of the tube.
      "arc"       one plateau of constant curvature `bend_curvature` and length
                  `run`, with ramps.  Does not return to the axis.
      "custom"    `curvature(s')` and `torsion(s')` callables on [0, length].
    """

    kind: str = "straight"
    amplitude: float = 0.0
    half_width: float = 0.5
    bend_curvature: float = 1.0
    ramp: float = 0.3
    run: float = 0.0
    length: float = 0.0
    curvature: Optional[Callable] = None
    torsion: Optional[Callable] = None
    twist: Optional[Callable] = None
    plane_angle: float = 0.0
    samples_per_unit: int = 200
    extent: float = 20.0

    def profile(self):
        """Return (curvature_fn, torsion_fn, support_length) in local arclength."""
        zero = lambda u: np.zeros_like(np.asarray(u, dtype=float))  # noqa: E731
        kind = self.kind
        if kind == "straight":
            return zero, zero, 0.0
        if kind == "bump":
            d = float(self.half_width)
            amp = float(self.amplitude)
            if d <= 0:
                raise CurveError("bump half_width must be positive")

            def gamma(u):
                v = (np.asarray(u, dtype=float) - d) / d
                inside = np.abs(v) < 1.0
                w = 1.0 - v * v
                return np.where(inside, amp * w * w * (1.0 - 7.0 * v * v) / d, 0.0)

            return gamma, zero, 2.0 * d
        if kind == "hairpin":
            k, rho, run = float(self.bend_curvature), float(self.ramp), float(self.run)
            _, w90 = plateau_pulse(0.0, 0.0, math.pi / 2, k, rho)
            _, w180 = plateau_pulse(0.0, 0.0, math.pi, k, rho)
            starts = (0.0, w90 + run, w90 + run + w180 + run)
            angles = (math.pi / 2, -math.pi, math.pi / 2)

            def gamma(u):
                return sum(plateau_pulse(u, a, ang, k, rho)[0] for a, ang in zip(starts, angles))

            return gamma, zero, starts[2] + w90
        if kind == "arc":
            k, rho, run = float(self.bend_curvature), float(self.ramp), float(self.run)
            angle = k * (run + rho)

            def gamma(u):
                return plateau_pulse(u, 0.0, angle, abs(k), rho)[0]

            return gamma, zero, run + 2.0 * rho
        if kind == "custom":
            if self.curvature is None or self.length <= 0:
                raise CurveError("custom curve needs a curvature callable and a positive length")
            tau = self.torsion if self.torsion is not None else zero
            return self.curvature, tau, float(self.length)
        raise CurveError(f"unknown curve kind {kind!r}")


# ---------------------------------------------------------------------------
# frame field
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FrameField:
    """Arclength-sampled curve with its Frenet triad.

    `s` is uniform with step `ds`.  Samples with index in [i0, i1] carry the
    deformation; outside that range the curve runs along the x3-axis.
    """

    s: np.ndarray
    gamma_pts: np.ndarray
    t: np.ndarray
    n: np.ndarray
    b: np.ndarray
    curvature: np.ndarray
    torsion: np.ndarray
    i0: int
    i1: int
    twist: Optional[Callable] = None
    _tree: object = field(default=None, repr=False)

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0])

    @property
    def s_range(self) -> tuple[float, float]:
        return float(self.s[0]), float(self.s[-1])

    @property
    def deformed_s(self) -> tuple[float, float]:
        return float(self.s[self.i0]), float(self.s[self.i1])

    @property
    def deformed_z(self) -> tuple[float, float]:
        """x3-range swept by the deformed part of the curve."""
        z = self.gamma_pts[self.i0:self.i1 + 1, 2]
        return float(z.min()), float(z.max())

    @property
    def is_straight(self) -> bool:
        return self.i1 <= self.i0

    def tail_offset(self) -> float:
        """s - x3 on the upper tail (extra arclength used by the deformation)."""
        return float(self.s[-1] - self.gamma_pts[-1, 2])

    def alpha(self, s):
        s = np.asarray(s, dtype=float)
        if self.twist is None:
            return np.zeros_like(s)
        return np.asarray(self.twist(s), dtype=float) * np.ones_like(s)

    def kdtree(self):
        if self._tree is None:
            pts = self.gamma_pts[self.i0:self.i1 + 1]
            object.__setattr__(self, "_tree", cKDTree(pts))
        return self._tree

    def at(self, s):
        """Interpolate (Gamma, t, n, b) at arclength(s).

        Gamma uses cubic Hermite interpolation with the tangent as slope; the
        frame is interpolated linearly and re-orthonormalized.
        """
        s = np.atleast_1d(np.asarray(s, dtype=float))
        lo, hi = self.s_range
        if np.any(s < lo - 1e-12) or np.any(s > hi + 1e-12):
            bad = s[(s < lo - 1e-12) | (s > hi + 1e-12)][0]
            raise OutOfRange(f"s={bad:.6g} outside sampled range [{lo:.6g}, {hi:.6g}]")
        ds = self.ds
        idx = np.clip(((s - lo) / ds).astype(int), 0, len(self.s) - 2)
        u = ((s - self.s[idx]) / ds)[:, None]
        p0, p1 = self.gamma_pts[idx], self.gamma_pts[idx + 1]
        m0, m1 = self.t[idx] * ds, self.t[idx + 1] * ds
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        g = h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1
        t = (1 - u) * self.t[idx] + u * self.t[idx + 1]
        n = (1 - u) * self.n[idx] + u * self.n[idx + 1]
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        n -= np.sum(n * t, axis=1, keepdims=True) * t
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        b = np.cross(t, n)
        return g, t, n, b

    def curvature_at(self, s):
        return np.interp(s, self.s, self.curvature)

    def to_csv(self, path) -> None:
        cols = ["s", "G1", "G2", "G3", "t1", "t2", "t3", "n1", "n2", "n3",
                "b1", "b2", "b3", "curvature", "torsion"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            data = np.column_stack([self.s, self.gamma_pts, self.t, self.n, self.b,
                                    self.curvature, self.torsion])
            for row in data:
                w.writerow([repr(float(v)) for v in row])


def _serret_frenet_rk4(gamma_fn, tau_fn, length, ds, n0, b0):
    steps = max(1, int(math.ceil(length / ds - 1e-9)))
    ds = length / steps if length > 0 else ds
    y = np.zeros((steps + 1, 12))
    y[0, 3:6] = (0.0, 0.0, 1.0)
    y[0, 6:9] = n0
    y[0, 9:12] = b0

    def rhs(u, st):
        k = float(gamma_fn(np.array([u]))[0])
        tau = float(tau_fn(np.array([u]))[0])
        t, n, b = st[3:6], st[6:9], st[9:12]
        return np.concatenate([t, k * n, -k * t + tau * b, -tau * n])

    for i in range(steps):
        u = i * ds
        cur = y[i]
        k1 = rhs(u, cur)
        k2 = rhs(u + ds / 2, cur + ds / 2 * k1)
        k3 = rhs(u + ds / 2, cur + ds / 2 * k2)
        k4 = rhs(u + ds, cur + ds * k3)
        y[i + 1] = cur + ds / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y, ds


def _max_jump(fn, length, ds):
    u = np.arange(0.0, length + ds / 2, ds)
    v = np.asarray(fn(u), dtype=float)
    return float(np.max(np.abs(np.diff(v)))) if len(v) > 1 else 0.0


def check_c2(spec: CurveSpec) -> tuple[bool, str]:
    """Detect curvature jumps: jumps must shrink under step refinement."""
    gamma, tau, length = spec.profile()
    if length == 0:
        return True, "straight"
    ds = 1.0 / spec.samples_per_unit
    for name, fn in (("curvature", gamma), ("torsion", tau)):
        j1 = _max_jump(fn, length, ds)
        j2 = _max_jump(fn, length, ds / 2)
        j4 = _max_jump(fn, length, ds / 4)
        if j1 > 1e-8 and j2 > 0.75 * j1 and j4 > 0.75 * j2:
            return False, (f"{name} jump {j4:.3g} does not shrink under refinement "
                           f"({j1:.3g} -> {j2:.3g} -> {j4:.3g}); curve is not C^2")
    return True, "ok"


def build_curve(spec: CurveSpec) -> FrameField:
    """Integrate the Frenet frame of `spec` and sample it on a uniform grid.

    The deformed stretch is centred so that its x3-range is symmetric about
    the origin; on the lower tail s equals x3.
    """
    ok, msg = check_c2(spec)
    if not ok:
        raise CurveError(msg)
    gamma_fn, tau_fn, length = spec.profile()
    ds = 1.0 / spec.samples_per_unit
    phi = spec.plane_angle
    n0 = np.array([math.cos(phi), math.sin(phi), 0.0])
    b0 = np.array([-math.sin(phi), math.cos(phi), 0.0])

    if length > 0:
        y, ds = _serret_frenet_rk4(gamma_fn, tau_fn, length, ds, n0, b0)
        u = np.linspace(0.0, length, len(y))
        zc = 0.5 * (y[:, 2].min() + y[:, 2].max())
        y[:, 2] -= zc
        s_a = float(y[0, 2])
        k_def = gamma_fn(u)
        tau_def = tau_fn(u)
    else:
        y = np.zeros((1, 12))
        y[0, 3:6] = (0, 0, 1)
        y[0, 6:9] = n0
        y[0, 9:12] = b0
        s_a = 0.0
        k_def = np.zeros(1)
        tau_def = np.zeros(1)

    n_tail = int(math.ceil(spec.extent / ds))
    m = len(y)
    total = n_tail + m + n_tail
    s = s_a + ds * (np.arange(total) - n_tail)
    pts = np.zeros((total, 3))
    t = np.zeros((total, 3))
    n = np.zeros((total, 3))
    b = np.zeros((total, 3))
    kap = np.zeros(total)
    tor = np.zeros(total)

    # lower tail: the x3-axis, s == x3
    lo = slice(0, n_tail)
    pts[lo, 2] = s[lo]
    t[lo] = (0, 0, 1)
    n[lo] = n0
    b[lo] = b0
    mid = slice(n_tail, n_tail + m)
    pts[mid] = y[:, 0:3]
    t[mid] = y[:, 3:6]
    n[mid] = y[:, 6:9]
    b[mid] = y[:, 9:12]
    kap[mid] = k_def
    tor[mid] = tau_def
    # upper tail continues straight from the end of the deformation
    hi = slice(n_tail + m, total)
    end = y[-1]
    steps = ds * (np.arange(1, n_tail + 1))[:, None]
    pts[hi] = end[0:3] + steps * end[3:6]
    t[hi] = end[3:6]
    n[hi] = end[6:9]
    b[hi] = end[9:12]
    i0 = n_tail
    i1 = n_tail + m - 1 if length > 0 else n_tail
    return FrameField(s=s, gamma_pts=pts, t=t, n=n, b=b, curvature=kap, torsion=tor,
                      i0=i0, i1=i1, twist=spec.twist)


# ---------------------------------------------------------------------------
# cross sections
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CrossSection:
    """Bounded open set in the plane, given by a vectorized membership test."""

    contains: Callable
    r_max: float
    name: str = "custom"

    def __post_init__(self):
        if not bool(np.asarray(self.contains(np.zeros(1), np.zeros(1)))[0]):
            raise ValueError("cross-section must contain the origin")

    def member(self, y1, y2):
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        inside = np.asarray(self.contains(y1, y2), dtype=bool)
        return inside & (y1 * y1 + y2 * y2 <= self.r_max * self.r_max)


def disk_section(radius: float) -> CrossSection:
    return CrossSection(lambda y1, y2: y1 * y1 + y2 * y2 < radius * radius,
                        r_max=float(radius), name=f"disk({radius:g})")


def square_section(half: float) -> CrossSection:
    return CrossSection(lambda y1, y2: (np.abs(y1) < half) & (np.abs(y2) < half),
                        r_max=float(half) * math.sqrt(2.0), name=f"square({half:g})")


# ---------------------------------------------------------------------------
# tube map and its inverse
# ---------------------------------------------------------------------------

def tube_point(frame: FrameField, s, r, theta):
    """Evaluate x(s, r, theta); broadcasts over array arguments."""
    s, r, theta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (s, r, theta)))
    shape = s.shape
    g, _, n, b = frame.at(s.ravel())
    ang = (theta - frame.alpha(s)).ravel()[:, None]
    x = g - r.ravel()[:, None] * (n * np.cos(ang) + b * np.sin(ang))
    return x.reshape(shape + (3,))


def _polar_in_frame(frame, s, x):
    g, _, n, b = frame.at(s)
    d = x - g
    dn = np.sum(d * n, axis=1)
    db = np.sum(d * b, axis=1)
    r = np.hypot(dn, db)
    theta = frame.alpha(s) + np.arctan2(-db, -dn)
    return r, theta, np.linalg.norm(d, axis=1)


def _newton_foot(frame, x, s_init, s_lo, s_hi, iters=40):
    """Vectorized safeguarded Newton for <x - Gamma(s), t(s)> = 0."""
    s = s_init.copy()
    a = np.full_like(s, s_lo)
    c = np.full_like(s, s_hi)
    ds = frame.ds
    # bracket around the start: the foot lies within a few samples of the nearest one
    a = np.maximum(s - 4 * ds, s_lo)
    c = np.minimum(s + 4 * ds, s_hi)

    def g_of(sv):
        gp, t, n, _ = frame.at(sv)
        d = x - gp
        k = frame.curvature_at(sv)
        return np.sum(d * t, axis=1), -1.0 + k * np.sum(d * n, axis=1)

    ga, _ = g_of(a)
    gc, _ = g_of(c)
    bracketed = ga * gc <= 0
    done = np.zeros(len(s), dtype=bool)
    for _ in range(iters):
        g, dg = g_of(s)
        if np.all(done):
            break
        # shrink bracket
        left = g * ga > 0
        a = np.where(bracketed & left & ~done, s, a)
        ga = np.where(bracketed & left & ~done, g, ga)
        c = np.where(bracketed & ~left & ~done, s, c)
        step = -g / np.where(np.abs(dg) > 1e-12, dg, -1.0)
        new = s + step
        out = bracketed & ((new <= a) | (new >= c))
        new = np.where(out, 0.5 * (a + c), new)
        new = np.clip(new, s_lo, s_hi)
        conv = np.abs(new - s) < 1e-13 * max(1.0, abs(s_hi))
        s = np.where(done, s, new)
        done |= conv
    g, _ = g_of(s)
    ok = np.abs(g) < 1e-9
    return s, ok


@dataclass
class LocateResult:
    s: np.ndarray
    r: np.ndarray
    theta: np.ndarray
    inside: np.ndarray
    unresolved: int = 0


def locate_many(frame: FrameField, section: CrossSection, x) -> LocateResult:
    """Vectorized inverse of the tube map.

    Returns tube coordinates for every point; `inside` marks points of the
    tube.  Points whose foot-point search fails are counted as unresolved and
    treated as outside.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    npts = len(x)
    s_out = np.full(npts, np.nan)
    r_out = np.full(npts, np.nan)
    th_out = np.full(npts, np.nan)
    best = np.full(npts, np.inf)
    rmax = section.r_max
    lo_s, hi_s = frame.s_range
    sa, sb = frame.deformed_s

    def offer(mask, s, r, th, dist):
        better = mask & (dist < best)
        s_out[better] = s[better]
        r_out[better] = r[better]
        th_out[better] = th[better]
        best[better] = dist[better]

    # lower tail: axis points with s = x3 <= sa
    rho = np.hypot(x[:, 0], x[:, 1])
    s_low = x[:, 2]
    m = (s_low <= sa) & (s_low >= lo_s)
    th_axis = np.arctan2(-x[:, 1], -x[:, 0])
    offer(m, s_low, rho, th_axis + frame.alpha(np.clip(s_low, lo_s, hi_s)), rho)
    # upper tail
    end = frame.gamma_pts[frame.i1]
    s_up = x[:, 2] - end[2] + sb
    m = (s_up >= sb) & (s_up <= hi_s)
    rho_up = np.hypot(x[:, 0] - end[0], x[:, 1] - end[1])
    th_up = np.arctan2(-(x[:, 1] - end[1]), -(x[:, 0] - end[0]))
    if frame.is_straight:
        m = (x[:, 2] >= lo_s) & (x[:, 2] <= hi_s)
        s_up = x[:, 2]
    offer(m, s_up, rho_up, th_up + frame.alpha(np.clip(s_up, lo_s, hi_s)), rho_up)

    unresolved = 0
    if not frame.is_straight:
        tree = frame.kdtree()
        dist, idx = tree.query(x, distance_upper_bound=rmax + 4 * frame.ds)
        cand = np.isfinite(dist)
        if np.any(cand):
            ci = np.where(cand)[0]
            s0 = frame.s[frame.i0 + idx[ci]]
            sf, ok = _newton_foot(frame, x[ci], s0, sa, sb)
            r, th, dd = _polar_in_frame(frame, sf, x[ci])
            unresolved = int(np.count_nonzero(~ok))
            mask = np.zeros(npts, dtype=bool)
            full = np.full(npts, np.inf)
            full[ci] = np.where(ok, dd, np.inf)
            mask[ci] = ok
            ss, rr, tt = np.zeros(npts), np.zeros(npts), np.zeros(npts)
            ss[ci], rr[ci], tt[ci] = sf, r, th
            offer(mask, ss, rr, tt, full)

    found = np.isfinite(best)
    y1 = np.where(found, r_out * np.cos(np.nan_to_num(th_out)), 0.0)
    y2 = np.where(found, r_out * np.sin(np.nan_to_num(th_out)), 0.0)
    inside = found & (np.nan_to_num(r_out, nan=np.inf) <= rmax) & section.member(y1, y2)
    return LocateResult(s_out, r_out, th_out, inside, unresolved)


def locate_in_tube(frame: FrameField, section: CrossSection, x):
    """Tube coordinates (s, r, theta) of a single point, or None off the tube."""
    res = locate_many(frame, section, np.asarray(x, dtype=float)[None, :])
    if not res.inside[0]:
        return None
    return float(res.s[0]), float(res.r[0]), float(res.theta[0])


def section_coords(res: LocateResult):
    """Cross-section coordinates (y1, y2) for located points (0 when outside)."""
    r = np.where(res.inside, res.r, 0.0)
    th = np.where(res.inside, res.theta, 0.0)
    return r * np.cos(th), r * np.sin(th)


def lift_potential(V: Callable, frame: FrameField, section: CrossSection, x):
    """Lifted potential: V at the cross-section coordinates of x, 0 off the tube.

    `V` is a vectorized function of planar coordinates (y1, y2).  Accepts a
    single point or an (N, 3) array.
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    res = locate_many(frame, section, np.atleast_2d(arr))
    y1, y2 = section_coords(res)
    vals = np.where(res.inside, np.asarray(V(y1, y2), dtype=float) * np.ones_like(y1), 0.0)
    return float(vals[0]) if single else vals


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TubeDiagnostics:
    injective: bool
    sup_r_gamma: float
    assumption1: bool
    max_radius_in_strip: float
    straight_outside: bool
    max_offaxis_outside: float

    @property
    def all_pass(self) -> bool:
        return self.injective and self.assumption1 and self.straight_outside

    def as_dict(self) -> dict:
        return {
            "injective": self.injective,
            "sup_r_gamma": self.sup_r_gamma,
            "assumption1": self.assumption1,
            "max_radius_in_strip": self.max_radius_in_strip,
            "straight_outside": self.straight_outside,
            "max_offaxis_outside": self.max_offaxis_outside,
        }


def _section_boundary_samples(section: CrossSection, n_r=24, n_th=96):
    r = np.linspace(0.0, section.r_max, n_r)
    th = np.linspace(0.0, 2 * np.pi, n_th, endpoint=False)
    R, T = np.meshgrid(r, th, indexing="ij")
    y1, y2 = R * np.cos(T), R * np.sin(T)
    keep = section.member(y1, y2)
    return R[keep], T[keep]


def validate_tube(frame: FrameField, section: CrossSection, s0: float,
                  tol: float = 1e-9) -> TubeDiagnostics:
    """Check local injectivity, the ball-containment assumption and straightness."""
    sup_rg = float(section.r_max * np.max(np.abs(frame.curvature)))
    strip = s0 / math.sqrt(2.0)

    # tube points whose x3 may fall into the strip
    near = np.abs(frame.gamma_pts[:, 2]) <= strip + section.r_max
    idx = np.where(near)[0]
    if len(idx) == 0:
        max_rad = 0.0
    else:
        step = max(1, len(idx) // 4000)
        ss = frame.s[idx[::step]]
        R, T = _section_boundary_samples(section)
        S = np.repeat(ss, len(R))
        pts = tube_point(frame, S, np.tile(R, len(ss)), np.tile(T, len(ss)))
        in_strip = np.abs(pts[:, 2]) <= strip
        max_rad = float(np.max(np.linalg.norm(pts[in_strip], axis=1))) if np.any(in_strip) else 0.0

    outside = np.abs(frame.gamma_pts[:, 2]) >= strip
    if np.any(outside):
        g = frame.gamma_pts[outside]
        dev_pos = np.max(np.hypot(g[:, 0], g[:, 1]))
        dev_t = np.max(np.linalg.norm(frame.t[outside] - np.array([0, 0, 1.0]), axis=1))
        max_off = float(max(dev_pos, dev_t))
    else:
        max_off = 0.0
    # the deformation itself must stay strictly inside the strip
    zlo, zhi = frame.deformed_z
    inside_strip = frame.is_straight or (max(abs(zlo), abs(zhi)) <= strip + tol)
    return TubeDiagnostics(
        injective=sup_rg < 1.0,
        sup_r_gamma=sup_rg,
        assumption1=max_rad < s0,
        max_radius_in_strip=max_rad,
        straight_outside=bool(max_off <= 1e-6 and inside_strip),
        max_offaxis_outside=max_off,
    )
