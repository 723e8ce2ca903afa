"""Compactly supported magnetic fields and their Landau-type gauges.

The field is B = curl(chi(|x|) A0) with A0 = B0 x x / 2, so B equals the
constant B0 on the ball of radius rho1 and vanishes outside rho2.  chi is a
quintic smoothstep in |x|.

Two gauges are provided with A2 = 0:

* the Landau gauge, vanishing for x3 > 2 s0,
* the mirror gauge, vanishing for x3 < -2 s0.

Both are evaluated in two independent ways.  `Gauge.potential` uses the
closed form chi A0 + grad(Phi), where Phi is built from line integrals of
chi A0 computed with composite Gauss-Legendre rules split at the sphere
crossings.  `Gauge.reference` evaluates the nested integrals of B directly
with adaptive Gauss-Kronrod quadrature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import integrate


# ---------------------------------------------------------------------------
# field
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MagneticField:
    """B = curl(chi A0); constant B0 inside |x| < rho1, zero beyond rho2."""

    B0: tuple
    s0: float
    rho1: float
    rho2: float

    @property
    def b0(self) -> np.ndarray:
        return np.asarray(self.B0, dtype=float)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.b0))

    @property
    def is_zero(self) -> bool:
        return self.norm == 0.0

    @property
    def M(self) -> np.ndarray:
        """A0 = M x."""
        b = 0.5 * self.b0
        return np.array([[0.0, -b[2], b[1]], [b[2], 0.0, -b[0]], [-b[1], b[0], 0.0]])

    def _u(self, rho):
        return np.clip((rho - self.rho1) / (self.rho2 - self.rho1), 0.0, 1.0)

    def chi(self, rho):
        u = self._u(np.asarray(rho, dtype=float))
        return 1.0 - u**3 * (10.0 - 15.0 * u + 6.0 * u * u)

    def dchi(self, rho):
        u = self._u(np.asarray(rho, dtype=float))
        return -30.0 * u * u * (1.0 - u) ** 2 / (self.rho2 - self.rho1)

    def d2chi(self, rho):
        u = self._u(np.asarray(rho, dtype=float))
        w = self.rho2 - self.rho1
        return -60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / (w * w)

    def A0(self, x):
        return np.asarray(x, dtype=float) @ self.M.T

    def A_chi(self, x):
        """chi(|x|) A0(x): a vector potential of B in no particular gauge."""
        x = np.asarray(x, dtype=float)
        rho = np.linalg.norm(x, axis=-1)
        return self.chi(rho)[..., None] * self.A0(x)

    def B(self, x):
        """chi B0 + grad(chi) x A0."""
        x = np.asarray(x, dtype=float)
        rho = np.linalg.norm(x, axis=-1)
        safe = np.where(rho > 0, rho, 1.0)
        grad = (self.dchi(rho) / safe)[..., None] * x
        return self.chi(rho)[..., None] * self.b0 + np.cross(grad, self.A0(x))

    def dB(self, x, j):
        """Partial derivative of B along x_j."""
        x = np.asarray(x, dtype=float)
        rho = np.linalg.norm(x, axis=-1)
        safe = np.where(rho > 0, rho, 1.0)
        c1 = self.dchi(rho)
        c2 = self.d2chi(rho)
        xj = x[..., j]
        ej = np.zeros(3)
        ej[j] = 1.0
        grad = (c1 / safe)[..., None] * x
        hess_j = (c2 * xj / safe**2)[..., None] * x \
            + (c1 / safe)[..., None] * (ej - (xj / safe**2)[..., None] * x)
        dA0 = self.M[:, j]
        return grad[..., j:j + 1] * self.b0 + np.cross(hess_j, self.A0(x)) + np.cross(grad, dA0)

    def support_radius(self) -> float:
        return self.rho2


def make_field(B0, s0: float, inner: float = 1.2, outer: float = 1.8) -> MagneticField:
    """Field equal to B0 on B(0, inner*s0) and zero outside B(0, outer*s0)."""
    if s0 <= 0:
        raise ValueError("s0 must be positive")
    if not 0 < inner < outer < 2:
        raise ValueError("need 0 < inner < outer < 2 so the support stays in |x3| < 2 s0")
    b = tuple(float(v) for v in np.asarray(B0, dtype=float).ravel())
    if len(b) != 3:
        raise ValueError("B0 must have three components")
    return MagneticField(B0=b, s0=float(s0), rho1=inner * s0, rho2=outer * s0)


# ---------------------------------------------------------------------------
# line integrals with breakpoints at the sphere crossings
# ---------------------------------------------------------------------------

_GL = {q: np.polynomial.legendre.leggauss(q) for q in (6, 16)}


def _line_integral(field: MagneticField, P, axis, a, b, integrand, pieces=2, chunk=8192,
                   nodes=16):
    """Integrate integrand(X) along X = P with X[:, axis] = t, t from a to b.

    The integrand must vanish outside B(0, rho2) and be smooth between the
    crossings of the spheres of radius rho1 and rho2.
    """
    P = np.asarray(P, dtype=float)
    a = np.broadcast_to(np.asarray(a, dtype=float), (len(P),))
    b = np.broadcast_to(np.asarray(b, dtype=float), (len(P),))
    out = None
    for k0 in range(0, len(P), chunk):
        sl = slice(k0, k0 + chunk)
        p, aa, bb = P[sl], a[sl], b[sl]
        n = len(p)
        other = [i for i in range(3) if i != axis]
        d2 = p[:, other[0]] ** 2 + p[:, other[1]] ** 2
        lo = np.minimum(aa, bb)
        hi = np.maximum(aa, bb)
        sign = np.where(bb >= aa, 1.0, -1.0)
        t2 = np.sqrt(np.maximum(field.rho2**2 - d2, 0.0))
        t1 = np.sqrt(np.maximum(field.rho1**2 - d2, 0.0))
        # integrand vanishes for |t| >= t2
        lo = np.clip(lo, -t2, t2)
        hi = np.clip(hi, -t2, t2)
        bp = np.stack([lo, -t1, 0 * lo, t1, hi], axis=1)
        bp = np.clip(bp, lo[:, None], hi[:, None])
        bp.sort(axis=1)
        edges = [bp[:, 0]]
        for i in range(bp.shape[1] - 1):
            for m in range(1, pieces + 1):
                edges.append(bp[:, i] + (bp[:, i + 1] - bp[:, i]) * m / pieces)
        edges = np.stack(edges, axis=1)
        left, right = edges[:, :-1], edges[:, 1:]
        half = 0.5 * (right - left)
        mid = 0.5 * (right + left)
        gx, gw = _GL[nodes]
        t = mid[:, :, None] + half[:, :, None] * gx
        w = half[:, :, None] * gw
        nq = t.shape[1] * t.shape[2]
        X = np.repeat(p, nq, axis=0)
        X[:, axis] = t.reshape(-1)
        vals = np.asarray(integrand(X))
        if vals.ndim == 1:
            vals = vals[:, None]
        vals = vals.reshape(n, nq, -1)
        res = np.einsum("nq,nqk->nk", w.reshape(n, nq), vals) * sign[:, None]
        if out is None:
            out = np.empty((len(P), res.shape[1]))
        out[sl] = res
    return out


def _chiA_with_grad(field: MagneticField, X, k, dirs):
    """(chi A0)_k and its derivatives along `dirs` at the points X."""
    rho = np.linalg.norm(X, axis=1)
    safe = np.where(rho > 0, rho, 1.0)
    chi = field.chi(rho)
    A0k = X @ field.M[k]
    cols = [chi * A0k]
    g = field.dchi(rho) / safe
    for j in dirs:
        cols.append(g * X[:, j] * A0k + chi * field.M[k, j])
    return np.stack(cols, axis=1)


def _cumulative(field, integrand, x1, x2, x3, axis, anchor):
    """int_anchor^{x_axis} integrand along `axis` at every node of the grid."""
    axes = [x1, x2, x3]
    line = axes[axis]
    ext = np.union1d(line, [anchor])
    z = int(np.searchsorted(ext, anchor))
    others = [a for a in range(3) if a != axis]
    O1, O2 = np.meshgrid(axes[others[0]], axes[others[1]], indexing="ij")
    nl = O1.size
    nseg = len(ext) - 1
    P = np.zeros((nl * nseg, 3))
    P[:, others[0]] = np.repeat(O1.ravel(), nseg)
    P[:, others[1]] = np.repeat(O2.ravel(), nseg)
    a = np.tile(ext[:-1], nl)
    b = np.tile(ext[1:], nl)
    seg = _line_integral(field, P, axis, a, b, integrand, pieces=1, nodes=16)[:, 0]
    seg = seg.reshape(nl, nseg)
    cum = np.concatenate([np.zeros((nl, 1)), np.cumsum(seg, axis=1)], axis=1)
    cum -= cum[:, z:z + 1]
    pos = np.searchsorted(ext, line)
    vals = cum[:, pos].reshape(len(axes[others[0]]), len(axes[others[1]]), len(line))
    # move the integration axis back into place
    vals = np.moveaxis(vals, 2, axis)
    shape = [len(x1), len(x2), len(x3)]
    return np.broadcast_to(vals, shape).copy()


# ---------------------------------------------------------------------------
# gauges
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Gauge:
    """Vector potential with A2 = 0 that vanishes on one side of |x3| = anchor.

    anchor = +2 s0 gives the Landau gauge (zero for x3 > 2 s0), anchor = -2 s0
    the mirror gauge (zero for x3 < -2 s0).
    """

    field: MagneticField
    anchor: float
    name: str

    def _pieces(self, x, need_derivs=True):
        f = self.field
        x = np.atleast_2d(np.asarray(x, dtype=float))
        # I = int_0^{x2} (chi A0)_2 (x1, t, x3) dt, with d/dx1 and d/dx3
        I = _line_integral(f, x, 1, 0.0, x[:, 1],
                           lambda X: _chiA_with_grad(f, X, 1, (0, 2) if need_derivs else ()))
        # c = -int_anchor^{x3} (chi A0)_3 (x1, 0, t) dt, with d/dx1
        base = x.copy()
        base[:, 1] = 0.0
        C = -_line_integral(f, base, 2, self.anchor, x[:, 2],
                            lambda X: _chiA_with_grad(f, X, 2, (0,) if need_derivs else ()))
        return x, base, I, C

    def scalar(self, x):
        """Phi with A = chi A0 + grad(Phi)."""
        if self.field.is_zero:
            return np.zeros(len(np.atleast_2d(x)))
        _, _, I, C = self._pieces(x, need_derivs=False)
        return -I[:, 0] + C[:, 0]

    def scalar_on_grid(self, x1, x2, x3):
        """Phi on the tensor grid x1 x x2 x x3 (each sorted ascending).

        Integrals are accumulated segment by segment along x2 (for I) and
        along x3 (for c), so each node costs one short line integral.
        """
        f = self.field
        x1, x2, x3 = (np.asarray(v, dtype=float) for v in (x1, x2, x3))
        if f.is_zero:
            return np.zeros((len(x1), len(x2), len(x3)))
        I = _cumulative(f, lambda X: _chiA_with_grad(f, X, 1, ())[:, 0],
                        x1, x2, x3, axis=1, anchor=0.0)
        c = -_cumulative(f, lambda X: _chiA_with_grad(f, X, 2, ())[:, 0],
                         x1, np.zeros(1), x3, axis=2, anchor=self.anchor)
        return -I + c

    def potential(self, x):
        """A at the points x, shape (N, 3)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.field.is_zero:
            return np.zeros_like(x)
        f = self.field
        x, base, I, C = self._pieces(x)
        Ac = f.A_chi(x)
        A = np.zeros_like(x)
        A[:, 0] = Ac[:, 0] - I[:, 1] + C[:, 1]
        A[:, 2] = Ac[:, 2] - I[:, 2] - f.A_chi(base)[:, 2]
        return A

    def tolerance(self) -> float:
        f = self.field
        return 1e-10 * (1.0 + f.norm * f.s0**2)

    def reference(self, x):
        """Nested-integral evaluation with adaptive Gauss-Kronrod quadrature.

        A3 = int_0^{x2} B1 dt2,
        A1 = int_anchor^{x3} [ int_0^{x2} d1 B1 dt2 + B2(x1, x2, t3) ] dt3.
        Slow; intended for spot checks.
        """
        f = self.field
        tol = self.tolerance()
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        if f.is_zero:
            return out

        def crossings(d2):
            pts = [0.0]
            for rho in (f.rho1, f.rho2):
                if rho * rho > d2:
                    r = float(np.sqrt(rho * rho - d2))
                    pts += [-r, r]
            return pts

        def clipped(a, b, pts):
            lo, hi = min(a, b), max(a, b)
            return [p for p in pts if lo < p < hi] or None

        for i, (x1, x2, x3) in enumerate(x):
            def b1(t2, t3=x3):
                return f.B(np.array([x1, t2, t3]))[0]

            pts = clipped(0.0, x2, crossings(x1 * x1 + x3 * x3))
            out[i, 2] = integrate.quad(b1, 0.0, x2, points=pts, epsabs=tol, epsrel=0,
                                       limit=200)[0] if x2 != 0 else 0.0

            def inner(t3):
                p = clipped(0.0, x2, crossings(x1 * x1 + t3 * t3))
                v = 0.0
                if x2 != 0:
                    v = integrate.quad(lambda t2: f.dB(np.array([x1, t2, t3]), 0)[0],
                                       0.0, x2, points=p, epsabs=tol * 0.1, epsrel=0,
                                       limit=200)[0]
                return v + f.B(np.array([x1, x2, t3]))[1]

            pts3 = clipped(self.anchor, x3, crossings(x1 * x1 + x2 * x2) + crossings(x1 * x1))
            out[i, 0] = integrate.quad(inner, self.anchor, x3, points=pts3, epsabs=tol,
                                       epsrel=0, limit=200)[0] if x3 != self.anchor else 0.0
        return out

    def link_phases(self, xa, xb):
        """Line integrals of A along straight segments xa -> xb.

        chi A0 is integrated with three-point Gauss; the gradient part is
        exact.  Differences of two gauges of the same field therefore give
        exact discrete gradients whenever their difference is quadratic.
        """
        xa = np.asarray(xa, dtype=float)
        xb = np.asarray(xb, dtype=float)
        if self.field.is_zero:
            return np.zeros(len(xa))
        return chi_link_integral(self.field, xa, xb) + self.scalar(xb) - self.scalar(xa)

    def to_csv(self, path, x) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        A = self.potential(x)
        B = self.field.B(x)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "x3", "A1", "A2", "A3", "B1", "B2", "B3"])
            for row in np.column_stack([x, A, B]):
                w.writerow([repr(float(v)) for v in row])


_G3_X, _G3_W = np.polynomial.legendre.leggauss(3)


def chi_link_integral(field: MagneticField, xa, xb):
    """Three-point Gauss approximation of int chi A0 . dl along xa -> xb."""
    d = xb - xa
    acc = np.zeros(len(xa))
    for gx, gw in zip(_G3_X, _G3_W):
        p = xa + 0.5 * (1.0 + gx) * d
        acc += 0.5 * gw * np.sum(field.A_chi(p) * d, axis=1)
    return acc


def landau_gauge(field: MagneticField) -> Gauge:
    return Gauge(field=field, anchor=2.0 * field.s0, name="landau")


def mirror_gauge(field: MagneticField) -> Gauge:
    return Gauge(field=field, anchor=-2.0 * field.s0, name="mirror")


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurlCheck:
    n: int
    h: float
    residual: tuple
    relative: float
    a2_max: float
    vanish_max: float

    def as_dict(self) -> dict:
        return {"n": self.n, "h": self.h, "residual": list(self.residual),
                "relative": self.relative, "a2_max": self.a2_max,
                "vanish_max": self.vanish_max}


def check_curl_system(gauge: Gauge, n: int = 64, half_width: float | None = None) -> CurlCheck:
    """Central-difference curl of A on an n^3 grid against B.

    Residuals are maxima over interior nodes.  `vanish_max` is max |A| over
    nodes on the side where the gauge must vanish.
    """
    f = gauge.field
    L = 2.5 * f.s0 if half_width is None else half_width
    x = np.linspace(-L, L, n)
    h = float(x[1] - x[0])
    X = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3)
    A = gauge.potential(X).reshape(n, n, n, 3)
    B = f.B(X).reshape(n, n, n, 3)

    def d(F, ax):
        return (np.roll(F, -1, ax) - np.roll(F, 1, ax)) / (2 * h)

    curl = [d(A[..., 2], 1) - d(A[..., 1], 2),
            d(A[..., 0], 2) - d(A[..., 2], 0),
            d(A[..., 1], 0) - d(A[..., 0], 1)]
    inner = (slice(1, -1),) * 3
    res = tuple(float(np.max(np.abs(curl[i] - B[..., i])[inner])) for i in range(3))
    side = x > 2 * f.s0 if gauge.anchor > 0 else x < -2 * f.s0
    vanish = float(np.max(np.abs(A[:, :, side, :]))) if np.any(side) else 0.0
    rel = max(res) / f.norm if f.norm > 0 else max(res)
    return CurlCheck(n=n, h=h, residual=res, relative=rel,
                     a2_max=float(np.max(np.abs(A[..., 1]))), vanish_max=vanish)
