"""Discrete Hermitian operators: h_V in the plane, the magnetic Neumann
Laplacian on a disk, the 3D tube Hamiltonian and its bracketing pieces.

All finite-difference operators live on uniform node grids.  A Dirichlet face
keeps the link to the (zero) ghost node beyond the last unknown; a Neumann
face or an internal cut drops that link.  Dropping links removes nonnegative
terms from the quadratic form, so a cut operator is a lower bound of the
uncut one on the same grid.

Magnetic hopping uses Peierls phases: (H u)_i = sum_j (u_i - exp(-i theta_ij) u_j)/h^2
with theta_ij the line integral of A from node i to node j.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.fft import dstn, idstn
from scipy.linalg import eigh_tridiagonal
from scipy.spatial import cKDTree

from . import geometry as geo
from .eigsolve import SolveRequest, lowest_eigs
from .fields import Gauge, chi_link_integral
from .hermitian import HermitianOperator

__all__ = [
    "Grid", "grid2", "grid3", "PlanarPotential", "well_potential", "HermitianOperator",
    "assemble_hv", "GroundState2D", "ground_state_2d", "DiskFibers",
    "assemble_disk_neumann", "cartesian_disk_neumann", "lambda1_disk", "TubeData",
    "prepare_tube", "assemble_h3d", "quadratic_form", "bracketing_pieces", "BracketingPieces",
]


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform node grid on the box [lo, hi] (unknowns strictly inside).

    bc[a] = (low face tag, high face tag) with tags "D" or "N".
    """

    lo: tuple
    hi: tuple
    h: tuple
    bc: tuple = ()

    def __post_init__(self):
        if not self.bc:
            object.__setattr__(self, "bc", tuple(("D", "D") for _ in self.lo))
        for a in range(self.ndim):
            if self.h[a] <= 0:
                raise ValueError("grid spacing must be positive")
            if self.counts[a] < 3:
                raise ValueError("need at least 3 nodes per axis")
            for tag in self.bc[a]:
                if tag not in ("D", "N"):
                    raise ValueError(f"unknown boundary tag {tag!r}")

    @property
    def ndim(self) -> int:
        return len(self.lo)

    @property
    def counts(self) -> tuple:
        return tuple(int(round((self.hi[a] - self.lo[a]) / self.h[a])) - 1
                     for a in range(len(self.lo)))

    @property
    def shape(self) -> tuple:
        return self.counts

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def axis(self, a) -> np.ndarray:
        return self.lo[a] + self.h[a] * np.arange(1, self.counts[a] + 1)

    def axes(self):
        return [self.axis(a) for a in range(self.ndim)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def as_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "h": list(self.h),
                "counts": list(self.counts), "bc": [list(b) for b in self.bc]}


def grid2(half_width: float, h: float, bc=("D", "D")) -> Grid:
    return Grid(lo=(-half_width, -half_width), hi=(half_width, half_width), h=(h, h),
                bc=(tuple(bc), tuple(bc)))


def grid3(half_width: float, z_lo: float, z_hi: float, h: float, hz: Optional[float] = None) -> Grid:
    hz = h if hz is None else hz
    return Grid(lo=(-half_width, -half_width, z_lo), hi=(half_width, half_width, z_hi),
                h=(h, h, hz))


# ---------------------------------------------------------------------------
# potentials in the cross-section plane
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PlanarPotential:
    """Bounded nonnegative potential V(y1, y2) supported in the disk of radius `radius`."""

    func: Callable
    sup: float
    radius: float
    name: str = "custom"

    def __call__(self, y1, y2):
        return self.func(np.asarray(y1, dtype=float), np.asarray(y2, dtype=float))

    def oscillation(self, section: Optional[geo.CrossSection] = None, samples: int = 201) -> float:
        """sup - inf of V over the section (or over its support disk)."""
        r = self.radius if section is None else section.r_max
        y = np.linspace(-r, r, samples)
        Y1, Y2 = np.meshgrid(y, y, indexing="ij")
        inside = Y1**2 + Y2**2 <= r * r if section is None else section.member(Y1, Y2)
        v = self(Y1[inside], Y2[inside])
        return float(np.max(v) - np.min(v))


def well_potential(depth: float, section: geo.CrossSection) -> PlanarPotential:
    """depth * indicator of the cross-section."""
    return PlanarPotential(
        func=lambda y1, y2: depth * section.member(y1, y2).astype(float),
        sup=float(depth), radius=section.r_max, name=f"{depth:g}*1[{section.name}]")


def cell_average(func, pts, h, sub):
    """Mean of func over sub^d points centred in the cell of each node."""
    pts = np.asarray(pts, dtype=float)
    d = pts.shape[1]
    off = (np.arange(sub) + 0.5) / sub - 0.5
    acc = np.zeros(len(pts))
    for shift in np.stack(np.meshgrid(*([off] * d), indexing="ij"), -1).reshape(-1, d):
        acc += func(pts + shift * np.asarray(h))
    return acc / sub**d


# ---------------------------------------------------------------------------
# generic assembly
# ---------------------------------------------------------------------------

def _link_matrix(grid: Grid, mask=None, phases=None, diag_extra=None):
    """Peierls Laplacian on the nodes selected by `mask`.

    phases[a] has the grid shape reduced by one along axis a and holds the
    link phase from node i to node i + e_a.
    """
    shape = grid.shape
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    index = -np.ones(shape, dtype=np.int64)
    index[mask] = np.arange(int(mask.sum()))
    n = int(mask.sum())
    rows, cols, vals = [], [], []
    deg = np.zeros(shape)
    for a in range(grid.ndim):
        w = 1.0 / grid.h[a] ** 2
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        both = mask[lo] & mask[hi]
        i = index[lo][both]
        j = index[hi][both]
        if phases is not None and phases[a] is not None:
            hop = -w * np.exp(-1j * phases[a][both])
        else:
            hop = -w * np.ones(len(i), dtype=complex)
        rows += [i, j]
        cols += [j, i]
        vals += [hop, np.conj(hop)]
        cnt = np.zeros(shape)
        cnt[lo] += both
        cnt[hi] += both
        deg += cnt * w
        # Dirichlet ghost links on the outer faces
        for side, tag in enumerate(grid.bc[a]):
            if tag == "D":
                face = [slice(None)] * grid.ndim
                face[a] = 0 if side == 0 else -1
                deg[tuple(face)] += w
    diag = deg[mask]
    if diag_extra is not None:
        diag = diag + diag_extra[mask]
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag.astype(complex))
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    return M, index, np.real(diag)


def dst_preconditioner(grid: Grid, mask=None):
    """Approximate (Op - sigma)^-1 by the inverse of the shifted Dirichlet box Laplacian.

    Diagonalized by the type-I sine transform; restricted to `mask` when the
    operator lives on a subset of nodes.  Returns a factory sigma -> apply.
    """
    shape = grid.shape
    K = np.zeros(shape)
    for a, n in enumerate(shape):
        k = (2.0 - 2.0 * np.cos(np.pi * np.arange(1, n + 1) / (n + 1))) / grid.h[a] ** 2
        sh = [1] * len(shape)
        sh[a] = n
        K = K + k.reshape(sh)

    def factory(sigma):
        s = min(float(sigma), -1e-3)
        denom = K - s

        def apply(X):
            X = np.asarray(X)
            vec = X.ndim == 1
            X2 = X.reshape(len(X), -1)
            out = np.empty_like(X2, dtype=complex)
            for c in range(X2.shape[1]):
                if mask is None:
                    v = X2[:, c].reshape(shape)
                else:
                    v = np.zeros(shape, dtype=complex)
                    v[mask] = X2[:, c]
                w = idstn(dstn(v, type=1, workers=-1) / denom, type=1, workers=-1)
                out[:, c] = w.ravel() if mask is None else w[mask]
            return out[:, 0] if vec else out

        return apply

    return factory


def _operator(M, grid, mask, potential_sup, diag, meta, precond=True):
    pre = dst_preconditioner(grid, None if mask is None or mask.all() else mask) if precond else None
    return HermitianOperator(dim=M.shape[0], matvec=M.__matmul__, matrix=M,
                             potential_sup=float(potential_sup), diagonal=diag,
                             precond=pre, metadata=meta)


# ---------------------------------------------------------------------------
# planar operator h_V
# ---------------------------------------------------------------------------

def assemble_hv(V: PlanarPotential, grid: Grid, sub: int = 4) -> HermitianOperator:
    """Five-point -Laplacian minus the cell-averaged V, Dirichlet truncation."""
    if grid.ndim != 2:
        raise ValueError("h_V lives on a 2D grid")
    pts = grid.points()
    vals = cell_average(lambda p: V(p[:, 0], p[:, 1]), pts, grid.h, sub)
    M, _, diag = _link_matrix(grid, diag_extra=-vals.reshape(grid.shape))
    meta = {"kind": "h_V", "grid": grid.as_dict(), "potential": V.name, "sub": sub,
            "warnings": []}
    decay = 1.0 / math.sqrt(V.sup) if V.sup > 0 else math.inf
    margin = min(min(-grid.lo[a], grid.hi[a]) for a in range(2)) - V.radius
    if margin < 5 * decay:
        msg = f"support margin {margin:.3g} is below 5 decay lengths ({5 * decay:.3g})"
        meta["warnings"].append(msg)
        warnings.warn(msg)
    op = _operator(M, grid, None, V.sup, diag, meta)
    op.node_potential = vals
    return op


@dataclass(frozen=True, eq=False)
class GroundState2D:
    e: float
    f: np.ndarray
    grid: Grid
    beta_f: float
    f_sup: float
    s0: float
    gap: float
    residual: float

    def as_dict(self) -> dict:
        return {"e": self.e, "beta_f": self.beta_f, "f_sup": self.f_sup, "s0": self.s0,
                "gap_to_second": self.gap, "residual": self.residual,
                "grid": self.grid.as_dict()}


class NoBoundState(RuntimeError):
    pass


def _positive_polish(op: HermitianOperator, v, e, e2, steps=2):
    """Inverse iteration that keeps the far tail of the ground state accurate.

    For a real operator with nonpositive off-diagonal entries, Op - sigma with
    sigma below the spectrum is a nonsingular M-matrix.  Its LU factors under
    a symmetric ordering solve positive right-hand sides without
    cancellation, so the exponentially small tail keeps its relative
    accuracy instead of drowning in the residual of the iterative solve.
    """
    M = op.matrix
    if M is None:
        return v
    A = M.tocsr()
    off = A - sp.diags(A.diagonal())
    if abs(A.imag).max() > 0 or off.real.max() > 0:
        return v
    A = A.real.tocsc()
    sigma = e - 1e-3 * (e2 - e)
    lu = spla.splu(A - sigma * sp.identity(A.shape[0], format="csc"),
                   permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options={"SymmetricMode": True})
    x = np.abs(v)
    for _ in range(steps):
        x = lu.solve(x)
        x /= np.linalg.norm(x)
    return x


def ground_state_2d(op: HermitianOperator, grid: Grid, s0: float, tol: float = 1e-7,
                    seed: int = 0) -> GroundState2D:
    """Lowest eigenpair of h_V with f > 0, normalized in L^2(R^2)."""
    sigma = -op.potential_sup - 1.0
    # a loose two-pair solve for the simplicity check, then the ground pair
    # to full tolerance from a warm start
    pair = lowest_eigs(SolveRequest(op, k=2, tol=max(tol, 1e-4), seed=seed, sigma=sigma))
    rep = lowest_eigs(SolveRequest(op, k=1, tol=tol, seed=seed, sigma=sigma,
                                   x0=pair.vectors[:, :1], check_hermitian=False))
    e, e2 = float(rep.eigenvalues[0]), float(pair.eigenvalues[1])
    if e >= 0:
        raise NoBoundState("no bound state at this discretization "
                           f"(lowest eigenvalue {e:.6g} >= 0)")
    if e2 - e <= 1e-8 * (1 + abs(e)):
        raise ValueError(f"2D ground state is not simple (gap {e2 - e:.3e})")
    v = rep.vectors[:, 0]
    i = int(np.argmax(np.abs(v)))
    v = v * (abs(v[i]) / v[i])
    f = _positive_polish(op, np.real(v), e, e2)
    f = f.reshape(grid.shape)
    f /= math.sqrt(np.sum(f * f) * grid.cell_volume)
    if np.any(f <= 0):
        raise ValueError("ground state is not positive at every interior node")
    X, Y = np.meshgrid(*grid.axes(), indexing="ij")
    disk = X**2 + Y**2 <= s0 * s0
    beta = float(np.min(f[disk] ** 2)) if np.any(disk) else float("nan")
    return GroundState2D(e=e, f=f, grid=grid, beta_f=beta, f_sup=float(np.max(f)), s0=s0,
                         gap=e2 - e, residual=float(rep.residuals[0]))


# ---------------------------------------------------------------------------
# magnetic Neumann Laplacian on a disk
# ---------------------------------------------------------------------------

def _fiber(Bt, R, m, N):
    """Symmetric tridiagonal form of the m-th angular fiber.

    -(1/r)(r u')' + (m/r - Bt r/2)^2 u on (0, R), Neumann at R, cell-centred
    finite volumes with the radial measure r dr.
    """
    dr = R / N
    r = (np.arange(N) + 0.5) * dr
    faces = np.arange(1, N) * dr
    c = faces / dr
    w = r * dr
    diag = np.zeros(N)
    diag[:-1] += c
    diag[1:] += c
    diag += w * (m / r - Bt * r / 2.0) ** 2
    return diag / w, -c / np.sqrt(w[:-1] * w[1:])


@dataclass(frozen=True)
class DiskFibers:
    Bt: float
    R: float
    N: int
    M: int

    def fiber(self, m: int):
        return _fiber(self.Bt, self.R, m, self.N)

    def fiber_ground(self, m: int) -> float:
        d, e = self.fiber(m)
        return float(eigh_tridiagonal(d, e, select="i", select_range=(0, 0))[0][0])

    def ground_energies(self) -> dict:
        return {m: self.fiber_ground(m) for m in range(-self.M, self.M + 1)}

    def lowest(self) -> tuple[float, int]:
        """(lambda_1, minimizing m)."""
        # In the symmetric gauge with Bt >= 0 the minimizing m is >= 0; all
        # m in [-M, M] are still scanned.
        energies = self.ground_energies()
        m = min(energies, key=lambda k: (energies[k], abs(k)))
        if abs(m) >= self.M - 1 and self.Bt > 0:
            raise ValueError(f"minimizing angular mode {m} sits at the cutoff M={self.M}; "
                             "increase M")
        return energies[m], m


def default_mode_cutoff(Bt: float, R: float) -> int:
    flux = Bt * R * R
    return int(flux / 2 + 4 * math.sqrt(flux) + 10)


def assemble_disk_neumann(Bt: float, R: float, N: int = 800, M: Optional[int] = None) -> DiskFibers:
    if R <= 0 or Bt < 0:
        raise ValueError("need R > 0 and Bt >= 0")
    M = default_mode_cutoff(Bt, R) if M is None else int(M)
    return DiskFibers(Bt=float(Bt), R=float(R), N=int(N), M=M)


def lambda1_disk(Bt: float, R: float, N: int = 800, M: Optional[int] = None) -> tuple[float, int]:
    if Bt == 0:
        return 0.0, 0
    return assemble_disk_neumann(Bt, R, N, M).lowest()


def cartesian_disk_neumann(Bt: float, R: float, n: int = 160, sub: int = 16) -> HermitianOperator:
    """Cut-cell finite-volume magnetic Neumann Laplacian on the disk.

    Cells of side h = 2R/n cover [-R, R]^2.  Cell areas and face apertures
    are the fractions inside the disk (sampled with `sub` points per side).
    The symmetric gauge A = Bt/2 (-y, x) gives exact link phases.  Returned
    in the mass-symmetrized form.
    """
    h = 2.0 * R / n
    c = -R + h * (np.arange(n) + 0.5)
    X, Y = np.meshgrid(c, c, indexing="ij")
    off = (np.arange(sub) + 0.5) / sub - 0.5
    area = np.zeros_like(X)
    for ox in off:
        for oy in off:
            area += (X + ox * h) ** 2 + (Y + oy * h) ** 2 < R * R
    area /= sub * sub
    keep = area > 1e-3
    index = -np.ones(X.shape, dtype=np.int64)
    index[keep] = np.arange(int(keep.sum()))
    rows, cols, vals = [], [], []
    diag = np.zeros(X.shape)
    for a in range(2):
        lo = (slice(0, -1), slice(None)) if a == 0 else (slice(None), slice(0, -1))
        hi = (slice(1, None), slice(None)) if a == 0 else (slice(None), slice(1, None))
        # face between cell centres: x = midpoint, spans the other coordinate
        fx = 0.5 * (X[lo] + X[hi])
        fy = 0.5 * (Y[lo] + Y[hi])
        ap = np.zeros_like(fx)
        for o in off:
            if a == 0:
                ap += fx**2 + (fy + o * h) ** 2 < R * R
            else:
                ap += (fx + o * h) ** 2 + fy**2 < R * R
        ap /= sub
        both = keep[lo] & keep[hi] & (ap > 0)
        # exact line integral of A along the straight link
        theta = (-Bt / 2 * fy * h) if a == 0 else (Bt / 2 * fx * h)
        wgt = ap[both]  # aperture * h / h
        hop = -wgt * np.exp(-1j * theta[both])
        i, j = index[lo][both], index[hi][both]
        rows += [i, j]
        cols += [j, i]
        vals += [hop, np.conj(hop)]
        dl = np.zeros(X.shape)
        dl[lo] += np.where(both, ap, 0.0)
        dl[hi] += np.where(both, ap, 0.0)
        diag += dl
    mass = area[keep] * h * h
    n_keep = int(keep.sum())
    rows.append(np.arange(n_keep))
    cols.append(np.arange(n_keep))
    vals.append(diag[keep].astype(complex))
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_keep, n_keep))
    s = sp.diags(1.0 / np.sqrt(mass))
    H = (s @ K @ s).tocsr()
    meta = {"kind": "disk_cartesian", "Bt": Bt, "R": R, "n": n}
    return HermitianOperator(dim=n_keep, matvec=H.__matmul__, matrix=H,
                             diagonal=np.real(H.diagonal()), metadata=meta)


# ---------------------------------------------------------------------------
# 3D tube Hamiltonian
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TubeData:
    """Field-independent and gauge-dependent pieces of the 3D assembly on one grid."""

    grid: Grid
    frame: geo.FrameField
    section: geo.CrossSection
    V: PlanarPotential
    s0: float
    sub: int
    vt: np.ndarray
    phases: dict = field(default_factory=dict)

    def unit_phases(self, gauge: Gauge):
        """Link phases of `gauge`, cached per gauge name and field."""
        key = (gauge.name, gauge.field.B0, gauge.field.s0)
        if key not in self.phases:
            self.phases[key] = link_phases_on_grid(gauge, self.grid)
        return self.phases[key]


def lifted_potential_on_grid(frame, section, V: PlanarPotential, grid: Grid, sub: int = 2,
                             chunk: int = 200_000) -> np.ndarray:
    """Cell-averaged lifted potential at the grid nodes (grid shape)."""
    pts = grid.points()
    h = np.asarray(grid.h)
    reach = section.r_max + 0.5 * float(np.linalg.norm(h)) + 1e-9
    # nodes whose cell can meet the tube: distance to curve samples, with the
    # straight tails resampled over the grid's x3 range
    ss = np.arange(grid.lo[2] - 1, grid.hi[2] + 1, 0.5 * min(h))
    ext = [frame.gamma_pts[frame.i0:frame.i1 + 1]]
    tail_lo = ss[ss <= frame.gamma_pts[frame.i0, 2]]
    ext.append(np.column_stack([np.zeros_like(tail_lo), np.zeros_like(tail_lo), tail_lo]))
    end = frame.gamma_pts[frame.i1]
    tail_hi = ss[ss >= end[2]]
    ext.append(np.column_stack([np.full_like(tail_hi, end[0]), np.full_like(tail_hi, end[1]),
                                tail_hi]))
    tree = cKDTree(np.concatenate(ext))
    d, _ = tree.query(pts, distance_upper_bound=reach + 0.5 * min(h))
    near = np.where(np.isfinite(d))[0]
    out = np.zeros(len(pts))

    def lifted(p):
        return geo.lift_potential(V, frame, section, p)

    for k in range(0, len(near), chunk):
        idx = near[k:k + chunk]
        out[idx] = cell_average(lifted, pts[idx], h, sub)
    return out.reshape(grid.shape)


def link_phases_on_grid(gauge: Gauge, grid: Grid):
    """theta for every link i -> i + e_a: chi A0 by 3-point Gauss plus the scalar part."""
    x1, x2, x3 = grid.axes()
    phi = gauge.scalar_on_grid(x1, x2, x3)
    pts = grid.points().reshape(grid.shape + (3,))
    out = []
    for a in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        xa = pts[tuple(lo)].reshape(-1, 3)
        xb = pts[tuple(hi)].reshape(-1, 3)
        th = chi_link_integral(gauge.field, xa, xb).reshape(pts[tuple(lo)].shape[:3])
        th += phi[tuple(hi)] - phi[tuple(lo)]
        out.append(th)
    return out


def prepare_tube(frame, section, V: PlanarPotential, grid: Grid, s0: float, sub: int = 2,
                 check: bool = True) -> TubeData:
    if grid.ndim != 3:
        raise ValueError("3D assembly needs a 3D grid")
    if check:
        diag = geo.validate_tube(frame, section, s0)
        if not diag.injective:
            raise ValueError(f"tube map is not locally injective: sup r*gamma = {diag.sup_r_gamma:.3g}")
        for a in range(2):
            if -grid.lo[a] < 2 * s0 or grid.hi[a] < 2 * s0:
                raise ValueError("grid box must contain B(0, 2 s0)")
        if -grid.lo[2] < 2 * s0 or grid.hi[2] < 2 * s0:
            raise ValueError("grid box must contain B(0, 2 s0)")
        top = frame.gamma_pts[-1, 2]
        if frame.gamma_pts[0, 2] > grid.lo[2] or top < grid.hi[2]:
            raise ValueError("sampled curve does not cover the grid's x3 range; raise extent")
    vt = lifted_potential_on_grid(frame, section, V, grid, sub)
    return TubeData(grid=grid, frame=frame, section=section, V=V, s0=s0, sub=sub, vt=vt)


def assemble_h3d(data: TubeData, gauge: Optional[Gauge] = None, scale: float = 1.0,
                 mask=None, grad_phi: Optional[Callable] = None) -> HermitianOperator:
    """(i grad + scale*A)^2 - V~ on data.grid (restricted to `mask` if given).

    `grad_phi` adds a gauge term grad(phi), integrated along links with
    three-point Gauss (exact for polynomial phi of degree <= 6).
    """
    grid = data.grid
    phases = None
    if gauge is not None and (not gauge.field.is_zero) and scale != 0:
        phases = [scale * p for p in data.unit_phases(gauge)]
    if grad_phi is not None:
        extra = _gradient_link_integrals(grad_phi, grid)
        phases = extra if phases is None else [p + q for p, q in zip(phases, extra)]
    M, _, diag = _link_matrix(grid, mask=mask, phases=phases, diag_extra=-data.vt)
    meta = {"kind": "H3d", "grid": grid.as_dict(), "gauge": None if gauge is None else gauge.name,
            "scale": scale, "sub": data.sub, "masked": mask is not None}
    op = _operator(M, grid, mask, data.V.sup, diag, meta)
    op.check_hermitian()
    return op


def _gradient_link_integrals(grad_phi, grid):
    gx, gw = np.polynomial.legendre.leggauss(3)
    pts = grid.points().reshape(grid.shape + (3,))
    out = []
    for a in range(3):
        lo = [slice(None)] * 3
        lo[a] = slice(0, -1)
        xa = pts[tuple(lo)].reshape(-1, 3)
        d = np.zeros(3)
        d[a] = grid.h[a]
        acc = np.zeros(len(xa))
        for x, w in zip(gx, gw):
            acc += 0.5 * w * (np.asarray(grad_phi(xa + 0.5 * (1 + x) * d)) @ d)
        out.append(acc.reshape(pts[tuple(lo)].shape[:3]))
    return out


def quadratic_form(op: HermitianOperator, psi) -> float:
    """Rayleigh quotient <psi, Op psi> / <psi, psi>."""
    psi = np.asarray(psi, dtype=complex).ravel()
    nrm = np.vdot(psi, psi).real
    if nrm == 0:
        raise ValueError("quadratic form of the zero vector is undefined")
    return float(np.vdot(psi, op.apply(psi)).real / nrm)


# ---------------------------------------------------------------------------
# Neumann bracketing
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class BracketingPieces:
    H1: HermitianOperator
    H2: HermitianOperator
    H31: HermitianOperator
    H32: HermitianOperator
    masks: dict
    min_half_width: float


def tube_slice_extent(frame, section, z_half: float) -> float:
    """max(|x1|, |x2|) over tube points with |x3| < z_half."""
    R, T = geo._section_boundary_samples(section)
    near = np.abs(frame.gamma_pts[:, 2]) <= z_half + section.r_max
    idx = np.where(near)[0]
    step = max(1, len(idx) // 3000)
    ss = frame.s[idx[::step]]
    pts = geo.tube_point(frame, np.repeat(ss, len(R)), np.tile(R, len(ss)), np.tile(T, len(ss)))
    sel = np.abs(pts[:, 2]) < z_half
    if not np.any(sel):
        return 0.0
    return float(np.max(np.abs(pts[sel, :2])))


def bracketing_pieces(data: TubeData, landau: Gauge, mirror: Gauge, box_half_width: float,
                      scale: float = 1.0) -> BracketingPieces:
    """H1 (x3 >= 2 s0, Landau), H2 (x3 <= -2 s0, mirror), H3 split into the
    square |x1|, |x2| < box_half_width and its complement; Neumann cuts."""
    s0 = data.s0
    need = tube_slice_extent(data.frame, data.section, 2 * s0)
    if box_half_width <= need:
        raise ValueError(f"box half-width {box_half_width:.4g} must exceed {need:.4g} so the "
                         "square contains every slice of the tube with |x3| < 2 s0")
    X1, X2, X3 = np.meshgrid(*data.grid.axes(), indexing="ij")
    m1 = X3 >= 2 * s0
    m2 = X3 <= -2 * s0
    m3 = ~(m1 | m2)
    sq = (np.abs(X1) < box_half_width) & (np.abs(X2) < box_half_width)
    m31 = m3 & sq
    m32 = m3 & ~sq
    return BracketingPieces(
        H1=assemble_h3d(data, landau, scale, mask=m1),
        H2=assemble_h3d(data, mirror, scale, mask=m2),
        H31=assemble_h3d(data, landau, scale, mask=m31),
        H32=assemble_h3d(data, landau, scale, mask=m32),
        masks={"H1": m1, "H2": m2, "H31": m31, "H32": m32},
        min_half_width=need,
    )
