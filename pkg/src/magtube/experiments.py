"""Drivers for the checks built on the operators: Weyl quasi-modes on the
straight tail, the essential-spectrum edge study, Neumann bracketing, the
field sweep that destroys the geometric bound state, and the disk slope fit.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from . import geometry as geo
from .eigsolve import SolveRequest, lowest_eigs, _jsonable
from .fields import landau_gauge, make_field, mirror_gauge
from .operators import (GroundState2D, Grid, PlanarPotential, TubeData, assemble_h3d,
                        assemble_hv, bracketing_pieces, cell_average, grid2, ground_state_2d,
                        lambda1_disk, prepare_tube, quadratic_form)


# ---------------------------------------------------------------------------
# threshold e and its discretization error
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Threshold:
    e: float
    e_fine: float
    error: float
    h: float
    gs: GroundState2D = field(repr=False, compare=False, default=None)

    @property
    def calibration(self) -> float:
        """Estimated discretization error of e at spacing h."""
        return self.error


def threshold(V: PlanarPotential, half_width: float, h: float, s0: float, sub: int = 4,
              seed: int = 0) -> Threshold:
    """e on the grid of spacing h, with the error estimated from h and h/2.

    For an O(h^2) scheme e(h) - e_exact ~ (4/3)(e(h) - e(h/2)).
    """
    g = grid2(half_width, h)
    gs = ground_state_2d(assemble_hv(V, g, sub), g, s0, seed=seed)
    gf = grid2(half_width, h / 2)
    ef = ground_state_2d(assemble_hv(V, gf, sub), gf, s0, seed=seed).e
    return Threshold(e=gs.e, e_fine=ef, error=4.0 / 3.0 * abs(gs.e - ef), h=h, gs=gs)


# ---------------------------------------------------------------------------
# Weyl quasi-modes
# ---------------------------------------------------------------------------

def bump(t):
    """exp(-1/(t-1) - 1/(2-t)) on (1, 2), scaled to peak 1; zero elsewhere."""
    t = np.asarray(t, dtype=float)
    inside = (t > 1) & (t < 2)
    ts = np.where(inside, t, 1.5)
    v = np.exp(-1.0 / (ts - 1.0) - 1.0 / (2.0 - ts) + 4.0)
    return np.where(inside, v, 0.0)


def dbump(t):
    """Derivative of `bump`."""
    t = np.asarray(t, dtype=float)
    inside = (t > 1) & (t < 2)
    ts = np.where(inside, t, 1.5)
    return np.where(inside, bump(ts) * (1.0 / (ts - 1.0) ** 2 - 1.0 / (2.0 - ts) ** 2), 0.0)


@dataclass(frozen=True)
class WeylProbe:
    p: float
    k: int
    hz: float
    norm: float
    residual: float
    chi_term: float


def _tail_operator(gs: GroundState2D, V: PlanarPotential, sub: int):
    """Transverse operator of the straight tail: V~(x) = V(-x1, -x2)."""
    refl = PlanarPotential(func=lambda y1, y2: V(-y1, -y2), sup=V.sup, radius=V.radius,
                           name=f"reflected {V.name}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return assemble_hv(refl, gs.grid, sub)


def weyl_residual(gs: GroundState2D, V: PlanarPotential, p: float, k: int, hz: float = 0.05,
                  sub: int = 4, s0: float = 1.0, z_start: Optional[float] = None) -> WeylProbe:
    """|| H psi_k - (e + p^2) psi_k || / ||psi_k|| on the straight upper tail.

    psi_k = f~(x1, x2) exp(i p x3) chi(x3/k) / sqrt(k), where f~ is the ground
    state of the reflected cross-section operator (f reflected through the
    origin on a symmetric grid).  The tail is field-free in the Landau gauge.
    """
    if k <= 2 * s0:
        raise ValueError(f"k = {k} must exceed 2 s0 = {2 * s0} so supp chi(x3/k) is field-free")
    ax = gs.grid.axes()
    for a in ax:
        if not np.allclose(a, -a[::-1]):
            raise ValueError("transverse grid must be symmetric about the origin")
    if z_start is not None and z_start > k:
        raise ValueError("box too short: it must contain (k, 2k)")
    hT = _tail_operator(gs, V, sub)
    ft = gs.f[::-1, ::-1].ravel()
    nz = int(math.ceil((k + 2.0) / hz))
    z = (k - 1.0) + hz * np.arange(1, nz + 1)
    g = np.exp(1j * p * z) * bump(z / k) / math.sqrt(k)
    Psi = np.outer(ft, g)
    # H = h~ (x) I + I (x) (-d^2/dz^2), Dirichlet at the ends (psi vanishes there)
    Tz = sp.diags([-np.ones(nz - 1), 2 * np.ones(nz), -np.ones(nz - 1)], [-1, 0, 1]) / hz**2
    HPsi = hT.matrix @ Psi + (Tz @ Psi.T).T
    lam = gs.e + p * p
    cell = gs.grid.cell_volume * hz
    R = HPsi - lam * Psi
    norm = math.sqrt(np.sum(np.abs(Psi) ** 2) * cell)
    res = math.sqrt(np.sum(np.abs(R) ** 2) * cell) / norm
    # the leading term -2 i p chi'(x3/k)/k on its own (analytic derivative)
    lead = 2 * p * np.abs(dbump(z / k)) / k / math.sqrt(k)
    lead_norm = math.sqrt(np.sum(lead**2) * hz) * math.sqrt(np.sum(ft**2) * gs.grid.cell_volume)
    return WeylProbe(p=p, k=k, hz=hz, norm=norm, residual=res, chi_term=lead_norm / norm)


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


# ---------------------------------------------------------------------------
# essential spectrum edge on a straight tube
# ---------------------------------------------------------------------------

@dataclass
class EdgeStudy:
    e: float
    calibration: float
    lengths: list
    lowest: list
    above_edge: bool
    monotone: bool
    reports: list = field(default_factory=list, repr=False)


def edge_study(V, section, B0, s0, lengths: Sequence[float], half_width: float, h: float,
               hz: float, th: Threshold, sub: int = 4, tol: float = 1e-8, seed: int = 0,
               gauge: str = "landau") -> EdgeStudy:
    """Lowest eigenvalue of H on a straight tube for boxes of increasing length."""
    frame = geo.build_curve(geo.CurveSpec(kind="straight", extent=max(lengths) / 2 + 2))
    fld = make_field(B0, s0)
    gg = landau_gauge(fld) if gauge == "landau" else mirror_gauge(fld)
    lows, reps = [], []
    for L in lengths:
        grid = Grid(lo=(-half_width, -half_width, -L / 2), hi=(half_width, half_width, L / 2),
                    h=(h, h, hz))
        data = prepare_tube(frame, section, V, grid, s0, sub=sub)
        op = assemble_h3d(data, gg)
        rep = lowest_eigs(SolveRequest(op, k=1, tol=tol, seed=seed, sigma=th.e - 0.5 * abs(th.e)))
        lows.append(rep.lowest)
        reps.append(rep)
    floor = th.e - 3 * th.calibration
    above = all(v > floor for v in lows)
    mono = all(lows[i + 1] <= lows[i] + tol for i in range(len(lows) - 1)) and \
        all(v >= th.e - 3 * th.calibration for v in lows)
    return EdgeStudy(e=th.e, calibration=th.calibration, lengths=list(lengths), lowest=lows,
                     above_edge=above, monotone=mono, reports=reps)


# ---------------------------------------------------------------------------
# bracketing
# ---------------------------------------------------------------------------

@dataclass
class BracketingResult:
    full: float
    H1: float
    H2: float
    H31: float
    H32: float
    calibration: float
    e: float
    box_half_width: float
    min_half_width: float
    dims: dict

    @property
    def pieces_min(self) -> float:
        return min(self.H1, self.H2, self.H31, self.H32)

    @property
    def lower_bound_ok(self) -> bool:
        return self.full >= self.pieces_min - 3 * self.calibration

    @property
    def outer_ok(self) -> bool:
        return min(self.H1, self.H2) >= self.e - 3 * self.calibration

    @property
    def complement_ok(self) -> bool:
        return self.H32 >= -1e-8


def bracketing_study(data: TubeData, B0, th: Threshold, box_half_width: float,
                     tol: float = 1e-8, seed: int = 0) -> BracketingResult:
    fld = make_field(B0, data.s0)
    lg, mg = landau_gauge(fld), mirror_gauge(fld)
    sigma = th.e - 0.5 * abs(th.e)
    full = assemble_h3d(data, lg)
    pcs = bracketing_pieces(data, lg, mg, box_half_width)
    low = {}
    for name, op in (("full", full), ("H1", pcs.H1), ("H2", pcs.H2), ("H31", pcs.H31),
                     ("H32", pcs.H32)):
        sig = sigma if name != "H32" else -1.0
        low[name] = lowest_eigs(SolveRequest(op, k=1, tol=tol, seed=seed, sigma=sig)).lowest
    return BracketingResult(full=low["full"], H1=low["H1"], H2=low["H2"], H31=low["H31"],
                            H32=low["H32"], calibration=th.calibration, e=th.e,
                            box_half_width=box_half_width, min_half_width=pcs.min_half_width,
                            dims={"full": full.dim, "H1": pcs.H1.dim, "H2": pcs.H2.dim,
                                  "H31": pcs.H31.dim, "H32": pcs.H32.dim})


# ---------------------------------------------------------------------------
# field sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    fields: list
    lowest: list
    e: float
    tol_gap: float
    b_star: Optional[float]
    status: str
    final_gap: float
    monotone: bool
    predicted: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return _jsonable(asdict(self))


class NoInitialBoundState(RuntimeError):
    pass


def _sweep_point(data, gauge, b, sigma, tol, seed, x0):
    op = assemble_h3d(data, gauge, scale=b)
    rep = lowest_eigs(SolveRequest(op, k=1, tol=tol, seed=seed, sigma=sigma, x0=x0))
    return rep


def field_sweep(data: TubeData, direction, fields: Sequence[float], th: Threshold,
                tol: float = 1e-7, seed: int = 0, mode: str = "serial", threads: int = 1,
                stop_at_crossing: bool = False, require_margin: float = 1.0) -> SweepResult:
    """lambda_min of H for B0 = b * direction over the sampled b (b = B3^0 when
    direction has unit third component).

    tol_gap = 3 x (estimated discretization error of e).  The first b with
    lambda_min >= e - tol_gap is reported as B*.
    """
    fields = [float(b) for b in fields]
    if fields[0] != 0.0 or any(b2 <= b1 for b1, b2 in zip(fields, fields[1:])):
        raise ValueError("field grid must start at 0 and increase strictly")
    tol_gap = 3.0 * th.calibration
    unit = landau_gauge(make_field(direction, data.s0))
    sigma = th.e - 0.5 * abs(th.e)
    lows: list = []
    if mode == "serial":
        x0 = None
        for b in fields:
            rep = _sweep_point(data, unit, b, sigma, tol, seed, x0)
            lows.append(rep.lowest)
            x0 = rep.vectors[:, :1]
            if len(lows) == 1 and lows[0] >= th.e - require_margin * tol_gap:
                raise NoInitialBoundState(
                    f"no initial bound state: lambda_min(0) = {lows[0]:.6g} is not below "
                    f"e - {require_margin:g} tol_gap = {th.e - require_margin * tol_gap:.6g}")
            if stop_at_crossing and rep.lowest >= th.e - tol_gap:
                break
    elif mode == "parallel":
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            futs = [pool.submit(_sweep_point, data, unit, b, sigma, tol, seed, None)
                    for b in fields]
            lows = [f.result().lowest for f in futs]
        if lows[0] >= th.e - require_margin * tol_gap:
            raise NoInitialBoundState(f"no initial bound state: lambda_min(0) = {lows[0]:.6g}")
    else:
        raise ValueError(f"unknown sweep mode {mode!r}")
    used = fields[:len(lows)]
    b_star = None
    for b, v in zip(used, lows):
        if v >= th.e - tol_gap:
            b_star = b
            break
    mono = all(lows[i + 1] >= lows[i] - tol for i in range(len(lows) - 1))
    return SweepResult(fields=used, lowest=lows, e=th.e, tol_gap=tol_gap, b_star=b_star,
                       status="reached" if b_star is not None else "not reached",
                       final_gap=th.e - lows[-1], monotone=mono,
                       diagnostics={"lambda0_gap": th.e - lows[0]})


def potential_mismatch(data: TubeData, gs: GroundState2D) -> float:
    """Integral of (V~(x) - V(x1, x2)) f(x1, x2)^2 over the slab |x3| <= s0.

    Reported only.  f is interpolated onto the transverse nodes of the tube
    grid (zero outside the planar box).
    """
    g3 = data.grid
    X, Y = np.meshgrid(g3.axis(0), g3.axis(1), indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    if (g3.axis(0).shape == gs.grid.axis(0).shape and np.allclose(g3.axis(0), gs.grid.axis(0))
            and g3.axis(1).shape == gs.grid.axis(1).shape
            and np.allclose(g3.axis(1), gs.grid.axis(1))):
        f = gs.f
    else:
        interp = RegularGridInterpolator(gs.grid.axes(), gs.f, bounds_error=False, fill_value=0.0)
        f = interp(pts).reshape(X.shape)
    v2 = cell_average(lambda p: data.V(p[:, 0], p[:, 1]), pts, g3.h[:2], data.sub)
    v2 = v2.reshape(X.shape)
    slab = np.abs(g3.axis(2)) <= data.s0
    diff = data.vt[:, :, slab] - v2[:, :, None]
    return float(np.sum(diff * f[:, :, None] ** 2) * g3.cell_volume)


# ---------------------------------------------------------------------------
# disk slope and theorem constants
# ---------------------------------------------------------------------------

@dataclass
class AlphaFit:
    slopes: dict
    intercepts: dict
    stderr: dict
    drift: dict
    alpha: float
    spread: float
    condition_ok: bool
    intercept_ok: bool
    window: dict

    def as_dict(self) -> dict:
        return _jsonable(asdict(self))


class AsymptoticRegimeNotReached(RuntimeError):
    pass


def fit_alpha(samples: dict, min_points: int = 5, max_drift: float = 0.10) -> AlphaFit:
    """Least-squares slope of lambda_1 against B per radius.

    samples: {R: [(B, lambda_1), ...]}.  The window is the largest sampled
    decade, widened downward until it holds `min_points` samples.  Drift is the
    relative change between the slopes of the lower and upper halves.
    """
    slopes, inter, se, drift, window = {}, {}, {}, {}, {}
    cond = True
    inter_ok = True
    for R, pts in samples.items():
        pts = sorted((float(b), float(l)) for b, l in pts)
        Bs = np.array([p[0] for p in pts])
        Ls = np.array([p[1] for p in pts])
        sel = Bs >= Bs.max() / 10
        while sel.sum() < min_points and sel.sum() < len(Bs):
            sel[np.where(~sel)[0][-1]] = True
        if sel.sum() < min_points:
            raise ValueError(f"need >= {min_points} samples in the window, have {int(sel.sum())}")
        b, l = Bs[sel], Ls[sel]
        A = np.column_stack([b, np.ones_like(b)])
        coef, res, *_ = np.linalg.lstsq(A, l, rcond=None)
        dof = max(1, len(b) - 2)
        s2 = float(np.sum((A @ coef - l) ** 2)) / dof
        cov = s2 * np.linalg.inv(A.T @ A)
        half = (len(b) + 1) // 2
        lo = np.polyfit(b[:half], l[:half], 1)[0]
        hi = np.polyfit(b[-half:], l[-half:], 1)[0]
        d = abs(hi - lo) / abs(coef[0])
        if d > max_drift:
            raise AsymptoticRegimeNotReached(
                f"asymptotic regime not reached at R={R}: slope drift {d:.1%} across window halves")
        slopes[R], inter[R], se[R], drift[R] = float(coef[0]), float(coef[1]), \
            float(math.sqrt(cov[0, 0])), float(d)
        window[R] = [float(b.min()), float(b.max())]
        if coef[1] > 0.05 * l.min():
            inter_ok = False
    alpha = float(np.mean(list(slopes.values())))
    spread = float((max(slopes.values()) - min(slopes.values())) / alpha)
    for R, pts in samples.items():
        for b, l in pts:
            if b >= window[R][0] and l < 0.5 * alpha * b:
                cond = False
    return AlphaFit(slopes=slopes, intercepts=inter, stderr=se, drift=drift, alpha=alpha,
                    spread=spread, condition_ok=cond, intercept_ok=inter_ok, window=window)


def disk_samples(fields: Sequence[float], radii: Sequence[float], N: int = 800) -> dict:
    return {R: [(B, lambda1_disk(B, R, N)[0]) for B in fields] for R in radii}


@dataclass(frozen=True)
class Theorem2Constants:
    beta_f: float
    f_sup: float
    alpha: float
    C: float
    eps: Optional[float]
    threshold: Optional[float]


def theorem2_constants(gs: GroundState2D, alpha: float, eps: Optional[float] = None) -> Theorem2Constants:
    """C = alpha beta_f / (2 |f|_inf^2) and the sufficient field 2/(C eps)."""
    if not gs.beta_f > 0:
        raise ValueError(f"beta_f = {gs.beta_f} is not positive; ground state failed positivity")
    C = alpha * gs.beta_f / (2.0 * gs.f_sup**2)
    thr = None if eps is None else 2.0 / (C * eps)
    return Theorem2Constants(beta_f=gs.beta_f, f_sup=gs.f_sup, alpha=alpha, C=C, eps=eps,
                             threshold=thr)


def check_assumption2(V: PlanarPotential, C: float, B3: float, section=None) -> bool:
    """Oscillation of V over the cross-section against C * B3."""
    return V.oscillation(section) <= C * B3


def trial_state_form(op, gs: GroundState2D, grid3: Grid, phi) -> float:
    """Quadratic form of psi = phi(x) f(x1, x2) (transverse grids must coincide)."""
    X1, X2, X3 = np.meshgrid(*grid3.axes(), indexing="ij")
    psi = phi(X1, X2, X3) * gs.f[:, :, None]
    return quadratic_form(op, psi.ravel())


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def grid_tag(grid: Optional[Grid]) -> str:
    if grid is None:
        return "nogrid"
    return "h" + "x".join(f"{v:g}" for v in grid.h) + "_n" + "x".join(str(c) for c in grid.counts)


def write_experiment(run_dir, name: str, scenario_hash: str, tag: str, summary: dict,
                     rows: Sequence[dict]) -> tuple[Path, Path]:
    """Write <name>_<hash>_<tag>.json and .csv into run_dir."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{name}_{scenario_hash[:12]}_{tag}"
    jpath = run_dir / f"{stem}.json"
    cpath = run_dir / f"{stem}.csv"
    jpath.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    cols = sorted({k for r in rows for k in r})
    with open(cpath, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: _jsonable(r.get(k)) for k in cols})
    return jpath, cpath
