"""Scenario-driven runner: parse a YAML scenario, run the selected experiments,
cache the expensive ingredients, and write summaries, traces and a report.

    magtube run --config scenario.yaml --out runs
    magtube dry-run --config scenario.yaml
    magtube export --config scenario.yaml --out runs
    magtube cache clean --out runs

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import shutil
import sys
import time
import traceback
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import yaml

from . import geometry as geo
from . import experiments as ex
from .eigsolve import _jsonable
from .fields import check_curl_system, landau_gauge, make_field, mirror_gauge
from .operators import (Grid, TubeData, grid3, lambda1_disk, prepare_tube, tube_slice_extent,
                        well_potential)

log = logging.getLogger("magtube")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
ASSUMPTION1 = "Ω ∩ (ℝ²×{|x₃| ≤ s₀/√2}) ⊂ B(0, s₀)"

DEFAULTS = {
    "seed": 0,
    "geometry": {
        "curve": {"kind": "straight", "amplitude": 0.0, "half_width": 0.5, "bend_curvature": 1.0,
                  "ramp": 0.3, "run": 0.0, "plane_angle": 0.0, "samples_per_unit": 200,
                  "extent": 20.0},
        "section": {"shape": "disk", "size": 1.0},
    },
    "fields": {"B0": [0.3, -0.2, 1.0], "s0": 1.0, "inner": 1.2, "outer": 1.8},
    "potential": {"depth": None, "eps": None},
    "operators": {"h": 0.1, "hz": None, "half_width": None, "z_margin": 2.0, "sub": 2,
                  "plane_half_width": 6.0},
    "eigsolve": {"tol": 1e-7},
    "experiments": {
        "run": ["threshold"],
        "gauge": {"n": 64, "refine": None, "gauge": "landau"},
        "theorem1": {"lengths": [20.0, 40.0, 80.0], "k_values": [8, 16, 32, 64], "p": 1.0,
                     "weyl_hz": 0.05, "gauge": "landau"},
        "bracketing": {"box_half_width": None},
        "theorem2": {"fields": [0.0, 2.0, 4.0, 8.0, 16.0, 32.0], "direction": [0.0, 0.0, 1.0],
                     "mode": "serial", "stop_at_crossing": True, "require_margin": 5.0,
                     "lemma_fields": [10.0, 20.0, 40.0, 80.0, 160.0], "lemma_radius": 1.0},
        "lemma": {"fields": [10.0, 20.0, 40.0, 80.0, 160.0], "radii": [0.8, 1.0, 1.4], "N": 800},
    },
    "output": {"dir": "runs"},
}

# what each experiment checks, for the report
CLAIMS = {
    "gauge": "The gauge potential satisfies curl A = B and vanishes on the half-space beyond its anchor.",
    "threshold": "The cross-section operator has a simple negative ground energy e with a positive ground state.",
    "theorem1": "The essential spectrum of H is [e, inf): the spectrum on growing boxes stays above e and Weyl quasi-modes at e + p^2 have residuals O(1/k).",
    "bracketing": "Neumann bracketing: the outer pieces sit above e and bound H from below together with the middle pieces.",
    "theorem2": "A strong enough field B3 removes the bound state created by the deformation, and the observed threshold does not exceed 2/(C eps).",
    "lemma": "The magnetic Neumann ground energy of a disk grows linearly in the field with a radius-independent slope.",
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario parsing
# ---------------------------------------------------------------------------

def _schema(name: str) -> dict:
    return json.loads(resources.files("magtube").joinpath("schemas", f"{name}.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _unknown_keys(raw, schema, path=""):
    """Keys of `raw` not declared anywhere in the schema, as dotted paths."""
    bad = []
    if not isinstance(raw, dict) or schema.get("type") != "object":
        return bad
    props = schema.get("properties", {})
    for k, v in raw.items():
        p = f"{path}.{k}" if path else str(k)
        if k not in props:
            bad.append(p)
        else:
            bad.extend(_unknown_keys(v, props[k], p))
    return bad


def _canonical(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "output"}
    return json.dumps(_jsonable(body), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Scenario:
    config: dict
    hash: str
    source: Optional[str] = None

    @property
    def short(self) -> str:
        return self.hash[:12]

    def section(self, *path):
        node = self.config
        for p in path:
            node = node[p]
        return node

    def seed_for(self, name: str) -> int:
        """Solver seed derived from the scenario seed and a stage name."""
        d = hashlib.sha256(f"{self.config['seed']}:{name}".encode()).digest()
        return int.from_bytes(d[:4], "little") & 0x7FFFFFFF

    def dump(self) -> str:
        return yaml.safe_dump(_jsonable(self.config), sort_keys=True, default_flow_style=None)


def _normalise(cfg: dict) -> dict:
    """Floats where the schema means numbers, so the dump round-trips to the same hash."""
    def fl(x):
        return [float(v) for v in x] if isinstance(x, list) else (None if x is None else float(x))
    c = cfg
    for k in ("amplitude", "half_width", "bend_curvature", "ramp", "run", "plane_angle", "extent"):
        c["geometry"]["curve"][k] = fl(c["geometry"]["curve"][k])
    c["geometry"]["section"]["size"] = fl(c["geometry"]["section"]["size"])
    for k in ("B0", "s0", "inner", "outer"):
        c["fields"][k] = fl(c["fields"][k])
    for k in ("depth", "eps"):
        c["potential"][k] = fl(c["potential"][k])
    for k in ("h", "hz", "half_width", "z_margin", "plane_half_width"):
        c["operators"][k] = fl(c["operators"][k])
    c["eigsolve"]["tol"] = fl(c["eigsolve"]["tol"])
    e = c["experiments"]
    e["theorem1"]["lengths"] = fl(e["theorem1"]["lengths"])
    for k in ("p", "weyl_hz"):
        e["theorem1"][k] = fl(e["theorem1"][k])
    e["bracketing"]["box_half_width"] = fl(e["bracketing"]["box_half_width"])
    for k in ("fields", "direction", "require_margin", "lemma_fields", "lemma_radius"):
        e["theorem2"][k] = fl(e["theorem2"][k])
    for k in ("fields", "radii"):
        e["lemma"][k] = fl(e["lemma"][k])
    return c


def scenario_from_dict(raw: dict, source: Optional[str] = None, seed: Optional[int] = None) -> Scenario:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a mapping at the top level")
    schema = _schema("scenario")
    bad = _unknown_keys(raw, schema)
    if bad:
        raise ConfigError("unknown keys: " + ", ".join(sorted(bad)))
    try:
        jsonschema.validate(raw, schema)
    except jsonschema.ValidationError as err:
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"invalid value at {where}: {err.message}") from None
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg = _normalise(cfg)
    _check_physics(cfg)
    sc = Scenario(config=cfg, hash=hashlib.sha256(_canonical(cfg).encode()).hexdigest(),
                  source=source)
    return sc


def parse_scenario(path, seed: Optional[int] = None) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scenario file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed scenario file: {err}") from None
    return scenario_from_dict(raw, source=str(path), seed=seed)


def _check_physics(cfg: dict) -> None:
    pot = cfg["potential"]
    if (pot["depth"] is None) == (pot["eps"] is None):
        raise ConfigError("potential: give exactly one of depth or eps (V = depth on the "
                          "cross-section, or V = 1/eps there)")
    f = cfg["fields"]
    if not f["inner"] < f["outer"] <= 2.0:
        raise ConfigError("fields: need inner < outer <= 2 (cutoff radii in units of s0)")
    run = cfg["experiments"]["run"]
    fl = cfg["experiments"]["theorem2"]["fields"]
    if fl[0] != 0.0 or any(b <= a for a, b in zip(fl, fl[1:])):
        raise ConfigError("experiments.theorem2.fields must start at 0 and increase strictly")
    needs_tube = {"theorem2", "bracketing"} & set(run)
    if needs_tube:
        try:
            frame = geo.build_curve(_curve_spec(cfg))
        except geo.CurveError as err:
            raise ConfigError(f"geometry.curve: {err}") from None
        diag = geo.validate_tube(frame, _section(cfg), f["s0"])
        if not diag.injective:
            raise ConfigError(f"geometry: tube map is not locally injective "
                              f"(sup r*curvature = {diag.sup_r_gamma:.3g} >= 1)")
        if "theorem2" in run and not diag.assumption1:
            raise ConfigError(
                f"assumption violated: {ASSUMPTION1} fails (max radius in the strip "
                f"{diag.max_radius_in_strip:.4g} > s0 = {f['s0']:g}); required by theorem2")


def _curve_spec(cfg) -> geo.CurveSpec:
    c = cfg["geometry"]["curve"]
    return geo.CurveSpec(kind=c["kind"], amplitude=c["amplitude"], half_width=c["half_width"],
                         bend_curvature=c["bend_curvature"], ramp=c["ramp"], run=c["run"],
                         plane_angle=c["plane_angle"], samples_per_unit=c["samples_per_unit"],
                         extent=c["extent"])


def _section(cfg) -> geo.CrossSection:
    s = cfg["geometry"]["section"]
    return geo.disk_section(s["size"]) if s["shape"] == "disk" else geo.square_section(s["size"])


def _depth(cfg) -> float:
    p = cfg["potential"]
    return p["depth"] if p["depth"] is not None else 1.0 / p["eps"]


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------

class Cache:
    """Append-only store under <out>/cache/<hash12>/<grid tag>/."""

    def __init__(self, root, scenario: Scenario):
        self.root = Path(root) / "cache" / scenario.short

    def path(self, tag: str, name: str) -> Path:
        return self.root / tag / name

    def load_record(self, tag: str, name: str) -> Optional[dict]:
        p = self.path(tag, f"{name}.json")
        return json.loads(p.read_text()) if p.is_file() else None

    def store_record(self, tag: str, name: str, record: dict) -> None:
        p = self.path(tag, f"{name}.json")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(_jsonable(record), indent=2, sort_keys=True) + "\n")


def _tube_cached(cache: Cache, tag: str, frame, section, V, grid: Grid, s0: float, sub: int,
                 gauges) -> tuple[TubeData, bool]:
    """prepare_tube with the lifted potential and unit link phases stored in the cache."""
    p = cache.path(tag, "tube.npz")
    if p.is_file():
        z = np.load(p)
        data = TubeData(grid=grid, frame=frame, section=section, V=V, s0=s0, sub=sub,
                        vt=z["vt"])
        for g in gauges:
            key = (g.name, g.field.B0, g.field.s0)
            data.phases[key] = [z[f"{g.name}_{a}"] for a in range(3)]
        return data, True
    data = prepare_tube(frame, section, V, grid, s0, sub=sub)
    arrays = {"vt": data.vt}
    for g in gauges:
        for a, ph in enumerate(data.unit_phases(g)):
            arrays[f"{g.name}_{a}"] = ph
    p.parent.mkdir(parents=True, exist_ok=True)
    np.savez(p, **arrays)
    return data, False


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class Outcome:
    results: dict
    rows: list
    passed: Optional[bool]
    grid: Optional[Grid]


def _threshold(sc: Scenario, ctx: dict, half_width=None) -> ex.Threshold:
    op = sc.section("operators")
    hw = op["plane_half_width"] if half_width is None else half_width
    key = ("th", hw)
    if key not in ctx:
        V = well_potential(_depth(sc.config), _section(sc.config))
        ctx[key] = ex.threshold(V, hw, op["h"], sc.section("fields", "s0"), sub=max(op["sub"], 2),
                                seed=sc.seed_for("threshold"))
    return ctx[key]


def _tube_grid(sc: Scenario, frame) -> Grid:
    op = sc.section("operators")
    s0 = sc.section("fields", "s0")
    h = op["h"]
    hz = op["hz"] or h
    if op["half_width"] is not None:
        hw = op["half_width"]
    else:
        reach = frame.gamma_pts[frame.i0:frame.i1 + 1, :2]
        ext = float(np.max(np.abs(reach))) if len(reach) else 0.0
        hw = max(2 * s0 + 2 * h, ext + _section(sc.config).r_max + op["z_margin"])
        hw = h * math.ceil(hw / h)
    zlo, zhi = frame.deformed_z if not frame.is_straight else (0.0, 0.0)
    zb = max(abs(zlo), abs(zhi), 2 * s0) + op["z_margin"]
    zb = hz * math.ceil(zb / hz)
    return grid3(hw, -zb, zb, h, hz)


def run_gauge(sc: Scenario, ctx: dict) -> Outcome:
    p = sc.section("experiments", "gauge")
    f = sc.section("fields")
    fld = make_field(f["B0"], f["s0"], f["inner"], f["outer"])
    g = landau_gauge(fld) if p["gauge"] == "landau" else mirror_gauge(fld)
    rows, checks = [], []
    for n in [p["n"]] + ([p["refine"]] if p["refine"] else []):
        c = check_curl_system(g, n)
        checks.append(c)
        rows.append({"n": n, "h": c.h, "res1": c.residual[0], "res2": c.residual[1],
                     "res3": c.residual[2], "relative": c.relative, "a2_max": c.a2_max,
                     "vanish_max": c.vanish_max})
    bound = 5e-3 * fld.norm
    ok = all(r <= bound for r in checks[0].residual) and checks[0].vanish_max == 0.0 \
        and checks[0].a2_max == 0.0
    res = {"gauge": g.name, "bound": bound, "checks": [c.as_dict() for c in checks]}
    if len(checks) > 1:
        shrink = [a / b if b > 0 else math.inf for a, b in zip(checks[0].residual, checks[1].residual)]
        res["shrink"] = shrink
        ok = ok and all(s >= 3.5 for s in shrink)
    return Outcome(res, rows, ok, None)


def run_threshold(sc: Scenario, ctx: dict) -> Outcome:
    th = _threshold(sc, ctx)
    gs = th.gs
    V = well_potential(_depth(sc.config), _section(sc.config))
    ok = (-V.sup < th.e < 0) and float(np.min(gs.f)) > 0
    res = {"e": th.e, "e_half_step": th.e_fine, "calibration": th.calibration,
           "ground_state": gs.as_dict(), "f_min": float(np.min(gs.f))}
    rows = [{"h": th.h, "e": th.e}, {"h": th.h / 2, "e": th.e_fine}]
    return Outcome(res, rows, ok, gs.grid)


def run_theorem1(sc: Scenario, ctx: dict) -> Outcome:
    p = sc.section("experiments", "theorem1")
    op = sc.section("operators")
    f = sc.section("fields")
    th = _threshold(sc, ctx)
    V = well_potential(_depth(sc.config), _section(sc.config))
    hw = op["half_width"]
    if hw is None:
        # the box must hold B(0, 2 s0); widen the planar box on the same lattice
        hw = max(th.gs.grid.hi[0], op["h"] * (math.ceil(2 * f["s0"] / op["h"]) + 1))
    study = ex.edge_study(V, _section(sc.config), f["B0"], f["s0"], p["lengths"], hw, op["h"],
                          op["hz"] or op["h"], th, sub=op["sub"], tol=sc.section("eigsolve", "tol"),
                          seed=sc.seed_for("theorem1"), gauge=p["gauge"])
    probes = [ex.weyl_residual(th.gs, V, p["p"], k, hz=p["weyl_hz"], sub=max(op["sub"], 2),
                               s0=f["s0"]) for k in p["k_values"]]
    slope = ex.loglog_slope([q.k for q in probes], [q.residual for q in probes])
    norms = [q.norm for q in probes]
    norm_spread = (max(norms) - min(norms)) / max(norms)
    ok = study.above_edge and study.monotone and abs(slope + 1.0) <= 0.15
    rows = [{"kind": "box", "L": L, "lowest": v, "k": None, "residual": None}
            for L, v in zip(study.lengths, study.lowest)]
    rows += [{"kind": "weyl", "L": None, "lowest": None, "k": q.k, "residual": q.residual}
             for q in probes]
    res = {"e": th.e, "calibration": th.calibration, "lengths": study.lengths,
           "lowest": study.lowest, "above_edge": study.above_edge, "monotone": study.monotone,
           "weyl_k": [q.k for q in probes], "weyl_residual": [q.residual for q in probes],
           "weyl_slope": slope, "weyl_norm_spread": norm_spread}
    return Outcome(res, rows, ok, Grid(lo=(-hw, -hw, -study.lengths[-1] / 2),
                                       hi=(hw, hw, study.lengths[-1] / 2),
                                       h=(op["h"], op["h"], op["hz"] or op["h"])))


def _tube(sc: Scenario, ctx: dict, cache: Cache, gauges):
    frame = geo.build_curve(_curve_spec(sc.config))
    grid = _tube_grid(sc, frame)
    V = well_potential(_depth(sc.config), _section(sc.config))
    data, hit = _tube_cached(cache, ex.grid_tag(grid), frame, _section(sc.config), V, grid,
                             sc.section("fields", "s0"), sc.section("operators", "sub"), gauges)
    ctx.setdefault("cache_hits", []).append(hit)
    return data


def run_bracketing(sc: Scenario, ctx: dict, cache: Cache) -> Outcome:
    f = sc.section("fields")
    fld = make_field(f["B0"], f["s0"], f["inner"], f["outer"])
    th = _threshold(sc, ctx)
    data = _tube(sc, ctx, cache, [landau_gauge(fld), mirror_gauge(fld)])
    bw = sc.section("experiments", "bracketing", "box_half_width")
    if bw is None:
        need = tube_slice_extent(data.frame, data.section, 2 * f["s0"])
        bw = min(need + 2 * data.grid.h[0], data.grid.hi[0] - 2 * data.grid.h[0])
    r = ex.bracketing_study(data, f["B0"], th, bw, tol=sc.section("eigsolve", "tol"),
                            seed=sc.seed_for("bracketing"))
    res = {"e": th.e, "calibration": th.calibration, "full": r.full, "H1": r.H1, "H2": r.H2,
           "H31": r.H31, "H32": r.H32, "box_half_width": r.box_half_width,
           "min_half_width": r.min_half_width, "dims": r.dims,
           "lower_bound_ok": r.lower_bound_ok, "outer_ok": r.outer_ok,
           "complement_ok": r.complement_ok}
    rows = [{"piece": k, "lowest": getattr(r, k), "dim": r.dims[k]}
            for k in ("full", "H1", "H2", "H31", "H32")]
    return Outcome(res, rows, r.lower_bound_ok and r.outer_ok and r.complement_ok, data.grid)


def _alpha(fields, radius, N=800) -> ex.AlphaFit:
    return ex.fit_alpha(ex.disk_samples(fields, [radius], N))


def run_theorem2(sc: Scenario, ctx: dict, cache: Cache, threads: int = 1) -> Outcome:
    p = sc.section("experiments", "theorem2")
    f = sc.section("fields")
    depth = _depth(sc.config)
    eps = 1.0 / depth
    unit = landau_gauge(make_field(p["direction"], f["s0"], f["inner"], f["outer"]))
    data = _tube(sc, ctx, cache, [unit])
    th = _threshold(sc, ctx)
    sweep = ex.field_sweep(data, p["direction"], p["fields"], th,
                           tol=sc.section("eigsolve", "tol"), seed=sc.seed_for("theorem2"),
                           mode=p["mode"], threads=threads,
                           stop_at_crossing=p["stop_at_crossing"],
                           require_margin=p["require_margin"])
    fit = _alpha(p["lemma_fields"], p["lemma_radius"])
    const = ex.theorem2_constants(th.gs, fit.alpha, eps)
    sweep.predicted = const.threshold
    mismatch = ex.potential_mismatch(data, th.gs)
    a2 = None if sweep.b_star is None else ex.check_assumption2(
        well_potential(depth, _section(sc.config)), const.C, sweep.b_star, _section(sc.config))
    ok = sweep.b_star is not None and sweep.b_star <= const.threshold \
        and sweep.diagnostics["lambda0_gap"] >= p["require_margin"] * sweep.tol_gap
    res = {"sweep": sweep.as_dict(), "alpha": fit.alpha, "beta_f": const.beta_f,
           "f_sup": const.f_sup, "C": const.C, "eps": eps, "predicted_threshold": const.threshold,
           "assumption2_at_b_star": a2, "potential_mismatch": mismatch}
    rows = [{"B3": b, "lowest": v, "gap": th.e - v} for b, v in zip(sweep.fields, sweep.lowest)]
    return Outcome(res, rows, ok, data.grid)


def run_lemma(sc: Scenario, ctx: dict) -> Outcome:
    p = sc.section("experiments", "lemma")
    samples = ex.disk_samples(p["fields"], p["radii"], p["N"])
    fit = ex.fit_alpha(samples)
    rows, worst = [], 0.0
    for R in p["radii"]:
        for B, lam in samples[R]:
            ref = lambda1_disk(R * R * B, 1.0, p["N"])[0] / (R * R)
            err = abs(lam - ref) / abs(ref)
            worst = max(worst, err)
            rows.append({"R": R, "B": B, "lambda1": lam, "scaled": ref, "scaling_error": err})
    ok = worst <= 1e-4 and fit.spread <= 0.02 and fit.condition_ok
    res = {"fit": fit.as_dict(), "scaling_error": worst}
    return Outcome(res, rows, ok, None)


ORDER = ["gauge", "threshold", "lemma", "theorem1", "bracketing", "theorem2"]


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _summary(sc: Scenario, name: str, record: dict) -> dict:
    from . import __version__
    s = {"experiment": name, "claim": CLAIMS[name], "scenario_hash": sc.hash,
         "grid": record["grid"], "timestamp": _now(), "passed": record["passed"],
         "results": record["results"], "package_version": __version__}
    jsonschema.validate(_jsonable(s), _schema("summary"))
    return s


def _execute(sc: Scenario, name: str, ctx: dict, cache: Cache, threads: int) -> Outcome:
    if name == "gauge":
        return run_gauge(sc, ctx)
    if name == "threshold":
        return run_threshold(sc, ctx)
    if name == "theorem1":
        return run_theorem1(sc, ctx)
    if name == "bracketing":
        return run_bracketing(sc, ctx, cache)
    if name == "theorem2":
        return run_theorem2(sc, ctx, cache, threads)
    if name == "lemma":
        return run_lemma(sc, ctx)
    raise ConfigError(f"unknown experiment {name!r}")


def _write_report(run_dir: Path, sc: Scenario, summaries: dict, errors: list, hits: dict) -> Path:
    lines = [f"# magtube run {sc.short}", "", f"scenario: {sc.source or '<inline>'}", ""]
    for name, s in summaries.items():
        verdict = {True: "PASS", False: "FAIL", None: "n/a"}[s["passed"]]
        lines += [f"## {name}: {verdict}", "", s["claim"], "",
                  f"grid: {s['grid']}; cached: {'yes' if hits.get(name) else 'no'}", ""]
        for k, v in s["results"].items():
            if isinstance(v, (int, float, str, bool)) or v is None:
                lines.append(f"- {k}: {v}")
        lines.append("")
    for e in errors:
        lines += [f"## {e['experiment']}: ERROR", "", f"{e['type']}: {e['message']}", ""]
    p = run_dir / "report.md"
    p.write_text("\n".join(lines))
    return p


def run(sc: Scenario, out: Optional[str] = None, threads: int = 1) -> int:
    out_dir = Path(out or sc.section("output", "dir"))
    run_dir = out_dir / sc.short
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved.yaml").write_text(sc.dump())
    cache = Cache(out_dir, sc)
    ctx: dict = {}
    selected = [n for n in ORDER if n in sc.section("experiments", "run")]
    summaries, errors, hits = {}, [], {}
    for name in selected:
        t0 = time.perf_counter()
        try:
            # records are keyed by scenario hash; the grid tag is part of the record
            record = cache.load_record("records", name)
            hits[name] = record is not None
            if record is None:
                o = _execute(sc, name, ctx, cache, threads)
                record = {"grid": ex.grid_tag(o.grid), "passed": o.passed,
                          "results": _jsonable(o.results), "rows": _jsonable(o.rows)}
                cache.store_record("records", name, record)
            summary = _summary(sc, name, record)
            ex.write_experiment(run_dir, name, sc.hash, record["grid"], summary, record["rows"])
            summaries[name] = summary
            log.info("%s: %s in %.1fs", name, summary["passed"], time.perf_counter() - t0)
        except Exception as err:  # keep going; the manifest records it
            log.error("%s failed: %s", name, err)
            log.debug("%s", traceback.format_exc())
            errors.append({"experiment": name, "type": type(err).__name__, "message": str(err)})
    _write_report(run_dir, sc, summaries, errors, hits)
    manifest = run_dir / "errors.json"
    if errors:
        m = {"scenario_hash": sc.hash, "timestamp": _now(), "completed": list(summaries),
             "errors": errors}
        jsonschema.validate(m, _schema("errors"))
        manifest.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        return EXIT_NUMERIC
    if manifest.exists():
        manifest.unlink()
    return EXIT_OK


def estimate(sc: Scenario) -> dict:
    """Node counts, memory and a rough runtime for each selected experiment."""
    cfg = sc.config
    op = cfg["operators"]
    h = op["h"]
    n2 = (2 * op["plane_half_width"] / h - 1) ** 2
    est = {"threshold_nodes": int(n2), "threshold_half_step_nodes": int(4 * n2)}
    per_node = 7 * 20 + 40 * 16    # CSR entries plus solver work vectors, bytes
    sec_per_node = 1.7e-4          # one lowest-eigenvalue solve, measured on one core
    mem = 4 * n2 * per_node
    run_s = 5 * n2 * sec_per_node
    run = cfg["experiments"]["run"]
    if {"theorem2", "bracketing"} & set(run):
        frame = geo.build_curve(_curve_spec(cfg))
        g = _tube_grid(sc, frame)
        est["tube_grid"] = g.as_dict()
        est["tube_nodes"] = g.size
        solves = 0
        if "theorem2" in run:
            solves += len(cfg["experiments"]["theorem2"]["fields"])
        if "bracketing" in run:
            solves += 5
        mem = max(mem, g.size * per_node)
        run_s += solves * g.size * sec_per_node
    if "theorem1" in run:
        p = cfg["experiments"]["theorem1"]
        hw = op["half_width"] or op["plane_half_width"]
        hz = op["hz"] or h
        nodes = [(2 * hw / h - 1) ** 2 * (L / hz - 1) for L in p["lengths"]]
        est["theorem1_nodes"] = [int(n) for n in nodes]
        mem = max(mem, max(nodes) * per_node)
        run_s += sum(nodes) * sec_per_node
    if "gauge" in run:
        p = cfg["experiments"]["gauge"]
        ns = [p["n"]] + ([p["refine"]] if p["refine"] else [])
        run_s += sum(n**3 for n in ns) * 4e-5
        mem = max(mem, max(ns) ** 3 * 3 * 8 * 12)
    if "lemma" in run:
        p = cfg["experiments"]["lemma"]
        run_s += 2 * len(p["fields"]) * len(p["radii"]) * 0.3
    est["memory_mb"] = round(mem / 2**20, 1)
    est["runtime_s"] = round(run_s, 1)
    return est


def export(sc: Scenario, out: Optional[str] = None) -> int:
    """Re-emit CSV traces from cached records."""
    out_dir = Path(out or sc.section("output", "dir"))
    cache = Cache(out_dir, sc)
    run_dir = out_dir / sc.short
    n = 0
    for name in ORDER:
        rec = cache.load_record("records", name)
        if rec is None:
            continue
        stem = f"{name}_{sc.short}_{rec['grid']}"
        rows = rec["rows"]
        cols = sorted({k for r in rows for k in r})
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow(r)
        n += 1
    if n == 0:
        raise ConfigError(f"no cached results for scenario {sc.short} under {out_dir}")
    return EXIT_OK


def cache_clean(out: str) -> int:
    p = Path(out) / "cache"
    if p.is_dir():
        shutil.rmtree(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="magtube", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="scenario YAML file")
        p.add_argument("--out", default=None, help="output directory (default: output.dir)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    r = sub.add_parser("run", help="run the selected experiments")
    common(r)
    r.add_argument("--dry-run", action="store_true", help="print the plan only")
    common(sub.add_parser("dry-run", help="resolved config and resource estimate"))
    common(sub.add_parser("export", help="re-emit CSV traces from the cache"))
    c = sub.add_parser("cache", help="cache maintenance")
    c.add_argument("action", choices=["clean"])
    c.add_argument("--out", default="runs")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    if args.command == "cache":
        return cache_clean(args.out)
    try:
        sc = parse_scenario(args.config, seed=args.seed)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "dry-run" or getattr(args, "dry_run", False):
        print(sc.dump(), end="")
        print(yaml.safe_dump({"scenario_hash": sc.hash, "estimate": estimate(sc)},
                             sort_keys=True), end="")
        return EXIT_OK
    if args.command == "export":
        try:
            return export(sc, args.out)
        except ConfigError as err:
            print(f"config error: {err}", file=sys.stderr)
            return EXIT_CONFIG
    return run(sc, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
