"""Lowest eigenpairs of large Hermitian operators.

Modes:
  "lanczos"       thick-restart Lanczos with full reorthogonalization on Op.
  "shift-invert"  the same Lanczos on (Op - sigma)^-1, inner solves by
                  preconditioned conjugate gradients (Jacobi by default).
  "lobpcg"        scipy's block preconditioned solver, used for the large 3D
                  problems with the operator's own preconditioner.
  "auto"          lobpcg when the operator carries a preconditioner,
                  otherwise Lanczos for small and shift-invert for large.

Every returned pair is checked against the true residual
|Op x - lambda x| / (|lambda| + 1).
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse.linalg as sla

from .hermitian import HermitianOperator

DENSE_LIMIT = 3000


class ConvergenceError(RuntimeError):
    """Iteration budget exhausted; carries the best Ritz values and residuals."""

    def __init__(self, msg, values=None, residuals=None):
        super().__init__(msg)
        self.values = None if values is None else np.asarray(values)
        self.residuals = None if residuals is None else np.asarray(residuals)


class ShiftBreakdown(RuntimeError):
    """Inner solve met a non-positive curvature direction: sigma is in the spectrum."""


@dataclass(frozen=True, eq=False)
class SolveRequest:
    op: HermitianOperator
    k: int = 1
    tol: float = 1e-8
    sigma: Optional[float] = None
    max_iter: int = 2000
    mode: str = "auto"
    seed: int = 0
    x0: Optional[np.ndarray] = None
    ncv: Optional[int] = None
    check_hermitian: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.mode not in ("auto", "lanczos", "shift-invert", "lobpcg"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    eigenvalues: np.ndarray
    residuals: np.ndarray
    vectors: Optional[np.ndarray]
    iterations: int
    metadata: dict = field(default_factory=dict)

    @property
    def lowest(self) -> float:
        return float(self.eigenvalues[0])

    def to_json(self, path, with_vectors: bool = False) -> None:
        """Write a JSON summary; vectors go to '<path>.vec' if requested.

        Sidecar layout: little-endian float64 pairs (re, im), column-major,
        shape recorded under "vectors" in the JSON.
        """
        path = Path(path)
        doc = {
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "residuals": [float(v) for v in self.residuals],
            "iterations": int(self.iterations),
            "metadata": _jsonable(self.metadata),
            "vectors": None,
        }
        if with_vectors and self.vectors is not None:
            side = path.with_suffix(path.suffix + ".vec")
            arr = np.asarray(self.vectors, dtype="<c16")
            side.write_bytes(np.asfortranarray(arr).tobytes(order="F"))
            doc["vectors"] = {"file": side.name, "dtype": "<c16", "order": "F",
                              "shape": list(arr.shape)}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "SpectrumReport":
        path = Path(path)
        doc = json.loads(path.read_text())
        vec = None
        if doc.get("vectors"):
            info = doc["vectors"]
            raw = (path.parent / info["file"]).read_bytes()
            vec = np.frombuffer(raw, dtype="<c16").reshape(info["shape"], order="F").copy()
        return cls(np.array(doc["eigenvalues"]), np.array(doc["residuals"]), vec,
                   doc["iterations"], doc["metadata"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def true_residuals(op: HermitianOperator, vals, vecs):
    R = op.apply(vecs) - vecs * vals[None, :]
    return np.linalg.norm(R, axis=0) / (np.abs(vals) + 1.0)


def _start_block(n, m, seed, x0=None):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m))
    if x0 is not None:
        x0 = np.asarray(x0, dtype=complex).reshape(n, -1)
        c = min(m, x0.shape[1])
        X[:, :c] = x0[:, :c] + 1e-3 * X[:, :c] * np.linalg.norm(x0[:, :c], axis=0) \
            / np.sqrt(2 * n)
    return X


def _orthonormalize(V, w):
    """Two passes of classical Gram-Schmidt against the columns of V."""
    h = V.conj().T @ w
    w = w - V @ h
    h2 = V.conj().T @ w
    w = w - V @ h2
    return w, h + h2


# ---------------------------------------------------------------------------
# thick-restart Lanczos
# ---------------------------------------------------------------------------

def _trlan(matvec, n, k, largest, ncv, max_iter, v0, accept):
    """Thick-restart Lanczos with full reorthogonalization.

    `accept(theta, Y, est)` returns a boolean mask of converged wanted pairs
    (theta, Ritz vectors Y, residual estimates est).  Returns
    (theta, Y, iterations, estimates).
    """
    ncv = min(ncv, n)
    V = np.zeros((n, ncv + 1), dtype=complex)
    T = np.zeros((ncv, ncv), dtype=complex)
    V[:, 0] = v0 / np.linalg.norm(v0)
    j0 = 0
    its = 0
    rng = np.random.default_rng(7)
    beta = 0.0
    while True:
        m = ncv
        for j in range(j0, ncv):
            w = matvec(V[:, j])
            its += 1
            w, h = _orthonormalize(V[:, :j + 1], w)
            T[:j + 1, j] = h
            T[j, :j + 1] = np.conj(h)
            beta = np.linalg.norm(w)
            if beta < 1e-13 * max(1.0, abs(h[-1])):
                # invariant subspace: continue with a fresh orthogonal direction
                if j + 1 >= n:
                    m = j + 1
                    beta = 0.0
                    break
                w = rng.standard_normal(n) + 1j * rng.standard_normal(n)
                w, _ = _orthonormalize(V[:, :j + 1], w)
                w /= np.linalg.norm(w)
                beta = 0.0
                V[:, j + 1] = w
            else:
                V[:, j + 1] = w / beta
            if j + 1 < ncv:
                T[j + 1, j] = beta
                T[j, j + 1] = beta
        Tm = 0.5 * (T[:m, :m] + T[:m, :m].conj().T)
        theta, S = np.linalg.eigh(Tm)
        order = np.argsort(-theta) if largest else np.argsort(theta)
        want = order[:k]
        est = np.abs(beta * S[m - 1, want])
        Y = V[:, :m] @ S[:, want]
        done = accept(theta[want], Y, est)
        if np.all(done) or m >= n:
            return theta[want], Y, its, est
        if its >= max_iter:
            raise ConvergenceError(f"Lanczos did not converge in {its} products",
                                   theta[want], est)
        p = min(k + max(1, (m - k) // 2), m - 1)
        keep = order[:p]
        Vk = V[:, :m] @ S[:, keep]
        V[:, :p] = Vk
        V[:, p] = V[:, m]
        V[:, p + 1:] = 0
        T[:] = 0
        T[np.arange(p), np.arange(p)] = theta[keep]
        arrow = beta * S[m - 1, keep]
        T[p, :p] = arrow
        T[:p, p] = np.conj(arrow)
        j0 = p


# ---------------------------------------------------------------------------
# preconditioned CG for the shift-invert inner solves
# ---------------------------------------------------------------------------

def pcg_shifted(op: HermitianOperator, sigma, b, rtol, max_iter=20000, precond=None):
    """Solve (Op - sigma) x = b for Hermitian positive definite Op - sigma."""
    if precond is None:
        d = op.diagonal - sigma if op.diagonal is not None else None
        if d is not None and np.all(d > 0):
            inv = 1.0 / d
            precond = lambda r: inv * r  # noqa: E731
        else:
            precond = lambda r: r  # noqa: E731
    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = np.vdot(r, z).real
    bn = np.linalg.norm(b)
    if bn == 0:
        return x, 0
    for it in range(1, max_iter + 1):
        q = op.apply(p) - sigma * p
        curv = np.vdot(p, q).real
        if curv <= 0:
            raise ShiftBreakdown(f"non-positive curvature {curv:.3e} at shift {sigma:.6g}")
        a = rz / curv
        x += a * p
        r -= a * q
        if not np.isfinite(a) or np.linalg.norm(x) > 1e14 * bn:
            # runaway iterate: sigma sits on (or numerically at) an eigenvalue
            raise ShiftBreakdown(f"iterate growth at shift {sigma:.6g}")
        if np.linalg.norm(r) <= rtol * bn:
            return x, it
        z = precond(r)
        rz_new = np.vdot(r, z).real
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(f"inner CG did not reach {rtol:.1e} in {max_iter} iterations")


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def _finish(op, vals, vecs, its, meta, tol, k):
    order = np.argsort(vals)
    vals = np.asarray(vals, dtype=float)[order][:k]
    vecs = vecs[:, order][:, :k]
    vecs = vecs / np.linalg.norm(vecs, axis=0)
    # Rayleigh-Ritz on the final block for clean orthogonality
    if vecs.shape[1] > 1:
        Q, _ = np.linalg.qr(vecs)
        Hq = Q.conj().T @ op.apply(Q)
        w, S = np.linalg.eigh(0.5 * (Hq + Hq.conj().T))
        vals, vecs = w, Q @ S
    else:
        vals = np.array([np.vdot(vecs[:, 0], op.apply(vecs[:, 0])).real])
    res = true_residuals(op, vals, vecs)
    if np.any(res > tol):
        raise ConvergenceError(
            f"residuals {np.array2string(res, precision=2)} exceed tol {tol:.1e}", vals, res)
    return SpectrumReport(vals, res, vecs, its, meta)


def _lanczos(op, req, meta):
    n = op.dim
    ncv = req.ncv or max(2 * req.k + 10, 24)

    def accept(theta, Y, est):
        ok = est <= 0.1 * req.tol * (np.abs(theta) + 1.0)
        if np.all(ok):
            r = true_residuals(op, theta, Y / np.linalg.norm(Y, axis=0))
            ok = r <= 0.5 * req.tol
        return ok

    v0 = _start_block(n, 1, req.seed, req.x0)[:, 0]
    theta, Y, its, _ = _trlan(op.apply, n, req.k, False, ncv, req.max_iter, v0, accept)
    return _finish(op, theta, Y, its, meta, req.tol, req.k)


def _shift_invert(op, req, meta):
    n = op.dim
    sigma = req.sigma if req.sigma is not None else -op.potential_sup - 1.0
    ncv = req.ncv or max(2 * req.k + 6, 16)
    inner = 0.01 * req.tol
    last = None
    for attempt in range(4):
        counts = [0]

        def solve(v, s=sigma):
            x, it = pcg_shifted(op, s, v, inner)
            counts[0] += it
            return x

        def accept(mu, Y, est):
            return est <= req.tol * np.abs(mu)

        v0 = _start_block(n, 1, req.seed, req.x0)[:, 0]
        try:
            mu, Y, its, _ = _trlan(solve, n, req.k, True, ncv, req.max_iter, v0, accept)
            # The Lanczos vectors carry the inner-solve noise; a few block
            # inverse-iteration steps with Rayleigh-Ritz on Op remove it.
            for _ in range(5):
                X = np.stack([solve(Y[:, i]) for i in range(Y.shape[1])], axis=1)
                Q, _ = np.linalg.qr(X)
                Hq = Q.conj().T @ op.apply(Q)
                lam, S = np.linalg.eigh(0.5 * (Hq + Hq.conj().T))
                Y = Q @ S
                its += Y.shape[1]
                if np.all(true_residuals(op, lam, Y) <= 0.9 * req.tol):
                    break
        except ShiftBreakdown as exc:
            last = exc
            sigma = sigma - (1.0 + abs(sigma)) * 0.5 * 2**attempt
            meta.setdefault("shift_nudges", []).append(sigma)
            continue
        meta.update(sigma=float(sigma), inner_iterations=int(counts[0]))
        return _finish(op, lam, Y, its, meta, req.tol, req.k)
    raise ConvergenceError(f"shift-invert failed after 3 shift nudges: {last}")


def _lobpcg(op, req, meta):
    n = op.dim
    m = req.k + 2
    sigma = req.sigma if req.sigma is not None else -op.potential_sup - 1.0
    X = _start_block(n, m, req.seed, req.x0)
    real = op.matrix is not None and not np.any(op.matrix.data.imag)
    if real:
        # real symmetric problems run in real arithmetic (half the cost)
        Ar = op.matrix.real.tocsr()
        X = np.real(X).copy()
        A = sla.LinearOperator((n, n), matvec=Ar.__matmul__, matmat=Ar.__matmul__, dtype=float)
    else:
        A = sla.LinearOperator((n, n), matvec=op.apply, matmat=op.apply, dtype=complex)
    M = None
    if op.precond is not None:
        P = op.precond(sigma)
        if real:
            Pr = P
            P = lambda x: np.real(Pr(x))  # noqa: E731
        M = sla.LinearOperator((n, n), matvec=P, matmat=P, dtype=float if real else complex)
    total = 0
    best = None
    scale = 1.0
    for sweep in range(max(1, req.max_iter // 200)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            lam, X, hist = sla.lobpcg(A, X, M=M, largest=False, tol=0.2 * req.tol * scale,
                                      maxiter=200, retResidualNormsHistory=True)
        # the acceptance test is relative to |lambda| + 1 per pair: use the smallest
        scale = 1.0 + np.min(np.abs(lam[:req.k]))
        total += len(hist)
        order = np.argsort(lam)
        lam, X = lam[order], X[:, order]
        res = true_residuals(op, lam, X / np.linalg.norm(X, axis=0))
        best = (lam, res)
        if np.all(res[:req.k] <= 0.5 * req.tol):
            meta.update(sigma_precond=float(sigma))
            return _finish(op, lam[:req.k], X[:, :req.k], total, meta, req.tol, req.k)
    raise ConvergenceError("block solver did not converge", best[0], best[1])


def lowest_eigs(req: SolveRequest) -> SpectrumReport:
    """k lowest eigenpairs of req.op to residual tolerance req.tol."""
    op = req.op
    if req.check_hermitian:
        op.check_hermitian()
    mode = req.mode
    if mode == "auto":
        if op.precond is not None and op.dim > 4000:
            mode = "lobpcg"
        elif op.dim <= 20000:
            mode = "lanczos"
        else:
            mode = "shift-invert"
    meta = {"mode": mode, "seed": int(req.seed), "tol": float(req.tol), "k": int(req.k),
            "dim": int(op.dim), "operator": dict(op.metadata)}
    t0 = time.perf_counter()
    if req.k >= op.dim:
        rep = dense_fallback(op)
        return SpectrumReport(rep.eigenvalues[:req.k], rep.residuals[:req.k],
                              rep.vectors[:, :req.k], 0, meta)
    if mode == "lanczos":
        rep = _lanczos(op, req, meta)
    elif mode == "shift-invert":
        rep = _shift_invert(op, req, meta)
    else:
        rep = _lobpcg(op, req, meta)
    rep.metadata["elapsed_s"] = time.perf_counter() - t0
    return rep


def dense_fallback(op: HermitianOperator) -> SpectrumReport:
    """Full spectrum by dense Hermitian diagonalization (dimension <= 3000)."""
    if op.dim > DENSE_LIMIT:
        raise ValueError(f"dense fallback refuses dimension {op.dim} > {DENSE_LIMIT}")
    M = op.to_dense()
    M = 0.5 * (M + M.conj().T)
    w, V = np.linalg.eigh(M)
    res = true_residuals(op, w, V)
    return SpectrumReport(w, res, V, 0, {"mode": "dense", "dim": int(op.dim),
                                         "operator": dict(op.metadata)})
