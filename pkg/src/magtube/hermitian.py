"""Matrix-free Hermitian operator container shared by assembly and solvers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp


class NotHermitian(RuntimeError):
    pass


@dataclass(eq=False)
class HermitianOperator:
    """Complex Hermitian operator with optional explicit CSR storage.

    `apply` accepts a vector (n,) or a block (n, m).  `precond(sigma)` may
    return an approximate inverse of (Op - sigma) acting on blocks; it is
    used by the preconditioned block solver.
    """

    dim: int
    matvec: Callable
    matrix: Optional[sp.csr_matrix] = None
    hermitian: bool = True
    potential_sup: float = 0.0
    diagonal: Optional[np.ndarray] = None
    precond: Optional[Callable] = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, M, potential_sup: float = 0.0, metadata=None, precond=None):
        if sp.issparse(M):
            M = sp.csr_matrix(M, dtype=complex)
            diag = np.real(M.diagonal())
            mv = M.__matmul__
        else:
            M = np.asarray(M, dtype=complex)
            diag = np.real(np.diag(M))
            mv = M.__matmul__
        return cls(dim=M.shape[0], matvec=mv, matrix=M if sp.issparse(M) else sp.csr_matrix(M),
                   potential_sup=float(potential_sup), diagonal=diag, precond=precond,
                   metadata=dict(metadata or {}))

    def apply(self, x):
        x = np.asarray(x)
        return self.matvec(x.astype(complex, copy=False))

    def __matmul__(self, x):
        return self.apply(x)

    def hermitian_defect(self, pairs: int = 20, seed: int = 12345) -> float:
        """max |<x, Op y> - conj(<y, Op x>)| / (|<x, Op y>| + |x||Op||y| scale)."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(pairs):
            x = rng.standard_normal(self.dim) + 1j * rng.standard_normal(self.dim)
            y = rng.standard_normal(self.dim) + 1j * rng.standard_normal(self.dim)
            ox, oy = self.apply(x), self.apply(y)
            a = np.vdot(x, oy)
            b = np.conj(np.vdot(y, ox))
            scale = max(abs(a), np.linalg.norm(x) * np.linalg.norm(oy), 1e-300)
            worst = max(worst, abs(a - b) / scale)
        return float(worst)

    def check_hermitian(self, rtol: float = 1e-10, pairs: int = 20, seed: int = 12345) -> float:
        d = self.hermitian_defect(pairs, seed)
        if d > rtol:
            raise NotHermitian(f"operator fails the Hermitian check: defect {d:.3e} > {rtol:.1e}")
        return d

    def to_dense(self) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix.toarray()
        return self.apply(np.eye(self.dim, dtype=complex))

    def to_triplets(self, path) -> int:
        """Write nonzeros as 'row col re im' lines (0-based).  Returns the count."""
        if self.matrix is None:
            raise ValueError("operator has no explicit storage to export")
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w") as fh:
            fh.write(f"# dim {self.dim} nnz {coo.nnz}\n# row col re im\n")
            for i in order:
                v = coo.data[i]
                fh.write(f"{coo.row[i]} {coo.col[i]} {float(v.real)!r} {float(v.imag)!r}\n")
        return int(coo.nnz)


def read_triplets(path) -> sp.csr_matrix:
    dim = None
    rows, cols, vals = [], [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                parts = line.split()
                if len(parts) >= 3 and parts[1] == "dim":
                    dim = int(parts[2])
                continue
            r, c, re_, im = line.split()
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(re_) + 1j * float(im))
    return sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim))
