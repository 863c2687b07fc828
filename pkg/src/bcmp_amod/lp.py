"""Linear-program container and solver backends.

Two backends share one narrow interface: ``solve_lp(instance, backend)``.
``"highs"`` calls scipy's HiGHS; ``"simplex"`` is a dense two-phase revised
simplex meant for small instances and for cross-checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog


@dataclass
class LpInstance:
    """minimize c @ x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  x >= 0."""

    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    var_labels: list = field(default_factory=list)
    ub_labels: list = field(default_factory=list)
    eq_labels: list = field(default_factory=list)

    @property
    def n_vars(self) -> int:
        return len(self.c)

    def violation(self, x: np.ndarray) -> dict[str, float]:
        """Largest violation of each constraint family (independent of any solver)."""
        ub = self.A_ub @ x - self.b_ub if self.A_ub.shape[0] else np.zeros(0)
        eq = self.A_eq @ x - self.b_eq if self.A_eq.shape[0] else np.zeros(0)
        return {
            "ub": float(max(ub.max(initial=0.0), 0.0)),
            "eq": float(np.abs(eq).max(initial=0.0)),
            "nonneg": float(max(-x.min(initial=0.0), 0.0)),
        }


@dataclass
class LpResult:
    status: str  # optimal | infeasible | unbounded | error
    x: np.ndarray | None
    objective: float
    message: str = ""
    ub_duals: np.ndarray | None = None
    eq_duals: np.ndarray | None = None


def solve_highs(inst: LpInstance) -> LpResult:
    res = linprog(
        inst.c,
        A_ub=inst.A_ub if inst.A_ub.shape[0] else None,
        b_ub=inst.b_ub if inst.A_ub.shape[0] else None,
        A_eq=inst.A_eq if inst.A_eq.shape[0] else None,
        b_eq=inst.b_eq if inst.A_eq.shape[0] else None,
        bounds=(0, None),
        method="highs",
    )
    status = {0: "optimal", 2: "infeasible", 3: "unbounded"}.get(res.status, "error")
    if status != "optimal":
        return LpResult(status, None, np.nan, res.message)
    ub_d = res.ineqlin.marginals if inst.A_ub.shape[0] else np.zeros(0)
    eq_d = res.eqlin.marginals if inst.A_eq.shape[0] else np.zeros(0)
    return LpResult(status, np.asarray(res.x), float(res.fun), res.message, ub_d, eq_d)


class _Simplex:
    def __init__(self, A, b, tol=1e-9, refactor_every=64, max_iter=100_000):
        self.A = A
        self.b = b
        self.tol = tol
        self.refactor_every = refactor_every
        self.max_iter = max_iter

    def refactor(self):
        self.Binv = np.linalg.inv(self.A[:, self.basis])
        self.xb = self.Binv @ self.b

    def run(self, c, allowed):
        """Primal simplex from the current basis; returns optimal | unbounded."""
        A = self.A
        self.refactor()
        since = 0
        degenerate = 0
        for _ in range(self.max_iter):
            y = c[self.basis] @ self.Binv
            d = c - y @ A
            d[self.basis] = 0.0
            d[~allowed] = 0.0
            cand = np.flatnonzero(d < -self.tol)
            if cand.size == 0:
                return "optimal"
            # Bland's rule after a run of degenerate pivots guards against cycling
            j = int(cand[0]) if degenerate > 50 else int(cand[np.argmin(d[cand])])
            u = self.Binv @ A[:, j]
            pos = u > self.tol
            if not pos.any():
                return "unbounded"
            ratios = np.full(u.shape, np.inf)
            ratios[pos] = self.xb[pos] / u[pos]
            theta = ratios.min()
            ties = np.flatnonzero(ratios <= theta + self.tol)
            r = int(ties[np.argmin(self.basis[ties])])
            degenerate = degenerate + 1 if theta <= self.tol else 0
            self.pivot(r, j, u)
            since += 1
            if since >= self.refactor_every:
                self.refactor()
                since = 0
        raise RuntimeError("simplex iteration limit reached")

    def pivot(self, r, j, u):
        piv = u[r]
        row = self.Binv[r] / piv
        self.Binv -= np.outer(u, row)
        self.Binv[r] = row
        xr = self.xb[r] / piv
        self.xb -= u * xr
        self.xb[r] = xr
        self.basis[r] = j


def revised_simplex(c, A_ub, b_ub, A_eq, b_eq, tol: float = 1e-9) -> LpResult:
    """Dense two-phase revised simplex for ``min c x, A_ub x <= b_ub, A_eq x = b_eq, x >= 0``."""
    c = np.asarray(c, dtype=float)
    n = len(c)
    A_ub = np.asarray(A_ub.todense() if sp.issparse(A_ub) else A_ub, dtype=float).reshape(-1, n)
    A_eq = np.asarray(A_eq.todense() if sp.issparse(A_eq) else A_eq, dtype=float).reshape(-1, n)
    b_ub = np.asarray(b_ub, dtype=float).ravel()
    b_eq = np.asarray(b_eq, dtype=float).ravel()
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq

    # columns: x | slacks | artificials
    A = np.zeros((m, n + m_ub + m))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:n + m_ub] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.r_[b_ub, b_eq]
    flip = b < 0
    A[flip] *= -1
    b[flip] *= -1
    n_real = n + m_ub
    A[:, n_real:] = np.eye(m)
    basis = np.arange(n_real, n_real + m)
    # slack columns start basic where their row was not flipped
    for r in range(m_ub):
        if not flip[r]:
            basis[r] = n + r

    s = _Simplex(A, b, tol=tol)
    s.basis = basis
    c1 = np.zeros(A.shape[1])
    c1[n_real:] = 1.0
    allowed = np.ones(A.shape[1], dtype=bool)
    s.run(c1, allowed)
    s.refactor()
    infeas = float(c1[s.basis] @ s.xb)
    if infeas > tol * max(1.0, np.abs(b).max(initial=0.0)):
        return LpResult("infeasible", None, np.nan, f"phase 1 objective {infeas:.3e}")

    # drive zero-level artificials out of the basis; drop redundant rows
    keep = np.ones(m, dtype=bool)
    for r in range(m):
        if s.basis[r] < n_real:
            continue
        row = s.Binv[r] @ A[:, :n_real]
        cand = np.flatnonzero((np.abs(row) > 1e-7) & ~np.isin(np.arange(n_real), s.basis))
        if cand.size:
            j = int(cand[np.argmax(np.abs(row[cand]))])
            s.pivot(r, j, s.Binv @ A[:, j])
        else:
            keep[r] = False
    if not keep.all():
        rows = np.flatnonzero(keep)
        s.A = A[rows]
        s.b = b[rows]
        s.basis = s.basis[rows]
    allowed = np.zeros(s.A.shape[1], dtype=bool)
    allowed[:n_real] = True
    c2 = np.zeros(s.A.shape[1])
    c2[:n] = c
    status = s.run(c2, allowed)
    if status == "unbounded":
        return LpResult("unbounded", None, -np.inf, "phase 2 unbounded")
    s.refactor()
    z = np.zeros(s.A.shape[1])
    z[s.basis] = s.xb
    x = np.clip(z[:n], 0.0, None)
    return LpResult("optimal", x, float(c @ x), "optimal")


def solve_simplex(inst: LpInstance) -> LpResult:
    return revised_simplex(inst.c, inst.A_ub, inst.b_ub, inst.A_eq, inst.b_eq)


BACKENDS = {"highs": solve_highs, "simplex": solve_simplex}


def solve_lp(inst: LpInstance, backend: str = "highs") -> LpResult:
    try:
        fn = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown LP backend {backend!r}; choose from {sorted(BACKENDS)}") from None
    return fn(inst)


def _fmt(v: float) -> str:
    # fixed MPS numeric fields are 12 characters wide
    for digits in range(12, 0, -1):
        txt = f"{v:.{digits}g}"
        if len(txt) <= 12:
            return txt
    raise ValueError(f"cannot fit {v!r} in an MPS field")


def to_mps(inst: LpInstance, name: str = "AOSCARR") -> str:
    """Fixed-column MPS text for the instance (names are positional: X*, U*, E*)."""
    lines = [f"NAME          {name}", "ROWS", " N  COST"]
    lines += [f" L  U{r}" for r in range(inst.A_ub.shape[0])]
    lines += [f" E  E{r}" for r in range(inst.A_eq.shape[0])]
    lines.append("COLUMNS")
    ub = inst.A_ub.tocsc()
    eq = inst.A_eq.tocsc()
    for j in range(inst.n_vars):
        entries = []
        if inst.c[j] != 0:
            entries.append(("COST", inst.c[j]))
        for p in range(ub.indptr[j], ub.indptr[j + 1]):
            entries.append((f"U{ub.indices[p]}", ub.data[p]))
        for p in range(eq.indptr[j], eq.indptr[j + 1]):
            entries.append((f"E{eq.indices[p]}", eq.data[p]))
        for row, val in entries:
            lines.append(f"    {'X' + str(j):<8}  {row:<8}  {_fmt(val):>12}")
    lines.append("RHS")
    for r, v in enumerate(inst.b_ub):
        if v != 0:
            lines.append(f"    {'RHS':<8}  {'U' + str(r):<8}  {_fmt(v):>12}")
    for r, v in enumerate(inst.b_eq):
        if v != 0:
            lines.append(f"    {'RHS':<8}  {'E' + str(r):<8}  {_fmt(v):>12}")
    lines.append("ENDATA")
    return "\n".join(lines) + "\n"
