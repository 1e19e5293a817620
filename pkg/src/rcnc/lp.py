"""Dense linear programming.

Problems have the form ``max|min c.x  s.t.  A x <= b,  lower <= x <= upper``.
The default backend is a two-phase tableau simplex compiled with numba.  It
pivots on the most negative reduced cost and switches to Bland's rule after
a run of degenerate pivots, so it always terminates and is deterministic.
Once the optimal basis is known, the basic values are recomputed from the
original data, which keeps residuals near machine precision.

Text dump format (``dump_problem``)::

    lp <max|min> vars=<n> rows=<m>
    obj <c_1> ... <c_n>
    row <label> <a_1> ... <a_n> <= <b>
    bound <label> <lower> <upper>
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

OPTIMAL, INFEASIBLE, UNBOUNDED, ITERATION_LIMIT = "optimal", "infeasible", "unbounded", "iteration_limit"


@dataclass
class LpProblem:
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    sense: str = "max"
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    var_labels: list[str] | None = None
    row_labels: list[str] | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.A = np.asarray(self.A, dtype=float).reshape(self.b.size if n == 0 else -1, n)
        if self.A.shape[0] != self.b.size:
            raise ValueError("A and b disagree on the number of rows")
        if self.sense not in ("max", "min"):
            raise ValueError("sense must be 'max' or 'min'")
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, float).ravel()
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, float).ravel()
        if self.lower.size != n or self.upper.size != n:
            raise ValueError("bounds must match the number of variables")
        for name in ("c", "A", "b"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")
        if np.any(self.lower == np.inf) or np.any(self.upper == -np.inf):
            raise ValueError("invalid bounds")

    @property
    def num_vars(self) -> int:
        return self.c.size

    @property
    def num_rows(self) -> int:
        return self.b.size


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None = None
    objective: float = float("nan")
    residual: float = float("nan")
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass(frozen=True)
class ResidualReport:
    rows: np.ndarray     # max(Ax - b, 0) per row
    lower: np.ndarray    # max(lower - x, 0) per variable
    upper: np.ndarray    # max(x - upper, 0) per variable
    labels: tuple[str, ...] = ()

    @property
    def max_row(self) -> float:
        return float(self.rows.max(initial=0.0))

    @property
    def max_bound(self) -> float:
        return float(max(self.lower.max(initial=0.0), self.upper.max(initial=0.0)))

    @property
    def max_violation(self) -> float:
        return max(self.max_row, self.max_bound)

    def worst(self) -> tuple[str, float]:
        if self.rows.size == 0:
            return ("", 0.0)
        i = int(np.argmax(self.rows))
        label = self.labels[i] if self.labels else f"row {i}"
        return label, float(self.rows[i])


def verify_solution(problem: LpProblem, x) -> ResidualReport:
    """Constraint and bound violations of ``x`` (a vector or an :class:`LpSolution`)."""
    if isinstance(x, LpSolution):
        x = x.x
    x = np.asarray(x, dtype=float)
    rows = np.maximum(problem.A @ x - problem.b, 0.0) if problem.num_rows else np.zeros(0)
    return ResidualReport(
        rows=rows,
        lower=np.maximum(problem.lower - x, 0.0),
        upper=np.maximum(x - problem.upper, 0.0),
        labels=tuple(problem.row_labels or ()))


@njit(cache=True)
def _pivot(T, r, c):
    T[r, :] /= T[r, c]
    prow = T[r, :]
    for i in range(T.shape[0]):
        if i != r:
            f = T[i, c]
            if f != 0.0:
                T[i, :] -= f * prow
                T[i, c] = 0.0


@njit(cache=True)
def _iterate(T, basis, n_enter, tol, max_iter, bland_after):
    """Simplex iterations on a tableau whose last row holds reduced costs.

    Returns ``(status, iterations)`` with status 0 optimal, 2 unbounded,
    3 iteration limit.
    """
    m = T.shape[0] - 1
    rhs = T.shape[1] - 1
    it = 0
    stall = 0
    bland = False
    while it < max_iter:
        col = -1
        if bland:
            for j in range(n_enter):
                if T[m, j] < -tol:
                    col = j
                    break
        else:
            best = -tol
            for j in range(n_enter):
                if T[m, j] < best:
                    best = T[m, j]
                    col = j
        if col < 0:
            return 0, it
        row = -1
        ratio = np.inf
        for i in range(m):
            a = T[i, col]
            if a > tol:
                r = T[i, rhs] / a
                if row < 0 or r < ratio - 1e-12:
                    row = i
                    ratio = r
                elif r <= ratio + 1e-12 and basis[i] < basis[row]:
                    row = i
                    ratio = min(ratio, r)
        if row < 0:
            return 2, it
        if ratio <= tol:
            stall += 1
            if stall > bland_after:
                bland = True
        else:
            stall = 0
        _pivot(T, row, col)
        basis[row] = col
        it += 1
    return 3, it


@njit(cache=True)
def _two_phase(A, b, c, tol, max_iter, bland_after):
    """Solve ``max c.y, A y <= b, y >= 0``.

    Returns ``(status, y, basis, iterations)`` where status is 0 optimal,
    1 infeasible, 2 unbounded, 3 iteration limit.
    """
    m, n = A.shape
    neg = 0
    for i in range(m):
        if b[i] < 0:
            neg += 1
    ncol = n + m + neg
    T = np.zeros((m + 1, ncol + 1))
    basis = np.empty(m, dtype=np.int64)
    art = n + m
    for i in range(m):
        s = 1.0 if b[i] >= 0 else -1.0
        for j in range(n):
            T[i, j] = s * A[i, j]
        T[i, n + i] = s
        T[i, ncol] = s * b[i]
        if b[i] >= 0:
            basis[i] = n + i
        else:
            T[i, art] = 1.0
            basis[i] = art
            art += 1
    iters = 0
    if neg > 0:
        # phase 1: maximize -sum(artificials)
        for i in range(m):
            if basis[i] >= n + m:
                T[m, :] -= T[i, :]
        for j in range(n + m, ncol):
            T[m, j] = 0.0
        status, it = _iterate(T, basis, ncol, tol, max_iter, bland_after)
        iters += it
        if status == 3:
            return 3, np.zeros(n), basis, iters
        scale = 1.0
        for i in range(m):
            scale = max(scale, abs(b[i]))
        if T[m, ncol] < -1e-9 * scale:
            return 1, np.zeros(n), basis, iters
        for i in range(m):
            if basis[i] >= n + m:
                best = -1
                big = tol
                for j in range(n + m):
                    if abs(T[i, j]) > big:
                        big = abs(T[i, j])
                        best = j
                if best >= 0:
                    _pivot(T, i, best)
                    basis[i] = best
    # phase 2 objective row: reduced costs c_B B^-1 A - c
    T[m, :] = 0.0
    for j in range(n):
        T[m, j] = -c[j]
    for i in range(m):
        k = basis[i]
        if k < n and c[k] != 0.0:
            T[m, :] += c[k] * T[i, :]
    status, it = _iterate(T, basis, n + m, tol, max_iter - iters, bland_after)
    iters += it
    y = np.zeros(n)
    for i in range(m):
        if basis[i] < n:
            y[basis[i]] = T[i, ncol]
    return status, y, basis, iters


def _refine(A: np.ndarray, b: np.ndarray, basis: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Recompute basic values from the original rows for a cleaner vertex."""
    m, n = A.shape
    if m == 0:
        return y
    full = np.hstack([A, np.eye(m)])
    cols = np.where(basis < n + m, basis, -1)
    if np.any(cols < 0):
        return y
    try:
        xb = np.linalg.solve(full[:, cols], b)
    except np.linalg.LinAlgError:
        return y
    if not np.all(np.isfinite(xb)) or np.any(xb < -1e-7):
        return y
    out = np.zeros(n)
    for k, v in zip(cols, xb):
        if k < n:
            out[k] = max(v, 0.0)
    if np.max(A @ out - b, initial=0.0) > max(np.max(A @ y - b, initial=0.0), 1e-12):
        return y
    return out


def _standardize(p: LpProblem):
    """Map to ``max c'.y, A' y <= b', y >= 0`` and return the back-transform."""
    n = p.num_vars
    sign = 1.0 if p.sense == "max" else -1.0
    free = ~np.isfinite(p.lower)
    shift = np.where(free, 0.0, p.lower)
    cols = [p.A]
    cvec = [sign * p.c]
    if free.any():
        cols.append(-p.A[:, free])
        cvec.append(-sign * p.c[free])
    A = np.hstack(cols)
    c = np.concatenate(cvec)
    b = p.b - p.A @ shift
    bounded = np.flatnonzero(np.isfinite(p.upper))
    if bounded.size:
        rows = np.zeros((bounded.size, A.shape[1]))
        rows[np.arange(bounded.size), bounded] = 1.0
        fb = np.flatnonzero(free)
        for r, j in enumerate(bounded):
            if free[j]:
                rows[r, n + int(np.searchsorted(fb, j))] = -1.0
        A = np.vstack([A, rows])
        b = np.concatenate([b, p.upper[bounded] - shift[bounded]])
    fidx = np.flatnonzero(free)

    def back(y: np.ndarray) -> np.ndarray:
        x = y[:n] + shift
        if fidx.size:
            x[fidx] -= y[n:]
        return x

    return A, b, c, back


def solve_lp(problem: LpProblem, tol: float = 1e-9, max_iter: int = 50_000,
             backend: str = "simplex") -> LpSolution:
    """Solve ``problem``; never raises on infeasible or unbounded input."""
    if backend == "highs":
        return _solve_highs(problem)
    if backend != "simplex":
        raise ValueError(f"unknown backend {backend!r}")
    A, b, c, back = _standardize(problem)
    if A.shape[0] == 0:
        if np.any(c > tol):
            return LpSolution(UNBOUNDED)
        return _finish(problem, back(np.zeros(A.shape[1])), 0)
    code, y, basis, iters = _two_phase(A, b, c, tol, max_iter, 50)
    if code == 1:
        return LpSolution(INFEASIBLE, iterations=iters)
    if code == 2:
        return LpSolution(UNBOUNDED, iterations=iters)
    if code == 3:
        return LpSolution(ITERATION_LIMIT, iterations=iters)
    y = _refine(A, b, basis, y)
    return _finish(problem, back(y), iters)


def _finish(problem: LpProblem, x: np.ndarray, iters: int) -> LpSolution:
    rep = verify_solution(problem, x)
    return LpSolution(OPTIMAL, x, float(problem.c @ x), rep.max_violation, iters)


def _solve_highs(problem: LpProblem) -> LpSolution:
    from scipy.optimize import linprog

    sign = -1.0 if problem.sense == "max" else 1.0
    bounds = [(None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi)
              for lo, hi in zip(problem.lower, problem.upper)]
    res = linprog(sign * problem.c, A_ub=problem.A if problem.num_rows else None,
                  b_ub=problem.b if problem.num_rows else None, bounds=bounds, method="highs")
    if res.status == 2:
        return LpSolution(INFEASIBLE)
    if res.status == 3:
        return LpSolution(UNBOUNDED)
    if res.status != 0:
        return LpSolution(ITERATION_LIMIT, info={"message": res.message})
    return _finish(problem, np.asarray(res.x), int(res.nit))


def dump_problem(problem: LpProblem) -> str:
    """Plain-text tableau for debugging (format in the module docstring)."""
    fmt = lambda v: format(float(v), ".17g")  # noqa: E731
    lines = [f"lp {problem.sense} vars={problem.num_vars} rows={problem.num_rows}",
             "obj " + " ".join(map(fmt, problem.c))]
    rl = problem.row_labels or [f"r{i}" for i in range(problem.num_rows)]
    for label, row, rhs in zip(rl, problem.A, problem.b):
        lines.append(f"row {label} " + " ".join(map(fmt, row)) + f" <= {fmt(rhs)}")
    vl = problem.var_labels or [f"x{j}" for j in range(problem.num_vars)]
    for label, lo, hi in zip(vl, problem.lower, problem.upper):
        lines.append(f"bound {label} {fmt(lo)} {fmt(hi)}")
    return "\n".join(lines) + "\n"


def load_problem(text: str) -> LpProblem:
    """Inverse of :func:`dump_problem`."""
    rows, rhs, rlabels, lower, upper, vlabels = [], [], [], [], [], []
    sense, c = "max", None
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "lp":
            sense = parts[1]
        elif parts[0] == "obj":
            c = [float(v) for v in parts[1:]]
        elif parts[0] == "row":
            rlabels.append(parts[1])
            rows.append([float(v) for v in parts[2:-2]])
            rhs.append(float(parts[-1]))
        elif parts[0] == "bound":
            vlabels.append(parts[1])
            lower.append(float(parts[2]))
            upper.append(float(parts[3]))
    n = len(c or [])
    return LpProblem(c=c or [], A=np.array(rows).reshape(-1, n), b=rhs, sense=sense,
                     lower=lower, upper=upper, var_labels=vlabels, row_labels=rlabels)


def solve_standard(A: np.ndarray, b: np.ndarray, c: np.ndarray, tol: float = 1e-9,
                   max_iter: int = 50_000) -> tuple[str, np.ndarray, int]:
    """Hot-path entry for ``max c.y, A y <= b, y >= 0`` without problem objects."""
    if A.shape[0] == 0:
        if np.any(c > tol):
            return UNBOUNDED, np.zeros(A.shape[1]), 0
        return OPTIMAL, np.zeros(A.shape[1]), 0
    code, y, basis, iters = _two_phase(A, b, c, tol, max_iter, 50)
    if code != 0:
        return {1: INFEASIBLE, 2: UNBOUNDED, 3: ITERATION_LIMIT}[code], y, iters
    if np.max(A @ y - b, initial=0.0) <= 1e-12 * max(1.0, float(np.abs(b).max())):
        return OPTIMAL, y, iters
    return OPTIMAL, _refine(A, b, basis, y), iters
