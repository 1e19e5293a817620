import numpy as np
import pytest

from rcnc.lp import (INFEASIBLE, UNBOUNDED, LpProblem, dump_problem, load_problem, solve_lp,
                     verify_solution)

from oracles import vertex_enumeration_max


def test_single_box():
    sol = solve_lp(LpProblem([1.0], [[1.0]], [5.0]))
    assert sol.ok and sol.x[0] == pytest.approx(5)


def test_triangle():
    sol = solve_lp(LpProblem([1.0, 1.0], [[1.0, 1.0]], [1.0]))
    assert sol.objective == pytest.approx(1)
    assert verify_solution(LpProblem([1.0, 1.0], [[1.0, 1.0]], [1.0]), sol).max_violation <= 1e-12


def test_minimization_with_lower_bounds():
    p = LpProblem([2.0, 3.0], [[-1.0, -1.0]], [-4.0], sense="min", lower=[1.0, 0.0])
    sol = solve_lp(p)
    assert sol.objective == pytest.approx(8.0)
    assert sol.x.tolist() == pytest.approx([4.0, 0.0])


def test_free_variable():
    p = LpProblem([-1.0], [[-1.0]], [3.0], lower=[-np.inf])
    assert solve_lp(p).x[0] == pytest.approx(-3.0)


def test_infeasible_and_unbounded():
    assert solve_lp(LpProblem([1.0], [[1.0], [-1.0]], [1.0, -2.0])).status == INFEASIBLE
    assert solve_lp(LpProblem([1.0, 1.0], [[1.0, -1.0]], [1.0])).status == UNBOUNDED


def test_verify_reports_violated_row():
    p = LpProblem([1.0, 1.0], [[1.0, 0.0], [1.0, 1.0]], [1.0, 2.0], row_labels=["a", "b"])
    assert verify_solution(p, [0.5, 0.5]).max_violation <= 0
    rep = verify_solution(p, [1.0, 1.5])
    assert rep.worst() == ("b", 0.5)
    assert rep.rows[0] == 0


def test_problem_validation():
    with pytest.raises(ValueError):
        LpProblem([1.0], [[1.0]], [1.0, 2.0])
    with pytest.raises(ValueError):
        LpProblem([np.nan], [[1.0]], [1.0])
    with pytest.raises(ValueError):
        LpProblem([1.0], [[1.0]], [1.0], sense="maximize")


def random_lp(rng):
    n = int(rng.integers(1, 9))
    m = int(rng.integers(1, 9))
    A = rng.integers(-3, 4, (m, n)).astype(float)
    b = rng.integers(-2, 9, m).astype(float)
    c = rng.integers(-4, 5, n).astype(float)
    upper = rng.integers(1, 6, n).astype(float)
    return LpProblem(c, A, b, upper=upper)


@pytest.mark.parametrize("block", range(10))
def test_matches_vertex_enumeration(block):
    rng = np.random.default_rng(1000 + block)
    for _ in range(50):
        p = random_lp(rng)
        sol = solve_lp(p)
        best = vertex_enumeration_max(p.c, p.A, p.b, p.upper)
        if best is None:
            assert sol.status == INFEASIBLE
        else:
            assert sol.ok
            assert sol.objective == pytest.approx(best, abs=1e-6)
            assert sol.residual <= 1e-9


def test_identical_problems_give_identical_bytes():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = random_lp(rng)
        q = load_problem(dump_problem(p))
        a, b = solve_lp(p), solve_lp(q)
        assert a.status == b.status
        if a.ok:
            assert a.x.tobytes() == b.x.tobytes()


def test_dump_load_roundtrip():
    p = LpProblem([1.5, -2.0], [[1.0, 2.0], [0.1, 0.3]], [4.0, 1e-7], sense="min",
                  lower=[0.0, -np.inf], upper=[np.inf, 3.0], var_labels=["x", "y"],
                  row_labels=["r1", "r2"])
    q = load_problem(dump_problem(p))
    for f in ("c", "A", "b", "lower", "upper"):
        assert np.array_equal(getattr(p, f), getattr(q, f))
    assert (q.sense, q.var_labels, q.row_labels) == ("min", ["x", "y"], ["r1", "r2"])


def test_highs_agrees():
    rng = np.random.default_rng(77)
    for _ in range(100):
        p = random_lp(rng)
        a, b = solve_lp(p), solve_lp(p, backend="highs")
        assert a.status == b.status
        if a.ok:
            assert a.objective == pytest.approx(b.objective, abs=1e-7)


def test_unknown_backend():
    with pytest.raises(ValueError):
        solve_lp(LpProblem([1.0], [[1.0]], [1.0]), backend="glpk")
