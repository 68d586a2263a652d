"""Exact branch-and-bound solver over LP relaxations.

The search keeps an explicit frontier of open nodes ordered by LP bound
(best-bound-first).  Each node's relaxation is solved with the dual simplex
method; branching splits the fractional integer variable with the largest
objective weight (most fractional within a weight class), ties broken by a
seeded permutation so that runs are reproducible for a fixed seed.  A
round-and-fix dive runs at the root and periodically during the search to
pull integral incumbents out of LP points.  The solver records every
explored node in an audit trail that tests can replay to confirm the
bounding argument.

``time_limit`` is a deterministic work budget, not a stopwatch: the search
charges each LP solve a size-based cost calibrated to seconds on commodity
hardware and stops once the total passes the limit.  Two runs with the same
inputs therefore stop at the same node and return the same answer, which
keeps limited solves reproducible.
"""

from __future__ import annotations

import heapq
import math
import random
import time
from typing import Protocol

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from ..errors import SlicekitError, SolverLimitError
from .model import (
    BINARY,
    FEASIBILITY_TOL,
    INTEGER,
    INTEGRALITY_TOL,
    BranchRecord,
    Model,
    Solution,
    check_feasible,
)

DEFAULT_GAP_TOL = 1e-4


class SolverBackend(Protocol):
    """Anything that can take a Model and produce a Solution.

    Adapters for external solvers implement this and must pass the same
    enumeration-equivalence suite as the built-in solver.
    """

    def solve(
        self,
        model: Model,
        *,
        gap_tol: float = DEFAULT_GAP_TOL,
        time_limit: float | None = None,
        var_order_seed: int = 0,
        warm_start: dict[str, float] | None = None,
        improver: "Improver | None" = None,
    ) -> Solution: ...


class Improver(Protocol):
    """Domain heuristic turning an LP point into a feasible assignment.

    Called with the fractional assignment of an explored node; returns a
    candidate integral assignment or None.  Candidates are verified against
    the model before they can become incumbents, so a sloppy improver can
    waste time but never corrupt the search.
    """

    def __call__(self, point: dict[str, float]) -> dict[str, float] | None: ...


class _Relaxation:
    """The model's LP data in matrix form; per-node solves vary only the bounds."""

    def __init__(self, model: Model):
        self.names = list(model.variables)
        self.index = {name: i for i, name in enumerate(self.names)}
        n = len(self.names)
        self.n = n
        self.sense = 1.0 if model.objective_sense == "min" else -1.0
        c = np.zeros(n)
        for name, coef in model.objective.items():
            c[self.index[name]] = coef
        self.c_orig = c
        self.c = self.sense * c  # internal problems always minimize

        rows_ub: list[tuple[int, int, float]] = []
        rhs_ub: list[float] = []
        rows_eq: list[tuple[int, int, float]] = []
        rhs_eq: list[float] = []
        for con in model.constraints:
            if con.relation == "==":
                r = len(rhs_eq)
                rhs_eq.append(con.rhs)
                for var, coef in con.coeffs.items():
                    rows_eq.append((r, self.index[var], coef))
            else:
                flip = -1.0 if con.relation == ">=" else 1.0
                r = len(rhs_ub)
                rhs_ub.append(flip * con.rhs)
                for var, coef in con.coeffs.items():
                    rows_ub.append((r, self.index[var], flip * coef))

        def build(rows, rhs):
            if not rhs:
                return None, None
            data = np.array([v for _, _, v in rows])
            ij = ([r for r, _, _ in rows], [j for _, j, _ in rows])
            mat = sparse.csr_matrix((data, ij), shape=(len(rhs), n))
            return mat, np.array(rhs)

        self.A_ub, self.b_ub = build(rows_ub, rhs_ub)
        self.A_eq, self.b_eq = build(rows_eq, rhs_eq)

        self.lower = np.array([model.variables[name].lower for name in self.names])
        self.upper = np.array([model.variables[name].upper for name in self.names])
        self.int_idx = np.array(
            [self.index[name] for name in model.integer_variables()], dtype=int
        )
        self.obj_mag = np.abs(self.c_orig)
        # deterministic work accounting: budget checks meter LP solves by a
        # size-based cost model instead of the wall clock, so a limited run
        # stops at the same node on every machine and every repeat
        nnz = (0 if self.A_ub is None else self.A_ub.nnz) + (
            0 if self.A_eq is None else self.A_eq.nnz
        )
        self.lp_cost = 5e-4 + 1.55e-6 * nnz
        self.work = 0.0

    def solve_lp(self, lower: np.ndarray, upper: np.ndarray):
        """Solve the relaxation with the given bounds.

        Returns (status, x, internal objective); status is "optimal",
        "infeasible", or "unbounded".
        """
        self.work += self.lp_cost
        res = linprog(
            self.c,
            A_ub=self.A_ub,
            b_ub=self.b_ub,
            A_eq=self.A_eq,
            b_eq=self.b_eq,
            bounds=np.column_stack((lower, upper)),
            method="highs-ds",
        )
        if res.status == 0:
            return "optimal", res.x, float(res.fun)
        if res.status == 2:
            return "infeasible", None, math.inf
        if res.status == 3:
            return "unbounded", None, -math.inf
        raise SlicekitError(f"LP solve failed (status {res.status}): {res.message}")


class BranchAndBoundSolver:
    """Default exact solver: best-bound branch and bound over dual-simplex LPs."""

    def solve(
        self,
        model: Model,
        *,
        gap_tol: float = DEFAULT_GAP_TOL,
        time_limit: float | None = None,
        var_order_seed: int = 0,
        warm_start: dict[str, float] | None = None,
        improver: Improver | None = None,
    ) -> Solution:
        start = time.monotonic()
        model.validate()
        relax = _Relaxation(model)
        sense = relax.sense  # internal minimization throughout

        tie_rank = list(range(relax.n))
        random.Random(var_order_seed).shuffle(tie_rank)

        audit: list[BranchRecord] = []
        incumbent_x: np.ndarray | None = None
        incumbent_obj = math.inf  # internal sense

        if warm_start is not None:
            bad = check_feasible(model, warm_start, tol=FEASIBILITY_TOL)
            if bad:
                raise SlicekitError(f"warm start violates {bad[:5]} ({len(bad)} total)")
            incumbent_x = np.array([warm_start[name] for name in relax.names])
            incumbent_obj = float(np.dot(relax.c, incumbent_x))

        def model_obj(internal: float) -> float:
            return sense * internal

        def rel_gap(bound_internal: float) -> float:
            if incumbent_obj is math.inf:
                return math.inf
            return (incumbent_obj - bound_internal) / max(1.0, abs(incumbent_obj))

        # root
        status, x, obj = relax.solve_lp(relax.lower, relax.upper)
        if status == "unbounded":
            raise SlicekitError("model is unbounded")
        if status == "infeasible":
            if incumbent_x is None:
                return Solution(
                    status="infeasible",
                    objective=None,
                    assignment={},
                    gap=0.0,
                    nodes_explored=1,
                    wall_time=time.monotonic() - start,
                    audit=[BranchRecord(0, None, 0, math.nan, "pruned_infeasible", None, None)],
                )
            # warm start exists but relaxation infeasible: contradictory inputs
            raise SlicekitError("relaxation infeasible despite feasible warm start")

        counter = 0
        heap: list[tuple[float, int, int, np.ndarray, np.ndarray, np.ndarray, float]] = []
        # entries: (bound, seq, depth, lower, upper, x, parent_id)
        heapq.heappush(heap, (obj, counter, 0, relax.lower, relax.upper, x, -1))
        nodes_explored = 0
        timed_out = False
        final_bound: float | None = None
        dives_left = 40

        def accept(cand: np.ndarray, action: str) -> None:
            nonlocal incumbent_x, incumbent_obj, counter
            cobj = float(np.dot(relax.c, cand))
            if cobj < incumbent_obj:
                incumbent_x, incumbent_obj = cand, cobj
                counter += 1
                audit.append(
                    BranchRecord(-counter, None, 0, model_obj(cobj), action,
                                 None, model_obj(cobj))
                )

        def try_dive(lo: np.ndarray, hi: np.ndarray, x: np.ndarray) -> None:
            nonlocal dives_left
            dives_left -= 1
            dx = self._dive(relax, lo, hi, x, time_limit)
            if dx is not None:
                accept(dx, "dive")

        def try_improver(x: np.ndarray) -> None:
            point = {name: float(x[j]) for name, j in relax.index.items()}
            cand = improver(point)
            if cand is None:
                return
            if check_feasible(model, cand, tol=FEASIBILITY_TOL):
                return
            accept(np.array([cand[name] for name in relax.names]), "improved")

        if self._fractional_violation(x, relax.int_idx) is not None:
            if improver is not None:
                try_improver(x)
            else:
                try_dive(relax.lower, relax.upper, x)

        while heap:
            bound, seq, depth, lo, hi, x, parent = heapq.heappop(heap)
            node_id = nodes_explored
            nodes_explored += 1
            inc_report = None if incumbent_obj is math.inf else model_obj(incumbent_obj)

            if time_limit is not None and relax.work > time_limit:
                timed_out = True
                heapq.heappush(heap, (bound, seq, depth, lo, hi, x, parent))
                break

            if rel_gap(bound) > gap_tol:
                if improver is not None:
                    try_improver(x)
                elif nodes_explored % 150 == 0 and dives_left > 0 and rel_gap(bound) > 10 * gap_tol:
                    try_dive(lo, hi, x)

            # best-bound order: once the best open bound cannot beat the
            # incumbent by more than the gap tolerance, the search is done
            if rel_gap(bound) <= gap_tol:
                audit.append(
                    BranchRecord(node_id, parent if parent >= 0 else None, depth,
                                 model_obj(bound), "pruned_bound", None, inc_report)
                )
                final_bound = bound
                break

            frac = self._fractional_violation(x, relax.int_idx)
            if frac is None:
                cleaned = self._cleanup(relax, lo, hi, x)
                cobj = float(np.dot(relax.c, cleaned))
                if cobj < incumbent_obj:
                    incumbent_x = cleaned
                    incumbent_obj = cobj
                audit.append(
                    BranchRecord(node_id, parent if parent >= 0 else None, depth,
                                 model_obj(bound), "integral", None, model_obj(incumbent_obj))
                )
                continue

            branch_idx = self._pick_branch(x, relax.int_idx, tie_rank, relax.obj_mag)
            name = relax.names[branch_idx]
            val = x[branch_idx]
            audit.append(
                BranchRecord(node_id, parent if parent >= 0 else None, depth,
                             model_obj(bound), "branched", name, inc_report)
            )
            for child in ("floor", "ceil"):
                clo, chi = lo.copy(), hi.copy()
                if child == "floor":
                    chi[branch_idx] = math.floor(val)
                else:
                    clo[branch_idx] = math.ceil(val)
                if clo[branch_idx] > chi[branch_idx]:
                    continue
                cstatus, cx, cobj = relax.solve_lp(clo, chi)
                counter += 1
                if cstatus == "infeasible":
                    audit.append(
                        BranchRecord(-counter, node_id, depth + 1, math.nan,
                                     "pruned_infeasible", None, None)
                    )
                    continue
                if rel_gap(cobj) <= gap_tol:
                    audit.append(
                        BranchRecord(-counter, node_id, depth + 1, model_obj(cobj),
                                     "pruned_bound", None, model_obj(incumbent_obj))
                    )
                    continue
                heapq.heappush(heap, (cobj, counter, depth + 1, clo, chi, cx, node_id))

        wall = time.monotonic() - start
        if incumbent_x is None:
            if timed_out:
                raise SolverLimitError(
                    f"work budget {time_limit}s exhausted with no feasible point found"
                )
            # frontier exhausted without any integral point
            return Solution(
                status="infeasible",
                objective=None,
                assignment={},
                gap=0.0,
                nodes_explored=nodes_explored,
                wall_time=wall,
                audit=audit,
            )

        open_bound = min((entry[0] for entry in heap), default=incumbent_obj)
        if final_bound is not None:
            open_bound = min(open_bound, final_bound)
        gap = max(0.0, rel_gap(open_bound))
        assignment = self._assignment(relax, incumbent_x)
        return Solution(
            status="gap_limit" if (timed_out and gap > gap_tol) else "optimal",
            objective=float(np.dot(relax.c_orig, incumbent_x)),
            assignment=assignment,
            gap=gap,
            nodes_explored=nodes_explored,
            wall_time=wall,
            audit=audit,
        )

    @staticmethod
    def _fractional_violation(x: np.ndarray, int_idx: np.ndarray) -> np.ndarray | None:
        if int_idx.size == 0:
            return None
        vals = x[int_idx]
        dist = np.abs(vals - np.round(vals))
        return dist if np.any(dist > INTEGRALITY_TOL) else None

    @staticmethod
    def _pick_branch(
        x: np.ndarray, int_idx: np.ndarray, tie_rank: list[int], obj_mag: np.ndarray
    ) -> int:
        """Fractional variable with the largest objective weight, then most
        fractional; a seeded permutation breaks remaining ties.

        Objective-carrying variables is where the bound actually moves, so
        resolving them first keeps the tree shallow.
        """
        best: tuple[float, float, int, int] | None = None
        for j in int_idx:
            dist = abs(x[j] - round(x[j]))
            if dist <= INTEGRALITY_TOL:
                continue
            key = (-obj_mag[j], -dist, tie_rank[j], j)
            if best is None or key < best:
                best = key
        assert best is not None
        return best[3]

    @staticmethod
    def _dive(
        relax: _Relaxation,
        lo: np.ndarray,
        hi: np.ndarray,
        x: np.ndarray,
        budget: float | None,
    ) -> np.ndarray | None:
        """Round-and-fix descent from an LP point to an integral one.

        Each pass pins every already-integral integer variable and rounds
        the single most fractional one, then re-solves the LP.  Returns the
        integral point reached, or None when a pass goes infeasible or the
        work budget runs out.
        """
        clo, chi = lo.copy(), hi.copy()
        cx = x
        for _ in range(relax.int_idx.size):
            if budget is not None and relax.work > budget:
                return None
            vals = cx[relax.int_idx]
            dist = np.abs(vals - np.round(vals))
            if not np.any(dist > INTEGRALITY_TOL):
                return cx
            settled = relax.int_idx[dist <= INTEGRALITY_TOL]
            snapped = np.round(cx[settled])
            clo[settled] = snapped
            chi[settled] = snapped
            j = relax.int_idx[int(np.argmax(dist))]
            r = round(float(cx[j]))
            clo[j] = chi[j] = r
            status, nx, _ = relax.solve_lp(clo, chi)
            if status != "optimal":
                return None
            cx = nx
        return None

    @staticmethod
    def _cleanup(relax: _Relaxation, lo: np.ndarray, hi: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Snap integer values and repair the continuous part by a fixed-integer re-solve."""
        snapped = x.copy()
        snapped[relax.int_idx] = np.round(snapped[relax.int_idx])
        if relax.int_idx.size == relax.n:
            return snapped
        clo, chi = lo.copy(), hi.copy()
        clo[relax.int_idx] = snapped[relax.int_idx]
        chi[relax.int_idx] = snapped[relax.int_idx]
        status, fixed_x, _ = relax.solve_lp(clo, chi)
        return fixed_x if status == "optimal" else snapped

    @staticmethod
    def _assignment(relax: _Relaxation, x: np.ndarray) -> dict[str, float]:
        out: dict[str, float] = {}
        for name, j in relax.index.items():
            val = float(x[j])
            if abs(val - round(val)) <= INTEGRALITY_TOL:
                val = float(round(val))
            out[name] = val + 0.0  # +0.0 folds -0.0 for byte-stable serialization
        return out


_DEFAULT = BranchAndBoundSolver()


def solve(
    model: Model,
    *,
    gap_tol: float = DEFAULT_GAP_TOL,
    time_limit: float | None = None,
    var_order_seed: int = 0,
    warm_start: dict[str, float] | None = None,
    improver: Improver | None = None,
) -> Solution:
    """Solve a model with the built-in branch-and-bound solver."""
    return _DEFAULT.solve(
        model,
        gap_tol=gap_tol,
        time_limit=time_limit,
        var_order_seed=var_order_seed,
        warm_start=warm_start,
        improver=improver,
    )
