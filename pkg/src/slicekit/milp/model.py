"""Mixed-integer linear model container, feasibility checker, and LP-format dump.

Models are plain data: named variables with bounds and kinds, named linear
constraints, one linear objective.  Builders construct a model, call
``validate`` once, and treat it as immutable from then on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import SlicekitError

CONTINUOUS = "continuous"
INTEGER = "integer"
BINARY = "binary"

_RELATIONS = ("<=", ">=", "==")

INTEGRALITY_TOL = 1e-6
FEASIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str = CONTINUOUS
    lower: float = 0.0
    upper: float = float("inf")


@dataclass(frozen=True)
class Constraint:
    name: str
    coeffs: dict[str, float]
    relation: str
    rhs: float


class Model:
    """A mixed-integer linear program under construction."""

    def __init__(self, name: str = "model"):
        self.name = name
        self.variables: dict[str, Variable] = {}
        self.constraints: list[Constraint] = []
        self.objective_sense: str = "max"
        self.objective: dict[str, float] = {}

    def add_variable(
        self,
        name: str,
        kind: str = CONTINUOUS,
        lower: float = 0.0,
        upper: float | None = None,
    ) -> str:
        if name in self.variables:
            raise SlicekitError(f"duplicate variable {name!r}")
        if kind == BINARY:
            lo = 0.0 if lower is None else max(0.0, lower)
            hi = 1.0 if upper is None else min(1.0, upper)
        else:
            lo = 0.0 if lower is None else lower
            hi = float("inf") if upper is None else upper
        if kind == INTEGER and not (lo > float("-inf") and hi < float("inf")):
            raise SlicekitError(f"integer variable {name!r} needs finite bounds")
        if lo > hi:
            raise SlicekitError(f"variable {name!r} has empty bound interval [{lo}, {hi}]")
        if kind not in (CONTINUOUS, INTEGER, BINARY):
            raise SlicekitError(f"unknown variable kind {kind!r}")
        self.variables[name] = Variable(name=name, kind=kind, lower=lo, upper=hi)
        return name

    def add_constraint(self, name: str, coeffs: dict[str, float], relation: str, rhs: float) -> None:
        if relation not in _RELATIONS:
            raise SlicekitError(f"unknown relation {relation!r}")
        self.constraints.append(Constraint(name=name, coeffs=dict(coeffs), relation=relation, rhs=rhs))

    def set_objective(self, sense: str, coeffs: dict[str, float]) -> None:
        if sense not in ("max", "min"):
            raise SlicekitError(f"unknown objective sense {sense!r}")
        self.objective_sense = sense
        self.objective = dict(coeffs)

    def integer_variables(self) -> list[str]:
        return [v.name for v in self.variables.values() if v.kind in (INTEGER, BINARY)]

    def validate(self) -> None:
        """Check internal consistency; raise on dangling references or bad bounds."""
        for con in self.constraints:
            for var in con.coeffs:
                if var not in self.variables:
                    raise SlicekitError(f"constraint {con.name!r} references unknown variable {var!r}")
        for var in self.objective:
            if var not in self.variables:
                raise SlicekitError(f"objective references unknown variable {var!r}")

    def objective_value(self, assignment: dict[str, float]) -> float:
        return sum(coef * assignment[var] for var, coef in sorted(self.objective.items()))


@dataclass(frozen=True)
class BranchRecord:
    """One explored branch-and-bound node, for after-the-fact auditing."""

    node_id: int
    parent: int | None
    depth: int
    bound: float
    kind: str  # "branched" | "integral" | "pruned_bound" | "pruned_infeasible"
    branch_var: str | None
    incumbent: float | None


@dataclass
class Solution:
    """Solver output; ``wall_time`` and the audit trail do not affect equality."""

    status: str  # "optimal" | "infeasible" | "gap_limit"
    objective: float | None
    assignment: dict[str, float]
    gap: float
    nodes_explored: int
    wall_time: float = field(compare=False, default=0.0)
    audit: list[BranchRecord] = field(compare=False, repr=False, default_factory=list)


def check_feasible(
    model: Model, assignment: dict[str, float], tol: float = FEASIBILITY_TOL
) -> list[str]:
    """Names of constraints/bounds the assignment violates (empty when feasible).

    Bounds and integrality are reported as pseudo-constraints named
    ``bound:<var>`` and ``integrality:<var>``.
    """
    violations: list[str] = []
    for var in model.variables.values():
        if var.name not in assignment:
            violations.append(f"missing:{var.name}")
            continue
        val = assignment[var.name]
        if val < var.lower - tol or val > var.upper + tol:
            violations.append(f"bound:{var.name}")
        if var.kind in (INTEGER, BINARY) and abs(val - round(val)) > INTEGRALITY_TOL:
            violations.append(f"integrality:{var.name}")
    if violations and any(v.startswith("missing:") for v in violations):
        return violations
    for con in model.constraints:
        lhs = sum(coef * assignment[var] for var, coef in con.coeffs.items())
        if con.relation == "<=" and lhs > con.rhs + tol:
            violations.append(con.name)
        elif con.relation == ">=" and lhs < con.rhs - tol:
            violations.append(con.name)
        elif con.relation == "==" and abs(lhs - con.rhs) > tol:
            violations.append(con.name)
    return violations


def to_lp_text(model: Model) -> str:
    """Serialize the model in LP text format.

    Variable and constraint names are mangled deterministically (x0, x1, ...
    in declaration order; c0, c1, ...) because LP format forbids most
    punctuation; the original names are kept in comment lines.
    """
    order = {name: i for i, name in enumerate(model.variables)}
    mangled = {name: f"x{i}" for name, i in order.items()}

    def term_str(coeffs: dict[str, float]) -> str:
        parts: list[str] = []
        for name in sorted(coeffs, key=lambda n: order[n]):
            coef = coeffs[name]
            if coef == 0:
                continue
            sign = "-" if coef < 0 else "+"
            mag = abs(coef)
            parts.append(f"{sign} {mag!r} {mangled[name]}")
        if not parts:
            return "0 " + next(iter(mangled.values()), "x0")
        text = " ".join(parts)
        return text[2:] if text.startswith("+ ") else text

    lines: list[str] = [f"\\ model {model.name}"]
    for name, i in order.items():
        lines.append(f"\\ x{i} := {name}")
    lines.append("Maximize" if model.objective_sense == "max" else "Minimize")
    lines.append(f" obj: {term_str(model.objective)}")
    lines.append("Subject To")
    rel_map = {"<=": "<=", ">=": ">=", "==": "="}
    for idx, con in enumerate(model.constraints):
        lines.append(f"\\ c{idx} := {con.name}")
        lines.append(f" c{idx}: {term_str(con.coeffs)} {rel_map[con.relation]} {con.rhs!r}")
    lines.append("Bounds")
    for name, var in model.variables.items():
        lo = "-inf" if var.lower == float("-inf") else repr(var.lower)
        hi = "+inf" if var.upper == float("inf") else repr(var.upper)
        lines.append(f" {lo} <= {mangled[name]} <= {hi}")
    generals = [mangled[n] for n, v in model.variables.items() if v.kind == INTEGER]
    binaries = [mangled[n] for n, v in model.variables.items() if v.kind == BINARY]
    if generals:
        lines.append("General")
        lines.append(" " + " ".join(generals))
    if binaries:
        lines.append("Binary")
        lines.append(" " + " ".join(binaries))
    lines.append("End")
    return "\n".join(lines) + "\n"
