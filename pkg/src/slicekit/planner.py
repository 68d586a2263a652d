"""Minimum-cost network upgrade planning.

Given a catalog of purchasable improvements (bandwidth/fault-resistance
upgrades for existing links and forwarding nodes, plus brand-new candidate
links), pick the cheapest combination under which every required
subscription can be served while

* no component runs above a utilization ceiling (a fraction of its
  post-upgrade capacity, authentication bandwidth counted in), and
* every component keeps a fault-resistance margin: its post-upgrade rating
  minus the weighted service traffic routed through it stays at or above a
  floor.  This bounds the value at risk if the component fails, with no
  credit taken for rerouting, so it is a conservative guarantee.

The choice variables join the routing model directly: one binary per
catalog option, at most one option per component, candidate links usable
only when bought.  The same solve yields the plan and a routing witness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from . import formulation as F
from .errors import InfeasibleError, NetworkFormatError, SolverLimitError
from .formulation import Builder
from .milp import check_feasible, solve as milp_solve
from .model import (
    Case,
    LinkKey,
    LinkRecord,
    Medium,
    Network,
    NodeId,
    NodeRole,
    ServiceSpec,
    link_key,
)
from .slicer import (
    SliceProblem,
    SliceSolution,
    _fill_layer,
    _grow_routes,
    extract,
    reserved_loads,
)

UPGRADE_LINK = "upgrade-link"
ADD_LINK = "add-link"
UPGRADE_NODE = "upgrade-node"


@dataclass(frozen=True)
class UpgradeOption:
    """One purchasable capacity/resilience increment (deltas)."""

    bandwidth_kbps: float
    fra: float
    cost: float | None = None


@dataclass(frozen=True)
class AdditionOption:
    """One buildable variant of a candidate link (absolute values)."""

    bandwidth_kbps: float
    fra: float
    security: int
    delay_ms: float
    medium: Medium
    cost: float | None = None


@dataclass(frozen=True)
class UpgradeCatalog:
    link_upgrades: dict[LinkKey, tuple[UpgradeOption, ...]]
    link_additions: dict[LinkKey, tuple[AdditionOption, ...]]
    node_upgrades: dict[NodeId, tuple[UpgradeOption, ...]]
    # fallback cost model for options without an explicit price
    phi_add: float | None = None
    phi_upgrade: float | None = None
    distance: dict[LinkKey, float] | None = None
    alpha: dict[LinkKey, float] | None = None
    beta: dict[LinkKey, float] | None = None
    node_base: dict[NodeId, float] | None = None

    def components(self) -> list[tuple[str, object, tuple]]:
        """All optional components in a fixed order."""
        out: list[tuple[str, object, tuple]] = []
        for k in sorted(self.link_upgrades):
            out.append((UPGRADE_LINK, k, self.link_upgrades[k]))
        for k in sorted(self.link_additions):
            out.append((ADD_LINK, k, self.link_additions[k]))
        for i in sorted(self.node_upgrades):
            out.append((UPGRADE_NODE, i, self.node_upgrades[i]))
        return out


@dataclass(frozen=True)
class PlanRequest:
    """What the upgraded network must achieve."""

    chi_link: float = 0.7
    chi_node: float = 0.7
    mu_link: float = 0.0
    mu_node: float = 0.0
    required: frozenset[tuple[NodeId, str]] = frozenset()


@dataclass(frozen=True)
class PlanChoice:
    operation: str
    target: object
    option_index: int
    bandwidth_kbps: float
    fra: float
    cost: float

    @property
    def target_label(self) -> str:
        if self.operation == UPGRADE_NODE:
            return str(self.target)
        return f"{self.target[0]}-{self.target[1]}"


@dataclass(frozen=True)
class UpgradePlan:
    chosen: tuple[PlanChoice, ...]
    total_cost: float
    witness: SliceSolution
    status: str
    gap: float
    nodes_explored: int
    wall_time: float

    def to_json_dict(self) -> dict:
        return {
            "total_cost": self.total_cost,
            "status": self.status,
            "chosen": [
                {
                    "operation": c.operation,
                    "component": c.target_label,
                    "option_index": c.option_index,
                    "bandwidth_kbps": c.bandwidth_kbps,
                    "fra": c.fra,
                    "cost": c.cost,
                }
                for c in self.chosen
            ],
            "witness": self.witness.to_json_dict(),
        }

    def to_table(self) -> str:
        rows = [("Operation", "Component", "Added bandwidth (kbps)", "Added FRA", "Cost")]
        names = {
            UPGRADE_LINK: "Link upgrade",
            ADD_LINK: "Link addition",
            UPGRADE_NODE: "Node upgrade",
        }
        for c in self.chosen:
            rows.append(
                (
                    names[c.operation],
                    c.target_label,
                    f"{c.bandwidth_kbps:g}",
                    f"{c.fra:g}",
                    f"{c.cost:g}",
                )
            )
        rows.append(("Total", "", "", "", f"{self.total_cost:g}"))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        return "\n".join(
            "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
            for r in rows
        ) + "\n"


# -- catalog parsing --------------------------------------------------------


def _num_list(obj, field: str, where: str) -> list[float]:
    if not isinstance(obj, list) or not obj:
        raise NetworkFormatError(f"{where}: {field} must be a nonempty list")
    out = []
    for v in obj:
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise NetworkFormatError(f"{where}: {field} entries must be numbers")
        out.append(float(v))
    return out


def _cost_list(obj, n: int, where: str) -> list[float | None]:
    if obj is None:
        return [None] * n
    if not isinstance(obj, list) or len(obj) != n:
        raise NetworkFormatError(f"{where}: cost list length must match the option count")
    out: list[float | None] = []
    for v in obj:
        if v is None:
            out.append(None)
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            if v <= 0:
                raise NetworkFormatError(f"{where}: costs must be positive")
            out.append(float(v))
        else:
            raise NetworkFormatError(f"{where}: cost entries must be numbers or null")
    return out


def _parse_link_id(raw: str, where: str) -> LinkKey:
    parts = raw.split("-")
    if len(parts) != 2:
        raise NetworkFormatError(f"{where}: link id {raw!r} is not 'a-b'")
    try:
        return link_key(int(parts[0]), int(parts[1]))
    except ValueError as exc:
        raise NetworkFormatError(f"{where}: link id {raw!r} is not numeric") from exc


def parse_catalog(text: str) -> UpgradeCatalog:
    """Read an upgrade catalog from JSON.

    Option attributes are parallel lists matched by position; cost entries
    may be null to fall back to the distance-based cost formula.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"catalog is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise NetworkFormatError("catalog must be a JSON object")

    link_up: dict[LinkKey, tuple[UpgradeOption, ...]] = {}
    for raw, spec in (data.get("link_upgrades") or {}).items():
        where = f"link_upgrades[{raw}]"
        k = _parse_link_id(raw, where)
        bw = _num_list(spec.get("bandwidth_kbps"), "bandwidth_kbps", where)
        fra = _num_list(spec.get("fra"), "fra", where)
        if len(fra) != len(bw):
            raise NetworkFormatError(f"{where}: fra list length must match bandwidth_kbps")
        cost = _cost_list(spec.get("cost"), len(bw), where)
        if any(b < 0 for b in bw) or any(f < 0 for f in fra):
            raise NetworkFormatError(f"{where}: increments must be nonnegative")
        link_up[k] = tuple(
            UpgradeOption(bandwidth_kbps=b, fra=f, cost=c)
            for b, f, c in zip(bw, fra, cost)
        )

    node_up: dict[NodeId, tuple[UpgradeOption, ...]] = {}
    for raw, spec in (data.get("node_upgrades") or {}).items():
        where = f"node_upgrades[{raw}]"
        try:
            i = int(raw)
        except ValueError as exc:
            raise NetworkFormatError(f"{where}: node id must be an integer") from exc
        bw = _num_list(spec.get("bandwidth_kbps"), "bandwidth_kbps", where)
        fra = _num_list(spec.get("fra"), "fra", where)
        if len(fra) != len(bw):
            raise NetworkFormatError(f"{where}: fra list length must match bandwidth_kbps")
        cost = _cost_list(spec.get("cost"), len(bw), where)
        if any(b < 0 for b in bw) or any(f < 0 for f in fra):
            raise NetworkFormatError(f"{where}: increments must be nonnegative")
        node_up[i] = tuple(
            UpgradeOption(bandwidth_kbps=b, fra=f, cost=c)
            for b, f, c in zip(bw, fra, cost)
        )

    link_add: dict[LinkKey, tuple[AdditionOption, ...]] = {}
    for raw, spec in (data.get("link_additions") or {}).items():
        where = f"link_additions[{raw}]"
        k = _parse_link_id(raw, where)
        bw = _num_list(spec.get("bandwidth_kbps"), "bandwidth_kbps", where)
        fra = _num_list(spec.get("fra"), "fra", where)
        if len(fra) != len(bw):
            raise NetworkFormatError(f"{where}: fra list length must match bandwidth_kbps")
        cost = _cost_list(spec.get("cost"), len(bw), where)
        sec = spec.get("security")
        if not isinstance(sec, int) or isinstance(sec, bool) or sec < 1:
            raise NetworkFormatError(f"{where}: security must be a positive integer")
        delay = spec.get("delay_ms", 1.0)
        if not isinstance(delay, (int, float)) or delay < 0:
            raise NetworkFormatError(f"{where}: delay_ms must be nonnegative")
        medium_raw = spec.get("medium", "wired")
        try:
            medium = Medium(medium_raw)
        except ValueError as exc:
            raise NetworkFormatError(f"{where}: unknown medium {medium_raw!r}") from exc
        if any(b <= 0 for b in bw):
            raise NetworkFormatError(f"{where}: a new link needs positive bandwidth")
        link_add[k] = tuple(
            AdditionOption(
                bandwidth_kbps=b,
                fra=f,
                security=sec,
                delay_ms=float(delay),
                medium=medium,
                cost=c,
            )
            for b, f, c in zip(bw, fra, cost)
        )

    params = data.get("cost_params") or {}

    def _link_map(field: str) -> dict[LinkKey, float] | None:
        raw2 = params.get(field)
        if raw2 is None:
            return None
        return {
            _parse_link_id(r, f"cost_params.{field}"): float(v) for r, v in raw2.items()
        }

    node_base_raw = params.get("node_base")
    return UpgradeCatalog(
        link_upgrades=link_up,
        link_additions=link_add,
        node_upgrades=node_up,
        phi_add=params.get("phi_add"),
        phi_upgrade=params.get("phi_upgrade"),
        distance=_link_map("distance"),
        alpha=_link_map("alpha"),
        beta=_link_map("beta"),
        node_base=(
            {int(i): float(v) for i, v in node_base_raw.items()}
            if node_base_raw is not None
            else None
        ),
    )


def validate_catalog(catalog: UpgradeCatalog, net: Network) -> None:
    for k in catalog.link_upgrades:
        if k not in net.links:
            raise NetworkFormatError(f"link upgrade target {k[0]}-{k[1]} not in network")
    for k in catalog.link_additions:
        if k in net.links:
            raise NetworkFormatError(f"candidate link {k[0]}-{k[1]} already exists")
        for i in k:
            if i not in net.nodes:
                raise NetworkFormatError(f"candidate link endpoint {i} not in network")
            if net.nodes[i].role is NodeRole.TERMINAL:
                raise NetworkFormatError(
                    f"candidate link {k[0]}-{k[1]} attaches to terminal {i}"
                )
    for i in catalog.node_upgrades:
        if i not in net.nodes:
            raise NetworkFormatError(f"node upgrade target {i} not in network")
        if net.nodes[i].role is not NodeRole.FORWARDING:
            raise NetworkFormatError(f"node upgrade target {i} is not a forwarding node")


def option_cost(catalog: UpgradeCatalog, kind: str, target, option) -> float:
    """Price one option: the explicit cost if listed, else the length formula."""
    if option.cost is not None:
        return option.cost
    if kind == ADD_LINK:
        if (
            catalog.phi_add is not None
            and catalog.alpha is not None
            and catalog.distance is not None
            and target in catalog.alpha
            and target in catalog.distance
        ):
            return catalog.alpha[target] + catalog.phi_add * catalog.distance[target]
    elif kind == UPGRADE_LINK:
        if (
            catalog.phi_upgrade is not None
            and catalog.beta is not None
            and catalog.distance is not None
            and target in catalog.beta
            and target in catalog.distance
        ):
            return catalog.beta[target] + catalog.phi_upgrade * catalog.distance[target]
    elif kind == UPGRADE_NODE:
        if catalog.node_base is not None and target in catalog.node_base:
            return catalog.node_base[target]
    label = target if kind == UPGRADE_NODE else f"{target[0]}-{target[1]}"
    raise NetworkFormatError(
        f"no cost for {kind} {label}: neither an explicit price nor formula parameters"
    )


# -- applying a plan --------------------------------------------------------


def candidate_record(k: LinkKey, options: tuple[AdditionOption, ...]) -> LinkRecord:
    """The candidate link as it would exist once built.

    Security, delay, and medium must not depend on the chosen option, so a
    single link record can stand for every variant during routing.
    """
    first = options[0]
    for o in options[1:]:
        if (o.security, o.delay_ms, o.medium) != (
            first.security,
            first.delay_ms,
            first.medium,
        ):
            raise NetworkFormatError(
                f"candidate link {k[0]}-{k[1]}: options disagree on security/delay/medium"
            )
    return LinkRecord(
        a=k[0],
        b=k[1],
        bandwidth_kbps=0.0,
        delay_ms=first.delay_ms,
        security=first.security,
        fra=0.0,
        medium=first.medium,
    )


def apply_plan(net: Network, chosen: tuple[PlanChoice, ...]) -> Network:
    """Network after performing the chosen operations."""
    nodes = dict(net.nodes)
    links = dict(net.links)
    for c in chosen:
        if c.operation == UPGRADE_LINK:
            rec = links[c.target]
            links[c.target] = replace(
                rec,
                bandwidth_kbps=rec.bandwidth_kbps + c.bandwidth_kbps,
                fra=rec.fra + c.fra,
            )
        elif c.operation == UPGRADE_NODE:
            rec = nodes[c.target]
            nodes[c.target] = replace(
                rec,
                bandwidth_kbps=rec.bandwidth_kbps + c.bandwidth_kbps,
                fra=rec.fra + c.fra,
            )
        elif c.operation == ADD_LINK:
            if c.target in links:
                rec = links[c.target]
                links[c.target] = replace(
                    rec,
                    bandwidth_kbps=rec.bandwidth_kbps + c.bandwidth_kbps,
                    fra=rec.fra + c.fra,
                )
            else:
                raise NetworkFormatError(
                    f"plan adds link {c.target[0]}-{c.target[1]} with no base record"
                )
        else:
            raise NetworkFormatError(f"unknown plan operation {c.operation!r}")
    return replace(net, nodes=nodes, links=links)


def _upgraded_net(net: Network, catalog: UpgradeCatalog, chosen: tuple[PlanChoice, ...]) -> Network:
    """Base network plus built candidate links plus upgrades."""
    links = dict(net.links)
    for c in chosen:
        if c.operation == ADD_LINK and c.target not in links:
            links[c.target] = candidate_record(c.target, catalog.link_additions[c.target])
    return apply_plan(replace(net, links=links), chosen)


# -- the planning model -----------------------------------------------------


def _qname(kind: str, target, idx: int) -> str:
    label = str(target) if not isinstance(target, tuple) else f"{target[0]}-{target[1]}"
    return f"q:{kind}:{label}:{idx}"


_FAMILIES = (
    "utilization-link",
    "utilization-node",
    "resilience-link",
    "resilience-node",
    "forced-service",
)


def _build_plan_problem(
    case: Case,
    reserved: dict[F.Component, float],
    catalog: UpgradeCatalog,
    request: PlanRequest,
    *,
    relax: frozenset[str] = frozenset(),
) -> SliceProblem:
    """Assemble the planning model, optionally dropping constraint families.

    ``relax`` exists for infeasibility diagnosis: rebuilding without one
    family at a time identifies which requirements actually bind.
    """
    net = case.network
    m_struct_bad: list[str] = []

    b = Builder(net, "plan")
    model = b.model

    # one binary per catalog option, at most one option per component
    comps = catalog.components()
    costs: dict[str, float] = {}
    for kind, target, options in comps:
        qnames = []
        for idx, opt in enumerate(options):
            name = _qname(kind, target, idx)
            model.add_variable(name, "binary")
            costs[name] = option_cost(catalog, kind, target, opt)
            qnames.append(name)
        label = _qname(kind, target, 0).rsplit(":", 1)[0]
        model.add_constraint(
            f"one_option:{label[2:]}", {q: 1.0 for q in qnames}, "<=", 1.0
        )

    extras = {
        k: candidate_record(k, opts) for k, opts in catalog.link_additions.items()
    }
    link_exists = {
        k: [_qname(ADD_LINK, k, i) for i in range(len(opts))]
        for k, opts in catalog.link_additions.items()
    }

    forced = "forced-service" not in relax
    required_by_svc: dict[str, list[NodeId]] = {}
    for j, svc in request.required:
        required_by_svc.setdefault(svc, []).append(j)
    for sid in sorted(case.services):
        spec = case.services[sid]
        if spec.is_auth:
            continue
        js = sorted(required_by_svc.get(sid, []))
        b.add_service(
            spec,
            js,
            forced_terminals=frozenset(js) if forced else frozenset(),
            link_exists=link_exists,
            extra_links=extras,
        )

    chi_l, chi_n = request.chi_link, request.chi_node
    mu_l, mu_n = request.mu_link, request.mu_node

    # utilization ceilings: routed bandwidth + reserved authentication
    # bandwidth within chi times the post-upgrade capacity
    if "utilization-link" not in relax:
        for k, rec in sorted(net.links.items()):
            terms = dict(b.link_load.get(k, {}))
            rhs = chi_l * rec.bandwidth_kbps - reserved.get(("link", k), 0.0)
            for idx, opt in enumerate(catalog.link_upgrades.get(k, ())):
                terms[_qname(UPGRADE_LINK, k, idx)] = -chi_l * opt.bandwidth_kbps
            if not terms:
                if rhs < -1e-9:
                    m_struct_bad.append(f"utilization-link:{k[0]}-{k[1]}")
                continue
            model.add_constraint(f"util_link:{k[0]}-{k[1]}", terms, "<=", rhs)
        for k, opts in sorted(catalog.link_additions.items()):
            terms = dict(b.link_load.get(k, {}))
            if not terms:
                continue
            for idx, opt in enumerate(opts):
                terms[_qname(ADD_LINK, k, idx)] = -chi_l * opt.bandwidth_kbps
            model.add_constraint(f"util_link:{k[0]}-{k[1]}", terms, "<=", 0.0)
    if "utilization-node" not in relax:
        for i in net.forwarding():
            terms = dict(b.node_load.get(i, {}))
            rhs = chi_n * net.nodes[i].bandwidth_kbps - reserved.get(("node", i), 0.0)
            for idx, opt in enumerate(catalog.node_upgrades.get(i, ())):
                terms[_qname(UPGRADE_NODE, i, idx)] = -chi_n * opt.bandwidth_kbps
            if not terms:
                if rhs < -1e-9:
                    m_struct_bad.append(f"utilization-node:{i}")
                continue
            model.add_constraint(f"util_node:{i}", terms, "<=", rhs)

    # resilience floors: post-upgrade rating minus weighted traffic >= mu.
    # For a candidate link the rating exists only once built, so the floor
    # is switched by its build variables.
    if "resilience-link" not in relax:
        for k, rec in sorted(net.links.items()):
            terms = dict(b.link_value.get(k, {}))
            rhs = rec.fra - mu_l
            for idx, opt in enumerate(catalog.link_upgrades.get(k, ())):
                terms[_qname(UPGRADE_LINK, k, idx)] = -opt.fra
            if not terms:
                if rhs < -1e-9:
                    m_struct_bad.append(f"resilience-link:{k[0]}-{k[1]}")
                continue
            model.add_constraint(f"fra_link:{k[0]}-{k[1]}", terms, "<=", rhs)
        for k, opts in sorted(catalog.link_additions.items()):
            terms = dict(b.link_value.get(k, {}))
            for idx, opt in enumerate(opts):
                terms[_qname(ADD_LINK, k, idx)] = mu_l - opt.fra
            model.add_constraint(f"fra_link:{k[0]}-{k[1]}", terms, "<=", 0.0)
    if "resilience-node" not in relax:
        for i in net.forwarding():
            terms = dict(b.node_value.get(i, {}))
            rhs = net.nodes[i].fra - mu_n
            for idx, opt in enumerate(catalog.node_upgrades.get(i, ())):
                terms[_qname(UPGRADE_NODE, i, idx)] = -opt.fra
            if not terms:
                if rhs < -1e-9:
                    m_struct_bad.append(f"resilience-node:{i}")
                continue
            model.add_constraint(f"fra_node:{i}", terms, "<=", rhs)

    if m_struct_bad:
        raise InfeasibleError(
            "request unsatisfiable regardless of catalog: " + ", ".join(m_struct_bad),
            binding=sorted({s.split(":", 1)[0] for s in m_struct_bad}),
        )

    b.objective = dict(costs)
    b.finish("min")
    return SliceProblem(
        model=model, net=net, kind="plan", layers=b.layers, reserved=dict(reserved)
    )


def _pick_top(options: tuple) -> int:
    best = 0
    for i, o in enumerate(options):
        if (o.bandwidth_kbps, o.fra) > (options[best].bandwidth_kbps, options[best].fra):
            best = i
    return best


def _route_purchases(
    case: Case,
    reserved: dict[F.Component, float],
    catalog: UpgradeCatalog,
    request: PlanRequest,
    problem: SliceProblem,
    purchases: dict[tuple[str, object], int | None],
    guide: dict[str, float] | None = None,
):
    """Greedy routing witness under a fixed purchase vector, or None.

    Every component carries two budgets: bandwidth headroom under the
    utilization ceiling and service value under the resilience floor.  For
    one service both shrink by a fixed amount per routed terminal, so the
    growth runs against the per-service minimum of the two, which keeps
    both rows satisfied by construction.  Returns a full assignment only
    when every required terminal routes.  ``guide`` biases the growth
    toward an earlier witness so that a small purchase change reroutes
    only the traffic that actually depended on it.
    """
    net = case.network
    extras = {
        k: candidate_record(k, o) for k, o in catalog.link_additions.items()
    }
    net2 = replace(net, links={**dict(net.links), **extras})
    bw: dict[F.Component, float] = {}
    val: dict[F.Component, float] = {}
    for k, rec in net2.links.items():
        if k in extras:
            idx = purchases.get((ADD_LINK, k))
            opt = None if idx is None else catalog.link_additions[k][idx]
            cap = 0.0 if opt is None else opt.bandwidth_kbps
            bw[("link", k)] = request.chi_link * cap
            val[("link", k)] = 0.0 if opt is None else opt.fra - request.mu_link
            continue
        idx = purchases.get((UPGRADE_LINK, k))
        opt = None if idx is None else catalog.link_upgrades[k][idx]
        cap = rec.bandwidth_kbps + (0.0 if opt is None else opt.bandwidth_kbps)
        fra = rec.fra + (0.0 if opt is None else opt.fra)
        bw[("link", k)] = request.chi_link * cap - reserved.get(("link", k), 0.0)
        val[("link", k)] = fra - request.mu_link
    for i, nrec in net2.nodes.items():
        if nrec.role is NodeRole.FORWARDING:
            idx = purchases.get((UPGRADE_NODE, i))
            opt = None if idx is None else catalog.node_upgrades[i][idx]
            cap = nrec.bandwidth_kbps + (0.0 if opt is None else opt.bandwidth_kbps)
            fra = nrec.fra + (0.0 if opt is None else opt.fra)
            bw[("node", i)] = request.chi_node * cap - reserved.get(("node", i), 0.0)
            val[("node", i)] = fra - request.mu_node
        else:
            bw[("node", i)] = float("inf")
            val[("node", i)] = float("inf")

    assign = {name: 0.0 for name in problem.model.variables}
    order = sorted(problem.layers.items(), key=lambda it: (-it[1].spec.weight, it[0]))
    for svc, layer in order:
        if not layer.roots:
            if layer.gated:
                return None
            continue
        spec = layer.spec
        gamma, d = spec.weight, spec.bandwidth_kbps
        view = {
            comp: min(room, val[comp] * d / gamma) if gamma > 0 else room
            for comp, room in bw.items()
        }
        dist, pred = {layer.roots[0]: 0.0}, {}
        committed = _grow_routes(
            net2, layer, view, sorted(layer.gated), dist, pred, guide
        )
        if len(committed) < len(layer.gated):
            return None
        for r in committed.values():
            comps = [("link", x) for x in r.links] + [
                ("node", i)
                for i in r.nodes
                if net2.nodes[i].role is NodeRole.FORWARDING
            ]
            for comp in comps:
                bw[comp] -= d
                val[comp] -= gamma
        _fill_layer(assign, net2, layer, committed)
    for (kind, target), idx in purchases.items():
        if idx is not None:
            assign[_qname(kind, target, idx)] = 1.0
    return assign


def _plan_warm_start(
    case: Case,
    reserved: dict[F.Component, float],
    catalog: UpgradeCatalog,
    request: PlanRequest,
    problem: SliceProblem,
) -> dict[str, float] | None:
    """Feasible purchase-and-routing assignment by buy-big-then-trim.

    Start from the largest upgrade everywhere (no additions), falling back
    to buying the additions too; then walk the purchases from priciest down
    and swap each for the cheapest alternative that still routes everything.
    """
    comps = catalog.components()

    def cost_of(kind: str, target, options: tuple, idx: int | None) -> float:
        return 0.0 if idx is None else option_cost(catalog, kind, target, options[idx])

    def total(purchases) -> float:
        return sum(
            cost_of(kind, target, options, purchases[(kind, target)])
            for kind, target, options in comps
        )

    def reroute(trial, incumbent):
        # keep the incumbent's tree shape where it still fits, so removing
        # one purchase only moves the traffic that leaned on it; a scratch
        # rebuild second, since the two can disagree on feasibility
        a2 = _route_purchases(
            case, reserved, catalog, request, problem, trial, guide=incumbent
        )
        if a2 is None:
            a2 = _route_purchases(case, reserved, catalog, request, problem, trial)
        return a2

    def trim(purchases, assign, hold_first=frozenset()):
        for rounds in range(6):
            improved = False
            order = sorted(
                comps,
                key=lambda c: -cost_of(c[0], c[1], c[2], purchases[(c[0], c[1])]),
            )
            for kind, target, options in order:
                if rounds == 0 and kind in hold_first:
                    continue
                cur = purchases[(kind, target)]
                if cur is None:
                    continue
                cur_cost = cost_of(kind, target, options, cur)
                alts: list[int | None] = [None] + sorted(
                    range(len(options)),
                    key=lambda i: cost_of(kind, target, options, i),
                )
                for alt in alts:
                    if alt == cur:
                        continue
                    if cost_of(kind, target, options, alt) >= cur_cost - 1e-9:
                        break
                    trial = dict(purchases)
                    trial[(kind, target)] = alt
                    a2 = reroute(trial, assign)
                    if a2 is not None:
                        purchases, assign = trial, a2
                        cur = alt
                        cur_cost = cost_of(kind, target, options, alt)
                        improved = True
                        break
            if not improved:
                break
        return purchases, assign

    # Restart the descent from several initial purchase sets: all upgrades
    # with no additions, with every addition, and with each single addition.
    # Additions only pay off when they beat fattening an existing corridor,
    # and the descent can never introduce one, so each addition subset is a
    # separate basin.  Held additions survive the first trim round; after
    # that they must earn their keep like everything else.
    additions = [t for k, t, _ in comps if k == ADD_LINK]
    starts: list[frozenset] = [frozenset(), frozenset(additions)]
    starts += [frozenset({t}) for t in additions]
    best = None
    for bought_adds in starts:
        purchases: dict[tuple[str, object], int | None] = {
            (kind, target): (
                _pick_top(options)
                if kind != ADD_LINK or target in bought_adds
                else None
            )
            for kind, target, options in comps
        }
        assign = _route_purchases(case, reserved, catalog, request, problem, purchases)
        if assign is None:
            continue
        hold = frozenset({ADD_LINK}) if bought_adds else frozenset()
        purchases, assign = trim(purchases, assign, hold)
        if best is None or total(purchases) < best[0] - 1e-9:
            best = (total(purchases), assign)
    if best is None:
        return None
    assign = best[1]
    if check_feasible(problem.model, assign):
        return None
    return assign


def _plan_improver(
    case: Case,
    reserved: dict[F.Component, float],
    catalog: UpgradeCatalog,
    request: PlanRequest,
    problem: SliceProblem,
):
    """Incumbent callback: cover the LP's fractional purchases, then route.

    Each component's relaxed capacity and rating mass is covered by the
    cheapest single option at least that large (the largest option if none
    is); the purchase vector then gets the greedy routing witness.  Repeat
    vectors are skipped.
    """
    comps = catalog.components()
    seen: set = set()

    def improve(point: dict[str, float]) -> dict[str, float] | None:
        purchases: dict[tuple[str, object], int | None] = {}
        key = []
        for kind, target, options in comps:
            mass_bw = sum(
                point.get(_qname(kind, target, i), 0.0) * o.bandwidth_kbps
                for i, o in enumerate(options)
            )
            mass_fra = sum(
                point.get(_qname(kind, target, i), 0.0) * o.fra
                for i, o in enumerate(options)
            )
            choice: int | None = None
            if mass_bw > 1e-6 or mass_fra > 1e-6:
                covering = [
                    i
                    for i, o in enumerate(options)
                    if o.bandwidth_kbps >= mass_bw - 1e-6 and o.fra >= mass_fra - 1e-6
                ]
                if covering:
                    choice = min(
                        covering,
                        key=lambda i: option_cost(catalog, kind, target, options[i]),
                    )
                else:
                    choice = _pick_top(options)
            purchases[(kind, target)] = choice
            key.append(choice)
        tkey = tuple(key)
        if tkey in seen:
            return None
        seen.add(tkey)
        return _route_purchases(case, reserved, catalog, request, problem, purchases)

    return improve


def _validate_request(case: Case, request: PlanRequest) -> None:
    if not (0.0 < request.chi_link <= 1.0 and 0.0 < request.chi_node <= 1.0):
        raise NetworkFormatError("utilization ceilings must lie in (0, 1]")
    subscribed = {(s.terminal, s.service) for s in case.subscriptions}
    for pair in request.required:
        if pair not in subscribed:
            raise NetworkFormatError(
                f"required terminal {pair[0]} has no subscription to {pair[1]!r}"
            )
        if case.services[pair[1]].is_auth:
            raise NetworkFormatError("required pairs must name data services")


def plan(
    case: Case,
    auth_slice: SliceSolution,
    catalog: UpgradeCatalog,
    request: PlanRequest,
    *,
    gap_tol: float | None = None,
    time_limit: float | None = None,
    seed: int = 0,
) -> UpgradePlan:
    """Choose the cheapest catalog subset meeting the request.

    ``auth_slice`` is the authentication slice already computed on the base
    network; its bandwidth is held reserved, and its value weight is zero so
    it never enters the resilience floors.  On infeasibility the error names
    the constraint families that bind (found by re-solving with one family
    relaxed at a time).
    """
    _validate_request(case, request)
    validate_catalog(catalog, case.network)
    reserved = reserved_loads(auth_slice)
    problem = _build_plan_problem(case, reserved, catalog, request)
    kwargs: dict = {"var_order_seed": seed}
    if gap_tol is not None:
        kwargs["gap_tol"] = gap_tol
    if time_limit is not None:
        kwargs["time_limit"] = time_limit
    ws = _plan_warm_start(case, reserved, catalog, request, problem)
    if ws is not None:
        kwargs["warm_start"] = ws
    kwargs["improver"] = _plan_improver(case, reserved, catalog, request, problem)
    solution = milp_solve(problem.model, **kwargs)
    if solution.status == "infeasible":
        binding = _diagnose(case, reserved, catalog, request, seed=seed)
        raise InfeasibleError(
            "no catalog combination satisfies the request"
            + (f" (binding: {', '.join(binding)})" if binding else ""),
            binding=binding,
        )
    if solution.status not in ("optimal", "gap_limit"):
        raise SolverLimitError(f"planner stopped with status {solution.status!r}")

    chosen: list[PlanChoice] = []
    for kind, target, options in catalog.components():
        for idx, opt in enumerate(options):
            if solution.assignment.get(_qname(kind, target, idx), 0.0) > 0.5:
                chosen.append(
                    PlanChoice(
                        operation=kind,
                        target=target,
                        option_index=idx,
                        bandwidth_kbps=opt.bandwidth_kbps,
                        fra=opt.fra,
                        cost=option_cost(catalog, kind, target, opt),
                    )
                )
    upgraded = _upgraded_net(case.network, catalog, tuple(chosen))
    witness_problem = SliceProblem(
        model=problem.model,
        net=upgraded,
        kind="plan",
        layers=problem.layers,
        reserved=problem.reserved,
    )
    witness = extract(witness_problem, solution)
    return UpgradePlan(
        chosen=tuple(chosen),
        total_cost=sum(c.cost for c in chosen),
        witness=witness,
        status=solution.status,
        gap=solution.gap,
        nodes_explored=solution.nodes_explored,
        wall_time=solution.wall_time,
    )


def _diagnose(
    case: Case,
    reserved: dict[F.Component, float],
    catalog: UpgradeCatalog,
    request: PlanRequest,
    *,
    seed: int,
) -> list[str]:
    """Minimal set of constraint families whose removal restores feasibility."""

    def feasible(relax: frozenset[str]) -> bool:
        try:
            p = _build_plan_problem(case, reserved, catalog, request, relax=relax)
        except InfeasibleError:
            return False
        sol = milp_solve(p.model, gap_tol=1e9, var_order_seed=seed)
        return sol.status != "infeasible"

    for fam in _FAMILIES:
        if feasible(frozenset([fam])):
            return [fam]
    keep = set(_FAMILIES)
    if not feasible(frozenset(keep)):
        return ["structure"]
    for fam in _FAMILIES:
        if feasible(frozenset(keep - {fam})):
            keep.discard(fam)
    return sorted(keep)


# -- independent checking ---------------------------------------------------


def verify_plan(
    case: Case,
    plan_result: UpgradePlan,
    auth_slice: SliceSolution,
    request: PlanRequest,
    catalog: UpgradeCatalog,
    tol: float = 1e-6,
) -> list[str]:
    """Re-check a plan from scratch; empty list means it holds up.

    Applies the plan to the base network, audits the witness on the result,
    and tests every request constraint directly from the witness routes.
    """
    out: list[str] = []
    seen: dict[tuple[str, object], int] = {}
    for c in plan_result.chosen:
        key = (("link" if c.operation != UPGRADE_NODE else "node"), c.target)
        seen[key] = seen.get(key, 0) + 1
    for (kindcat, target), n in seen.items():
        if n > 1:
            label = target if kindcat == "node" else f"{target[0]}-{target[1]}"
            out.append(f"multiple options on {kindcat} {label}")

    total = sum(c.cost for c in plan_result.chosen)
    if total != plan_result.total_cost:
        out.append(
            f"total_cost {plan_result.total_cost} != sum of option costs {total}"
        )

    for c in plan_result.chosen:
        table = {
            UPGRADE_LINK: catalog.link_upgrades,
            ADD_LINK: catalog.link_additions,
            UPGRADE_NODE: catalog.node_upgrades,
        }.get(c.operation)
        if table is None or c.target not in table:
            out.append(f"plan names unknown component {c.operation} {c.target_label}")
            return out
        opts = table[c.target]
        if not (0 <= c.option_index < len(opts)):
            out.append(
                f"plan names option {c.option_index} of {c.target_label}, "
                f"which has {len(opts)}"
            )
            return out
        opt = opts[c.option_index]
        if (opt.bandwidth_kbps, opt.fra) != (c.bandwidth_kbps, c.fra):
            out.append(f"plan misstates option values for {c.target_label}")
        if option_cost(catalog, c.operation, c.target, opt) != c.cost:
            out.append(f"plan misstates the cost of {c.target_label}")

    upgraded = _upgraded_net(case.network, catalog, plan_result.chosen)
    witness = plan_result.witness
    reserved = reserved_loads(auth_slice)
    data_specs = {
        sid: s for sid, s in case.services.items() if not s.is_auth
    }
    gate = frozenset(p for p in request.required)
    out.extend(
        witness.verify(upgraded, data_specs, gate=gate, reserved=reserved, tol=tol)
    )

    for j, svc in sorted(request.required):
        mem = witness.services.get(svc)
        if mem is None or j not in mem.routes:
            out.append(f"required terminal {j} not served by {svc}")

    built = {c.target for c in plan_result.chosen if c.operation == ADD_LINK}
    for svc, mem in witness.services.items():
        for k in mem.links:
            if k not in case.network.links and k not in built:
                out.append(f"witness uses unbuilt link {k[0]}-{k[1]} in {svc}")

    # ceilings and floors on the upgraded network
    traffic_link: dict[LinkKey, float] = {}
    traffic_node: dict[NodeId, float] = {}
    for svc in sorted(witness.services):
        w = data_specs[svc].weight if svc in data_specs else 0.0
        for r in witness.services[svc].routes.values():
            for k in r.links:
                traffic_link[k] = traffic_link.get(k, 0.0) + w
            for i in r.nodes:
                if upgraded.nodes[i].role is NodeRole.FORWARDING:
                    traffic_node[i] = traffic_node.get(i, 0.0) + w
    for k, rec in sorted(upgraded.links.items()):
        used = witness.link_load.get(k, 0.0) + reserved.get(("link", k), 0.0)
        if used > request.chi_link * rec.bandwidth_kbps + tol:
            out.append(
                f"link {k[0]}-{k[1]} utilization {used:g} exceeds "
                f"{request.chi_link:g} of {rec.bandwidth_kbps:g}"
            )
        if traffic_link.get(k, 0.0) > rec.fra - request.mu_link + tol:
            out.append(
                f"link {k[0]}-{k[1]} resilience margin below {request.mu_link:g}"
            )
    for i in upgraded.forwarding():
        rec = upgraded.nodes[i]
        used = witness.node_load.get(i, 0.0) + reserved.get(("node", i), 0.0)
        if used > request.chi_node * rec.bandwidth_kbps + tol:
            out.append(
                f"node {i} utilization {used:g} exceeds "
                f"{request.chi_node:g} of {rec.bandwidth_kbps:g}"
            )
        if traffic_node.get(i, 0.0) > rec.fra - request.mu_node + tol:
            out.append(f"node {i} resilience margin below {request.mu_node:g}")
    return out
