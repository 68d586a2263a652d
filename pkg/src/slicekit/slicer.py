"""Two-stage network slicing.

Stage 1 carves the authentication slice: a forest of trees, each rooted at an
authentication server, reaching as many terminals as possible (ties broken
toward fewer links).  Terminals reached by that slice can authenticate; the
credential registry and the subscription list then decide which services each
one is admitted to.

Stage 2 carves one radial slice per data service over the remaining capacity,
maximizing total weighted served terminals.  Authentication traffic keeps its
stage-1 routes, so its bandwidth is deducted before stage 2 runs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

from . import formulation as F
from .errors import InfeasibleError, InvariantViolation
from .formulation import Builder, SliceProblem
from .milp import Solution, check_feasible, solve
from .model import (
    Case,
    CredentialRegistry,
    LinkKey,
    Network,
    NodeId,
    NodeRole,
    ServiceSpec,
    eligibility,
)


@dataclass(frozen=True)
class AuthStates:
    """Outcome of authentication and admission control.

    ``authenticated`` holds terminals reached by the authentication slice;
    ``grants`` holds (terminal, service) pairs cleared for admission: the
    terminal authenticated, holds a valid credential for the service, and
    subscribes to it.
    """

    authenticated: frozenset[NodeId]
    grants: frozenset[tuple[NodeId, str]]

    def allows(self, terminal: NodeId, service: str) -> bool:
        return (terminal, service) in self.grants


@dataclass(frozen=True)
class Route:
    """One terminal's path to its slice root.

    ``links`` runs from the terminal to the anchor.  ``nodes`` lists the
    relay nodes in path order; for authentication routes it ends with the
    anchoring server (which processes the request and so counts toward node
    bandwidth and delay), for data routes the operation center terminus is
    not included.
    """

    terminal: NodeId
    anchor: NodeId
    links: tuple[LinkKey, ...]
    nodes: tuple[NodeId, ...]
    delay_ms: float


@dataclass(frozen=True)
class SliceMembership:
    service: str
    nodes: frozenset[NodeId]
    links: frozenset[LinkKey]
    routes: dict[NodeId, Route] = field(compare=False)

    def served(self) -> list[NodeId]:
        return sorted(self.routes)


@dataclass
class SliceSolution:
    """Extracted slices plus recomputed loads and objective.

    ``objective`` is always recomputed from the extracted memberships, never
    copied from the solver: the number of served terminals for a pure
    authentication solve, the weighted served value otherwise.
    """

    services: dict[str, SliceMembership]
    objective: float
    objective_kind: str  # "coverage" | "value"
    status: str
    gap: float
    nodes_explored: int
    wall_time: float
    link_load: dict[LinkKey, float] = field(default_factory=dict)
    node_load: dict[NodeId, float] = field(default_factory=dict)

    # -- auditing ----------------------------------------------------------

    def verify(
        self,
        net: Network,
        specs: dict[str, ServiceSpec],
        *,
        gate: frozenset[tuple[NodeId, str]] | None = None,
        reserved: dict[F.Component, float] | None = None,
        tol: float = 1e-6,
    ) -> list[str]:
        """Full invariant audit; returns a list of violation descriptions.

        Checks slice validity (working, security-eligible, radial), route
        integrity (simple, on-slice, terminating at the right root), gating,
        capacity with reserved headroom, delay caps, and that stored loads
        and objective match values recomputed from the routes.
        """
        bad: list[str] = []
        auth_layer = next(
            (m for s, m in self.services.items() if s in specs and specs[s].is_auth), None
        )
        for svc in sorted(self.services):
            mem = self.services[svc]
            spec = specs.get(svc)
            if spec is None:
                bad.append(f"{svc}: no such service")
                continue
            node_ok, link_ok = eligibility(net, spec)
            for i in sorted(mem.nodes):
                if i not in net.nodes:
                    bad.append(f"{svc}: member node {i} not in network")
                elif not node_ok[i]:
                    bad.append(f"{svc}: node {i} failed or below security need")
            for k in sorted(mem.links):
                if k not in net.links:
                    bad.append(f"{svc}: member link {k} not in network")
                    continue
                if not link_ok[k]:
                    bad.append(f"{svc}: link {k} failed or below security need")
                if k[0] not in mem.nodes or k[1] not in mem.nodes:
                    bad.append(f"{svc}: link {k} has a non-member endpoint")
            bad.extend(self._check_radial(net, spec, mem))
            bad.extend(self._check_routes(net, spec, mem))
            # gating: served terminals must be admitted, and in the
            # authentication slice when one is part of this solution
            if not spec.is_auth:
                for j in mem.served():
                    if gate is not None and (j, svc) not in gate:
                        bad.append(f"{svc}: terminal {j} served without admission")
                    if auth_layer is not None and j not in auth_layer.routes:
                        bad.append(f"{svc}: terminal {j} served but not authenticated")
        link_load, node_load = _loads(self.services, specs, net)
        if link_load != self.link_load or node_load != self.node_load:
            bad.append("stored loads do not match loads recomputed from routes")
        reserved = reserved or {}
        for k in sorted(link_load):
            cap = net.links[k].bandwidth_kbps if k in net.links else 0.0
            if link_load[k] + reserved.get(("link", k), 0.0) > cap + tol:
                bad.append(f"link {k} overloaded: {link_load[k]} of {cap} kbps")
        for i in sorted(node_load):
            cap = net.nodes[i].bandwidth_kbps if i in net.nodes else 0.0
            if node_load[i] + reserved.get(("node", i), 0.0) > cap + tol:
                bad.append(f"node {i} overloaded: {node_load[i]} of {cap} kbps")
        want = _objective_value(self.services, specs, self.objective_kind)
        if want != self.objective:
            bad.append(f"stored objective {self.objective} != recomputed {want}")
        return bad

    def _check_radial(self, net: Network, spec: ServiceSpec, mem: SliceMembership) -> list[str]:
        bad: list[str] = []
        svc = spec.id
        if not mem.nodes:
            if mem.links or mem.routes:
                bad.append(f"{svc}: links or routes without member nodes")
            return bad
        parent = {i: i for i in mem.nodes}

        def find(i: NodeId) -> NodeId:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in mem.links:
            if a not in parent or b not in parent:
                continue
            ra, rb = find(a), find(b)
            if ra == rb:
                bad.append(f"{svc}: membership contains a cycle through {a}-{b}")
            else:
                parent[ra] = rb
        components = {find(i) for i in mem.nodes}
        if len(mem.links) != len(mem.nodes) - len(components):
            bad.append(f"{svc}: link/node count not radial")
        if spec.is_auth:
            servers = {i for i in mem.nodes if net.nodes[i].auth_server}
            per_comp: dict[NodeId, int] = {c: 0 for c in components}
            for s in servers:
                per_comp[find(s)] += 1
            for c, cnt in sorted(per_comp.items()):
                if cnt != 1:
                    bad.append(f"{svc}: slice component holds {cnt} authentication servers")
        else:
            oc = net.operation_center
            if oc not in mem.nodes:
                bad.append(f"{svc}: slice does not contain the operation center")
            elif len(components) != 1:
                bad.append(f"{svc}: slice is disconnected")
        return bad

    def _check_routes(self, net: Network, spec: ServiceSpec, mem: SliceMembership) -> list[str]:
        bad: list[str] = []
        svc = spec.id
        members = {
            j
            for j in mem.nodes
            if j in net.nodes and net.nodes[j].role is NodeRole.TERMINAL
        }
        if members != set(mem.routes):
            bad.append(f"{svc}: member terminals and routed terminals differ")
        for j in sorted(mem.routes):
            r = mem.routes[j]
            if not r.links:
                bad.append(f"{svc}: terminal {j} has an empty route")
                continue
            if any(k not in mem.links for k in r.links):
                bad.append(f"{svc}: route of {j} leaves the slice")
            cur = j
            seen = {j}
            ok = True
            for k in r.links:
                if cur not in k:
                    bad.append(f"{svc}: route of {j} is not contiguous")
                    ok = False
                    break
                cur = k[1] if cur == k[0] else k[0]
                if cur in seen:
                    bad.append(f"{svc}: route of {j} revisits node {cur}")
                    ok = False
                    break
                seen.add(cur)
            if not ok:
                continue
            if cur != r.anchor:
                bad.append(f"{svc}: route of {j} ends at {cur}, not its anchor {r.anchor}")
            if spec.is_auth:
                if r.anchor not in net.nodes or not net.nodes[r.anchor].auth_server:
                    bad.append(f"{svc}: route of {j} anchored off an authentication server")
            elif r.anchor != net.operation_center:
                bad.append(f"{svc}: route of {j} does not reach the operation center")
            mid = seen - {j, r.anchor}
            if spec.is_auth:
                mid = seen - {j}
            if any(net.nodes[i].role is NodeRole.TERMINAL for i in mid if i in net.nodes):
                bad.append(f"{svc}: route of {j} relays through a terminal")
            if set(r.nodes) != mid:
                bad.append(f"{svc}: route node list of {j} does not match its links")
            delay = _route_delay(net, r)
            if delay != r.delay_ms:
                bad.append(f"{svc}: stored delay of {j} differs from recomputation")
            if spec.delay_cap_ms is not None and delay > spec.delay_cap_ms + 1e-9:
                bad.append(f"{svc}: route of {j} exceeds the delay cap")
        return bad

    # -- artifacts ---------------------------------------------------------

    def to_json_dict(self) -> dict:
        out: dict = {
            "objective": self.objective,
            "objective_kind": self.objective_kind,
            "status": self.status,
            "gap": self.gap,
            "nodes_explored": self.nodes_explored,
            "services": {},
            "link_load_kbps": {f"{a}-{b}": v for (a, b), v in sorted(self.link_load.items())},
            "node_load_kbps": {str(i): v for i, v in sorted(self.node_load.items())},
        }
        for svc in sorted(self.services):
            mem = self.services[svc]
            out["services"][svc] = {
                "nodes": sorted(mem.nodes),
                "links": [f"{a}-{b}" for a, b in sorted(mem.links)],
                "routes": {
                    str(j): {
                        "anchor": r.anchor,
                        "links": [f"{a}-{b}" for a, b in r.links],
                        "nodes": list(r.nodes),
                        "delay_ms": r.delay_ms,
                    }
                    for j, r in sorted(mem.routes.items())
                },
            }
        return out

    def utilization_rows(self, net: Network) -> list[tuple[str, str, float, float, float]]:
        """(kind, id, load, capacity, fraction) rows for every component with load."""
        rows: list[tuple[str, str, float, float, float]] = []
        for k in sorted(self.link_load):
            cap = net.links[k].bandwidth_kbps
            rows.append(
                ("link", f"{k[0]}-{k[1]}", self.link_load[k], cap, self.link_load[k] / cap)
            )
        for i in sorted(self.node_load):
            cap = net.nodes[i].bandwidth_kbps
            rows.append(("node", str(i), self.node_load[i], cap, self.node_load[i] / cap))
        return rows


@dataclass
class SliceOutcome:
    """Result of the full pipeline: both stages plus the merged view."""

    solution: SliceSolution  # all slices together, valued by stage 2
    states: AuthStates
    stage1: SliceSolution
    stage2: SliceSolution


# ---------------------------------------------------------------------------
# shared recomputation helpers


def _route_delay(net: Network, r: Route) -> float:
    total = 0.0
    for k in r.links:
        total += net.links[k].delay_ms
    for i in r.nodes:
        if i in net.nodes and net.nodes[i].role is NodeRole.FORWARDING:
            total += net.nodes[i].delay_ms
    return total


def _loads(
    services: dict[str, SliceMembership],
    specs: dict[str, ServiceSpec],
    net: Network,
) -> tuple[dict[LinkKey, float], dict[NodeId, float]]:
    """Recompute per-component bandwidth from routes, in a fixed order.

    Node bandwidth is metered on forwarding nodes only; the operation center
    and the terminals themselves are not capacity-constrained.
    """
    link_load: dict[LinkKey, float] = {}
    node_load: dict[NodeId, float] = {}
    for svc in sorted(services):
        spec = specs[svc]
        c = spec.bandwidth_kbps
        if not c:
            continue
        mem = services[svc]
        for j in sorted(mem.routes):
            r = mem.routes[j]
            for k in r.links:
                link_load[k] = link_load.get(k, 0.0) + c
            for i in r.nodes:
                if i in net.nodes and net.nodes[i].role is NodeRole.FORWARDING:
                    node_load[i] = node_load.get(i, 0.0) + c
    return link_load, node_load


def _objective_value(
    services: dict[str, SliceMembership], specs: dict[str, ServiceSpec], kind: str
) -> float:
    if kind == "coverage":
        return float(sum(len(services[s].routes) for s in sorted(services)))
    total = 0.0
    for svc in sorted(services):
        if specs[svc].is_auth:
            continue
        total += specs[svc].weight * len(services[svc].routes)
    return total


# ---------------------------------------------------------------------------
# model construction


def build_stage1(
    net: Network, auth_spec: ServiceSpec, *, excluded_terminals: frozenset[NodeId] = frozenset()
) -> SliceProblem:
    """Authentication-slice model: cover as many terminals as possible.

    ``excluded_terminals`` (e.g. quarantined devices) get no variables and so
    can never join the slice.
    """
    b = Builder(net, "stage1")
    gated = [j for j in net.terminals() if j not in excluded_terminals]
    layer = b.add_service(auth_spec, gated)
    if layer is not None:
        b.add_coverage_objective(auth_spec.id, 1.0)
        # secondary pressure toward fewer links, too small to trade coverage
        b.add_link_penalty(auth_spec.id, 1.0 / (2 * len(net.links) + 2))
        b.emit_capacity_rows()
    return SliceProblem(b.finish("max"), net, "stage1", b.layers)


def build_stage2(
    net: Network,
    services: list[ServiceSpec],
    states: AuthStates,
    *,
    reserved: dict[F.Component, float] | None = None,
) -> SliceProblem:
    """Per-service slice model over capacity left after authentication."""
    b = Builder(net, "stage2")
    reserved = dict(reserved or {})
    terminals = net.terminals()
    for spec in sorted(services, key=lambda s: s.id):
        gated = [j for j in terminals if states.allows(j, spec.id)]
        if b.add_service(spec, gated) is not None:
            b.add_coverage_objective(spec.id, spec.weight)
    b.emit_capacity_rows(reserved)
    return SliceProblem(b.finish("max"), net, "stage2", b.layers, reserved)


def build_joint(
    net: Network,
    auth_spec: ServiceSpec,
    services: list[ServiceSpec],
    gate: frozenset[tuple[NodeId, str]],
    *,
    excluded_terminals: frozenset[NodeId] = frozenset(),
) -> SliceProblem:
    """Authentication and data slices in one model.

    Used for what-if evaluation under failures: admission (``gate``) stays as
    granted on the intact network, but which terminals actually authenticate
    is re-decided against the damaged topology, and a terminal can only be
    served where it authenticates.  The objective counts data services only.
    """
    b = Builder(net, "joint")
    auth_gated = [j for j in net.terminals() if j not in excluded_terminals]
    b.add_service(auth_spec, auth_gated)
    for spec in sorted(services, key=lambda s: s.id):
        gated = [j for j in auth_gated if (j, spec.id) in gate]
        # gating holds even when no authentication root survives: the gate
        # row then pins the terminal out of the slice
        if b.add_service(spec, gated, gate_by=auth_spec.id) is not None:
            b.add_coverage_objective(spec.id, spec.weight)
    b.emit_capacity_rows()
    return SliceProblem(b.finish("max"), net, "joint", b.layers)


# ---------------------------------------------------------------------------
# solution extraction


def extract(problem: SliceProblem, solution: Solution) -> SliceSolution:
    """Interpret a solved model as slices and routes, then audit it.

    Membership is canonical: the union of the extracted routes plus the
    root(s), so co-optimal solver solutions differing only in unused dangling
    branches extract identically.
    """
    if solution.status == "infeasible":
        raise InfeasibleError(f"{problem.kind} model is infeasible")
    a = solution.assignment
    services: dict[str, SliceMembership] = {}
    specs: dict[str, ServiceSpec] = {}
    for svc, layer in problem.layers.items():
        specs[svc] = layer.spec
        if not layer.roots:
            services[svc] = SliceMembership(svc, frozenset(), frozenset(), {})
            continue
        routes: dict[NodeId, Route] = {}
        for j in layer.gated:
            if a.get(F.vn_node(svc, j), 0.0) < 0.5:
                continue
            routes[j] = _walk_route(problem, svc, layer, j, a)
        nodes: set[NodeId] = set()
        links: set[LinkKey] = set()
        for r in routes.values():
            nodes.add(r.terminal)
            nodes.update(r.nodes)
            nodes.add(r.anchor)
            links.update(r.links)
        if not layer.forest:
            nodes.add(layer.roots[0])  # a data slice always holds the operation center
        services[svc] = SliceMembership(svc, frozenset(nodes), frozenset(links), routes)
    kind = "coverage" if all(s.is_auth for s in specs.values()) else "value"
    link_load, node_load = _loads(services, specs, problem.net)
    out = SliceSolution(
        services=services,
        objective=_objective_value(services, specs, kind),
        objective_kind=kind,
        status=solution.status,
        gap=solution.gap,
        nodes_explored=solution.nodes_explored,
        wall_time=solution.wall_time,
        link_load=link_load,
        node_load=node_load,
    )
    gate = frozenset(
        (j, svc) for svc, layer in problem.layers.items() for j in layer.gated
    )
    bad = out.verify(problem.net, specs, gate=gate, reserved=problem.reserved)
    if bad:
        raise InvariantViolation(
            f"extracted {problem.kind} solution fails audit: " + "; ".join(bad[:5])
        )
    return out


def _walk_route(
    problem: SliceProblem, svc: str, layer, j: NodeId, a: dict[str, float]
) -> Route:
    net = problem.net
    terminal_set = {i for i in net.nodes if net.nodes[i].role is NodeRole.TERMINAL}
    allowed = [
        k
        for k in layer.member_links
        if j in k or (k[0] not in terminal_set and k[1] not in terminal_set)
    ]
    on = [k for k in allowed if a.get(F.vn_rlink(svc, j, k), 0.0) > 0.5]
    adj: dict[NodeId, list[LinkKey]] = {}
    for k in on:
        adj.setdefault(k[0], []).append(k)
        adj.setdefault(k[1], []).append(k)
    path: list[LinkKey] = []
    seen = [j]
    cur: NodeId = j
    prev: LinkKey | None = None
    while True:
        nxt = [k for k in adj.get(cur, []) if k != prev]
        if not nxt:
            break
        if len(nxt) > 1:
            raise InvariantViolation(f"{svc}: route of {j} branches at {cur}")
        k = nxt[0]
        path.append(k)
        cur = k[1] if cur == k[0] else k[0]
        if cur in seen:
            raise InvariantViolation(f"{svc}: route of {j} cycles at {cur}")
        seen.append(cur)
        prev = k
    if len(path) != len(on):
        raise InvariantViolation(f"{svc}: route of {j} has disconnected pieces")
    if not path:
        raise InvariantViolation(f"{svc}: terminal {j} is served but routeless")
    rnodes = seen[1:] if layer.forest else seen[1:-1]
    r = Route(
        terminal=j,
        anchor=cur,
        links=tuple(path),
        nodes=tuple(rnodes),
        delay_ms=_route_delay(net, Route(j, cur, tuple(path), tuple(rnodes), 0.0)),
    )
    return r


def normalize_auth(sol: SliceSolution, net: Network, auth_svc: str) -> SliceSolution:
    """Add every working authentication server to the slice as its own root.

    Servers the optimizer left out (nothing to serve through them) still run
    the service, so the published slice lists them; each joins as an isolated
    single-node tree, which keeps the slice radial.
    """
    mem = sol.services.get(auth_svc)
    if mem is None:
        return sol
    extra = {
        s
        for s in net.auth_servers()
        if net.nodes[s].working and s not in mem.nodes
    }
    if not extra:
        return sol
    out = dict(sol.services)
    out[auth_svc] = replace(mem, nodes=frozenset(mem.nodes | extra))
    return replace(sol, services=out)


# ---------------------------------------------------------------------------
# admission


def authenticate(
    stage1: SliceSolution, case: Case, registry: CredentialRegistry
) -> AuthStates:
    """Derive admission state from the authentication slice.

    A terminal authenticates when the slice reaches it.  It is granted a
    service when it authenticated, the registry carries a valid credential
    for that service, and it subscribes to the service.
    """
    auth_svc = case.auth_service().id
    mem = stage1.services.get(auth_svc)
    reached = frozenset(mem.routes) if mem is not None else frozenset()
    grants = frozenset(
        (s.terminal, s.service)
        for s in case.subscriptions
        if s.terminal in reached and registry.authorized(s.terminal, s.service)
    )
    return AuthStates(authenticated=reached, grants=grants)


def reserved_loads(stage1: SliceSolution) -> dict[F.Component, float]:
    """Stage-1 bandwidth, as headroom to deduct before stage 2."""
    out: dict[F.Component, float] = {}
    for k, v in stage1.link_load.items():
        out[("link", k)] = v
    for i, v in stage1.node_load.items():
        out[("node", i)] = v
    return out


# ---------------------------------------------------------------------------
# warm starts


def warm_start(
    problem: SliceProblem, guide: dict[str, float] | None = None
) -> dict[str, float] | None:
    """Greedy feasible assignment for a slice model, or None.

    Routes each service as a capacity-aware incrementally grown tree and
    skips any terminal that no longer fits, so the result is radial and
    respects every budget.  With ``guide`` (an LP point), routing runs in
    two rounds: first only the terminals the relaxation serves, walking the
    relaxation's own route variables where they are decisive, then whatever
    else still fits.  The result is checked against the model before use.
    """
    if problem.kind == "plan":
        return None
    net = problem.net
    model = problem.model
    assign = {name: 0.0 for name in model.variables}
    remaining: dict[F.Component, float] = {}
    for k, rec in net.links.items():
        remaining[("link", k)] = rec.bandwidth_kbps - problem.reserved.get(("link", k), 0.0)
    for i, rec in net.nodes.items():
        remaining[("node", i)] = rec.bandwidth_kbps - problem.reserved.get(("node", i), 0.0)

    def order(item: tuple[str, object]) -> tuple:
        svc, layer = item
        return (not layer.spec.is_auth, -layer.spec.weight, svc)

    auth_reached: set[NodeId] | None = None
    data_layers = []
    for svc, layer in sorted(problem.layers.items(), key=order):
        if not layer.roots:
            continue
        spec = layer.spec
        if not spec.is_auth:
            data_layers.append((svc, layer))
            continue
        # link count carries a penalty here, so grow a sparing forest
        dist, pred = _steiner_to_roots(net, layer)
        committed: dict[NodeId, Route] = {}
        for j in layer.gated:
            choice = _best_attach(net, layer, j, dist)
            if choice is None:
                continue
            total, attach, v = choice
            if spec.delay_cap_ms is not None and total > spec.delay_cap_ms:
                continue
            links = [attach]
            rnodes: list[NodeId] = []
            cur = v
            while True:
                if cur in net.nodes and net.nodes[cur].role is not NodeRole.TERMINAL:
                    if layer.forest or cur != layer.roots[0]:
                        rnodes.append(cur)
                step = pred.get(cur)
                if step is None:
                    break
                links.append(step[0])
                cur = step[1]
            c = spec.bandwidth_kbps
            need = [("link", k) for k in links] + [
                ("node", i) for i in rnodes if net.nodes[i].role is NodeRole.FORWARDING
            ]
            if any(remaining[comp] < c - 1e-9 for comp in need):
                continue
            for comp in need:
                remaining[comp] -= c
            committed[j] = Route(j, cur, tuple(links), tuple(rnodes), total)
        auth_reached = set(committed)
        _fill_layer(assign, net, layer, committed)

    # data services in two rounds: the guide's picks get first claim on
    # capacity service by service, leftovers only fill what remains
    grown: dict[str, dict[NodeId, Route]] = {}
    trees: dict[str, tuple[dict, dict]] = {}
    later: list = []
    for svc, layer in data_layers:
        gated = [
            j for j in sorted(layer.gated) if auth_reached is None or j in auth_reached
        ]
        if guide is None:
            chosen, rest = gated, []
        else:
            mem = {j: round(guide.get(F.vn_node(svc, j), 0.0), 6) for j in gated}
            chosen = sorted((j for j in gated if mem[j] >= 0.5), key=lambda j: (-mem[j], j))
            rest = sorted((j for j in gated if mem[j] < 0.5), key=lambda j: (-mem[j], j))
        dist, pred = {layer.roots[0]: 0.0}, {}
        grown[svc] = _grow_routes(net, layer, remaining, chosen, dist, pred, guide)
        trees[svc] = (dist, pred)
        later.append((svc, layer, rest))
    for svc, layer, rest in later:
        if rest:
            dist, pred = trees[svc]
            grown[svc].update(_grow_routes(net, layer, remaining, rest, dist, pred, guide))
    for svc, layer in data_layers:
        _fill_layer(assign, net, layer, grown[svc])
    if check_feasible(model, assign):
        return None
    return assign


def lp_improver(problem: SliceProblem):
    """Incumbent callback for the solver built on the guided greedy.

    Each call re-runs the greedy router with the LP point as a guide.  The
    outcome depends on the point only through memberships and route values,
    so points that round to an already-tried picture are skipped.
    """
    seen: set = set()
    have = set(problem.model.variables)
    names: list[str] = []
    for svc, layer in sorted(problem.layers.items()):
        if layer.spec.is_auth:
            continue
        for j in sorted(layer.gated):
            names.append(F.vn_node(svc, j))
            for k in sorted(layer.member_links):
                n = F.vn_rlink(svc, j, k)
                if n in have:
                    names.append(n)

    def improve(point: dict[str, float]) -> dict[str, float] | None:
        key = tuple(int(round(point.get(n, 0.0) * 4)) for n in names)
        if key in seen:
            return None
        seen.add(key)
        return warm_start(problem, guide=point)

    return improve


def _grow_routes(
    net: Network,
    layer,
    remaining: dict[F.Component, float],
    order: list[NodeId],
    dist: dict[NodeId, float],
    pred: dict[NodeId, tuple[LinkKey, NodeId]],
    guide: dict[str, float] | None = None,
) -> dict[NodeId, Route]:
    """Capacity-aware tree growth for one data service.

    Terminals commit one at a time in ``order``, grafting onto the tree
    state in ``dist``/``pred`` (mutated; seed with ``{root: 0.0}, {}``).
    With a ``guide`` point a terminal first tries the path its own route
    variables trace; failing that it picks the delay-best junction whose
    whole chain to the root still fits the demand, capacity-richer chains
    winning delay ties.  Skips a terminal when nothing fits, and updates
    ``remaining`` for each commit.
    """
    spec = layer.spec
    demand = spec.bandwidth_kbps
    root = layer.roots[0]
    terminal_set = {i for i in net.nodes if net.nodes[i].role is NodeRole.TERMINAL}
    adj: dict[NodeId, list[LinkKey]] = {}
    for k in layer.member_links:
        if k[0] in terminal_set or k[1] in terminal_set:
            continue
        adj.setdefault(k[0], []).append(k)
        adj.setdefault(k[1], []).append(k)
    committed: dict[NodeId, Route] = {}
    bias: dict[LinkKey, float] | None = None
    if guide is not None:
        # stretch links the guide's service tree leaves out, so the search
        # prefers the relaxation's shape and strays only under pressure
        bias = {}
        for k in layer.member_links:
            inside = guide.get(F.vn_link(spec.id, k), 0.0) >= 0.5
            bias[k] = 1.0 if inside else 3.0

    def chain(v: NodeId) -> tuple[list[LinkKey], list[NodeId]]:
        links: list[LinkKey] = []
        rnodes: list[NodeId] = []
        cur = v
        while True:
            if cur != root and net.nodes[cur].role is not NodeRole.TERMINAL:
                rnodes.append(cur)
            step = pred.get(cur)
            if step is None:
                break
            links.append(step[0])
            cur = step[1]
        return links, rnodes

    def finish(att: LinkKey, new_links: list, new_nodes: list, junction: NodeId):
        old_links, old_nodes = chain(junction)
        comps = (
            [("link", att)]
            + [("link", x) for x in new_links + old_links]
            + [
                ("node", i)
                for i in new_nodes + old_nodes
                if net.nodes[i].role is NodeRole.FORWARDING
            ]
        )
        return old_links, old_nodes, comps

    def decode(j: NodeId) -> tuple | None:
        # walk the guide's strongest route variables from the terminal in
        best = (0.25, None)
        for k in sorted(layer.member_links):
            if j not in k:
                continue
            v = k[1] if j == k[0] else k[0]
            if v in terminal_set:
                continue
            val = guide.get(F.vn_rlink(spec.id, j, k), 0.0)
            if val > best[0] + 1e-9:
                best = (val, (k, v))
        if best[1] is None:
            return None
        att, cur = best[1]
        total = net.links[att].delay_ms
        new_links: list[LinkKey] = []
        new_nodes: list[NodeId] = []
        parents: dict[NodeId, NodeId] = {}
        visited = {j}
        while cur not in dist:
            visited.add(cur)
            nxt = (0.2, None)
            for k in sorted(adj.get(cur, [])):
                v = k[1] if cur == k[0] else k[0]
                if v in visited or v in terminal_set:
                    continue
                val = guide.get(F.vn_rlink(spec.id, j, k), 0.0)
                if val > nxt[0] + 1e-9:
                    nxt = (val, (k, v))
            if nxt[1] is None:
                return None
            k, v = nxt[1]
            if net.nodes[cur].role is NodeRole.FORWARDING:
                total += net.nodes[cur].delay_ms
            total += net.links[k].delay_ms
            new_links.append(k)
            new_nodes.append(cur)
            parents[cur] = v
            cur = v
        total += dist[cur]
        if spec.delay_cap_ms is not None and total > spec.delay_cap_ms + 1e-9:
            return None
        old_links, old_nodes, comps = finish(att, new_links, new_nodes, cur)
        if min(remaining[c] for c in comps) < demand - 1e-9:
            return None
        return total, att, new_links, new_nodes, parents, old_links, old_nodes, comps

    def search(j: NodeId) -> tuple | None:
        # paths from the current tree outward, over links that still fit;
        # labels order by delay first, then by path bottleneck capacity, so
        # equally fast junctions with more headroom win
        gdist: dict[NodeId, float] = dict(dist)
        tdist: dict[NodeId, float] = dict(dist)
        gneck: dict[NodeId, float] = {}
        for u in dist:
            cl, cn = chain(u)
            comps = [("link", x) for x in cl] + [
                ("node", i) for i in cn if net.nodes[i].role is NodeRole.FORWARDING
            ]
            gneck[u] = min((remaining[c] for c in comps), default=float("inf"))
        gpred: dict[NodeId, tuple[LinkKey, NodeId]] = {}
        heap = [(d, -gneck[u], u) for u, d in dist.items()]
        heapq.heapify(heap)
        while heap:
            d, negb, u = heapq.heappop(heap)
            if (d, negb) > (gdist.get(u, float("inf")), -gneck.get(u, 0.0)):
                continue
            for k in sorted(adj.get(u, [])):
                v = k[1] if u == k[0] else k[0]
                if v in dist or remaining[("link", k)] < demand - 1e-9:
                    continue
                if (
                    net.nodes[v].role is NodeRole.FORWARDING
                    and remaining[("node", v)] < demand - 1e-9
                ):
                    continue
                step = net.links[k].delay_ms
                cost = step if bias is None else step * bias[k]
                neck = min(-negb, remaining[("link", k)])
                if net.nodes[v].role is NodeRole.FORWARDING:
                    step += net.nodes[v].delay_ms
                    cost += net.nodes[v].delay_ms
                    neck = min(neck, remaining[("node", v)])
                nd = d + cost
                if (nd, -neck) < (gdist.get(v, float("inf")), -gneck.get(v, 0.0)):
                    gdist[v] = nd
                    tdist[v] = tdist[u] + step
                    gneck[v] = neck
                    gpred[v] = (k, u)
                    heapq.heappush(heap, (nd, -neck, v))
        best: tuple | None = None
        for k in sorted(layer.member_links):
            if j not in k:
                continue
            v = k[1] if j == k[0] else k[0]
            if v in terminal_set or v not in gdist:
                continue
            if remaining[("link", k)] < demand - 1e-9:
                continue
            total = net.links[k].delay_ms + tdist[v]
            rank = net.links[k].delay_ms + gdist[v]
            if spec.delay_cap_ms is not None and total > spec.delay_cap_ms + 1e-9:
                continue
            new_links: list[LinkKey] = []
            new_nodes: list[NodeId] = []
            cur = v
            while cur not in dist:
                nk, parent = gpred[cur]
                new_links.append(nk)
                new_nodes.append(cur)
                cur = parent
            old_links, old_nodes, comps = finish(k, new_links, new_nodes, cur)
            bottleneck = min(remaining[c] for c in comps)
            if bottleneck < demand - 1e-9:
                continue
            cand = (
                rank, -bottleneck, v, k, total, new_links, new_nodes, old_links, old_nodes, comps,
            )
            if best is None or cand[:4] < best[:4]:
                best = cand
        if best is None:
            return None
        _, _, v, k, total, new_links, new_nodes, old_links, old_nodes, comps = best
        parents = {node: gpred[node][1] for node in new_nodes}
        return total, k, new_links, new_nodes, parents, old_links, old_nodes, comps

    for j in order:
        cand = decode(j) if guide is not None else None
        if cand is None:
            cand = search(j)
        if cand is None:
            continue
        total, att, new_links, new_nodes, parents, old_links, old_nodes, comps = cand
        # graft the new segment onto the tree, innermost node first
        for node, nk in reversed(list(zip(new_nodes, new_links))):
            parent = parents[node]
            step = net.links[nk].delay_ms
            if net.nodes[node].role is NodeRole.FORWARDING:
                step += net.nodes[node].delay_ms
            dist[node] = dist[parent] + step
            pred[node] = (nk, parent)
        for comp in comps:
            remaining[comp] -= demand
        rnodes = [i for i in new_nodes + old_nodes if i != root]
        links = [att] + new_links + old_links
        committed[j] = Route(j, root, tuple(links), tuple(rnodes), total)
    return committed


def _shortest_to_roots(net: Network, layer) -> tuple[dict, dict]:
    """Delay-shortest paths from the layer's roots over non-terminal members.

    Distance to a node counts the link delays plus the forwarding delay of
    every node on the way including the node itself; relay through the
    operation center is free.  Predecessors of one run always form a tree.
    """
    terminal_set = {i for i in net.nodes if net.nodes[i].role is NodeRole.TERMINAL}
    adj: dict[NodeId, list[LinkKey]] = {}
    for k in layer.member_links:
        if k[0] in terminal_set or k[1] in terminal_set:
            continue
        adj.setdefault(k[0], []).append(k)
        adj.setdefault(k[1], []).append(k)
    dist: dict[NodeId, float] = {}
    pred: dict[NodeId, tuple[LinkKey, NodeId]] = {}
    heap: list[tuple[float, NodeId]] = []
    for s in layer.roots:
        base = (
            net.nodes[s].delay_ms
            if layer.forest and net.nodes[s].role is NodeRole.FORWARDING
            else 0.0
        )
        dist[s] = base
        heapq.heappush(heap, (base, s))
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, float("inf")):
            continue
        for k in sorted(adj.get(u, [])):
            v = k[1] if u == k[0] else k[0]
            step = net.links[k].delay_ms
            if net.nodes[v].role is NodeRole.FORWARDING:
                step += net.nodes[v].delay_ms
            nd = d + step
            if nd < dist.get(v, float("inf")) - 1e-12:
                dist[v] = nd
                pred[v] = (k, u)
                heapq.heappush(heap, (nd, v))
    for s in layer.roots:
        pred.pop(s, None)
    return dist, pred


def _steiner_to_roots(net: Network, layer) -> tuple[dict, dict]:
    """Link-sparing forest over the non-terminal members.

    Repeatedly connects the hop-nearest still-needed access switch to what is
    already built, so shared trunks get reused instead of opening parallel
    paths.  Returns (dist, pred) in the shape of _shortest_to_roots, limited
    to the grown forest.
    """
    terminal_set = {i for i in net.nodes if net.nodes[i].role is NodeRole.TERMINAL}
    adj: dict[NodeId, list[LinkKey]] = {}
    for k in layer.member_links:
        if k[0] in terminal_set or k[1] in terminal_set:
            continue
        adj.setdefault(k[0], []).append(k)
        adj.setdefault(k[1], []).append(k)
    switch_options: list[set[NodeId]] = []
    for j in layer.gated:
        opts = {
            (k[1] if j == k[0] else k[0])
            for k in layer.member_links
            if j in k and (k[1] if j == k[0] else k[0]) not in terminal_set
        }
        if opts:
            switch_options.append(opts)
    in_forest: set[NodeId] = set(layer.roots)
    dist: dict[NodeId, float] = {}
    pred: dict[NodeId, tuple[LinkKey, NodeId]] = {}
    for s in layer.roots:
        dist[s] = (
            net.nodes[s].delay_ms
            if layer.forest and net.nodes[s].role is NodeRole.FORWARDING
            else 0.0
        )
    pending = [opts for opts in switch_options if not (opts & in_forest)]
    while pending:
        bdist = {s: 0 for s in in_forest}
        bpred: dict[NodeId, tuple[LinkKey, NodeId]] = {}
        frontier = sorted(in_forest)
        while frontier:
            nxt = []
            for u in frontier:
                for k in sorted(adj.get(u, [])):
                    v = k[1] if u == k[0] else k[0]
                    if v in bdist:
                        continue
                    bdist[v] = bdist[u] + 1
                    bpred[v] = (k, u)
                    nxt.append(v)
            frontier = sorted(nxt)
        best: tuple[int, NodeId] | None = None
        for opts in pending:
            for s in sorted(opts):
                if s in bdist and (best is None or (bdist[s], s) < best):
                    best = (bdist[s], s)
        if best is None:
            break
        chain = []
        cur = best[1]
        while cur not in in_forest:
            k, parent = bpred[cur]
            chain.append((cur, k, parent))
            cur = parent
        for node, k, parent in reversed(chain):
            step = net.links[k].delay_ms
            if net.nodes[node].role is NodeRole.FORWARDING:
                step += net.nodes[node].delay_ms
            dist[node] = dist[parent] + step
            pred[node] = (k, parent)
            in_forest.add(node)
        pending = [opts for opts in pending if not (opts & in_forest)]
    return dist, pred


def _best_attach(net: Network, layer, j: NodeId, dist: dict) -> tuple | None:
    terminal_set = {i for i in net.nodes if net.nodes[i].role is NodeRole.TERMINAL}
    best: tuple | None = None
    for k in layer.member_links:
        if j not in k:
            continue
        v = k[1] if j == k[0] else k[0]
        if v in terminal_set or v not in dist:
            continue
        total = net.links[k].delay_ms + dist[v]
        if best is None or (total, v) < (best[0], best[2]):
            best = (total, k, v)
    return best


def _fill_layer(
    assign: dict[str, float], net: Network, layer, committed: dict[NodeId, Route]
) -> None:
    """Write one layer's membership, route, flow, and supply values."""
    svc = layer.spec.id
    nodes: set[NodeId] = set()
    links: set[LinkKey] = set()
    for j, r in committed.items():
        nodes.add(j)
        nodes.update(r.nodes)
        nodes.add(r.anchor)
        links.update(r.links)
        for k in r.links:
            assign[F.vn_rlink(svc, j, k)] = 1.0
        for i in r.nodes:
            assign[F.vn_rnode(svc, j, i)] = 1.0
        if layer.forest:
            assign[F.vn_anchor(svc, j, r.anchor)] = 1.0
    if not layer.forest:
        nodes.add(layer.roots[0])
    else:
        nodes.update(r.anchor for r in committed.values())
    for i in nodes:
        assign[F.vn_node(svc, i)] = 1.0
    for k in links:
        assign[F.vn_link(svc, k)] = 1.0
    # one commodity per tree: every member sinks a unit fed by its root
    adj: dict[NodeId, list[LinkKey]] = {i: [] for i in nodes}
    for k in links:
        adj[k[0]].append(k)
        adj[k[1]].append(k)
    roots = layer.roots if layer.forest else (layer.roots[0],)
    visited: set[NodeId] = set()
    for root in roots:
        if root not in adj or root in visited:
            continue
        order: list[NodeId] = [root]
        parent: dict[NodeId, tuple[LinkKey, NodeId]] = {}
        visited.add(root)
        q = 0
        while q < len(order):
            u = order[q]
            q += 1
            for k in adj[u]:
                v = k[1] if u == k[0] else k[0]
                if v in visited:
                    continue
                visited.add(v)
                parent[v] = (k, u)
                order.append(v)
        subtree = {i: 1 for i in order}
        for i in reversed(order):
            if i in parent:
                subtree[parent[i][1]] += subtree[i]
        for i in order:
            if i in parent:
                k = parent[i][0]
                assign[F.vn_flow(svc, k)] = float(subtree[i]) if i == k[1] else -float(subtree[i])
        assign[F.vn_supply(svc, root)] = float(subtree[root])


# ---------------------------------------------------------------------------
# the pipeline


def solve_problem(
    problem: SliceProblem,
    *,
    gap_tol: float | None = None,
    time_limit: float | None = None,
    seed: int = 0,
) -> tuple[SliceSolution, Solution]:
    """Solve a slice model with a greedy warm start and extract the result."""
    ws = warm_start(problem)
    kwargs: dict = {"var_order_seed": seed, "warm_start": ws}
    if problem.kind != "plan":
        kwargs["improver"] = lp_improver(problem)
    if gap_tol is not None:
        kwargs["gap_tol"] = gap_tol
    if time_limit is not None:
        kwargs["time_limit"] = time_limit
    raw = solve(problem.model, **kwargs)
    return extract(problem, raw), raw


def slice_case(
    case: Case,
    registry: CredentialRegistry,
    *,
    gap_tol: float | None = None,
    time_limit: float | None = None,
    seed: int = 0,
    excluded_terminals: frozenset[NodeId] = frozenset(),
) -> SliceOutcome:
    """Run the full two-stage pipeline on one case.

    Returns the merged slice set (authentication plus every data service),
    the admission states, and the per-stage solutions.
    """
    net = case.network
    auth_spec = case.auth_service()
    p1 = build_stage1(net, auth_spec, excluded_terminals=excluded_terminals)
    s1, _ = solve_problem(p1, gap_tol=gap_tol, time_limit=time_limit, seed=seed)
    s1 = normalize_auth(s1, net, auth_spec.id)
    states = authenticate(s1, case, registry)
    p2 = build_stage2(net, case.data_services(), states, reserved=reserved_loads(s1))
    s2, _ = solve_problem(p2, gap_tol=gap_tol, time_limit=time_limit, seed=seed)
    merged_services = {**s1.services, **s2.services}
    specs = dict(case.services)
    link_load, node_load = _loads(merged_services, specs, net)
    merged = SliceSolution(
        services=merged_services,
        objective=_objective_value(merged_services, specs, "value"),
        objective_kind="value",
        status=s2.status if s1.status == "optimal" else s1.status,
        gap=max(s1.gap, s2.gap),
        nodes_explored=s1.nodes_explored + s2.nodes_explored,
        wall_time=s1.wall_time + s2.wall_time,
        link_load=link_load,
        node_load=node_load,
    )
    bad = merged.verify(net, specs, gate=states.grants)
    if bad:
        raise InvariantViolation("merged slicing result fails audit: " + "; ".join(bad[:5]))
    return SliceOutcome(solution=merged, states=states, stage1=s1, stage2=s2)
