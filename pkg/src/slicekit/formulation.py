"""Shared constraint-model construction for slice optimization.

Every optimization entry point (the two slicing stages, single-failure
re-evaluation, upgrade planning) builds on the same per-service structure:

* membership variables for nodes and links, limited to working components
  whose security level meets the service's requirement;
* a tree/forest cardinality constraint (links = nodes - roots) plus a
  single-commodity flow that pins every member to a root, so each slice is
  radial: one tree per root, no stray cycles;
* per-terminal routing variables tracing each served terminal's data to the
  operation center (or, for the authentication service, to some
  authentication server), which drive bandwidth loads and path delay.

Terminals never relay foreign traffic: routing variables for terminal j are
only created on links incident to j itself or to no terminal at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import SlicekitError
from .milp import BINARY, CONTINUOUS, Model
from .model import (
    LinkKey,
    LinkRecord,
    Network,
    NodeRole,
    ServiceSpec,
    eligibility,
)

Component = tuple[str, object]  # ("link", LinkKey) | ("node", NodeId)


def vn_node(svc: str, i: int) -> str:
    return f"node:{svc}:{i}"


def vn_link(svc: str, k: LinkKey) -> str:
    return f"link:{svc}:{k[0]}-{k[1]}"


def vn_rlink(svc: str, j: int, k: LinkKey) -> str:
    return f"route_link:{svc}:{j}:{k[0]}-{k[1]}"


def vn_rnode(svc: str, j: int, i: int) -> str:
    return f"route_node:{svc}:{j}:{i}"


def vn_flow(svc: str, k: LinkKey) -> str:
    return f"flow:{svc}:{k[0]}-{k[1]}"


def vn_supply(svc: str, s: int) -> str:
    return f"supply:{svc}:{s}"


def vn_anchor(svc: str, j: int, s: int) -> str:
    return f"anchor:{svc}:{j}:{s}"


@dataclass
class ServiceLayer:
    """Bookkeeping for one service inside a built model."""

    spec: ServiceSpec
    roots: tuple[int, ...]
    gated: tuple[int, ...]          # terminals allowed into this slice
    member_nodes: tuple[int, ...]   # nodes holding a membership variable
    member_links: tuple[LinkKey, ...]
    forest: bool                    # True: one tree per root (auth); False: single tree at the OC


@dataclass
class SliceProblem:
    """A built model plus everything needed to interpret its solution."""

    model: Model
    net: Network
    kind: str  # "stage1" | "stage2" | "joint" | "plan"
    layers: dict[str, ServiceLayer]
    reserved: dict[Component, float] = field(default_factory=dict)
    plan_ctx: object | None = None


class Builder:
    """Accumulates per-service slice structure into one model.

    Callers add the service layers they need, then emit the shared capacity
    rows (and, for planning, utilization/resilience rows) once at the end.
    """

    def __init__(self, net: Network, name: str):
        self.net = net
        self.model = Model(name)
        self.layers: dict[str, ServiceLayer] = {}
        self.objective: dict[str, float] = {}
        # per-component accumulated bandwidth terms: var name -> kbps coefficient
        self.link_load: dict[LinkKey, dict[str, float]] = {}
        self.node_load: dict[int, dict[str, float]] = {}
        # per-component accumulated service-value terms (for resilience rows)
        self.link_value: dict[LinkKey, dict[str, float]] = {}
        self.node_value: dict[int, dict[str, float]] = {}
        self.big_m = float(len(net.nodes))
        self._incident: dict[int, list[LinkRecord]] = {i: [] for i in net.nodes}
        for rec in net.links.values():
            self._incident[rec.a].append(rec)
            self._incident[rec.b].append(rec)

    # -- structure ---------------------------------------------------------

    def add_service(
        self,
        spec: ServiceSpec,
        gated_terminals: list[int],
        *,
        gate_by: str | None = None,
        link_exists: dict[LinkKey, list[str]] | None = None,
        forced_terminals: frozenset[int] = frozenset(),
        extra_links: dict[LinkKey, LinkRecord] | None = None,
    ) -> ServiceLayer | None:
        """Create one service layer.

        ``gate_by`` couples terminal membership to another (authentication)
        layer.  ``link_exists`` maps optional links to the decision variables
        that build them.  ``forced_terminals`` must be served (their
        membership is fixed to 1).  Returns None when the layer is degenerate
        (no usable root), in which case the slice is empty by construction.
        """
        svc = spec.id
        if svc in self.layers:
            raise SlicekitError(f"service {svc!r} added twice")
        net = self.net
        node_ok, link_ok = eligibility(net, spec)
        if spec.is_auth:
            roots = tuple(s for s in net.auth_servers() if node_ok[s])
            forest = True
        else:
            oc = net.operation_center
            roots = (oc,) if node_ok[oc] else ()
            forest = False
        if not roots:
            layer = ServiceLayer(spec, (), (), (), (), forest)
            self.layers[svc] = layer
            return None

        gated = tuple(sorted(j for j in gated_terminals if node_ok[j]))
        if not forced_terminals.issubset(gated):
            missing = sorted(forced_terminals - set(gated))
            raise SlicekitError(
                f"service {svc!r}: required terminals {missing} are not eligible/authorized"
            )

        member_nodes = sorted(
            set(gated)
            | {i for i in net.nodes if node_ok[i] and net.nodes[i].role is not NodeRole.TERMINAL}
        )
        member_set = set(member_nodes)
        links = dict(net.links)
        if extra_links:
            links.update(extra_links)
        member_links = sorted(
            k
            for k, rec in links.items()
            if (link_ok.get(k, self._optional_link_ok(rec, spec)))
            and k[0] in member_set
            and k[1] in member_set
        )

        m = self.model
        for i in member_nodes:
            lo = 1.0 if i in forced_terminals else 0.0
            m.add_variable(vn_node(svc, i), BINARY, lower=lo)
        for k in member_links:
            m.add_variable(vn_link(svc, k), BINARY)
            m.add_variable(vn_flow(svc, k), CONTINUOUS, lower=-self.big_m, upper=self.big_m)
        for s in roots:
            m.add_variable(vn_supply(svc, s), CONTINUOUS, lower=0.0, upper=self.big_m)

        # optional links only exist once built
        if link_exists:
            for k, qvars in link_exists.items():
                if k in set(member_links):
                    m.add_constraint(
                        f"built:{svc}:{k[0]}-{k[1]}",
                        {vn_link(svc, k): 1.0, **{q: -1.0 for q in qvars}},
                        "<=",
                        0.0,
                    )

        # radial cardinality: links = nodes - roots-in-slice (forest) or nodes - 1 (tree)
        count: dict[str, float] = {vn_link(svc, k): 1.0 for k in member_links}
        for i in member_nodes:
            count[vn_node(svc, i)] = count.get(vn_node(svc, i), 0.0) - 1.0
        if forest:
            for s in roots:
                count[vn_node(svc, s)] += 1.0
            m.add_constraint(f"radial:{svc}", count, "==", 0.0)
        else:
            m.add_constraint(f"radial:{svc}", count, "==", -1.0)

        # a member link requires both endpoints to be members
        for k in member_links:
            for i in k:
                m.add_constraint(
                    f"endpoints:{svc}:{k[0]}-{k[1]}:{i}",
                    {vn_link(svc, k): 1.0, vn_node(svc, i): -1.0},
                    "<=",
                    0.0,
                )

        # single-commodity flow pins every member to a root: each member sinks
        # one unit, roots carry free supply, flow moves only on member links
        incident_member: dict[int, list[LinkKey]] = {i: [] for i in member_nodes}
        for k in member_links:
            incident_member[k[0]].append(k)
            incident_member[k[1]].append(k)
        for k in member_links:
            m.add_constraint(
                f"flow_cap_hi:{svc}:{k[0]}-{k[1]}",
                {vn_flow(svc, k): 1.0, vn_link(svc, k): -self.big_m},
                "<=",
                0.0,
            )
            m.add_constraint(
                f"flow_cap_lo:{svc}:{k[0]}-{k[1]}",
                {vn_flow(svc, k): -1.0, vn_link(svc, k): -self.big_m},
                "<=",
                0.0,
            )
        for i in member_nodes:
            row: dict[str, float] = {}
            for k in incident_member[i]:
                row[vn_flow(svc, k)] = 1.0 if i == k[0] else -1.0
            row[vn_node(svc, i)] = 1.0
            if i in roots:
                row[vn_supply(svc, i)] = -1.0
                # roots supply only while in the slice
                m.add_constraint(
                    f"supply_gate:{svc}:{i}",
                    {vn_supply(svc, i): 1.0, vn_node(svc, i): -self.big_m},
                    "<=",
                    0.0,
                )
            m.add_constraint(f"conserve:{svc}:{i}", row, "==", 0.0)

        # membership gating against the authentication layer
        if gate_by is not None:
            for j in gated:
                upstream = vn_node(gate_by, j)
                if upstream in m.variables:
                    m.add_constraint(
                        f"gate:{svc}:{j}",
                        {vn_node(svc, j): 1.0, upstream: -1.0},
                        "<=",
                        0.0,
                    )
                else:  # terminal cannot authenticate at all
                    m.add_constraint(f"gate:{svc}:{j}", {vn_node(svc, j): 1.0}, "<=", 0.0)

        # per-terminal routing
        root_set = set(roots)
        terminal_set = {i for i in net.nodes if net.nodes[i].role is NodeRole.TERMINAL}
        for j in gated:
            allowed = [
                k
                for k in member_links
                if j in k or (k[0] not in terminal_set and k[1] not in terminal_set)
            ]
            # in tree mode the root terminates paths and needs no relay variable
            rnodes = [
                i
                for i in member_nodes
                if i not in terminal_set and (forest or i != roots[0])
            ]
            for k in allowed:
                m.add_variable(vn_rlink(svc, j, k), BINARY)
                m.add_constraint(
                    f"route_on_slice:{svc}:{j}:{k[0]}-{k[1]}",
                    {vn_rlink(svc, j, k): 1.0, vn_link(svc, k): -1.0},
                    "<=",
                    0.0,
                )
            for i in rnodes:
                m.add_variable(vn_rnode(svc, j, i), BINARY)
                m.add_constraint(
                    f"route_in_slice:{svc}:{j}:{i}",
                    {vn_rnode(svc, j, i): 1.0, vn_node(svc, i): -1.0},
                    "<=",
                    0.0,
                )
            if forest:
                for s in roots:
                    m.add_variable(vn_anchor(svc, j, s), BINARY)
                m.add_constraint(
                    f"one_anchor:{svc}:{j}",
                    {
                        **{vn_anchor(svc, j, s): 1.0 for s in roots},
                        vn_node(svc, j): -1.0,
                    },
                    "==",
                    0.0,
                )
            allowed_at: dict[int, list[LinkKey]] = {}
            for k in allowed:
                allowed_at.setdefault(k[0], []).append(k)
                allowed_at.setdefault(k[1], []).append(k)
            # the terminal's own degree equals its membership
            m.add_constraint(
                f"route_source:{svc}:{j}",
                {
                    **{vn_rlink(svc, j, k): 1.0 for k in allowed_at.get(j, [])},
                    vn_node(svc, j): -1.0,
                },
                "==",
                0.0,
            )
            if not forest:
                # data terminates at the operation center
                row = {vn_rlink(svc, j, k): 1.0 for k in allowed_at.get(roots[0], [])}
                row[vn_node(svc, j)] = row.get(vn_node(svc, j), 0.0) - 1.0
                m.add_constraint(f"route_sink:{svc}:{j}", row, "==", 0.0)
            for i in rnodes:
                row = {vn_rlink(svc, j, k): 1.0 for k in allowed_at.get(i, [])}
                if forest and i in root_set:
                    # path may end at this server (degree 1) or stay away
                    row[vn_rnode(svc, j, i)] = -2.0
                    row[vn_anchor(svc, j, i)] = 1.0
                    m.add_constraint(f"route_anchor:{svc}:{j}:{i}", row, "==", 0.0)
                else:
                    # pure relay: in one link, out another
                    row[vn_rnode(svc, j, i)] = -2.0
                    m.add_constraint(f"route_relay:{svc}:{j}:{i}", row, "==", 0.0)

            # bandwidth and value accumulation; path delay cap
            c = spec.bandwidth_kbps
            w = spec.weight
            delay_row: dict[str, float] = {}
            for k in allowed:
                if c:
                    self.link_load.setdefault(k, {})[vn_rlink(svc, j, k)] = c
                if w:
                    self.link_value.setdefault(k, {})[vn_rlink(svc, j, k)] = w
                ld = links[k].delay_ms
                if ld:
                    delay_row[vn_rlink(svc, j, k)] = ld
            for i in rnodes:
                if net.nodes[i].role is not NodeRole.FORWARDING:
                    continue  # the operation center is not bandwidth- or delay-counted
                if c:
                    self.node_load.setdefault(i, {})[vn_rnode(svc, j, i)] = c
                if w:
                    self.node_value.setdefault(i, {})[vn_rnode(svc, j, i)] = w
                nd = net.nodes[i].delay_ms
                if nd:
                    delay_row[vn_rnode(svc, j, i)] = nd
            if spec.delay_cap_ms is not None and delay_row:
                m.add_constraint(f"delay:{svc}:{j}", delay_row, "<=", spec.delay_cap_ms)

        layer = ServiceLayer(
            spec, roots, gated, tuple(member_nodes), tuple(member_links), forest
        )
        self.layers[svc] = layer
        return layer

    def _optional_link_ok(self, rec: LinkRecord, spec: ServiceSpec) -> bool:
        need = None if spec.is_auth else spec.security
        return rec.working and (need is None or rec.security >= need)

    # -- objective helpers -------------------------------------------------

    def add_coverage_objective(self, svc: str, weight: float) -> None:
        layer = self.layers[svc]
        for j in layer.gated:
            name = vn_node(svc, j)
            self.objective[name] = self.objective.get(name, 0.0) + weight

    def add_link_penalty(self, svc: str, weight: float) -> None:
        layer = self.layers[svc]
        for k in layer.member_links:
            name = vn_link(svc, k)
            self.objective[name] = self.objective.get(name, 0.0) - weight

    # -- shared rows -------------------------------------------------------

    def emit_capacity_rows(self, reserved: dict[Component, float] | None = None) -> None:
        """Raw capacity caps: total routed bandwidth within each component's capacity."""
        reserved = reserved or {}
        for k in sorted(self.link_load):
            avail = self.net.links[k].bandwidth_kbps - reserved.get(("link", k), 0.0)
            self.model.add_constraint(
                f"cap_link:{k[0]}-{k[1]}", self.link_load[k], "<=", max(0.0, avail)
            )
        for i in sorted(self.node_load):
            avail = self.net.nodes[i].bandwidth_kbps - reserved.get(("node", i), 0.0)
            self.model.add_constraint(f"cap_node:{i}", self.node_load[i], "<=", max(0.0, avail))

    def finish(self, sense: str = "max") -> Model:
        self.model.set_objective(sense, self.objective)
        self.model.validate()
        return self.model
