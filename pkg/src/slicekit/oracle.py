"""Exhaustive reference solvers for small instances.

Everything here re-derives results by brute force straight from the data
model, with no code shared with the optimizing implementations: slice
optima by enumerating link subsets and keeping the valid radial ones, plan
optima by enumerating catalog combinations in cost order.  Sizes are hard
guarded; these exist to cross-check the real solvers, not to scale.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

from .errors import OracleSizeError
from .model import (
    LinkKey,
    LinkRecord,
    Network,
    NodeId,
    NodeRole,
    ServiceSpec,
    eligibility,
)

MAX_LINKS = 12
MAX_PLAN_LINKS = 14
MAX_COMBOS = 20_000
MAX_PRODUCT = 5_000_000

Component = tuple[str, object]


@dataclass(frozen=True)
class OracleResult:
    """Optimum of a slicing problem found by enumeration.

    ``optima`` lists every distinct per-service served-terminal tuple that
    attains the objective; ``served`` is the first of them in sorted order.
    ``links_used`` is meaningful for the authentication stage only, where
    link count is the tie-breaker.
    """

    objective: float
    served: tuple[tuple[str, tuple[NodeId, ...]], ...]
    optima: tuple[tuple[tuple[str, tuple[NodeId, ...]], ...], ...]
    links_used: int | None = None

    @property
    def n_optimal(self) -> int:
        return len(self.optima)


@dataclass(frozen=True)
class PlanOracleResult:
    feasible: bool
    cost: float
    chosen: tuple[tuple[str, object, int], ...]  # (kind, target, option index)
    n_optimal: int


@dataclass
class _Candidate:
    """One valid radial slice for one service: a link subset plus the
    routing facts derived from it."""

    served: frozenset[NodeId]
    n_links: int
    loads: dict[Component, float]
    traffic: dict[Component, float]  # service-value weight per crossed component
    uses: frozenset[LinkKey]         # non-base links this slice needs


class _UnionFind:
    def __init__(self) -> None:
        self.parent: dict[NodeId, NodeId] = {}

    def find(self, i: NodeId) -> NodeId:
        self.parent.setdefault(i, i)
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: NodeId, b: NodeId) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def _eligible_links(
    net: Network, spec: ServiceSpec, gated: frozenset[NodeId]
) -> list[LinkKey]:
    node_ok, link_ok = eligibility(net, spec)
    out = []
    for k in sorted(net.links):
        if not link_ok[k] or not (node_ok[k[0]] and node_ok[k[1]]):
            continue
        usable = True
        for i in k:
            if net.nodes[i].role is NodeRole.TERMINAL and i not in gated:
                usable = False
        if usable:
            out.append(k)
    return out


def _candidates(
    net: Network,
    spec: ServiceSpec,
    gated: frozenset[NodeId],
    *,
    base_links: frozenset[LinkKey] | None = None,
    require_exact: frozenset[NodeId] | None = None,
    max_links: int = MAX_LINKS,
) -> list[_Candidate]:
    """All valid slices for one service, by link-subset enumeration.

    A subset is valid when it is a forest whose every tree holds exactly one
    root (the operation center for data services, an authentication server
    for the authentication service), every member terminal is admitted and
    has a simple root path avoiding other terminals, and every routed path
    meets the delay cap.  Capacity is deliberately not checked here; it
    couples services and is enforced by the joint search.
    """
    elig = _eligible_links(net, spec, gated)
    if len(elig) > max_links:
        raise OracleSizeError(
            f"{len(elig)} eligible links for service {spec.id!r}; enumeration capped at {max_links}"
        )
    node_ok, _ = eligibility(net, spec)
    if spec.is_auth:
        roots = {s for s in net.auth_servers() if node_ok[s]}
    else:
        oc = net.operation_center
        roots = {oc} if node_ok[oc] else set()
    base = frozenset(net.links) if base_links is None else base_links
    out: list[_Candidate] = []
    if roots:
        for bits in range(1 << len(elig)):
            subset = [elig[i] for i in range(len(elig)) if bits >> i & 1]
            cand = _validate_subset(net, spec, subset, roots, base)
            if cand is None:
                continue
            if require_exact is not None and cand.served != require_exact:
                continue
            out.append(cand)
    elif require_exact is None or not require_exact:
        out.append(_Candidate(frozenset(), 0, {}, {}, frozenset()))
    return out


def _validate_subset(
    net: Network,
    spec: ServiceSpec,
    subset: list[LinkKey],
    roots: set[NodeId],
    base: frozenset[LinkKey],
) -> _Candidate | None:
    uf = _UnionFind()
    nodes: set[NodeId] = set()
    for k in subset:
        if not uf.union(k[0], k[1]):
            return None  # cycle
        nodes.update(k)
    if not subset:
        return _Candidate(frozenset(), 0, {}, {}, frozenset())
    comp_root: dict[NodeId, NodeId] = {}
    for i in nodes:
        c = uf.find(i)
        if i in roots:
            if c in comp_root:
                return None  # two roots in one tree
            comp_root[c] = i
    if spec.is_auth:
        if set(comp_root) != {uf.find(i) for i in nodes}:
            return None  # some tree has no authentication server
    else:
        oc = net.operation_center
        if oc not in nodes or len({uf.find(i) for i in nodes}) != 1:
            return None  # data slices are one tree holding the operation center
    adjacency: dict[NodeId, list[LinkKey]] = {}
    for k in subset:
        adjacency.setdefault(k[0], []).append(k)
        adjacency.setdefault(k[1], []).append(k)
    terminals = sorted(
        i for i in nodes if net.nodes[i].role is NodeRole.TERMINAL
    )
    loads: dict[Component, float] = {}
    traffic: dict[Component, float] = {}
    for j in terminals:
        path = _tree_path(net, adjacency, j, roots if spec.is_auth else {net.operation_center})
        if path is None:
            return None
        links, mids, anchor = path
        route_nodes = mids + ([anchor] if spec.is_auth else [])
        delay = _route_delay_for(net, links, route_nodes)
        if spec.delay_cap_ms is not None and delay > spec.delay_cap_ms + 1e-9:
            return None
        for k in links:
            loads[("link", k)] = loads.get(("link", k), 0.0) + spec.bandwidth_kbps
            if spec.weight:
                traffic[("link", k)] = traffic.get(("link", k), 0.0) + spec.weight
        for i in route_nodes:
            if net.nodes[i].role is not NodeRole.FORWARDING:
                continue
            loads[("node", i)] = loads.get(("node", i), 0.0) + spec.bandwidth_kbps
            if spec.weight:
                traffic[("node", i)] = traffic.get(("node", i), 0.0) + spec.weight
    return _Candidate(
        served=frozenset(terminals),
        n_links=len(subset),
        loads=loads,
        traffic=traffic,
        uses=frozenset(k for k in subset if k not in base),
    )


def _tree_path(
    net: Network,
    adjacency: dict[NodeId, list[LinkKey]],
    j: NodeId,
    targets: set[NodeId],
) -> tuple[list[LinkKey], list[NodeId], NodeId] | None:
    """Unique path from terminal j to a target in its tree, or None if the
    path is blocked by another terminal or its node count includes delay
    problems upstream.  Returns (links, intermediate nodes, anchor)."""
    prev: dict[NodeId, tuple[LinkKey, NodeId]] = {}
    stack = [j]
    seen = {j}
    found: NodeId | None = None
    while stack:
        u = stack.pop()
        if u in targets and u != j:
            found = u
            break
        for k in adjacency.get(u, []):
            v = k[1] if u == k[0] else k[0]
            if v in seen:
                continue
            seen.add(v)
            prev[v] = (k, u)
            stack.append(v)
    if found is None:
        return None
    links: list[LinkKey] = []
    mids: list[NodeId] = []
    cur = found
    while cur != j:
        k, parent = prev[cur]
        links.append(k)
        if cur != found:
            mids.append(cur)
        cur = parent
    links.reverse()
    mids.reverse()
    for i in mids:
        if net.nodes[i].role is NodeRole.TERMINAL:
            return None
    return links, mids, found


def _route_delay_for(net: Network, links: list[LinkKey], route_nodes: list[NodeId]) -> float:
    total = sum(net.links[k].delay_ms for k in links)
    total += sum(
        net.nodes[i].delay_ms
        for i in route_nodes
        if net.nodes[i].role is NodeRole.FORWARDING
    )
    return total


def _prune_dominated(cands: list[_Candidate], *, for_plan: bool) -> list[_Candidate]:
    """Drop candidates strictly no better than another with the same served set."""
    by_served: dict[frozenset[NodeId], list[_Candidate]] = {}
    for c in cands:
        by_served.setdefault(c.served, []).append(c)
    out: list[_Candidate] = []
    for served in by_served:
        group = by_served[served]
        keep: list[_Candidate] = []
        for ci, c in enumerate(group):
            dominated = False
            for di, d in enumerate(group):
                if di == ci or not _dominates(d, c, for_plan):
                    continue
                # on mutual domination keep the earlier candidate
                if not _dominates(c, d, for_plan) or di < ci:
                    dominated = True
                    break
            if not dominated:
                keep.append(c)
        out.extend(keep)
    return out


def _dominates(a: _Candidate, b: _Candidate, for_plan: bool) -> bool:
    if for_plan and not a.uses.issubset(b.uses):
        return False
    for comp, v in a.loads.items():
        if v > b.loads.get(comp, 0.0) + 1e-12:
            return False
    if for_plan:
        for comp, v in a.traffic.items():
            if v > b.traffic.get(comp, 0.0) + 1e-12:
                return False
    return True


def _value_of(
    served: dict[str, frozenset[NodeId]], specs: dict[str, ServiceSpec]
) -> float:
    total = 0.0
    for svc in sorted(served):
        spec = specs[svc]
        if spec.is_auth:
            continue
        total += spec.weight * len(served[svc])
    return total


# ---------------------------------------------------------------------------
# stage 1


def brute_stage1(
    net: Network,
    auth_spec: ServiceSpec,
    *,
    excluded_terminals: frozenset[NodeId] = frozenset(),
) -> OracleResult:
    """Authentication optimum: most terminals covered, then fewest links."""
    gated = frozenset(j for j in net.terminals() if j not in excluded_terminals)
    caps = _capacities(net)
    best: tuple[int, int] | None = None
    optima: set[frozenset[NodeId]] = set()
    for cand in _candidates(net, auth_spec, gated):
        if any(v > caps[comp] + 1e-9 for comp, v in cand.loads.items()):
            continue
        key = (len(cand.served), -cand.n_links)
        if best is None or key > best:
            best = key
            optima = {cand.served}
        elif key == best:
            optima.add(cand.served)
    assert best is not None  # the empty subset is always valid
    svc = auth_spec.id
    opts = tuple(
        sorted(((svc, tuple(sorted(s))),) for s in optima)
    )
    return OracleResult(
        objective=float(best[0]),
        served=opts[0],
        optima=opts,
        links_used=-best[1],
    )


def _capacities(net: Network) -> dict[Component, float]:
    caps: dict[Component, float] = {}
    for k, rec in net.links.items():
        caps[("link", k)] = rec.bandwidth_kbps
    for i, rec in net.nodes.items():
        if rec.role is NodeRole.FORWARDING:
            caps[("node", i)] = rec.bandwidth_kbps
    return caps


# ---------------------------------------------------------------------------
# stage 2 and the joint (failure-evaluation) problem


def _search_best(
    layers: list[tuple[str, ServiceSpec, list[_Candidate]]],
    caps: dict[Component, float],
    reserved: dict[Component, float],
    specs: dict[str, ServiceSpec],
    *,
    couple_to_first: bool = False,
) -> tuple[float, tuple]:
    """Exhaustive search over one candidate per layer under shared capacity.

    Returns the exact best objective and all optimal served tuples (data
    services only).  With ``couple_to_first`` the first layer is the
    authentication slice: later layers may only serve its served terminals,
    and it contributes no value itself.
    """
    total = 1
    for _, _, cands in layers:
        total *= max(1, len(cands))
        if total > MAX_PRODUCT:
            raise OracleSizeError("candidate product too large for exhaustive search")
    remaining: dict[Component, float] = dict(caps)
    for comp, v in reserved.items():
        if comp in remaining:
            remaining[comp] -= v
    ubs = [
        max((spec.weight * len(c.served) for c in cands), default=0.0)
        if not spec.is_auth
        else 0.0
        for _, spec, cands in layers
    ]
    suffix_ub = [0.0] * (len(layers) + 1)
    for i in range(len(layers) - 1, -1, -1):
        suffix_ub[i] = suffix_ub[i + 1] + ubs[i]
    best_val = float("-inf")
    best_served: set[tuple] = set()
    choice: list[_Candidate | None] = [None] * len(layers)

    def exact_value() -> float:
        served = {
            svc: (choice[idx].served if choice[idx] is not None else frozenset())
            for idx, (svc, _, _) in enumerate(layers)
        }
        return _value_of(served, specs)

    def served_tuple() -> tuple:
        return tuple(
            (svc, tuple(sorted(choice[idx].served)))
            for idx, (svc, spec, _) in enumerate(layers)
            if not spec.is_auth
        )

    def rec(idx: int, acc: float) -> None:
        nonlocal best_val, best_served
        if acc + suffix_ub[idx] < best_val - 1e-9:
            return
        if idx == len(layers):
            val = exact_value()
            if val > best_val + 1e-12:
                best_val = val
                best_served = {served_tuple()}
            elif val == best_val:
                best_served.add(served_tuple())
            return
        svc, spec, cands = layers[idx]
        gate_to = choice[0].served if couple_to_first and idx > 0 else None
        ordered = sorted(
            cands, key=lambda c: (-spec.weight * len(c.served), c.n_links)
        )
        for cand in ordered:
            if gate_to is not None and not cand.served.issubset(gate_to):
                continue
            ok = True
            for comp, v in cand.loads.items():
                if v > remaining.get(comp, 0.0) + 1e-9:
                    ok = False
                    break
            if not ok:
                continue
            for comp, v in cand.loads.items():
                remaining[comp] = remaining.get(comp, 0.0) - v
            choice[idx] = cand
            rec(idx + 1, acc + (0.0 if spec.is_auth else spec.weight * len(cand.served)))
            choice[idx] = None
            for comp, v in cand.loads.items():
                remaining[comp] = remaining.get(comp, 0.0) + v

    rec(0, 0.0)
    opts = tuple(sorted(best_served))
    return best_val, opts


def brute_stage2(
    net: Network,
    services: list[ServiceSpec],
    gated: dict[str, frozenset[NodeId]],
    *,
    reserved: dict[Component, float] | None = None,
) -> OracleResult:
    """Per-service slicing optimum over remaining capacity."""
    specs = {s.id: s for s in services}
    layers = []
    for spec in sorted(services, key=lambda s: s.id):
        cands = _candidates(net, spec, gated.get(spec.id, frozenset()))
        layers.append((spec.id, spec, _prune_dominated(cands, for_plan=False)))
    val, opts = _search_best(layers, _capacities(net), reserved or {}, specs)
    return OracleResult(objective=val, served=opts[0], optima=opts)


def brute_joint(
    net: Network,
    auth_spec: ServiceSpec,
    services: list[ServiceSpec],
    gate: frozenset[tuple[NodeId, str]],
    *,
    excluded_terminals: frozenset[NodeId] = frozenset(),
) -> OracleResult:
    """Co-optimized authentication and data slices (failure evaluation)."""
    specs = {s.id: s for s in services}
    specs[auth_spec.id] = auth_spec
    auth_gated = frozenset(j for j in net.terminals() if j not in excluded_terminals)
    layers = [
        (
            auth_spec.id,
            auth_spec,
            _prune_dominated(_candidates(net, auth_spec, auth_gated), for_plan=False),
        )
    ]
    for spec in sorted(services, key=lambda s: s.id):
        g = frozenset(j for j in auth_gated if (j, spec.id) in gate)
        cands = _candidates(net, spec, g)
        layers.append((spec.id, spec, _prune_dominated(cands, for_plan=False)))
    val, opts = _search_best(
        layers, _capacities(net), {}, specs, couple_to_first=True
    )
    return OracleResult(objective=val, served=opts[0], optima=opts)


# ---------------------------------------------------------------------------
# upgrade planning


def brute_plan(
    net: Network,
    services: list[ServiceSpec],
    required: dict[str, frozenset[NodeId]],
    components: list[tuple[str, object, tuple]],
    *,
    chi_link: float,
    chi_node: float,
    mu_link: float,
    mu_node: float,
    reserved: dict[Component, float] | None = None,
    reserved_traffic: dict[Component, float] | None = None,
) -> PlanOracleResult:
    """Minimum-cost catalog selection by enumeration in cost order.

    ``components`` holds (kind, target, options) rows where kind is one of
    "upgrade-link", "add-link", "upgrade-node"; options carry
    ``bandwidth_kbps``, ``fra``, ``cost`` attributes (additions also
    ``security``, ``delay_ms``, ``medium``).  A combination is feasible when
    every service admits a tree serving exactly its required terminals, with
    total bandwidth within chi * capacity and value traffic through every
    component leaving at least mu of its fault-resistance weight.
    """
    reserved = reserved or {}
    reserved_traffic = reserved_traffic or {}
    specs = {s.id: s for s in services}

    # the widest possible network: every candidate link built
    net_full = net
    add_records: dict[LinkKey, LinkRecord] = {}
    for kind, target, options in components:
        if kind != "add-link":
            continue
        a, b = target
        opt = options[0]
        rec = LinkRecord(
            a=a,
            b=b,
            bandwidth_kbps=float(opt.bandwidth_kbps),
            delay_ms=float(opt.delay_ms),
            security=int(opt.security),
            fra=float(opt.fra),
            working=True,
            medium=opt.medium,
        )
        add_records[rec.key] = rec
    if add_records:
        net_full = replace(net, links={**dict(net.links), **add_records})

    base_links = frozenset(net.links)
    layer_cands: list[tuple[str, ServiceSpec, list[_Candidate]]] = []
    for spec in sorted(services, key=lambda s: s.id):
        req = required.get(spec.id, frozenset())
        cands = _candidates(
            net_full,
            spec,
            req,
            base_links=base_links,
            require_exact=req,
            max_links=MAX_PLAN_LINKS,
        )
        cands = _prune_dominated(cands, for_plan=True)
        if not cands:
            return PlanOracleResult(False, float("inf"), (), 0)
        layer_cands.append((spec.id, spec, cands))

    combos = []
    for picks in itertools.product(*[(None, *range(len(o))) for _, _, o in components]):
        cost = 0.0
        for (kind, target, options), pick in zip(components, picks):
            if pick is not None:
                cost += float(options[pick].cost)
        combos.append((cost, tuple(-1 if p is None else p for p in picks), picks))
    if len(combos) > MAX_COMBOS:
        raise OracleSizeError(f"{len(combos)} catalog combinations; enumeration capped")
    combos.sort()

    best_cost: float | None = None
    chosen: tuple | None = None
    ties = 0
    for cost, _, picks in combos:
        if best_cost is not None and cost > best_cost + 1e-12:
            break
        caps, fra, built = _apply_combo(net, components, picks, add_records)
        if _combo_feasible(
            layer_cands,
            caps,
            fra,
            built,
            chi_link,
            chi_node,
            mu_link,
            mu_node,
            reserved,
            reserved_traffic,
        ):
            if best_cost is None:
                best_cost = cost
                chosen = tuple(
                    (kind, target, pick)
                    for (kind, target, _), pick in zip(components, picks)
                    if pick is not None
                )
            ties += 1
    if best_cost is None:
        return PlanOracleResult(False, float("inf"), (), 0)
    return PlanOracleResult(True, best_cost, chosen, ties)


def _apply_combo(
    net: Network,
    components: list[tuple[str, object, tuple]],
    picks: tuple,
    add_records: dict[LinkKey, LinkRecord],
) -> tuple[dict[Component, float], dict[Component, float], frozenset[LinkKey]]:
    """Capacities, fault-resistance weights, and built links for one combo."""
    caps: dict[Component, float] = {}
    fra: dict[Component, float] = {}
    for k, rec in net.links.items():
        caps[("link", k)] = rec.bandwidth_kbps
        fra[("link", k)] = rec.fra
    for i, rec in net.nodes.items():
        if rec.role is NodeRole.FORWARDING:
            caps[("node", i)] = rec.bandwidth_kbps
            fra[("node", i)] = rec.fra
    built: set[LinkKey] = set()
    for (kind, target, options), pick in zip(components, picks):
        if pick is None:
            continue
        opt = options[pick]
        if kind == "upgrade-link":
            caps[("link", target)] += float(opt.bandwidth_kbps)
            fra[("link", target)] += float(opt.fra)
        elif kind == "upgrade-node":
            caps[("node", target)] += float(opt.bandwidth_kbps)
            fra[("node", target)] += float(opt.fra)
        elif kind == "add-link":
            caps[("link", target)] = float(opt.bandwidth_kbps)
            fra[("link", target)] = float(opt.fra)
            built.add(target)
        else:
            raise ValueError(f"unknown catalog kind {kind!r}")
    return caps, fra, frozenset(built)


def _combo_feasible(
    layers: list[tuple[str, ServiceSpec, list[_Candidate]]],
    caps: dict[Component, float],
    fra: dict[Component, float],
    built: frozenset[LinkKey],
    chi_link: float,
    chi_node: float,
    mu_link: float,
    mu_node: float,
    reserved: dict[Component, float],
    reserved_traffic: dict[Component, float],
) -> bool:
    limit: dict[Component, float] = {}
    margin: dict[Component, float] = {}
    for comp, cap in caps.items():
        chi = chi_link if comp[0] == "link" else chi_node
        limit[comp] = chi * cap - reserved.get(comp, 0.0)
        if limit[comp] < -1e-9:
            return False  # background authentication load alone breaks the cap
    # existing components (and built additions) must clear the robustness
    # floor even when no service routes through them
    for comp, w in fra.items():
        mu = mu_link if comp[0] == "link" else mu_node
        margin[comp] = w - mu - reserved_traffic.get(comp, 0.0)
        if margin[comp] < -1e-9:
            return False
    load: dict[Component, float] = {}
    traffic: dict[Component, float] = {}

    def fits(c: _Candidate) -> bool:
        if not c.uses.issubset(built):
            return False
        for comp, v in c.loads.items():
            if load.get(comp, 0.0) + v > limit.get(comp, 0.0) + 1e-9:
                return False
        for comp, v in c.traffic.items():
            if traffic.get(comp, 0.0) + v > margin.get(comp, float("inf")) + 1e-9:
                return False
        return True

    def rec(idx: int) -> bool:
        if idx == len(layers):
            return True
        for cand in layers[idx][2]:
            if not fits(cand):
                continue
            for comp, v in cand.loads.items():
                load[comp] = load.get(comp, 0.0) + v
            for comp, v in cand.traffic.items():
                traffic[comp] = traffic.get(comp, 0.0) + v
            if rec(idx + 1):
                return True
            for comp, v in cand.loads.items():
                load[comp] -= v
            for comp, v in cand.traffic.items():
                traffic[comp] -= v
        return False

    return rec(0)
