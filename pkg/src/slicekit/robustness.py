"""Single-failure robustness screening.

For every infrastructure component in scope we ask: if only this component
fails, how much service value does the network lose, and does the
component's failure-resistance rating cover that loss?  Service value is
measured with a joint model that routes authentication and data services
together, admission fixed to the grants computed on the intact network;
the intact optimum is solved once and each candidate failure is solved
against it.

The component loop is order-independent, so it can fan out over a process
pool sized by the SLICEKIT_THREADS environment variable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from multiprocessing import get_context

from .errors import NetworkFormatError
from .model import (
    Case,
    CredentialRegistry,
    LinkFail,
    Network,
    NodeFail,
    NodeId,
    NodeRole,
    ServiceSpec,
    apply_event,
    link_key,
)
from .slicer import (
    AuthStates,
    authenticate,
    build_joint,
    build_stage1,
    normalize_auth,
    solve_problem,
)

Component = tuple[str, object]


@dataclass(frozen=True)
class ComponentRobustness:
    """Outcome of failing one component."""

    kind: str
    key: object
    fra: float
    value_intact: float
    value_failed: float
    impact: float
    margin: float
    affected: dict[str, int]
    status: str = "optimal"

    @property
    def label(self) -> str:
        if self.kind == "link":
            a, b = self.key
            return f"link {a}-{b}"
        return f"node {self.key}"


@dataclass(frozen=True)
class RobustnessReport:
    value_intact: float
    served_intact: dict[str, int]
    components: tuple[ComponentRobustness, ...]

    def weak_components(self) -> list[ComponentRobustness]:
        return [c for c in self.components if c.margin < 0]

    def to_json_dict(self) -> dict:
        return {
            "value_intact": self.value_intact,
            "served_intact": dict(sorted(self.served_intact.items())),
            "components": [
                {
                    "kind": c.kind,
                    "id": c.label.split(" ", 1)[1],
                    "fra": c.fra,
                    "value_intact": c.value_intact,
                    "value_failed": c.value_failed,
                    "impact": c.impact,
                    "margin": c.margin,
                    "affected": dict(sorted(c.affected.items())),
                    "status": c.status,
                }
                for c in self.components
            ],
        }

    def to_csv(self) -> str:
        services = sorted(self.served_intact)
        lines = [
            "component,kind,fra,value_intact,value_failed,impact,margin,"
            + ",".join(f"affected_{s}" for s in services)
            + ",status"
        ]
        for c in self.components:
            lines.append(
                ",".join(
                    [
                        c.label.split(" ", 1)[1],
                        c.kind,
                        f"{c.fra:g}",
                        f"{c.value_intact:g}",
                        f"{c.value_failed:g}",
                        f"{c.impact:g}",
                        f"{c.margin:g}",
                    ]
                    + [str(c.affected.get(s, 0)) for s in services]
                    + [c.status]
                )
            )
        return "\n".join(lines) + "\n"


def default_scope(net: Network) -> list[Component]:
    """Backbone only: links between non-terminal nodes, plus forwarding nodes.

    Terminal attachment links are excluded; losing one is the terminal's
    own problem, not a network robustness question.
    """
    comps: list[Component] = []
    for k, rec in sorted(net.links.items()):
        if not rec.working:
            continue
        ra = net.nodes[k[0]].role
        rb = net.nodes[k[1]].role
        if ra is not NodeRole.TERMINAL and rb is not NodeRole.TERMINAL:
            comps.append(("link", k))
    for i in net.forwarding():
        if net.nodes[i].working:
            comps.append(("node", i))
    return comps


def _component_fra(net: Network, comp: Component) -> float:
    kind, key = comp
    if kind == "link":
        return net.links[key].fra
    return net.nodes[key].fra


def _fail(net: Network, comp: Component) -> Network:
    kind, key = comp
    if kind == "link":
        return apply_event(net, LinkFail(t=0.0, link=key))
    return apply_event(net, NodeFail(t=0.0, node=key))


def _joint_value(
    net: Network,
    auth_spec: ServiceSpec,
    services: list[ServiceSpec],
    gate: frozenset[tuple[NodeId, str]],
    gap_tol: float | None,
    time_limit: float | None,
    seed: int,
) -> tuple[float, dict[str, int], str]:
    problem = build_joint(net, auth_spec, services, gate)
    sol, _ = solve_problem(problem, gap_tol=gap_tol, time_limit=time_limit, seed=seed)
    served = {
        svc: len(mem.routes)
        for svc, mem in sol.services.items()
        if svc != auth_spec.id
    }
    return sol.objective, served, sol.status


def _eval_one(args) -> tuple[float, dict[str, int], str]:
    net, comp, auth_spec, services, gate, gap_tol, time_limit, seed = args
    return _joint_value(
        _fail(net, comp), auth_spec, services, gate, gap_tol, time_limit, seed
    )


def worker_count() -> int:
    raw = os.environ.get("SLICEKIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise NetworkFormatError(f"SLICEKIT_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def evaluate(
    case: Case,
    auth: AuthStates,
    *,
    scope: list[Component] | None = None,
    gap_tol: float | None = None,
    time_limit: float | None = None,
    seed: int = 0,
) -> RobustnessReport:
    """Score every in-scope component by its single-failure impact.

    Admission is fixed by the ``auth`` grants, so a failure can strand an
    admitted device but never admit a new one.  impact = intact value minus
    value with the component down; margin = the component's rating minus
    impact.  A negative margin flags the component as under-protected.
    """
    net = case.network
    for i, rec in net.nodes.items():
        if not rec.working:
            raise NetworkFormatError(f"robustness needs an all-working network; node {i} is down")
    for k, rec in net.links.items():
        if not rec.working:
            raise NetworkFormatError(
                f"robustness needs an all-working network; link {k[0]}-{k[1]} is down"
            )
    auth_spec = case.auth_service()
    data_services = [
        case.services[sid] for sid in sorted(case.services) if not case.services[sid].is_auth
    ]
    gate = auth.grants

    value_intact, served_intact, _ = _joint_value(
        net, auth_spec, data_services, gate, gap_tol, time_limit, seed
    )

    if scope is None:
        scope = default_scope(net)
    else:
        scope = [
            ("link", link_key(k[0], k[1])) if kind == "link" else ("node", k)
            for kind, k in scope
        ]
    for kind, key in scope:
        if kind == "link" and key not in net.links:
            raise NetworkFormatError(f"scope link {key[0]}-{key[1]} not in network")
        if kind == "node" and key not in net.nodes:
            raise NetworkFormatError(f"scope node {key} not in network")

    tasks = [
        (net, comp, auth_spec, data_services, gate, gap_tol, time_limit, seed)
        for comp in scope
    ]
    workers = worker_count()
    if workers > 1 and len(tasks) > 1:
        with get_context("spawn").Pool(processes=min(workers, len(tasks))) as pool:
            results = pool.map(_eval_one, tasks)
    else:
        results = [_eval_one(t) for t in tasks]

    components = []
    for comp, (value_failed, served_failed, status) in zip(scope, results):
        impact = value_intact - value_failed
        fra = _component_fra(net, comp)
        affected = {
            svc: served_intact.get(svc, 0) - served_failed.get(svc, 0)
            for svc in served_intact
        }
        components.append(
            ComponentRobustness(
                kind=comp[0],
                key=comp[1],
                fra=fra,
                value_intact=value_intact,
                value_failed=value_failed,
                impact=impact,
                margin=fra - impact,
                affected=affected,
                status=status,
            )
        )
    return RobustnessReport(
        value_intact=value_intact,
        served_intact=served_intact,
        components=tuple(components),
    )


def admission(
    case: Case,
    registry: CredentialRegistry,
    *,
    gap_tol: float | None = None,
    time_limit: float | None = None,
    seed: int = 0,
) -> AuthStates:
    """Authentication stage on the intact network, for use as the gate."""
    problem = build_stage1(case.network, case.auth_service())
    raw, _ = solve_problem(problem, gap_tol=gap_tol, time_limit=time_limit, seed=seed)
    s1 = normalize_auth(raw, case.network, case.auth_service().id)
    return authenticate(s1, case, registry)


def evaluate_case(
    case: Case,
    registry: CredentialRegistry,
    *,
    scope: list[Component] | None = None,
    gap_tol: float | None = None,
    time_limit: float | None = None,
    seed: int = 0,
) -> RobustnessReport:
    """Convenience wrapper: derive admission, then evaluate."""
    auth = admission(
        case, registry, gap_tol=gap_tol, time_limit=time_limit, seed=seed
    )
    return evaluate(
        case,
        auth,
        scope=scope,
        gap_tol=gap_tol,
        time_limit=time_limit,
        seed=seed,
    )
