"""Data model for sliced power-distribution communication networks.

A network is a set of nodes (terminal devices, switches/base stations doing
forwarding, and exactly one operation center) joined by undirected links.
Every component carries a bandwidth capacity, a delay contribution, a security
level, a fault-resistance ability score, and a working flag.  Networks are
value objects: every mutation (scenario event) returns a new ``Network``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping

from .errors import NetworkFormatError

NodeId = int
LinkKey = tuple[int, int]  # canonical: smaller id first


class NodeRole(str, Enum):
    TERMINAL = "terminal"
    FORWARDING = "forwarding"
    OPERATION_CENTER = "operation-center"


class Medium(str, Enum):
    WIRED = "wired"
    WIRELESS = "wireless"


def link_key(a: NodeId, b: NodeId) -> LinkKey:
    """Canonical undirected link identifier (smaller endpoint first)."""
    if a == b:
        raise NetworkFormatError(f"self-loop link at node {a}")
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class NodeRecord:
    """One network node; ``delay_ms`` is the forwarding delay it adds to routes."""

    id: NodeId
    role: NodeRole
    bandwidth_kbps: float
    delay_ms: float
    security: int
    fra: float
    working: bool = True
    auth_server: bool = False
    medium: Medium = Medium.WIRED


@dataclass(frozen=True)
class LinkRecord:
    """One undirected link; endpoints are stored canonically (a < b)."""

    a: NodeId
    b: NodeId
    bandwidth_kbps: float
    delay_ms: float
    security: int
    fra: float
    working: bool = True
    medium: Medium = Medium.WIRED

    @property
    def key(self) -> LinkKey:
        return (self.a, self.b)

    def other(self, node: NodeId) -> NodeId:
        return self.b if node == self.a else self.a


@dataclass(frozen=True)
class ServiceSpec:
    """A service class: per-terminal bandwidth, end-to-end delay cap, security need, value weight."""

    id: str
    bandwidth_kbps: float
    delay_cap_ms: float | None
    security: int | None
    weight: float
    is_auth: bool = False


@dataclass(frozen=True)
class Subscription:
    """A terminal's request to be served by one service."""

    terminal: NodeId
    service: str


@dataclass(frozen=True)
class RegistryEntry:
    legitimate: bool
    services: frozenset[str] = frozenset()


@dataclass(frozen=True)
class CredentialRegistry:
    """Ground truth the authentication servers check devices against.

    Devices absent from the registry are treated as illegitimate.  This stands
    in for the cryptographic credential exchange, which is out of scope.
    """

    entries: Mapping[NodeId, RegistryEntry] = field(default_factory=dict)

    def legitimate(self, node: NodeId) -> bool:
        entry = self.entries.get(node)
        return entry is not None and entry.legitimate

    def authorized(self, node: NodeId, service: str) -> bool:
        entry = self.entries.get(node)
        return entry is not None and entry.legitimate and service in entry.services


@dataclass(frozen=True)
class Network:
    """Immutable network snapshot. Mutating operations live in ``apply_event``."""

    nodes: Mapping[NodeId, NodeRecord]
    links: Mapping[LinkKey, LinkRecord]
    operation_center: NodeId

    def node(self, i: NodeId) -> NodeRecord:
        try:
            return self.nodes[i]
        except KeyError:
            raise NetworkFormatError(f"unknown node {i}") from None

    def link(self, key: LinkKey) -> LinkRecord:
        try:
            return self.links[key]
        except KeyError:
            raise NetworkFormatError(f"unknown link {key[0]}-{key[1]}") from None

    def incident(self, i: NodeId) -> list[LinkRecord]:
        return [l for l in self.links.values() if i in (l.a, l.b)]

    def terminals(self) -> list[NodeId]:
        return sorted(i for i, n in self.nodes.items() if n.role is NodeRole.TERMINAL)

    def forwarding(self) -> list[NodeId]:
        return sorted(i for i, n in self.nodes.items() if n.role is NodeRole.FORWARDING)

    def auth_servers(self) -> list[NodeId]:
        return sorted(i for i, n in self.nodes.items() if n.auth_server)


@dataclass(frozen=True)
class Case:
    """A network plus its service catalog and subscription list (one input file)."""

    network: Network
    services: Mapping[str, ServiceSpec]
    subscriptions: tuple[Subscription, ...]

    def auth_service(self) -> ServiceSpec:
        for spec in self.services.values():
            if spec.is_auth:
                return spec
        raise NetworkFormatError("case declares no authentication service")

    def data_services(self) -> list[ServiceSpec]:
        return [s for s in sorted(self.services.values(), key=lambda s: s.id) if not s.is_auth]

    def subscribers(self, service: str) -> list[NodeId]:
        return sorted({s.terminal for s in self.subscriptions if s.service == service})


# ---------------------------------------------------------------------------
# scenario events


@dataclass(frozen=True)
class NodeFail:
    t: float
    node: NodeId


@dataclass(frozen=True)
class NodeRestore:
    t: float
    node: NodeId


@dataclass(frozen=True)
class LinkFail:
    t: float
    link: LinkKey


@dataclass(frozen=True)
class LinkRestore:
    t: float
    link: LinkKey


@dataclass(frozen=True)
class DeviceJoin:
    """A terminal plugs into the network: new node plus its single attachment link."""

    t: float
    node: NodeRecord
    link: LinkRecord
    subscribe: tuple[str, ...] = ()


@dataclass(frozen=True)
class DeviceLeave:
    t: float
    node: NodeId


@dataclass(frozen=True)
class PollTick:
    """Periodic registry re-check; carries no payload."""

    t: float


ScenarioEvent = (
    NodeFail | NodeRestore | LinkFail | LinkRestore | DeviceJoin | DeviceLeave | PollTick
)


# ---------------------------------------------------------------------------
# validation

def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise NetworkFormatError(msg)


def validate_network(net: Network) -> None:
    """Check structural invariants; raise ``NetworkFormatError`` on the first failure."""
    ocs = [i for i, n in net.nodes.items() if n.role is NodeRole.OPERATION_CENTER]
    _require(len(ocs) == 1, f"expected exactly one operation center, found {len(ocs)}")
    _require(ocs[0] == net.operation_center, "operation_center field disagrees with node roles")
    for i, n in net.nodes.items():
        _require(i == n.id, f"node map key {i} != record id {n.id}")
        _require(n.bandwidth_kbps >= 0 and n.delay_ms >= 0, f"node {i}: negative capacity or delay")
        _require(int(n.security) == n.security and n.security >= 1, f"node {i}: security must be a positive integer")
        _require(n.fra >= 0, f"node {i}: negative fault-resistance score")
        if n.auth_server:
            _require(n.role is not NodeRole.TERMINAL, f"node {i}: terminals cannot host auth servers")
    degree: dict[NodeId, int] = {i: 0 for i in net.nodes}
    for key, l in net.links.items():
        _require(key == (l.a, l.b), f"link map key {key} != record endpoints")
        _require(l.a < l.b, f"link {l.a}-{l.b}: endpoints not canonical")
        _require(l.a in net.nodes and l.b in net.nodes, f"link {l.a}-{l.b}: unknown endpoint")
        _require(l.bandwidth_kbps >= 0 and l.delay_ms >= 0, f"link {l.a}-{l.b}: negative capacity or delay")
        _require(int(l.security) == l.security and l.security >= 1, f"link {l.a}-{l.b}: security must be a positive integer")
        _require(l.fra >= 0, f"link {l.a}-{l.b}: negative fault-resistance score")
        degree[l.a] += 1
        degree[l.b] += 1
    for i, n in net.nodes.items():
        if n.role is NodeRole.TERMINAL:
            _require(degree[i] >= 1, f"terminal {i} has no attachment link")


def validate_case(case: Case) -> None:
    validate_network(case.network)
    auth = [s for s in case.services.values() if s.is_auth]
    _require(len(auth) <= 1, "more than one authentication service declared")
    for sid, spec in case.services.items():
        _require(sid == spec.id, f"service map key {sid} != spec id {spec.id}")
        _require(spec.bandwidth_kbps >= 0, f"service {sid}: negative bandwidth")
        _require(spec.weight >= 0, f"service {sid}: negative weight")
        if spec.delay_cap_ms is not None:
            _require(spec.delay_cap_ms > 0, f"service {sid}: delay cap must be positive")
        if spec.security is not None:
            _require(int(spec.security) == spec.security and spec.security >= 1,
                     f"service {sid}: security must be a positive integer")
        if not spec.is_auth:
            _require(spec.security is not None, f"service {sid}: data services need a security requirement")
    for sub in case.subscriptions:
        _require(sub.service in case.services, f"subscription to unknown service {sub.service!r}")
        _require(not case.services[sub.service].is_auth, "subscriptions to the authentication service are not allowed")
        node = case.network.nodes.get(sub.terminal)
        _require(node is not None, f"subscription for unknown terminal {sub.terminal}")
        _require(node.role is NodeRole.TERMINAL, f"subscription for non-terminal node {sub.terminal}")


# ---------------------------------------------------------------------------
# JSON parsing / serialization

def _node_from_json(obj: dict) -> NodeRecord:
    try:
        return NodeRecord(
            id=int(obj["id"]),
            role=NodeRole(obj["role"]),
            bandwidth_kbps=float(obj["bandwidth_kbps"]),
            delay_ms=float(obj["delay_ms"]),
            security=int(obj["security"]),
            fra=float(obj["fra"]),
            working=bool(obj.get("working", True)),
            auth_server=bool(obj.get("auth_server", False)),
            medium=Medium(obj.get("medium", "wired")),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise NetworkFormatError(f"bad node record {obj!r}: {exc}") from None


def _link_from_json(obj: dict) -> LinkRecord:
    try:
        a, b = link_key(int(obj["a"]), int(obj["b"]))
        return LinkRecord(
            a=a,
            b=b,
            bandwidth_kbps=float(obj["bandwidth_kbps"]),
            delay_ms=float(obj["delay_ms"]),
            security=int(obj["security"]),
            fra=float(obj["fra"]),
            working=bool(obj.get("working", True)),
            medium=Medium(obj.get("medium", "wired")),
        )
    except NetworkFormatError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise NetworkFormatError(f"bad link record {obj!r}: {exc}") from None


def parse_case(text: str) -> Case:
    """Parse a full case file (network + services + subscriptions) from JSON text."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise NetworkFormatError("top level must be a JSON object")
    nodes: dict[NodeId, NodeRecord] = {}
    for obj in data.get("nodes", []):
        rec = _node_from_json(obj)
        _require(rec.id not in nodes, f"duplicate node id {rec.id}")
        nodes[rec.id] = rec
    links: dict[LinkKey, LinkRecord] = {}
    for obj in data.get("links", []):
        rec = _link_from_json(obj)
        _require(rec.key not in links, f"duplicate link {rec.a}-{rec.b}")
        links[rec.key] = rec
    _require("operation_center" in data, "missing operation_center")
    net = Network(nodes=nodes, links=links, operation_center=int(data["operation_center"]))
    services: dict[str, ServiceSpec] = {}
    for obj in data.get("services", []):
        try:
            spec = ServiceSpec(
                id=str(obj["id"]),
                bandwidth_kbps=float(obj["bandwidth_kbps"]),
                delay_cap_ms=None if obj.get("delay_cap_ms") is None else float(obj["delay_cap_ms"]),
                security=None if obj.get("security") is None else int(obj["security"]),
                weight=float(obj["weight"]),
                is_auth=bool(obj.get("is_auth", False)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise NetworkFormatError(f"bad service record {obj!r}: {exc}") from None
        _require(spec.id not in services, f"duplicate service id {spec.id}")
        services[spec.id] = spec
    subs = tuple(
        Subscription(terminal=int(obj["terminal"]), service=str(obj["service"]))
        for obj in data.get("subscriptions", [])
    )
    case = Case(network=net, services=services, subscriptions=subs)
    validate_case(case)
    return case


def parse_network(text: str) -> Network:
    """Parse just the network portion of a case file."""
    return parse_case(text).network


def _node_to_json(n: NodeRecord) -> dict:
    return {
        "id": n.id,
        "role": n.role.value,
        "bandwidth_kbps": n.bandwidth_kbps,
        "delay_ms": n.delay_ms,
        "security": n.security,
        "fra": n.fra,
        "working": n.working,
        "auth_server": n.auth_server,
        "medium": n.medium.value,
    }


def _link_to_json(l: LinkRecord) -> dict:
    return {
        "a": l.a,
        "b": l.b,
        "bandwidth_kbps": l.bandwidth_kbps,
        "delay_ms": l.delay_ms,
        "security": l.security,
        "fra": l.fra,
        "working": l.working,
        "medium": l.medium.value,
    }


def serialize_case(case: Case) -> str:
    data = {
        "nodes": [_node_to_json(case.network.nodes[i]) for i in sorted(case.network.nodes)],
        "links": [_link_to_json(case.network.links[k]) for k in sorted(case.network.links)],
        "operation_center": case.network.operation_center,
        "services": [
            {
                "id": s.id,
                "bandwidth_kbps": s.bandwidth_kbps,
                "delay_cap_ms": s.delay_cap_ms,
                "security": s.security,
                "weight": s.weight,
                "is_auth": s.is_auth,
            }
            for s in sorted(case.services.values(), key=lambda s: s.id)
        ],
        "subscriptions": [
            {"terminal": s.terminal, "service": s.service}
            for s in sorted(case.subscriptions, key=lambda s: (s.terminal, s.service))
        ],
    }
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def serialize_network(net: Network) -> str:
    """Serialize a bare network as a valid (service-less) case file."""
    return serialize_case(Case(network=net, services={}, subscriptions=()))


def parse_registry(text: str) -> CredentialRegistry:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"invalid registry JSON: {exc}") from None
    devices = data.get("devices", data) if isinstance(data, dict) else None
    if not isinstance(devices, dict):
        raise NetworkFormatError("registry must be an object mapping node ids to entries")
    entries: dict[NodeId, RegistryEntry] = {}
    for key, obj in devices.items():
        try:
            node = int(key)
            legitimate = bool(obj["legitimate"])
            services = frozenset(str(s) for s in obj.get("services", []))
        except (KeyError, ValueError, TypeError) as exc:
            raise NetworkFormatError(f"bad registry entry {key!r}: {exc}") from None
        _require(legitimate or not services, f"registry entry {node}: services listed for illegitimate device")
        entries[node] = RegistryEntry(legitimate=legitimate, services=services)
    return CredentialRegistry(entries=entries)


def permissive_registry(case: Case) -> CredentialRegistry:
    """Registry that accepts every subscribed terminal for its subscribed services."""
    services: dict[NodeId, set[str]] = {}
    for sub in case.subscriptions:
        services.setdefault(sub.terminal, set()).add(sub.service)
    entries = {
        t: RegistryEntry(legitimate=True, services=frozenset(svcs))
        for t, svcs in services.items()
    }
    return CredentialRegistry(entries=entries)


def parse_scenario(text: str) -> list[ScenarioEvent]:
    """Parse a JSON-Lines scenario; events must be in nondecreasing time order."""
    events: list[ScenarioEvent] = []
    last_t = float("-inf")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise NetworkFormatError(f"scenario line {lineno}: invalid JSON: {exc}") from None
        try:
            t = float(obj["t"])
            kind = str(obj["kind"])
        except (KeyError, ValueError, TypeError):
            raise NetworkFormatError(f"scenario line {lineno}: missing t/kind") from None
        if t < last_t:
            raise NetworkFormatError(f"scenario line {lineno}: events out of time order")
        last_t = t
        try:
            if kind == "node_fail":
                events.append(NodeFail(t=t, node=int(obj["node"])))
            elif kind == "node_restore":
                events.append(NodeRestore(t=t, node=int(obj["node"])))
            elif kind == "link_fail":
                a, b = obj["link"]
                events.append(LinkFail(t=t, link=link_key(int(a), int(b))))
            elif kind == "link_restore":
                a, b = obj["link"]
                events.append(LinkRestore(t=t, link=link_key(int(a), int(b))))
            elif kind == "device_join":
                node = _node_from_json({"role": "terminal", **obj["node"]})
                attach = int(obj["attach_to"])
                link_obj = dict(obj["link"])
                link_obj.setdefault("a", node.id)
                link_obj.setdefault("b", attach)
                link = _link_from_json(link_obj)
                events.append(
                    DeviceJoin(
                        t=t,
                        node=node,
                        link=link,
                        subscribe=tuple(str(s) for s in obj.get("subscribe", [])),
                    )
                )
            elif kind == "device_leave":
                events.append(DeviceLeave(t=t, node=int(obj["node"])))
            elif kind == "poll":
                events.append(PollTick(t=t))
            else:
                raise NetworkFormatError(f"scenario line {lineno}: unknown event kind {kind!r}")
        except NetworkFormatError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise NetworkFormatError(f"scenario line {lineno}: bad {kind} payload: {exc}") from None
    return events


# ---------------------------------------------------------------------------
# event application

def apply_event(net: Network, event: ScenarioEvent) -> Network:
    """Return the network after one event; the input network is never modified.

    Fail/restore events must change state (failing a failed component is an
    error), the operation center can never fail, joins need a fresh terminal
    id attached by one link, and leaves remove the terminal with its links.
    """
    if isinstance(event, PollTick):
        return net
    if isinstance(event, NodeFail):
        node = net.node(event.node)
        if node.role is NodeRole.OPERATION_CENTER:
            raise NetworkFormatError("operation center cannot fail in scope")
        if not node.working:
            raise NetworkFormatError(f"node {event.node} is already failed")
        nodes = dict(net.nodes)
        nodes[event.node] = replace(node, working=False)
        return Network(nodes=nodes, links=net.links, operation_center=net.operation_center)
    if isinstance(event, NodeRestore):
        node = net.node(event.node)
        if node.working:
            raise NetworkFormatError(f"node {event.node} is not failed")
        nodes = dict(net.nodes)
        nodes[event.node] = replace(node, working=True)
        return Network(nodes=nodes, links=net.links, operation_center=net.operation_center)
    if isinstance(event, LinkFail):
        link = net.link(event.link)
        if not link.working:
            raise NetworkFormatError(f"link {link.a}-{link.b} is already failed")
        links = dict(net.links)
        links[event.link] = replace(link, working=False)
        return Network(nodes=net.nodes, links=links, operation_center=net.operation_center)
    if isinstance(event, LinkRestore):
        link = net.link(event.link)
        if link.working:
            raise NetworkFormatError(f"link {link.a}-{link.b} is not failed")
        links = dict(net.links)
        links[event.link] = replace(link, working=True)
        return Network(nodes=net.nodes, links=links, operation_center=net.operation_center)
    if isinstance(event, DeviceJoin):
        node, link = event.node, event.link
        if node.id in net.nodes:
            raise NetworkFormatError(f"device join reuses existing node id {node.id}")
        if node.role is not NodeRole.TERMINAL:
            raise NetworkFormatError("joining devices must be terminals")
        if node.id not in (link.a, link.b):
            raise NetworkFormatError("attachment link does not touch the joining device")
        attach = link.other(node.id)
        host = net.node(attach)
        if host.role is NodeRole.TERMINAL:
            raise NetworkFormatError(f"cannot attach device to terminal {attach}")
        nodes = dict(net.nodes)
        nodes[node.id] = node
        links = dict(net.links)
        if link.key in links:
            raise NetworkFormatError(f"attachment link {link.a}-{link.b} already exists")
        links[link.key] = link
        out = Network(nodes=nodes, links=links, operation_center=net.operation_center)
        validate_network(out)
        return out
    if isinstance(event, DeviceLeave):
        node = net.node(event.node)
        if node.role is not NodeRole.TERMINAL:
            raise NetworkFormatError(f"device leave for non-terminal node {event.node}")
        nodes = dict(net.nodes)
        del nodes[event.node]
        links = {k: l for k, l in net.links.items() if event.node not in k}
        return Network(nodes=nodes, links=links, operation_center=net.operation_center)
    raise NetworkFormatError(f"unknown event {event!r}")


# ---------------------------------------------------------------------------
# eligibility

def eligibility(net: Network, spec: ServiceSpec) -> tuple[dict[NodeId, bool], dict[LinkKey, bool]]:
    """Per-component usability masks for one service.

    A component qualifies when it is working and, for data services, its
    security level meets the service's requirement.  The authentication
    service has no security requirement: every working component qualifies.
    """
    need = None if spec.is_auth else spec.security
    node_mask = {
        i: n.working and (need is None or n.security >= need)
        for i, n in net.nodes.items()
    }
    link_mask = {
        k: l.working and (need is None or l.security >= need)
        for k, l in net.links.items()
    }
    return node_mask, link_mask


def live_subscriptions(
    subs: Iterable[Subscription], net: Network
) -> tuple[Subscription, ...]:
    """Drop subscriptions whose terminal is no longer present."""
    return tuple(
        s
        for s in subs
        if s.terminal in net.nodes and net.nodes[s.terminal].role is NodeRole.TERMINAL
    )
