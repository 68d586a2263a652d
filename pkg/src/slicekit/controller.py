"""Event-driven admission control and re-slicing.

The controller owns the live network picture: it reacts to joins, leaves,
failures, restorations, and periodic credential polls by re-running the
two-stage slicer and updating per-device admission status.  Devices that
fail a poll are quarantined: excluded from the authentication slice and
therefore from every service slice, until an operator explicitly clears
them.  Re-admission is never automatic.

Every event is processed in order and appended to an event log, and
``run_scenario`` folds a whole scenario into a timeline report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import SlicekitError
from .model import (
    Case,
    CredentialRegistry,
    DeviceJoin,
    DeviceLeave,
    LinkFail,
    LinkRestore,
    Network,
    NodeFail,
    NodeId,
    NodeRestore,
    PollTick,
    ScenarioEvent,
    ServiceSpec,
    Subscription,
    apply_event,
    live_subscriptions,
)
from .slicer import AuthStates, SliceOutcome, SliceSolution, slice_case

UNAUTHENTICATED = "unauthenticated"
AUTHENTICATED = "authenticated"
QUARANTINED = "quarantined"


@dataclass(frozen=True)
class DeviceStatus:
    state: str
    services: frozenset[str] = frozenset()


@dataclass(frozen=True)
class LogEntry:
    t: float | None
    event: str
    action: str


@dataclass
class ControllerState:
    """Full controller picture after some prefix of events."""

    net: Network
    services: dict[str, ServiceSpec]
    subscriptions: tuple[Subscription, ...]
    quarantined: frozenset[NodeId]
    outcome: SliceOutcome
    device_status: dict[NodeId, DeviceStatus]
    event_log: tuple[LogEntry, ...] = ()

    @property
    def auth_slice(self) -> SliceSolution:
        return self.outcome.stage1

    @property
    def service_slices(self) -> SliceSolution:
        return self.outcome.stage2

    @property
    def states(self) -> AuthStates:
        return self.outcome.states

    def case(self) -> Case:
        return Case(
            network=self.net,
            services=self.services,
            subscriptions=live_subscriptions(self.subscriptions, self.net),
        )


class ScenarioError(SlicekitError):
    """An event could not be applied; carries the timeline built so far."""

    def __init__(self, message: str, timeline: list[dict]):
        super().__init__(message)
        self.timeline = timeline


def _statuses(
    net: Network, states: AuthStates, quarantined: frozenset[NodeId]
) -> dict[NodeId, DeviceStatus]:
    out: dict[NodeId, DeviceStatus] = {}
    for j in net.terminals():
        if j in quarantined:
            out[j] = DeviceStatus(QUARANTINED)
        elif j in states.authenticated:
            granted = frozenset(s for (t, s) in states.grants if t == j)
            out[j] = DeviceStatus(AUTHENTICATED, granted)
        else:
            out[j] = DeviceStatus(UNAUTHENTICATED)
    return out


def make_controller(
    case: Case,
    registry: CredentialRegistry,
    *,
    gap_tol: float | None = None,
    time_limit: float | None = None,
    seed: int = 0,
) -> ControllerState:
    """Initial state: both stages solved on the intact input."""
    outcome = slice_case(
        case, registry, gap_tol=gap_tol, time_limit=time_limit, seed=seed
    )
    return ControllerState(
        net=case.network,
        services=dict(case.services),
        subscriptions=case.subscriptions,
        quarantined=frozenset(),
        outcome=outcome,
        device_status=_statuses(case.network, outcome.states, frozenset()),
    )


def _describe(ev: ScenarioEvent) -> str:
    if isinstance(ev, NodeFail):
        return f"node_fail {ev.node}"
    if isinstance(ev, NodeRestore):
        return f"node_restore {ev.node}"
    if isinstance(ev, LinkFail):
        return f"link_fail {ev.link[0]}-{ev.link[1]}"
    if isinstance(ev, LinkRestore):
        return f"link_restore {ev.link[0]}-{ev.link[1]}"
    if isinstance(ev, DeviceJoin):
        return f"device_join {ev.node.id}"
    if isinstance(ev, DeviceLeave):
        return f"device_leave {ev.node}"
    if isinstance(ev, PollTick):
        return "poll"
    return type(ev).__name__


def step(
    state: ControllerState,
    ev: ScenarioEvent,
    registry: CredentialRegistry,
    *,
    gap_tol: float | None = None,
    time_limit: float | None = None,
    seed: int = 0,
) -> ControllerState:
    """Process one event and return the next state.

    Topology events and joins/leaves re-solve both stages on the updated
    network.  A poll re-checks every terminal against the credential
    registry and quarantines the ones it no longer vouches for; if nothing
    changed the state is returned untouched (polling is idempotent).
    """
    if isinstance(ev, PollTick):
        bad = frozenset(
            j
            for j in state.net.terminals()
            if j not in state.quarantined and not registry.legitimate(j)
        )
        if not bad:
            entry = LogEntry(ev.t, _describe(ev), "no changes")
            return replace(state, event_log=state.event_log + (entry,))
        quarantined = state.quarantined | bad
        action = "quarantine " + ",".join(str(j) for j in sorted(bad))
        return _resolve(
            state,
            state.net,
            state.subscriptions,
            quarantined,
            LogEntry(ev.t, _describe(ev), action),
            registry,
            gap_tol=gap_tol,
            time_limit=time_limit,
            seed=seed,
        )

    net = apply_event(state.net, ev)
    subs = state.subscriptions
    quarantined = state.quarantined
    if isinstance(ev, DeviceJoin):
        subs = subs + tuple(
            Subscription(terminal=ev.node.id, service=s) for s in ev.subscribe
        )
        action = "re-slice with device"
    elif isinstance(ev, DeviceLeave):
        subs = tuple(s for s in subs if s.terminal != ev.node)
        quarantined = frozenset(j for j in quarantined if j != ev.node)
        action = "re-slice without device"
    else:
        action = "re-slice"
    return _resolve(
        state,
        net,
        subs,
        quarantined,
        LogEntry(ev.t, _describe(ev), action),
        registry,
        gap_tol=gap_tol,
        time_limit=time_limit,
        seed=seed,
    )


def clear_quarantine(
    state: ControllerState,
    node: NodeId,
    registry: CredentialRegistry,
    *,
    gap_tol: float | None = None,
    time_limit: float | None = None,
    seed: int = 0,
) -> ControllerState:
    """Operator action lifting a quarantine; the only path back in."""
    if node not in state.quarantined:
        raise SlicekitError(f"device {node} is not quarantined")
    return _resolve(
        state,
        state.net,
        state.subscriptions,
        frozenset(j for j in state.quarantined if j != node),
        LogEntry(None, f"clear_quarantine {node}", "re-slice"),
        registry,
        gap_tol=gap_tol,
        time_limit=time_limit,
        seed=seed,
    )


def _resolve(
    state: ControllerState,
    net: Network,
    subs: tuple[Subscription, ...],
    quarantined: frozenset[NodeId],
    entry: LogEntry,
    registry: CredentialRegistry,
    *,
    gap_tol: float | None,
    time_limit: float | None,
    seed: int,
) -> ControllerState:
    case = Case(
        network=net,
        services=dict(state.services),
        subscriptions=live_subscriptions(subs, net),
    )
    outcome = slice_case(
        case,
        registry,
        gap_tol=gap_tol,
        time_limit=time_limit,
        seed=seed,
        excluded_terminals=quarantined,
    )
    return ControllerState(
        net=net,
        services=dict(state.services),
        subscriptions=subs,
        quarantined=quarantined,
        outcome=outcome,
        device_status=_statuses(net, outcome.states, quarantined),
        event_log=state.event_log + (entry,),
    )


def check_isolation(state: ControllerState) -> list[str]:
    """Safety audit: only authenticated devices appear in service slices."""
    bad: list[str] = []
    for svc, mem in state.outcome.solution.services.items():
        if svc in state.services and state.services[svc].is_auth:
            for j in mem.served():
                if state.device_status.get(j, DeviceStatus(UNAUTHENTICATED)).state == QUARANTINED:
                    bad.append(f"quarantined device {j} inside the authentication slice")
            continue
        for j in mem.served():
            status = state.device_status.get(j)
            if status is None or status.state != AUTHENTICATED:
                bad.append(f"device {j} in service {svc} without authentication")
            elif svc not in status.services:
                bad.append(f"device {j} in service {svc} without a grant")
    return bad


def timeline_record(state: ControllerState, entry: LogEntry) -> dict:
    sol = state.outcome.solution
    served = {
        svc: len(sol.services[svc].routes)
        for svc in sorted(sol.services)
    }
    return {
        "t": entry.t,
        "event": entry.event,
        "action": entry.action,
        "objective": state.outcome.stage2.objective,
        "authenticated": sorted(state.states.authenticated),
        "served": served,
        "quarantined": sorted(state.quarantined),
    }


def run_scenario(
    case: Case,
    registry: CredentialRegistry,
    events: list[ScenarioEvent],
    *,
    gap_tol: float | None = None,
    time_limit: float | None = None,
    seed: int = 0,
) -> tuple[ControllerState, list[dict]]:
    """Fold a scenario into (final state, per-event timeline).

    The first record describes the initial solve (pseudo-event "start").
    An event failure raises ScenarioError carrying the partial timeline.
    """
    state = make_controller(
        case, registry, gap_tol=gap_tol, time_limit=time_limit, seed=seed
    )
    timeline = [timeline_record(state, LogEntry(None, "start", "initial slice"))]
    for ev in events:
        try:
            state = step(
                state,
                ev,
                registry,
                gap_tol=gap_tol,
                time_limit=time_limit,
                seed=seed,
            )
        except SlicekitError as exc:
            raise ScenarioError(
                f"event at t={getattr(ev, 't', '?')} failed: {exc}", timeline
            ) from exc
        bad = check_isolation(state)
        if bad:
            raise ScenarioError("isolation violated: " + "; ".join(bad), timeline)
        timeline.append(timeline_record(state, state.event_log[-1]))
    return state, timeline


def timeline_jsonl(timeline: list[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in timeline)


def summary_csv(timeline: list[dict]) -> str:
    """One row per event: time, event, action, objective, served counts, quarantine."""
    services: list[str] = sorted({svc for rec in timeline for svc in rec["served"]})
    lines = [
        "t,event,action,objective,"
        + ",".join(f"served_{svc}" for svc in services)
        + ",quarantined"
    ]
    for rec in timeline:
        lines.append(
            ",".join(
                [
                    "start" if rec["t"] is None else f"{rec['t']:g}",
                    rec["event"],
                    rec["action"].replace(",", ";"),
                    f"{rec['objective']:g}",
                ]
                + [str(rec["served"].get(svc, 0)) for svc in services]
                + [";".join(str(j) for j in rec["quarantined"])]
            )
        )
    return "\n".join(lines) + "\n"
