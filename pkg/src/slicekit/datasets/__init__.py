"""Bundled benchmark data: a 60-node distribution network with four data
services, a credential registry, an event scenario, and an upgrade catalog.

The JSON files ship inside the package; ``dataset_path`` exposes them as
filesystem paths so they can also be fed to the command line interface.
"""

from __future__ import annotations

import json
from pathlib import Path

from ..model import (
    Case,
    CredentialRegistry,
    ScenarioEvent,
    parse_case,
    parse_registry,
    parse_scenario,
)
from ..planner import UpgradeCatalog, parse_catalog

_HERE = Path(__file__).resolve().parent


def dataset_path(name: str) -> Path:
    """Filesystem path of a bundled data file."""
    p = _HERE / name
    if not p.is_file():
        raise FileNotFoundError(f"no bundled dataset file named {name!r}")
    return p


def _read(name: str) -> str:
    return dataset_path(name).read_text()


def load_case60() -> Case:
    """The 60-node network with its service definitions and subscriptions."""
    return parse_case(_read("case60.json"))


def load_registry60() -> CredentialRegistry:
    """Credential registry covering terminals 15..60 plus spare device 61."""
    return parse_registry(_read("case60_registry.json"))


def load_scenario60() -> list[ScenarioEvent]:
    """Failure / join / leave / poll event sequence for the 60-node case."""
    return parse_scenario(_read("case60_scenario.jsonl"))


def load_catalog60() -> UpgradeCatalog:
    """Upgrade catalog (link upgrades, link additions, node upgrades)."""
    return parse_catalog(_read("case60_catalog.json"))


def load_reference_plan() -> dict:
    """Published reference upgrade selection for the default planning request.

    Returns the raw dict from ``table9_plan.json``: a row list plus the
    quoted total cost. Ambiguity resolutions are documented inline via
    ``checked`` / ``note`` fields and in the dataset README.
    """
    return json.loads(_read("table9_plan.json"))
