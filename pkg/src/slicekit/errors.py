"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: input problems exit 2,
provably infeasible optimization problems exit 3, solver limits exit 4.
"""

from __future__ import annotations


class SlicekitError(Exception):
    """Base class for all toolkit errors."""


class NetworkFormatError(SlicekitError):
    """Malformed or invariant-violating input data (network, scenario, catalog, registry)."""


class InvariantViolation(SlicekitError):
    """A produced artifact failed one of its structural checks."""


class InfeasibleError(SlicekitError):
    """The optimization problem has no feasible point.

    ``binding`` names the constraint families found responsible, when known.
    """

    def __init__(self, message: str, binding: list[str] | None = None):
        super().__init__(message)
        self.binding = list(binding or [])


class SolverLimitError(SlicekitError):
    """A solve hit its time limit before reaching the requested gap."""


class OracleSizeError(SlicekitError):
    """Instance exceeds the brute-force oracle's enumeration guard."""
