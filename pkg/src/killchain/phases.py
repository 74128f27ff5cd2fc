"""The seven kill chain phases, ordered as attackers traverse them."""

from __future__ import annotations

from enum import IntEnum

from .errors import ConfigError


class Phase(IntEnum):
    """Kill chain phase; the integer value is the chain position (1-based)."""

    RECONNAISSANCE = 1
    WEAPONIZATION = 2
    DELIVERY = 3
    EXPLOITATION = 4
    INSTALLATION = 5
    COMMAND_AND_CONTROL = 6
    ACTIONS_ON_OBJECTIVES = 7

    @property
    def label(self) -> str:
        """Canonical display name used in every file format."""
        return _LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "Phase":
        try:
            return _BY_LABEL[label]
        except KeyError:
            raise ConfigError(
                f"unknown phase name {label!r}; expected one of {sorted(_BY_LABEL)}"
            ) from None


_LABELS = {
    Phase.RECONNAISSANCE: "Reconnaissance",
    Phase.WEAPONIZATION: "Weaponization",
    Phase.DELIVERY: "Delivery",
    Phase.EXPLOITATION: "Exploitation",
    Phase.INSTALLATION: "Installation",
    Phase.COMMAND_AND_CONTROL: "CommandAndControl",
    Phase.ACTIONS_ON_OBJECTIVES: "ActionsOnObjectives",
}

_BY_LABEL = {label: phase for phase, label in _LABELS.items()}

PHASES: tuple[Phase, ...] = tuple(Phase)
