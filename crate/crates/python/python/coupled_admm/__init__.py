"""Distributed coupled-QP solver and incentive mechanisms."""

from ._coupled_admm import (
    CommGraph,
    Centralized,
    MechanismOutcome,
    Solution,
    StarInstance,
    TransportInstance,
)

__all__ = [
    "CommGraph",
    "Centralized",
    "MechanismOutcome",
    "Solution",
    "StarInstance",
    "TransportInstance",
]
