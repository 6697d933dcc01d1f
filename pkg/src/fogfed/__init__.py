"""Federated QoS prediction and stable fog-federation formation."""

from fogfed.domain import (
    Application,
    EconomicModel,
    FormationModel,
    Provider,
    Scenario,
    Server,
    StrategyProfile,
    User,
)

__all__ = [
    "Application",
    "EconomicModel",
    "FormationModel",
    "Provider",
    "Scenario",
    "Server",
    "StrategyProfile",
    "User",
]

__version__ = "0.1.0"
