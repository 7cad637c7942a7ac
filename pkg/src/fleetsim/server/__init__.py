"""Central fleet server: stores, HTTP wire API, and client."""

from .state import FleetState, ServerConfig, SimClock, WallClock, HeartbeatRegression
from .httpapi import FleetHttpServer
from .client import ApiError, FleetClient

__all__ = [
    "ApiError",
    "FleetClient",
    "FleetHttpServer",
    "FleetState",
    "HeartbeatRegression",
    "ServerConfig",
    "SimClock",
    "WallClock",
]
