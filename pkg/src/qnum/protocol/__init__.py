"""Distributed protocol: headers, controllers and the network simulation."""

from .controllers import (
    AimdController,
    DACapacity,
    LinkController,
    PiController,
    SessionController,
    Variant,
    approx_rate_estimate,
    da_capacity,
)
from .header import Ack, DeliveryRecord, QDatagram, decohere
from .network import ProtocolConfig, SimResult, Simulation, SimulationBlowup

__all__ = [
    "Ack", "AimdController", "DACapacity", "DeliveryRecord", "LinkController",
    "PiController", "ProtocolConfig", "QDatagram", "SessionController", "SimResult",
    "Simulation", "SimulationBlowup", "Variant", "approx_rate_estimate", "da_capacity",
    "decohere",
]
