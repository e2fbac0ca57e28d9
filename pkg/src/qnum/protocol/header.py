"""q-datagram headers, ACKs and delivery records."""

from __future__ import annotations

import math
from dataclasses import dataclass


class QDatagram:
    """Classical header travelling hop by hop, plus simulator bookkeeping.

    The header fields are the ones link controllers read and write. The rest
    (``hop``, storage clock, memory bank) is simulator state that a real node
    would keep next to the stored qubit.
    """

    __slots__ = (
        "src", "dst", "seq", "sid", "pauli",
        "delta_R", "lambda_sum", "w_prod", "wu_prime", "delta_mu", "weight",
        "hop", "t_created", "t_last_lle", "storage", "bank", "mark", "dropped",
        "processed", "epoch",
    )

    def __init__(self, src: int, dst: int, seq: int, sid: int, delta_R: float,
                 wu_prime: float, delta_mu: float, t_created: float):
        self.src = src
        self.dst = dst
        self.seq = seq
        self.sid = sid
        self.pauli = 0  # carried, never interpreted
        self.delta_R = delta_R
        self.lambda_sum = 0.0
        self.w_prod = 1.0
        self.wu_prime = wu_prime
        self.delta_mu = delta_mu
        self.weight = 1
        self.hop = 0
        self.t_created = t_created
        self.t_last_lle = t_created
        self.storage = 0.0  # summed qubit storage time (s)
        self.bank = None  # (node, link) memory bank currently holding it
        self.mark = False
        self.dropped = False
        self.processed = -1  # index of the last hop whose controller processed it
        self.epoch = 0  # session epoch; bumped when a session is terminated or suspended

    def __repr__(self):
        return (f"QDatagram(sid={self.sid}, seq={self.seq}, hop={self.hop}, "
                f"dR={self.delta_R:.4g}, lam_sum={self.lambda_sum:.4g}, "
                f"w_prod={self.w_prod:.4g}, weight={self.weight})")


@dataclass(slots=True)
class Ack:
    sid: int
    seq: int
    lambda_sum: float
    w_prod: float
    w_delivered: float
    mark: bool = False


@dataclass(frozen=True, slots=True)
class DeliveryRecord:
    sid: int
    t_created: float
    t_delivered: float
    w_nominal: float
    storage_s: float
    w_delivered: float
    weight: int = 1


def decohere(w_value: float, storage_s: float, t_c: float) -> float:
    """Werner value after ``storage_s`` seconds of depolarizing memory noise."""
    if storage_s < 0:
        raise ValueError("storage time must be non-negative")
    if t_c <= 0:
        raise ValueError("coherence time must be positive")
    if math.isinf(t_c):
        return w_value
    return w_value * math.exp(-storage_s / t_c)
