"""ITS-G5 broadcast channel: range gating, truncated-normal latency, per-node clock offsets."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from statistics import NormalDist
from typing import Hashable, Mapping

from .geospatial import haversine_distance
from .v2x_messages import GeoPosition

DEFAULT_RANGE_M = 800.0

# after this many rejected draws fall back to inverse-CDF sampling of the same truncated law
_MAX_REJECTIONS = 1000


class DegenerateDistribution(ValueError):
    pass


class UnknownNode(KeyError):
    pass


class MessageKind(Enum):
    CAM = "CAM"
    CPM = "CPM"


@dataclass(frozen=True)
class LatencyDistribution:
    """Normal latency truncated to [min_ms, max_ms]."""

    mean_ms: float
    std_ms: float = 0.0
    min_ms: float = 0.0
    max_ms: float = float("inf")

    def __post_init__(self):
        if self.std_ms < 0:
            raise ValueError("std_ms must be non-negative")
        if self.min_ms < 0:
            raise ValueError("min_ms must be non-negative")
        if not self.min_ms <= self.max_ms:
            raise ValueError("min_ms must not exceed max_ms")
        if not self.min_ms <= self.mean_ms <= self.max_ms:
            if self.std_ms == 0:
                raise DegenerateDistribution(f"zero-variance mean {self.mean_ms} outside bounds")
            raise ValueError("mean_ms must lie within [min_ms, max_ms]")

    @classmethod
    def fixed(cls, value_ms: float) -> LatencyDistribution:
        return cls(value_ms, 0.0, value_ms, value_ms)


# Averaged ITS-G5 latencies measured in the field (mean, std, min, max in ms)
CAM_LATENCY = LatencyDistribution(mean_ms=8.17, std_ms=2.23, min_ms=3.22, max_ms=22.91)
CPM_LATENCY = LatencyDistribution(mean_ms=5.25, std_ms=2.29, min_ms=0.19, max_ms=11.79)


@dataclass(frozen=True)
class ChannelModel:
    range_m: float = DEFAULT_RANGE_M
    cam_latency: LatencyDistribution = CAM_LATENCY
    cpm_latency: LatencyDistribution = CPM_LATENCY
    loss_probability: float = 0.0

    def __post_init__(self):
        if self.range_m < 0:
            raise ValueError("range_m must be non-negative")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must be within [0, 1]")

    def latency_for(self, kind: MessageKind) -> LatencyDistribution:
        return self.cam_latency if kind is MessageKind.CAM else self.cpm_latency


@dataclass(frozen=True)
class ClockModel:
    """Constant per-node clock offsets: node clock minus true simulation time, in ms."""

    offsets_ms: Mapping[Hashable, float] = field(default_factory=dict)


@dataclass(frozen=True)
class DeliveryEvent:
    rx_node: Hashable
    tx_node: Hashable
    kind: MessageKind
    payload: bytes
    send_time_true: float
    arrival_time_true: float


def in_range(tx: GeoPosition, rx: GeoPosition, model: ChannelModel) -> bool:
    return haversine_distance(tx, rx) <= model.range_m


def sample_latency(dist: LatencyDistribution, rng: random.Random) -> float:
    """One latency draw in ms; rejection-sampled into [min_ms, max_ms]."""
    if dist.std_ms == 0:
        if not dist.min_ms <= dist.mean_ms <= dist.max_ms:
            raise DegenerateDistribution(f"zero-variance mean {dist.mean_ms} outside bounds")
        return dist.mean_ms
    if dist.min_ms == dist.max_ms:
        return dist.min_ms
    for _ in range(_MAX_REJECTIONS):
        x = rng.gauss(dist.mean_ms, dist.std_ms)
        if dist.min_ms <= x <= dist.max_ms:
            return x
    nd = NormalDist(dist.mean_ms, dist.std_ms)
    lo, hi = nd.cdf(dist.min_ms), nd.cdf(dist.max_ms)
    if hi <= lo:
        raise DegenerateDistribution("truncation window carries no probability mass")
    return min(dist.max_ms, max(dist.min_ms, nd.inv_cdf(lo + (hi - lo) * rng.random())))


def transmit(
    msg: bytes,
    kind: MessageKind,
    tx_node: Hashable,
    rx_node: Hashable,
    send_time_true: float,
    model: ChannelModel,
    rng: random.Random,
    *,
    tx_pos: GeoPosition,
    rx_pos: GeoPosition,
) -> DeliveryEvent | None:
    """Send one broadcast copy from ``tx_node`` to ``rx_node``; ``None`` when out of range or lost."""
    if not in_range(tx_pos, rx_pos, model):
        return None
    if model.loss_probability > 0 and rng.random() < model.loss_probability:
        return None
    latency = sample_latency(model.latency_for(kind), rng)
    return DeliveryEvent(rx_node, tx_node, kind, msg, send_time_true, send_time_true + latency)


def node_clock(clock: ClockModel, node: Hashable, true_time_ms: float) -> float:
    try:
        return true_time_ms + clock.offsets_ms[node]
    except KeyError:
        raise UnknownNode(node) from None
