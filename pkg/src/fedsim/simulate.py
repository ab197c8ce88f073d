"""Desk-scale heterogeneity: cap a connection's throughput and stretch a
client's compute time, so bandwidth and hardware gaps between clients can
be reproduced on one machine.

Shaping is a token bucket holding 0.1 s worth of bytes. The bucket starts
empty, so a transfer can never finish faster than the line rate allows,
and burst credit after idle time is capped at one bucket period. Compute
throttling sleeps (slowdown - 1) * t after a fit that took t seconds,
which reproduces the synchronous-round effect of slow hardware: the round
takes as long as its slowest participant.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

from .transport import Connection

UNLIMITED_BANDWIDTH = math.inf
BUCKET_PERIOD_S = 0.1


@dataclass(frozen=True)
class LinkProfile:
    """Per-direction link capacity; bandwidth may be the inf sentinel."""

    bandwidth_bps: float
    latency_s: float = 0.0

    def __post_init__(self) -> None:
        if not self.bandwidth_bps > 0:
            raise ValueError("bandwidth_bps must be > 0 (or inf for unlimited)")
        if math.isnan(self.bandwidth_bps):
            raise ValueError("bandwidth_bps must not be NaN")
        if not self.latency_s >= 0:
            raise ValueError("latency_s must be >= 0")

    @property
    def unlimited(self) -> bool:
        return math.isinf(self.bandwidth_bps)


UNLIMITED_LINK = LinkProfile(UNLIMITED_BANDWIDTH)


@dataclass(frozen=True)
class ComputeProfile:
    """Wall-time multiplier on local training; 1.0 is native speed."""

    slowdown: float = 1.0

    def __post_init__(self) -> None:
        if not self.slowdown >= 1.0:
            raise ValueError("slowdown must be >= 1.0")


class LinkShaper:
    """Token bucket over outbound bytes; one per shaped connection.

    The transport calls shape(nbytes, first_chunk) under the send lock
    before each chunk goes out, so bucket state needs no extra locking.
    latency_s is charged once per message, on its first chunk.
    """

    def __init__(
        self,
        profile: LinkProfile,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.profile = profile
        self._rate = profile.bandwidth_bps / 8.0  # bytes per second
        self._capacity = self._rate * BUCKET_PERIOD_S
        self._tokens = 0.0
        self._last: float | None = None
        self._clock = clock
        self._sleep = sleep

    def shape(self, nbytes: int, first_chunk: bool) -> None:
        if first_chunk and self.profile.latency_s > 0:
            self._sleep(self.profile.latency_s)
        if self.profile.unlimited or nbytes <= 0:
            return
        now = self._clock()
        if self._last is None:
            self._last = now
        elif now > self._last:
            self._tokens = min(self._capacity, self._tokens + (now - self._last) * self._rate)
            self._last = now
        if self._tokens >= nbytes:
            self._tokens -= nbytes
            return
        wait = (nbytes - self._tokens) / self._rate
        self._sleep(wait)
        self._tokens = 0.0
        # Credit any sleep overshoot as idle time on the next refill.
        self._last = self._last + wait


def shape_connection(conn: Connection, profile: LinkProfile) -> None:
    """Apply a profile to a connection's outbound direction.

    Each direction of a link is shaped by the endpoint that sends on it,
    with its own independent bucket.
    """
    if profile.unlimited and profile.latency_s == 0:
        conn.link_shaper = None
        return
    conn.link_shaper = LinkShaper(profile)


def throttle_compute(fit_fn, profile: ComputeProfile):
    """Wrap a callable so it appears slowdown times slower, results unchanged."""
    if profile.slowdown == 1.0:
        return fit_fn

    def throttled(*args, **kwargs):
        started = time.perf_counter()
        result = fit_fn(*args, **kwargs)
        time.sleep((profile.slowdown - 1.0) * (time.perf_counter() - started))
        return result

    return throttled


def compute_throttle_hook(profile: ComputeProfile):
    """Hook for TrainerClient.compute_throttle: gets the measured fit
    duration and sleeps out the remainder of the slowed-down time."""
    if profile.slowdown == 1.0:
        return None

    def hook(elapsed_s: float) -> None:
        time.sleep((profile.slowdown - 1.0) * elapsed_s)

    return hook
