"""The round engine: client bookkeeping and the per-round sequence
select -> distribute -> collect -> aggregate (-> evaluate), with policy
delegated to a Strategy.

Rounds are synchronous and sequential; within a round all client
requests run concurrently and the loop joins them. Individual client
failures are data for the strategy, never errors. Determinism contract:
with a loopback transport, fixed seeds and deterministic clients, two
runs produce identical records and bit-identical final weights, which
is why results are sorted by client id before aggregation.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .protocol import ConfigMap, EvaluateRes, FitRes, ProtocolError
from .rng import Xoshiro256
from .strategies import Strategy
from .tensors import Weights
from .transport import ClientError, Connection, TransportError

log = logging.getLogger("fedsim.server")

DEFAULT_READ_TIMEOUT_S = 600.0
DEFAULT_SAMPLE_WAIT_S = 30.0


class InsufficientClients(RuntimeError):
    """Fewer connected clients than the operation needs, after waiting."""


@dataclass
class HistoryEntry:
    round_index: int
    duration_s: float
    bytes_up: int
    bytes_down: int
    outcome: str  # "ok" or "failed"


@dataclass
class ClientHandle:
    client_id: str
    capabilities: ConfigMap
    connection: Connection
    history: list[HistoryEntry] = field(default_factory=list)


@dataclass
class RoundRecord:
    round_index: int
    num_selected: int
    num_success: int
    num_failures: int
    loss: float | None = None
    accuracy: float | None = None
    centralized_loss: float | None = None
    centralized_accuracy: float | None = None
    bytes_total: int = 0
    wall_time_s: float = 0.0
    num_warnings: int = 0


@dataclass
class ServerConfig:
    num_rounds: int
    read_timeout_s: float = DEFAULT_READ_TIMEOUT_S
    min_available_clients: int = 1
    seed: int = 0
    sample_wait_s: float = DEFAULT_SAMPLE_WAIT_S
    distributed_evaluate: bool = True  # advisory evaluate pass after each fit

    def __post_init__(self) -> None:
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")


class ClientManager:
    """Thread-safe registry: transport callbacks register/unregister while
    the round loop samples."""

    def __init__(self, sample_wait_s: float = DEFAULT_SAMPLE_WAIT_S):
        self._handles: dict[str, ClientHandle] = {}
        self._cond = threading.Condition()
        self.sample_wait_s = sample_wait_s

    def register(self, handle: ClientHandle) -> None:
        """Add a client; a duplicate id evicts and closes the old handle."""
        with self._cond:
            old = self._handles.get(handle.client_id)
            self._handles[handle.client_id] = handle
            self._cond.notify_all()
        if old is not None:
            old.connection.close()
        # Drop the registration as soon as the transport notices the
        # connection is gone. Identity-checked: closing an evicted handle
        # must not take its successor down with it.
        handle.connection.add_close_callback(lambda _conn: self._remove(handle))

    def _remove(self, handle: ClientHandle) -> None:
        with self._cond:
            if self._handles.get(handle.client_id) is handle:
                del self._handles[handle.client_id]

    def unregister(self, client_id: str) -> None:
        with self._cond:
            self._handles.pop(client_id, None)

    def count(self) -> int:
        with self._cond:
            return len(self._handles)

    def get(self, client_id: str) -> ClientHandle | None:
        with self._cond:
            return self._handles.get(client_id)

    def all_connected(self, min_count: int = 0, wait_s: float | None = None) -> list[ClientHandle]:
        """Sorted-by-id snapshot; blocks until min_count are connected."""
        wait_s = self.sample_wait_s if wait_s is None else wait_s
        with self._cond:
            ok = self._cond.wait_for(lambda: len(self._handles) >= min_count, timeout=wait_s)
            if not ok:
                raise InsufficientClients(
                    f"need {min_count} clients, have {len(self._handles)} after {wait_s:.1f}s"
                )
            return [self._handles[cid] for cid in sorted(self._handles)]

    def sample(self, k: int, rng: Xoshiro256, wait_s: float | None = None) -> list[ClientHandle]:
        """k distinct clients, uniform under rng: shuffle the sorted id
        list, take the head. Deterministic given registry contents."""
        if k < 1:
            raise ValueError("k must be >= 1")
        handles = self.all_connected(min_count=k, wait_s=wait_s)
        ids = [h.client_id for h in handles]
        rng.shuffle(ids)
        by_id = {h.client_id: h for h in handles}
        return [by_id[cid] for cid in ids[:k]]


def _run_requests(pairs, round_index: int, timeout: float, expected_type, record_history: bool):
    """Fan out one instruction per client; join; split results/failures."""
    from .transport import request  # local import keeps module load cheap

    results: list[tuple[ClientHandle, object]] = []
    failures: list[tuple[ClientHandle, Exception]] = []
    lock = threading.Lock()

    def one(pair):
        handle, ins = pair
        conn = handle.connection
        sent_before = conn.bytes_sent
        received_before = conn.bytes_received
        started = time.perf_counter()
        outcome = "failed"
        try:
            reply = request(conn, ins, timeout)
            if not isinstance(reply, expected_type):
                raise ProtocolError(f"unexpected {type(reply).__name__}")
            outcome = "ok"
            with lock:
                results.append((handle, reply))
        except (TransportError, ProtocolError) as exc:
            with lock:
                failures.append((handle, exc))
        finally:
            duration = time.perf_counter() - started
            entry = HistoryEntry(
                round_index,
                duration,
                conn.bytes_received - received_before,
                conn.bytes_sent - sent_before,
                outcome,
            )
            if record_history:
                handle.history.append(entry)

    if pairs:
        with ThreadPoolExecutor(max_workers=len(pairs)) as pool:
            list(pool.map(one, pairs))
    results.sort(key=lambda item: item[0].client_id)
    failures.sort(key=lambda item: item[0].client_id)
    return results, failures


def _bytes_delta(pairs, before: dict[str, tuple[int, int]]) -> int:
    total = 0
    for handle, _ in pairs:
        sent0, received0 = before[handle.client_id]
        conn = handle.connection
        total += (conn.bytes_sent - sent0) + (conn.bytes_received - received0)
    return total


def _snapshot_counters(pairs) -> dict[str, tuple[int, int]]:
    return {h.client_id: (h.connection.bytes_sent, h.connection.bytes_received) for h, _ in pairs}


def fit_round(
    strategy: Strategy,
    manager: ClientManager,
    global_weights: Weights,
    round_index: int,
    timeout: float = DEFAULT_READ_TIMEOUT_S,
):
    """One training round. Returns (new_weights_or_None, partial record)."""
    pairs = strategy.configure_fit(round_index, global_weights, manager)
    counters = _snapshot_counters(pairs)
    results, failures = _run_requests(pairs, round_index, timeout, FitRes, record_history=True)
    # Closed connections have already dropped out of the manager via the
    # close callback; failures only need reporting here.
    for handle, exc in failures:
        log.info("round %d: client %s failed fit: %s", round_index, handle.client_id, exc)
    new_weights = strategy.aggregate_fit(round_index, results, failures)
    record = RoundRecord(
        round_index=round_index,
        num_selected=len(pairs),
        num_success=len(results),
        num_failures=len(failures),
        bytes_total=_bytes_delta(pairs, counters),
        num_warnings=getattr(strategy, "warnings_last_round", 0),
    )
    return new_weights, record


def evaluate_round(
    strategy: Strategy,
    manager: ClientManager,
    global_weights: Weights,
    round_index: int,
    timeout: float = DEFAULT_READ_TIMEOUT_S,
):
    """One distributed evaluation pass. Returns ((loss, acc) or None,
    num_success, num_failures, bytes)."""
    pairs = strategy.configure_evaluate(round_index, global_weights, manager)
    counters = _snapshot_counters(pairs)
    results, failures = _run_requests(pairs, round_index, timeout, EvaluateRes, record_history=False)
    for handle, exc in failures:
        log.info("round %d: client %s failed evaluate: %s", round_index, handle.client_id, exc)
    aggregated = strategy.aggregate_evaluate(round_index, results, failures)
    return aggregated, len(results), len(failures), _bytes_delta(pairs, counters)


def run(
    strategy: Strategy,
    manager: ClientManager,
    config: ServerConfig,
    initial: Weights,
    centralized_eval=None,
) -> tuple[list[RoundRecord], Weights]:
    """Execute config.num_rounds rounds; returns (records, final weights).

    Evaluation is advisory: a failed or empty evaluate pass leaves the
    record's loss/accuracy unset and training continues. Insufficient
    clients aborts, returning the records collected so far.
    """
    records: list[RoundRecord] = []
    global_weights = initial
    try:
        manager.all_connected(min_count=config.min_available_clients, wait_s=config.sample_wait_s)
    except InsufficientClients as exc:
        log.warning("startup aborted: %s", exc)
        return records, global_weights
    for round_index in range(1, config.num_rounds + 1):
        started = time.perf_counter()
        try:
            new_weights, record = fit_round(
                strategy, manager, global_weights, round_index, timeout=config.read_timeout_s
            )
        except InsufficientClients as exc:
            log.warning("round %d aborted: %s", round_index, exc)
            break
        if new_weights is not None:
            global_weights = new_weights
        else:
            log.info("round %d: strategy declined the update", round_index)
        aggregated, eval_bytes = None, 0
        if config.distributed_evaluate:
            try:
                aggregated, _, _, eval_bytes = evaluate_round(
                    strategy, manager, global_weights, round_index, timeout=config.read_timeout_s
                )
            except InsufficientClients:
                pass
        if aggregated is not None:
            record.loss, record.accuracy = aggregated
        record.bytes_total += eval_bytes
        if centralized_eval is not None:
            record.centralized_loss, record.centralized_accuracy = centralized_eval(global_weights)
        record.wall_time_s = time.perf_counter() - started
        records.append(record)
        log.info(
            "round %d/%d: success=%d failures=%d loss=%s acc=%s bytes=%d",
            round_index,
            config.num_rounds,
            record.num_success,
            record.num_failures,
            record.loss,
            record.accuracy,
            record.bytes_total,
        )
    return records, global_weights
