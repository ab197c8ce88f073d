"""Self-contained experiment runs: derive data and model from a config,
host the server plus all clients in one process, and write the outputs
(metrics.csv, timings.csv, final_weights.bin, config.ini).

Seed discipline: every random artifact draws from its own stream mixed
out of the master seed with a fixed tag, so changing one knob (say, the
partition) never shifts any other stream.
"""

from __future__ import annotations

import csv
import itertools
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .client import Client, ClientCrash, TrainerClient, start_client
from .config import ClientProfile, ExperimentConfig, resolved_ini
from .datasets import LocalDataset, PartitionSpec, SyntheticSpec, make_synthetic, partition
from .protocol import ConfigMap, FitIns, FitRes, message_byte_size
from .rng import mix_seed
from .server import ClientHandle, ClientManager, RoundRecord, ServerConfig, run
from .simulate import ComputeProfile, LinkProfile, compute_throttle_hook, shape_connection
from .strategies import (
    TAG_FIT_SEED,
    FedAvg,
    FedAvgConfig,
    FedFS,
    FedProx,
    FaultTolerantFedAvg,
    QFedAvg,
    Strategy,
    _to_i64,
)
from .tensors import Tensor, Weights, encode_weights
from .training import TrainerModel, evaluate_model, init_weights
from .transport import Connection, ServerEndpoint, serve

# Sub-seed tags: one independent stream per random artifact.
TAG_MODEL_INIT = 0
TAG_TRAIN_DATA = 1
TAG_TEST_DATA = 2
TAG_TRAIN_PARTITION = 3
TAG_TEST_PARTITION = 4
TAG_HOLDOUT_DATA = 5
TAG_TASK = 6  # class means shared by train, test and holdout draws

METRICS_COLUMNS = (
    "round",
    "loss",
    "accuracy",
    "centralized_loss",
    "centralized_accuracy",
    "num_success",
    "num_failures",
    "bytes_total",
    "wall_time_s",
)

_mem_counter = itertools.count(1)


def client_name(index: int) -> str:
    return f"client-{index:04d}"


def build_model(config: ExperimentConfig) -> TrainerModel:
    hidden = config.hidden_width if config.model_kind == "mlp" else None
    return TrainerModel(config.num_features, config.num_classes, hidden)


def build_strategy(config: ExperimentConfig) -> Strategy:
    base = FedAvgConfig(
        clients_per_round=config.clients_per_round,
        local_epochs=config.local_epochs,
        learning_rate=config.learning_rate,
        seed=config.seed,
        batch_size=config.batch_size,
        evaluate_clients=config.evaluate_clients,
    )
    if config.strategy == "fedavg":
        return FedAvg(base)
    if config.strategy == "fault_tolerant":
        return FaultTolerantFedAvg(base, min_completion=config.min_completion)
    if config.strategy == "fedprox":
        return FedProx(base, mu=config.proximal_mu)
    if config.strategy == "qfedavg":
        return QFedAvg(base, q=config.q, lipschitz=config.lipschitz)
    if config.strategy == "fedfs":
        return FedFS(base, fast_fraction=config.fast_fraction, slow_epoch_scale=config.slow_epoch_scale)
    raise AssertionError(f"unhandled strategy {config.strategy}")


def derive_partitions(config: ExperimentConfig) -> tuple[list[LocalDataset], list[LocalDataset]]:
    """Per-client train and test splits, both with the config's skew."""
    task_seed = mix_seed(config.seed, TAG_TASK)
    train = make_synthetic(
        SyntheticSpec(
            config.train_examples,
            config.num_features,
            config.num_classes,
            config.class_separation,
            seed=mix_seed(config.seed, TAG_TRAIN_DATA),
            task_seed=task_seed,
        )
    )
    test = make_synthetic(
        SyntheticSpec(
            config.test_examples,
            config.num_features,
            config.num_classes,
            config.class_separation,
            seed=mix_seed(config.seed, TAG_TEST_DATA),
            task_seed=task_seed,
        )
    )
    train_parts = partition(
        train, PartitionSpec(config.num_clients, config.iid_fraction, seed=mix_seed(config.seed, TAG_TRAIN_PARTITION))
    )
    test_parts = partition(
        test, PartitionSpec(config.num_clients, config.iid_fraction, seed=mix_seed(config.seed, TAG_TEST_PARTITION))
    )
    return train_parts, test_parts


def initial_weights(config: ExperimentConfig) -> Weights:
    return init_weights(build_model(config), mix_seed(config.seed, TAG_MODEL_INIT))


def make_centralized_eval(config: ExperimentConfig):
    """Server-side holdout evaluation, or None when disabled."""
    if not config.centralized_evaluate:
        return None
    model = build_model(config)
    holdout = make_synthetic(
        SyntheticSpec(
            config.test_examples,
            config.num_features,
            config.num_classes,
            config.class_separation,
            seed=mix_seed(config.seed, TAG_HOLDOUT_DATA),
            task_seed=mix_seed(config.seed, TAG_TASK),
        )
    )

    def evaluate(weights: Weights) -> tuple[float, float]:
        loss, accuracy, _ = evaluate_model(model, weights, holdout)
        return float(loss), float(accuracy)

    return evaluate


class FailureInjectingClient(Client):
    """Wraps a client to misbehave at one configured round."""

    def __init__(self, inner: Client, failure: tuple[int, str], stall_sleep_s: float):
        self.inner = inner
        self.failure_round, self.failure_mode = failure
        self.stall_sleep_s = stall_sleep_s

    def get_weights(self) -> Weights:
        return self.inner.get_weights()

    def fit(self, weights: Weights, config: ConfigMap):
        if int(config.get("round", -1)) == self.failure_round:
            if self.failure_mode == "crash":
                raise ClientCrash("injected crash")
            if self.failure_mode == "error":
                raise RuntimeError("injected failure")
            time.sleep(self.stall_sleep_s)  # "stall": miss the deadline
        return self.inner.fit(weights, config)

    def evaluate(self, weights: Weights, config: ConfigMap):
        return self.inner.evaluate(weights, config)


def build_client(config: ExperimentConfig, index: int, train: LocalDataset, test: LocalDataset) -> Client:
    model = build_model(config)
    client: Client = TrainerClient(model, train, test, init_seed=mix_seed(config.seed, TAG_MODEL_INIT))
    profile = config.profile_for(index)
    if profile.slowdown > 1.0:
        client.compute_throttle = compute_throttle_hook(ComputeProfile(profile.slowdown))
    if profile.failure is not None:
        client = FailureInjectingClient(client, profile.failure, stall_sleep_s=config.read_timeout_s * 2)
    return client


def _unique_mem_address() -> str:
    return f"mem:experiment-{os.getpid()}-{next(_mem_counter)}"


def _index_of(name: str) -> int | None:
    prefix, dash, digits = name.rpartition("-")
    if prefix == "client" and digits.isdigit():
        return int(digits)
    return None


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    final_weights: Weights
    out_dir: Path
    completed: bool  # all configured rounds ran


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    """End-to-end loopback run; see the module docstring for outputs."""
    address = config.address or _unique_mem_address()
    manager = ClientManager(sample_wait_s=config.sample_wait_s)

    def on_server_connect(conn: Connection) -> None:
        index = _index_of(conn.client_name or "")
        if index is not None:
            profile = config.profile_for(index)
            shape_connection(conn, LinkProfile(profile.bandwidth_bps, profile.latency_s))
        manager.register(ClientHandle(conn.client_name, conn.capabilities, conn))

    endpoint = ServerEndpoint(address, max_clients=max(config.num_clients, 1), read_timeout_s=config.read_timeout_s)
    handle = serve(endpoint, on_server_connect)
    address = handle.address

    train_parts, test_parts = derive_partitions(config)
    threads = []
    try:
        for i in range(config.num_clients):
            client = build_client(config, i, train_parts[i], test_parts[i])
            profile = config.profile_for(i)

            def attach_upload_shaper(conn: Connection, profile: ClientProfile = profile) -> None:
                shape_connection(conn, LinkProfile(profile.bandwidth_bps, profile.latency_s))

            thread = threading.Thread(
                target=start_client,
                args=(address, client, client_name(i)),
                kwargs={"on_connect": None if profile.is_default else attach_upload_shaper},
                daemon=True,
                name=client_name(i),
            )
            thread.start()
            threads.append(thread)

        server_config = ServerConfig(
            num_rounds=config.rounds,
            read_timeout_s=config.read_timeout_s,
            min_available_clients=config.resolved_min_available(),
            seed=config.seed,
            sample_wait_s=config.sample_wait_s,
            distributed_evaluate=config.distributed_evaluate,
        )
        records, final = run(
            build_strategy(config),
            manager,
            server_config,
            initial_weights(config),
            centralized_eval=make_centralized_eval(config),
        )
    finally:
        handle.shutdown()
        for thread in threads:
            thread.join(timeout=5.0)

    target = Path(out_dir if out_dir is not None else config.out_dir)
    write_outputs(target, config, records, final)
    return ExperimentResult(records, final, target, completed=len(records) == config.rounds)


def write_outputs(out_dir: Path, config: ExperimentConfig, records: list[RoundRecord], final: Weights) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / "metrics.csv", records)
    with (out_dir / "timings.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "wall_time_s"])
        for record in records:
            writer.writerow([record.round_index, repr(record.wall_time_s)])
    (out_dir / "final_weights.bin").write_bytes(encode_weights(final))
    (out_dir / "config.ini").write_text(resolved_ini(config))


def write_metrics_csv(path: Path, records: list[RoundRecord]) -> None:
    """One row per round, fixed column order.

    wall_time_s is written as 0.0: the timing of a run is not part of
    its deterministic output (see timings.csv for the measured values).
    """

    def fmt(value: float | None) -> str:
        return "" if value is None else repr(float(value))

    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.round_index,
                    fmt(r.loss),
                    fmt(r.accuracy),
                    fmt(r.centralized_loss),
                    fmt(r.centralized_accuracy),
                    r.num_success,
                    r.num_failures,
                    r.bytes_total,
                    repr(0.0),
                ]
            )


# --- analytic bytes ----------------------------------------------------------


def replay_weights(config: ExperimentConfig) -> Weights:
    """Zero-filled stand-in model of the configured size and dtype."""
    if config.replay_elements == 0:
        return Weights([])
    dtype = np.float32 if config.replay_dtype == "f32" else np.float64
    return Weights([Tensor("w", np.zeros(config.replay_elements, dtype=dtype))])


def fit_message_bytes(config: ExperimentConfig, weights: Weights) -> tuple[int, int]:
    """(FitIns, FitRes) frame sizes for one client with these weights."""
    fit_config: ConfigMap = {
        "round": 1,
        "epochs": config.local_epochs,
        "lr": config.learning_rate,
        "seed": _to_i64(mix_seed(config.seed, 1, TAG_FIT_SEED)),
    }
    if config.batch_size is not None:
        fit_config["batch_size"] = config.batch_size
    ins = FitIns(weights, fit_config)
    res = FitRes(weights, 1, {"train_loss": 0.0, "fit_duration_s": 0.0})
    return message_byte_size(ins), message_byte_size(res)


def replay_bytes(config: ExperimentConfig) -> list[dict[str, float]]:
    """Bytes per round across sampling rates 0.1 .. 1.0, no training.

    A round moves the model down to each selected client and back up, so
    bytes scale linearly with the sample size; the per-message framing
    overhead is computed exactly rather than estimated.
    """
    weights = replay_weights(config)
    ins_bytes, res_bytes = fit_message_bytes(config, weights)
    population = config.replay_num_clients or config.num_clients
    rows = []
    for tenths in range(1, 11):
        rate = tenths / 10.0
        sample_size = max(1, int(rate * population + 0.5))
        total = sample_size * (ins_bytes + res_bytes)
        rows.append(
            {
                "sampling_rate": rate,
                "clients_per_round": sample_size,
                "bytes_per_round": total,
                "gigabytes_per_round": total / 1e9,
            }
        )
    return rows
