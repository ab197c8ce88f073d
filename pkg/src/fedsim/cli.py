"""Command line entry points.

Verbs: experiment (self-contained loopback run), server and client (the
same pieces over real sockets, for mixed-language federations), and
replay-bytes (analytic per-round traffic without training).

Exit codes: 0 success, 2 invalid configuration or arguments, 3 endpoint
address already in use.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

from .client import start_client
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import (
    build_client,
    build_strategy,
    client_name,
    derive_partitions,
    initial_weights,
    make_centralized_eval,
    replay_bytes,
    run_experiment,
    write_outputs,
)
from .server import ClientHandle, ClientManager, ServerConfig, run
from .transport import BindError, Connection, ServerEndpoint, serve

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ADDRESS_IN_USE = 3


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "out", None) is not None:
        config.out_dir = args.out
    return config


def cmd_experiment(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    result = run_experiment(config)
    print(f"{len(result.records)}/{config.rounds} rounds completed; outputs in {result.out_dir}")
    return EXIT_OK if result.completed else 1


def cmd_server(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    if config.address is None:
        raise ConfigError("[experiment] address: required for the server command")
    manager = ClientManager(sample_wait_s=config.sample_wait_s)

    def on_connect(conn: Connection) -> None:
        manager.register(ClientHandle(conn.client_name, conn.capabilities, conn))

    endpoint = ServerEndpoint(
        config.address, max_clients=max(config.num_clients, 1), read_timeout_s=config.read_timeout_s
    )
    handle = serve(endpoint, on_connect)
    print(f"serving at {handle.address}", flush=True)
    try:
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
    write_outputs(Path(config.out_dir), config, records, final)
    print(f"{len(records)}/{config.rounds} rounds completed; outputs in {config.out_dir}")
    return EXIT_OK if len(records) == config.rounds else 1


def cmd_client(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    if config.address is None:
        raise ConfigError("[experiment] address: required for the client command")
    if not 0 <= args.index < config.num_clients:
        raise ConfigError(
            f"client index {args.index} out of range for num_clients {config.num_clients}"
        )
    train_parts, test_parts = derive_partitions(config)
    client = build_client(config, args.index, train_parts[args.index], test_parts[args.index])
    reason = start_client(config.address, client, client_name(args.index))
    print(f"disconnected: {reason.name}")
    return EXIT_OK


def cmd_replay_bytes(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    rows = replay_bytes(config)
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["sampling_rate", "clients_per_round", "bytes_per_round", "gigabytes_per_round"])
    for row in rows:
        writer.writerow(
            [
                row["sampling_rate"],
                row["clients_per_round"],
                row["bytes_per_round"],
                repr(row["gigabytes_per_round"]),
            ]
        )
    text = out.getvalue()
    sys.stdout.write(text)
    if getattr(args, "out", None) is not None:
        target = Path(args.out)
        target.mkdir(parents=True, exist_ok=True)
        (target / "replay_bytes.csv").write_text(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Federated learning at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, with_out: bool = True) -> None:
        p.add_argument("--config", required=True, help="path to the experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if with_out:
            p.add_argument("--out", default=None, help="override the output directory")

    p_experiment = sub.add_parser("experiment", help="run server plus all clients over loopback")
    common(p_experiment)
    p_experiment.set_defaults(func=cmd_experiment)

    p_server = sub.add_parser("server", help="run a standalone server")
    common(p_server)
    p_server.set_defaults(func=cmd_server)

    p_client = sub.add_parser("client", help="run one client against a server")
    common(p_client, with_out=False)
    p_client.add_argument("--index", type=int, required=True, help="client index in [0, num_clients)")
    p_client.set_defaults(func=cmd_client)

    p_replay = sub.add_parser("replay-bytes", help="analytic bytes per round, no training")
    common(p_replay)
    p_replay.set_defaults(func=cmd_replay_bytes)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BindError as exc:
        print(f"bind error: {exc}", file=sys.stderr)
        return EXIT_ADDRESS_IN_USE


if __name__ == "__main__":
    sys.exit(main())
