"""Client side: the Client interface, a trainer-backed implementation,
and the app loop that serves instructions until told to go away.
"""

from __future__ import annotations

import abc
import time
from typing import Callable

from .datasets import LocalDataset
from .protocol import (
    ClientHello,
    ConfigMap,
    DisconnectReason,
    DisconnectRes,
    ErrorRes,
    EvaluateIns,
    EvaluateRes,
    FitIns,
    FitRes,
    GetWeightsIns,
    GetWeightsRes,
    Message,
    ReconnectIns,
)
from .tensors import Weights
from .training import DEFAULT_BATCH_SIZE, TrainerModel, evaluate_model, init_weights, sgd_fit
from .transport import ConnectionClosed, TransportError, dial

ERR_GET_WEIGHTS = 1
ERR_FIT = 2
ERR_EVALUATE = 3


class ClientCrash(Exception):
    """Abandon the connection instead of answering (failure injection).

    Unlike every other exception a client operation raises, this one is
    not converted into an ErrorRes: the app loop closes the socket and
    returns, which the server observes as a mid-request disconnect.
    """


class Client(abc.ABC):
    """The three client-side operations the server can invoke."""

    @abc.abstractmethod
    def get_weights(self) -> Weights: ...

    @abc.abstractmethod
    def fit(self, weights: Weights, config: ConfigMap) -> tuple[Weights, int, ConfigMap]: ...

    @abc.abstractmethod
    def evaluate(self, weights: Weights, config: ConfigMap) -> tuple[float, int, ConfigMap]: ...


class TrainerClient(Client):
    """Client that trains the built-in models on a local partition.

    Consumed config keys: "epochs", "lr", "proximal_mu", "batch_size",
    "seed"; unknown keys are ignored. fit runs from the received global
    weights, never from local state, and reports "train_loss" plus
    "fit_duration_s" in its metrics.
    """

    def __init__(
        self,
        model: TrainerModel,
        train_data: LocalDataset,
        eval_data: LocalDataset | None = None,
        init_seed: int = 0,
    ):
        self.model = model
        self.train_data = train_data
        self.eval_data = eval_data if eval_data is not None else train_data
        self._weights = init_weights(model, init_seed)
        # Optional hook installed by sim-tools to model slow hardware.
        self.compute_throttle = None

    def get_weights(self) -> Weights:
        return self._weights

    def fit(self, weights: Weights, config: ConfigMap) -> tuple[Weights, int, ConfigMap]:
        started = time.perf_counter()
        epochs = int(config.get("epochs", 1))
        lr = float(config.get("lr", 0.1))
        mu = float(config.get("proximal_mu", 0.0))
        batch_size = int(config.get("batch_size", DEFAULT_BATCH_SIZE))
        seed = int(config.get("seed", 0))
        new_weights, train_loss = sgd_fit(
            self.model,
            weights,
            self.train_data,
            epochs=epochs,
            lr=lr,
            mu=mu,
            global_ref=weights,
            batch_size=batch_size,
            seed=seed,
        )
        self._weights = new_weights
        if self.compute_throttle is not None:
            self.compute_throttle(time.perf_counter() - started)
        duration = time.perf_counter() - started
        metrics: ConfigMap = {"train_loss": float(train_loss), "fit_duration_s": duration}
        return new_weights, len(self.train_data), metrics

    def evaluate(self, weights: Weights, config: ConfigMap) -> tuple[float, int, ConfigMap]:
        loss, accuracy, n = evaluate_model(self.model, weights, self.eval_data)
        return float(loss), n, {"accuracy": float(accuracy)}


def _serve_one(client: Client, ins: Message) -> Message:
    """Dispatch one instruction; exceptions become ErrorRes frames."""
    try:
        if isinstance(ins, GetWeightsIns):
            return GetWeightsRes(client.get_weights())
        if isinstance(ins, FitIns):
            new_weights, n, metrics = client.fit(ins.weights, ins.config)
            return FitRes(new_weights, n, metrics)
        if isinstance(ins, EvaluateIns):
            loss, n, metrics = client.evaluate(ins.weights, ins.config)
            return EvaluateRes(loss, n, metrics)
    except ClientCrash:
        raise
    except Exception as exc:  # surfaced as data, connection stays up
        code = {
            GetWeightsIns: ERR_GET_WEIGHTS,
            FitIns: ERR_FIT,
            EvaluateIns: ERR_EVALUATE,
        }.get(type(ins), ERR_FIT)
        detail = f"{type(exc).__name__}: {exc}"
        return ErrorRes(code, detail[:2000])
    raise AssertionError(f"unhandled instruction {type(ins).__name__}")


def start_client(
    address: str,
    client: Client,
    client_name: str,
    capabilities: ConfigMap | None = None,
    on_connect: Callable[..., None] | None = None,
) -> DisconnectReason:
    """Dial, introduce, then serve instructions until disconnected.

    ReconnectIns with seconds > 0: acknowledge, close, sleep, redial.
    ReconnectIns with seconds == 0: acknowledge and return SHUTDOWN.
    Transport loss returns ERROR. A failing client operation answers
    ErrorRes and keeps serving. on_connect(conn) runs after each dial,
    letting callers decorate the connection (e.g. a link shaper).
    """
    hello = ClientHello(client_name, dict(capabilities or {}))
    while True:
        conn = dial(address, hello)
        if on_connect is not None:
            on_connect(conn)
        try:
            while True:
                ins = conn.receive()
                if isinstance(ins, ReconnectIns):
                    if ins.seconds == 0:
                        try:
                            conn.send(DisconnectRes(DisconnectReason.SHUTDOWN))
                        except TransportError:
                            pass
                        conn.close()
                        return DisconnectReason.SHUTDOWN
                    conn.send(DisconnectRes(DisconnectReason.RECONNECT_LATER))
                    conn.close()
                    time.sleep(ins.seconds)
                    break  # redial
                conn.send(_serve_one(client, ins))
        except ClientCrash:
            conn.close()
            return DisconnectReason.ERROR
        except ConnectionClosed:
            conn.close()
            return DisconnectReason.ERROR
        except TransportError:
            conn.close()
            return DisconnectReason.ERROR
