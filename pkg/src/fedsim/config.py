"""Experiment configuration: a sectioned key-value file parsed into one
typed, validated object.

Sections and keys are strict: unknown names are errors, so typos surface
as diagnostics instead of silently falling back to defaults. Every error
message names the offending section and key.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

STRATEGY_NAMES = ("fedavg", "fault_tolerant", "fedprox", "qfedavg", "fedfs")
MODEL_KINDS = ("logistic", "mlp")
FAILURE_MODES = ("crash", "error", "stall")
REPLAY_DTYPES = ("f32", "f64")

_SECTIONS = ("experiment", "server", "strategy", "model", "data", "clients", "replay")
_REQUIRED = object()


class ConfigError(ValueError):
    """Invalid or missing configuration; the message names the key."""


@dataclass(frozen=True)
class ClientProfile:
    """Per-client heterogeneity knobs; defaults mean 'unremarkable'."""

    bandwidth_bps: float = math.inf
    latency_s: float = 0.0
    slowdown: float = 1.0
    failure: tuple[int, str] | None = None  # (round, mode)

    @property
    def is_default(self) -> bool:
        return (
            math.isinf(self.bandwidth_bps)
            and self.latency_s == 0.0
            and self.slowdown == 1.0
            and self.failure is None
        )


DEFAULT_PROFILE = ClientProfile()


@dataclass
class ExperimentConfig:
    # [experiment]
    rounds: int = 2
    num_clients: int = 4
    seed: int = 0
    out_dir: str = "runs/experiment"
    address: str | None = None
    # [server]
    read_timeout_s: float = 10.0
    min_available_clients: int | None = None  # None: wait for every client
    sample_wait_s: float = 30.0
    distributed_evaluate: bool = True
    centralized_evaluate: bool = False
    # [strategy]
    strategy: str = "fedavg"
    clients_per_round: int = 2
    local_epochs: int = 1
    learning_rate: float = 0.1
    batch_size: int | None = None
    evaluate_clients: int | None = None
    min_completion: int | None = None
    proximal_mu: float | None = None
    q: float | None = None
    lipschitz: float | None = None
    fast_fraction: float | None = None
    slow_epoch_scale: float | None = None
    # [model]
    model_kind: str = "logistic"
    num_features: int = 20
    num_classes: int = 10
    hidden_width: int | None = None
    # [data]
    train_examples: int = 1000
    test_examples: int = 200
    class_separation: float = 6.0
    iid_fraction: float = 1.0
    # [clients]
    profiles: dict[int, ClientProfile] = field(default_factory=dict)
    # [replay]
    replay_elements: int = 25_600_000
    replay_dtype: str = "f32"
    replay_num_clients: int | None = None  # defaults to num_clients

    def profile_for(self, index: int) -> ClientProfile:
        return self.profiles.get(index, DEFAULT_PROFILE)

    def resolved_min_available(self) -> int:
        return self.num_clients if self.min_available_clients is None else self.min_available_clients


class _Section:
    """Typed, consumed-key-tracking view over one INI section."""

    def __init__(self, name: str, raw: dict[str, str]):
        self.name = name
        self._raw = raw
        self._seen: set[str] = set()

    def _fetch(self, key: str, default):
        self._seen.add(key)
        if key in self._raw:
            return self._raw[key]
        if default is _REQUIRED:
            raise ConfigError(f"[{self.name}] {key}: required key is missing")
        return None

    def get_str(self, key: str, default=_REQUIRED, choices: tuple[str, ...] | None = None) -> str | None:
        text = self._fetch(key, default)
        if text is None:
            return default if default is not _REQUIRED else None
        text = text.strip()
        if choices is not None and text not in choices:
            raise ConfigError(f"[{self.name}] {key}: expected one of {', '.join(choices)}, got {text!r}")
        return text

    def get_int(self, key: str, default=_REQUIRED, minimum: int | None = None) -> int | None:
        text = self._fetch(key, default)
        if text is None:
            return default if default is not _REQUIRED else None
        try:
            value = int(text.strip())
        except ValueError:
            raise ConfigError(f"[{self.name}] {key}: expected an integer, got {text!r}") from None
        if minimum is not None and value < minimum:
            raise ConfigError(f"[{self.name}] {key}: must be >= {minimum}, got {value}")
        return value

    def get_float(
        self,
        key: str,
        default=_REQUIRED,
        minimum: float | None = None,
        maximum: float | None = None,
        allow_inf: bool = False,
    ) -> float | None:
        text = self._fetch(key, default)
        if text is None:
            return default if default is not _REQUIRED else None
        try:
            value = float(text.strip())
        except ValueError:
            raise ConfigError(f"[{self.name}] {key}: expected a number, got {text!r}") from None
        if math.isnan(value):
            raise ConfigError(f"[{self.name}] {key}: must not be NaN")
        if math.isinf(value) and not allow_inf:
            raise ConfigError(f"[{self.name}] {key}: must be finite")
        if minimum is not None and value < minimum:
            raise ConfigError(f"[{self.name}] {key}: must be >= {minimum}, got {value}")
        if maximum is not None and value > maximum:
            raise ConfigError(f"[{self.name}] {key}: must be <= {maximum}, got {value}")
        return value

    def get_bool(self, key: str, default=_REQUIRED) -> bool | None:
        text = self._fetch(key, default)
        if text is None:
            return default if default is not _REQUIRED else None
        lowered = text.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{self.name}] {key}: expected a boolean, got {text!r}")

    def reject_unknown(self) -> None:
        unknown = sorted(set(self._raw) - self._seen)
        if unknown:
            raise ConfigError(f"[{self.name}] unknown key: {unknown[0]}")


def _parse_clients_section(raw: dict[str, str], num_clients: int) -> dict[int, ClientProfile]:
    """Keys look like bandwidth_bps.3, latency_s.3, slowdown.7, fail.5."""
    fields: dict[int, dict[str, object]] = {}
    for key, text in raw.items():
        base, dot, index_text = key.partition(".")
        if not dot or base not in ("bandwidth_bps", "latency_s", "slowdown", "fail"):
            raise ConfigError(f"[clients] unknown key: {key}")
        try:
            index = int(index_text)
        except ValueError:
            raise ConfigError(f"[clients] {key}: client index must be an integer") from None
        if not 0 <= index < num_clients:
            raise ConfigError(
                f"[clients] {key}: client index {index} out of range for num_clients {num_clients}"
            )
        slot = fields.setdefault(index, {})
        text = text.strip()
        if base == "fail":
            round_text, colon, mode = text.partition(":")
            if not colon or mode not in FAILURE_MODES:
                raise ConfigError(
                    f"[clients] {key}: expected ROUND:MODE with mode one of {', '.join(FAILURE_MODES)}"
                )
            try:
                fail_round = int(round_text)
            except ValueError:
                raise ConfigError(f"[clients] {key}: round must be an integer") from None
            if fail_round < 1:
                raise ConfigError(f"[clients] {key}: round must be >= 1")
            slot["failure"] = (fail_round, mode)
        else:
            try:
                value = float(text)
            except ValueError:
                raise ConfigError(f"[clients] {key}: expected a number, got {text!r}") from None
            if base == "bandwidth_bps" and not value > 0:
                raise ConfigError(f"[clients] {key}: must be > 0")
            if base == "latency_s" and value < 0:
                raise ConfigError(f"[clients] {key}: must be >= 0")
            if base == "slowdown" and value < 1:
                raise ConfigError(f"[clients] {key}: must be >= 1")
            slot[base] = value
    return {index: ClientProfile(**kwargs) for index, kwargs in sorted(fields.items())}


def _validate(config: ExperimentConfig) -> None:
    if config.clients_per_round > config.num_clients:
        raise ConfigError(
            f"[strategy] clients_per_round: sample size {config.clients_per_round} exceeds "
            f"num_clients {config.num_clients}"
        )
    if config.evaluate_clients is not None and config.evaluate_clients > config.num_clients:
        raise ConfigError(
            f"[strategy] evaluate_clients: sample size {config.evaluate_clients} exceeds "
            f"num_clients {config.num_clients}"
        )
    if config.min_available_clients is not None and config.min_available_clients > config.num_clients:
        raise ConfigError(
            f"[server] min_available_clients: {config.min_available_clients} exceeds "
            f"num_clients {config.num_clients}"
        )
    required_by_strategy = {
        "fault_tolerant": ("min_completion",),
        "fedprox": ("proximal_mu",),
        "qfedavg": ("q", "lipschitz"),
        "fedfs": ("fast_fraction", "slow_epoch_scale"),
    }
    for key in required_by_strategy.get(config.strategy, ()):
        if getattr(config, key) is None:
            raise ConfigError(f"[strategy] {key}: required when strategy = {config.strategy}")
    if config.min_completion is not None and not 1 <= config.min_completion <= config.clients_per_round:
        raise ConfigError(
            f"[strategy] min_completion: must be in [1, clients_per_round={config.clients_per_round}]"
        )
    if config.model_kind == "mlp" and config.hidden_width is None:
        raise ConfigError("[model] hidden_width: required when kind = mlp")
    if config.train_examples < config.num_clients:
        raise ConfigError(
            f"[data] train_examples: {config.train_examples} cannot cover "
            f"num_clients {config.num_clients}"
        )
    if config.test_examples < config.num_clients:
        raise ConfigError(
            f"[data] test_examples: {config.test_examples} cannot cover "
            f"num_clients {config.num_clients}"
        )


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section: [{section}]")

    def section(name: str) -> _Section:
        return _Section(name, dict(parser[name]) if parser.has_section(name) else {})

    config = ExperimentConfig()

    exp = section("experiment")
    config.rounds = exp.get_int("rounds", config.rounds, minimum=1)
    config.num_clients = exp.get_int("num_clients", config.num_clients, minimum=1)
    config.seed = exp.get_int("seed", config.seed)
    config.out_dir = exp.get_str("out_dir", config.out_dir)
    config.address = exp.get_str("address", None)
    exp.reject_unknown()

    server = section("server")
    config.read_timeout_s = server.get_float("read_timeout_s", config.read_timeout_s, minimum=0.01)
    config.min_available_clients = server.get_int("min_available_clients", None, minimum=1)
    config.sample_wait_s = server.get_float("sample_wait_s", config.sample_wait_s, minimum=0.0)
    config.distributed_evaluate = server.get_bool("distributed_evaluate", config.distributed_evaluate)
    config.centralized_evaluate = server.get_bool("centralized_evaluate", config.centralized_evaluate)
    server.reject_unknown()

    strategy = section("strategy")
    config.strategy = strategy.get_str("name", config.strategy, choices=STRATEGY_NAMES)
    config.clients_per_round = strategy.get_int("clients_per_round", config.clients_per_round, minimum=1)
    config.local_epochs = strategy.get_int("local_epochs", config.local_epochs, minimum=1)
    config.learning_rate = strategy.get_float("learning_rate", config.learning_rate, minimum=1e-12)
    config.batch_size = strategy.get_int("batch_size", None, minimum=1)
    config.evaluate_clients = strategy.get_int("evaluate_clients", None, minimum=1)
    config.min_completion = strategy.get_int("min_completion", None, minimum=1)
    config.proximal_mu = strategy.get_float("proximal_mu", None, minimum=0.0)
    config.q = strategy.get_float("q", None, minimum=0.0)
    config.lipschitz = strategy.get_float("lipschitz", None, minimum=1e-12)
    config.fast_fraction = strategy.get_float("fast_fraction", None, minimum=1e-9, maximum=1.0)
    config.slow_epoch_scale = strategy.get_float("slow_epoch_scale", None, minimum=1e-9, maximum=1.0)
    strategy.reject_unknown()

    model = section("model")
    config.model_kind = model.get_str("kind", config.model_kind, choices=MODEL_KINDS)
    config.num_features = model.get_int("num_features", config.num_features, minimum=1)
    config.num_classes = model.get_int("num_classes", config.num_classes, minimum=2)
    config.hidden_width = model.get_int("hidden_width", None, minimum=1)
    model.reject_unknown()

    data = section("data")
    config.train_examples = data.get_int("train_examples", config.train_examples, minimum=1)
    config.test_examples = data.get_int("test_examples", config.test_examples, minimum=1)
    config.class_separation = data.get_float("class_separation", config.class_separation, minimum=1e-9)
    config.iid_fraction = data.get_float("iid_fraction", config.iid_fraction, minimum=0.0, maximum=1.0)
    data.reject_unknown()

    raw_clients = dict(parser["clients"]) if parser.has_section("clients") else {}
    config.profiles = _parse_clients_section(raw_clients, config.num_clients)

    replay = section("replay")
    config.replay_elements = replay.get_int("elements", config.replay_elements, minimum=0)
    config.replay_dtype = replay.get_str("dtype", config.replay_dtype, choices=REPLAY_DTYPES)
    config.replay_num_clients = replay.get_int("num_clients", None, minimum=1)
    replay.reject_unknown()

    _validate(config)
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def resolved_ini(config: ExperimentConfig) -> str:
    """Canonical echo of the fully resolved configuration.

    Parsing the echo yields an equal config, so every run's provenance
    is self-contained.
    """
    parser = configparser.ConfigParser(interpolation=None)

    def put(section: str, values: dict[str, object]) -> None:
        filtered = {k: v for k, v in values.items() if v is not None}
        if filtered:
            parser[section] = {k: _format_value(v) for k, v in filtered.items()}

    put(
        "experiment",
        {
            "rounds": config.rounds,
            "num_clients": config.num_clients,
            "seed": config.seed,
            "out_dir": config.out_dir,
            "address": config.address,
        },
    )
    put(
        "server",
        {
            "read_timeout_s": config.read_timeout_s,
            "min_available_clients": config.min_available_clients,
            "sample_wait_s": config.sample_wait_s,
            "distributed_evaluate": config.distributed_evaluate,
            "centralized_evaluate": config.centralized_evaluate,
        },
    )
    put(
        "strategy",
        {
            "name": config.strategy,
            "clients_per_round": config.clients_per_round,
            "local_epochs": config.local_epochs,
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "evaluate_clients": config.evaluate_clients,
            "min_completion": config.min_completion,
            "proximal_mu": config.proximal_mu,
            "q": config.q,
            "lipschitz": config.lipschitz,
            "fast_fraction": config.fast_fraction,
            "slow_epoch_scale": config.slow_epoch_scale,
        },
    )
    put(
        "model",
        {
            "kind": config.model_kind,
            "num_features": config.num_features,
            "num_classes": config.num_classes,
            "hidden_width": config.hidden_width,
        },
    )
    put(
        "data",
        {
            "train_examples": config.train_examples,
            "test_examples": config.test_examples,
            "class_separation": config.class_separation,
            "iid_fraction": config.iid_fraction,
        },
    )
    clients: dict[str, object] = {}
    for index, profile in sorted(config.profiles.items()):
        if not math.isinf(profile.bandwidth_bps):
            clients[f"bandwidth_bps.{index}"] = profile.bandwidth_bps
        if profile.latency_s != 0.0:
            clients[f"latency_s.{index}"] = profile.latency_s
        if profile.slowdown != 1.0:
            clients[f"slowdown.{index}"] = profile.slowdown
        if profile.failure is not None:
            clients[f"fail.{index}"] = f"{profile.failure[0]}:{profile.failure[1]}"
    put("clients", clients)
    put(
        "replay",
        {
            "elements": config.replay_elements,
            "dtype": config.replay_dtype,
            "num_clients": config.replay_num_clients,
        },
    )
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
