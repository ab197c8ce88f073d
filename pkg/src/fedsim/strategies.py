"""Aggregation strategies: the plug-in policy layer of the round loop.

Five built-ins: plain example-weighted averaging (FedAvg), the same with
a completion-rate threshold, a proximal-term variant (server side is
unchanged; the client objective gains (mu/2)*||w - w_global||^2), a
fairness-reweighted update (qFedAvg), and a duration-aware selector that
gives slow clients fewer local epochs (FedFS).

All aggregation arithmetic runs in F64 in a fixed order: the server
sorts results by client id before calling aggregate_fit, and the sums
below anchor on the first result, so shuffling client completion order
can never change the output bits.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .protocol import ConfigMap, EvaluateIns, EvaluateRes, FitIns, FitRes
from .rng import Xoshiro256, mix_seed
from .tensors import Weights

# Per-round seed streams, one tag per purpose.
TAG_FIT_SAMPLE = 0
TAG_EVAL_SAMPLE = 1
TAG_FIT_SEED = 2

LOSS_CLIP = 1e-10
FEDFS_TRAILING_WINDOW = 5


class AggregationError(ValueError):
    pass


def _to_i64(value: int) -> int:
    """Two's-complement image of a u64 so it fits the config i64 slot."""
    return value - (1 << 64) if value >= (1 << 63) else value


@dataclass
class FedAvgConfig:
    clients_per_round: int
    local_epochs: int
    learning_rate: float
    seed: int = 0
    batch_size: int | None = None  # omitted from config when None (client default applies)
    evaluate_clients: int | None = None  # defaults to clients_per_round

    def __post_init__(self) -> None:
        if self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


class Strategy(abc.ABC):
    """Pure policy given (round, inputs, seed); FedFS additionally reads
    client history, which is declared rather than hidden state."""

    @abc.abstractmethod
    def configure_fit(self, round_index: int, global_weights: Weights, manager) -> list[tuple[Any, FitIns]]: ...

    @abc.abstractmethod
    def configure_evaluate(self, round_index: int, global_weights: Weights, manager) -> list[tuple[Any, EvaluateIns]]: ...

    @abc.abstractmethod
    def aggregate_fit(self, round_index: int, results: Sequence[tuple[Any, FitRes]], failures: Sequence) -> Weights | None: ...

    @abc.abstractmethod
    def aggregate_evaluate(self, round_index: int, results: Sequence[tuple[Any, EvaluateRes]], failures: Sequence) -> tuple[float, float] | None: ...


def _check_same_layout(reference: Weights, other: Weights) -> None:
    ref = [(t.name, t.shape) for t in reference.tensors]
    got = [(t.name, t.shape) for t in other.tensors]
    if ref != got:
        raise AggregationError(f"weights layout mismatch: {ref} vs {got}")


def fedavg_aggregate(results: Sequence[tuple[Weights, int]]) -> Weights:
    """Example-weighted mean: sum_k n_k w_k / sum_k n_k, in F64.

    Computed as w_0 + sum_k (n_k/N)(w_k - w_0): identical inputs come
    back bit-exactly, and the error against the naive form stays at the
    few-ulp level.
    """
    if not results:
        raise AggregationError("nothing to aggregate")
    total = 0
    for _, n in results:
        if n < 0:
            raise AggregationError("negative num_examples")
        total += n
    if total <= 0:
        raise AggregationError("num_examples sum to zero")
    first, _ = results[0]
    base = [t.array.astype(np.float64, copy=True) for t in first.tensors]
    out = [a.copy() for a in base]
    for w, n in results:
        _check_same_layout(first, w)
        coeff = n / total
        if coeff == 0.0:
            continue
        for o, b, t in zip(out, base, w.tensors):
            o += coeff * (t.array.astype(np.float64, copy=False) - b)
    return first.replace_arrays(out)


def fault_tolerant_aggregate(
    results: Sequence[tuple[Weights, int]],
    failures: Sequence,
    min_completion: int,
) -> Weights | None:
    """Accept the round only when enough clients completed."""
    if len(results) < min_completion:
        return None
    return fedavg_aggregate(results)


def qfedavg_aggregate(
    global_weights: Weights,
    results: Sequence[tuple[Weights, int, float]],
    q: float,
    lipschitz: float,
) -> Weights:
    """Fairness-reweighted update.

    Per client k with training loss F_k (clipped below at 1e-10):
        delta_k = L * (global - w_k)
        h_k     = q * F_k^(q-1) * ||delta_k||^2 + L * F_k^q
        global' = global - sum_k F_k^q * delta_k / sum_k h_k
    q = 0 collapses to the unweighted mean of client models.
    """
    if not results:
        raise AggregationError("nothing to aggregate")
    if lipschitz <= 0:
        raise AggregationError("lipschitz constant must be > 0")
    g = [t.array.astype(np.float64, copy=True) for t in global_weights.tensors]
    numerator = [np.zeros_like(a) for a in g]
    denominator = 0.0
    for w, _, loss in results:
        _check_same_layout(global_weights, w)
        f_k = max(float(loss), LOSS_CLIP)
        delta = [lipschitz * (gi - t.array.astype(np.float64, copy=False)) for gi, t in zip(g, w.tensors)]
        norm_sq = 0.0
        for d in delta:
            flat = d.ravel()
            norm_sq += float(np.dot(flat, flat))
        f_pow_q = f_k**q
        h_k = q * f_k ** (q - 1.0) * norm_sq + lipschitz * f_pow_q
        for acc, d in zip(numerator, delta):
            acc += f_pow_q * d
        denominator += h_k
    new = [gi - acc / denominator for gi, acc in zip(g, numerator)]
    return global_weights.replace_arrays(new)


def weighted_loss_accuracy(results: Sequence[tuple[Any, EvaluateRes]]) -> tuple[float, float]:
    """Example-weighted mean loss and accuracy over evaluate results.

    Accuracy averages only clients that report an "accuracy" metric; if
    none do, it is NaN.
    """
    total = sum(r.num_examples for _, r in results)
    if total <= 0:
        raise AggregationError("no evaluate examples")
    loss = 0.0
    for _, r in results:
        loss += r.loss * (r.num_examples / total)
    acc_total = sum(r.num_examples for _, r in results if "accuracy" in r.metrics)
    if acc_total == 0:
        return loss, math.nan
    accuracy = 0.0
    for _, r in results:
        if "accuracy" in r.metrics:
            accuracy += float(r.metrics["accuracy"]) * (r.num_examples / acc_total)
    return loss, accuracy


class FedAvg(Strategy):
    """Sample C clients, ship identical instructions, weight by examples."""

    def __init__(self, config: FedAvgConfig):
        self.config = config
        # Populated per aggregate_fit call; the round loop copies it into
        # the round record (qFedAvg reports exclusions through this).
        self.warnings_last_round = 0

    # -- shared plumbing -------------------------------------------------

    def _fit_config(self, round_index: int) -> ConfigMap:
        cfg: ConfigMap = {
            "round": round_index,
            "epochs": self.config.local_epochs,
            "lr": self.config.learning_rate,
            "seed": _to_i64(mix_seed(self.config.seed, round_index, TAG_FIT_SEED)),
        }
        if self.config.batch_size is not None:
            cfg["batch_size"] = self.config.batch_size
        return cfg

    def _sample(self, manager, round_index: int, count: int, tag: int):
        rng = Xoshiro256(mix_seed(self.config.seed, round_index, tag))
        return manager.sample(count, rng)

    # -- Strategy interface ----------------------------------------------

    def configure_fit(self, round_index, global_weights, manager):
        clients = self._sample(manager, round_index, self.config.clients_per_round, TAG_FIT_SAMPLE)
        ins = FitIns(global_weights, self._fit_config(round_index))
        return [(c, ins) for c in clients]

    def configure_evaluate(self, round_index, global_weights, manager):
        count = self.config.evaluate_clients or self.config.clients_per_round
        clients = self._sample(manager, round_index, count, TAG_EVAL_SAMPLE)
        ins = EvaluateIns(global_weights, {"round": round_index})
        return [(c, ins) for c in clients]

    def aggregate_fit(self, round_index, results, failures):
        self.warnings_last_round = 0
        if not results:
            return None
        return fedavg_aggregate([(r.weights, r.num_examples) for _, r in results])

    def aggregate_evaluate(self, round_index, results, failures):
        if not results:
            return None
        return weighted_loss_accuracy(results)


class FaultTolerantFedAvg(FedAvg):
    """FedAvg that discards rounds with too few successful clients."""

    def __init__(self, config: FedAvgConfig, min_completion: int):
        super().__init__(config)
        if not 1 <= min_completion <= config.clients_per_round:
            raise ValueError("min_completion must be in [1, clients_per_round]")
        self.min_completion = min_completion

    def aggregate_fit(self, round_index, results, failures):
        self.warnings_last_round = 0
        return fault_tolerant_aggregate(
            [(r.weights, r.num_examples) for _, r in results],
            failures,
            self.min_completion,
        )


class FedProx(FedAvg):
    """FedAvg whose clients optimize with a proximal term of weight mu."""

    def __init__(self, config: FedAvgConfig, mu: float):
        super().__init__(config)
        if mu < 0:
            raise ValueError("mu must be >= 0")
        self.mu = mu

    def _fit_config(self, round_index: int) -> ConfigMap:
        cfg = super()._fit_config(round_index)
        cfg["proximal_mu"] = self.mu
        return cfg


class QFedAvg(FedAvg):
    """Fairness-weighted aggregation using reported client train loss."""

    def __init__(self, config: FedAvgConfig, q: float, lipschitz: float):
        super().__init__(config)
        if q < 0:
            raise ValueError("q must be >= 0")
        if lipschitz <= 0:
            raise ValueError("lipschitz must be > 0")
        self.q = q
        self.lipschitz = lipschitz
        self._current_global: Weights | None = None

    def configure_fit(self, round_index, global_weights, manager):
        self._current_global = global_weights
        return super().configure_fit(round_index, global_weights, manager)

    def aggregate_fit(self, round_index, results, failures):
        if self._current_global is None:
            raise AggregationError("aggregate_fit before configure_fit")
        usable = []
        excluded = 0
        for _, r in results:
            if "train_loss" in r.metrics:
                usable.append((r.weights, r.num_examples, float(r.metrics["train_loss"])))
            else:
                excluded += 1
        self.warnings_last_round = excluded
        if not usable:
            return None
        return qfedavg_aggregate(self._current_global, usable, self.q, self.lipschitz)


class FedFS(FedAvg):
    """Duration-aware selection: prefer historically fast clients and cut
    local epochs for the slow ones that still get picked.

    Ranking key is the trailing mean over each client's last 5
    successful fit durations; clients with no history rank fastest, so a
    cold start selects exactly the seeded uniform sample plain FedAvg
    would have drawn.
    """

    def __init__(self, config: FedAvgConfig, fast_fraction: float, slow_epoch_scale: float):
        super().__init__(config)
        if not 0.0 < fast_fraction <= 1.0:
            raise ValueError("fast_fraction must be in (0, 1]")
        if not 0.0 < slow_epoch_scale <= 1.0:
            raise ValueError("slow_epoch_scale must be in (0, 1]")
        self.fast_fraction = fast_fraction
        self.slow_epoch_scale = slow_epoch_scale

    @staticmethod
    def _trailing_mean(handle) -> float:
        durations = [
            entry.duration_s
            for entry in handle.history
            if entry.outcome == "ok"
        ][-FEDFS_TRAILING_WINDOW:]
        if not durations:
            return -math.inf  # no evidence: rank fastest
        return sum(durations) / len(durations)

    def configure_fit(self, round_index, global_weights, manager):
        c = self.config.clients_per_round
        rng = Xoshiro256(mix_seed(self.config.seed, round_index, TAG_FIT_SAMPLE))
        pool = manager.all_connected(min_count=c)
        perm = sorted(pool, key=lambda h: h.client_id)
        rng.shuffle(perm)
        ranked = sorted(perm, key=self._trailing_mean)  # stable: ties keep perm order
        fast_count = min(c, math.ceil(self.fast_fraction * c))
        fast_picks = ranked[:fast_count]
        fast_ids = {h.client_id for h in fast_picks}
        fill = [h for h in perm if h.client_id not in fast_ids][: c - fast_count]
        slow_epochs = max(1, int(self.config.local_epochs * self.slow_epoch_scale + 0.5))
        base_config = self._fit_config(round_index)
        pairs = []
        for handle in fast_picks + fill:
            cfg = dict(base_config)
            if handle.client_id not in fast_ids:
                cfg["epochs"] = slow_epochs
            pairs.append((handle, FitIns(global_weights, cfg)))
        return pairs
