"""FedAvg orchestration over k clients, one of which may be poisoned."""

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .attacks import (
    AttackKind,
    AttackSpec,
    FpStats,
    PoisonReport,
    asr,
    flip_labels,
    fp_asr_testset,
    fp_poison,
    lf_asr_testset,
)
from .data import Dataset, SplitBundle
from .errors import AttackError, DegenerateColumnError, MissingClassError, ShapeMismatchError
from .event import Event, ExperimentCompleted, PoisonApplied, RoundCompleted
from .importance import ForestConfig, select_target_feature
from .nn import (
    PARAM_NAMES,
    Bau1Params,
    TrainConfig,
    evaluate,
    init_params,
    sample_learning_rate,
    train_local,
)
from .seeding import derive_seed

logger = logging.getLogger(__name__)

EventSink = Callable[[Event], object]


class FederationConfig(BaseModel):
    """FedAvg settings. "20 epochs" maps to 20 rounds of 1 local epoch."""

    model_config = ConfigDict(frozen=True)

    num_clients: int = Field(default=2, ge=1)
    rounds: int = Field(default=20, ge=1)
    local_epochs: int = Field(default=1, ge=0)
    train: TrainConfig = TrainConfig()
    seed: int = 0
    client_workers: int = Field(default=1, ge=1)
    forest: ForestConfig = ForestConfig()
    importance_repeats: int = Field(default=5, ge=1)


class RoundLog(BaseModel):
    """Per-round client losses and server validation accuracy."""

    model_config = ConfigDict(frozen=True)

    round: int
    client_losses: tuple[float, ...]
    server_val_accuracy: float = Field(ge=0.0, le=1.0)


class ExperimentOutcome(BaseModel):
    """Everything one experiment produced."""

    model_config = ConfigDict(frozen=True)

    final_params: Bau1Params
    round_logs: tuple[RoundLog, ...]
    server_test_accuracy: float = Field(ge=0.0, le=1.0)
    asr: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    learning_rate_used: float
    poison_report: Optional[PoisonReport] = None
    feature_index: Optional[int] = None
    fp_stats: Optional[FpStats] = None

    @property
    def final_client_losses(self) -> tuple[float, ...]:
        """Local training losses of the last round."""
        return self.round_logs[-1].client_losses


def client_seed(seed: int, client: int, round_index: int) -> int:
    """Training seed of ``client`` in ``round_index``."""
    return derive_seed(seed, "client", client, round_index)


def resolve_learning_rate(cfg: FederationConfig) -> float:
    """The configured learning rate, or one sampled from the experiment seed."""
    if cfg.train.learning_rate is not None:
        return cfg.train.learning_rate
    return sample_learning_rate(derive_seed(cfg.seed, "learning_rate"))


def fed_avg(params_list: Sequence[Bau1Params], weights: Sequence[float]) -> Bau1Params:
    """Weighted mean of every array, batch-norm running statistics included.

    Arrays that are identical across clients are passed through untouched.

    Raises:
        ValueError: On an empty list, negative weights or a zero total weight
        ShapeMismatchError: If clients disagree on any array shape
    """
    if not params_list:
        msg = "fed_avg needs at least one client"
        raise ValueError(msg)
    if len(weights) != len(params_list):
        msg = f"{len(params_list)} clients but {len(weights)} weights"
        raise ValueError(msg)
    if any(w < 0 for w in weights):
        msg = "weights must be >= 0"
        raise ValueError(msg)
    total = float(sum(weights))
    if total <= 0.0:
        msg = "total weight must be positive"
        raise ValueError(msg)

    all_arrays = [p.arrays() for p in params_list]
    first = all_arrays[0]
    for arrays in all_arrays[1:]:
        for name in PARAM_NAMES:
            if arrays[name].shape != first[name].shape:
                msg = f"{name}: {arrays[name].shape} vs {first[name].shape}"
                raise ShapeMismatchError(msg)

    shares = [w / total for w in weights]
    averaged = {}
    for name in PARAM_NAMES:
        stack = [arrays[name] for arrays in all_arrays]
        if all(np.array_equal(stack[0], other) for other in stack[1:]):
            averaged[name] = stack[0]
            continue
        acc = shares[0] * stack[0]
        for share, array in zip(shares[1:], stack[1:]):
            acc = acc + share * array
        averaged[name] = acc
    return params_list[0].with_arrays(averaged)


def run_round(
    server: Bau1Params,
    shards: Sequence[Dataset],
    cfg: FederationConfig,
    round_index: int,
    *,
    validation: Dataset,
) -> tuple[Bau1Params, RoundLog]:
    """One FedAvg round: every client trains from the server state, then average.

    Clients may train on a thread pool; results are gathered in client order.
    """
    if not shards:
        msg = "run_round needs at least one shard"
        raise ValueError(msg)
    base = cfg.train.model_copy(
        update={"epochs": cfg.local_epochs, "learning_rate": resolve_learning_rate(cfg)},
    )

    def train_client(client: int) -> tuple[Bau1Params, float]:
        local_cfg = base.model_copy(update={"seed": client_seed(cfg.seed, client, round_index)})
        return train_local(server, shards[client], local_cfg)

    clients = range(len(shards))
    if cfg.client_workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=cfg.client_workers) as pool:
            results = list(pool.map(train_client, clients))
    else:
        results = [train_client(client) for client in clients]

    new_server = fed_avg([params for params, _ in results], [shard.n for shard in shards])
    log = RoundLog(
        round=round_index,
        client_losses=tuple(loss for _, loss in results),
        server_val_accuracy=evaluate(new_server, validation),
    )
    logger.info(
        "round %d: losses=%s val_acc=%.4f",
        round_index,
        ", ".join(f"{loss:.4f}" for loss in log.client_losses),
        log.server_val_accuracy,
    )
    return new_server, log


def _poison(
    bundle: SplitBundle,
    attack: AttackSpec,
    cfg: FederationConfig,
) -> tuple[Dataset, PoisonReport, Optional[FpStats], Optional[int]]:
    target = bundle.client_shards[attack.target_client]
    if attack.kind is AttackKind.LF:
        poisoned, report = flip_labels(target, attack.percent, attack.seed)
        return poisoned, report, None, None

    feature_index = attack.feature_index
    if feature_index is None:
        feature_index, _ = select_target_feature(
            bundle.train,
            bundle.validation,
            cfg.forest,
            cfg.importance_repeats,
            derive_seed(cfg.seed, "importance"),
        )
    resolved = attack.model_copy(update={"feature_index": feature_index})
    poisoned, stats, report = fp_poison(target, resolved)
    return poisoned, report, stats, feature_index


def run_experiment(
    bundle: SplitBundle,
    attack: Optional[AttackSpec],
    cfg: FederationConfig,
    event_sink: Optional[EventSink] = None,
) -> ExperimentOutcome:
    """Poison the target client (if any), run every round, and score the server.

    Test accuracy is measured on the clean test set; ASR on the LF- or
    FP-transformed test set. With no attack, ASR is absent.

    Raises:
        ValueError: If the bundle's client count differs from the config or the
            attack targets a missing client
        AttackError: If the attack cannot be applied (e.g. degenerate FP column)
    """
    if bundle.num_clients != cfg.num_clients:
        msg = f"bundle has {bundle.num_clients} shards but num_clients={cfg.num_clients}"
        raise ValueError(msg)
    if attack is not None and attack.target_client >= cfg.num_clients:
        msg = f"attack targets client {attack.target_client} of {cfg.num_clients}"
        raise ValueError(msg)

    emit: EventSink = event_sink or (lambda _event: None)
    lr = resolve_learning_rate(cfg)
    cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"learning_rate": lr})})
    logger.info("learning rate %.6g (seed %d)", lr, cfg.seed)

    shards = list(bundle.client_shards)
    report: Optional[PoisonReport] = None
    stats: Optional[FpStats] = None
    feature_index: Optional[int] = None
    if attack is not None:
        try:
            poisoned, report, stats, feature_index = _poison(bundle, attack, cfg)
        except (DegenerateColumnError, MissingClassError, AttackError) as exc:
            msg = (
                f"{attack.kind.value} attack at {attack.percent:g}% "
                f"on client {attack.target_client}: {exc}"
            )
            raise AttackError(msg) from exc
        shards[attack.target_client] = poisoned
        emit(
            PoisonApplied(
                kind=attack.kind.value,
                target_client=attack.target_client,
                requested_percent=attack.percent,
                num_values=report.num_values,
                num_actually_modified=report.num_actually_modified,
                feature_index=feature_index,
            ),
        )

    params = init_params(
        bundle.validation.d,
        derive_seed(cfg.seed, "init"),
        hidden_sizes=cfg.train.hidden_sizes,
        bn_eps=cfg.train.bn_eps,
        bn_momentum=cfg.train.bn_momentum,
    )
    logs = []
    for round_index in range(1, cfg.rounds + 1):
        params, log = run_round(params, shards, cfg, round_index, validation=bundle.validation)
        logs.append(log)
        emit(
            RoundCompleted(
                round=log.round,
                client_losses=log.client_losses,
                server_val_accuracy=log.server_val_accuracy,
            ),
        )

    test_accuracy = evaluate(params, bundle.test)
    attack_rate: Optional[float] = None
    if attack is not None:
        if attack.kind is AttackKind.LF:
            transformed = lf_asr_testset(bundle.test)
        else:
            assert stats is not None and feature_index is not None
            transformed = fp_asr_testset(bundle.test, feature_index, stats)
        attack_rate = asr(params, transformed)

    emit(
        ExperimentCompleted(
            rounds=cfg.rounds,
            learning_rate_used=lr,
            server_test_accuracy=test_accuracy,
            asr=attack_rate,
        ),
    )
    return ExperimentOutcome(
        final_params=params,
        round_logs=tuple(logs),
        server_test_accuracy=test_accuracy,
        asr=attack_rate,
        learning_rate_used=lr,
        poison_report=report,
        feature_index=feature_index,
        fp_stats=stats,
    )
