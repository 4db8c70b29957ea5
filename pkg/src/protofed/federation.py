"""Simulated cross-silo federation: FedAvg, FedProx and prototype exchange."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .augment import AugmentationPolicy, augment
from .clustering import aggregate_prototypes
from .datasets import Dataset, min_max_scale, stratified_split
from .mixtures import PrototypeSet, em_fit, extract_prototypes, perturb, select_k_bic
from .network import (
    EvalReport,
    ModelParams,
    ModelSpec,
    TrainConfig,
    build_model,
    evaluate,
    mlp_spec,
    save_params,
    train_local,
)

STRATEGIES = ("fedavg", "fedprox", "fedp3e")
WORKERS_ENV_VAR = "PROTOFED_WORKERS"

# Purpose tags for deriving per-(round, client) sub-seeds.
_SEED_SPLIT = 1
_SEED_INIT = 2
_SEED_TRAIN = 3
_SEED_GMM = 4
_SEED_NOISE = 5
_SEED_AGG = 6
_SEED_AUG = 7


class FederationError(RuntimeError):
    """A module failure annotated with round/client context."""


@dataclass(frozen=True)
class FederationConfig:
    """All protocol knobs for one federated run."""

    strategy: str
    n_clients: int
    rounds: int
    train: TrainConfig = TrainConfig()
    aug: AugmentationPolicy = AugmentationPolicy()
    accuracy_threshold: float = 0.97
    trigger_round: int = 6
    noise_sigma: float = 0.01
    model: ModelSpec | None = None
    train_fraction: float = 0.8
    scale_mode: str = "local"
    eval_weighting: str = "test_size"
    gmm_components: int | None = None
    gmm_max_components: int = 5
    global_prototypes_per_class: int | None = None
    aggregate_running_stats: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 < self.accuracy_threshold <= 1.0:
            raise ValueError("threshold must be in (0,1]")
        if not 1 <= self.trigger_round <= self.rounds:
            raise ValueError("trigger_round must satisfy 1 <= trigger_round <= rounds")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.strategy == "fedprox" and self.train.prox_mu <= 0:
            raise ValueError("fedprox requires train.prox_mu > 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.scale_mode not in ("local", "global", "none"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")
        if self.eval_weighting not in ("test_size", "uniform"):
            raise ValueError(f"unknown eval_weighting {self.eval_weighting!r}")
        if self.gmm_max_components < 1:
            raise ValueError("gmm_max_components must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass(frozen=True)
class RoundMetrics:
    """Everything measured in one round, including protocol float counts.

    ``proto_upload_floats`` holds one count per client (zeros unless the
    exchange ran this round); ``proto_download_floats`` is the per-client
    broadcast payload size.
    """

    round_index: int
    global_report: EvalReport
    client_reports: tuple[EvalReport, ...]
    model_upload_floats: int
    model_download_floats: int
    proto_upload_floats: tuple[int, ...]
    proto_download_floats: int
    exchange_triggered: bool

    @property
    def n_clients(self) -> int:
        return len(self.client_reports)

    @property
    def uploaded_floats(self) -> int:
        return self.model_upload_floats + sum(self.proto_upload_floats)

    @property
    def downloaded_floats(self) -> int:
        return self.model_download_floats + self.n_clients * self.proto_download_floats


def fedavg_aggregate(updates: list[tuple[ModelParams, int]]) -> ModelParams:
    """Data-size weighted mean of client models, running statistics included."""
    if not updates:
        raise ValueError("need at least one update to aggregate")
    total = sum(weight for _, weight in updates)
    if total <= 0:
        raise ValueError("all client weights are zero")
    reference, _ = updates[0]
    for params, _ in updates[1:]:
        for name, tensor in params.tensors.items():
            if tensor.shape != reference.tensors[name].shape:
                raise ValueError(f"shape mismatch for tensor {name!r}")
    tensors = {name: np.zeros_like(t) for name, t in reference.tensors.items()}
    running = {name: np.zeros_like(t) for name, t in reference.running.items()}
    for params, weight in updates:
        share = weight / total
        for name in tensors:
            tensors[name] += share * params.tensors[name]
        for name in running:
            running[name] += share * params.running[name]
    return ModelParams(reference.spec, tensors, running)


def should_trigger_exchange(history: list[RoundMetrics], cfg: FederationConfig) -> bool:
    """Decide, at the start of round len(history)+1, whether to exchange.

    True only for the fedp3e strategy, exactly at the trigger round, with no
    prior exchange, and with the mean global accuracy of all earlier rounds
    below the threshold (an empty history counts as accuracy 0).
    """
    round_index = len(history) + 1
    if cfg.strategy != "fedp3e":
        return False
    if round_index != cfg.trigger_round:
        return False
    if any(m.exchange_triggered for m in history):
        return False
    if not history:
        return True
    mean_acc = float(np.mean([m.global_report.accuracy for m in history]))
    return mean_acc < cfg.accuracy_threshold


def _int_seed(master: int, *fields: int) -> int:
    return int(np.random.SeedSequence([master, *fields]).generate_state(1)[0])


def _worker_cap() -> int:
    raw = os.environ.get(WORKERS_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _count_vector_floats(payload: str) -> int:
    """Float count of the vectors in a serialized prototype payload."""
    raw = json.loads(payload)
    if isinstance(raw, dict) and "entries" in raw:
        return sum(len(e["vector"]) for e in raw["entries"])
    return sum(len(v) for vectors in raw.values() for v in vectors)


def _scale_clients(client_data: list[Dataset], mode: str) -> list[Dataset]:
    if mode == "none":
        return list(client_data)
    if mode == "local":
        return [min_max_scale(ds) for ds in client_data]
    stacked = np.vstack([ds.features for ds in client_data])
    lo = stacked.min(axis=0)
    span = stacked.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    out = []
    for ds in client_data:
        scaled = (ds.features - lo) / safe
        scaled[:, span == 0] = 0.0
        out.append(Dataset(scaled, ds.labels, ds.class_names))
    return out


def _combine_reports(reports: tuple[EvalReport, ...], weighting: str) -> EvalReport:
    if weighting == "test_size":
        weights = np.array([r.n_samples for r in reports], dtype=np.float64)
    else:
        weights = np.ones(len(reports))
    weights = weights / weights.sum()
    return EvalReport(
        accuracy=float(sum(w * r.accuracy for w, r in zip(weights, reports))),
        macro_precision=float(sum(w * r.macro_precision for w, r in zip(weights, reports))),
        macro_recall=float(sum(w * r.macro_recall for w, r in zip(weights, reports))),
        macro_f1=float(sum(w * r.macro_f1 for w, r in zip(weights, reports))),
        mean_loss=float(sum(w * r.mean_loss for w, r in zip(weights, reports))),
        n_samples=int(sum(r.n_samples for r in reports)),
    )


def _client_prototypes(train: Dataset, cfg: FederationConfig, round_index: int, client: int) -> PrototypeSet:
    entries = []
    for class_id in np.unique(train.labels):
        rows = train.features[train.labels == class_id]
        seed = _int_seed(cfg.seed, _SEED_GMM, round_index, client, int(class_id))
        if cfg.gmm_components is not None:
            k = min(cfg.gmm_components, rows.shape[0])
            model = em_fit(rows, k, seed)
        else:
            _, model = select_k_bic(rows, min(cfg.gmm_max_components, rows.shape[0]), seed)
        entries.extend(extract_prototypes(model, int(class_id), origin_client=client).entries)
    return PrototypeSet(tuple(entries), 0.0, client)


def run_federation(
    cfg: FederationConfig,
    client_data: list[Dataset],
    checkpoint_dir: str | Path | None = None,
) -> list[RoundMetrics]:
    """Execute the configured protocol over the given client datasets.

    Every client scales and splits its data locally, trains for the
    configured epochs each round, and uploads its model for weighted
    averaging. Under the fedp3e strategy a one-shot prototype exchange can
    fire at the trigger round, after which clients train on augmented data.
    All randomness is derived from per-(round, client) sub-seeds, so results
    are bit-identical across reruns and independent of worker parallelism
    (capped by the PROTOFED_WORKERS environment variable).
    """
    if len(client_data) != cfg.n_clients:
        raise ValueError(
            f"config expects {cfg.n_clients} clients but got {len(client_data)} datasets"
        )
    for k, ds in enumerate(client_data):
        if ds.n_samples == 0:
            raise FederationError(f"client {k}: empty dataset")

    scaled = _scale_clients(client_data, cfg.scale_mode)
    train_sets: list[Dataset] = []
    test_sets: list[Dataset] = []
    for k, ds in enumerate(scaled):
        try:
            train, test = stratified_split(ds, cfg.train_fraction, _int_seed(cfg.seed, _SEED_SPLIT, k))
        except ValueError as err:
            raise FederationError(f"client {k}: {err}") from err
        train_sets.append(train)
        test_sets.append(test)

    n_classes = client_data[0].n_classes
    spec = cfg.model or mlp_spec(client_data[0].n_features, n_classes)
    if spec.input_dim != client_data[0].n_features:
        raise ValueError(
            f"model expects {spec.input_dim} inputs but data has {client_data[0].n_features}"
        )
    if spec.output_classes != n_classes:
        raise ValueError(
            f"model expects {spec.output_classes} classes but data has {n_classes}"
        )
    global_params = build_model(spec, _int_seed(cfg.seed, _SEED_INIT))
    d_w = global_params.trainable_count

    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    history: list[RoundMetrics] = []
    workers = min(_worker_cap(), cfg.n_clients)
    for round_index in range(1, cfg.rounds + 1):
        exchange = should_trigger_exchange(history, cfg)
        proto_upload = [0] * cfg.n_clients
        proto_download = 0
        if exchange:
            uploads = []
            for k in range(cfg.n_clients):
                try:
                    ps = _client_prototypes(train_sets[k], cfg, round_index, k)
                    ps = perturb(ps, cfg.noise_sigma, _int_seed(cfg.seed, _SEED_NOISE, round_index, k))
                except Exception as err:
                    raise FederationError(f"round {round_index}, client {k}: {err}") from err
                proto_upload[k] = _count_vector_floats(ps.to_json())
                uploads.append(ps)
            gp = aggregate_prototypes(
                uploads,
                seed=_int_seed(cfg.seed, _SEED_AGG, round_index),
                cluster_count=cfg.global_prototypes_per_class,
            )
            proto_download = _count_vector_floats(gp.to_json())
            for k in range(cfg.n_clients):
                policy = replace(cfg.aug, seed=_int_seed(cfg.seed, _SEED_AUG, round_index, k))
                try:
                    train_sets[k] = augment(train_sets[k], gp, policy)
                except Exception as err:
                    raise FederationError(f"round {round_index}, client {k}: {err}") from err

        mu = cfg.train.prox_mu if cfg.strategy == "fedprox" else 0.0

        def _train_one(k: int) -> tuple[ModelParams, int]:
            tc = replace(cfg.train, prox_mu=mu, seed=_int_seed(cfg.seed, _SEED_TRAIN, round_index, k))
            try:
                updated, _ = train_local(global_params, train_sets[k], tc, w_global=global_params)
            except Exception as err:
                raise FederationError(f"round {round_index}, client {k}: {err}") from err
            return updated, train_sets[k].n_samples

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                updates = list(pool.map(_train_one, range(cfg.n_clients)))
        else:
            updates = [_train_one(k) for k in range(cfg.n_clients)]

        aggregated = fedavg_aggregate(updates)
        if not cfg.aggregate_running_stats:
            aggregated = ModelParams(
                aggregated.spec,
                aggregated.tensors,
                {name: t.copy() for name, t in global_params.running.items()},
            )
        global_params = aggregated

        reports = tuple(evaluate(global_params, test) for test in test_sets)
        metrics = RoundMetrics(
            round_index=round_index,
            global_report=_combine_reports(reports, cfg.eval_weighting),
            client_reports=reports,
            model_upload_floats=cfg.n_clients * d_w,
            model_download_floats=cfg.n_clients * d_w,
            proto_upload_floats=tuple(proto_upload),
            proto_download_floats=proto_download,
            exchange_triggered=exchange,
        )
        history.append(metrics)
        if checkpoint_dir is not None:
            save_params(global_params, Path(checkpoint_dir) / f"round_{round_index:03d}.params")
    return history


def exchange_round(history: list[RoundMetrics]) -> int | None:
    """Round index of the one-shot exchange, or None if it never fired."""
    for metrics in history:
        if metrics.exchange_triggered:
            return metrics.round_index
    return None


@dataclass(frozen=True)
class CommCostReport:
    """Analytic one-shot exchange cost versus what the run actually shipped."""

    upload_floats: int
    download_floats: int
    upload_ratio: float
    download_ratio: float
    total_ratio: float
    matches_run: bool
    mismatches: tuple[str, ...]


def comm_cost_report(
    run: list[RoundMetrics],
    d_w: int,
    d_x: int,
    protos_per_class: int,
    global_protos_per_class: int,
    classes_per_client: int,
    n_global_classes: int,
) -> CommCostReport:
    """Prototype-exchange float accounting relative to a model update.

    Computes the analytic payloads (classes_per_client * protos_per_class *
    d_x uploaded per client; n_global_classes * global_protos_per_class * d_x
    downloaded per client) and cross-checks them, along with the model float
    counts, against what the run recorded when serializing real payloads.
    """
    upload = classes_per_client * protos_per_class * d_x
    download = n_global_classes * global_protos_per_class * d_x
    mismatches: list[str] = []
    for metrics in run:
        k = metrics.n_clients
        if metrics.model_upload_floats != k * d_w:
            mismatches.append(
                f"round {metrics.round_index}: model upload {metrics.model_upload_floats} != {k * d_w}"
            )
        if metrics.model_download_floats != k * d_w:
            mismatches.append(
                f"round {metrics.round_index}: model download {metrics.model_download_floats} != {k * d_w}"
            )
        if metrics.exchange_triggered:
            for client, sent in enumerate(metrics.proto_upload_floats):
                if sent != upload:
                    mismatches.append(
                        f"round {metrics.round_index}, client {client}: "
                        f"prototype upload {sent} != analytic {upload}"
                    )
            if metrics.proto_download_floats != download:
                mismatches.append(
                    f"round {metrics.round_index}: prototype download "
                    f"{metrics.proto_download_floats} != analytic {download}"
                )
    return CommCostReport(
        upload_floats=upload,
        download_floats=download,
        upload_ratio=upload / d_w,
        download_ratio=download / d_w,
        total_ratio=(upload + download) / d_w,
        matches_run=not mismatches,
        mismatches=tuple(mismatches),
    )
