"""Experiment runner: JSON run configs in, per-round metrics files out."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .augment import AugmentationPolicy
from .datasets import (
    CsvSchema,
    Dataset,
    PartitionPlan,
    SCENARIOS,
    SyntheticSpec,
    build_partition_plan,
    load_csv_dir,
    nbaiot_schema,
    partition,
    synthesize,
)
from .federation import (
    STRATEGIES,
    FederationConfig,
    RoundMetrics,
    exchange_round,
    run_federation,
)
from .network import ModelSpec, TrainConfig

METRICS_COLUMNS = (
    "round",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "loss",
    "up_floats",
    "down_floats",
    "exchange",
)

COMPARISON_COLUMNS = (
    "strategy",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "loss",
    "total_up_floats",
    "total_down_floats",
    "exchange_round",
)


@dataclass(frozen=True)
class CsvSource:
    path: str
    schema: CsvSchema


@dataclass(frozen=True)
class RunSpec:
    """A parsed run configuration: one dataset, one or more strategies.

    ``quotas`` optionally pins the per-client, per-class sample counts;
    when absent the scenario's built-in quota table is derived from the data.
    """

    data: SyntheticSpec | CsvSource
    scenario: str
    n_clients: int
    configs: tuple[FederationConfig, ...]
    output_dir: str
    seed: int
    quotas: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self) -> None:
        if not self.configs:
            raise ValueError("run spec needs at least one federation config")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        strategies = [cfg.strategy for cfg in self.configs]
        if len(set(strategies)) != len(strategies):
            raise ValueError("each strategy may appear only once per run spec")
        if self.quotas is not None and len(self.quotas) != self.n_clients:
            raise ValueError(
                f"quotas cover {len(self.quotas)} clients but partition declares {self.n_clients}"
            )


def _check_keys(obj: dict, allowed: set[str], section: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ValueError(f"unknown key {unknown[0]!r} in {section}")


def _require(obj: dict, key: str, section: str):
    if key not in obj:
        raise ValueError(f"missing key {key!r} in {section}")
    return obj[key]


def parse_config(path: str | Path) -> RunSpec:
    """Load and validate a JSON run configuration.

    Unknown keys are rejected at every level, and every invariant violation
    is reported with the offending key named.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: parse error at line {err.lineno}: {err.msg}") from None
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top-level config must be a JSON object")
    _check_keys(raw, {"seed", "output_dir", "data", "partition", "federation"}, "config")

    seed = int(raw.get("seed", 0))
    output_dir = str(raw.get("output_dir", "runs"))
    data = _parse_data(_require(raw, "data", "config"))
    part = _require(raw, "partition", "config")
    _check_keys(part, {"scenario", "n_clients", "quotas"}, "partition")
    scenario = str(_require(part, "scenario", "partition"))
    n_clients = int(_require(part, "n_clients", "partition"))
    quotas = part.get("quotas")
    if quotas is not None:
        quotas = tuple(tuple(int(q) for q in row) for row in quotas)

    fed = _require(raw, "federation", "config")
    configs = _parse_federation(fed, data, n_clients, seed)
    return RunSpec(data, scenario, n_clients, configs, output_dir, seed, quotas)


def _parse_data(section: dict) -> SyntheticSpec | CsvSource:
    _check_keys(section, {"synthetic", "csv_dir"}, "data")
    if ("synthetic" in section) == ("csv_dir" in section):
        raise ValueError("data must define exactly one of 'synthetic' or 'csv_dir'")
    if "synthetic" in section:
        syn = section["synthetic"]
        allowed = {"n_classes", "dims", "clusters_per_class", "cluster_spread",
                   "samples_per_class", "seed"}
        _check_keys(syn, allowed, "data.synthetic")
        return SyntheticSpec(
            n_classes=int(_require(syn, "n_classes", "data.synthetic")),
            dims=int(_require(syn, "dims", "data.synthetic")),
            clusters_per_class=int(syn.get("clusters_per_class", 1)),
            cluster_spread=float(_require(syn, "cluster_spread", "data.synthetic")),
            samples_per_class=int(_require(syn, "samples_per_class", "data.synthetic")),
            seed=int(syn.get("seed", 0)),
        )
    src = section["csv_dir"]
    _check_keys(src, {"path", "n_features", "class_names", "class_patterns"}, "data.csv_dir")
    default = nbaiot_schema()
    schema = CsvSchema(
        n_features=int(src.get("n_features", default.n_features)),
        class_patterns=tuple(
            (str(p), int(c)) for p, c in src.get("class_patterns", default.class_patterns)
        ),
        class_names=tuple(src.get("class_names", default.class_names)),
    )
    return CsvSource(str(_require(src, "path", "data.csv_dir")), schema)


def _data_dims(data: SyntheticSpec | CsvSource) -> tuple[int, int]:
    if isinstance(data, SyntheticSpec):
        return data.dims, data.n_classes
    return data.schema.n_features, len(data.schema.class_names)


def _parse_federation(
    section: dict,
    data: SyntheticSpec | CsvSource,
    n_clients: int,
    seed: int,
) -> tuple[FederationConfig, ...]:
    allowed = {
        "strategies", "rounds", "threshold", "trigger_round", "noise_sigma",
        "train", "aug", "model", "train_fraction", "scale_mode", "eval_weighting",
        "gmm_components", "gmm_max_components", "global_prototypes_per_class",
        "aggregate_running_stats",
    }
    _check_keys(section, allowed, "federation")
    strategies = _require(section, "strategies", "federation")
    if not isinstance(strategies, list) or not strategies:
        raise ValueError("federation.strategies must be a non-empty list")
    for name in strategies:
        if name not in STRATEGIES:
            raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")

    train_raw = section.get("train", {})
    _check_keys(train_raw, {"epochs", "batch_size", "learning_rate", "adam_beta1",
                            "adam_beta2", "adam_epsilon", "prox_mu"}, "federation.train")
    train = TrainConfig(
        epochs=int(train_raw.get("epochs", 15)),
        batch_size=int(train_raw.get("batch_size", 32)),
        learning_rate=float(train_raw.get("learning_rate", 1e-4)),
        adam_beta1=float(train_raw.get("adam_beta1", 0.9)),
        adam_beta2=float(train_raw.get("adam_beta2", 0.999)),
        adam_epsilon=float(train_raw.get("adam_epsilon", 1e-7)),
        prox_mu=float(train_raw.get("prox_mu", 0.0)),
        seed=seed,
    )

    aug_raw = section.get("aug", {})
    _check_keys(aug_raw, {"target_fraction", "eligible_classes"}, "federation.aug")
    aug = AugmentationPolicy(
        target_fraction=float(aug_raw.get("target_fraction", 0.10)),
        eligible_classes=str(aug_raw.get("eligible_classes", "below_mean_count")),
        seed=seed,
    )

    model = None
    model_raw = section.get("model")
    if model_raw is not None:
        _check_keys(model_raw, {"hidden", "dropout_p"}, "federation.model")
        input_dim, n_classes = _data_dims(data)
        model = ModelSpec(
            input_dim=input_dim,
            hidden=tuple((int(u), float(l2)) for u, l2 in _require(model_raw, "hidden", "federation.model")),
            dropout_p=float(model_raw.get("dropout_p", 0.5)),
            output_classes=n_classes,
        )

    gmm_components = section.get("gmm_components")
    global_protos = section.get("global_prototypes_per_class")
    base = dict(
        n_clients=n_clients,
        rounds=int(section.get("rounds", 20)),
        train=train,
        aug=aug,
        accuracy_threshold=float(section.get("threshold", 0.97)),
        trigger_round=int(section.get("trigger_round", 6)),
        noise_sigma=float(section.get("noise_sigma", 0.01)),
        model=model,
        train_fraction=float(section.get("train_fraction", 0.8)),
        scale_mode=str(section.get("scale_mode", "local")),
        eval_weighting=str(section.get("eval_weighting", "test_size")),
        gmm_components=None if gmm_components is None else int(gmm_components),
        gmm_max_components=int(section.get("gmm_max_components", 5)),
        global_prototypes_per_class=None if global_protos is None else int(global_protos),
        aggregate_running_stats=bool(section.get("aggregate_running_stats", True)),
        seed=seed,
    )
    return tuple(FederationConfig(strategy=name, **base) for name in strategies)


def spec_to_config(spec: RunSpec) -> dict:
    """Serialize a RunSpec back to the JSON config schema (round-trippable)."""
    if isinstance(spec.data, SyntheticSpec):
        data = {"synthetic": {
            "n_classes": spec.data.n_classes,
            "dims": spec.data.dims,
            "clusters_per_class": spec.data.clusters_per_class,
            "cluster_spread": spec.data.cluster_spread,
            "samples_per_class": spec.data.samples_per_class,
            "seed": spec.data.seed,
        }}
    else:
        data = {"csv_dir": {
            "path": spec.data.path,
            "n_features": spec.data.schema.n_features,
            "class_patterns": [list(p) for p in spec.data.schema.class_patterns],
            "class_names": list(spec.data.schema.class_names),
        }}
    cfg = spec.configs[0]
    model = None
    if cfg.model is not None:
        model = {"hidden": [list(h) for h in cfg.model.hidden], "dropout_p": cfg.model.dropout_p}
    part: dict = {"scenario": spec.scenario, "n_clients": spec.n_clients}
    if spec.quotas is not None:
        part["quotas"] = [list(row) for row in spec.quotas]
    return {
        "seed": spec.seed,
        "output_dir": spec.output_dir,
        "data": data,
        "partition": part,
        "federation": {
            "strategies": [c.strategy for c in spec.configs],
            "rounds": cfg.rounds,
            "threshold": cfg.accuracy_threshold,
            "trigger_round": cfg.trigger_round,
            "noise_sigma": cfg.noise_sigma,
            "train": {
                "epochs": cfg.train.epochs,
                "batch_size": cfg.train.batch_size,
                "learning_rate": cfg.train.learning_rate,
                "adam_beta1": cfg.train.adam_beta1,
                "adam_beta2": cfg.train.adam_beta2,
                "adam_epsilon": cfg.train.adam_epsilon,
                "prox_mu": cfg.train.prox_mu,
            },
            "aug": {
                "target_fraction": cfg.aug.target_fraction,
                "eligible_classes": cfg.aug.eligible_classes,
            },
            "model": model,
            "train_fraction": cfg.train_fraction,
            "scale_mode": cfg.scale_mode,
            "eval_weighting": cfg.eval_weighting,
            "gmm_components": cfg.gmm_components,
            "gmm_max_components": cfg.gmm_max_components,
            "global_prototypes_per_class": cfg.global_prototypes_per_class,
            "aggregate_running_stats": cfg.aggregate_running_stats,
        },
    }


def _load_dataset(spec: RunSpec) -> Dataset:
    if isinstance(spec.data, SyntheticSpec):
        return synthesize(spec.data)
    return load_csv_dir(spec.data.path, spec.data.schema)


def _write_metrics_csv(path: Path, history: list[RoundMetrics]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for m in history:
            r = m.global_report
            writer.writerow([
                m.round_index,
                repr(r.accuracy),
                repr(r.macro_precision),
                repr(r.macro_recall),
                repr(r.macro_f1),
                repr(r.mean_loss),
                m.uploaded_floats,
                m.downloaded_floats,
                int(m.exchange_triggered),
            ])


def _strategy_summary(cfg: FederationConfig, history: list[RoundMetrics]) -> dict:
    final = history[-1].global_report
    ex_round = exchange_round(history)
    comm = None
    if ex_round is not None:
        m = history[ex_round - 1]
        d_w = m.model_upload_floats // m.n_clients
        mean_upload = sum(m.proto_upload_floats) / m.n_clients
        comm = {
            "model_floats": d_w,
            "prototype_upload_floats_per_client": list(m.proto_upload_floats),
            "prototype_download_floats_per_client": m.proto_download_floats,
            "upload_ratio_per_client": [u / d_w for u in m.proto_upload_floats],
            "download_ratio": m.proto_download_floats / d_w,
            "total_exchange_ratio": (mean_upload + m.proto_download_floats) / d_w,
        }
    return {
        "rounds": cfg.rounds,
        "final_accuracy": final.accuracy,
        "final_precision": final.macro_precision,
        "final_recall": final.macro_recall,
        "final_f1": final.macro_f1,
        "final_loss": final.mean_loss,
        "uploaded_floats_total": sum(m.uploaded_floats for m in history),
        "downloaded_floats_total": sum(m.downloaded_floats for m in history),
        "exchange_round": ex_round,
        "comm_cost": comm,
    }


def run(spec: RunSpec) -> int:
    """Execute every configured strategy; return a process exit code.

    Writes metrics_<strategy>.csv per strategy plus summary.json and
    comparison.csv into the spec's output directory. Outputs are
    byte-deterministic for a given spec.
    """
    try:
        _execute(spec)
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


def _execute(spec: RunSpec) -> None:
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(spec)
    if spec.quotas is not None:
        plan = PartitionPlan(spec.scenario, spec.quotas)
    else:
        plan = build_partition_plan(spec.scenario, ds.class_counts(), spec.n_clients)
    shards = partition(ds, plan, spec.seed)

    summary = {
        "seed": spec.seed,
        "scenario": spec.scenario,
        "n_clients": spec.n_clients,
        "strategies": {},
    }
    rows = []
    for cfg in spec.configs:
        history = run_federation(cfg, shards)
        _write_metrics_csv(out / f"metrics_{cfg.strategy}.csv", history)
        summary["strategies"][cfg.strategy] = _strategy_summary(cfg, history)
        final = history[-1].global_report
        rows.append([
            cfg.strategy,
            repr(final.accuracy),
            repr(final.macro_precision),
            repr(final.macro_recall),
            repr(final.macro_f1),
            repr(final.mean_loss),
            sum(m.uploaded_floats for m in history),
            sum(m.downloaded_floats for m in history),
            "" if exchange_round(history) is None else exchange_round(history),
        ])

    with open(out / "comparison.csv", "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        writer.writerows(rows)
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="protofed",
        description="Deterministic cross-silo federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_parser = sub.add_parser("run", help="execute a JSON run configuration")
    run_parser.add_argument("config", help="path to the run configuration file")
    run_parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_parser.add_argument("--out", default=None, help="override the output directory")
    run_parser.add_argument(
        "--strategies", default=None,
        help="comma-separated subset of the configured strategies",
    )
    args = parser.parse_args(argv)

    try:
        spec = parse_config(args.config)
        if args.seed is not None:
            spec = replace(
                spec,
                seed=args.seed,
                configs=tuple(replace(c, seed=args.seed) for c in spec.configs),
            )
        if args.out is not None:
            spec = replace(spec, output_dir=args.out)
        if args.strategies is not None:
            wanted = [s.strip() for s in args.strategies.split(",") if s.strip()]
            available = {c.strategy: c for c in spec.configs}
            missing = [s for s in wanted if s not in available]
            if missing:
                raise ValueError(f"strategy {missing[0]!r} is not part of this config")
            spec = replace(spec, configs=tuple(available[s] for s in wanted))
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
