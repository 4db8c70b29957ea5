"""Tabular dataset ingestion, scaling, splitting and cross-silo partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCENARIOS = ("iid", "light", "moderate", "severe")

# Per-class proportions handed to client 0, rotated by one position per client.
_LIGHT_SHARES = 0.5
_MODERATE_SHARES = 0.15


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix with integer class labels.

    Attributes:
        features: (n_samples, n_features) float64 matrix.
        labels: (n_samples,) int64 vector with values in [0, len(class_names)).
        class_names: ordered names of the global class space.
    """

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        feats = np.array(self.features, dtype=np.float64)
        labs = np.array(self.labels, dtype=np.int64)
        names = tuple(str(n) for n in self.class_names)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if labs.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {labs.shape}")
        if feats.shape[0] != labs.shape[0]:
            raise ValueError(
                f"features have {feats.shape[0]} rows but labels have {labs.shape[0]} entries"
            )
        if not names:
            raise ValueError("class_names must not be empty")
        if labs.size and (labs.min() < 0 or labs.max() >= len(names)):
            raise ValueError(
                f"labels must lie in [0, {len(names)}), got range "
                f"[{labs.min()}, {labs.max()}]"
            )
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)
        object.__setattr__(self, "class_names", names)

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        """Per-class sample counts over the full class space."""
        return np.bincount(self.labels, minlength=self.n_classes)

    def select(self, indices: np.ndarray) -> "Dataset":
        """New Dataset holding the given rows (copying, original untouched)."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_names)


@dataclass(frozen=True)
class CsvSchema:
    """Column and file-naming contract for a directory of labelled CSV files.

    Each file holds one (device, class) capture: a header row of n_features
    column names followed by one numeric sample per row. The class of a file
    is the first pattern (case-insensitive substring of the file name) that
    matches.
    """

    n_features: int
    class_patterns: tuple[tuple[str, int], ...]
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        for pattern, class_id in self.class_patterns:
            if not 0 <= class_id < len(self.class_names):
                raise ValueError(f"pattern {pattern!r} maps to unknown class id {class_id}")


def nbaiot_schema() -> CsvSchema:
    """Schema for the N-BaIoT CSV layout: 115 features, 3 coarse classes."""
    return CsvSchema(
        n_features=115,
        class_patterns=(("benign", 0), ("gafgyt", 1), ("mirai", 2)),
        class_names=("benign", "gafgyt", "mirai"),
    )


def _class_for_file(name: str, schema: CsvSchema) -> int:
    lowered = name.lower()
    for pattern, class_id in schema.class_patterns:
        if pattern.lower() in lowered:
            return class_id
    raise ValueError(f"{name}: file name matches no class pattern in schema")


def load_csv_dir(path: str | Path, schema: CsvSchema) -> Dataset:
    """Load every CSV file under ``path`` into one Dataset.

    Files are read in sorted name order and rows in file order, so the result
    is deterministic. Values are kept bit-exact (no scaling applied here).

    Raises:
        FileNotFoundError: missing directory.
        ValueError: no CSV files, unmatched file name, column count mismatch,
            or a non-numeric cell (the error names the file and row).
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"no such data directory: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() == ".csv")
    if not files:
        raise ValueError(f"no CSV files found under {root}")

    rows: list[list[float]] = []
    labels: list[int] = []
    for file in files:
        class_id = _class_for_file(file.name, schema)
        with open(file, newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"{file.name}: empty file")
            if len(header) != schema.n_features:
                raise ValueError(
                    f"{file.name}: column count mismatch "
                    f"(got {len(header)}, schema expects {schema.n_features})"
                )
            for row_no, row in enumerate(reader, start=2):
                if len(row) != schema.n_features:
                    raise ValueError(
                        f"{file.name} row {row_no}: column count mismatch "
                        f"(got {len(row)}, schema expects {schema.n_features})"
                    )
                try:
                    rows.append([float(cell) for cell in row])
                except ValueError:
                    bad = next(cell for cell in row if not _is_number(cell))
                    raise ValueError(
                        f"{file.name} row {row_no}: non-numeric cell {bad!r}"
                    ) from None
                labels.append(class_id)

    features = np.asarray(rows, dtype=np.float64).reshape(len(rows), schema.n_features)
    return Dataset(features, np.asarray(labels, dtype=np.int64), schema.class_names)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def min_max_scale(ds: Dataset) -> Dataset:
    """Rescale every column to [0, 1] by (x - min) / (max - min).

    Statistics come from ``ds`` alone. A constant column maps to 0.0
    everywhere, which keeps the transform defined and idempotent.
    """
    if ds.n_samples == 0:
        raise ValueError("cannot scale an empty dataset")
    lo = ds.features.min(axis=0)
    hi = ds.features.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = (ds.features - lo) / safe
    scaled[:, span == 0] = 0.0
    return Dataset(scaled, ds.labels, ds.class_names)


def stratified_split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded per-class split into (train, test).

    Each class present contributes floor(train_fraction * n_c) samples
    (at least 1) to train and the remainder to test. Classes absent from
    ``ds`` are skipped; a class with a single sample cannot be split.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    if ds.n_samples == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for class_id in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == class_id)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise ValueError(
                f"class {ds.class_names[class_id]!r} has {idx.size} sample(s); "
                "need at least 2 to split"
            )
        perm = rng.permutation(idx)
        n_train = max(1, math.floor(train_fraction * idx.size))
        train_idx.append(perm[:n_train])
        test_idx.append(perm[n_train:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return ds.select(train), ds.select(test)


@dataclass(frozen=True)
class PartitionPlan:
    """Per-client, per-class sample quotas for one heterogeneity scenario.

    ``quotas[k][c]`` is the number of class-``c`` samples assigned to client
    ``k``. The severe scenario must give each client exactly one class.
    """

    scenario: str
    quotas: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        quotas = tuple(tuple(int(q) for q in row) for row in self.quotas)
        if not quotas:
            raise ValueError("plan must cover at least one client")
        width = len(quotas[0])
        for k, row in enumerate(quotas):
            if len(row) != width:
                raise ValueError(f"client {k}: quota row length {len(row)} != {width}")
            if any(q < 0 for q in row):
                raise ValueError(f"client {k}: quotas must be non-negative")
        if self.scenario == "severe":
            for k, row in enumerate(quotas):
                if sum(1 for q in row if q > 0) != 1:
                    raise ValueError(
                        f"severe plan requires exactly one nonzero class per client; "
                        f"client {k} has {sum(1 for q in row if q > 0)}"
                    )
        object.__setattr__(self, "quotas", quotas)

    @property
    def n_clients(self) -> int:
        return len(self.quotas)

    @property
    def n_classes(self) -> int:
        return len(self.quotas[0])


def build_partition_plan(
    scenario: str,
    class_counts: np.ndarray | list[int],
    n_clients: int,
) -> PartitionPlan:
    """Quota table for one of the four built-in scenarios.

    iid: every client receives an equal share of every class.
    light / moderate: shares of each class rotate across clients with a
        geometric decay (mild for light, steep for moderate), so every client
        still sees every class but in skewed proportions.
    severe: client k holds only class k (mod n_classes), split evenly among
        clients mapped to the same class.
    """
    counts = np.asarray(class_counts, dtype=np.int64)
    n_classes = counts.size
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if scenario == "iid":
        quotas = [[int(counts[c]) // n_clients for c in range(n_classes)] for _ in range(n_clients)]
    elif scenario in ("light", "moderate"):
        decay = _LIGHT_SHARES if scenario == "light" else _MODERATE_SHARES
        weights = decay ** np.arange(n_classes, dtype=np.float64)
        quotas = []
        for k in range(n_clients):
            row = []
            for c in range(n_classes):
                w = weights[(c - k) % n_classes]
                total_w = sum(weights[(c - j) % n_classes] for j in range(n_clients))
                row.append(math.floor(counts[c] * w / total_w))
            quotas.append(row)
    elif scenario == "severe":
        owners = [[] for _ in range(n_classes)]
        for k in range(n_clients):
            owners[k % n_classes].append(k)
        quotas = [[0] * n_classes for _ in range(n_clients)]
        for c in range(n_classes):
            for k in owners[c]:
                quotas[k][c] = int(counts[c]) // max(1, len(owners[c]))
    else:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    return PartitionPlan(scenario, tuple(tuple(row) for row in quotas))


def partition(ds: Dataset, plan: PartitionPlan, seed: int) -> list[Dataset]:
    """Assign samples to clients exactly per the plan's quotas.

    Sampling is without replacement from a seeded shuffle of each class pool,
    so no sample lands on two clients and reruns are identical.

    Raises:
        ValueError: a quota exceeds the available samples of its class
            (the message names the class and the shortfall).
    """
    if plan.n_classes != ds.n_classes:
        raise ValueError(
            f"plan covers {plan.n_classes} classes but dataset has {ds.n_classes}"
        )
    rng = np.random.default_rng(seed)
    pools: list[np.ndarray] = []
    for class_id in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == class_id)
        need = sum(row[class_id] for row in plan.quotas)
        if need > idx.size:
            raise ValueError(
                f"unsatisfiable quota for class {ds.class_names[class_id]!r}: "
                f"requested {need}, available {idx.size} (short {need - idx.size})"
            )
        pools.append(rng.permutation(idx))
    cursors = [0] * ds.n_classes
    shards: list[Dataset] = []
    for row in plan.quotas:
        taken: list[np.ndarray] = []
        for class_id, quota in enumerate(row):
            start = cursors[class_id]
            taken.append(pools[class_id][start : start + quota])
            cursors[class_id] = start + quota
        rows = np.concatenate(taken) if taken else np.empty(0, dtype=np.int64)
        shards.append(ds.select(rows))
    return shards


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a desk-scale synthetic classification dataset."""

    n_classes: int
    dims: int
    clusters_per_class: int
    cluster_spread: float
    samples_per_class: int
    seed: int

    def __post_init__(self) -> None:
        for name in ("n_classes", "dims", "clusters_per_class", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cluster_spread <= 0:
            raise ValueError("cluster_spread must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


def synthesize(spec: SyntheticSpec) -> Dataset:
    """Generate Gaussian-blob classes inside [0, 1]^dims, deterministically.

    Each class is a mixture of ``clusters_per_class`` isotropic blobs whose
    centers are drawn in [0, 1]^dims with a minimum-separation rejection pass
    so blobs of distinct classes do not sit on top of each other.
    """
    rng = np.random.default_rng(spec.seed)
    total_centers = spec.n_classes * spec.clusters_per_class
    min_sep = min(4.0 * spec.cluster_spread * math.sqrt(spec.dims), 0.5 * math.sqrt(spec.dims))
    centers = _place_centers(rng, total_centers, spec.dims, min_sep)

    features: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for class_id in range(spec.n_classes):
        class_centers = centers[
            class_id * spec.clusters_per_class : (class_id + 1) * spec.clusters_per_class
        ]
        counts = _split_evenly(spec.samples_per_class, spec.clusters_per_class)
        for center, count in zip(class_centers, counts):
            features.append(center + rng.normal(0.0, spec.cluster_spread, size=(count, spec.dims)))
        labels.append(np.full(spec.samples_per_class, class_id, dtype=np.int64))
    names = tuple(f"class_{c}" for c in range(spec.n_classes))
    return Dataset(np.vstack(features), np.concatenate(labels), names)


def _place_centers(rng: np.random.Generator, count: int, dims: int, min_sep: float) -> np.ndarray:
    centers = np.empty((count, dims))
    for i in range(count):
        candidate = rng.uniform(0.0, 1.0, size=dims)
        # Rejection capped at 100 tries so generation always terminates.
        for _ in range(100):
            if i == 0 or np.linalg.norm(centers[:i] - candidate, axis=1).min() >= min_sep:
                break
            candidate = rng.uniform(0.0, 1.0, size=dims)
        centers[i] = candidate
    return centers


def _split_evenly(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]
