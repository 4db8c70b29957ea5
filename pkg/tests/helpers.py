"""Shared test utilities: finite-difference checks and tiny data builders."""

from __future__ import annotations

import numpy as np

import protofed as pf
from protofed.network import loss_and_grads


def randomized_params(spec: pf.ModelSpec, seed: int) -> pf.ModelParams:
    """Model params with non-degenerate weights and running statistics."""
    rng = np.random.default_rng(seed)
    params = pf.build_model(spec, seed)
    for name in params.tensors:
        params.tensors[name] = params.tensors[name] + 0.1 * rng.standard_normal(
            params.tensors[name].shape
        )
    for name in params.running:
        if name.startswith("mean"):
            params.running[name] = 0.1 * rng.standard_normal(params.running[name].shape)
        else:
            params.running[name] = 0.5 + rng.random(params.running[name].shape)
    return params


def fd_max_relative_error(
    spec: pf.ModelSpec,
    seed: int,
    mode: str = "train",
    prox_mu: float = 0.0,
    batch_rows: int = 6,
    step: float = 1e-4,
) -> float:
    """Worst relative error of analytic gradients vs central differences.

    Relative error per coordinate is |analytic - fd| / max(1, |analytic|,
    |fd|), which behaves like absolute error for near-zero gradients.
    """
    rng = np.random.default_rng(seed)
    params = randomized_params(spec, seed)
    x = rng.standard_normal((batch_rows, spec.input_dim))
    y = rng.integers(0, spec.output_classes, batch_rows)
    w_global = pf.build_model(spec, seed + 1) if prox_mu > 0 else None

    _, grads = loss_and_grads(params, x, y, prox_mu=prox_mu, w_global=w_global, mode=mode)

    def loss_at() -> float:
        value, _ = loss_and_grads(params, x, y, prox_mu=prox_mu, w_global=w_global, mode=mode)
        return value

    worst = 0.0
    for name, tensor in params.tensors.items():
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            original = tensor[idx]
            tensor[idx] = original + step
            plus = loss_at()
            tensor[idx] = original - step
            minus = loss_at()
            tensor[idx] = original
            fd = (plus - minus) / (2 * step)
            analytic = grads[name][idx]
            rel = abs(analytic - fd) / max(1.0, abs(analytic), abs(fd))
            worst = max(worst, rel)
    return worst


def two_blob_dataset(n_per_class: int, dims: int, spread: float, seed: int) -> pf.Dataset:
    """Two linearly separable Gaussian blobs labelled 0 and 1."""
    rng = np.random.default_rng(seed)
    a = rng.normal(0.25, spread, (n_per_class, dims))
    b = rng.normal(0.75, spread, (n_per_class, dims))
    features = np.vstack([a, b])
    labels = np.array([0] * n_per_class + [1] * n_per_class)
    return pf.Dataset(features, labels, ("zero", "one"))


def lloyd_kmeans(points: np.ndarray, centers: np.ndarray, iters: int = 200) -> np.ndarray:
    """Full-batch Lloyd iterations from the given starting centers."""
    centers = centers.copy()
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        moved = False
        for j in range(centers.shape[0]):
            members = points[assign == j]
            if len(members):
                new = members.mean(axis=0)
                if not np.allclose(new, centers[j]):
                    moved = True
                centers[j] = new
        if not moved:
            break
    return centers


def kmeans_sse(points: np.ndarray, centers: np.ndarray) -> float:
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())
