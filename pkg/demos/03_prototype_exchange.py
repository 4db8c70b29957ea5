"""The prototype pipeline: GMM fitting, noise, reclustering, SMOTE synthesis.

Run with: python demos/03_prototype_exchange.py
"""

import json

import numpy as np

import protofed as pf

rng = np.random.default_rng(0)

# A client's view of one class: two clusters of traffic in feature space.
class_rows = np.vstack([
    rng.normal(0.2, 0.03, (120, 5)),
    rng.normal(0.7, 0.03, (80, 5)),
])

# The mixture size is chosen by the Bayesian Information Criterion.
k_star, model = pf.select_k_bic(class_rows, k_max=5, seed=1)
print(f"BIC selects {k_star} components; weights={np.round(model.weights, 3)}")
print("component means (first 2 dims):")
print(np.round(model.means[:, :2], 3))

# Component means become the class prototypes; noise protects the raw stats.
protos = pf.extract_prototypes(model, class_id=1, origin_client=0)
noisy = pf.perturb(protos, sigma=0.01, seed=2)
shift = max(np.abs(a[1] - b[1]).max() for a, b in zip(protos.entries, noisy.entries))
print(f"\nperturbed {len(noisy.entries)} prototypes, max coordinate shift {shift:.4f}")

payload = noisy.to_json()
floats = sum(len(e["vector"]) for e in json.loads(payload)["entries"])
print(f"upload payload: {floats} floats ({len(noisy.entries)} vectors x 5 dims)")

# Server side: three clients submit prototypes; per class they are reclustered
# with mini-batch k-means into a compact global set.
uploads = [noisy]
for client in (1, 2):
    crng = np.random.default_rng(client)
    entries = tuple((1, crng.normal(0.45, 0.1, 5)) for _ in range(3))
    uploads.append(pf.perturb(pf.PrototypeSet(entries, 0.0, client), 0.01, seed=client))
received = sum(len(u.entries) for u in uploads)
gp = pf.aggregate_prototypes(uploads, seed=3)
print(f"\nserver received {received} prototypes for class 1, "
      f"kept {gp.prototypes[1].shape[0]} global centroids "
      f"(heuristic: {pf.choose_cluster_count(received, 5)})")

# Client side again: a silo that never saw class 1 synthesizes samples for it
# by interpolating between global prototypes.
local = pf.Dataset(rng.random((200, 5)), np.zeros(200, dtype=int), ("benign", "attack"))
augmented = pf.augment(local, gp, pf.AugmentationPolicy(0.10, "missing_only", seed=4))
added = augmented.n_samples - local.n_samples
print(f"\naugmentation: {local.n_samples} -> {augmented.n_samples} rows "
      f"({added} synthetic, labels {sorted(set(augmented.labels[200:].tolist()))})")
