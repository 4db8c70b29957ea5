"""Side-by-side federation: plain averaging vs proximal vs prototype exchange
on fully disjoint silos (each client holds exactly one class).

Run with: python demos/04_strategy_comparison.py
"""

import protofed as pf

data = pf.synthesize(pf.SyntheticSpec(3, 12, 1, 0.05, 200, seed=42))
plan = pf.build_partition_plan("severe", data.class_counts(), n_clients=3)
shards = pf.partition(data, plan, seed=0)
print("severe non-IID silos:", [s.class_counts().tolist() for s in shards])

model = pf.ModelSpec(12, ((32, 1e-3), (16, 1e-3)), 0.5, 3)
histories = {}
for strategy, mu in (("fedavg", 0.0), ("fedprox", 0.1), ("fedp3e", 0.0)):
    cfg = pf.FederationConfig(
        strategy=strategy, n_clients=3, rounds=10, trigger_round=4,
        accuracy_threshold=0.97, noise_sigma=0.01,
        train=pf.TrainConfig(epochs=10, batch_size=32, learning_rate=0.005, prox_mu=mu),
        model=model, scale_mode="none", seed=1,
    )
    histories[strategy] = pf.run_federation(cfg, shards)

print("\nglobal accuracy by round")
print("round  " + "  ".join(f"{s:>8}" for s in histories))
for idx in range(10):
    row = [f"{histories[s][idx].global_report.accuracy:8.4f}" for s in histories]
    marker = " <- exchange" if histories["fedp3e"][idx].exchange_triggered else ""
    print(f"{idx + 1:5}  " + "  ".join(row) + marker)

exchange = pf.exchange_round(histories["fedp3e"])
metrics = histories["fedp3e"][exchange - 1]
d_w = metrics.model_upload_floats // metrics.n_clients
up = metrics.proto_upload_floats[0]
down = metrics.proto_download_floats
print(f"\none-shot exchange at round {exchange}:")
print(f"  model update: {d_w} floats per client per direction")
print(f"  prototype upload: {up} floats per client ({100 * up / d_w:.2f}% of a model)")
print(f"  prototype download: {down} floats per client ({100 * down / d_w:.2f}% of a model)")
