"""
Splitting data across clients
=============================

IID shards versus label skew, where each client holds a few classes in
Dirichlet-drawn proportions. Also shows the proxy set carved from test data.
"""
import numpy as np

from fedlora_sim.data import PartitionSpec, ProxySpec, extract_proxy, generate_synthetic, partition
from fedlora_sim.numerics import RngStream

train, test = generate_synthetic(10, 8, 16, 1000, 300, RngStream(0, "data"))
print("train class counts:", train.class_counts())

# Classes go round-robin, so with 8 clients holding 3 classes each every class
# has two or three holders; the Dirichlet draw decides how they share it.
for spec in (PartitionSpec("IID", n_clients=8), PartitionSpec("LabelSkew", 3, 1.0, 8),
             PartitionSpec("LabelSkew", 3, 0.1, 8)):
    shards = partition(train, spec, RngStream(0, "partition"))
    print(f"\n{spec.mode} C={spec.classes_per_client} alpha={spec.dirichlet_alpha}")
    for i, d in shards.items():
        print(f"  client {i}: {len(d):4d} samples  {d.class_counts()}")

proxy, rest = extract_proxy(test, ProxySpec(50), RngStream(0, "proxy"))
print("\nproxy", len(proxy), "held-out test", len(rest),
      "overlap", np.intersect1d(proxy.ids, rest.ids).size)
