"""
A short federated run
=====================

Thirty simulated clients with mixed layer budgets fine-tune the adapters of
an 8-layer toy transformer. The first rounds sample layers from the
geometric prior, later rounds from score-driven probabilities.
"""
from pathlib import Path

from fedlora_sim.config import parse_config
from fedlora_sim.federation import run_experiment

config = parse_config(Path(__file__).resolve().parent.parent / "configs" / "acceptance_ordering.yaml")
config = config.with_overrides({"federation.T": 20, "federation.eval_every": 5})


def show(rec, state):
    if rec.round % 5 == 4:
        probs = " ".join(f"{p:.3f}" for p in rec.layer_probs)
        print(f"round {rec.round + 1:3d}  acc {rec.accuracy:.3f}  probs [{probs}]"
              f"{'  (scores refreshed)' if rec.fim_refreshed else ''}")


result = run_experiment(config, seed=0, on_round=show)

first = result.records[0]
print("\nround 1 maps:")
for i in first.selected:
    cap = result.simulation.capabilities[i]
    print(f"  client {i:2d} (budget {cap}): {''.join(map(str, first.maps[i]))}")
