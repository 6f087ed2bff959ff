"""
Back-of-the-envelope costs
==========================

Compute and traffic estimates with all hidden constants set to one. Only
ratios between full training and partial-layer training are meaningful.
"""
from fedlora_sim.metrics import CostModelInputs, backward_cost, comm_cost, fim_overhead

for c_bar in (3, 6, 9, 12):
    inp = CostModelInputs(tau=1, l=12, d=64, R=16, N=100, s=10, c_bar=c_bar, N_FIM=100, T_FIM=50, T=500)
    bw = backward_cost(inp)
    cc = comm_cost(inp)
    print(f"c_bar={c_bar:2d}  backward ratio {bw['ratio']:.3f}  comm ratio {cc['ratio']:.5f}"
          f"  score refresh overhead {fim_overhead(inp):.3g}")

# The larger adapter size used for the traffic example.
inp = CostModelInputs(tau=1, l=12, d=64, R=2048, N=100, s=10, c_bar=9, T_FIM=50, T=500)
print("traffic per round, 9 of 12 layers:", comm_cost(inp)["ours"])
