"""Optimise prototype roots through a fixed network and watch them spread.

Prints the objective before and after, and the mean absolute off-diagonal
cosine of the prototypes at the first and the deepest block.
"""
from aimlab import dap
from aimlab.net import MultimodalNet

net = MultimodalNet([8, 8], 4, hidden=16, depth=3, seed=1)
bank = dap.PrototypeBank([8, 8], 4, seed=1).propagate(net)


def offdiag(depth):
    return dap.mean_abs_offdiag(dap.orthogonality_gram(bank, 0, depth))


before = (offdiag(1), offdiag(3))
history = dap.optimize_roots(bank, net, steps=200, lr=1e-2, momentum=0.9)
after = (offdiag(1), offdiag(3))
print(f"objective {history[0]:.4f} -> {dap.dap_objective(bank, net)[0].item():.4f}")
print(f"off-diagonal |cos| depth 1: {before[0]:.3f} -> {after[0]:.3f}")
print(f"off-diagonal |cos| depth 3: {before[1]:.3f} -> {after[1]:.3f}")
