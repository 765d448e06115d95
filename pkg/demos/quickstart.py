"""Train the joint baseline and AIM on one small synthetic task and compare.

Run from the repository root:  python3 demos/quickstart.py
"""
import dataclasses

from aimlab import trainer

base = trainer.ExperimentConfig(E=3, E_T=12, hidden=16, depth=3, latent_dim=16,
                                n_train=600, n_test=300, lr=1e-2)

for mode in ("joint_baseline", "aim"):
    cfg = dataclasses.replace(base, mode=mode)
    _, hist = trainer.train(cfg, export=False)
    s = trainer.summary_of(hist)
    probes = ", ".join(f"{p:.3f}" for p in s["final_probe_acc"])
    print(f"{mode:15s} test acc {s['final_test_acc']:.3f}  probes [{probes}]  "
          f"mean alpha {s['mean_final_alpha']:.3f}")
