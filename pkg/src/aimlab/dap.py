"""Depth-adaptive prototypes.

Learnable root prototypes (one per class and modality) are pushed through the
encoder blocks; the image after block ``d`` is the class prototype for depth
``d``. Roots are trained so that the fused roots of class ``k`` classify as
``k`` and the deepest prototypes of each modality are mutually orthogonal.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, NumericError, Tensor


class PrototypeBank:
    """Roots ``roots[m]`` of shape (K, in_dim_m) and their propagated images.

    ``protos[m][d]`` holds the depth-``d+1`` prototypes as plain arrays
    (index 0 is the output of the first block).
    """

    def __init__(self, in_dims, K: int, seed: int = 0):
        rng = np.random.default_rng([seed, 7])
        self.K = K
        self.roots = [Tensor(rng.standard_normal((K, d)) / np.sqrt(d),
                             requires_grad=True, name=f"proto{m}.root")
                      for m, d in enumerate(in_dims)]
        self.protos: list = []

    @property
    def M(self) -> int:
        return len(self.roots)

    def parameters(self) -> list:
        return list(self.roots)

    def root_forward(self, net, frozen: bool = True) -> list:
        """Differentiable images of the roots, ``[m][d]`` as Tensors."""
        for m, (root, enc) in enumerate(zip(self.roots, net.encoders)):
            if root.shape[1] != enc.in_dim:
                raise DimensionError(
                    f"prototype roots of modality {m} have width {root.shape[1]}, "
                    f"encoder expects {enc.in_dim}")
        return [enc.forward(root, frozen=frozen) for root, enc in zip(self.roots, net.encoders)]

    def propagate(self, net) -> "PrototypeBank":
        with ad.no_grad():
            self.protos = [[h.value for h in hs] for hs in self.root_forward(net)]
        return self

    def at(self, m: int, d: int) -> np.ndarray:
        """Prototypes of modality ``m`` at depth ``d`` (1-based, as in P_d)."""
        return self.protos[m][d - 1]

    def snapshot(self) -> list:
        return [[p.copy() for p in per_m] for per_m in self.protos]


def propagate(bank: PrototypeBank, net) -> PrototypeBank:
    return bank.propagate(net)


def dap_task_loss(bank: PrototypeBank, net, images=None) -> Tensor:
    """Cross-entropy of the frozen framework on the fused class-``k`` roots against ``k``."""
    images = bank.root_forward(net) if images is None else images
    logits = net.head.forward([hs[-1] for hs in images], frozen=True)
    return ad.cross_entropy(logits, np.arange(bank.K))


def orth_loss_from(deepest: list) -> Tensor:
    """Mean over modalities of ``||cos_gram(P) - I||_F^2``."""
    total = None
    for p in deepest:
        k = p.shape[0]
        term = ad.frobenius_sq(ad.cosine_gram(p) - ad.constant(np.eye(k)))
        total = term if total is None else total + term
    return ad.scalar_mul(total, 1.0 / len(deepest))


def dap_orth_loss(bank: PrototypeBank, net=None, images=None) -> Tensor:
    if images is None:
        if net is None:
            images = [[Tensor(bank.protos[m][-1])] for m in range(bank.M)]
        else:
            images = bank.root_forward(net)
    return orth_loss_from([hs[-1] for hs in images])


def dap_objective(bank: PrototypeBank, net) -> tuple:
    """Return ``(task + orth, task, orth)`` with gradients reaching only the roots."""
    images = bank.root_forward(net, frozen=True)
    task = dap_task_loss(bank, net, images)
    orth = dap_orth_loss(bank, images=images)
    return task + orth, task, orth


def optimize_roots(bank: PrototypeBank, net, steps: int, optimizer=None,
                   lr: float = 1e-2, momentum: float = 0.0) -> list:
    """Minimise the prototype objective over the roots with the network frozen.

    Returns the objective value before each step.
    """
    opt = optimizer or ad.SGD(bank.roots, lr=lr, momentum=momentum)
    history = []
    for _ in range(steps):
        total, _, _ = dap_objective(bank, net)
        if not np.isfinite(total.item()):
            raise NumericError("prototype optimisation diverged")
        history.append(total.item())
        ad.backward(total)
        opt.step()
    bank.propagate(net)
    return history


def cosine_gram_np(p: np.ndarray) -> np.ndarray:
    """Diagnostic cosine gram; a zero row counts as orthogonal to every other row."""
    p = np.asarray(p, dtype=np.float64)
    norms = np.sqrt((p ** 2).sum(axis=1))
    live = norms > 0
    if live.all():
        with ad.no_grad():
            return ad.cosine_gram(Tensor(p)).value
    unit = np.zeros_like(p)
    unit[live] = p[live] / norms[live, None]
    gram = unit @ unit.T
    np.fill_diagonal(gram, 1.0)
    return gram


def orthogonality_gram(bank: PrototypeBank, m: int, d: int) -> np.ndarray:
    return cosine_gram_np(bank.at(m, d))


def mean_abs_offdiag(gram: np.ndarray) -> float:
    k = gram.shape[0]
    return float(np.abs(gram[~np.eye(k, dtype=bool)]).mean())


def export_grams(bank: PrototypeBank, out_dir, epoch: int) -> list:
    """Write one K x K CSV per (modality, depth): gram_m{m}_d{d}_epoch{e}.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in range(bank.M):
        for d in range(1, len(bank.protos[m]) + 1):
            path = out_dir / f"gram_m{m}_d{d}_epoch{epoch}.csv"
            np.savetxt(path, orthogonality_gram(bank, m, d), delimiter=",", fmt="%.17g")
            paths.append(path)
    return paths
