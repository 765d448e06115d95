"""Parameter decoupling: split a block's parameters into auxiliary and complementary sets.

For each layer the flattened parameters ``theta`` (weights row-major, then
bias) go through a latent encoder, a sigmoid mask over the latent code, and a
shared decoder::

    lat = enc(theta);  w = sigmoid(mask(lat))
    theta_b = dec(lat * w);  theta_g = dec(lat * (1 - w))

``theta_b`` loads into an auxiliary copy of the block, ``theta_g`` into the
complementary copy used to train the decoupler. The masking is soft.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


def flatten_params(block) -> list:
    """Per-layer flat (1, n) Tensors: weights row-major followed by bias."""
    return [ad.concat([ad.reshape(layer.weight, (1, -1)), ad.reshape(layer.bias, (1, -1))], axis=1)
            for layer in block.layers]


def unflatten(flat: Tensor, spec) -> tuple:
    """Inverse of :func:`flatten_params` for one layer: ``(W, b)``."""
    nw = spec.in_dim * spec.out_dim
    if flat.shape != (1, nw + spec.out_dim):
        raise DimensionError(f"unflatten: got {flat.shape}, layer needs {nw + spec.out_dim}")
    w = ad.reshape(flat[:, :nw], (spec.in_dim, spec.out_dim))
    b = ad.reshape(flat[:, nw:], (spec.out_dim,))
    return w, b


class LayerDecoupler:
    """Latent encoder, mask net and decoder for one layer of one block."""

    def __init__(self, n_params: int, latent: int, rng, name: str = "dec"):
        def dense(fan_in, fan_out, tag):
            w = Tensor(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in),
                       requires_grad=True, name=f"{name}.{tag}.w")
            b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.{tag}.b")
            return w, b

        self.n_params, self.latent = n_params, latent
        self.enc_w, self.enc_b = dense(n_params, latent, "enc")
        self.mask_w, self.mask_b = dense(latent, latent, "mask")
        self.dec_w, self.dec_b = dense(latent, n_params, "dec")

    def parameters(self) -> list:
        return [self.enc_w, self.enc_b, self.mask_w, self.mask_b, self.dec_w, self.dec_b]

    def _p(self, frozen: bool) -> list:
        ps = self.parameters()
        return [ad.detach(p) for p in ps] if frozen else ps

    def encode(self, theta: Tensor, frozen: bool = False) -> Tensor:
        if theta.value.ndim != 2 or theta.shape[1] != self.n_params:
            raise DimensionError(f"decoupler expects (r, {self.n_params}), got {theta.shape}")
        w, b = self._p(frozen)[0:2]
        return ad.affine(theta, w, b)

    def mask(self, lat: Tensor, frozen: bool = False) -> Tensor:
        w, b = self._p(frozen)[2:4]
        return ad.sigmoid(ad.affine(lat, w, b))

    def decode(self, lat: Tensor, frozen: bool = False) -> Tensor:
        w, b = self._p(frozen)[4:6]
        return ad.affine(lat, w, b)


class Decoupler:
    """One :class:`LayerDecoupler` per (modality, depth, layer)."""

    def __init__(self, net, latent: int = 64, seed: int = 0):
        rng = np.random.default_rng([seed, 11])
        self.latent = latent
        self.layers = [[[LayerDecoupler(layer.spec.n_params, latent, rng, f"pdm{m}.{d}.{i}")
                         for i, layer in enumerate(block.layers)]
                        for d, block in enumerate(enc.blocks)]
                       for m, enc in enumerate(net.encoders)]

    def parameters(self) -> list:
        return [p for per_m in self.layers for per_d in per_m for ld in per_d
                for p in ld.parameters()]

    def named_parameters(self) -> list:
        return [(p.name, p) for p in self.parameters()]


@dataclass
class Decoupling:
    """Result of decoupling one block.

    ``aux`` and ``comp`` are per-layer ``(W, b)`` pairs for the auxiliary and
    complementary blocks; ``recon`` is the sum over layers of the squared
    reconstruction error; ``masks`` are the per-layer mask arrays.
    """

    aux: list
    comp: list
    recon: Tensor
    masks: list


def decouple(layer_decs: list, block, stop_theta: bool = False,
             frozen_decoupler: bool = False) -> Decoupling:
    """Decouple every layer of ``block`` with its per-layer decouplers.

    With ``stop_theta`` the block parameters enter as constants, so the
    resulting losses train only the decoupler; ``frozen_decoupler`` is the
    converse and routes gradients to the block parameters only.
    """
    return decouple_routes(layer_decs, block, (stop_theta,), frozen_decoupler)[0]


def decouple_routes(layer_decs: list, block, stops=(False, True),
                    frozen_decoupler: bool = False) -> list:
    """Decouple once per entry of ``stops``, sharing one batched pass.

    Each route sees identical values; routes differ only in whether the
    block parameters are detached.
    """
    if len(layer_decs) != len(block.layers):
        raise DimensionError("decoupler and block have different layer counts")
    r = len(stops)
    outs = [Decoupling([], [], None, []) for _ in stops]
    for ld, layer, theta in zip(layer_decs, block.layers, flatten_params(block)):
        rows = [ad.detach(theta) if stop else theta for stop in stops]
        thetas = rows[0] if r == 1 else ad.concat(rows, axis=0)
        lat = ld.encode(thetas, frozen_decoupler)
        w = ld.mask(lat, frozen_decoupler)
        lat_b = lat * w
        lat_g = lat - lat_b
        # decode aux, complementary and full latent codes of every route at once
        decoded = ld.decode(ad.concat([lat_b, lat_g, lat], axis=0), frozen_decoupler)
        err = thetas - decoded[2 * r:]
        for i, out in enumerate(outs):
            out.aux.append(unflatten(decoded[i:i + 1], layer.spec))
            out.comp.append(unflatten(decoded[r + i:r + i + 1], layer.spec))
            e = ad.frobenius_sq(err[i:i + 1] if r > 1 else err)
            out.recon = e if out.recon is None else out.recon + e
            out.masks.append(w.value[i].copy())
    return outs


def clipped_distance(out: Tensor, protos, max_dist: float = 50.0) -> Tensor:
    protos = protos if isinstance(protos, Tensor) else ad.constant(protos)
    return ad.clip(ad.pairwise_distance(out, protos), 0.0, max_dist)


def true_class_prob(neg_scores: np.ndarray, labels) -> np.ndarray:
    """Per-row softmax probability of the labelled class (stabilised)."""
    z = neg_scores - neg_scores.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[np.arange(len(labels)), np.asarray(labels)]


def pdm_loss(decoupling: Decoupling, block, inputs: Tensor, labels, protos) -> tuple:
    """``(L_g + L_re, L_g, L_re)`` for one block.

    ``L_g`` is the distance cross-entropy of the complementary block's output
    against the true-class prototype.
    """
    out = block.forward(inputs, params=decoupling.comp)
    l_g = ad.distance_ce(clipped_distance(out, protos), labels)
    return l_g + decoupling.recon, l_g, decoupling.recon


def block_performance_of(block, inputs: Tensor, labels, protos, params=None) -> float:
    """Batch mean of the true-class probability under a softmax over negated distances."""
    with ad.no_grad():
        out = block.forward(inputs, params=params)
        dist = clipped_distance(out, protos).value
    return float(true_class_prob(-dist, labels).mean())


def mask_stats(masks: list) -> list:
    return [(float(w.mean()), float(w.min()), float(w.max())) for w in masks]
