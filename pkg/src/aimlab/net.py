"""Block-partitioned MLP encoders, fusion heads and the joint classifier."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

FUSION_KINDS = ("concatenation", "summation", "film", "gated")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


def _param(value, name: str) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _maybe_detach(t: Tensor, frozen: bool) -> Tensor:
    return ad.detach(t) if frozen else t


class Layer:
    """Dense layer ``act(x @ W + b)``; W is (in_dim, out_dim)."""

    def __init__(self, spec: LayerSpec, rng, name: str = "layer"):
        self.spec = spec
        std = np.sqrt(2.0 / spec.in_dim) if spec.activation == "relu" else np.sqrt(1.0 / spec.in_dim)
        self.weight = _param(rng.standard_normal((spec.in_dim, spec.out_dim)) * std, f"{name}.weight")
        self.bias = _param(np.zeros(spec.out_dim), f"{name}.bias")

    def parameters(self) -> list:
        return [self.weight, self.bias]

    def forward(self, x: Tensor, weight=None, bias=None, frozen: bool = False) -> Tensor:
        w = self.weight if weight is None else weight
        b = self.bias if bias is None else bias
        if x.shape[-1] != self.spec.in_dim:
            raise DimensionError(
                f"layer {self.weight.name}: input width {x.shape[-1]}, expected {self.spec.in_dim}")
        out = ad.affine(x, _maybe_detach(w, frozen), _maybe_detach(b, frozen))
        return ad.relu(out) if self.spec.activation == "relu" else out


class Block:
    """One sequential segment of an encoder (a list of dense layers)."""

    def __init__(self, specs, rng, name: str = "block"):
        self.layers = [Layer(s, rng, f"{name}.{i}") for i, s in enumerate(specs)]

    @property
    def in_dim(self) -> int:
        return self.layers[0].spec.in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].spec.out_dim

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x: Tensor, params=None, frozen: bool = False) -> Tensor:
        """Run the block, optionally with substitute per-layer ``(W, b)`` pairs."""
        for i, layer in enumerate(self.layers):
            if params is None:
                x = layer.forward(x, frozen=frozen)
            else:
                x = layer.forward(x, *params[i])
        return x


class EncoderBlockStack:
    def __init__(self, modality: int, in_dim: int, hidden: int, depth: int, rng,
                 layers_per_block: int = 1):
        self.modality = modality
        self.blocks = []
        width = in_dim
        for d in range(depth):
            specs = []
            for _ in range(layers_per_block):
                specs.append(LayerSpec(width, hidden, "relu"))
                width = hidden
            self.blocks.append(Block(specs, rng, f"enc{modality}.block{d}"))

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def in_dim(self) -> int:
        return self.blocks[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.blocks[-1].out_dim

    def parameters(self) -> list:
        return [p for b in self.blocks for p in b.parameters()]

    def forward(self, x: Tensor, frozen: bool = False, upto: int | None = None) -> list:
        """Return the activations ``[h_1, ..., h_D]`` (or up to block ``upto``)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        outs = []
        for block in self.blocks[:upto]:
            x = block.forward(x, frozen=frozen)
            outs.append(x)
        return outs


def encoder_forward(stack: EncoderBlockStack, x) -> list:
    return stack.forward(x)


class FusionHead:
    """Fusion strategy plus the final dense classifier to K logits."""

    def __init__(self, kind: str, M: int, feat_dim: int, K: int, rng):
        if kind not in FUSION_KINDS:
            raise ValueError(f"unsupported fusion kind {kind!r}")
        if M < 2:
            raise ValueError("fusion needs at least two modalities")
        self.kind, self.M, self.feat_dim, self.K = kind, M, feat_dim, K
        F = feat_dim
        self.params: dict = {}
        if kind == "film":
            for j in range(1, M):
                self.params[f"film{j}.gamma_w"] = _param(rng.standard_normal((F, F)) / np.sqrt(F), f"film{j}.gamma_w")
                self.params[f"film{j}.gamma_b"] = _param(np.ones(F), f"film{j}.gamma_b")
                self.params[f"film{j}.beta_w"] = _param(rng.standard_normal((F, F)) / np.sqrt(F), f"film{j}.beta_w")
                self.params[f"film{j}.beta_b"] = _param(np.zeros(F), f"film{j}.beta_b")
        elif kind == "gated":
            for j in range(1, M):
                self.params[f"gate{j}.w"] = _param(rng.standard_normal((2 * F, F)) / np.sqrt(2 * F), f"gate{j}.w")
                self.params[f"gate{j}.b"] = _param(np.zeros(F), f"gate{j}.b")
        cin = M * F if kind == "concatenation" else F
        self.params["classifier.w"] = _param(rng.standard_normal((cin, K)) / np.sqrt(cin), "classifier.w")
        self.params["classifier.b"] = _param(np.zeros(K), "classifier.b")

    def parameters(self) -> list:
        return list(self.params.values())

    def fuse(self, feats: list, frozen: bool = False) -> Tensor:
        p = {k: _maybe_detach(v, frozen) for k, v in self.params.items()}
        if len(feats) != self.M:
            raise DimensionError(f"fusion expects {self.M} feature sets, got {len(feats)}")
        if self.kind == "concatenation":
            return ad.concat(feats, axis=1)
        for f in feats:
            if f.shape[-1] != self.feat_dim:
                raise DimensionError(
                    f"{self.kind} fusion: feature width {f.shape[-1]}, expected {self.feat_dim}")
        if self.kind == "summation":
            acc = feats[0]
            for f in feats[1:]:
                acc = acc + f
            return acc
        acc = feats[0]
        for j, f in enumerate(feats[1:], start=1):
            if self.kind == "film":
                gamma = ad.affine(acc, p[f"film{j}.gamma_w"], p[f"film{j}.gamma_b"])
                beta = ad.affine(acc, p[f"film{j}.beta_w"], p[f"film{j}.beta_b"])
                acc = gamma * f + beta
            else:
                g = ad.sigmoid(ad.affine(ad.concat([acc, f], axis=1), p[f"gate{j}.w"], p[f"gate{j}.b"]))
                acc = g * acc + (1.0 - g) * f
        return acc

    def forward(self, feats: list, frozen: bool = False) -> Tensor:
        fused = self.fuse(feats, frozen)
        w = _maybe_detach(self.params["classifier.w"], frozen)
        b = _maybe_detach(self.params["classifier.b"], frozen)
        if fused.shape[-1] != w.shape[0]:
            raise DimensionError(f"classifier input {fused.shape[-1]}, expected {w.shape[0]}")
        return ad.affine(fused, w, b)


def fuse_and_classify(head: FusionHead, feats: list) -> Tensor:
    feats = [f if isinstance(f, Tensor) else Tensor(np.atleast_2d(f)) for f in feats]
    return head.forward(feats)


def task_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    return ad.cross_entropy(logits, labels)


class MultimodalNet:
    """Per-modality block encoders followed by a fusion head."""

    def __init__(self, in_dims, K: int, hidden: int = 32, depth: int = 4,
                 fusion: str = "concatenation", seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_dims = list(in_dims)
        self.K, self.hidden, self.depth, self.fusion = K, hidden, depth, fusion
        self.encoders = [EncoderBlockStack(m, d, hidden, depth, rng)
                         for m, d in enumerate(self.in_dims)]
        self.head = FusionHead(fusion, len(self.in_dims), hidden, K, rng)

    @property
    def M(self) -> int:
        return len(self.encoders)

    def named_parameters(self) -> list:
        named = []
        for enc in self.encoders:
            named.extend((p.name, p) for p in enc.parameters())
        named.extend(self.head.params.items())
        return named

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def forward(self, xs, frozen: bool = False):
        """Return ``(logits, hs)`` where ``hs[m]`` lists the block outputs."""
        hs = [enc.forward(x, frozen=frozen) for enc, x in zip(self.encoders, xs)]
        logits = self.head.forward([h[-1] for h in hs], frozen=frozen)
        return logits, hs

    def predict(self, xs) -> np.ndarray:
        with ad.no_grad():
            logits, _ = self.forward([Tensor(x) for x in xs])
        # argmax returns the first maximum: ties go to the lowest class index
        return logits.value.argmax(axis=1)

    def features(self, xs) -> list:
        """Block activations as plain arrays, ``feats[m][d]``."""
        with ad.no_grad():
            return [[h.value for h in enc.forward(Tensor(x))]
                    for enc, x in zip(self.encoders, xs)]


def nearest_prototype(feats: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """Index of the nearest prototype row per feature row; ties to the lowest index."""
    d = ((feats[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def unimodal_probe_accuracy(stack: EncoderBlockStack, protos_depth_last: np.ndarray,
                            x: np.ndarray, y) -> float:
    """Nearest-prototype accuracy of one modality's deepest features."""
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("empty dataset")
    with ad.no_grad():
        feats = stack.forward(Tensor(x))[-1].value
    return float(np.mean(nearest_prototype(feats, protos_depth_last) == y))


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   bytes 0..7    magic b"AIMLABCK"
#   u32           format version (currently 1)
#   u32           header length H in bytes
#   H bytes       UTF-8 JSON header: {"format_version", "M", "D", "K", "dims",
#                 "hidden", "fusion", "tensors": [[name, shape], ...], "extra"}
#   then, for each entry of "tensors" in order, prod(shape) float64 values
#   (little-endian, row-major).

CHECKPOINT_MAGIC = b"AIMLABCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: MultimodalNet, extra_tensors=(), extra: dict | None = None) -> None:
    """Write the network parameters, then ``extra_tensors`` (name, Tensor) pairs."""
    named = list(net.named_parameters()) + list(extra_tensors)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "M": net.M, "D": net.depth, "K": net.K, "dims": net.in_dims,
        "hidden": net.hidden, "fusion": net.fusion,
        "tensors": [[name, list(t.shape)] for name, t in named],
        "extra": extra or {},
    }
    raw = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple:
    """Return ``(header, {name: array})``."""
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an aimlab checkpoint")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode())
    offset = 16 + hlen
    arrays = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(blob):
            raise ValueError(f"{path}: truncated at tensor {name}")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    return header, arrays


def load_checkpoint(path) -> tuple:
    """Rebuild a :class:`MultimodalNet` from a checkpoint.

    Returns ``(net, header, arrays)`` so callers can restore extra tensors.
    """
    header, arrays = read_checkpoint(path)
    net = MultimodalNet(header["dims"], header["K"], hidden=header["hidden"],
                        depth=header["D"], fusion=header["fusion"])
    for name, p in net.named_parameters():
        p.value[...] = arrays[name]
    return net, header, arrays
