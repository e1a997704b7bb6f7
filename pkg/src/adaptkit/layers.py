"""Layer stack with explicit reverse-mode backprop.

A Network is an ordered list of layers whose last element is always a dense
classifier. The parameter set is partitioned into representation parameters
(everything before the classifier) and classifier parameters (final dense
weight + bias); the partition is what lets the adaptation stage freeze the
classifier while updating the features.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, check_finite, fingerprint_all

BN_EPS = 1e-5
BN_MOMENTUM = 0.1  # new = 0.9 * old + 0.1 * batch


class Dense:
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, prefix: str = ""):
        # Glorot-uniform weights, zero bias.
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)),
                             name=f"{prefix}.weight")
        self.bias = Tensor(np.zeros(out_dim), name=f"{prefix}.bias")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool):
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"dense expected width {self.in_dim}, got {x.shape[1]}")
        return x @ self.weight.data.T + self.bias.data, x

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        x = cache
        self.weight.add_grad(dy.T @ x)
        self.bias.add_grad(dy.sum(axis=0))
        return dy @ self.weight.data


class BatchNorm:
    kind = "batchnorm"

    def __init__(self, dim: int, prefix: str = ""):
        self.gamma = Tensor(np.ones(dim), name=f"{prefix}.gamma")
        self.beta = Tensor(np.zeros(dim), name=f"{prefix}.beta")
        self.running_mean = Tensor(np.zeros(dim), name=f"{prefix}.running_mean")
        self.running_var = Tensor(np.ones(dim), name=f"{prefix}.running_var")

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def parameters(self):
        return [self.gamma, self.beta]

    def state_tensors(self):
        return [self.running_mean, self.running_var]

    def forward(self, x: np.ndarray, train: bool):
        if train:
            if x.shape[0] < 2:
                raise ConfigError("batchnorm in train mode needs a batch of at least 2")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean.data = (1 - BN_MOMENTUM) * self.running_mean.data + BN_MOMENTUM * mean
            self.running_var.data = (1 - BN_MOMENTUM) * self.running_var.data + BN_MOMENTUM * var
        else:
            mean = self.running_mean.data
            var = self.running_var.data
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv_std
        y = self.gamma.data * xhat + self.beta.data
        return y, (xhat, inv_std, train)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        xhat, inv_std, train = cache
        self.gamma.add_grad((dy * xhat).sum(axis=0))
        self.beta.add_grad(dy.sum(axis=0))
        dxhat = dy * self.gamma.data
        if train:
            # Batch statistics participate in the forward pass.
            b = xhat.shape[0]
            dx = (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)) * inv_std
            return dx
        return dxhat * inv_std


class ReLU:
    kind = "relu"

    def parameters(self):
        return []

    def forward(self, x: np.ndarray, train: bool):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        return dy * cache


@dataclass(frozen=True)
class ArchSpec:
    """Dense net blueprint: dense(+batchnorm+relu) blocks then a dense classifier."""

    input_dim: int
    hidden: tuple[int, ...]
    num_classes: int
    batchnorm: bool = True

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "num_classes": self.num_classes,
            "batchnorm": self.batchnorm,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(
            input_dim=int(d["input_dim"]),
            hidden=tuple(int(h) for h in d["hidden"]),
            num_classes=int(d["num_classes"]),
            batchnorm=bool(d.get("batchnorm", True)),
        )


class Network:
    """Ordered layer stack whose final layer is the dense classifier."""

    def __init__(self, layers: list, arch: ArchSpec):
        if not layers or layers[-1].kind != "dense":
            raise ConfigError("last layer must be the dense classifier")
        self.layers = layers
        self.arch = arch
        self.classifier_index = len(layers) - 1
        self.mode = "train"

    # -- mode ------------------------------------------------------------
    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    # -- parameters ------------------------------------------------------
    @property
    def classifier(self) -> Dense:
        return self.layers[self.classifier_index]

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def representation_parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers[: self.classifier_index]:
            out.extend(layer.parameters())
        return out

    def classifier_parameters(self) -> list[Tensor]:
        return self.classifier.parameters()

    def state_tensors(self) -> list[Tensor]:
        """Non-trainable state: batchnorm running statistics."""
        out = []
        for layer in self.layers:
            if layer.kind == "batchnorm":
                out.extend(layer.state_tensors())
        return out

    def all_tensors(self) -> list[Tensor]:
        return self.parameters() + self.state_tensors()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def classifier_fingerprint(self) -> str:
        return fingerprint_all(self.classifier_parameters())

    # -- forward / backward ----------------------------------------------
    def forward(self, batch: np.ndarray, record: bool = False):
        """Run the stack; with record=True also return the backprop cache."""
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"expected a 2-d batch, got shape {x.shape}")
        if x.shape[0] < 1:
            raise ShapeError("empty batch")
        train = self.mode == "train"
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train)
            caches.append(cache)
        check_finite(x, "network output")
        if record:
            return x, caches
        return x

    def forward_features(self, batch: np.ndarray, record: bool = False):
        """Forward through the representation layers only (no classifier)."""
        x = np.asarray(batch, dtype=np.float64)
        train = self.mode == "train"
        caches = []
        for layer in self.layers[: self.classifier_index]:
            x, cache = layer.forward(x, train)
            caches.append(cache)
        check_finite(x, "feature output")
        if record:
            return x, caches
        return x

    def backward(self, caches: list, dout: np.ndarray, layers=None) -> np.ndarray:
        """Accumulate parameter grads from an upstream gradient; returns dx."""
        layers = self.layers if layers is None else layers
        if len(caches) != len(layers):
            raise ConfigError("backward called with a cache that does not match the forward pass")
        dx = np.asarray(dout, dtype=np.float64)
        for layer, cache in zip(reversed(layers), reversed(caches)):
            dx = layer.backward(cache, dx)
        return dx

    def backward_features(self, caches: list, dout: np.ndarray) -> np.ndarray:
        return self.backward(caches, dout, layers=self.layers[: self.classifier_index])

    def copy(self) -> "Network":
        net = Network([_copy_layer(l) for l in self.layers], self.arch)
        net.mode = self.mode
        return net


def _copy_layer(layer):
    if layer.kind == "dense":
        new = Dense.__new__(Dense)
        new.weight = layer.weight.copy()
        new.bias = layer.bias.copy()
        return new
    if layer.kind == "batchnorm":
        new = BatchNorm.__new__(BatchNorm)
        new.gamma = layer.gamma.copy()
        new.beta = layer.beta.copy()
        new.running_mean = layer.running_mean.copy()
        new.running_var = layer.running_var.copy()
        return new
    if layer.kind == "relu":
        return ReLU()
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


def build_network(arch: ArchSpec, rng: np.random.Generator) -> Network:
    """Construct a fresh network for an ArchSpec with Glorot-uniform init."""
    if arch.num_classes < 2:
        raise ConfigError("need at least 2 classes")
    layers: list = []
    prev = arch.input_dim
    for i, width in enumerate(arch.hidden):
        layers.append(Dense(prev, width, rng, prefix=f"block{i}.dense"))
        if arch.batchnorm:
            layers.append(BatchNorm(width, prefix=f"block{i}.bn"))
        layers.append(ReLU())
        prev = width
    layers.append(Dense(prev, arch.num_classes, rng, prefix="classifier"))
    return Network(layers, arch)
