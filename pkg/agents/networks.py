"""
Small numpy networks: fully connected layers with cached forward passes,
hand-written backpropagation, Adam, Gaussian output heads and JSON checkpoints.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import expit

from utils import NonFiniteGradientError, make_rng

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
CHECKPOINT_FORMAT_VERSION = 1
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")


class Mlp:
    """
    Multilayer perceptron with ReLU hidden layers.

    forward() caches what backward() needs, so calls must alternate
    forward -> backward for gradients to be meaningful.
    """

    def __init__(self, widths: Sequence[int], output_activation: str = "identity", rng=None):
        if len(widths) < 2:
            raise ValueError("an Mlp needs at least an input and an output width")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation: {output_activation}")
        self.widths = [int(w) for w in widths]
        self.output_activation = output_activation
        rng = make_rng(rng)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        self._cache = None

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def parameters(self) -> List[np.ndarray]:
        """Parameters in layer order: W0, b0, W1, b1, ..."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[-1] != self.input_dim:
            raise ValueError(f"input width {h.shape[-1]} does not match network input {self.input_dim}")
        inputs, pre_activations = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pre_activations.append(z)
            if i < last:
                h = np.maximum(z, 0.0)
            elif self.output_activation == "sigmoid":
                h = expit(z)
            else:
                h = z
        self._cache = (inputs, pre_activations, h, single)
        return h[0] if single else h

    __call__ = forward

    def backward(self, grad_output):
        """
        Backpropagate dL/d(output) through the cached forward pass.

        Returns:
            (parameter gradients in parameters() order, dL/d(input))
        """
        if self._cache is None:
            raise RuntimeError("backward() called before forward()")
        inputs, pre_activations, output, single = self._cache
        grad = np.asarray(grad_output, dtype=float)
        if single:
            grad = grad[None, :]
        if grad.shape != output.shape:
            raise ValueError(f"output gradient shape {grad.shape} does not match output {output.shape}")

        if self.output_activation == "sigmoid":
            grad = grad * output * (1.0 - output)
        grads = [None] * (2 * len(self.weights))
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                grad = grad * (pre_activations[i] > 0)
            grads[2 * i] = inputs[i].T @ grad
            grads[2 * i + 1] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        return grads, (grad[0] if single else grad)

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.widths = list(self.widths)
        clone.output_activation = self.output_activation
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone._cache = None
        return clone

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "output_activation": self.output_activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        net = cls.__new__(cls)
        net.widths = [int(w) for w in data["widths"]]
        net.output_activation = data["output_activation"]
        net.weights = [np.asarray(w, dtype=float).reshape(a, b)
                       for w, a, b in zip(data["weights"], net.widths[:-1], net.widths[1:])]
        net.biases = [np.asarray(b, dtype=float).reshape(-1) for b in data["biases"]]
        net._cache = None
        return net


class AdamOptimizer:
    """Adam with the usual defaults; moments are shaped like the parameters."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        """Update params in place."""
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
            "m": [m.tolist() for m in self.m],
            "v": [v.tolist() for v in self.v],
        }

    @classmethod
    def from_dict(cls, data: dict, params: Sequence[np.ndarray]) -> "AdamOptimizer":
        opt = cls(params, data["lr"], data["beta1"], data["beta2"], data["eps"])
        opt.t = int(data["t"])
        opt.m = [np.asarray(m, dtype=float).reshape(p.shape) for m, p in zip(data["m"], params)]
        opt.v = [np.asarray(v, dtype=float).reshape(p.shape) for v, p in zip(data["v"], params)]
        return opt


def backward_and_step(net: Mlp, grad_output, optimizer: AdamOptimizer) -> List[float]:
    """
    Backpropagate and apply one optimizer step.

    Returns:
        Gradient norm per layer (weights and bias together)

    Raises:
        NonFiniteGradientError: before any parameter is touched
    """
    grads, _ = net.backward(grad_output)
    norms = [0.0] * len(net.weights)
    for layer in reversed(range(len(net.weights))):
        dw, db = grads[2 * layer], grads[2 * layer + 1]
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NonFiniteGradientError(layer)
        norms[layer] = float(np.sqrt(np.sum(dw * dw) + np.sum(db * db)))
    optimizer.step(net.parameters(), grads)
    return norms


@dataclass
class GaussianPrediction:
    mean: np.ndarray
    var: np.ndarray
    pre_var: Optional[np.ndarray] = None


def gaussian_forward(net: Mlp, s, a) -> GaussianPrediction:
    """
    Diagonal Gaussian over the next state: the first half of the output is the
    mean, the second half goes through softplus plus VARIANCE_FLOOR.
    """
    x = np.concatenate([np.asarray(s, dtype=float), np.asarray(a, dtype=float)], axis=-1)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"state+action width {x.shape[-1]} does not match network input {net.input_dim}")
    if net.output_dim % 2:
        raise ValueError("a Gaussian head needs an even output width")
    out = net.forward(x)
    half = net.output_dim // 2
    mean, pre_var = out[..., :half], out[..., half:]
    var = np.logaddexp(0.0, pre_var) + VARIANCE_FLOOR
    return GaussianPrediction(mean=mean, var=var, pre_var=pre_var)


def gaussian_output_grad(pred: GaussianPrediction, grad_mean, grad_var) -> np.ndarray:
    """Chain dL/dmean and dL/dvar back to the raw network output."""
    return np.concatenate([grad_mean, grad_var * expit(pred.pre_var)], axis=-1)


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """theta_target <- tau theta_online + (1 - tau) theta_target, in place."""
    if target.widths != online.widths or target.output_activation != online.output_activation:
        raise ValueError("soft_update needs identical architectures")
    for t, o in zip(target.parameters(), online.parameters()):
        t *= 1.0 - tau
        t += tau * o
    return target


def write_checkpoint(path: str, payload: dict):
    """Deterministic JSON dump: sorted keys, shortest round-trip floats."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    document = {"format_version": CHECKPOINT_FORMAT_VERSION, **payload}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, sort_keys=True)
    logger.debug(f"checkpoint written: {path}")


def read_checkpoint(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        document = json.load(f)
    version = document.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {version}")
    return document
