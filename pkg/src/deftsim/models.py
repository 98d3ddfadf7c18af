"""Desk-scale training workloads with exact, cheap gradients.

Two model kinds drive the simulator:

* ``block_quadratic`` -- a separable quadratic bowl whose per-block
  curvature scales give full control over per-layer gradient norms.
  The stochastic minibatch is modelled as an additive linear noise term,
  so the sampled loss is ``sum_b 0.5 * scale_b * |x_b - target_b|^2 +
  eps . x`` and its gradient is exact.
* ``mlp`` -- a small tanh classifier on synthetic Gaussian blob data
  with hand-written backprop (checked against finite differences in the
  test suite).

Both draw all randomness from explicitly passed generators so runs are
reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .partition import ModelLayout


class NumericFault(RuntimeError):
    """A training value went non-finite."""


@dataclass(frozen=True)
class BlockQuadraticSpec:
    kind: ClassVar[str] = "block_quadratic"
    block_sizes: tuple[int, ...]
    scales: tuple[float, ...]
    noise_sigma: float

    def __post_init__(self) -> None:
        if len(self.block_sizes) != len(self.scales):
            raise ValueError("block_sizes and scales must have equal length")
        if any(s <= 0 for s in self.scales):
            raise ValueError("curvature scales must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class MlpSpec:
    kind: ClassVar[str] = "mlp"
    input_dim: int
    hidden: tuple[int, ...]
    n_classes: int
    n_samples: int
    class_offset: float


class BlockQuadratic:
    """Separable quadratic with heterogeneous per-block curvature."""

    def __init__(self, spec: BlockQuadraticSpec, rng: np.random.Generator) -> None:
        self.spec = spec
        self.layout = ModelLayout(tensor_sizes=spec.block_sizes)
        n = self.layout.n_total
        self.target = rng.standard_normal(n)
        self._scale_vec = np.repeat(np.asarray(spec.scales, dtype=np.float64), spec.block_sizes)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.layout.n_total)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        sigma = self.spec.noise_sigma / np.sqrt(batch_size)
        return rng.standard_normal(self.layout.n_total) * sigma

    def forward(self, x: np.ndarray, batch: np.ndarray) -> float:
        diff = x - self.target
        return float(0.5 * np.dot(self._scale_vec * diff, diff) + np.dot(batch, x))

    def gradient(self, x: np.ndarray, batch: np.ndarray) -> np.ndarray:
        return self._scale_vec * (x - self.target) + batch

    def full_loss(self, x: np.ndarray) -> float:
        """Noise-free objective value."""
        diff = x - self.target
        return float(0.5 * np.dot(self._scale_vec * diff, diff))

    def full_accuracy(self, x: np.ndarray) -> float | None:
        return None


class Mlp:
    """Tanh MLP classifier on fixed synthetic blob data."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator) -> None:
        self.spec = spec
        dims = [spec.input_dim, *spec.hidden, spec.n_classes]
        sizes: list[int] = []
        self._shapes: list[tuple[int, int]] = []
        for d_in, d_out in zip(dims, dims[1:]):
            self._shapes.append((d_in, d_out))
            sizes.extend([d_in * d_out, d_out])
        self.layout = ModelLayout(tensor_sizes=tuple(sizes))
        self._dims = dims

        n = spec.n_samples
        direction = rng.standard_normal(spec.input_dim)
        direction /= np.linalg.norm(direction)
        self.labels = np.arange(n) % spec.n_classes
        signs = np.where(self.labels == 0, -1.0, 1.0)
        self.data = rng.standard_normal((n, spec.input_dim)) + spec.class_offset * signs[:, None] * direction
        self._onehot = np.eye(spec.n_classes)[self.labels]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        chunks = []
        for d_in, d_out in self._shapes:
            chunks.append(rng.standard_normal(d_in * d_out) / np.sqrt(d_in))
            chunks.append(np.zeros(d_out))
        return np.concatenate(chunks)

    def _unflatten(self, x: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        params = []
        pos = 0
        for d_in, d_out in self._shapes:
            w = x[pos:pos + d_in * d_out].reshape(d_in, d_out)
            pos += d_in * d_out
            b = x[pos:pos + d_out]
            pos += d_out
            params.append((w, b))
        return params

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return rng.integers(0, self.spec.n_samples, size=batch_size)

    def _forward_pass(self, x: np.ndarray, batch_idx: np.ndarray):
        params = self._unflatten(x)
        inputs = self.data[batch_idx]
        activations = [inputs]
        h = inputs
        for w, b in params[:-1]:
            h = np.tanh(h @ w + b)
            activations.append(h)
        w_out, b_out = params[-1]
        logits = h @ w_out + b_out
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        targets = self._onehot[batch_idx]
        loss = float(-np.mean(np.sum(targets * (shifted - np.log(exp.sum(axis=1, keepdims=True))), axis=1)))
        return params, activations, probs, targets, loss

    def forward(self, x: np.ndarray, batch: np.ndarray) -> float:
        return self._forward_pass(x, batch)[-1]

    def gradient(self, x: np.ndarray, batch: np.ndarray) -> np.ndarray:
        params, activations, probs, targets, _ = self._forward_pass(x, batch)
        b = batch.size
        delta = (probs - targets) / b
        grads: list[np.ndarray] = []
        for layer in range(len(params) - 1, -1, -1):
            w, _ = params[layer]
            h_in = activations[layer]
            grads.append(np.sum(delta, axis=0))          # bias
            grads.append((h_in.T @ delta).ravel())       # weight
            if layer > 0:
                h_prev = activations[layer]
                delta = (delta @ w.T) * (1.0 - h_prev * h_prev)
        grads.reverse()
        return np.concatenate(grads)

    def full_loss(self, x: np.ndarray) -> float:
        return self.forward(x, np.arange(self.spec.n_samples))

    def full_accuracy(self, x: np.ndarray) -> float:
        params = self._unflatten(x)
        h = self.data
        for w, b in params[:-1]:
            h = np.tanh(h @ w + b)
        w_out, b_out = params[-1]
        logits = h @ w_out + b_out
        return float(np.mean(np.argmax(logits, axis=1) == self.labels))


Workload = BlockQuadratic | Mlp


def build_workload(spec: BlockQuadraticSpec | MlpSpec, rng: np.random.Generator) -> Workload:
    if isinstance(spec, BlockQuadraticSpec):
        return BlockQuadratic(spec, rng)
    return Mlp(spec, rng)


def compute_gradient(model: Workload, x: np.ndarray, batch, check: bool = True) -> np.ndarray:
    """Stochastic gradient for one worker's minibatch."""
    grad = model.gradient(x, batch)
    if check and not np.isfinite(grad).all():
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericFault(f"non-finite gradient at coordinate {bad}")
    return grad
