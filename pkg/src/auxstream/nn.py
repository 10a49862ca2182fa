"""Minimal dense-network primitives with hand-written forward/backward passes.

Everything runs in float64 on single instances (batch size 1): the layers
cache their last forward pass, `backward` accumulates into per-layer gradient
buffers, and `sgd_step` applies plain stochastic gradient descent with an
optional per-parameter freeze mask.  `finite_diff_check` is the independent
gradient oracle used by the test suite and the `check-grad` CLI command.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradientError

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

# Guards -log(p) against p underflowing to exactly 0.
_TINY_PROB = 1e-300


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    """Fan-scaled uniform init on +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


@dataclass
class GradientBuffer:
    """Partial derivatives mirroring a layer's weight/bias shapes."""

    weights: np.ndarray
    bias: np.ndarray

    def reset(self) -> None:
        self.weights[:] = 0.0
        self.bias[:] = 0.0


class DenseLayer:
    """A fully connected layer: out = activation(weights @ x + bias).

    `forward` accepts an optional per-node keep vector; entries of 0 silence a
    node's output exactly, and `backward` then routes no gradient through it.
    The keep vector may carry a rescale factor instead of 1 for kept nodes.
    """

    def __init__(self, in_dim: int, out_dim: int, activation: str = RELU, *,
                 rng: np.random.Generator, name: str = "dense"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if in_dim < 1 or out_dim < 1:
            raise ValueError("layer dimensions must be positive")
        self.weights = glorot_uniform(rng, out_dim, in_dim)
        self.bias = np.zeros(out_dim)
        self.activation = activation
        self.name = name
        self.grads = GradientBuffer(np.zeros_like(self.weights), np.zeros_like(self.bias))
        self._x: np.ndarray | None = None
        self._pre: np.ndarray | None = None
        self._keep: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def forward(self, x: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.in_dim,):
            raise ValueError(
                f"layer {self.name!r} expected input of length {self.in_dim}, got shape {x.shape}")
        self._x = x
        self._pre = self.weights @ x + self.bias
        if self.activation == RELU:
            out = np.maximum(self._pre, 0.0)
        else:
            out = self._pre.copy()
        if keep is not None:
            out *= keep
        self._keep = keep
        return out

    def forward_from_pre(self, x: np.ndarray, pre: np.ndarray,
                         keep: np.ndarray | None = None) -> np.ndarray:
        """Adopt an externally computed pre-activation (same math as `forward`).

        The auxiliary layer computes its pre-activation in a growth-stable
        order; this applies the activation and keep vector and caches the
        pass so `backward` works unchanged.
        """
        x = np.asarray(x, dtype=float)
        if x.shape != (self.in_dim,):
            raise ValueError(
                f"layer {self.name!r} expected input of length {self.in_dim}, got shape {x.shape}")
        self._x = x
        self._pre = np.asarray(pre, dtype=float)
        if self.activation == RELU:
            out = np.maximum(self._pre, 0.0)
        else:
            out = self._pre.copy()
        if keep is not None:
            out *= keep
        self._keep = keep
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate weight/bias gradients, return gradient w.r.t. the input."""
        if self._x is None or self._pre is None:
            raise RuntimeError(f"layer {self.name!r}: backward called before forward")
        g = grad_out * self._keep if self._keep is not None else np.asarray(grad_out, dtype=float)
        if self.activation == RELU:
            g = g * (self._pre > 0.0)
        self.grads.weights += np.outer(g, self._x)
        self.grads.bias += g
        return self.weights.T @ g

    def zero_grads(self) -> None:
        self.grads.reset()

    def apply_sgd(self, learning_rate: float,
                  freeze_weights: np.ndarray | None = None,
                  freeze_bias: np.ndarray | None = None) -> None:
        sgd_step(self.weights, self.grads.weights, learning_rate,
                 freeze_mask=freeze_weights, name=f"{self.name}.weights")
        sgd_step(self.bias, self.grads.bias, learning_rate,
                 freeze_mask=freeze_bias, name=f"{self.name}.bias")

    # Structural growth -- used only by the auxiliary-layer machinery when a
    # previously unseen feature arrives mid-stream.

    def insert_input(self, index: int, column: np.ndarray) -> None:
        """Add one input slot at `index`; existing parameter values are untouched."""
        column = np.asarray(column, dtype=float)
        if column.shape != (self.out_dim,):
            raise ValueError("new input column must have one entry per output node")
        self.weights = np.insert(self.weights, index, column, axis=1)
        self.grads.weights = np.zeros_like(self.weights)
        self._x = self._pre = self._keep = None

    def append_output(self, row: np.ndarray, bias_value: float = 0.0) -> None:
        """Add one output node; existing parameter values are untouched."""
        row = np.asarray(row, dtype=float)
        if row.shape != (self.in_dim,):
            raise ValueError("new node row must have one entry per input")
        self.weights = np.vstack([self.weights, row])
        self.bias = np.append(self.bias, float(bias_value))
        self.grads.weights = np.zeros_like(self.weights)
        self.grads.bias = np.zeros_like(self.bias)
        self._x = self._pre = self._keep = None


class ClassifierHead(DenseLayer):
    """Linear class-score layer (identity activation, one row per class)."""

    def __init__(self, in_dim: int, num_classes: int, *, rng: np.random.Generator,
                 name: str = "head"):
        super().__init__(in_dim, num_classes, activation=IDENTITY, rng=rng, name=name)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax (max-subtraction); sums to 1 with components in [0, 1]."""
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against an integer label.

    Returns (loss, gradient w.r.t. logits), where the gradient is
    softmax(logits) minus the one-hot label vector.
    """
    logits = np.asarray(logits, dtype=float)
    if logits.size == 0:
        raise ValueError("softmax_xent: empty logits")
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    probs = softmax(logits)
    loss = -float(np.log(max(probs[label], _TINY_PROB)))
    grad = probs.copy()
    grad[label] -= 1.0
    return loss, grad


def sgd_step(params: np.ndarray, grads: np.ndarray, learning_rate: float,
             freeze_mask: np.ndarray | None = None, *, name: str = "params") -> np.ndarray:
    """In-place p <- p - lr * g; entries where freeze_mask is True stay bit-identical."""
    if params.shape != grads.shape:
        raise ValueError(f"{name}: parameter shape {params.shape} != gradient shape {grads.shape}")
    if not np.isfinite(grads).all():
        raise NonFiniteGradientError(f"non-finite gradient in block {name!r}")
    if freeze_mask is None:
        params -= learning_rate * grads
    else:
        params -= learning_rate * np.where(freeze_mask, 0.0, grads)
    return params


@dataclass
class GradCheckBlock:
    """One parameter block to verify: analytic gradients plus an optional freeze mask."""

    name: str
    params: np.ndarray
    analytic: np.ndarray
    frozen: np.ndarray | None = None


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: str
    tolerance: float
    passed: bool
    per_block: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    def __str__(self) -> str:  # pragma: no cover - display helper
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: max relative error {self.max_rel_err:.3e} at {self.worst} "
                f"(tolerance {self.tolerance:.1e}, {self.n_checked} parameters)")


def finite_diff_check(loss_fn, blocks: list[GradCheckBlock], tolerance: float = 1e-4,
                      step: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    `loss_fn` must recompute the current step's loss deterministically from the
    (possibly perturbed) parameters -- any dropout decision has to be held
    fixed by the caller.  The error metric is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|), so rounding noise on near-zero gradients
    does not register as a failure.  Frozen entries are checked too: both
    sides must come out exactly zero there.
    """
    max_rel = 0.0
    worst = "(none)"
    per_block: dict[str, float] = {}
    n_checked = 0
    for block in blocks:
        flat_p = block.params.reshape(-1)
        flat_a = block.analytic.reshape(-1)
        block_max = 0.0
        for idx in range(flat_p.size):
            orig = flat_p[idx]
            flat_p[idx] = orig + step
            loss_plus = loss_fn()
            flat_p[idx] = orig - step
            loss_minus = loss_fn()
            flat_p[idx] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            analytic = flat_a[idx]
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            n_checked += 1
            if rel > block_max:
                block_max = rel
            if rel > max_rel:
                max_rel = rel
                worst = f"{block.name}[{idx}]"
        per_block[block.name] = block_max
    return GradCheckReport(max_rel_err=max_rel, worst=worst, tolerance=tolerance,
                           passed=max_rel <= tolerance, per_block=per_block,
                           n_checked=n_checked)
