"""Dense MLPs, their training-time optimizers, and the LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, ShapeError, Tape, Tensor, relu

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError("bias shape must match weight fan-out")


@dataclass
class Mlp:
    """A stack of dense layers; an empty stack is the identity map."""

    layers: list[DenseLayer] = field(default_factory=list)

    @property
    def in_dim(self) -> int | None:
        return self.layers[0].weight.shape[0] if self.layers else None

    @property
    def out_dim(self) -> int | None:
        return self.layers[-1].weight.shape[1] if self.layers else None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def named_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.w"] = layer.weight
            out[f"{prefix}.{i}.b"] = layer.bias
        return out

    def copy(self) -> "Mlp":
        return Mlp([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation)
                    for l in self.layers])


def init_mlp(dims: list[int], rng: np.random.Generator,
             hidden_activation: str = "relu",
             out_activation: str = "identity") -> Mlp:
    """Uniform +-1/sqrt(fan_in) init for every weight and bias."""
    if len(dims) < 2:
        raise ValueError("need at least an input and an output dim")
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        act = out_activation if i == len(dims) - 2 else hidden_activation
        layers.append(DenseLayer(w, b, act))
    return Mlp(layers)


def mlp_apply(mlp: Mlp, x: Tensor | np.ndarray, tape: Tape | None) -> Tensor:
    """Run the MLP on a (n, in_dim) batch; records on ``tape`` when given."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    if mlp.layers and h.shape[-1] != mlp.in_dim:
        raise ShapeError(
            f"input dim {h.shape[-1]} does not match first layer {mlp.in_dim}")
    for layer in mlp.layers:
        w = tape.watch(layer.weight) if tape is not None else Tensor(layer.weight)
        b = tape.watch(layer.bias) if tape is not None else Tensor(layer.bias)
        h = h @ w + b
        if layer.activation == "relu":
            h = relu(h)
    return h


def forward(mlp: Mlp, x: np.ndarray) -> tuple[Tensor, Tape]:
    """Forward pass that returns the output plus a tape ready for one sweep."""
    tape = Tape()
    out = mlp_apply(mlp, np.atleast_2d(np.asarray(x, dtype=np.float64)), tape)
    return out, tape


def backward(tape: Tape, output: Tensor, output_grad) -> list[np.ndarray]:
    """Sweep the tape once; gradients come back in parameter registration order."""
    tape.run_backward(output, output_grad)
    return [p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in tape.params]


def cosine_lr(epoch: int, total_epochs: int, lr0: float,
              floor_ratio: float = 1e-3, hold_epochs: int = 50) -> float:
    """Cosine decay from lr0 to lr0*floor_ratio, then a constant tail.

    The decay spans ``total_epochs - hold_epochs``; the final ``hold_epochs``
    stay at the floor.
    """
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if not 0.0 < floor_ratio <= 1.0:
        raise ValueError("floor_ratio must be in (0, 1]")
    if not 0 <= hold_epochs <= total_epochs:
        raise ValueError("hold_epochs must be in [0, total_epochs]")
    span = total_epochs - hold_epochs
    if epoch >= span:
        return lr0 * floor_ratio
    frac = 0.5 * (1.0 + math.cos(math.pi * epoch / span))
    return lr0 * (floor_ratio + (1.0 - floor_ratio) * frac)


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")


class NesterovSgd:
    """SGD with Nesterov momentum; decoupled-from-nothing classic form.

    v <- mu*v + g, update = g + mu*v (weight decay added to g first).
    """

    kind = "sgd-nesterov"

    def __init__(self, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.step_count = 0
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        _check_finite(grads)
        mu = self.momentum
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
                self._velocity[name] = v
            v *= mu
            v += g
            if mu:
                p -= self.lr * (g + mu * v)
            else:
                p -= self.lr * g
        self.step_count += 1


class Adam:
    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        _check_finite(grads)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** t
        bias2 = 1.0 - b2 ** t
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def optimizer_step(state: NesterovSgd | Adam, params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray]) -> None:
    """Apply one in-place update with either optimizer kind."""
    state.step(params, grads)
