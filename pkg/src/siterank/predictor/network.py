"""Feedforward networks with hand-written backpropagation.

Everything here is plain numpy: affine layers, a small activation set,
multi-head outputs with per-head losses, minibatch gradient descent with
learning-rate decay and early stopping, and a centered finite-difference
gradient checker that guards the backward pass.

Loss convention: each head contributes weight * mean over the batch of the
summed per-element loss, so a multi-output head is one vector regression
term, not many independently normalized scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "tanh", "sigmoid", "linear")
HEAD_ACTIVATIONS = ("linear", "relu", "tanh", "sigmoid", "softmax")
LOSSES = ("se", "bce")

_BCE_CLIP = 1e-12


class NetworkError(ValueError):
    """Raised for inconsistent architecture or target shapes."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if name == "softmax":
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    raise NetworkError(f"unknown activation {name!r}")


def _act_backward(name: str, dp: np.ndarray, z: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Chain dL/d(output) back through the activation to dL/d(preactivation)."""
    if name == "linear":
        return dp
    if name == "relu":
        return dp * (z > 0)
    if name == "tanh":
        return dp * (1.0 - p**2)
    if name == "sigmoid":
        return dp * p * (1.0 - p)
    if name == "softmax":
        return p * (dp - (dp * p).sum(axis=1, keepdims=True))
    raise NetworkError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class Head:
    """One slice of the output layer with its own activation and loss."""

    name: str
    size: int
    activation: str = "linear"
    loss: str = "se"
    weight: float = 1.0

    def __post_init__(self):
        if self.activation not in HEAD_ACTIVATIONS:
            raise NetworkError(f"head {self.name!r}: unsupported activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise NetworkError(f"head {self.name!r}: unsupported loss {self.loss!r}")
        if self.loss == "bce" and self.activation != "sigmoid":
            raise NetworkError(f"head {self.name!r}: binary cross-entropy requires a sigmoid activation")
        if self.size < 1:
            raise NetworkError(f"head {self.name!r}: size must be >= 1")


@dataclass
class FeedForwardNet:
    """Dense stack with a shared hidden activation and named output heads."""

    dims: list[int]
    heads: list[Head]
    hidden_activation: str = "relu"
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    seed: int = 0

    @classmethod
    def create(
        cls,
        in_dim: int,
        hidden: Iterable[int],
        heads: Iterable[Head],
        hidden_activation: str = "relu",
        seed: int = 0,
    ) -> "FeedForwardNet":
        heads = list(heads)
        dims = [in_dim, *hidden, sum(h.size for h in heads)]
        if hidden_activation not in HIDDEN_ACTIVATIONS:
            raise NetworkError(f"unsupported hidden activation {hidden_activation!r}")
        net = cls(dims=dims, heads=heads, hidden_activation=hidden_activation, seed=seed)
        net.init_params(seed)
        return net

    def init_params(self, seed: int) -> None:
        """Variance-scaled normal init; biases start at zero."""
        rng = np.random.default_rng(seed)
        gain = 2.0 if self.hidden_activation == "relu" else 1.0
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            scale = np.sqrt(gain / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.seed = seed

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def head_slices(self) -> dict[str, slice]:
        out: dict[str, slice] = {}
        start = 0
        for h in self.heads:
            out[h.name] = slice(start, start + h.size)
            start += h.size
        return out

    def get_params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def set_params(self, params: list[np.ndarray]) -> None:
        k = len(self.weights)
        self.weights = [p.copy() for p in params[:k]]
        self.biases = [p.copy() for p in params[k:]]

    def _forward_cache(self, X: np.ndarray):
        A = np.asarray(X, dtype=np.float64)
        if A.ndim == 1:
            A = A[None, :]
        zs: list[np.ndarray] = []
        activations = [A]
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            Z = A @ W + b
            if not np.isfinite(Z).all():
                raise NetworkError(f"non-finite activation at layer {layer}")
            zs.append(Z)
            if layer < self.n_layers - 1:
                A = _act(self.hidden_activation, Z)
            else:
                A = self._apply_head_activations(Z)
            activations.append(A)
        return activations, zs

    def _apply_head_activations(self, Z: np.ndarray) -> np.ndarray:
        out = np.empty_like(Z)
        for h, sl in zip(self.heads, self.head_slices().values()):
            out[:, sl] = _act(h.activation, Z[:, sl])
        return out

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Deterministic batch evaluation; heads concatenated in declared order."""
        activations, _ = self._forward_cache(X)
        out = activations[-1]
        return out[0] if np.asarray(X).ndim == 1 else out

    def forward_heads(self, X: np.ndarray) -> dict[str, np.ndarray]:
        out = self.forward(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return {name: out[:, sl] for name, sl in self.head_slices().items()}

    def head_losses(self, Y: np.ndarray, targets: dict[str, np.ndarray]) -> tuple[float, dict[str, float]]:
        """Weighted per-head losses on head outputs Y."""
        batch = Y.shape[0]
        per_head: dict[str, float] = {}
        total = 0.0
        for h, sl in zip(self.heads, self.head_slices().values()):
            p = Y[:, sl]
            t = np.atleast_2d(np.asarray(targets[h.name], dtype=np.float64))
            if t.shape != p.shape:
                raise NetworkError(f"head {h.name!r}: target shape {t.shape} does not match output {p.shape}")
            if h.loss == "se":
                per_head[h.name] = h.weight * float(np.sum((p - t) ** 2)) / batch
            else:  # bce, sigmoid head
                pc = np.clip(p, _BCE_CLIP, 1.0 - _BCE_CLIP)
                per_head[h.name] = h.weight * float(np.sum(-t * np.log(pc) - (1 - t) * np.log(1 - pc))) / batch
            total += per_head[h.name]
        return total, per_head

    def _output_delta(self, Y: np.ndarray, Z_last: np.ndarray, targets: dict[str, np.ndarray], dY_extra=None):
        """dL/dZ of the output layer, fusing bce+sigmoid for numerical exactness."""
        batch = Y.shape[0]
        dZ = np.zeros_like(Y)
        for h, sl in zip(self.heads, self.head_slices().values()):
            p = Y[:, sl]
            if h.loss == "bce":
                t = np.atleast_2d(np.asarray(targets[h.name], dtype=np.float64))
                dZ[:, sl] = h.weight * (p - t) / batch
                if dY_extra is not None:
                    dZ[:, sl] += _act_backward(h.activation, dY_extra[:, sl], Z_last[:, sl], p)
            else:
                t = np.atleast_2d(np.asarray(targets[h.name], dtype=np.float64))
                dp = h.weight * 2.0 * (p - t) / batch
                if dY_extra is not None:
                    dp = dp + dY_extra[:, sl]
                dZ[:, sl] = _act_backward(h.activation, dp, Z_last[:, sl], p)
        return dZ

    def loss_and_grads(self, X: np.ndarray, targets: dict[str, np.ndarray], dY_extra=None):
        """Total loss, per-head losses, parameter gradients, and dL/dX.

        ``dY_extra`` lets a downstream consumer of this net's outputs add
        its own gradient, which is how the two-stage model couples.
        """
        activations, zs = self._forward_cache(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        Y = activations[-1]
        total, per_head = self.head_losses(Y, targets)
        dZ = self._output_delta(Y, zs[-1], targets, dY_extra)

        grads_W: list[np.ndarray] = [np.empty(0)] * self.n_layers
        grads_b: list[np.ndarray] = [np.empty(0)] * self.n_layers
        delta = dZ
        for layer in range(self.n_layers - 1, -1, -1):
            grads_W[layer] = activations[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
            if layer > 0:
                dA = delta @ self.weights[layer].T
                delta = _act_backward(self.hidden_activation, dA, zs[layer - 1], activations[layer])
        dX = delta @ self.weights[0].T
        return total, per_head, [*grads_W, *grads_b], dX


@dataclass
class TwoStageNet:
    """Objectives-then-score network trained jointly.

    Stage 1 maps location features to objective outputs; stage 2 consumes
    the location features concatenated with stage 1's outputs. The score
    loss backpropagates through the concatenation into stage 1, so both
    stages optimize together.
    """

    stage1: FeedForwardNet
    stage2: FeedForwardNet

    def get_params(self) -> list[np.ndarray]:
        return [*self.stage1.get_params(), *self.stage2.get_params()]

    def set_params(self, params: list[np.ndarray]) -> None:
        k = len(self.stage1.get_params())
        self.stage1.set_params(params[:k])
        self.stage2.set_params(params[k:])

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X2 = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y1 = self.stage1.forward(X2)
        y2 = self.stage2.forward(np.concatenate([X2, y1], axis=1))
        if np.asarray(X).ndim == 1:
            return y1[0], y2[0]
        return y1, y2

    def loss_and_grads(self, X: np.ndarray, targets: dict[str, np.ndarray]):
        X2 = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y1 = self.stage1.forward(X2)
        stage2_in = np.concatenate([X2, y1], axis=1)

        t2 = {h.name: targets[h.name] for h in self.stage2.heads}
        total2, per2, grads2, dIn2 = self.stage2.loss_and_grads(stage2_in, t2)
        # Gradient of the stage-2 loss with respect to stage-1 outputs.
        dY1 = dIn2[:, X2.shape[1] :]

        t1 = {h.name: targets[h.name] for h in self.stage1.heads}
        total1, per1, grads1, dX = self.stage1.loss_and_grads(X2, t1, dY_extra=dY1)

        per = {**per1, **per2}
        return total1 + total2, per, [*grads1, *grads2], dX


@dataclass
class TrainConfig:
    """Knobs for minibatch gradient descent."""

    learning_rate: float = 1e-3
    lr_decay: float = 1.0  # per-epoch multiplier
    batch_size: int = 32
    epochs: int = 200
    patience: int | None = 25  # early-stop after this many non-improving epochs; None disables
    seed: int = 0

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


@dataclass
class TrainingHistory:
    """Per-epoch loss curves plus the early-stopping outcome."""

    epochs: list[dict]
    best_epoch: int
    best_loss: float
    stopped_early: bool

    def curve(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]


def train_network(model, X, targets: dict[str, np.ndarray], config: TrainConfig, X_val=None, targets_val=None) -> TrainingHistory:
    """Minibatch SGD over any model exposing get/set_params and loss_and_grads.

    Early stopping watches the validation loss when a validation set is
    given (training loss otherwise) and restores the best parameters.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate

    best_loss = np.inf
    best_params = [p.copy() for p in model.get_params()]
    best_epoch = 0
    bad_epochs = 0
    stopped = False
    records: list[dict] = []

    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        head_totals: dict[str, float] = {}
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            bt = {k: np.atleast_2d(v)[idx] for k, v in targets.items()}
            loss, per_head, grads, _ = model.loss_and_grads(X[idx], bt)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            params = model.get_params()
            for p, g in zip(params, grads):
                p -= lr * g
            epoch_loss += loss
            for k, v in per_head.items():
                head_totals[k] = head_totals.get(k, 0.0) + v
            n_batches += 1

        record = {"epoch": epoch, "lr": lr, "train_loss": epoch_loss / n_batches}
        for k, v in head_totals.items():
            record[f"train_{k}"] = v / n_batches

        if X_val is not None:
            val_loss = evaluate_loss(model, X_val, targets_val)
            record["val_loss"] = val_loss
            watch = val_loss
        else:
            watch = record["train_loss"]
        if not np.isfinite(watch):
            raise TrainingDivergedError(epoch, watch)
        records.append(record)

        if watch < best_loss:
            best_loss = watch
            best_epoch = epoch
            best_params = [p.copy() for p in model.get_params()]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if config.patience is not None and bad_epochs >= config.patience:
                stopped = True
                break
        lr *= config.lr_decay

    model.set_params(best_params)
    return TrainingHistory(epochs=records, best_epoch=best_epoch, best_loss=float(best_loss), stopped_early=stopped)


def evaluate_loss(model, X, targets: dict[str, np.ndarray]) -> float:
    loss, _, _, _ = model.loss_and_grads(np.atleast_2d(np.asarray(X, dtype=np.float64)), {k: np.atleast_2d(v) for k, v in targets.items()})
    return float(loss)


def gradient_check(model, X, targets: dict[str, np.ndarray], epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and centered-difference gradients.

    The denominator is floored at 1e-6 so parameters with genuinely zero
    gradient compare on absolute terms instead of amplifying roundoff.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise NetworkError(f"epsilon must be within [1e-6, 1e-3], got {epsilon}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    targets = {k: np.atleast_2d(v) for k, v in targets.items()}
    _, _, grads, _ = model.loss_and_grads(X, targets)
    params = model.get_params()
    worst = 0.0
    for p, g in zip(params, grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + epsilon
            plus, _, _, _ = model.loss_and_grads(X, targets)
            flat_p[i] = orig - epsilon
            minus, _, _, _ = model.loss_and_grads(X, targets)
            flat_p[i] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            err = abs(flat_g[i] - numeric) / max(1e-6, abs(flat_g[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
