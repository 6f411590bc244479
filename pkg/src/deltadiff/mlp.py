"""Dense MLP kernel: explicit forward/backward, losses, layer packing.

All arithmetic is float64. Gradients are hand-derived (no autodiff) and
verified against finite differences in the test suite. Forward traces keep
every pre/post activation so downstream stages can read layer inputs,
layer activations and the network output without recomputing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

_ACTIVATIONS = ("tanh", "relu")
_HEADS = ("softmax-classifier", "linear-regressor")


class DimensionError(ValueError):
    """Shape mismatch between tensors and the model specification."""


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    hidden_activation: str = "tanh"
    output_head: str = "softmax-classifier"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output extents")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer_sizes must be strictly positive, got {sizes}")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in _HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_head": self.output_head,
        }

    @staticmethod
    def from_dict(d: dict) -> "MlpSpec":
        return MlpSpec(tuple(d["layer_sizes"]), d["hidden_activation"], d["output_head"])


@dataclass
class MlpModel:
    spec: MlpSpec
    weights: list  # [(W_l, b_l)] with W_l of shape (out, in), b_l of shape (out,)

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != self.spec.n_layers:
            raise DimensionError(
                f"expected {self.spec.n_layers} weight pairs, got {len(self.weights)}"
            )
        for l, (W, b) in enumerate(self.weights):
            want = (sizes[l + 1], sizes[l])
            if W.shape != want or b.shape != (sizes[l + 1],):
                raise DimensionError(
                    f"layer {l}: W{W.shape}/b{b.shape} inconsistent with sizes {want}"
                )

    def copy(self) -> "MlpModel":
        return MlpModel(self.spec, [(W.copy(), b.copy()) for W, b in self.weights])

    def param_list(self) -> list:
        """Flat parameter view [W0, b0, W1, b1, ...] (aliases, not copies)."""
        out = []
        for W, b in self.weights:
            out.append(W)
            out.append(b)
        return out

    def layer_in_dim(self, layer: int) -> int:
        return self.spec.layer_sizes[layer]

    def layer_out_dim(self, layer: int) -> int:
        return self.spec.layer_sizes[layer + 1]


@dataclass
class ForwardTrace:
    """Per-layer record of one forward pass.

    inputs[l] is what layer l consumed, pre_acts[l] = W_l inputs[l] + b_l,
    post_acts[l] the activated value (softmax / identity for the head).
    output aliases post_acts[-1].
    """

    inputs: list = field(default_factory=list)
    pre_acts: list = field(default_factory=list)
    post_acts: list = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.post_acts[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.pre_acts[-1]


def init_model(spec: MlpSpec, rng: RngStream) -> MlpModel:
    """Glorot-normal weights, zero biases."""
    weights = []
    sizes = spec.layer_sizes
    for l in range(spec.n_layers):
        fan_in, fan_out = sizes[l], sizes[l + 1]
        std = np.sqrt(2.0 / (fan_in + fan_out))
        W = rng.gaussian((fan_out, fan_in)) * std
        b = np.zeros(fan_out)
        weights.append((W, b))
    return MlpModel(spec, weights)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_grad(pre, post, kind):
    if kind == "tanh":
        return 1.0 - post * post
    return (pre > 0.0).astype(np.float64)


def mlp_forward(model: MlpModel, x: np.ndarray) -> ForwardTrace:
    """Forward pass for a single input (d,) or a batch (B, d).

    The softmax head is applied in post_acts[-1]; pre_acts[-1] keeps the
    logits, which the fused cross-entropy gradient works on.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.spec.in_dim:
        raise DimensionError(
            f"input of length {x.shape[-1]} fed to layer 0 expecting {model.spec.in_dim}"
        )
    trace = ForwardTrace()
    act = model.spec.hidden_activation
    h = x
    last = model.spec.n_layers - 1
    for l, (W, b) in enumerate(model.weights):
        trace.inputs.append(h)
        z = h @ W.T + b
        trace.pre_acts.append(z)
        if l < last:
            h = _activate(z, act)
        elif model.spec.output_head == "softmax-classifier":
            h = softmax(z)
        else:
            h = z
        trace.post_acts.append(h)
    return trace


def mlp_backward(model: MlpModel, trace: ForwardTrace, grad_output: np.ndarray,
                 layer: int | None = None) -> list:
    """Backpropagate grad_output (w.r.t. the final pre-activation) to weights.

    For the softmax head, loss_eval already folds the softmax into its
    gradient, so grad_output is d loss / d logits for both head types.
    Returns [(dW_l, db_l)] for every layer; with layer=k only index k is
    populated and the rest are None. Batched traces sum gradients over
    the batch.
    """
    n = model.spec.n_layers
    if len(trace.pre_acts) != n:
        raise DimensionError("trace layer count does not match model")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != trace.pre_acts[-1].shape:
        raise DimensionError(
            f"grad_output shape {g.shape} does not match trace output "
            f"{trace.pre_acts[-1].shape} (stale trace?)"
        )
    act = model.spec.hidden_activation
    grads: list = [None] * n
    for l in range(n - 1, -1, -1):
        W, _ = model.weights[l]
        if trace.inputs[l].shape[-1] != W.shape[1]:
            raise DimensionError(f"stale trace at layer {l}")
        if layer is None or l == layer:
            if g.ndim == 1:
                dW = np.outer(g, trace.inputs[l])
                db = g.copy()
            else:
                dW = g.T @ trace.inputs[l]
                db = g.sum(axis=0)
            grads[l] = (dW, db)
        if l == 0 or (layer is not None and l <= layer):
            break
        g = g @ W
        g = g * _activate_grad(trace.pre_acts[l - 1], trace.post_acts[l - 1], act)
    return grads


def loss_eval(kind: str, output: np.ndarray, target) -> tuple:
    """Loss value and exact gradient w.r.t. `output`.

    kind "softmax-CE": output holds logits, target an int label (or an int
    array for a batch); gradient is softmax(output) - onehot(target).
    kind "MSE": mean squared error over components; gradient 2(o-t)/k.
    Batched inputs average the loss and scale gradients by 1/B.
    """
    output = np.asarray(output, dtype=np.float64)
    if kind == "softmax-CE":
        batched = output.ndim == 2
        t = np.asarray(target)
        C = output.shape[-1]
        if np.any(t < 0) or np.any(t >= C):
            raise ValueError(f"label {t} out of range for {C} classes")
        p = softmax(output)
        if batched:
            B = output.shape[0]
            rows = np.arange(B)
            loss = float(np.mean(-np.log(p[rows, t])))
            grad = p.copy()
            grad[rows, t] -= 1.0
            grad /= B
        else:
            loss = float(-np.log(p[int(t)]))
            grad = p.copy()
            grad[int(t)] -= 1.0
        return loss, grad
    if kind == "MSE":
        t = np.asarray(target, dtype=np.float64)
        if output.shape != t.shape:
            raise DimensionError(f"MSE shapes differ: {output.shape} vs {t.shape}")
        diff = output - t
        loss = float(np.mean(diff * diff))
        grad = 2.0 * diff / diff.size
        return loss, grad
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_vector(kind: str, outputs: np.ndarray, target) -> np.ndarray:
    """Per-row losses for a batch of outputs against one shared target."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if kind == "softmax-CE":
        t = int(target)
        shifted = outputs - np.max(outputs, axis=1, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted), axis=1))
        return logz - shifted[:, t]
    if kind == "MSE":
        t = np.asarray(target, dtype=np.float64)
        diff = outputs - t
        return np.mean(diff * diff, axis=1)
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_kind_for(spec: MlpSpec) -> str:
    return "softmax-CE" if spec.output_head == "softmax-classifier" else "MSE"


def layer_matrix(W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pack one layer as a (in+1, out) matrix: W transposed, bias as last row."""
    return np.vstack([W.T, b[None, :]])


def unpack_layer_matrix(M: np.ndarray) -> tuple:
    return M[:-1].T.copy(), M[-1].copy()


def layer_matrix_shape(model: MlpModel, layer: int) -> tuple:
    return (model.layer_in_dim(layer) + 1, model.layer_out_dim(layer))


def model_checksum(model: MlpModel) -> str:
    """sha256 over the spec and raw little-endian weight bytes."""
    h = hashlib.sha256()
    h.update(json.dumps(model.spec.to_dict(), sort_keys=True).encode())
    for W, b in model.weights:
        h.update(np.ascontiguousarray(W, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return h.hexdigest()
