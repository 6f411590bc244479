"""Per-sample delta-magnitude estimator.

A small MLP maps concat(x, i_L, a_L, out) to log rho; the exponential head
keeps the estimate strictly positive. Training minimizes the log-relative
squared error in decibels, clamped below for exact predictions. The
global-mean magnitude (the no-scaling ablation value) is computed here too.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .mlp import MlpModel, MlpSpec, init_model, mlp_backward, mlp_forward
from .optim import AdamState, adam_step
from .overfit import ConditioningTuple, RecordStore
from .rng import RngStream

LOSS_FLOOR_DB = -120.0
_DB = 10.0 / np.log(10.0)


class ScaleModel:
    """MLP over standardized conditioning features with an exp head."""

    def __init__(self, mlp: MlpModel, feat_mean: np.ndarray, feat_std: np.ndarray,
                 rho_bar: float = 1.0, base_checksum: str = ""):
        self.mlp = mlp
        self.feat_mean = feat_mean
        self.feat_std = feat_std
        self.rho_bar = float(rho_bar)
        self.base_checksum = base_checksum

    @property
    def in_dim(self) -> int:
        return self.mlp.spec.in_dim

    def log_rho(self, feats: np.ndarray) -> np.ndarray:
        z = (feats - self.feat_mean) / self.feat_std
        return mlp_forward(self.mlp, z).output[..., 0]

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return np.exp(self.log_rho(feats))


def _features(x, cond: ConditioningTuple) -> np.ndarray:
    parts = [np.asarray(x, dtype=np.float64), cond.i_l, cond.a_l, cond.out]
    return np.concatenate(parts, axis=-1)


def scale_forward(model: ScaleModel, x, cond: ConditioningTuple):
    """Strictly positive magnitude estimate; batched when inputs are 2-D."""
    feats = _features(x, cond)
    rho = np.exp(model.log_rho(feats))
    if not np.all(np.isfinite(rho)):
        raise FloatingPointError("non-finite scale prediction")
    return float(rho) if feats.ndim == 1 else rho


def scale_loss(rho_hat: float, rho_s: float) -> float:
    """10*log10(|rho_hat - rho_s|^2 / rho_s^2), clamped at -120 dB."""
    if rho_s <= 0:
        raise ValueError("rho_s must be positive")
    ratio = ((rho_hat - rho_s) / rho_s) ** 2
    if ratio <= 1e-12:
        return LOSS_FLOOR_DB
    return float(10.0 * np.log10(ratio))


def _loss_and_grad_batch(rho_hat: np.ndarray, rho_s: np.ndarray,
                         grad_clip: float = 1e3):
    """Mean dB loss and d(loss)/d(log rho_hat) per row.

    The gradient of the dB objective diverges as predictions approach the
    target; a clip keeps Adam's moments clean, and inside the clamp region
    the gradient is exactly zero.
    """
    diff = rho_hat - rho_s
    ratio = (diff / rho_s) ** 2
    clamped = ratio <= 1e-12
    loss = np.where(clamped, LOSS_FLOOR_DB, 10.0 * np.log10(np.maximum(ratio, 1e-300)))
    dl_dr = np.where(clamped, 0.0, 2.0 * _DB / np.where(clamped, 1.0, diff))
    dl_du = np.clip(dl_dr * rho_hat, -grad_clip, grad_clip)
    return float(loss.mean()), dl_du


def train_scale(store: RecordStore, hidden=(64, 64), epochs: int = 150,
                batch: int = 32, lr: float = 1e-3,
                rng: RngStream | None = None) -> tuple:
    """Fit the estimator on the record store.

    Returns (ScaleModel, per-epoch mean-dB curve). The model carries
    rho_bar, the training-mean magnitude used by the global-scale ablation.
    """
    if len(store) == 0:
        raise ValueError("empty record store")
    rng = rng or RngStream(0, 0)
    feats = _features(store.arrays["x"], store.conditioning(slice(None)))
    rho_s = store.arrays["rho"]
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    spec = MlpSpec((feats.shape[1],) + tuple(hidden) + (1,),
                   hidden_activation="tanh", output_head="linear-regressor")
    mlp = init_model(spec, rng.child("init"))
    model = ScaleModel(mlp, mean, std, rho_bar=float(rho_s.mean()),
                       base_checksum=store.meta.get("base_checksum", ""))
    params = mlp.param_list()
    adam = AdamState.for_params(params)
    z = (feats - mean) / std
    n = len(store)
    curve = []
    for epoch in range(epochs):
        order = rng.child("shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            trace = mlp_forward(mlp, z[idx])
            u = trace.output[:, 0]
            rho_hat = np.exp(u)
            loss, dl_du = _loss_and_grad_batch(rho_hat, rho_s[idx])
            grad_out = (dl_du / len(idx))[:, None]
            grads = mlp_backward(mlp, trace, grad_out)
            flat = []
            for dW, db in grads:
                flat.extend([dW, db])
            adam_step(adam, params, flat, lr)
            total += loss * len(idx)
        curve.append(total / n)
    return model, curve


def save_scale(directory, model: ScaleModel) -> None:
    tensors = {"feat_mean": model.feat_mean, "feat_std": model.feat_std}
    for l, (W, b) in enumerate(model.mlp.weights):
        tensors[f"layers.{l}.W"] = W
        tensors[f"layers.{l}.b"] = b
    meta = {
        "spec": model.mlp.spec.to_dict(),
        "rho_bar": model.rho_bar,
        "base_checksum": model.base_checksum,
    }
    save_checkpoint(directory, tensors, meta)


def load_scale(directory) -> ScaleModel:
    tensors, meta = load_checkpoint(directory)
    spec = MlpSpec.from_dict(meta["spec"])
    weights = [(tensors[f"layers.{l}.W"], tensors[f"layers.{l}.b"])
               for l in range(spec.n_layers)]
    return ScaleModel(MlpModel(spec, weights), tensors["feat_mean"],
                      tensors["feat_std"], rho_bar=meta["rho_bar"],
                      base_checksum=meta.get("base_checksum", ""))
