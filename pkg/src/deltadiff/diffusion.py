"""Conditional diffusion over normalized layer deltas.

Ties together the noise schedule, condition encoders and the U-Net noise
predictor: forming noisy targets for training (one uniformly drawn step
per record), ancestral sampling back from pure noise at inference, and
applying a scaled sampled delta to the base model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .conditioning import ConditionEncoders, init_encoders
from .mlp import MlpModel, unpack_layer_matrix
from .optim import AdamState, adam_step
from .overfit import ConditioningTuple, RecordStore
from .rng import RngStream
from .schedule import NoiseSchedule, build_schedule
from .unet import UNet


def padded_side(rows: int, cols: int, levels: int) -> int:
    """Smallest multiple of 2^levels that covers max(rows, cols)."""
    unit = 2 ** levels
    need = max(rows, cols, 1)
    return ((need + unit - 1) // unit) * unit


def pad_square(M: np.ndarray, levels: int) -> np.ndarray:
    """Zero-pad a 2-D matrix (or batch of them) to the square side above."""
    rows, cols = M.shape[-2], M.shape[-1]
    s = padded_side(rows, cols, levels)
    pad = [(0, 0)] * (M.ndim - 2) + [(0, s - rows), (0, s - cols)]
    return np.pad(M, pad)


def crop(Mp: np.ndarray, shape: tuple) -> np.ndarray:
    rows, cols = shape
    return Mp[..., :rows, :cols]


@dataclass
class DiffusionBundle:
    """Everything needed to map a conditioning tuple to a layer delta."""

    schedule: NoiseSchedule
    encoders: ConditionEncoders
    unet: UNet
    delta_shape: tuple  # (rows, cols) of the layer delta matrix
    base_checksum: str
    adam: AdamState | None = None
    loss_curve: list = field(default_factory=list)

    @property
    def side(self) -> int:
        return self.unet.side

    def param_list(self) -> list:
        return self.unet.param_list() + self.encoders.param_list()

    def param_names(self) -> list:
        return self.unet.param_names() + self.encoders.param_names()


def build_bundle(store: RecordStore, T: int = 10, d_cond: int = 32,
                 channels: int = 32, levels: int = 2,
                 rng: RngStream | None = None) -> DiffusionBundle:
    """Fresh bundle sized for the record store's geometry."""
    rng = rng or RngStream(0, 0)
    rows, cols = store.delta_shape
    side = padded_side(rows, cols, levels)
    n_i = store.arrays["i_l"].shape[1]
    n_a = store.arrays["a_l"].shape[1]
    n_o = store.arrays["out"].shape[1]
    encoders = init_encoders(T, d_cond, n_i, n_a, n_o, rng.child("encoders"))
    unet = UNet(side, channels, levels, d_cond, rng.child("unet"))
    bundle = DiffusionBundle(
        schedule=build_schedule(T),
        encoders=encoders,
        unet=unet,
        delta_shape=(rows, cols),
        base_checksum=store.meta["base_checksum"],
    )
    bundle.adam = AdamState.for_params(bundle.param_list())
    return bundle


def denoise_eps(bundle: DiffusionBundle, omega_t: np.ndarray, e: np.ndarray) -> np.ndarray:
    """One deterministic evaluation of the noise predictor."""
    single = omega_t.ndim == 2
    if single:
        omega_t = omega_t[None, None]
        e = e[None]
    out = bundle.unet.forward(omega_t, e)
    return out[0, 0] if single else out


def _train_batch(bundle: DiffusionBundle, delta: np.ndarray, i_l, a_l, out,
                 rng: RngStream, lr: float) -> float:
    """One Adam step on a batch of records; returns the pre-step loss."""
    sched = bundle.schedule
    B = delta.shape[0]
    s = bundle.side
    t = np.asarray(rng.integers(1, sched.T + 1, B))
    eps = rng.gaussian((B, 1, s, s))
    target = pad_square(delta, bundle.unet.levels)[:, None]
    ab = sched.alpha_bar[t - 1][:, None, None, None]
    omega_t = np.sqrt(ab) * target + np.sqrt(1.0 - ab) * eps

    data_enc = bundle.encoders.data_encoding(i_l, a_l, out)
    e = bundle.encoders.encode_batch(data_enc, t)
    eps_hat = bundle.unet.forward(omega_t, e)
    diff = eps_hat - eps
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite diffusion objective")

    bundle.unet.zero_grads()
    de = bundle.unet.backward(2.0 * diff / diff.size)
    enc_grads = [np.zeros_like(p) for p in bundle.encoders.param_list()]
    bundle.encoders.backward(de, t, i_l, a_l, out, enc_grads)
    params = bundle.param_list()
    grads = bundle.unet.grad_list() + enc_grads
    adam_step(bundle.adam, params, grads, lr, names=bundle.param_names())
    return loss


def diffusion_train_step(bundle: DiffusionBundle, record: dict, rng: RngStream,
                         lr: float = 1e-3) -> float:
    """Single-record training step (the batched path with B=1)."""
    return _train_batch(
        bundle,
        record["delta_norm"][None],
        record["i_l"][None], record["a_l"][None], record["out"][None],
        rng, lr,
    )


def train_diffusion(bundle: DiffusionBundle, store: RecordStore, epochs: int,
                    batch: int, lr: float, rng: RngStream,
                    patience: int = 0, min_rel_improve: float = 1e-3) -> list:
    """Full passes over the store with per-epoch shuffling.

    With patience > 0, stops once the epoch loss has not improved by
    min_rel_improve (relative) for that many consecutive epochs.
    Returns the per-epoch mean loss curve (also kept on the bundle).
    """
    if tuple(store.delta_shape) != tuple(bundle.delta_shape):
        raise ValueError("record store geometry does not match bundle")
    arrays = store.arrays
    n = len(store)
    best = np.inf
    stale = 0
    for epoch in range(epochs):
        order = rng.child("shuffle", epoch).permutation(n)
        step_rng = rng.child("steps", epoch)
        total = 0.0
        count = 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss = _train_batch(
                bundle,
                arrays["delta_norm"][idx],
                arrays["i_l"][idx], arrays["a_l"][idx], arrays["out"][idx],
                step_rng, lr,
            )
            total += loss * len(idx)
            count += len(idx)
        epoch_loss = total / count
        bundle.loss_curve.append(epoch_loss)
        if patience > 0:
            if epoch_loss < best * (1.0 - min_rel_improve):
                best = epoch_loss
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
    return bundle.loss_curve


def sample_delta_batch(bundle: DiffusionBundle, i_l, a_l, out,
                       omega_T: np.ndarray, z_draws=None) -> np.ndarray:
    """Ancestral sampling for a batch of conditioning tuples.

    omega_T: (B, 1, s, s) initial noise. z_draws: per-step noise for
    t = T..2, each (B, 1, s, s); None means deterministic (z := 0).
    Returns cropped deltas (B, rows, cols).
    """
    sched = bundle.schedule
    data_enc = bundle.encoders.data_encoding(i_l, a_l, out)
    omega = omega_T.copy()
    B = omega.shape[0]
    for t in range(sched.T, 0, -1):
        beta, alpha, ab, bt = sched.at(t)
        e = data_enc + bundle.encoders.pe_table[t - 1]
        eps_hat = bundle.unet.forward(omega, e)
        omega = (omega - (1.0 - alpha) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
        if t > 1 and z_draws is not None:
            omega = omega + np.sqrt(bt) * z_draws[sched.T - t]
    return crop(omega[:, 0], bundle.delta_shape)


def sample_delta(bundle: DiffusionBundle, cond: ConditioningTuple, rng: RngStream,
                 deterministic_z: bool = False) -> np.ndarray:
    """Generate one delta estimate from pure noise, conditioned on I(x).

    Draws omega_T first, then one z per step t = T..2 (skipped entirely
    when deterministic_z), so batched evaluation can replay the exact
    same stream layout.
    """
    s = bundle.side
    omega_T = rng.gaussian((1, 1, s, s))
    z_draws = None
    if not deterministic_z:
        z_draws = [rng.gaussian((1, 1, s, s)) for _ in range(bundle.schedule.T - 1)]
    return sample_delta_batch(bundle, cond.i_l[None], cond.a_l[None],
                              cond.out[None], omega_T, z_draws)[0]


def apply_weights(model: MlpModel, layer: int, omega0: np.ndarray,
                  rho: float) -> MlpModel:
    """theta' = theta + rho * delta on the selected layer only."""
    rows, cols = model.layer_in_dim(layer) + 1, model.layer_out_dim(layer)
    if omega0.shape != (rows, cols):
        raise ValueError(f"delta shape {omega0.shape} != layer matrix {(rows, cols)}")
    dW, db = unpack_layer_matrix(omega0 * rho)
    out = model.copy()
    W, b = out.weights[layer]
    W += dW
    b += db
    return out


def save_bundle(directory, bundle: DiffusionBundle) -> None:
    tensors = dict(zip(bundle.param_names(), bundle.param_list()))
    tensors["loss_curve"] = np.asarray(bundle.loss_curve)
    meta = {
        "T": bundle.schedule.T,
        "d_cond": bundle.encoders.d_cond,
        "channels": bundle.unet.channels,
        "levels": bundle.unet.levels,
        "side": bundle.side,
        "delta_shape": list(bundle.delta_shape),
        "enc_dims": [bundle.encoders.Wi.shape[1], bundle.encoders.Wa.shape[1],
                     bundle.encoders.Wo.shape[1]],
        "base_checksum": bundle.base_checksum,
    }
    save_checkpoint(directory, tensors, meta)


def load_bundle(directory, expect_base_checksum: str | None = None) -> DiffusionBundle:
    tensors, meta = load_checkpoint(directory)
    if expect_base_checksum is not None and meta["base_checksum"] != expect_base_checksum:
        raise CheckpointError(
            "bundle was trained against a different base model "
            f"({meta['base_checksum'][:12]}... != {expect_base_checksum[:12]}...)")
    n_i, n_a, n_o = meta["enc_dims"]
    rng = RngStream(0, 0)
    encoders = init_encoders(meta["T"], meta["d_cond"], n_i, n_a, n_o, rng)
    unet = UNet(meta["side"], meta["channels"], meta["levels"], meta["d_cond"], rng)
    bundle = DiffusionBundle(
        schedule=build_schedule(meta["T"]),
        encoders=encoders,
        unet=unet,
        delta_shape=tuple(meta["delta_shape"]),
        base_checksum=meta["base_checksum"],
        loss_curve=list(tensors.get("loss_curve", np.empty(0))),
    )
    for name, param in zip(bundle.param_names(), bundle.param_list()):
        param[:] = tensors[name]
    bundle.adam = AdamState.for_params(bundle.param_list())
    return bundle
