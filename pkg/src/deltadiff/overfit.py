"""Per-sample finetuning corpus for the hypernetwork.

Each training sample is overfitted with a few plain gradient-descent steps
on the selected layer only. The resulting weight delta is stored as a unit
direction plus its magnitude, together with the conditioning signal (layer
input, layer activation, network output) computed from the *base* model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mlp import (
    MlpModel,
    layer_matrix,
    loss_eval,
    loss_kind_for,
    mlp_backward,
    mlp_forward,
    model_checksum,
)

# Deltas with a norm at or below this are pure numerical residue and are
# excluded from both the diffusion and the scale corpora (log(0) guard).
EPS_RHO = 1e-12

MANIFEST_NAME = "manifest.json"
_CHUNK_ROWS = 1000


@dataclass
class ConditioningTuple:
    i_l: np.ndarray  # input feeding the selected layer
    a_l: np.ndarray  # that layer's activation
    out: np.ndarray  # base network output

    def concat(self) -> np.ndarray:
        return np.concatenate([self.i_l, self.a_l, self.out])


def make_conditioning(model: MlpModel, layer: int, x: np.ndarray) -> ConditioningTuple:
    trace = mlp_forward(model, np.asarray(x, dtype=np.float64))
    return ConditioningTuple(
        i_l=np.asarray(trace.inputs[layer], dtype=np.float64).copy(),
        a_l=trace.post_acts[layer].copy(),
        out=trace.output.copy(),
    )


def make_conditioning_batch(model: MlpModel, layer: int, xs: np.ndarray) -> ConditioningTuple:
    """Batched variant: fields have a leading batch axis."""
    trace = mlp_forward(model, np.asarray(xs, dtype=np.float64))
    return ConditioningTuple(
        i_l=np.asarray(trace.inputs[layer], dtype=np.float64).copy(),
        a_l=trace.post_acts[layer].copy(),
        out=trace.output.copy(),
    )


@dataclass
class FinetuneResult:
    model: MlpModel  # full parameter set; only the target layer differs
    loss_before: float
    loss_after: float
    steps_run: int


def finetune_sample(model: MlpModel, layer: int, sample, steps: int = 3,
                    lr: float = 1e-2, converge_tol: float | None = None,
                    max_steps: int | None = None) -> FinetuneResult:
    """Plain GD on one (x, y) pair, updating only `layer`.

    With converge_tol set, iterates until the loss improvement drops below
    the tolerance (capped at max_steps); otherwise runs exactly `steps`.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x, y = sample
    kind = loss_kind_for(model.spec)
    work = model.copy()
    W, b = work.weights[layer]
    cap = max_steps if (converge_tol is not None and max_steps) else steps
    loss_before = None
    prev = None
    steps_run = 0
    for _ in range(cap):
        trace = mlp_forward(work, x)
        loss, grad_out = loss_eval(kind, trace.logits, y)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite finetune loss {loss}")
        if loss_before is None:
            loss_before = loss
        if converge_tol is not None and prev is not None and abs(prev - loss) < converge_tol:
            break
        grads = mlp_backward(work, trace, grad_out, layer=layer)
        dW, db = grads[layer]
        W -= lr * dW
        b -= lr * db
        prev = loss
        steps_run += 1
    trace = mlp_forward(work, x)
    loss_after, _ = loss_eval(kind, trace.logits, y)
    if not np.isfinite(loss_after):
        raise FloatingPointError(f"non-finite finetune loss {loss_after}")
    return FinetuneResult(work, float(loss_before), float(loss_after), steps_run)


def normalize_delta(theta_s: MlpModel, theta: MlpModel, layer: int):
    """Unit-norm delta matrix and its magnitude, or None when excluded.

    The delta is packed as layer_matrix(dW, db): shape (in+1, out) with the
    bias difference as the final row. rho is the L2 norm of the full
    parameter difference (layers other than `layer` are identical).
    """
    Ws, bs = theta_s.weights[layer]
    W0, b0 = theta.weights[layer]
    M = layer_matrix(Ws - W0, bs - b0)
    rho = float(np.sqrt(np.sum(M * M)))
    if rho <= EPS_RHO:
        return None
    return M / rho, rho


class RecordStore:
    """Columnar store of overfit records, persisted as chunked float blobs."""

    FIELDS = ("x", "i_l", "a_l", "out", "delta_norm", "rho",
              "loss_before", "loss_after", "sample_index")

    def __init__(self, arrays: dict, meta: dict):
        self.arrays = arrays
        self.meta = meta
        n = len(arrays["rho"])
        for f in self.FIELDS:
            if len(arrays[f]) != n:
                raise ValueError(f"field {f} has {len(arrays[f])} rows, expected {n}")

    def __len__(self):
        return len(self.arrays["rho"])

    @property
    def layer(self) -> int:
        return int(self.meta["layer"])

    @property
    def delta_shape(self) -> tuple:
        return tuple(int(v) for v in self.meta["delta_shape"])

    @property
    def excluded(self) -> int:
        return int(self.meta["excluded"])

    def conditioning(self, idx) -> ConditioningTuple:
        return ConditioningTuple(self.arrays["i_l"][idx], self.arrays["a_l"][idx],
                                 self.arrays["out"][idx])

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        fields = {}
        for name in self.FIELDS:
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            chunks = []
            for start in range(0, len(arr), _CHUNK_ROWS):
                part = arr[start:start + _CHUNK_ROWS]
                fname = f"{name}_{start // _CHUNK_ROWS:05d}.f64"
                (directory / fname).write_bytes(part.tobytes())
                chunks.append({"file": fname, "rows": int(len(part))})
            fields[name] = {"shape_tail": list(arr.shape[1:]), "chunks": chunks}
        manifest = {"meta": self.meta, "fields": fields}
        (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2,
                                                          sort_keys=True))
        return directory

    @staticmethod
    def load(directory) -> "RecordStore":
        directory = Path(directory)
        manifest = json.loads((directory / MANIFEST_NAME).read_text())
        arrays = {}
        for name, entry in manifest["fields"].items():
            tail = tuple(entry["shape_tail"])
            parts = []
            for chunk in entry["chunks"]:
                raw = (directory / chunk["file"]).read_bytes()
                parts.append(np.frombuffer(raw, dtype="<f8").reshape((chunk["rows"],) + tail))
            arrays[name] = (np.concatenate(parts) if parts
                            else np.empty((0,) + tail))
            arrays[name] = arrays[name].astype(np.float64)
        return RecordStore(arrays, manifest["meta"])


def collect(model: MlpModel, layer: int, trainset, steps: int = 3, lr: float = 1e-2,
            converge_tol: float | None = None, max_steps: int | None = None) -> RecordStore:
    """Finetune every training sample and assemble the record store.

    trainset is a datasets.Dataset. Zero-delta samples are excluded (their
    count lands in the manifest); everything else is recorded in dataset
    order, so the result does not depend on traversal order.
    """
    if len(trainset) == 0:
        raise ValueError("empty training set")
    classification = trainset.task == "classification"
    cols = {name: [] for name in RecordStore.FIELDS}
    excluded = 0
    for idx in range(len(trainset)):
        x = trainset.inputs[idx]
        y = int(trainset.targets[idx]) if classification else trainset.targets[idx]
        try:
            result = finetune_sample(model, layer, (x, y), steps=steps, lr=lr,
                                     converge_tol=converge_tol, max_steps=max_steps)
        except FloatingPointError as exc:
            raise FloatingPointError(f"sample {idx}: {exc}") from None
        norm = normalize_delta(result.model, model, layer)
        if norm is None:
            excluded += 1
            continue
        delta, rho = norm
        cond = make_conditioning(model, layer, x)
        cols["x"].append(np.asarray(x, dtype=np.float64))
        cols["i_l"].append(cond.i_l)
        cols["a_l"].append(cond.a_l)
        cols["out"].append(cond.out)
        cols["delta_norm"].append(delta)
        cols["rho"].append(rho)
        cols["loss_before"].append(result.loss_before)
        cols["loss_after"].append(result.loss_after)
        cols["sample_index"].append(float(idx))
    if not cols["rho"]:
        raise ValueError("every sample was excluded; nothing to train on")
    arrays = {name: np.stack(vals) if np.ndim(vals[0]) else np.asarray(vals)
              for name, vals in cols.items()}
    meta = {
        "layer": int(layer),
        "layer_in": model.layer_in_dim(layer),
        "layer_out": model.layer_out_dim(layer),
        "delta_shape": list(arrays["delta_norm"].shape[1:]),
        "records": int(len(arrays["rho"])),
        "excluded": int(excluded),
        "steps": int(steps),
        "lr": float(lr),
        "base_checksum": model_checksum(model),
        "task": trainset.task,
    }
    return RecordStore(arrays, meta)
