"""Entropy-under-perturbation layer ranking.

For each layer, Gaussian noise is injected into that layer's parameters
(both weight matrix and bias, jointly) and the resulting loss distribution
on a subset of training points is summarized by the differential entropy
of a Gaussian kernel density estimate. The layer with the highest mean
entropy is the one the hypernetwork will modify; the runner-up feeds the
alternative-layer ablation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .mlp import MlpModel, loss_kind_for, loss_vector, mlp_forward, _activate
from .rng import RngStream

# Contributions beyond 8 bandwidths are below 1e-14 of the self term.
_KERNEL_CUTOFF_BW = 8.0


class DegenerateLossError(ValueError):
    """All loss draws identical: the KDE bandwidth collapses to zero."""


@numba.njit(cache=True)
def _kernel_sums(sorted_vals, h, cutoff):
    m = sorted_vals.size
    out = np.empty(m)
    inv2h2 = 1.0 / (2.0 * h * h)
    lo = 0
    hi = 0
    for i in range(m):
        x = sorted_vals[i]
        while sorted_vals[lo] < x - cutoff:
            lo += 1
        if hi < i:
            hi = i
        while hi < m and sorted_vals[hi] <= x + cutoff:
            hi += 1
        s = 0.0
        for j in range(lo, hi):
            d = sorted_vals[j] - x
            s += np.exp(-d * d * inv2h2)
        out[i] = s
    return out


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * m^(-1/5)."""
    m = values.size
    sd = float(np.std(values, ddof=1))
    q75, q25 = np.percentile(values, [75, 25])
    return 0.9 * min(sd, (q75 - q25) / 1.34) * m ** (-0.2)


def kde_entropy(losses: np.ndarray) -> float:
    """Plug-in differential entropy (nats) of a Gaussian KDE.

    H = -(1/m) sum_i log p(l_i) with p the resubstitution density
    (self term included), Silverman rule-of-thumb bandwidth.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < 2:
        raise ValueError("need at least 2 loss draws")
    h = silverman_bandwidth(losses)
    if not np.isfinite(h) or h <= 0.0:
        raise DegenerateLossError("zero sample variance: losses are degenerate")
    svals = np.sort(losses)
    sums = _kernel_sums(svals, h, _KERNEL_CUTOFF_BW * h)
    m = losses.size
    log_norm = np.log(m * h * np.sqrt(2.0 * np.pi))
    return float(log_norm - np.mean(np.log(sums)))


def layer_sigma(model: MlpModel, layer: int, sigma_scale: float = 0.1) -> float:
    """Perturbation scale: sigma_scale times the RMS of the layer parameters."""
    W, b = model.weights[layer]
    rms = np.sqrt(np.mean(np.concatenate([W.ravel(), b]) ** 2))
    return sigma_scale * max(rms, 1e-12)


def perturb_layer(model: MlpModel, layer: int, sigma: float, rng: RngStream) -> MlpModel:
    """Copy of the model with i.i.d. N(0, sigma^2) noise on one layer only."""
    if not 0 <= layer < model.spec.n_layers:
        raise IndexError(f"layer {layer} out of range")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = model.copy()
    W, b = out.weights[layer]
    W += sigma * rng.gaussian(W.shape)
    b += sigma * rng.gaussian(b.shape)
    return out


def loss_samples(model: MlpModel, sample, layer: int, m: int, sigma: float,
                 rng: RngStream) -> np.ndarray:
    """m loss values, each from a fresh N(0, sigma^2) perturbation of `layer`.

    The forward prefix up to the layer is shared (the input sample is
    fixed); draws are chunked to bound memory on wide layers.
    """
    if m < 2:
        raise ValueError("need m >= 2 draws")
    x, y = sample
    trace = mlp_forward(model, np.asarray(x, dtype=np.float64))
    i_l = trace.inputs[layer]
    W, b = model.weights[layer]
    n_out, n_in = W.shape
    kind = loss_kind_for(model.spec)
    act = model.spec.hidden_activation
    last = model.spec.n_layers - 1

    losses = np.empty(m)
    chunk = max(1, int(4e7 / max(n_out * n_in, 1)))
    done = 0
    base_z = W @ i_l + b
    while done < m:
        k = min(chunk, m - done)
        # One flat block per draw (W noise then bias noise) so the stream
        # position matches m successive perturb_layer calls exactly.
        flat = rng.gaussian((k, n_out * n_in + n_out))
        G = flat[:, : n_out * n_in].reshape(k, n_out, n_in)
        g = flat[:, n_out * n_in:]
        z = base_z + sigma * (G @ i_l + g)
        h = z if layer == last else _activate(z, act)
        for l in range(layer + 1, model.spec.n_layers):
            Wl, bl = model.weights[l]
            z = h @ Wl.T + bl
            h = z if l == last else _activate(z, act)
        losses[done:done + k] = loss_vector(kind, z, y)
        done += k
    return losses


def layer_score(model: MlpModel, samples, layer: int, m: int, sigma: float,
                rng: RngStream, tags=None) -> float:
    """Mean KDE entropy over the sample subset; -inf if any sample degenerates.

    tags name the samples for substream derivation (defaults to position),
    so a permuted subset with matching tags yields the same entropy values.
    """
    if not len(samples):
        raise ValueError("empty sample subset")
    if tags is None:
        tags = range(len(samples))
    total = 0.0
    for tag, sample in zip(tags, samples):
        sub = rng.child("losses", layer, int(tag))
        draws = loss_samples(model, sample, layer, m, sigma, sub)
        try:
            total += kde_entropy(draws)
        except DegenerateLossError:
            return float("-inf")
    return total / len(samples)


@dataclass
class LayerScoreReport:
    scores: list  # mean entropy (nats) per layer
    sigmas: list  # perturbation sigma per layer
    m: int
    n_samples: int
    ranking: list = field(default_factory=list)  # layer indices, best first
    selected: int = 0
    runner_up: int | None = None
    bandwidth_rule: str = "silverman: 0.9*min(sd, iqr/1.34)*m^(-1/5)"

    def __post_init__(self):
        if not self.ranking:
            order = sorted(range(len(self.scores)),
                           key=lambda l: (-self.scores[l], l))
            self.ranking = order
            self.selected = order[0]
            self.runner_up = order[1] if len(order) > 1 else None

    def to_text(self) -> str:
        lines = [f"{'layer':>5} {'score[nats]':>14} {'sigma':>12} {'m':>7}"]
        for l in self.ranking:
            lines.append(f"{l:>5} {self.scores[l]:>14.6f} {self.sigmas[l]:>12.3e} {self.m:>7}")
        lines.append(f"selected={self.selected} runner_up={self.runner_up} "
                     f"samples={self.n_samples}")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({
            "scores": self.scores, "sigmas": self.sigmas, "m": self.m,
            "n_samples": self.n_samples, "ranking": self.ranking,
            "selected": self.selected, "runner_up": self.runner_up,
            "bandwidth_rule": self.bandwidth_rule,
        }, indent=2), encoding="utf-8")

    @staticmethod
    def load(path) -> "LayerScoreReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return LayerScoreReport(**d)

    def save_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "score_nats", "sigma", "m", "n_samples"])
            for l in range(len(self.scores)):
                w.writerow([l, repr(self.scores[l]), repr(self.sigmas[l]),
                            self.m, self.n_samples])


def select_layer(model: MlpModel, samples, m: int, rng: RngStream,
                 sigma_scale: float = 0.1) -> LayerScoreReport:
    """Score every layer on the subset and rank them (ties: lower index wins)."""
    scores, sigmas = [], []
    for layer in range(model.spec.n_layers):
        sigma = layer_sigma(model, layer, sigma_scale)
        scores.append(layer_score(model, samples, layer, m, sigma,
                                  rng.child("layer", layer)))
        sigmas.append(sigma)
    return LayerScoreReport(scores=scores, sigmas=sigmas, m=m,
                            n_samples=len(samples))
