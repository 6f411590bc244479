"""Conditioning vector for the denoiser.

e = PE[t] + E_i(i_L) + E_a(a_L) + E_o(out): a trainable timestep table
(initialized with the sinusoidal encoding) plus three affine encoders of
the layer input, layer activation and network output. The three data
encodings do not depend on t, so samplers compute them once per sample
and reuse them across diffusion steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream


def pos_encode(t: float, d: int) -> np.ndarray:
    """Interleaved sin/cos of t / 10000^(2i/d); d must be even."""
    if d % 2 != 0:
        raise ValueError("positional encoding dimension must be even")
    i = np.arange(d // 2, dtype=np.float64)
    freq = 10.0 ** (-4.0 * 2.0 * i / d)  # 1 / 10000^(2i/d)
    pe = np.empty(d)
    pe[0::2] = np.sin(t * freq)
    pe[1::2] = np.cos(t * freq)
    return pe


@dataclass
class ConditionEncoders:
    pe_table: np.ndarray  # (T, d_cond), trainable, sinusoidal init
    Wi: np.ndarray
    bi: np.ndarray
    Wa: np.ndarray
    ba: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray

    @property
    def d_cond(self) -> int:
        return self.pe_table.shape[1]

    @property
    def T(self) -> int:
        return self.pe_table.shape[0]

    def param_list(self) -> list:
        return [self.pe_table, self.Wi, self.bi, self.Wa, self.ba, self.Wo, self.bo]

    def param_names(self) -> list:
        return ["pe_table", "enc.Wi", "enc.bi", "enc.Wa", "enc.ba", "enc.Wo", "enc.bo"]

    def data_encoding(self, i_l: np.ndarray, a_l: np.ndarray, out: np.ndarray) -> np.ndarray:
        """Timestep-independent part of e; supports (d,) or batched (B, d) inputs."""
        return (i_l @ self.Wi.T + self.bi
                + a_l @ self.Wa.T + self.ba
                + out @ self.Wo.T + self.bo)

    def encode(self, cond, t: int) -> np.ndarray:
        """Full conditioning vector for one sample at integer step t (1..T)."""
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside 1..{self.T}")
        return self.pe_table[t - 1] + self.data_encoding(cond.i_l, cond.a_l, cond.out)

    def encode_batch(self, data_enc: np.ndarray, t: np.ndarray) -> np.ndarray:
        return data_enc + self.pe_table[np.asarray(t) - 1]

    def backward(self, de: np.ndarray, t: np.ndarray, i_l: np.ndarray,
                 a_l: np.ndarray, out: np.ndarray, grads: list) -> None:
        """Accumulate gradients (matching param_list order) for batched de."""
        g_pe, g_Wi, g_bi, g_Wa, g_ba, g_Wo, g_bo = grads
        np.add.at(g_pe, np.asarray(t) - 1, de)
        g_Wi += de.T @ i_l
        g_bi += de.sum(axis=0)
        g_Wa += de.T @ a_l
        g_ba += de.sum(axis=0)
        g_Wo += de.T @ out
        g_bo += de.sum(axis=0)


def init_encoders(T: int, d_cond: int, n_i: int, n_a: int, n_o: int,
                  rng: RngStream) -> ConditionEncoders:
    pe = np.stack([pos_encode(t, d_cond) for t in range(1, T + 1)])

    def affine(n_in):
        std = np.sqrt(2.0 / (n_in + d_cond))
        return rng.gaussian((d_cond, n_in)) * std, np.zeros(d_cond)

    Wi, bi = affine(n_i)
    Wa, ba = affine(n_a)
    Wo, bo = affine(n_o)
    return ConditionEncoders(pe, Wi, bi, Wa, ba, Wo, bo)
