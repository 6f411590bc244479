"""Small U-Net noise predictor over square weight matrices.

Residual blocks at each resolution, a single-head self-attention block in
the bottleneck, and a per-block affine injection of the conditioning
vector as channel biases. Forward and backward passes are hand-written
numpy (float64); every layer caches what its backward pass needs and
releases it afterwards.
"""

from __future__ import annotations

import numpy as np

from .rng import RngStream


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class SiLU:
    def forward(self, x):
        s = _sigmoid(x)
        self._cache = (x, s)
        return x * s

    def backward(self, dy):
        x, s = self._cache
        self._cache = None
        return dy * (s * (1.0 + x * (1.0 - s)))


class Conv2d:
    """k x k convolution, zero padding k//2, optional stride.

    im2col/col2im are built from k*k strided slices of the padded image,
    which keeps both directions fully vectorized.
    """

    def __init__(self, cin, cout, k=3, stride=1, rng: RngStream | None = None,
                 zero_init=False, name="conv"):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.name = name
        if zero_init:
            self.W = np.zeros((cout, cin, k, k))
        else:
            std = np.sqrt(2.0 / (cin * k * k))
            self.W = rng.gaussian((cout, cin, k, k)) * std
        self.b = np.zeros(cout)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def param_items(self):
        return [(f"{self.name}.W", self.W, self.gW), (f"{self.name}.b", self.b, self.gb)]

    def _out_size(self, H, W):
        p, k, s = self.k // 2, self.k, self.stride
        return (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1

    def forward(self, x):
        B, C, H, W = x.shape
        k, s, p = self.k, self.stride, self.k // 2
        OH, OW = self._out_size(H, W)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((B, C, k * k, OH * OW))
        for kk in range(k * k):
            di, dj = divmod(kk, k)
            cols[:, :, kk, :] = xp[:, :, di:di + s * OH:s, dj:dj + s * OW:s] \
                .reshape(B, C, -1)
        cols_mat = cols.reshape(B, C * k * k, OH * OW)
        y = np.matmul(self.W.reshape(self.cout, -1), cols_mat)
        y += self.b[:, None]
        self._cache = (cols_mat, (B, C, H, W))
        return y.reshape(B, self.cout, OH, OW)

    def backward(self, dy):
        cols_mat, (B, C, H, W) = self._cache
        self._cache = None
        k, s, p = self.k, self.stride, self.k // 2
        OH, OW = self._out_size(H, W)
        dym = dy.reshape(B, self.cout, -1)
        self.gb += dy.sum(axis=(0, 2, 3))
        self.gW += np.tensordot(dym, cols_mat, axes=([0, 2], [0, 2])) \
            .reshape(self.W.shape)
        dcols = np.matmul(self.W.reshape(self.cout, -1).T, dym) \
            .reshape(B, C, k * k, OH, OW)
        dxp = np.zeros((B, C, H + 2 * p, W + 2 * p))
        for kk in range(k * k):
            di, dj = divmod(kk, k)
            dxp[:, :, di:di + s * OH:s, dj:dj + s * OW:s] += dcols[:, :, kk]
        return dxp[:, :, p:p + H, p:p + W]


class CondAffine:
    """Projects the conditioning vector to per-channel biases."""

    def __init__(self, d_cond, cout, rng: RngStream, name="cond"):
        std = np.sqrt(2.0 / (d_cond + cout))
        self.W = rng.gaussian((cout, d_cond)) * std
        self.b = np.zeros(cout)
        self.name = name
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    def param_items(self):
        return [(f"{self.name}.W", self.W, self.gW), (f"{self.name}.b", self.b, self.gb)]

    def forward(self, e):
        self._e = e
        return e @ self.W.T + self.b  # (B, cout)

    def backward(self, demb):
        self.gW += demb.T @ self._e
        self.gb += demb.sum(axis=0)
        de = demb @ self.W
        self._e = None
        return de


class ResBlock:
    """conv(silu(x)) + cond -> conv(silu(.)) with a (projected) skip."""

    def __init__(self, cin, cout, d_cond, rng, name="res"):
        self.act1 = SiLU()
        self.conv1 = Conv2d(cin, cout, 3, rng=rng, name=f"{name}.conv1")
        self.cond = CondAffine(d_cond, cout, rng, name=f"{name}.cond")
        self.act2 = SiLU()
        self.conv2 = Conv2d(cout, cout, 3, rng=rng, name=f"{name}.conv2")
        self.skip = Conv2d(cin, cout, 1, rng=rng, name=f"{name}.skip") if cin != cout else None

    def param_items(self):
        items = self.conv1.param_items() + self.cond.param_items() + self.conv2.param_items()
        if self.skip is not None:
            items += self.skip.param_items()
        return items

    def forward(self, x, e):
        h = self.conv1.forward(self.act1.forward(x))
        h += self.cond.forward(e)[:, :, None, None]
        h = self.conv2.forward(self.act2.forward(h))
        return h + (self.skip.forward(x) if self.skip is not None else x)

    def backward(self, dy):
        dskip = self.skip.backward(dy) if self.skip is not None else dy
        dh = self.act2.backward(self.conv2.backward(dy))
        de = self.cond.backward(dh.sum(axis=(2, 3)))
        dx = self.act1.backward(self.conv1.backward(dh))
        return dx + dskip, de


class SelfAttention:
    """Single-head dot-product attention over spatial positions, residual."""

    def __init__(self, c, rng, name="attn"):
        self.c = c
        self.name = name
        std = np.sqrt(1.0 / c)
        self.Wq = rng.gaussian((c, c)) * std
        self.Wk = rng.gaussian((c, c)) * std
        self.Wv = rng.gaussian((c, c)) * std
        self.Wo = rng.gaussian((c, c)) * std
        self.bq = np.zeros(c)
        self.bk = np.zeros(c)
        self.bv = np.zeros(c)
        self.bo = np.zeros(c)
        for p in ("Wq", "Wk", "Wv", "Wo", "bq", "bk", "bv", "bo"):
            setattr(self, "g" + p, np.zeros_like(getattr(self, p)))

    def param_items(self):
        return [(f"{self.name}.{p}", getattr(self, p), getattr(self, "g" + p))
                for p in ("Wq", "Wk", "Wv", "Wo", "bq", "bk", "bv", "bo")]

    def forward(self, x):
        B, C, H, W = x.shape
        t = x.reshape(B, C, H * W).transpose(0, 2, 1)  # (B, N, C)
        q = t @ self.Wq.T + self.bq
        k = t @ self.Wk.T + self.bk
        v = t @ self.Wv.T + self.bv
        s = q @ k.transpose(0, 2, 1) / np.sqrt(C)
        s -= s.max(axis=-1, keepdims=True)
        A = np.exp(s)
        A /= A.sum(axis=-1, keepdims=True)
        o = A @ v
        y = o @ self.Wo.T + self.bo
        self._cache = (t, q, k, v, A, o, (B, C, H, W))
        return x + y.transpose(0, 2, 1).reshape(B, C, H, W)

    def backward(self, dy):
        t, q, k, v, A, o, (B, C, H, W) = self._cache
        self._cache = None
        dyt = dy.reshape(B, C, H * W).transpose(0, 2, 1)  # (B, N, C)
        self.gWo += np.einsum("bnc,bnd->cd", dyt, o)
        self.gbo += dyt.sum(axis=(0, 1))
        do = dyt @ self.Wo
        dA = do @ v.transpose(0, 2, 1)
        dv = A.transpose(0, 2, 1) @ do
        ds = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
        ds /= np.sqrt(C)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        self.gWq += np.einsum("bnc,bnd->cd", dq, t)
        self.gbq += dq.sum(axis=(0, 1))
        self.gWk += np.einsum("bnc,bnd->cd", dk, t)
        self.gbk += dk.sum(axis=(0, 1))
        self.gWv += np.einsum("bnc,bnd->cd", dv, t)
        self.gbv += dv.sum(axis=(0, 1))
        dt = dq @ self.Wq + dk @ self.Wk + dv @ self.Wv
        return dy + dt.transpose(0, 2, 1).reshape(B, C, H, W)


class Downsample:
    def __init__(self, cin, cout, rng, name="down"):
        self.conv = Conv2d(cin, cout, 3, stride=2, rng=rng, name=name)

    def param_items(self):
        return self.conv.param_items()

    def forward(self, x):
        return self.conv.forward(x)

    def backward(self, dy):
        return self.conv.backward(dy)


class Upsample:
    """Nearest-neighbor x2 followed by a 3x3 conv."""

    def __init__(self, cin, cout, rng, name="up"):
        self.conv = Conv2d(cin, cout, 3, rng=rng, name=name)

    def param_items(self):
        return self.conv.param_items()

    def forward(self, x):
        up = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
        return self.conv.forward(up)

    def backward(self, dy):
        dup = self.conv.backward(dy)
        B, C, H2, W2 = dup.shape
        return dup.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5))


class UNet:
    """Shape-preserving eps-predictor on (B, 1, side, side) inputs."""

    def __init__(self, side: int, channels: int, levels: int, d_cond: int,
                 rng: RngStream):
        if side % (2 ** levels) != 0:
            raise ValueError(f"side {side} not divisible by 2^{levels}")
        self.side, self.channels, self.levels, self.d_cond = side, channels, levels, d_cond
        ch = [channels * 2 ** i for i in range(levels + 1)]
        self.stem = Conv2d(1, ch[0], 3, rng=rng, name="stem")
        self.enc = [ResBlock(ch[i], ch[i], d_cond, rng, name=f"enc{i}")
                    for i in range(levels)]
        self.downs = [Downsample(ch[i], ch[i + 1], rng, name=f"down{i}")
                      for i in range(levels)]
        self.mid1 = ResBlock(ch[-1], ch[-1], d_cond, rng, name="mid1")
        self.attn = SelfAttention(ch[-1], rng, name="attn")
        self.mid2 = ResBlock(ch[-1], ch[-1], d_cond, rng, name="mid2")
        self.ups = [Upsample(ch[i + 1], ch[i], rng, name=f"up{i}")
                    for i in range(levels)]
        self.dec = [ResBlock(2 * ch[i], ch[i], d_cond, rng, name=f"dec{i}")
                    for i in range(levels)]
        self.head = Conv2d(ch[0], 1, 3, rng=rng, zero_init=True, name="head")

    def _modules(self):
        mods = [self.stem]
        mods += self.enc + self.downs + [self.mid1, self.attn, self.mid2]
        mods += self.ups + self.dec + [self.head]
        return mods

    def param_items(self):
        items = []
        for m in self._modules():
            items.extend(m.param_items())
        return items

    def param_list(self):
        return [p for _, p, _ in self.param_items()]

    def grad_list(self):
        return [g for _, _, g in self.param_items()]

    def param_names(self):
        return [n for n, _, _ in self.param_items()]

    def zero_grads(self):
        for _, _, g in self.param_items():
            g[:] = 0.0

    def forward(self, omega, e):
        if omega.shape[-2:] != (self.side, self.side):
            raise ValueError(
                f"input {omega.shape[-2:]} does not match side {self.side}")
        h = self.stem.forward(omega)
        skips = []
        for i in range(self.levels):
            h = self.enc[i].forward(h, e)
            skips.append(h)
            h = self.downs[i].forward(h)
        h = self.mid1.forward(h, e)
        h = self.attn.forward(h)
        h = self.mid2.forward(h, e)
        for i in range(self.levels - 1, -1, -1):
            h = self.ups[i].forward(h)
            h = np.concatenate([h, skips[i]], axis=1)
            h = self.dec[i].forward(h, e)
        return self.head.forward(h)

    def backward(self, dout):
        """Backprop to parameters; returns d loss / d e (B, d_cond)."""
        de_total = None

        def add_de(de):
            nonlocal de_total
            de_total = de if de_total is None else de_total + de

        dh = self.head.backward(dout)
        dskips = [None] * self.levels
        for i in range(self.levels):
            dh, de = self.dec[i].backward(dh)
            add_de(de)
            ch_up = dh.shape[1] // 2
            dskips[i] = dh[:, ch_up:]
            dh = self.ups[i].backward(dh[:, :ch_up])
        dh, de = self.mid2.backward(dh)
        add_de(de)
        dh = self.attn.backward(dh)
        dh, de = self.mid1.backward(dh)
        add_de(de)
        for i in range(self.levels - 1, -1, -1):
            dh = self.downs[i].backward(dh)
            dh = dh + dskips[i]
            dh, de = self.enc[i].backward(dh)
            add_de(de)
        self.stem.backward(dh)
        return de_total
