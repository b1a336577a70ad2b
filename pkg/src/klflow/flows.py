"""Affine coupling flows with exact log-det accounting.

Blocks follow the real-NVP law: the pass-through coordinates A condition
two tanh MLPs producing scale and shift for the transformed set B,

    y_B = x_B * exp(s(x_A)) + t(x_A),   y_A = x_A,

so the per-point log|det J| is just sum_B s(x_A). Masks alternate parity
by block index. The raw scale is bounded via s_range*tanh(s_raw/s_range)
to keep exp() from overflowing early in training.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"KLFW"
VERSION = 1


class GaussianBase:
    """Isotropic Gaussian base distribution N(mean, variance * I)."""

    def __init__(self, dim, mean=None, variance=1.0):
        if variance <= 0:
            raise ValueError("variance must be positive")
        self.dim = dim
        self.mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float)
        self.variance = float(variance)

    def sample(self, n, rng):
        return self.mean + np.sqrt(self.variance) * rng.standard_normal((n, self.dim))

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        sq = ((x - self.mean) ** 2).sum(axis=-1)
        return -0.5 * sq / self.variance - 0.5 * self.dim * np.log(2 * np.pi * self.variance)

    def log_density_t(self, x):
        sq = ad.tsum(ad.square(x - Tensor(self.mean)), axis=1)
        const = -0.5 * self.dim * np.log(2 * np.pi * self.variance)
        return sq * (-0.5 / self.variance) + Tensor(const)


class MLP:
    """Small tanh MLP; the last linear layer may be zero-initialized so the
    network starts as the constant-zero map."""

    def __init__(self, n_in, width, n_out, n_hidden=2, rng=None, zero_last=True):
        if width < 1:
            raise ValueError("width must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.width, self.n_out, self.n_hidden = n_in, width, n_out, n_hidden
        sizes = [n_in] + [width] * n_hidden + [n_out]
        self.params = []
        for i in range(len(sizes) - 1):
            fan_in = sizes[i]
            if zero_last and i == len(sizes) - 2:
                W = np.zeros((sizes[i], sizes[i + 1]))
                b = np.zeros(sizes[i + 1])
            else:
                W = rng.standard_normal((sizes[i], sizes[i + 1])) / np.sqrt(fan_in)
                b = np.zeros(sizes[i + 1])
            self.params.append(Tensor(W, requires_grad=True))
            self.params.append(Tensor(b, requires_grad=True))

    def __call__(self, x):
        h = x
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            h = ad.add(ad.matmul(h, W), b)
            if i < n_layers - 1:
                h = ad.tanh(h)
        return h

    def apply_np(self, x):
        h = x
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            W, b = self.params[2 * i].data, self.params[2 * i + 1].data
            h = h @ W + b
            if i < n_layers - 1:
                h = np.tanh(h)
        return h


class CouplingBlock:
    """One invertible affine coupling transform on R^d."""

    def __init__(self, dim, mask, width, n_hidden=2, rng=None, s_range=5.0):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (dim,):
            raise ValueError("mask must have one entry per coordinate")
        n_a = int(mask.sum())
        n_b = dim - n_a
        if dim >= 2 and (n_a < 1 or n_b < 1):
            raise ValueError("mask must keep both coordinate sets nonempty")
        self.dim = dim
        self.mask = mask
        self.width = width
        self.n_hidden = n_hidden
        self.s_range = float(s_range)
        # selection matrices let coordinate gather/scatter stay inside matmul
        eye = np.eye(dim)
        self._sel_a = eye[:, mask]
        self._sel_b = eye[:, ~mask]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.s_net = MLP(n_a, width, n_b, n_hidden, rng=rng)
        self.t_net = MLP(n_a, width, n_b, n_hidden, rng=rng)

    def parameters(self):
        return self.s_net.params + self.t_net.params

    def _scale_t(self, x_a):
        raw = self.s_net(x_a)
        return ad.tanh(raw * (1.0 / self.s_range)) * self.s_range

    def _scale_np(self, x_a):
        return self.s_range * np.tanh(self.s_net.apply_np(x_a) / self.s_range)

    def forward_t(self, x):
        x_a = ad.matmul(x, Tensor(self._sel_a))
        x_b = ad.matmul(x, Tensor(self._sel_b))
        s = self._scale_t(x_a)
        t = self.t_net(x_a)
        y_b = ad.add(ad.mul(x_b, ad.exp(s)), t)
        y = ad.add(ad.matmul(x_a, Tensor(self._sel_a.T)), ad.matmul(y_b, Tensor(self._sel_b.T)))
        return y, ad.tsum(s, axis=1)

    def inverse_t(self, y):
        y_a = ad.matmul(y, Tensor(self._sel_a))
        y_b = ad.matmul(y, Tensor(self._sel_b))
        s = self._scale_t(y_a)
        t = self.t_net(y_a)
        x_b = ad.mul(ad.add(y_b, -t), ad.exp(-s))
        x = ad.add(ad.matmul(y_a, Tensor(self._sel_a.T)), ad.matmul(x_b, Tensor(self._sel_b.T)))
        return x, ad.tsum(s, axis=1)

    def forward_np(self, x):
        x = np.asarray(x, dtype=float)
        x_a = x[:, self.mask]
        s = self._scale_np(x_a)
        if not np.all(np.isfinite(s)):
            raise FloatingPointError("non-finite scale output in coupling block")
        t = self.t_net.apply_np(x_a)
        y = x.copy()
        y[:, ~self.mask] = x[:, ~self.mask] * np.exp(s) + t
        return y, s.sum(axis=1)

    def inverse_np(self, y):
        y = np.asarray(y, dtype=float)
        y_a = y[:, self.mask]
        s = self._scale_np(y_a)
        if not np.all(np.isfinite(s)):
            raise FloatingPointError("non-finite scale output in coupling block")
        t = self.t_net.apply_np(y_a)
        x = y.copy()
        x[:, ~self.mask] = (y[:, ~self.mask] - t) * np.exp(-s)
        return x, s.sum(axis=1)


def alternating_mask(dim, parity):
    """Pass-through set = coordinates of the given parity."""
    return (np.arange(dim) % 2) == (parity % 2)


def identity_init(dim, n_blocks, width, rng, n_hidden=2, s_range=5.0):
    """Blocks whose s and t nets output exactly zero: the flow starts as the
    identity map with zero log-det, while hidden layers stay random."""
    return [
        CouplingBlock(dim, alternating_mask(dim, i), width, n_hidden, rng=rng, s_range=s_range)
        for i in range(n_blocks)
    ]


class FlowModel:
    """Ordered stack of coupling blocks over a Gaussian base."""

    def __init__(self, blocks, base):
        dims = {b.dim for b in blocks}
        if dims and dims != {base.dim}:
            raise ValueError("all blocks must share the base dimension")
        self.blocks = list(blocks)
        self.base = base

    @property
    def dim(self):
        return self.base.dim

    def parameters(self):
        out = []
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)
        return self

    def forward_t(self, x):
        logdet = None
        for b in self.blocks:
            x, ld = b.forward_t(x)
            logdet = ld if logdet is None else ad.add(logdet, ld)
        if logdet is None:
            logdet = Tensor(np.zeros(x.data.shape[0]))
        return x, logdet

    def forward_np(self, x):
        x = np.asarray(x, dtype=float)
        logdet = np.zeros(x.shape[0])
        for b in self.blocks:
            x, ld = b.forward_np(x)
            logdet += ld
        return x, logdet

    def inverse_np(self, y):
        y = np.asarray(y, dtype=float)
        logdet = np.zeros(y.shape[0])
        for b in reversed(self.blocks):
            y, ld = b.inverse_np(y)
            logdet += ld
        return y, logdet

    def sample(self, n, rng):
        """Draw base points and push them forward (numpy path).

        Returns (particles, base_points, logdet); keep the base points to
        re-run the differentiable forward inside a training tape.
        """
        if n < 1:
            raise ValueError("sample count must be >= 1")
        z = self.base.sample(n, rng)
        theta, logdet = self.forward_np(z)
        return theta, z, logdet

    def log_density(self, theta):
        """Change-of-variables log-density via the inverse pass."""
        x, logdet = self.inverse_np(theta)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("inverse pass produced non-finite point")
        return self.base.log_density(x) - logdet

    def log_density_t(self, theta):
        logdet = None
        x = theta
        for b in reversed(self.blocks):
            x, ld = b.inverse_t(x)
            logdet = ld if logdet is None else ad.add(logdet, ld)
        lp = self.base.log_density_t(x)
        if logdet is not None:
            lp = ad.add(lp, -logdet)
        return lp

    def copy(self, trainable=None):
        clone = deserialize(serialize(self))
        if trainable is not None:
            clone.set_trainable(trainable)
        else:
            for p_new, p_old in zip(clone.parameters(), self.parameters()):
                p_new.requires_grad = p_old.requires_grad
        return clone


def compose(front, back_blocks):
    """Append trainable blocks to a frozen prefix flow."""
    for b in back_blocks:
        if b.dim != front.dim:
            raise ValueError("dimension mismatch in composition")
    front = front.copy(trainable=False)
    return FlowModel(front.blocks + list(back_blocks), front.base)


def serialize(flow):
    """Versioned little-endian binary checkpoint, bit-exact on parameters."""
    parts = [MAGIC, struct.pack("<II", VERSION, flow.dim)]
    parts.append(flow.base.mean.astype("<f8").tobytes())
    parts.append(struct.pack("<d", flow.base.variance))
    parts.append(struct.pack("<I", len(flow.blocks)))
    for b in flow.blocks:
        parts.append(struct.pack("<IId", b.width, b.n_hidden, b.s_range))
        parts.append(b.mask.astype(np.uint8).tobytes())
        trainable = all(p.requires_grad for p in b.parameters())
        parts.append(struct.pack("<B", 1 if trainable else 0))
        for p in b.parameters():
            parts.append(p.data.astype("<f8").tobytes())
    return b"".join(parts)


class CheckpointError(ValueError):
    pass


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint stream")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(data):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic; not a flow checkpoint")
    version, dim = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    mean = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
    (variance,) = r.unpack("<d")
    base = GaussianBase(dim, mean, variance)
    (n_blocks,) = r.unpack("<I")
    blocks = []
    for _ in range(n_blocks):
        width, n_hidden, s_range = r.unpack("<IId")
        mask = np.frombuffer(r.take(dim), dtype=np.uint8).astype(bool)
        (trainable,) = r.unpack("<B")
        b = CouplingBlock(dim, mask, width, n_hidden, s_range=s_range)
        for p in b.parameters():
            flat = np.frombuffer(r.take(8 * p.data.size), dtype="<f8")
            p.data = flat.reshape(p.data.shape).copy()
            p.requires_grad = bool(trainable)
        blocks.append(b)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return FlowModel(blocks, base)
