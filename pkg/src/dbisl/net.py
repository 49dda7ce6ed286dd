"""Shared-encoder, dual-decoder, dual-head volumetric network and its optimizer.

Decoder ``phi`` upsamples with stride-2 transposed convolutions, decoder
``psi`` with pointwise convolutions followed by trilinear resizing. Each
decoder ends in a segmentation head (sigmoid) and a regression head (tanh).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import MissingGrad, ShapeMismatch
from .tensor import Tensor, add, default_dtype

BRANCHES = ("phi", "psi")


@dataclass
class DualOutput:
    y_phi: Tensor
    y_psi: Tensor
    r_phi: Tensor
    r_psi: Tensor

    def seg(self, branch):
        return self.y_phi if branch == "phi" else self.y_psi

    def reg(self, branch):
        return self.r_phi if branch == "phi" else self.r_psi

    def swapped(self):
        return DualOutput(self.y_psi, self.y_phi, self.r_psi, self.r_phi)

    def tensors(self):
        return [self.y_phi, self.y_psi, self.r_phi, self.r_psi]


def _he(rng, shape, fan_in, dtype):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype),
                  requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class DualNet:
    """Parameters live in ``self.params`` (an ordered name -> Tensor dict)."""

    def __init__(self, widths=(8, 16, 32), seed=0, dropout=0.1, dtype=None):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2:
            raise ValueError("need at least two encoder levels")
        self.dropout = float(dropout)
        self.seed = int(seed)
        self.training = True
        self._drop_rng = np.random.default_rng([self.seed, 1])
        dtype = dtype or default_dtype()
        rng = np.random.default_rng(self.seed)
        P = {}
        w = self.widths
        P["enc0.w"] = _he(rng, (w[0], 1, 3, 3, 3), 27, dtype)
        P["enc0.b"] = _zeros((w[0],), dtype)
        for i in range(1, len(w)):
            P[f"down{i}.w"] = _he(rng, (w[i], w[i - 1], 2, 2, 2), 8 * w[i - 1], dtype)
            P[f"down{i}.b"] = _zeros((w[i],), dtype)
            P[f"enc{i}.w"] = _he(rng, (w[i], w[i], 3, 3, 3), 27 * w[i], dtype)
            P[f"enc{i}.b"] = _zeros((w[i],), dtype)
        for i in reversed(range(len(w) - 1)):
            # phi: transposed conv up, psi: pointwise conv then trilinear resize
            P[f"phi.up{i}.w"] = _he(rng, (w[i + 1], w[i], 2, 2, 2), w[i + 1], dtype)
            P[f"phi.up{i}.b"] = _zeros((w[i],), dtype)
            P[f"psi.up{i}.w"] = _he(rng, (w[i], w[i + 1]), w[i + 1], dtype)
            P[f"psi.up{i}.b"] = _zeros((w[i],), dtype)
            for br in BRANCHES:
                if i > 0:
                    P[f"{br}.dec{i}.w"] = _he(rng, (w[i], w[i], 3, 3, 3), 27 * w[i], dtype)
                else:
                    P[f"{br}.dec{i}.w"] = _he(rng, (w[i], w[i]), w[i], dtype)
                P[f"{br}.dec{i}.b"] = _zeros((w[i],), dtype)
        for br in BRANCHES:
            for head in ("seg", "reg"):
                P[f"{br}.{head}.w"] = _zeros((1, w[0]), dtype)
                P[f"{br}.{head}.b"] = _zeros((1,), dtype)
        self.params = P

    # -- modes ---------------------------------------------------------------
    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def reseed_dropout(self, seed):
        self._drop_rng = np.random.default_rng([self.seed, 1, int(seed)])

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clone(self):
        """Independent copy (weights duplicated) suitable for another thread."""
        other = DualNet.__new__(DualNet)
        other.__dict__.update(self.__dict__)
        other.params = {k: Tensor(v.data.copy(), requires_grad=True)
                        for k, v in self.params.items()}
        other._drop_rng = np.random.default_rng([self.seed, 1])
        return other

    @property
    def depth(self):
        return len(self.widths) - 1

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    # -- forward ---------------------------------------------------------------
    def __call__(self, x):
        return forward(self, x)


def _block(x, w, b):
    conv = F.conv3d if w.ndim == 5 else F.conv1x1
    return F.instance_norm(conv(x, w, b)).relu()


def forward(net, x):
    """One shared encoder pass feeding both decoders; returns :class:`DualOutput`."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeMismatch(f"input must be [B,1,D,H,W], got {x.shape}")
    step = 2 ** net.depth
    if any(d % step for d in x.shape[2:]):
        raise ShapeMismatch(f"spatial dims {x.shape[2:]} must be divisible by {step}")
    P = net.params
    skips = [_block(x, P["enc0.w"], P["enc0.b"])]
    h = skips[0]
    for i in range(1, net.depth + 1):
        h = F.instance_norm(F.down2(h, P[f"down{i}.w"], P[f"down{i}.b"])).relu()
        h = _block(h, P[f"enc{i}.w"], P[f"enc{i}.b"])
        skips.append(h)
    if net.training and net.dropout > 0:
        h = F.dropout(h, net.dropout, net._drop_rng)
    bottleneck = h

    outs = {}
    for br in BRANCHES:
        h = bottleneck
        for i in reversed(range(net.depth)):
            if br == "phi":
                up = F.up2(h, P[f"phi.up{i}.w"], P[f"phi.up{i}.b"])
            else:
                up = F.resize_trilinear(F.conv1x1(h, P[f"psi.up{i}.w"], P[f"psi.up{i}.b"]),
                                        skips[i].shape[2:])
            h = add(up, skips[i]).relu()
            h = _block(h, P[f"{br}.dec{i}.w"], P[f"{br}.dec{i}.b"])
        outs[br] = (F.conv1x1(h, P[f"{br}.seg.w"], P[f"{br}.seg.b"]).sigmoid(),
                    F.conv1x1(h, P[f"{br}.reg.w"], P[f"{br}.reg.b"]).tanh())
    return DualOutput(outs["phi"][0], outs["psi"][0], outs["phi"][1], outs["psi"][1])


# -- optimizer -------------------------------------------------------------------
@dataclass
class SgdState:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    total_iters: int = 2000
    max_grad_norm: float | None = None
    t: int = 0
    buffers: dict = field(default_factory=dict, repr=False)

    def lr(self, t=None):
        t = self.t if t is None else t
        frac = min(max(t / self.total_iters, 0.0), 1.0)
        return self.lr0 * (1.0 - frac) ** self.power


def sgd_step(net, state, names=None):
    """Momentum SGD with weight decay and poly learning-rate decay.

    ``names`` restricts the update to a subset of parameters (disabled heads
    keep their values); every selected parameter must carry a gradient. With
    ``max_grad_norm`` set, the gradients of the selected parameters are scaled
    down together when their global L2 norm exceeds it.
    """
    names = list(net.params) if names is None else list(names)
    missing = [n for n in names if net.params[n].grad is None]
    if missing:
        raise MissingGrad(f"no gradient for {missing[:4]}{'...' if len(missing) > 4 else ''}")
    lr = state.lr()
    scale = 1.0
    if state.max_grad_norm:
        norm = math.sqrt(sum(float(np.sum(np.square(net.params[n].grad))) for n in names))
        if norm > state.max_grad_norm:
            scale = state.max_grad_norm / norm
    for n in names:
        p = net.params[n]
        d = scale * p.grad + state.weight_decay * p.data
        buf = state.buffers.get(n)
        buf = d if buf is None else state.momentum * buf + d
        state.buffers[n] = buf
        p.data = (p.data - lr * buf).astype(p.dtype, copy=False)
    state.t += 1
    return net
