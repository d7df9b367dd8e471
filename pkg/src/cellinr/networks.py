"""Positional encoding and the fully connected coordinate networks.

Three networks share one architecture family: a stack of ReLU hidden
layers of equal width followed by a scalar head.  The density network ends
in softplus, the color network in sigmoid, and the kernel-score network is
linear (its scores are normalized later by a softmax over each sample
set).  The kernel network additionally receives the encoded cube-center
coordinate, concatenated to the activation entering a configurable hidden
layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

HEADS = ("sigmoid", "softplus", "linear")


def encode(rho, epsilon):
    """Sin/cos frequency ladder of normalized coordinates.

    Parameters
    ----------
    rho: array (..., 3) of coordinates in [-1, 1].
    epsilon: number of frequency octaves (>= 1).

    Returns
    -------
    array (..., 6 * epsilon); per axis the layout is
    ``[sin(2^0 pi rho), cos(2^0 pi rho), ..., sin(2^(e-1) pi rho),
    cos(2^(e-1) pi rho)]``.  Coordinates are pre-scaled by pi so the lowest
    frequency spans one half period across the domain.
    """
    if epsilon < 1:
        raise ValueError("epsilon must be >= 1")
    rho = np.asarray(rho)
    freqs = (2.0 ** np.arange(epsilon)).astype(rho.dtype)
    ang = (np.pi * rho[..., :, None] * freqs).astype(rho.dtype)  # (..., 3, eps)
    parts = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., 3, eps, 2)
    return parts.reshape(rho.shape[:-1] + (6 * epsilon,))


@dataclass
class MlpParams:
    """Weights of one network: affine layers plus activation metadata.

    ``layers`` holds ``(W, b)`` with ``W`` of shape (fan_in, fan_out).
    The last entry is the head layer; all earlier layers are ReLU.
    ``inject_layer`` is the 1-indexed hidden layer whose input gets the
    side vector concatenated (None for no injection).
    """

    layers: list = field(default_factory=list)
    head: str = "linear"
    inject_layer: int | None = None
    inject_width: int = 0

    @property
    def in_dim(self):
        # width of the coordinate encoding the net expects; injection at
        # the first hidden layer widens that layer's fan-in but not the
        # caller-facing input
        base = self.layers[0][0].shape[0]
        if self.inject_layer == 1:
            base -= self.inject_width
        return base

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[1]

    def named_arrays(self):
        """Yield (name, array) for every parameter, in a fixed order."""
        for i, (w, b) in enumerate(self.layers):
            yield f"L{i}.W", w
            yield f"L{i}.b", b

    def validate(self):
        prev = None
        for i, (w, b) in enumerate(self.layers):
            expect = w.shape[0]
            if self.inject_layer is not None and i == self.inject_layer - 1:
                expect -= self.inject_width
            if prev is not None and expect != prev:
                raise ValueError(f"layer {i} fan-in {expect} != previous fan-out {prev}")
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i} bias shape {b.shape} != ({w.shape[1]},)")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i} has non-finite parameters")
            prev = w.shape[1]
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")


def init_mlp(in_dim, hidden_layers, hidden_width, head, rng,
             out_dim=1, inject_layer=None, inject_width=0, dtype=np.float32):
    """He-style uniform fan-in initialization; biases start at zero."""
    widths = [in_dim] + [hidden_width] * hidden_layers + [out_dim]
    layers = []
    for i in range(len(widths) - 1):
        fan_in = widths[i]
        if inject_layer is not None and i == inject_layer - 1:
            fan_in += inject_width
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, widths[i + 1])).astype(dtype)
        b = np.zeros(widths[i + 1], dtype=dtype)
        layers.append((w, b))
    return MlpParams(layers=layers, head=head,
                     inject_layer=inject_layer, inject_width=inject_width)


def _apply_head(z, head):
    if head == "sigmoid":
        return ad._sigmoid(z)
    if head == "softplus":
        return np.logaddexp(0.0, z).astype(z.dtype)
    return z


def mlp_forward(params, x, inject=None):
    """Plain (untaped) forward pass for a batch ``x`` of shape (B, in_dim).

    ``inject``, when given, is concatenated to the activation entering
    hidden layer ``params.inject_layer``.  Returns (B, out_dim).
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"input shape {x.shape} incompatible with in_dim {params.in_dim}")
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        if params.inject_layer is not None and i == params.inject_layer - 1:
            if inject is None or inject.shape != (x.shape[0], params.inject_width):
                raise ValueError("injection vector missing or mis-shaped")
            h = np.concatenate([h, inject], axis=1)
        h = h @ w + b
        if i < last:
            np.maximum(h, 0, out=h)
    return _apply_head(h, params.head)


class TapedMlp:
    """Parameters registered as leaves on a tape, with a taped forward."""

    def __init__(self, tape, params):
        self.tape = tape
        self.params = params
        self.leaves = [(tape.leaf(w), tape.leaf(b)) for w, b in params.layers]

    def forward(self, x, inject=None):
        """``x``/``inject`` are Nodes (or arrays) of shape (B, d)."""
        p = self.params
        h = x if isinstance(x, ad.Node) else self.tape.leaf(x)
        last = len(self.leaves) - 1
        for i, (w, b) in enumerate(self.leaves):
            if p.inject_layer is not None and i == p.inject_layer - 1:
                inj = inject if isinstance(inject, ad.Node) else self.tape.leaf(inject)
                h = ad.concat([h, inj], axis=1)
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
        if p.head == "sigmoid":
            return ad.sigmoid(h)
        if p.head == "softplus":
            return ad.softplus(h)
        return h

    def grads(self):
        """Per-layer (gW, gb) from the last backward pass (zeros if unused)."""
        return [(ad.grad_of(w), ad.grad_of(b)) for w, b in self.leaves]
