"""Small ReLU multilayer perceptron with explicit reverse-mode derivatives.

All parameters live in one flat float64 vector; ``W`` and ``b`` are views
into it, so optimizers can work on the flat vector directly and gradients
come back in the same layout.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch


def relu_grad(z):
    # derivative at exactly 0 is taken as 0
    return (z > 0).astype(z.dtype)


class ResidualNet:
    """ReLU hidden layers, identity output, fixed input/output normalization.

    ``y = out_scale * MLP((inp - in_center) / in_scale)``
    """

    def __init__(self, sizes, theta=None, in_center=None, in_scale=None, out_scale=None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        n = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        if theta is None:
            theta = np.zeros(n)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (n,):
            raise DimensionMismatch(f"expected {n} parameters, got {theta.shape}")
        self.theta = theta.copy()
        self.in_center = np.zeros(sizes[0]) if in_center is None else np.asarray(in_center, float).copy()
        self.in_scale = np.ones(sizes[0]) if in_scale is None else np.asarray(in_scale, float).copy()
        self.out_scale = np.ones(sizes[-1]) if out_scale is None else np.asarray(out_scale, float).copy()
        if self.in_center.shape != (sizes[0],) or self.in_scale.shape != (sizes[0],):
            raise DimensionMismatch("input normalization does not match input width")
        if self.out_scale.shape != (sizes[-1],):
            raise DimensionMismatch("output scale does not match output width")
        self._bind()

    def _bind(self):
        self.W, self.b = [], []
        o = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.W.append(self.theta[o:o + a * b].reshape(b, a))
            o += a * b
            self.b.append(self.theta[o:o + b])
            o += b

    @classmethod
    def initialize(cls, sizes, rng, in_center=None, in_scale=None, out_scale=None,
                   out_std=0.01, bias_range=0.05):
        """He-normal hidden weights, hidden biases uniform in +/-bias_range,
        output weights N(0, out_std^2) and zero output bias."""
        net = cls(sizes, None, in_center, in_scale, out_scale)
        n_layers = len(net.W)
        for j, W in enumerate(net.W):
            if j == n_layers - 1:
                W[...] = rng.normal(0.0, out_std, size=W.shape)
            else:
                W[...] = rng.normal(0.0, np.sqrt(2.0 / W.shape[1]), size=W.shape)
                net.b[j][...] = rng.uniform(-bias_range, bias_range, size=net.b[j].shape)
        return net

    @classmethod
    def zeros(cls, sizes, **kw):
        return cls(sizes, None, **kw)

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    @property
    def n_params(self):
        return self.theta.size

    @property
    def hidden_neurons(self):
        return sum(self.sizes[1:-1])

    def copy(self):
        return ResidualNet(self.sizes, self.theta, self.in_center, self.in_scale, self.out_scale)

    def set_theta(self, theta):
        self.theta[...] = theta

    def _check(self, inp):
        if inp.shape[-1] != self.n_in:
            raise DimensionMismatch(f"net expects {self.n_in} inputs, got {inp.shape[-1]}")

    def __call__(self, inp):
        inp = np.asarray(inp, float)
        self._check(inp)
        a = (inp - self.in_center) / self.in_scale
        last = len(self.W) - 1
        for j, (W, b) in enumerate(zip(self.W, self.b)):
            z = a @ W.T + b
            a = z if j == last else np.maximum(z, 0.0)
        return a * self.out_scale

    def forward(self, inp):
        """Batched forward pass ``(B, n_in) -> (B, n_out)`` keeping a cache."""
        self._check(inp)
        a = (inp - self.in_center) / self.in_scale
        acts = [a]
        last = len(self.W) - 1
        for j, (W, b) in enumerate(zip(self.W, self.b)):
            z = a @ W.T + b
            if j == last:
                a = z
            else:
                a = np.maximum(z, 0.0)
                acts.append(a)
        return a * self.out_scale, acts

    def backward(self, acts, g_out, g_theta=None):
        """Vector-Jacobian product.

        Returns the gradient with respect to the raw input and adds the
        parameter gradient into ``g_theta`` (allocated when None).
        """
        if g_theta is None:
            g_theta = np.zeros_like(self.theta)
        gW, gb = _views(self.sizes, g_theta)
        g = g_out * self.out_scale
        for j in range(len(self.W) - 1, -1, -1):
            a = acts[j]
            gW[j] += g.T @ a
            gb[j] += g.sum(axis=0)
            g = g @ self.W[j]
            if j > 0:
                g = g * (a > 0)
        return g / self.in_scale, g_theta

    def jacobian(self, inp):
        """d out / d raw input at a single point, shape ``(n_out, n_in)``."""
        inp = np.asarray(inp, float)
        self._check(inp)
        a = (inp - self.in_center) / self.in_scale
        J = np.diag(1.0 / self.in_scale)
        last = len(self.W) - 1
        for j, (W, b) in enumerate(zip(self.W, self.b)):
            z = W @ a + b
            J = W @ J
            if j != last:
                mask = relu_grad(z)
                a = np.maximum(z, 0.0)
                J = mask[:, None] * J
        return self.out_scale[:, None] * J


def _views(sizes, theta):
    Ws, bs = [], []
    o = 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        Ws.append(theta[o:o + a * b].reshape(b, a))
        o += a * b
        bs.append(theta[o:o + b])
        o += b
    return Ws, bs
