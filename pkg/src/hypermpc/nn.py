"""Small neural-network building blocks on top of the autodiff tape."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, b)
    return out


def gru_cell(x: Tensor, h: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """One GRU step: update gate z, reset gate r, tanh candidate n.

    Gate weights are fused: wx is [in, 3H], wh is [H, 3H], b is [3H], with
    thirds ordered (z, r, n). The candidate uses r * (h @ wh_n), and the new
    hidden state is (1 - z) * n + z * h.
    """
    hidden = h.shape[-1]
    if wx.shape[-1] != 3 * hidden or wh.shape != (hidden, 3 * hidden) or b.shape != (3 * hidden,):
        raise ad.ShapeMismatch(
            f"op 'gru_cell': weights {wx.shape}/{wh.shape}/{b.shape} do not match hidden size {hidden}")
    gx = ad.add(ad.matmul(x, wx), b)
    gh = ad.matmul(h, wh)
    z = ad.sigmoid(ad.add(ad.narrow(gx, -1, 0, hidden), ad.narrow(gh, -1, 0, hidden)))
    r = ad.sigmoid(ad.add(ad.narrow(gx, -1, hidden, hidden), ad.narrow(gh, -1, hidden, hidden)))
    n = ad.tanh(ad.add(ad.narrow(gx, -1, 2 * hidden, hidden),
                       ad.mul(r, ad.narrow(gh, -1, 2 * hidden, hidden))))
    return ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))


def gru_sequence(xs: Tensor, h0: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Run a GRU over xs of shape [batch, steps, in]; returns the final hidden."""
    steps = xs.shape[1]
    h = h0
    for t in range(steps):
        x_t = ad.reshape(ad.narrow(xs, 1, t, 1), (xs.shape[0], xs.shape[2]))
        h = gru_cell(x_t, h, wx, wh, b)
    return h
