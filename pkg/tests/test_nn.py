import numpy as np
import pytest

from hypermpc import autodiff as ad
from hypermpc import nn

from conftest import check_gradients


def _gru_weights(rng, din=4, hidden=4):
    return (nn.uniform_init(rng, (din, 3 * hidden), hidden),
            nn.uniform_init(rng, (hidden, 3 * hidden), hidden),
            nn.uniform_init(rng, (3 * hidden,), hidden))


def test_zero_weights_keep_hidden_at_zero(rng):
    x = ad.Tensor(rng.normal(size=(3, 4)))
    h = ad.Tensor(np.zeros((3, 4)))
    zeros = ad.Tensor(np.zeros((4, 12)))
    zh = ad.Tensor(np.zeros((4, 12)))
    b = ad.Tensor(np.zeros(12))
    out = nn.gru_cell(x, h, zeros, zh, b)
    np.testing.assert_array_equal(out.data, np.zeros((3, 4)))


def test_gru_deterministic(rng):
    wx, wh, b = _gru_weights(rng)
    x = rng.normal(size=(2, 4))
    h = rng.normal(size=(2, 4))
    o1 = nn.gru_cell(ad.Tensor(x), ad.Tensor(h), ad.Tensor(wx), ad.Tensor(wh), ad.Tensor(b))
    o2 = nn.gru_cell(ad.Tensor(x), ad.Tensor(h), ad.Tensor(wx), ad.Tensor(wh), ad.Tensor(b))
    np.testing.assert_array_equal(o1.data, o2.data)


def test_gru_weight_shape_mismatch(rng):
    wx, wh, b = _gru_weights(rng)
    with pytest.raises(ad.ShapeMismatch, match="gru_cell"):
        nn.gru_cell(ad.Tensor(np.zeros((2, 4))), ad.Tensor(np.zeros((2, 5))),
                    ad.Tensor(wx), ad.Tensor(wh), ad.Tensor(b))


def test_gru_50_step_bptt_matches_finite_differences(rng):
    # scalar readout of the final hidden after 50 steps, gradient vs every weight
    steps, din, hidden = 50, 4, 4
    xs = rng.uniform(-1, 1, (1, steps, din))
    readout = rng.normal(size=(hidden, 1))
    wx, wh, b = _gru_weights(rng, din, hidden)

    def build(twx, twh, tb):
        h = nn.gru_sequence(ad.Tensor(xs), ad.Tensor(np.zeros((1, hidden))), twx, twh, tb)
        return ad.reduce_sum(ad.matmul(h, ad.Tensor(readout)))

    check_gradients(build, [wx, wh, b], rtol=1e-4, atol=1e-10, eps=1e-6)
