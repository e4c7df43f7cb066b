import numpy as np
import pytest

from bevloc import nn
from bevloc.bevnet import ArchConfig, BevNetwork


def _random_net(rng):
    """Small two-branch network covering every layer kind, in float64."""
    arch = ArchConfig(
        conv_channels=tuple(int(c) for c in rng.integers(1, 4, size=rng.integers(1, 3))),
        image_features=int(rng.integers(2, 5)),
        box_widths=(int(rng.integers(2, 5)),),
        fusion_width=int(rng.integers(2, 6)),
        head_h=(int(rng.integers(2, 4)),),
        head_v=(int(rng.integers(2, 4)), int(rng.integers(2, 4))),
        coords_only=bool(rng.random() < 0.2),
    )
    return BevNetwork(arch, seed=int(rng.integers(1 << 30)), dtype=np.float64)


def test_gradient_check_random_networks():
    rng = np.random.default_rng(2024)
    worst, checked = 0.0, 0
    while checked < 20:
        net = _random_net(rng)
        batch = int(rng.integers(1, 4))
        side = int(rng.integers(7, 12))
        boxes = rng.uniform(0, 1, (batch, 4))
        images = rng.normal(size=(batch, 3, side, side))
        target = rng.uniform(0, 1, (batch, 4))
        net.forward(boxes, images)
        # finite differences are only valid away from ReLU kinks
        if nn.relu_margin(net) < 1e-3:
            continue
        worst = max(worst, nn.grad_check(net, (boxes, images), target))
        checked += 1
    assert worst < 1e-4


def test_gradient_check_plain_stack():
    rng = np.random.default_rng(0)
    net = nn.Sequential(
        [nn.Conv2D(2, 3, 3, 2, rng, np.float64), nn.ReLU(), nn.Flatten(), nn.Dense(27, 2, "xavier", rng, np.float64)]
    )
    x = rng.normal(size=(2, 2, 7, 7))
    net.forward(x)
    assert nn.relu_margin(net) > 1e-4
    assert nn.grad_check(net, x, rng.normal(size=(2, 2))) < 1e-4


def test_grad_check_requires_float64():
    net = nn.Sequential([nn.Dense(2, 1)])
    with pytest.raises(TypeError):
        nn.grad_check(net, np.ones((1, 2), np.float32), np.zeros((1, 1), np.float32))


def test_mse_oracle():
    loss, grad = nn.mse_loss(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]]))
    assert loss == 2.5
    assert grad.tolist() == [[1.0, 2.0]]


def test_mse_shape_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.mse_loss(np.zeros((2, 4)), np.zeros((2, 3)))


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0, -1.0])]
    nn.Adam(lr=0.001).step(p, [np.array([5.0, -0.2])])
    assert p[0] == pytest.approx([0.999, -0.999])


def test_adam_zero_lr_is_identity():
    p = [np.array([0.3, 0.7])]
    nn.Adam(lr=0.0).step(p, [np.array([1.0, 1.0])])
    assert p[0].tolist() == [0.3, 0.7]


def test_gap_matches_brute_force_mean():
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 5))
    out = nn.GlobalAvgPool().forward(x)
    for n in range(2):
        for c in range(3):
            assert out[n, c] == pytest.approx(sum(x[n, c].ravel()) / 20)


def test_relu_nonnegative():
    y = nn.ReLU().forward(np.random.default_rng(2).normal(size=(10, 10)))
    assert (y >= 0).all()


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    conv = nn.Conv2D(2, 3, 3, 2, rng, np.float64)
    x = rng.normal(size=(1, 2, 7, 9))
    out = conv.forward(x)
    assert out.shape == (1, 3, 3, 4)
    W, b = conv.params["W"], conv.params["b"]
    for o in range(3):
        for i in range(3):
            for j in range(4):
                patch = x[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                assert out[0, o, i, j] == pytest.approx((patch * W[o]).sum() + b[o])


def test_conv_too_small_input():
    with pytest.raises(nn.ShapeError):
        nn.Conv2D(3, 4).forward(np.zeros((1, 3, 2, 5), np.float32))


def test_dense_shape_error():
    with pytest.raises(nn.ShapeError):
        nn.Dense(3, 2).forward(np.zeros((4, 5), np.float32))


def test_backward_before_forward():
    with pytest.raises(RuntimeError):
        nn.Dense(3, 2).backward(np.zeros((1, 2)))


def test_parameter_count_default_model():
    net = BevNetwork(ArchConfig())
    conv = (3 * 9 * 8 + 8) + (8 * 9 * 16 + 16) + (16 * 9 * 32 + 32)
    img = 32 * 128 + 128
    box = (4 * 64 + 64) + (64 * 128 + 128)
    fusion = 256 * 256 + 256
    head_h = (256 * 128 + 128) + (128 * 64 + 64) + (64 * 2 + 2)
    head_v = (256 * 256 + 256) + (256 * 128 + 128) + (128 * 64 + 64) + (64 * 2 + 2)
    assert nn.count_params(net) == conv + img + box + fusion + head_h + head_v


def test_spec_round_trip():
    rng = np.random.default_rng(0)
    net = nn.Sequential([nn.Conv2D(3, 4, rng=rng), nn.ReLU(), nn.GlobalAvgPool(), nn.Dense(4, 2, "xavier", rng)])
    again = nn.build_layer(net.spec())
    assert again.spec() == net.spec()
    with pytest.raises(ValueError):
        nn.build_layer({"kind": "pool"})


def test_checkpoint_round_trip(tmp_path):
    net = BevNetwork(ArchConfig(conv_channels=(2,), image_features=3, box_widths=(4,), fusion_width=5,
                                head_h=(3,), head_v=(3, 3)))
    path = tmp_path / "x.ckpt"
    nn.save_checkpoint(path, {"seed": 1}, nn.param_arrays(net))
    header, arrays = nn.load_checkpoint(path)
    assert header["seed"] == 1
    for a, b in zip(arrays, nn.param_arrays(net)):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)
