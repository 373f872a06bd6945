"""Tensor op layer: convolution semantics, LSTM cell, layer norm, Adam,
finite-difference gradient agreement, and the checkpoint container."""

import math

import numpy as np
import pytest
import torch

from subaec import nnops
from subaec.errors import ConfigurationError, TrainingError


def gen(seed):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def test_conv2d_one_by_one_identity():
    g = gen(0)
    x = torch.randn(2, 3, 4, 5, generator=g)
    w = torch.zeros(3, 3, 1, 1)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = nnops.conv2d(x, w)
    assert torch.allclose(out, x)


def test_conv2d_ones_kernel_sums_input():
    x = torch.arange(4.0).reshape(1, 1, 2, 2)
    w = torch.ones(1, 1, 2, 2)
    out = nnops.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == pytest.approx(6.0)


def test_conv2d_explicit_padding_is_causal_capable():
    # history-only padding: last output frame sees only current and past input
    x = torch.zeros(1, 1, 6, 4)
    x[0, 0, 3] = 1.0
    w = torch.ones(1, 1, 2, 1)
    out = nnops.conv2d(x, w, padding=(1, 0, 0, 0))
    assert out.shape[2] == 6
    # impulse at frame 3 influences frames 3 and 4 only
    assert out[0, 0, :, 0].tolist() == [0, 0, 0, 1, 1, 0]


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_gradients_match_finite_differences(seed):
    g = gen(seed)
    strides = [(1, 1), (1, 2), (2, 1)]
    dilations = [(1, 1), (2, 2), (2, 1)]
    stride = strides[seed % 3]
    dilation = dilations[seed % 3]
    x = torch.randn(1, 2, 5, 6, generator=g)
    w = torch.randn(3, 2, 2, 3, generator=g)
    b = torch.randn(3, generator=g)
    err = nnops.finite_difference_check(
        lambda ts: nnops.conv2d(
            ts[0], ts[1], ts[2], stride=stride, dilation=dilation,
            padding=(2, 0, 1, 1)).pow(2).sum(),
        [x, w, b])
    assert err < 1e-4


def test_conv_transpose_identity():
    g = gen(1)
    x = torch.randn(1, 2, 3, 4, generator=g)
    w = torch.zeros(2, 2, 1, 1)
    w[0, 0] = 1.0
    w[1, 1] = 1.0
    out = nnops.conv_transpose2d(x, w)
    assert torch.allclose(out, x)


def test_conv_transpose_is_adjoint_of_conv():
    g = gen(2)
    x = torch.randn(1, 2, 6, 8, generator=g, dtype=torch.float64)
    w = torch.randn(3, 2, 2, 3, generator=g, dtype=torch.float64)
    y = torch.randn(1, 3, 5, 3, generator=g, dtype=torch.float64)
    stride = (1, 2)
    fwd = nnops.conv2d(x, w, stride=stride)
    assert fwd.shape == y.shape
    back = nnops.conv_transpose2d(y, w, stride=stride)
    lhs = (fwd * y).sum().item()
    rhs = (x[..., : back.shape[2], : back.shape[3]] * back).sum().item()
    assert abs(lhs - rhs) / abs(lhs) < 1e-9


def test_conv_transpose_doubles_frequency():
    g = gen(3)
    x = torch.randn(1, 4, 7, 16, generator=g)
    w = torch.randn(4, 2, 2, 3, generator=g)
    out = nnops.conv_transpose2d(x, w, stride=(1, 2), padding=(0, 1),
                                 output_padding=(0, 1))
    assert out.shape[3] == 32


@pytest.mark.parametrize("seed", range(10))
def test_conv_transpose_gradients(seed):
    g = gen(seed + 100)
    x = torch.randn(1, 3, 4, 5, generator=g)
    w = torch.randn(3, 2, 2, 3, generator=g)
    b = torch.randn(2, generator=g)
    err = nnops.finite_difference_check(
        lambda ts: nnops.conv_transpose2d(
            ts[0], ts[1], ts[2], stride=(1, 2)).pow(2).sum(),
        [x, w, b])
    assert err < 1e-4


def test_lstm_zero_weights_give_zero_output():
    x = torch.randn(3, 2, generator=gen(4))
    h = torch.zeros(3, 5)
    c = torch.zeros(3, 5)
    zeros_ih = torch.zeros(20, 2)
    zeros_hh = torch.zeros(20, 5)
    bias = torch.zeros(20)
    h2, c2 = nnops.lstm_step(x, h, c, zeros_ih, zeros_hh, bias, bias)
    assert torch.all(h2 == 0.0)
    assert torch.all(c2 == 0.0)


def test_lstm_step_matches_hand_evaluation():
    # scalar cell: every gate evaluated with explicit sigmoid/tanh arithmetic
    w_ih = torch.tensor([[0.5], [-0.3], [0.8], [0.2]])
    w_hh = torch.tensor([[0.1], [0.4], [-0.2], [0.3]])
    b_ih = torch.tensor([0.05, -0.05, 0.1, 0.0])
    b_hh = torch.zeros(4)
    x = torch.tensor([[0.7]])
    h = torch.tensor([[0.2]])
    c = torch.tensor([[-0.1]])

    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    i = sig(0.5 * 0.7 + 0.1 * 0.2 + 0.05)
    f = sig(-0.3 * 0.7 + 0.4 * 0.2 - 0.05)
    g = math.tanh(0.8 * 0.7 - 0.2 * 0.2 + 0.1)
    o = sig(0.2 * 0.7 + 0.3 * 0.2)
    c_next = f * -0.1 + i * g
    h_next = o * math.tanh(c_next)

    h2, c2 = nnops.lstm_step(x, h, c, w_ih, w_hh, b_ih, b_hh)
    assert h2.item() == pytest.approx(h_next, rel=1e-6)
    assert c2.item() == pytest.approx(c_next, rel=1e-6)


def test_lstm_seq_state_carry_matches_full_run():
    g = gen(5)
    x = torch.randn(2, 8, 3, generator=g)
    w_ih, w_hh, b_ih, b_hh = nnops.lstm_weight_init(3, 4, g)
    full, _ = nnops.lstm_seq(x, w_ih, w_hh, b_ih, b_hh)
    first, state = nnops.lstm_seq(x[:, :5], w_ih, w_hh, b_ih, b_hh)
    second, _ = nnops.lstm_seq(x[:, 5:], w_ih, w_hh, b_ih, b_hh, state=state)
    assert torch.allclose(torch.cat([first, second], dim=1), full, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_lstm_gradients_through_sequence(seed):
    g = gen(seed + 200)
    x = torch.randn(2, 5, 3, generator=g)
    w_ih = torch.randn(16, 3, generator=g) * 0.4
    w_hh = torch.randn(16, 4, generator=g) * 0.4
    b_ih = torch.randn(16, generator=g) * 0.1
    b_hh = torch.randn(16, generator=g) * 0.1
    err = nnops.finite_difference_check(
        lambda ts: nnops.lstm_seq(ts[0], ts[1], ts[2], ts[3], ts[4])[0]
        .pow(2).sum(),
        [x, w_ih, w_hh, b_ih, b_hh])
    assert err < 1e-4


def test_layer_norm_zero_mean_unit_variance():
    g = gen(6)
    x = torch.randn(2, 3, 4, 5, generator=g, dtype=torch.float64)
    gamma = torch.ones(1, 3, 1, 5, dtype=torch.float64)
    beta = torch.zeros(1, 3, 1, 5, dtype=torch.float64)
    out = nnops.layer_norm(x, (1, 3), gamma, beta, eps=0.0)
    mean = out.mean(dim=(1, 3))
    var = out.var(dim=(1, 3), unbiased=False)
    assert mean.abs().max() < 1e-9
    assert (var - 1).abs().max() < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_layer_norm_gradients(seed):
    g = gen(seed + 300)
    x = torch.randn(2, 3, 2, 4, generator=g)
    gamma = torch.randn(1, 3, 1, 4, generator=g)
    beta = torch.randn(1, 3, 1, 4, generator=g)
    err = nnops.finite_difference_check(
        lambda ts: nnops.layer_norm(ts[0], (1, 3), ts[1], ts[2])
        .pow(2).sum(),
        [x, gamma, beta])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_cf_matches_general(seed):
    g = gen(seed + 320)
    x = torch.randn(3, 5, 4, 6, generator=g, dtype=torch.float64)
    gamma = torch.randn(1, 5, 1, 6, generator=g, dtype=torch.float64)
    beta = torch.randn(1, 5, 1, 6, generator=g, dtype=torch.float64)
    want = nnops.layer_norm(x, (1, 3), gamma, beta)
    for variant in (x, x.contiguous(memory_format=torch.channels_last)):
        got = nnops.layer_norm_cf(variant, gamma, beta)
        assert (got - want).abs().max().item() < 1e-12


def test_layer_norm_cf_gradients():
    g = gen(330)
    x = torch.randn(2, 3, 2, 4, generator=g)
    gamma = torch.randn(1, 3, 1, 4, generator=g)
    beta = torch.randn(1, 3, 1, 4, generator=g)
    err = nnops.finite_difference_check(
        lambda ts: nnops.layer_norm_cf(ts[0], ts[1], ts[2]).pow(2).sum(),
        [x, gamma, beta])
    assert err < 1e-4


def test_layer_norm_c_matches_general():
    g = gen(340)
    x = torch.randn(3, 5, 4, 6, generator=g, dtype=torch.float64)
    gamma = torch.randn(1, 5, 1, 1, generator=g, dtype=torch.float64)
    beta = torch.randn(1, 5, 1, 1, generator=g, dtype=torch.float64)
    want = nnops.layer_norm(x, (1,), gamma, beta)
    got = nnops.layer_norm_c(x, gamma, beta)
    assert (got - want).abs().max().item() < 1e-12


def test_layer_norm_c_is_local_per_position():
    # channel-only statistics: perturbing one (t, f) site leaves every other
    # site's output bit-identical
    g = gen(341)
    x = torch.randn(1, 6, 3, 4, generator=g, dtype=torch.float64)
    gamma = torch.ones(1, 6, 1, 1, dtype=torch.float64)
    beta = torch.zeros(1, 6, 1, 1, dtype=torch.float64)
    base = nnops.layer_norm_c(x, gamma, beta)
    xp = x.clone()
    xp[0, :, 1, 2] += 1.0
    out = nnops.layer_norm_c(xp, gamma, beta)
    mask = torch.ones_like(base, dtype=torch.bool)
    mask[0, :, 1, 2] = False
    assert torch.equal(base[mask], out[mask])
    assert not torch.equal(base[0, :, 1, 2], out[0, :, 1, 2])


def test_sigmoid_of_zero():
    assert nnops.sigmoid(torch.zeros(1)).item() == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(10))
def test_elementwise_chain_gradients(seed):
    g = gen(seed + 400)
    x = torch.randn(2, 6, generator=g)
    slope = torch.rand(1, generator=g) * 0.5

    def chain(ts):
        xx, sl = ts
        y = nnops.add(nnops.sigmoid(xx), nnops.tanh(xx))
        z = nnops.mul(y, nnops.prelu(xx, sl))
        c = nnops.concat([z, y], dim=1)
        a, b = nnops.split(c, 6, dim=1)
        padded = nnops.pad(a, (1, 1))
        r = padded.reshape(4, 4).transpose(0, 1)
        return r.pow(2).sum() + b.sum()

    err = nnops.finite_difference_check(chain, [x, slope])
    assert err < 1e-4


def test_adjoint_linearity():
    g = gen(7)
    x = torch.randn(3, 4, generator=g, dtype=torch.float64, requires_grad=True)
    f = torch.sigmoid(x).sum()
    (gf,) = torch.autograd.grad(f, x)
    h = (x * x).sum()
    (gh,) = torch.autograd.grad(h, x)
    combined = torch.sigmoid(x).sum() + (x * x).sum()
    (gc,) = torch.autograd.grad(combined, x)
    assert torch.allclose(gc, gf + gh, atol=1e-12)


def test_second_backward_without_reforward_rejected():
    x = torch.randn(3, requires_grad=True)
    y = (x * x).sum()
    y.backward()
    with pytest.raises(RuntimeError):
        y.backward()


def test_adam_zero_gradient_keeps_params():
    p = torch.tensor([1.0, -2.0], requires_grad=True)
    opt = nnops.Adam({"p": p}, lr=0.1)
    p.grad = torch.zeros(2)
    opt.step()
    assert torch.allclose(p, torch.tensor([1.0, -2.0]))


def test_adam_single_step_hand_value():
    p = torch.tensor([1.0], requires_grad=True)
    opt = nnops.Adam({"p": p}, lr=0.1)
    (p**2).sum().backward()
    opt.step()
    # m-hat = 2, v-hat = 4: update = 0.1 * 2 / (2 + 1e-8)
    assert p.item() == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-6)


def test_adam_converges_on_quadratic():
    p = torch.tensor([1.0], requires_grad=True)
    opt = nnops.Adam({"p": p}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        (p**2).sum().backward()
        opt.step()
    assert abs(p.item()) < 1e-2


def test_adam_rejects_nan_gradient():
    p = torch.tensor([1.0], requires_grad=True)
    opt = nnops.Adam({"p": p}, lr=0.1)
    p.grad = torch.tensor([float("nan")])
    with pytest.raises(TrainingError):
        opt.step()
    assert p.item() == 1.0


def test_adam_rejects_bad_lr():
    with pytest.raises(ConfigurationError):
        nnops.Adam({}, lr=-1e-4)


def test_adam_zero_lr_leaves_params_unchanged():
    p = torch.tensor([1.5, -2.0, 0.0], requires_grad=True)
    opt = nnops.Adam({"p": p}, lr=0.0)
    for _ in range(3):
        (p * p).sum().backward()
        opt.step()
        opt.zero_grad()
    assert torch.equal(p.detach(), torch.tensor([1.5, -2.0, 0.0]))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    g = gen(8)
    params = {
        "encoder.w": torch.randn(3, 2, 2, 3, generator=g),
        "encoder.b": torch.randn(3, generator=g),
        "lstm.w_hh": torch.randn(16, 4, generator=g),
        "scalar.slope": torch.randn(1, generator=g),
    }
    extra = {"bands": 4, "hidden": 80, "lr": 1e-4}
    path = tmp_path / "model.ckpt"
    nnops.save_checkpoint(path, params, extra)
    loaded, meta = nnops.load_checkpoint(path)
    assert meta == extra
    assert set(loaded) == set(params)
    for name in params:
        a = params[name].detach().numpy().view(np.uint32)
        b = loaded[name].numpy().view(np.uint32)
        assert np.array_equal(a, b), name
        assert loaded[name].shape == params[name].shape


def test_checkpoint_without_sidecar(tmp_path):
    path = tmp_path / "bare.ckpt"
    nnops.save_checkpoint(path, {"w": torch.ones(2, 2)})
    loaded, meta = nnops.load_checkpoint(path)
    assert meta == {}
    assert torch.equal(loaded["w"], torch.ones(2, 2))


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTAMODEL" + b"\x00" * 64)
    with pytest.raises(ConfigurationError):
        nnops.load_checkpoint(path)


def test_lstm_weight_init_orthogonal_recurrent():
    g = gen(9)
    w_ih, w_hh, b_ih, b_hh = nnops.lstm_weight_init(6, 5, g)
    assert w_ih.shape == (20, 6)
    assert w_hh.shape == (20, 5)
    assert not b_ih.any() and not b_hh.any()
    for k in range(4):
        block = w_hh[k * 5 : (k + 1) * 5]
        assert torch.allclose(block.T @ block, torch.eye(5), atol=1e-5)


def test_kaiming_conv_init_scale():
    g = gen(10)
    w = nnops.kaiming_conv_init((8, 4, 2, 3), g)
    bound = math.sqrt(6.0 / (4 * 2 * 3))
    assert w.shape == (8, 4, 2, 3)
    assert w.abs().max() <= bound
    assert w.abs().max() > 0.5 * bound
