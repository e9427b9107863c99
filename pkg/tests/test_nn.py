import math

import numpy as np
import pytest
import torch
from torch import nn

from networld.codec import ScenarioEncoder, symlog
from networld.nn import (MLP, Adam, SinusoidalEmbedding, check_shape, count_parameters, dense, grad_check,
                         load_checkpoint, load_into, save_checkpoint)
from networld.worldmodel import LEVELS, TemporalUNet


def silu(x):
    return x / (1 + math.exp(-x))


def test_zero_dense_outputs_bias():
    layer = dense(3, 2, zero=True)
    with torch.no_grad():
        layer.bias.copy_(torch.tensor([0.5, -1.0]))
    out = layer(torch.randn(7, 3))
    assert torch.equal(out, torch.tensor([[0.5, -1.0]]).expand(7, 2))


def test_identity_dense():
    layer = dense(4, 4, zero=True)
    with torch.no_grad():
        layer.weight.copy_(torch.eye(4))
    v = torch.tensor([1.0, -2.0, 3.5, 0.25])
    assert torch.equal(layer(v), v)


def test_two_layer_mlp_by_hand():
    mlp = MLP([2, 2, 1]).double()
    w1, b1 = [[0.5, -1.0], [2.0, 0.25]], [0.1, -0.2]
    w2, b2 = [[1.5, -0.5]], [0.3]
    with torch.no_grad():
        mlp.layers[0].weight.copy_(torch.tensor(w1, dtype=torch.float64))
        mlp.layers[0].bias.copy_(torch.tensor(b1, dtype=torch.float64))
        mlp.layers[2].weight.copy_(torch.tensor(w2, dtype=torch.float64))
        mlp.layers[2].bias.copy_(torch.tensor(b2, dtype=torch.float64))
    x = [1.0, 2.0]
    h = [silu(sum(w * xi for w, xi in zip(row, x)) + b) for row, b in zip(w1, b1)]
    expected = sum(w * hi for w, hi in zip(w2[0], h)) + b2[0]
    assert mlp(torch.tensor(x, dtype=torch.float64)).item() == pytest.approx(expected, rel=1e-12)


def test_shape_mismatch_is_reported():
    with pytest.raises(ValueError, match="expected shape"):
        MLP([3, 4, 1])(torch.randn(5, 2))
    with pytest.raises(ValueError):
        check_shape(torch.zeros(2, 3), (2, 4), "thing")
    check_shape(torch.zeros(5, 2, 3), (..., 3))


def test_forward_is_deterministic():
    torch.manual_seed(0)
    net = TemporalUNet(9, hidden=(8, 8, 16, 16))
    nn.init.normal_(net.out.weight)
    x = torch.randn(3, 16, 9)
    assert torch.equal(net(x, 4, 1), net(x, 4, 1))


def test_grad_check_linear_squared_loss():
    torch.manual_seed(1)
    layer = dense(4, 3)
    x = torch.randn(5, 4)
    err = grad_check(layer, lambda m, x: (m(x) ** 2).sum(), x, probes=None)
    assert err < 1e-6


def test_grad_check_three_layer_mlp():
    torch.manual_seed(2)
    mlp = MLP([3, 8, 8, 2])
    x = torch.randn(6, 3)
    target = torch.randn(6, 2)
    err = grad_check(mlp, lambda m, x: ((m(x) - target.double()) ** 2).mean(), x, probes=None)
    assert err < 1e-4


def test_grad_check_away_from_kink():
    # symlog has a kink at 0; inputs are kept away from it
    torch.manual_seed(3)
    enc = ScenarioEncoder(3, latent_dim=8, hidden=16).eval()  # batch statistics would couple the rows
    x = torch.tensor([[2.0, -5.0, 40.0], [0.7, 300.0, -1.5]])
    err = grad_check(enc, lambda m, x: (m(x) * torch.arange(8.0, dtype=torch.float64)).sum(), x, probes=None)
    assert err < 1e-4


class _WrongSquare(torch.autograd.Function):
    # backward is off by 1%
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.02 * x


def test_grad_check_catches_a_wrong_backward():
    layer = dense(3, 2)
    x = torch.tensor([[0.5, -1.0, 2.0]])
    err = grad_check(layer, lambda m, x: _WrongSquare.apply(m(x)).sum(), x, probes=None)
    assert err == pytest.approx(0.02 / 4.02, rel=1e-3)


def test_grad_check_accepts_exactly_zero_gradients():
    # the bias before a normalisation has zero gradient; finite differences give round-off only
    net = nn.Sequential(dense(3, 4), nn.LayerNorm(4, elementwise_affine=False))
    x = torch.tensor([[1.0, -2.0, 0.5], [0.3, 0.1, -1.0]])
    assert grad_check(net, lambda m, x: (m(x) * torch.arange(4.0, dtype=x.dtype)).sum() * 30, x, probes=None) < 1e-6


def test_grad_check_rejects_nonfinite_loss():
    with pytest.raises(ValueError, match="not finite"):
        grad_check(dense(2, 1), lambda m, x: m(x).sum() / 0.0, torch.ones(1, 2))


def test_adam_zero_gradient_leaves_parameters():
    p = nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = Adam([p], lr=1e-2)
    p.grad = torch.zeros(2)
    assert opt.step()
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0]))


def test_adam_first_step_is_lr_times_sign():
    lr = 3e-4
    g = torch.tensor([0.5, -2.0, 1e-3], dtype=torch.float64)
    p = nn.Parameter(torch.zeros(3, dtype=torch.float64))
    opt = Adam([p], lr=lr)
    p.grad = g.clone()
    opt.step()
    # bias-corrected moments equal g and g^2 on the first step
    expected = [-lr * gi / (abs(gi) + 1e-8) for gi in g.tolist()]
    assert p.detach().tolist() == pytest.approx(expected, rel=1e-9)
    assert np.allclose(p.detach().numpy(), -lr * np.sign(g.numpy()), rtol=1e-4)


def test_adam_constant_gradient_moves_monotonically():
    p = nn.Parameter(torch.tensor([0.0]))
    opt = Adam([p], lr=1e-2)
    seen = [0.0]
    for _ in range(50):
        p.grad = torch.tensor([3.0])
        opt.step()
        seen.append(p.item())
    assert all(b < a for a, b in zip(seen, seen[1:]))
    assert opt.steps == 50


def test_adam_skips_nonfinite():
    p = nn.Parameter(torch.tensor([1.0]))
    opt = Adam([p], lr=0.1)
    p.grad = torch.tensor([float("nan")])
    assert not opt.step()
    assert opt.skipped == 1 and opt.steps == 0
    assert p.item() == 1.0


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(4)
    net = MLP([3, 5, 2])
    save_checkpoint(tmp_path / "m.ckpt", net)
    raw = (tmp_path / "m.ckpt").read_bytes()
    header = raw[: raw.find(b"\n\n")].decode().splitlines()
    assert header[0] == "networld-checkpoint 1"
    assert header[2].split() == ["layers.0.weight", "5,3", "0"]
    other = MLP([3, 5, 2])
    load_into(other, tmp_path / "m.ckpt")
    for a, b in zip(net.parameters(), other.parameters()):
        assert torch.equal(a, b)


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", MLP([3, 5, 2]))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "bad2.ckpt").write_bytes(b"garbage\n\n")
    with pytest.raises(ValueError, match="not a networld checkpoint"):
        load_checkpoint(tmp_path / "bad2.ckpt")


def test_sinusoidal_embedding_shape():
    emb = SinusoidalEmbedding(8)(torch.tensor([1, 50]))
    assert emb.shape == (2, 8)
    assert emb[0, 0].item() == pytest.approx(math.sin(1.0))


def _block_params(c_in, c_out, emb, k=5):
    n = c_in * c_out * k + c_out  # conv1
    n += 2 * c_out  # groupnorm
    n += emb * c_out + c_out  # conditioning projection
    n += c_out * c_out * k + c_out + 2 * c_out  # conv2 + norm
    if c_in != c_out:
        n += c_in * c_out + c_out
    return n


def test_default_unet_parameter_count():
    c, hidden, k = 65, (32, 64, 64, 64), 5
    time_dim, task_dim, tasks = 32, 16, 16
    emb = time_dim + task_dim
    expected = (time_dim * 2 * time_dim + 2 * time_dim) + (2 * time_dim * time_dim + time_dim) + tasks * task_dim
    dims = [c, *hidden]
    for a, b in zip(dims[:-1], dims[1:]):
        expected += _block_params(a, b, emb) + (b * b * 3 + b)  # block + stride-2 conv
    for i in reversed(range(LEVELS)):
        h = hidden[i]
        out = hidden[i - 1] if i > 0 else hidden[0]
        expected += h * h * 4 + h  # transposed conv
        expected += _block_params(2 * h, out, emb)
    expected += hidden[0] * c + c
    net = TemporalUNet(c, hidden, k)
    assert count_parameters(net) == expected
    n_blocks = sum(1 for m in net.modules() if type(m).__name__ == "ResidualTemporalBlock")
    assert n_blocks == 8
