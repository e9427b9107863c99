import math

import numpy as np
import pytest
import torch

from networld import envs
from networld.codec import BinGrid, ScenarioEncoder, symlog
from networld.dataset import generate
from networld.invdyn import InverseDynamics, infer_action, invdyn_loss


def _zeroed(idm):
    with torch.no_grad():
        for p in idm.net.parameters():
            p.zero_()
    return idm


def test_one_hot_logits_decode_to_value():
    idm = _zeroed(InverseDynamics.for_task(envs.make_task("rb"), latent_dim=4))
    k = int(np.argmin(np.abs(idm.grids[0].centers - 3.0)))
    with torch.no_grad():
        idm.net.layers[-1].bias[k] = 80.0
    z = torch.zeros(2, 4)
    assert infer_action(idm, z, z)[:, 0].tolist() == [3.0, 3.0]


def test_symmetric_logits_decode_to_zero():
    cont = _zeroed(InverseDynamics(4, [BinGrid(-40, 40, 65)] * 2))
    disc = _zeroed(InverseDynamics(4, [BinGrid(-8, 8, 65)], discrete=True))
    z = torch.randn(3, 4)
    assert np.allclose(infer_action(cont, z, z), 0.0, atol=1e-12)
    assert infer_action(disc, z, z).tolist() == [[0.0]] * 3


def test_decoded_actions_stay_in_range():
    for name in ("cbf", "rb", "ns"):
        spec = envs.make_task(name)
        torch.manual_seed(0)
        idm = InverseDynamics.for_task(spec, latent_dim=8)
        with torch.no_grad():
            idm.net.layers[-1].weight.mul_(100)
        a = infer_action(idm, torch.randn(50, 8), torch.randn(50, 8))
        assert np.all(a >= np.array(spec.action_low)) and np.all(a <= np.array(spec.action_high))
        if spec.action_kind == envs.DISCRETE:
            assert np.array_equal(a, np.rint(a))


def test_uniform_logits_loss():
    idm = _zeroed(InverseDynamics.for_task(envs.make_task("cbf"), latent_dim=4))
    loss = invdyn_loss(idm, torch.zeros(5, 4), torch.zeros(5, 4), np.zeros((5, 4))).item()
    assert loss == pytest.approx(4 * math.log(65), rel=1e-6)


def test_perfect_prediction_loss_is_target_entropy():
    grid = BinGrid(0, 8, 9)
    idm = _zeroed(InverseDynamics(2, [grid]))
    target = grid.encode(2.5)
    with torch.no_grad():
        idm.net.layers[-1].bias.copy_(torch.log(torch.as_tensor(target, dtype=torch.float32) + 1e-30))
    loss = invdyn_loss(idm, torch.zeros(3, 2), torch.zeros(3, 2), [[2.5]] * 3).item()
    entropy = -sum(p * math.log(p) for p in target if p > 0)
    assert loss == pytest.approx(entropy, abs=1e-5)


def test_shape_errors():
    idm = InverseDynamics.for_task(envs.make_task("ns"), latent_dim=4)
    with pytest.raises(ValueError):
        idm(torch.zeros(2, 5), torch.zeros(2, 4))
    assert idm(torch.zeros(7, 4), torch.zeros(7, 4)).shape == (7, 1, 65)


def test_identity_dynamics_oracle():
    # a = z_next - z_t on a scalar latent
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    grid = BinGrid(-4, 4, 65)
    idm = InverseDynamics(1, [grid], hidden=64)
    opt = torch.optim.Adam(idm.parameters(), lr=2e-3)
    for _ in range(1500):
        z = torch.as_tensor(rng.uniform(-2, 2, (128, 1)), dtype=torch.float32)
        a = torch.as_tensor(rng.uniform(-4, 4, (128, 1)), dtype=torch.float32)
        opt.zero_grad()
        invdyn_loss(idm, z, z + a, a).backward()
        opt.step()
    z = torch.as_tensor(rng.uniform(-2, 2, (500, 1)), dtype=torch.float32)
    a = rng.uniform(-4, 4, (500, 1))
    pred = infer_action(idm, z, z + torch.as_tensor(a, dtype=torch.float32))
    err = np.abs(symlog(pred) - symlog(a)).mean()
    assert err < grid.bin_width


def test_rb_expert_transitions_are_recoverable():
    spec = envs.make_task("rb", episode_length=200)
    train = generate(spec, "expert", 8, seed=0)
    held = generate(spec, "expert", 2, seed=1)

    def pairs(store):
        obs = np.concatenate([e.obs for e in store.episodes])  # [T, N, o]
        act = np.concatenate([e.actions for e in store.episodes])
        keep = np.concatenate([np.arange(e.length) < e.length - 1 for e in store.episodes])
        nxt = np.concatenate([np.roll(e.obs, -1, axis=0) for e in store.episodes])
        return (torch.as_tensor(obs[keep].reshape(-1, 3)), torch.as_tensor(nxt[keep].reshape(-1, 3)),
                act[keep].reshape(-1, 1))

    o, o2, a = pairs(train)
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    enc = ScenarioEncoder(3, latent_dim=16, hidden=64)
    idm = InverseDynamics.for_task(spec, latent_dim=16, hidden=128)
    opt = torch.optim.Adam([*enc.parameters(), *idm.parameters()], lr=2e-3)
    for _ in range(800):
        idx = rng.integers(len(a), size=256)
        opt.zero_grad()
        z, z2 = enc(o[idx]), enc(o2[idx])
        loss = enc.reconstruction_loss(z, o[idx]) + invdyn_loss(idm, z.detach(), z2.detach(), a[idx])
        loss.backward()
        opt.step()
    enc.eval()
    ho, ho2, ha = pairs(held)
    with torch.no_grad():
        pred = infer_action(idm, enc(ho), enc(ho2))
    assert (pred == ha).mean() >= 0.8
