import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from networld.codec import BinGrid, ScenarioEncoder, encode_obs, mf_aggregate, mf_masked, symexp, symlog, twohot_decode, twohot_encode


def test_symlog_exact_values():
    assert symlog(0.0) == 0.0
    assert symlog(math.e - 1) == pytest.approx(1.0, rel=1e-15)
    assert symlog(-(math.e ** 2 - 1)) == pytest.approx(-2.0, rel=1e-15)
    assert symexp(symlog(1000.0)) == pytest.approx(1000.0, rel=1e-9)


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_symlog_odd_monotone_contracting(x):
    assert symlog(-x) == -symlog(x)
    assert abs(symlog(x)) <= abs(x)
    assert symlog(x + 1.0) > symlog(x)
    assert symexp(symlog(x)) == pytest.approx(x, rel=1e-9, abs=1e-12)


def test_symlog_torch_matches_numpy():
    x = np.array([-30.0, -0.5, 0.0, 2.0, 900.0])
    assert np.allclose(symlog(torch.tensor(x)).numpy(), symlog(x))


def test_grid_endpoints_and_monotone():
    g = BinGrid(1e3, 1e6, 65)
    assert np.all(np.diff(g.positions) > 0)
    assert g.centers[0] == 1e3 and g.centers[-1] == 1e6
    assert symexp(g.positions[0]) == pytest.approx(1e3, rel=1e-6)
    assert symexp(g.positions[-1]) == pytest.approx(1e6, rel=1e-6)


def test_degenerate_grid_rejected():
    with pytest.raises(ValueError):
        BinGrid(0.0, 1.0, 1)
    with pytest.raises(ValueError):
        BinGrid(1.0, 1.0, 5)


def test_encode_bin_center_is_one_hot():
    g = BinGrid(-10, 10, 5)
    for k in range(5):
        w = twohot_encode(g.centers[k], g)
        assert w[k] == 1.0 and w.sum() == 1.0


def test_encode_symlog_midpoint():
    g = BinGrid(-10, 10, 5)
    v = symexp((g.positions[1] + g.positions[2]) / 2)
    w = twohot_encode(v, g)
    assert w[1] == pytest.approx(0.5) and w[2] == pytest.approx(0.5)


def test_encode_hand_evaluated():
    # positions: ln(11) * (k - 2) / 2; v = 3 -> s = ln 4 between k = 3 and 4
    g = BinGrid(-10, 10, 5)
    w = twohot_encode(3.0, g)
    assert w[3] == pytest.approx(0.8437406947284487, rel=1e-12)
    assert w[4] == pytest.approx(0.15625930527155132, rel=1e-12)
    assert w[[0, 1, 2]].sum() == 0.0


def test_encode_clamps_and_counts():
    g = BinGrid(0, 8, 9)
    w = g.encode(np.array([-3.0, 50.0]))
    assert w[0, 0] == 1.0 and w[1, -1] == 1.0
    assert g.clamped == 2


def test_decode_one_hot_and_symmetry():
    g = BinGrid(-40, 40, 65)
    for k in (0, 10, 32, 64):
        w = np.zeros(65)
        w[k] = 1.0
        assert twohot_decode(w, g) == pytest.approx(g.centers[k], rel=1e-12, abs=1e-12)
    assert twohot_decode(np.ones(65), g) == pytest.approx(0.0, abs=1e-12)


def test_decode_rejects_zero_weights():
    with pytest.raises(ValueError):
        twohot_decode(np.zeros(5), BinGrid(0, 1, 5))


def test_raw_decode_mode_switch():
    g = BinGrid(0, 100, 5, decode_mode="raw")
    w = np.array([0, 0.5, 0.5, 0, 0])
    assert g.decode(w) == pytest.approx((g.centers[1] + g.centers[2]) / 2)


grids = st.builds(
    lambda lo, width, count: BinGrid(lo, lo + width, count),
    st.floats(-1e5, 1e5), st.floats(1e-2, 1e6), st.integers(2, 129),
)


@settings(max_examples=300)
@given(grids, st.floats(0, 1))
def test_twohot_round_trip_and_invariants(grid, frac):
    v = grid.low + frac * (grid.high - grid.low)
    w = grid.encode(v)
    nz = np.flatnonzero(w)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-6
    assert len(nz) <= 2 and (len(nz) < 2 or nz[1] - nz[0] == 1)
    assert grid.decode(w) == pytest.approx(v, rel=1e-6, abs=1e-12)


def test_decode_torch_matches_numpy():
    g = BinGrid(-300, 300, 65)
    p = torch.softmax(torch.randn(4, 65, dtype=torch.float64), -1)
    assert np.allclose(g.decode_torch(p).numpy(), g.decode(p.numpy()))


def test_zero_weight_encoder_ignores_observation():
    enc = ScenarioEncoder(3, latent_dim=4, hidden=8, normalize=False)
    with torch.no_grad():
        for p in enc.net.parameters():
            p.zero_()
        enc.net.layers[-1].bias.copy_(torch.tensor([1.0, 2.0, 3.0, 4.0]))
    a = encode_obs(enc, [[1.0, 2.0, 3.0]])
    b = encode_obs(enc, [[100.0, -5.0, 0.0]])
    assert torch.equal(a, b) and a.tolist() == [[1.0, 2.0, 3.0, 4.0]]


def test_symlog_compresses_demand_scale():
    assert symlog(1000.0) - symlog(10.0) < 4.7
    assert symlog(1000.0) - symlog(10.0) == pytest.approx(math.log(1001) - math.log(11))


def test_encoder_shape_check():
    with pytest.raises(ValueError):
        ScenarioEncoder(3)(torch.zeros(2, 4))


def test_encoder_reconstruction_learns():
    # toy encoder/decoder trained on NS-like observations
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    obs = torch.tensor(np.exp(rng.uniform(np.log(20), np.log(900), size=(512, 3))), dtype=torch.float32)
    enc = ScenarioEncoder(3, latent_dim=8, hidden=64)
    opt = torch.optim.Adam(enc.parameters(), lr=3e-3)
    for _ in range(600):
        opt.zero_grad()
        loss = enc.reconstruction_loss(enc(obs), obs)
        loss.backward()
        opt.step()
    with torch.no_grad():
        rel = ((enc.reconstruct(enc(obs)) - obs).abs() / obs).mean().item()
    assert rel < 0.10


def test_mf_aggregate_examples():
    assert torch.equal(mf_aggregate([[1.0, 2.0]]), torch.tensor([1.0, 2.0]))
    assert mf_aggregate([[1.0], [3.0]]).item() == 2.0
    assert torch.equal(mf_aggregate(torch.zeros(0, 3)), torch.zeros(3))
    with pytest.raises(ValueError):
        mf_aggregate(torch.zeros(3))


@given(st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=1, max_size=6), st.randoms())
def test_mf_permutation_invariant_and_idempotent(rows, rnd):
    x = torch.tensor(rows, dtype=torch.float64)
    perm = list(range(len(rows)))
    rnd.shuffle(perm)
    assert torch.allclose(mf_aggregate(x), mf_aggregate(x[perm]), rtol=1e-12, atol=1e-12)
    same = x[:1].repeat(len(rows), 1)
    assert torch.allclose(mf_aggregate(same), x[0], rtol=1e-12)


def test_mf_masked_matches_list_form():
    z = torch.randn(2, 4, 3, dtype=torch.float64)
    mask = torch.tensor([[0, 1, 0, 1], [0, 0, 0, 0]])
    mean, flag = mf_masked(z, mask)
    assert torch.allclose(mean[0], mf_aggregate(z[0, [1, 3]]))
    assert torch.equal(mean[1], torch.zeros(3, dtype=torch.float64))
    assert flag.flatten().tolist() == [1.0, 0.0]
