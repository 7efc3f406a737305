import numpy as np
import pytest
import torch

from oracles import conv3x3_same
from semcd.models import (
    FCEFRes,
    ResidualBlock,
    build_fc_ef_res,
    build_integrated,
    build_lcm_branch,
    count_parameters,
    describe,
    rebuild,
)

torch.manual_seed(0)


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed))


def test_fc_ef_res_widths_and_shape():
    net = build_fc_ef_res(3, 2, depth=4, blocks_per_level=1, base_width=16).eval()
    assert net.widths == [16, 32, 64, 128]
    out = net(_rand(1, 3, 32, 32), _rand(1, 3, 32, 32, seed=1))
    assert out["change"].shape == (1, 2, 32, 32)
    assert net.encoder.levels[0][0][0].in_channels == 6  # early fusion
    with pytest.raises(ValueError, match="divisible"):
        net(_rand(1, 3, 24, 24), _rand(1, 3, 24, 24))
    with pytest.raises(ValueError):
        build_fc_ef_res(3, 2, depth=1)


@pytest.mark.slow
def test_full_size_shape_contract():
    net = build_fc_ef_res(3, 21, depth=4, base_width=4).eval()
    with torch.no_grad():
        out = net(torch.zeros(1, 3, 512, 512), torch.zeros(1, 3, 512, 512))
    assert out["change"].shape == (1, 21, 512, 512)


def test_lcm_branch_taps():
    net = build_lcm_branch(3, 6, depth=3, base_width=4).eval()
    x = _rand(2, 3, 16, 16)
    scores, taps = net.branch(x)
    assert scores.shape == (2, 6, 16, 16)
    assert len(taps) == 3
    assert [t.shape[1] for t in taps] == [4, 8, 16]
    _, taps2 = net.branch(x.clone())
    assert all(torch.equal(a, b) for a, b in zip(taps, taps2))


def test_residual_block_identity_when_zeroed():
    block = ResidualBlock(4, batch_norm=False)
    for p in block.body.parameters():
        torch.nn.init.zeros_(p)
    x = torch.relu(_rand(2, 4, 8, 8))
    assert torch.equal(block(x), x)


def test_zero_residuals_equal_skeleton():
    full = build_fc_ef_res(2, 3, depth=2, blocks_per_level=2, base_width=4, batch_norm=False).eval()
    skeleton = build_fc_ef_res(2, 3, depth=2, blocks_per_level=0, base_width=4, batch_norm=False).eval()
    # residual blocks are the only modules the skeleton lacks; the rest share names
    skeleton.load_state_dict({k: full.state_dict()[k] for k in skeleton.state_dict()})
    for m in full.modules():
        if isinstance(m, ResidualBlock):
            for p in m.body.parameters():
                torch.nn.init.zeros_(p)
    x1, x2 = _rand(1, 2, 8, 8), _rand(1, 2, 8, 8, seed=1)
    # inputs to residual blocks are post-ReLU, so zeroed blocks are exact identities
    assert torch.allclose(full(x1, x2)["change"], skeleton(x1, x2)["change"], atol=0, rtol=0)


def test_integrated_heads_ties_and_symmetry():
    net = build_integrated(3, 6, depth=2, base_width=4).eval()
    x1, x2 = _rand(2, 3, 8, 8), _rand(2, 3, 8, 8, seed=1)
    out = net(x1, x2)
    assert set(out) == {"lcm1", "lcm2", "change"}
    assert out["change"].shape == (2, 2, 8, 8)
    swapped = net(x2, x1)
    assert torch.equal(out["lcm1"], swapped["lcm2"])
    assert torch.equal(out["lcm2"], swapped["lcm1"])
    same = net(x1, x1, return_taps=True)
    assert all((t == 0).all() for t in same["diff_taps"])
    # one LCM parameter set serves both images
    assert count_parameters(net) < (
        2 * count_parameters(net.lcm) + count_parameters(build_fc_ef_res(3, 2, depth=2, base_width=4))
    )


def test_param_groups_partition():
    net = build_integrated(3, 6, depth=2, base_width=4)
    groups = net.param_groups()
    assert set(groups) == {"Enc_CD", "Dec_CD", "Enc_LCM", "Dec_LCM"}
    ids = [id(p) for ps in groups.values() for _, p in ps]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(p) for p in net.parameters()}


def test_softmax_and_batch_independence():
    net = build_integrated(3, 6, depth=2, base_width=4).eval()
    x1, x2 = _rand(1, 3, 8, 8), _rand(1, 3, 8, 8, seed=1)
    with torch.no_grad():
        one = net(x1, x2)
        two = net(torch.cat([x1, x1 * 2]), torch.cat([x2, x2]))
    for head in one:
        probs = torch.softmax(one[head], dim=1).sum(1)
        assert torch.allclose(probs, torch.ones_like(probs), atol=1e-6)
        assert torch.allclose(one[head][0], two[head][0], atol=1e-6)


def test_hand_computed_one_level_graph():
    net = FCEFRes(1, n_classes=1, depth=1, blocks_per_level=0, base_width=1, batch_norm=False).eval()
    kernel = np.array([[0.0, 1.0, 0.0], [2.0, -1.0, 0.5], [0.0, 0.0, 3.0]])
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        stem = net.encoder.levels[0][0][0]
        stem.weight[0, 0] = torch.tensor(kernel)   # only image1 contributes
        merge = net.decoder.levels[0].merge[0]
        merge.weight[0, 1, 1, 1] = 1.0              # pass the skip through
        net.decoder.head.weight.fill_(1.0)
    x = np.arange(16, dtype=np.float64).reshape(4, 4) - 6
    x1 = torch.tensor(x, dtype=torch.float32)[None, None]
    out = net(x1, torch.zeros_like(x1))["change"][0, 0].detach().numpy()
    expected = np.maximum(conv3x3_same(x, kernel), 0)
    assert np.allclose(out, expected, atol=1e-5)


def test_gradient_topology():
    net = build_integrated(2, 6, depth=2, base_width=4, batch_norm=False).double()
    x1, x2 = _rand(1, 2, 8, 8).double(), _rand(1, 2, 8, 8, seed=1).double()
    out = net(x1, x2)
    groups = net.param_groups()

    def grads(scalar):
        net.zero_grad()
        scalar.backward(retain_graph=True)
        return {g: sum(float(p.grad.abs().sum()) if p.grad is not None else 0.0 for _, p in ps)
                for g, ps in groups.items()}

    g_cd = grads(out["change"].sum())
    assert g_cd["Enc_LCM"] > 0
    g_lcm = grads(out["lcm1"].sum() + out["lcm2"].sum())
    assert g_lcm["Enc_CD"] == 0.0 and g_lcm["Dec_CD"] == 0.0


def test_translation_equivariance_interior():
    net = build_lcm_branch(1, 3, depth=2, base_width=4, batch_norm=False).double().eval()
    x = _rand(1, 1, 96, 96).double()
    shift = 8  # a multiple of 2**depth keeps pooling grids aligned
    with torch.no_grad():
        a = net(x)["lcm1"]
        b = net(torch.roll(x, shifts=shift, dims=3))["lcm1"]
    # compare well beyond the receptive field of the borders and the wrap-around seam
    assert torch.allclose(a[..., 32:64, 32:56], b[..., 32:64, 32 + shift:56 + shift], atol=1e-10)


def test_describe_and_rebuild():
    net = build_integrated(3, 6, depth=2, base_width=4)
    d = describe(net)
    assert d["heads"] == {"lcm1": 6, "lcm2": 6, "change": 2}
    assert d["weight_ties"]
    assert all(layer["group"] in {"Enc_CD", "Dec_CD", "Enc_LCM", "Dec_LCM"} for layer in d["layers"])
    for layer in d["layers"]:
        if layer["kind"] == "residual_block":
            assert layer["in_channels"] == layer["out_channels"]
    twin = rebuild("IntegratedNet", d["arch"])
    assert count_parameters(twin) == d["n_parameters"]
