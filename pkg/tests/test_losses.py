import math

import numpy as np
import pytest
import torch

from oracles import weighted_ce_reference
from semcd.losses import (
    IGNORE_INDEX,
    cd_loss,
    head_losses,
    lcm_loss,
    loss_cd_stage,
    loss_combined,
    loss_lcm_stage,
    weighted_ce,
)


def _scores_from_probs(probs):
    """(P, K) probabilities -> (1, K, 1, P) log-probability scores."""
    p = torch.tensor(probs, dtype=torch.float64)
    return torch.log(p).T[None, :, None, :]


def test_perfect_predictions_zero_loss():
    scores = torch.full((1, 3, 2, 2), -1e4, dtype=torch.float64)
    target = torch.tensor([[[0, 1], [2, 1]]])
    for i in range(2):
        for j in range(2):
            scores[0, target[0, i, j], i, j] = 1e4
    assert float(weighted_ce(scores, target, [1.0, 1.0, 1.0])) == 0.0


def test_uniform_predictions_ln_k():
    k = 5
    scores = torch.zeros((2, k, 3, 3), dtype=torch.float64)
    target = torch.randint(0, k, (2, 3, 3))
    assert float(weighted_ce(scores, target, np.ones(k))) == pytest.approx(math.log(k))


def test_two_pixel_hand_example():
    # p(target) = 0.9 with weight 1, p(target) = 0.6 with weight 2
    probs = [[0.9, 0.1], [0.4, 0.6]]
    target = torch.tensor([[[0, 1]]])
    val = float(weighted_ce(_scores_from_probs(probs), target, [1.0, 2.0]))
    assert val == pytest.approx(-(math.log(0.9) + 2 * math.log(0.6)) / 2, rel=1e-12)
    assert val == pytest.approx(0.5635, abs=1e-4)


def test_matches_reference_with_exclusions():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), size=30)
    targets = rng.integers(-1, 4, 30)
    weights = [0.0, 0.5, 2.0, 1.0]
    got = float(weighted_ce(_scores_from_probs(probs), torch.tensor(targets)[None, None], weights))
    assert got == pytest.approx(weighted_ce_reference(probs, targets, weights), rel=1e-12)


def test_all_excluded_is_undefined(caplog):
    scores = torch.zeros((1, 2, 2, 2))
    target = torch.full((1, 2, 2), IGNORE_INDEX)
    with caplog.at_level("WARNING"):
        assert weighted_ce(scores, target, [1.0, 1.0]) is None
    assert "excluded" in caplog.text
    assert weighted_ce(scores, torch.zeros((1, 2, 2), dtype=torch.long), [0.0, 1.0]) is None


def test_shape_and_range_errors():
    scores = torch.zeros((1, 2, 2, 2))
    with pytest.raises(ValueError):
        weighted_ce(scores, torch.zeros((1, 3, 2), dtype=torch.long), [1, 1])
    with pytest.raises(ValueError):
        weighted_ce(scores, torch.full((1, 2, 2), 2), [1, 1])
    with pytest.raises(ValueError):
        weighted_ce(scores, torch.zeros((1, 2, 2), dtype=torch.long), [1, 1, 1])


def _outputs(seed=0):
    g = torch.Generator().manual_seed(seed)
    out = {h: torch.randn(2, k, 4, 4, generator=g, dtype=torch.float64)
           for h, k in (("lcm1", 6), ("lcm2", 6), ("change", 2))}
    targets = {"lcm1": torch.randint(1, 6, (2, 4, 4), generator=g),
               "lcm2": torch.randint(1, 6, (2, 4, 4), generator=g),
               "change": torch.randint(0, 2, (2, 4, 4), generator=g)}
    weights = {"lcm": np.array([0, 1, 1.5, 0.7, 2, 1.0]), "change": np.array([0.2, 1.8])}
    return out, targets, weights


def test_combined_loss_algebra():
    out, targets, weights = _outputs()
    l_cd = cd_loss(out, targets, weights)
    l_lcm = lcm_loss(out, targets, weights)
    assert torch.equal(loss_combined(out, targets, weights, 0.0), l_cd)
    assert float(loss_combined(out, targets, weights, 0.05)) == pytest.approx(
        float(l_cd) + 0.05 * float(l_lcm), rel=1e-12)
    prev = None
    for lam in (0.0, 0.05, 0.5, 1.0):
        v = float(loss_combined(out, targets, weights, lam))
        assert prev is None or v > prev
        prev = v
    assert torch.equal(loss_lcm_stage(out, targets, weights), l_lcm)
    assert torch.equal(loss_cd_stage(out, targets, weights), l_cd)
    with pytest.raises(ValueError):
        loss_combined(out, targets, weights, -1.0)


def test_direct_substitution(monkeypatch):
    # L_CD = 0.7 and L_LCM1 + L_LCM2 = 1.0 -> 0.75 at lambda 0.05
    import semcd.losses as L

    out, targets, weights = _outputs()
    monkeypatch.setattr(L, "cd_loss", lambda *a: torch.tensor(0.7, dtype=torch.float64))
    monkeypatch.setattr(L, "lcm_loss", lambda *a: torch.tensor(1.0, dtype=torch.float64))
    assert float(L.loss_combined(out, targets, weights, 0.05)) == pytest.approx(0.75)


def test_lcm_gradient_scales_with_lambda():
    from semcd.models import build_integrated

    torch.manual_seed(0)
    net = build_integrated(2, 6, depth=2, base_width=2, batch_norm=False).double()
    g = torch.Generator().manual_seed(3)
    x1 = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    x2 = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    targets = {"lcm1": torch.randint(1, 6, (1, 8, 8), generator=g),
               "lcm2": torch.randint(1, 6, (1, 8, 8), generator=g),
               "change": torch.randint(0, 2, (1, 8, 8), generator=g)}
    weights = {"lcm": np.ones(6), "change": np.ones(2)}

    def dec_lcm_grad(lam):
        net.zero_grad()
        loss_combined(net(x1, x2), targets, weights, lam).backward()
        return torch.cat([p.grad.flatten() for p in net.lcm.decoder.parameters()])

    g1, g2 = dec_lcm_grad(0.05), dec_lcm_grad(0.5)
    assert torch.allclose(g2, 10 * g1, rtol=1e-9, atol=1e-14)


def test_head_losses_keys():
    out, targets, weights = _outputs()
    logs = head_losses(out, targets, weights)
    assert set(logs) == {"lcm1", "lcm2", "change"}
