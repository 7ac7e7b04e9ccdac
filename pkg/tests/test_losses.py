import math

import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.func import functional_call

from lucidppn.losses import (
    LossWeights,
    bce,
    loss_aggregated,
    loss_correspondence,
    loss_shapetex,
    mbce,
    total_loss,
)
from lucidppn.model import BackboneConfig, LucidPPN, Outputs, branch_inputs, fuse, global_max

LN2 = math.log(2)


def test_bce_examples():
    assert bce(0.5, 1.0).item() == pytest.approx(LN2, rel=1e-6)
    assert bce(0.5, 0.0).item() == pytest.approx(LN2, rel=1e-6)
    # clamped at 1e-7
    assert bce(0.0, 1.0).item() == pytest.approx(-math.log(1e-7), rel=1e-5)
    assert bce(torch.tensor(1.0, dtype=torch.float64), 1.0).item() == pytest.approx(1e-7, rel=1e-3)
    assert math.isfinite(bce(1.0, 0.0).item())


@settings(max_examples=80, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(0, 1))
def test_bce_matches_formula(u, v):
    expected = -(v * math.log(u) + (1 - v) * math.log(1 - u))
    got = bce(torch.tensor(u, dtype=torch.float64), v).item()
    assert got == pytest.approx(expected, rel=1e-9, abs=1e-12)
    assert got >= 0


def test_mbce_examples():
    u = torch.full((3, 3), 0.5)
    assert mbce(u, torch.ones(3, 3)).item() == pytest.approx(LN2, rel=1e-6)
    u = torch.tensor([[0.5, 1.0]], dtype=torch.float64)
    v = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
    assert mbce(u, v).item() == pytest.approx((LN2 + 1e-7) / 2, rel=1e-6)
    with pytest.raises(ValueError):
        mbce(torch.zeros(2, 2), torch.zeros(2, 3))


def _masks_from_labels(lab, K):
    return torch.nn.functional.one_hot(lab, K + 1).permute(0, 3, 1, 2).double()


def test_correspondence_perfect_and_half():
    K, M = 2, 3
    lab = torch.tensor([[[0, 1], [2, 2]]])
    masks = _masks_from_labels(lab, K)
    y = torch.tensor([1])
    z = torch.full((1, K, M, 2, 2), 0.5, dtype=torch.float64)
    z[0, :, 1] = masks[0, :K]
    assert loss_correspondence(z, masks, y).item() == pytest.approx(1e-7, rel=1e-3)
    z[0, :, 1] = 0.5
    assert loss_correspondence(z, masks, y).item() == pytest.approx(LN2, rel=1e-9)
    # first part perfect, second at 0.5
    z[0, 0, 1] = masks[0, 0]
    assert loss_correspondence(z, masks, y).item() == pytest.approx((LN2 + 1e-7) / 2, rel=1e-6)


def test_correspondence_ignores_other_classes_and_background():
    g = torch.Generator().manual_seed(0)
    K, M = 3, 4
    z = torch.rand(2, K, M, 4, 4, generator=g, dtype=torch.float64)
    masks = torch.rand(2, K + 1, 4, 4, generator=g, dtype=torch.float64)
    masks = masks / masks.sum(1, keepdim=True)
    y = torch.tensor([2, 0])
    base = loss_correspondence(z, masks, y)
    z2 = z.clone()
    z2[0, :, [0, 1, 3]] = torch.rand(K, 3, 4, 4, generator=g, dtype=torch.float64)
    z2[1, :, 1:] = 0.0
    masks2 = masks.clone()
    masks2[:, K] = 7.0
    assert torch.equal(loss_correspondence(z2, masks2, y), base)


def test_correspondence_requires_model_resolution():
    with pytest.raises(ValueError, match="resized"):
        loss_correspondence(torch.zeros(1, 2, 2, 4, 4), torch.zeros(1, 3, 8, 8),
                            torch.tensor([0]))


def test_resemblance_losses():
    K, M = 2, 3
    y = torch.tensor([1])
    r = torch.zeros(1, K, M, dtype=torch.float64)
    r[0, :, 1] = 1.0
    assert loss_shapetex(r, y).item() == pytest.approx(1e-7, rel=1e-3)
    assert loss_aggregated(torch.full((1, K, M), 0.5, dtype=torch.float64), y).item() \
        == pytest.approx(LN2, rel=1e-9)
    # mean over all K*M entries, not only the true class
    r = torch.full((1, K, M), 0.5, dtype=torch.float64)
    r[0, :, 0] = 0.0
    assert loss_shapetex(r, y).item() == pytest.approx(LN2 * 4 / 6 + 1e-7 * 2 / 6, rel=1e-6)


def _outputs(z_s, z_c):
    r_s = global_max(z_s)
    z_a, r_a, y_hat = fuse(z_s, z_c)
    return Outputs(z_s, r_s, r_s.mean(1), z_c, global_max(z_c), z_a, r_a, y_hat)


def test_total_loss_at_half_everywhere():
    K, M = 2, 2
    z = torch.full((3, K, M, 2, 2), 0.5, dtype=torch.float64)
    out = _outputs(z, torch.ones_like(z))
    masks = _masks_from_labels(torch.tensor([[[0, 1], [2, 2]]] * 3), K)
    loss = total_loss(out, masks, torch.tensor([0, 1, 1]), LossWeights())
    assert loss.total.item() == pytest.approx(3.4 * LN2, rel=1e-9)
    assert loss.as_floats()["l_d"] == pytest.approx(LN2, rel=1e-9)


def test_total_loss_near_zero_when_perfect():
    K, M = 2, 2
    lab = torch.tensor([[[0, 1], [2, 2]]])
    masks = _masks_from_labels(lab, K)
    z = torch.zeros(1, K, M, 2, 2, dtype=torch.float64)
    z[0, :, 0] = masks[0, :K]
    out = _outputs(z, torch.ones_like(z))
    loss = total_loss(out, masks, torch.tensor([0]), LossWeights())
    assert loss.total.item() < 1e-5


def test_total_loss_independent_of_masks_without_correspondence_weight():
    g = torch.Generator().manual_seed(1)
    z = torch.rand(2, 2, 3, 4, 4, generator=g)
    out = _outputs(z, torch.rand(2, 2, 3, 4, 4, generator=g))
    y = torch.tensor([0, 2])
    w = LossWeights(alpha_d=0.0)
    m1 = torch.softmax(torch.rand(2, 3, 4, 4, generator=g), 1)
    m2 = torch.softmax(torch.rand(2, 3, 4, 4, generator=g), 1)
    assert torch.equal(total_loss(out, m1, y, w).total, total_loss(out, m2, y, w).total)


@pytest.mark.parametrize("bad", [-0.1, float("nan"), float("inf")])
def test_loss_weights_validation(bad):
    with pytest.raises(ValueError):
        LossWeights(alpha_d=bad)


def test_micro_model_gradient_matches_finite_differences():
    """Analytic gradients of the full objective agree with central differences."""
    torch.manual_seed(0)
    model = LucidPPN(2, 2, image_size=32, backbone=BackboneConfig(channels=8),
                     color_widths=(4, 4, 4, 4, 4)).double()
    assert model.feature_size == 4
    g = torch.Generator().manual_seed(0)
    rgb = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    masks = torch.softmax(3 * torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64), 1)
    y = torch.tensor([0, 1])
    names = ["shapetex.proj.weight", "shapetex.proj.bias", "colornet.net.10.bias",
             "colornet.net.0.weight", "shapetex.backbone.body.9.bias"]
    base = {k: v.detach() for k, v in model.named_parameters()}
    inputs_s_c = branch_inputs(rgb, model.feature_size)

    def objective(*tensors):
        p = {**base, **dict(zip(names, tensors))}
        out = functional_call(model, p, inputs_s_c)
        return total_loss(out, masks, y, LossWeights()).total

    inputs = tuple(base[n].clone().requires_grad_(True) for n in names)
    assert torch.autograd.gradcheck(objective, inputs, eps=1e-6, atol=1e-6)

