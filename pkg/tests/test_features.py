import math

import numpy as np
import pytest
import torch

from gdatpred.features import (
    ContextEncoder, FeatureExtractor, RelationEncoder, StateEncoder, leaky, relation_inputs, stack_patches,
    state_inputs,
)
from gdatpred.gradcheck import check_gradients


def test_relation_input_block():
    pos = torch.tensor([[0.0, 0.0], [3.0, 4.0]], dtype=torch.float64)
    r = relation_inputs(pos)
    np.testing.assert_allclose(r[0, 1].numpy(), [3.0, 4.0, 5.0, math.atan2(4, 3)])
    # swapping the pair negates the offset and turns the angle by pi
    np.testing.assert_allclose(r[1, 0, :3].numpy(), [-3.0, -4.0, 5.0])
    d = (r[1, 0, 3] - r[0, 1, 3]).item()
    assert math.isclose(math.remainder(d - math.pi, 2 * math.pi), 0.0, abs_tol=1e-12)


def test_relation_coincident_points_finite():
    pos = torch.zeros(2, 2, dtype=torch.float64, requires_grad=True)
    r = relation_inputs(pos)
    assert (r[0, 1] == 0).all()
    r.sum().backward()
    assert torch.isfinite(pos.grad).all()


def test_relation_features_order_sensitive():
    torch.manual_seed(0)
    enc = RelationEncoder().double()
    pos = torch.tensor([[0.0, 0.0], [2.0, 1.0]], dtype=torch.float64)
    f = enc(pos)
    assert f.shape == (2, 2, 16)
    assert not torch.allclose(f[0, 1], f[1, 0])


def test_state_identical_agents_and_determinism():
    torch.manual_seed(0)
    enc = StateEncoder()
    pos = torch.tensor([[1.0, 2.0], [1.0, 2.0]])
    vel = torch.tensor([[0.5, 0.0], [0.5, 0.0]])
    head = torch.tensor([0.3, 0.3])
    out = enc(pos, vel, head)
    assert out.shape == (2, 64)
    assert torch.equal(out[0], out[1])
    assert torch.equal(out, enc(pos, vel, head))


def test_state_missing_heading_flag():
    x = state_inputs(torch.zeros(2, 2), torch.zeros(2, 2), torch.tensor([float("nan"), 0.0]))
    np.testing.assert_array_equal(x[0, 4:].numpy(), [0, 0, 0])
    np.testing.assert_array_equal(x[1, 4:].numpy(), [1, 0, 1])


def test_non_finite_rejected():
    enc = StateEncoder()
    with pytest.raises(ValueError):
        enc(torch.tensor([[float("inf"), 0.0]]), torch.zeros(1, 2), None)
    with pytest.raises(ValueError):
        ContextEncoder()(torch.full((1, 3, 5, 5), float("nan")))


def test_context_shapes_and_zero_input():
    torch.manual_seed(0)
    enc = ContextEncoder(channels=16)
    for hw in (5, 9, 31):
        assert enc(torch.randn(2, 3, hw, hw)).shape == (2, 16)
    z = enc(torch.zeros(3, 3, 9, 9))
    assert torch.equal(z[0], z[1]) and torch.equal(z[1], z[2])
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 2, 9, 9))
    with pytest.raises(ValueError):
        stack_patches(np.zeros((5, 5, 1)), np.zeros((5, 4, 2)))
    assert stack_patches(np.zeros((5, 5, 1)), np.zeros((5, 5, 2))).shape == (3, 5, 5)


def test_context_translation_equivariance():
    torch.manual_seed(1)
    enc = ContextEncoder().double()
    x = torch.zeros(1, 3, 31, 31, dtype=torch.float64)
    x[0, :, 12:15, 12:16] = torch.randn(3, 3, 4, dtype=torch.float64)
    shifted = torch.roll(x, shifts=1, dims=-1)
    a = enc.feature_maps(x)
    b = enc.feature_maps(shifted)
    # receptive field of five 5x5 layers reaches 10 cells; compare where neither map sees the border
    torch.testing.assert_close(b[..., 11:20, 11:20], a[..., 11:20, 10:19], rtol=0, atol=0)


def test_weight_sharing_permutation():
    torch.manual_seed(2)
    fx = FeatureExtractor(context_channels=4).double()
    b, t, n = 1, 3, 4
    pos = torch.randn(b, t, n, 2, dtype=torch.float64) * 5
    vel = torch.randn(b, t, n, 2, dtype=torch.float64)
    head = torch.randn(b, t, n, dtype=torch.float64)
    patches = torch.randn(b, t, n, 3, 7, 7, dtype=torch.float64)
    mask = torch.ones(b, n, dtype=torch.bool)
    perm = torch.tensor([2, 0, 3, 1])
    f = fx(pos, vel, head, patches, mask)
    g = fx(pos[:, :, perm], vel[:, :, perm], head[:, :, perm], patches[:, :, perm], mask[:, perm])
    assert torch.equal(g.state, f.state[:, :, perm])
    assert torch.equal(g.context, f.context[:, :, perm])
    assert torch.equal(g.relation, f.relation[:, :, perm][:, :, :, perm])


def test_padding_agents_zeroed():
    fx = FeatureExtractor(context_channels=4)
    pos = torch.randn(1, 2, 3, 2)
    mask = torch.tensor([[True, True, False]])
    f = fx(pos, torch.zeros_like(pos), torch.zeros(1, 2, 3), torch.randn(1, 2, 3, 3, 5, 5), mask)
    assert (f.state[:, :, 2] == 0).all() and (f.context[:, :, 2] == 0).all()
    assert (f.relation[:, :, 2] == 0).all() and (f.relation[:, :, :, 2] == 0).all()


def test_leaky_slope():
    np.testing.assert_allclose(leaky(torch.tensor([-1.0, 2.0])).numpy(), [-0.2, 2.0])


# ---------------------------------------------------------------------------
# finite-difference gradient contract (64-bit)


def test_state_gradient_first_layer():
    torch.manual_seed(3)
    enc = StateEncoder().double()
    pos = torch.randn(5, 2, dtype=torch.float64)
    vel = torch.randn(5, 2, dtype=torch.float64)
    head = torch.randn(5, dtype=torch.float64)
    layer = enc.mlp.layers[0]
    res = check_gradients(lambda: enc(pos, vel, head).sum(), [("w", layer.weight), ("b", layer.bias)], samples=80)
    assert res.max_rel_error < 1e-4, res.worst()


def test_relation_gradient():
    torch.manual_seed(4)
    enc = RelationEncoder().double()
    pos = (torch.randn(4, 2, dtype=torch.float64) * 3).requires_grad_()
    named = [(n, p) for n, p in enc.named_parameters()] + [("pos", pos)]
    res = check_gradients(lambda: (enc(pos) ** 2).sum(), named, samples=80)
    assert res.max_rel_error < 1e-4, res.worst()


def test_context_gradient_7x7():
    torch.manual_seed(5)
    enc = ContextEncoder(channels=6).double()
    x = torch.randn(2, 3, 7, 7, dtype=torch.float64, requires_grad=True)
    named = [(n, p) for n, p in enc.named_parameters()] + [("patch", x)]
    res = check_gradients(lambda: (enc(x) ** 2).sum(), named, samples=80)
    assert res.max_rel_error < 1e-4, res.worst()
