import math

import numpy as np
import pytest
import torch

from gdatpred.decoder import (
    ControlBounds, TrajectoryDecoder, integrate_kinematic, kinematic_step, reconstruct_controls, rollout_displacement,
    rollout_kinematic, wrap,
)
from gdatpred.gradcheck import check_gradients


def zero_decoder(node_dim=8, latent_dim=4):
    dec = TrajectoryDecoder(node_dim, latent_dim, 16).double()
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.zero_()
    return dec


def state(x=0.0, y=0.0, psi=0.0, v=0.0, slip=0.0):
    return torch.tensor([[x, y, psi, v, slip]], dtype=torch.float64)


def euler_reference(v, slip, psi, lr, dt, steps, sub):
    """Independent scalar Euler integration of the continuous bicycle with constant v and slip."""
    x = y = 0.0
    h = dt / sub
    out = []
    for _ in range(steps):
        for _ in range(sub):
            x, y, psi = x + v * math.cos(psi + slip) * h, y + v * math.sin(psi + slip) * h, psi + v / lr * math.sin(slip) * h
        out.append((x, y))
    return np.array(out)


def test_stationary_rollout():
    dec = zero_decoder()
    s, z = torch.randn(1, 8, dtype=torch.float64), torch.randn(1, 4, dtype=torch.float64)
    states, controls = rollout_kinematic(dec, s, z, state(3.0, -1.0, 0.4), 5, 0.5)
    assert (controls == 0).all()
    np.testing.assert_array_equal(states[0, :, :2].detach().numpy(), np.tile([3.0, -1.0], (5, 1)))
    np.testing.assert_allclose(states[0, :, 2].detach().numpy(), 0.4, rtol=0, atol=1e-12)  # wrap rounds by an ulp


def test_straight_line():
    dec = zero_decoder()
    s, z = torch.randn(1, 8, dtype=torch.float64), torch.randn(1, 4, dtype=torch.float64)
    states, _ = rollout_kinematic(dec, s, z, state(v=2.0), 3, 0.5)
    np.testing.assert_allclose(states[0, :, 0].detach().numpy(), [1.0, 2.0, 3.0], rtol=0, atol=1e-12)
    assert (states[0, :, 1] == 0).all() and (states[0, :, 2] == 0).all()


def test_constant_slip_against_fine_oracle():
    ref = euler_reference(5.0, 0.1, 0.0, 1.5, 0.5, 10, 1000)
    controls = torch.zeros(1, 10, 2, dtype=torch.float64)
    out = integrate_kinematic(state(v=5.0, slip=0.1), controls, 0.5, 1.5, substeps=50)
    err = np.linalg.norm(out[0, -1, :2].numpy() - ref[-1])
    assert err < 0.05


def test_first_order_convergence():
    ref = euler_reference(5.0, 0.1, 0.0, 1.5, 0.5, 10, 1600)
    controls = torch.zeros(1, 10, 2, dtype=torch.float64)
    errs = []
    for sub in (1, 2, 4, 8, 16, 32, 64):
        out = integrate_kinematic(state(v=5.0, slip=0.1), controls, 0.5, 1.5, substeps=sub)
        errs.append(np.linalg.norm(out[0, -1, :2].numpy() - ref[-1]))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    # the 1600-substep reference carries its own O(1/1600) error, which skews the finest ratios slightly
    assert np.all(np.abs(ratios[:-1] - 2.0) < 0.4), ratios


def test_angles_wrapped():
    s = state(psi=math.pi - 0.01, v=10.0, slip=0.5)
    out = kinematic_step(s, torch.tensor([[0.0, 0.0]], dtype=torch.float64), 0.5, 1.5)
    assert -math.pi < out[0, 2].item() <= math.pi
    a = torch.tensor([math.pi, -math.pi, 3 * math.pi, 0.0], dtype=torch.float64)
    np.testing.assert_allclose(wrap(a).numpy(), [math.pi, math.pi, math.pi, 0.0], atol=1e-12)


def test_saturation_within_bounds():
    b = ControlBounds()
    raw = torch.tensor([[1e6, -1e6], [-3.0, 0.2], [0.0, 0.0]], dtype=torch.float64)
    u = b.saturate(raw)
    assert (u[:, 0].abs() <= 4.0).all() and (u[:, 1].abs() <= 0.6).all()
    assert b.contains(u).all()
    with pytest.raises(ValueError):
        ControlBounds(accel=0.0)


def test_rerun_reproduces_states_and_controls():
    torch.manual_seed(0)
    dec = TrajectoryDecoder(8, 4, 16).double()
    s, z = torch.randn(3, 8, dtype=torch.float64) * 3, torch.randn(3, 4, dtype=torch.float64)
    init = torch.tensor([[0, 0, 0.2, 4, 0], [1, 1, -2, 6, 0], [5, 0, 3, 0.5, 0]], dtype=torch.float64)
    states, controls = rollout_kinematic(dec, s, z, init, 6, 0.5, substeps=1)
    # single substep: the recovered per-step rates equal the emitted controls
    torch.testing.assert_close(reconstruct_controls(init, states, 0.5), controls, rtol=0, atol=1e-9)
    again = integrate_kinematic(init, controls, 0.5, substeps=1)
    assert torch.equal(again, states)


def test_zero_steps_and_bad_dt():
    dec = zero_decoder()
    s, z = torch.zeros(2, 8, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64)
    states, controls = rollout_kinematic(dec, s, z, torch.zeros(2, 5, dtype=torch.float64), 0, 0.5)
    assert states.shape == (2, 0, 5) and controls.shape == (2, 0, 2)
    with pytest.raises(ValueError):
        rollout_kinematic(dec, s, z, torch.zeros(2, 5, dtype=torch.float64), 3, 0.0)
    with pytest.raises(ValueError):
        integrate_kinematic(torch.zeros(2, 5), torch.zeros(2, 3, 2), -1.0)


def test_displacement_examples():
    dec = zero_decoder()
    s, z = torch.randn(1, 8, dtype=torch.float64), torch.randn(1, 4, dtype=torch.float64)
    last = torch.tensor([[5.0, 5.0]], dtype=torch.float64)
    assert (rollout_displacement(dec, s, z, last, 4) == 5.0).all()
    with torch.no_grad():
        dec.head.bias.copy_(torch.tensor([1.0, 0.0]))
    out = rollout_displacement(dec, s, z, last, 3)
    np.testing.assert_array_equal(out[0].detach().numpy(), [[6, 5], [7, 5], [8, 5]])


def test_latent_changes_output():
    torch.manual_seed(1)
    dec = TrajectoryDecoder(8, 4, 16).double()
    s = torch.randn(1, 8, dtype=torch.float64)
    a = dec(s, torch.zeros(1, 4, dtype=torch.float64), 5)
    b = dec(s, torch.ones(1, 4, dtype=torch.float64), 5)
    assert not torch.allclose(a, b)


def test_gru_input_only_at_first_step():
    torch.manual_seed(2)
    dec = TrajectoryDecoder(8, 4, 16).double()
    seen = []
    dec.gru.register_forward_hook(lambda mod, inp, out: seen.append(inp[0].clone()))
    s = torch.randn(2, 8, dtype=torch.float64)
    dec(s, torch.randn(2, 4, dtype=torch.float64), 4)
    assert torch.equal(seen[0], s)
    assert all((x == 0).all() for x in seen[1:])


def test_terminal_position_gradient():
    torch.manual_seed(3)
    dec = TrajectoryDecoder(8, 4, 16).double()
    s, z = torch.randn(2, 8, dtype=torch.float64), torch.randn(2, 4, dtype=torch.float64)
    last = torch.randn(2, 2, dtype=torch.float64)
    init = torch.tensor([[0, 0, 0.3, 5, 0], [2, 1, -1, 3, 0.05]], dtype=torch.float64)
    res = check_gradients(lambda: rollout_displacement(dec, s, z, last, 5)[:, -1].sum(), list(dec.named_parameters()),
                          samples=80)
    assert res.max_rel_error < 1e-4, res.worst()

    def kin():
        st, _ = rollout_kinematic(dec, s, z, init, 5, 0.5, substeps=5)
        return st[:, -1, :2].sum()

    res = check_gradients(kin, list(dec.named_parameters()), samples=80, seed=1)
    assert res.max_rel_error < 1e-4, res.worst()
