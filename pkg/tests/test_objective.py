import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ofsiren.objective import (EmptyBatchWarning, LossConfig, LossReport, SampleBatch, combine,
                               flow_constraint_from_jacobian, flow_constraint_loss, loss_terms,
                               observation_loss, total_loss)
from ofsiren.siren_net import SirenConfig, SirenModel, forward, forward_with_jacobian, init_siren


def naive_obs(model, coords, targets):
    total = 0.0
    for x, y in zip(coords, targets):
        out = forward(model, x[None])[0].tolist()
        total += sum((o - t) ** 2 for o, t in zip(out, y.tolist()))
    return total / len(coords)


def naive_of(jac, flows):
    total = 0.0
    n = len(jac)
    for i in range(n):
        for c in range(3):
            dot = 0.0
            for a in range(3):
                dot += float(jac[i][a][c]) * float(flows[i][a])
            total += abs(dot)
    return total / (3 * n)


def random_batch(rng, n):
    coords = torch.from_numpy(rng.uniform(-1, 1, (n, 3)))
    targets = torch.from_numpy(rng.uniform(-1, 1, (n, 3)))
    flows = torch.from_numpy(np.column_stack([rng.uniform(-2, 2, (n, 2)), np.ones(n)]))
    return SampleBatch(coords, targets, flows)


def test_lambda_range():
    LossConfig(0.0)
    LossConfig(1.0)
    with pytest.raises(ValueError):
        LossConfig(1.5)
    with pytest.raises(ValueError):
        LossConfig(-0.1)


def test_batch_validation():
    c = torch.zeros(3, 3, dtype=torch.float64)
    with pytest.raises(ValueError, match="third component"):
        SampleBatch(c, c, c)
    with pytest.raises(ValueError, match="does not match"):
        SampleBatch(c, torch.zeros(2, 3, dtype=torch.float64))


def test_observation_loss_examples():
    m = SirenModel(SirenConfig(depth=2, width=2, omega=1.0))
    x = torch.zeros(1, 3, dtype=torch.float64)
    one_hot = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    with torch.no_grad():
        assert float(observation_loss(m, SampleBatch(x, one_hot))) == 1.0
        assert float(observation_loss(m, SampleBatch(x, torch.zeros(1, 3, dtype=torch.float64)))) == 0.0


def test_observation_loss_zero_on_own_output(tiny_model, rng):
    x = torch.from_numpy(rng.uniform(-1, 1, (20, 3)))
    with torch.no_grad():
        y = forward(tiny_model, x)
    assert float(observation_loss(tiny_model, SampleBatch(x, y))) == 0.0


def test_empty_batch_is_zero_with_warning(tiny_model):
    empty = torch.zeros(0, 3, dtype=torch.float64)
    with pytest.warns(EmptyBatchWarning):
        assert float(observation_loss(tiny_model, SampleBatch(empty, empty))) == 0.0


@pytest.mark.parametrize("n", [1, 8, 64])
def test_losses_match_naive_loops(tiny_model, rng, n):
    b = random_batch(rng, n)
    with torch.no_grad():
        obs = float(observation_loss(tiny_model, b))
        of = float(flow_constraint_loss(tiny_model, b))
        jac = forward_with_jacobian(tiny_model, b.coords).stacked()
    assert obs == pytest.approx(naive_obs(tiny_model, b.coords, b.targets), rel=1e-12)
    assert of == pytest.approx(naive_of(jac.tolist(), b.flows.tolist()), rel=1e-12)


def test_flow_loss_examples():
    jac = torch.zeros(1, 3, 3, dtype=torch.float64)
    jac[0, :, 0] = torch.tensor([1.0, 0.0, 0.0])
    assert float(flow_constraint_from_jacobian(jac, torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64))) == 0.0
    jac = torch.zeros(1, 3, 3, dtype=torch.float64)
    jac[0, :, 1] = torch.tensor([2.0, -1.0, 3.0])
    val = flow_constraint_from_jacobian(jac, torch.tensor([[1.0, 2.0, 1.0]], dtype=torch.float64))
    # one channel contributes |2 - 2 + 3| = 3, averaged over 3 channels
    assert float(val) * 3 == 3.0


def test_flow_loss_zero_model():
    m = SirenModel(SirenConfig(depth=3, width=4, omega=30.0))
    b = random_batch(np.random.default_rng(0), 10)
    assert float(flow_constraint_loss(m, b)) == 0.0


def test_flow_loss_requires_flows(tiny_model):
    c = torch.zeros(2, 3, dtype=torch.float64)
    with pytest.raises(ValueError):
        flow_constraint_loss(tiny_model, SampleBatch(c, c))


jac_arrays = arrays(np.float64, (5, 3, 3), elements=st.floats(-10, 10))
flow_xy = arrays(np.float64, (5, 2), elements=st.floats(-5, 5))


@settings(max_examples=50, deadline=None)
@given(jac_arrays, flow_xy, st.floats(0.01, 100))
def test_flow_loss_homogeneous(jac, fxy, c):
    flows = torch.from_numpy(np.column_stack([fxy, np.ones(5)]))
    j = torch.from_numpy(jac)
    base = float(flow_constraint_from_jacobian(j, flows))
    scaled = float(flow_constraint_from_jacobian(c * j, flows))
    assert scaled == pytest.approx(c * base, rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3, 2), elements=st.floats(-10, 10)),
       arrays(np.float64, (4, 2), elements=st.floats(-5, 5)))
def test_orthogonal_derivatives_give_zero(spatial, fxy):
    # choose d/dt so each channel's gradient is orthogonal to (u, v, 1)
    flows = np.column_stack([fxy, np.ones(4)])
    jac = np.empty((4, 3, 3))
    jac[:, 0, :] = spatial[:, :, 0]
    jac[:, 1, :] = spatial[:, :, 1]
    jac[:, 2, :] = -(spatial[:, :, 0] * fxy[:, :1] + spatial[:, :, 1] * fxy[:, 1:])
    val = float(flow_constraint_from_jacobian(torch.from_numpy(jac), torch.from_numpy(flows)))
    scale = np.abs(jac).max() * np.abs(flows).max() + 1
    assert val <= 1e-14 * scale


def test_total_loss_endpoints_and_mix(tiny_model, rng):
    b = random_batch(rng, 16)
    r0 = total_loss(tiny_model, b, LossConfig(0.0))
    r1 = total_loss(tiny_model, b, LossConfig(1.0))
    assert r0.total == r0.obs_loss
    assert r1.total == r1.of_loss
    r = total_loss(tiny_model, b, LossConfig(0.12))
    assert r.total == pytest.approx(0.88 * r.obs_loss + 0.12 * r.of_loss, rel=1e-15)
    assert r.sample_count == 16


def test_total_loss_arithmetic():
    # (1 - 0.12) * 0.5 + 0.12 * 0.25
    t = combine(torch.tensor(0.5, dtype=torch.float64), torch.tensor(0.25, dtype=torch.float64), 0.12)
    assert float(t) == pytest.approx(0.47, abs=1e-15)


def test_total_loss_needs_both_terms(tiny_model):
    c = torch.zeros(2, 3, dtype=torch.float64)
    with pytest.raises(ValueError):
        total_loss(tiny_model, SampleBatch(c, c), LossConfig(0.5))


def test_loss_terms_is_differentiable(rng):
    m = init_siren(SirenConfig(depth=3, width=4, omega=5.0), seed=0)
    total, report = loss_terms(m, random_batch(rng, 4), LossConfig(0.3))
    assert total.requires_grad
    assert isinstance(report, LossReport)
    assert report.csv_row(3) == [3, report.obs_loss, report.of_loss, report.total, 0.3]
