import math

import numpy as np
import pytest
import torch

from dp3d.networks import Canonicalizer, PoseRegressor, ResidualMLP, UncertaintyHead, encode_keypoints, vertex_twists

D = torch.float64
SMALL = dict(width=32, hidden=16, n_blocks=2)


@pytest.fixture
def kp(rng):
    y = torch.as_tensor(rng.normal(size=(6, 20, 2)))
    z = torch.as_tensor(rng.uniform(size=(6, 20)) < 0.7)
    return y, z


def test_zero_head_gives_zero_twists(kp):
    torch.manual_seed(0)
    net = PoseRegressor(20, 3, **SMALL)
    tw, alpha = net(*kp)
    assert tw.shape == (6, 4, 6) and alpha is None
    assert torch.all(tw == 0)


def test_blend_outputs(kp):
    tw, alpha = PoseRegressor(20, 2, n_blend=5, **SMALL)(*kp)
    assert alpha.shape == (6, 5)


def test_translation_invariance(kp):
    torch.manual_seed(1)
    net = PoseRegressor(20, 3, zero_head=False, **SMALL).eval()
    y, z = kp
    a, _ = net(y, z)
    b, _ = net(y + torch.tensor([3.0, -7.0], dtype=D), z)
    assert (a - b).abs().max() < 1e-10


def test_masked_entries_ignored(kp):
    torch.manual_seed(2)
    net = PoseRegressor(20, 3, zero_head=False, **SMALL).eval()
    y, z = kp
    garbage = y.clone()
    garbage[~z] = float("nan")
    a, _ = net(y, z)
    b, _ = net(garbage, z)
    assert torch.equal(a, b)


def test_encoding_layout():
    y = torch.tensor([[[1.0, 1.0], [3.0, 5.0], [100.0, 100.0]]], dtype=D)
    z = torch.tensor([[1, 1, 0]])
    enc = encode_keypoints(y, z).reshape(3, 3)
    assert enc.tolist() == [[-1.0, -2.0, 1.0], [1.0, 2.0, 1.0], [0.0, 0.0, 0.0]]


def test_wrong_keypoint_count(kp):
    with pytest.raises(ValueError, match="keypoints"):
        PoseRegressor(21, 3, **SMALL)(*kp)


def test_mlp_dimension_error():
    with pytest.raises(ValueError):
        ResidualMLP(4, 2, **SMALL)(torch.zeros(3, 5, dtype=D))


def test_canonicalizer_shape(rng):
    c = Canonicalizer(10, **SMALL)
    x = torch.as_tensor(rng.normal(size=(4, 10, 3)))
    assert c(x).shape == (4, 10, 3)
    with pytest.raises(ValueError):
        c(torch.zeros(4, 9, 3, dtype=D))


def test_uncertainty_zero_weights_softplus_zero(rng):
    head = UncertaintyHead(8)
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    b = head(torch.as_tensor(rng.normal(size=(30, 8))), torch.as_tensor(rng.normal(size=(2, 30, 6))))
    assert b.shape == (2, 30)
    assert (b - math.log(2)).abs().max() < 1e-15


def test_uncertainty_positive(rng):
    torch.manual_seed(3)
    head = UncertaintyHead(8)
    b = head(torch.as_tensor(rng.normal(size=(30, 8)) * 50), torch.as_tensor(rng.normal(size=(30, 6)) * 50))
    assert torch.all(b > 0)


def test_vertex_twists_blend(rng):
    P = torch.tensor([[1.0, 0.0], [0.25, 0.75]], dtype=D)
    h = torch.as_tensor(rng.normal(size=(2, 6)))
    v = vertex_twists(P, h)
    assert torch.allclose(v[1], 0.25 * h[0] + 0.75 * h[1], atol=1e-15)


def test_eval_mode_batch_independent(kp):
    torch.manual_seed(4)
    net = PoseRegressor(20, 2, zero_head=False, **SMALL)
    y, z = kp
    net.train()
    net(y, z)  # populate running statistics
    net.eval()
    full, _ = net(y, z)
    single, _ = net(y[2:3], z[2:3])
    assert (full[2] - single[0]).abs().max() < 1e-12
