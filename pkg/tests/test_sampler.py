import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from versediff.denoiser import ModelConfig, build_model
from versediff.diffusion import predict_x0_from_eps
from versediff.sampler import SamplingError, fuse, sample_ensemble, sample_many
from versediff.schedule import build_schedule

CFG = ModelConfig(levels=2, base_channels=8, time_embed_dim=16, timesteps=10)


@pytest.fixture(scope="module")
def model():
    return build_model(CFG, seed=3).eval()


@pytest.fixture(scope="module")
def schedule():
    return build_schedule(10, 1e-3, 0.3)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(0).uniform(-1, 1, (1, 16, 12)).astype(np.float32)


def test_same_seed_same_ensemble(model, schedule, image):
    a = sample_ensemble(image, model, schedule, n=3, base_seed=5)
    b = sample_ensemble(image, model, schedule, n=3, base_seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.soft, b.soft))
    assert np.array_equal(a.fused, b.fused) and np.array_equal(a.variance_map, b.variance_map)
    c = sample_ensemble(image, model, schedule, n=3, base_seed=6)
    assert not np.array_equal(a.soft[0], c.soft[0])


def test_members_are_valid_masks(model, schedule, image):
    s = sample_ensemble(image, model, schedule, n=4)
    assert s.n == 4 and len(s.masks) == 4
    for soft, m in zip(s.soft, s.masks):
        assert soft.shape == (1, 16, 12) and np.abs(soft).max() <= 1.0 + 1e-6
        assert m.dtype == np.uint8 and set(np.unique(m)) <= {0, 1}
    assert s.fused.shape == s.variance_map.shape == (16, 12)
    assert s.variance_map.min() >= 0


def test_single_member_ensemble(model, schedule, image):
    s = sample_ensemble(image, model, schedule, n=1)
    assert np.array_equal(s.fused, s.masks[0])
    assert np.all(s.variance_map == 0)


def test_identical_seeds_give_zero_variance(model, schedule, image):
    s = sample_ensemble(image, model, schedule, n=4, seeds=[9, 9, 9, 9])
    assert np.all(s.variance_map == 0.0)
    assert all(np.array_equal(m, s.masks[0]) for m in s.masks)


def test_single_step_schedule_returns_clamped_x0(image):
    s1 = build_schedule(1, 0.1, 0.1)
    m = build_model(ModelConfig(levels=2, base_channels=8, time_embed_dim=16, timesteps=1), seed=0).eval()
    out = sample_ensemble(image, m, s1, n=1, base_seed=4).soft[0]
    x = torch.randn((1, 16, 12), generator=torch.Generator().manual_seed(4))[None]
    img = torch.from_numpy(image)[None]
    with torch.no_grad():
        x0 = predict_x0_from_eps(x, 1, m(img, x, 1), s1).clamp(-1, 1)
    np.testing.assert_allclose(out, x0[0].numpy(), atol=1e-6)


def test_batching_does_not_change_chains(model, schedule, image):
    other = np.random.default_rng(1).uniform(-1, 1, (1, 8, 8)).astype(np.float32)
    together = sample_many([image, other, image], model, schedule, n=2, chunk=4)
    alone = sample_many([image], model, schedule, n=2, chunk=1)[0]
    for a, b in zip(together[0].soft, alone.soft):
        np.testing.assert_allclose(a, b, atol=1e-5)
    assert together[1].fused.shape == (8, 8)


def test_nonfinite_chain_is_reported(schedule, image):
    bad = build_model(CFG, seed=0).eval()
    with torch.no_grad():
        bad.out.bias.fill_(float("nan"))
    with pytest.raises(SamplingError, match="t=10"):
        sample_ensemble(image, bad, schedule, n=1)


def test_rejects_bad_arguments(model, schedule, image):
    with pytest.raises(ValueError):
        sample_ensemble(image, model, schedule, n=0)
    with pytest.raises(ValueError):
        sample_ensemble(image, model, schedule, n=2, seeds=[1])
    with pytest.raises(ValueError):
        fuse([np.zeros((1, 2, 2))], fusion="median")


members = st.integers(1, 6).flatmap(
    lambda n: st.lists(arrays(np.float32, (1, 3, 4), elements=st.floats(-1, 1, width=32)), min_size=n, max_size=n)
)


@given(members, st.randoms(use_true_random=False))
def test_fusion_matches_oracle_and_ignores_member_order(soft, rnd):
    fused, var = fuse(soft)
    stack = np.stack(soft).astype(np.float64)
    np.testing.assert_array_equal(fused, (stack.mean(0)[0] > 0).astype(np.uint8))
    np.testing.assert_allclose(var, stack.var(0)[0], atol=1e-12)
    order = list(range(len(soft)))
    rnd.shuffle(order)
    f2, v2 = fuse([soft[i] for i in order])
    np.testing.assert_allclose(v2, var, atol=1e-12)
    # the mean can round differently under reordering only when it is ~0
    near_zero = np.abs(stack.mean(0)[0]) < 1e-6
    assert np.array_equal(f2[~near_zero], fused[~near_zero])
    fv, _ = fuse(soft, fusion="vote")
    fv2, _ = fuse([soft[i] for i in order], fusion="vote")
    assert np.array_equal(fv, fv2)


def test_vote_ties_go_to_background():
    pos, neg = np.ones((1, 2, 2), np.float32), -np.ones((1, 2, 2), np.float32)
    fused, var = fuse([pos, neg], fusion="vote")
    assert np.all(fused == 0)
    np.testing.assert_allclose(var, 1.0)
    fused, _ = fuse([pos, neg, pos], fusion="vote")
    assert np.all(fused == 1)


def test_onehot_vote_and_mean():
    a = np.stack([-np.ones((2, 2)), np.ones((2, 2)), -np.ones((2, 2))]).astype(np.float32)
    b = np.stack([-np.ones((2, 2)), -np.ones((2, 2)), np.ones((2, 2))]).astype(np.float32)
    fused, _ = fuse([a, b, b], coding="onehot")
    assert np.all(fused == 2)
    fused, _ = fuse([a, b], fusion="vote", coding="onehot")
    assert np.all(fused == 1)
