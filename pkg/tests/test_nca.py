import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncauq import autodiff as ad
from ncauq import nca
from ncauq.nca import NcaParams, TrajectoryPolicy

import oracles


def make_params(seed=0, num_channels=8, hidden_size=8, fire_rate=0.5, trained=False):
    params = NcaParams.init(np.random.default_rng(seed), num_channels,
                            hidden_size, fire_rate)
    if trained:  # nonzero w2 so the dynamics actually move
        params.w2.data[:] = np.random.default_rng(seed + 1).normal(
            0, 0.1, params.w2.data.shape).astype(np.float32)
    return params


def random_image(seed, h=8, w=8):
    return np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)


# ---------------------------------------------------------------------------
# init_state
# ---------------------------------------------------------------------------

def test_init_state_black_image_all_zero():
    state = nca.init_state(np.zeros((8, 8, 3), dtype=np.float32), make_params())
    assert np.array_equal(state.s, np.zeros((8, 8, 8)))
    assert state.step_count == 0


def test_init_state_copies_image_and_zeroes_latent():
    img = random_image(1)
    state = nca.init_state(img, make_params())
    assert np.array_equal(state.s[:, :, :3], img)
    assert np.array_equal(state.s[:, :, 3:], np.zeros((8, 8, 5)))


def test_init_state_checker_image_reproduced():
    checker = np.indices((6, 6)).sum(axis=0) % 2
    img = np.repeat(checker[:, :, None], 3, axis=2).astype(np.float32)
    state = nca.init_state(img, make_params())
    assert np.array_equal(state.s[:, :, :3], img)


def test_init_state_rejects_tiny_images():
    with pytest.raises(ValueError):
        nca.init_state(np.zeros((2, 8, 3), dtype=np.float32), make_params())


# ---------------------------------------------------------------------------
# params invariants
# ---------------------------------------------------------------------------

def test_params_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        NcaParams.init(rng, num_channels=5)
    with pytest.raises(ValueError):
        NcaParams.init(rng, fire_rate=1.5)


def test_params_w2_zero_initialized():
    params = make_params()
    assert np.array_equal(params.w2.data, np.zeros_like(params.w2.data))
    assert np.array_equal(params.b1.data, np.zeros_like(params.b1.data))
    bound = np.sqrt(1.0 / (3 * params.num_channels))
    assert np.abs(params.w1.data).max() <= bound


# ---------------------------------------------------------------------------
# step
# ---------------------------------------------------------------------------

def test_step_fire_rate_zero_is_fixed_point():
    params = make_params(fire_rate=0.0, trained=True)
    state = nca.init_state(random_image(2), params)
    out = nca.step(state, params, np.random.default_rng(0))
    assert np.array_equal(out.s, state.s)
    assert out.step_count == 1


def test_step_zero_w2_leaves_state_unchanged():
    params = make_params(fire_rate=1.0)  # untrained: delta is identically 0
    state = nca.init_state(random_image(3), params)
    out = nca.step(state, params, np.random.default_rng(0))
    assert np.array_equal(out.s, state.s)


def test_step_fire_rate_one_is_seed_independent():
    params = make_params(fire_rate=1.0, trained=True)
    img = random_image(4)
    outs = []
    for seed in (0, 99):
        state = nca.init_state(img, params)
        outs.append(nca.step(state, params, np.random.default_rng(seed)).s)
    assert np.array_equal(outs[0], outs[1])


def test_step_clamps_image_channels():
    params = make_params(trained=True)
    img = random_image(5)
    state = nca.init_state(img, params)
    rng = np.random.default_rng(7)
    for _ in range(10):
        state = nca.step(state, params, rng)
        assert np.array_equal(state.s[:, :, :3], img)


def test_step_rejects_channel_mismatch():
    params = make_params(num_channels=8)
    other = make_params(num_channels=10)
    state = nca.init_state(random_image(6), other)
    with pytest.raises(ValueError):
        nca.step(state, params, np.random.default_rng(0))


def test_step_reports_non_finite_delta_with_step_index():
    params = make_params(trained=True)
    params.w1.data[:] = np.inf
    state = nca.init_state(random_image(7), params)
    state.step_count = 41
    with pytest.raises(nca.DynamicsError, match="41"):
        nca.step(state, params, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

def test_rollout_zero_steps_is_identity():
    params = make_params(trained=True)
    state = nca.init_state(random_image(8), params)
    out, _ = nca.rollout(state, params, 0, np.random.default_rng(0))
    assert np.array_equal(out.s, state.s)


def test_rollout_composes_with_continuing_rng():
    params = make_params(trained=True)
    img = random_image(9)
    rng_a = np.random.default_rng(5)
    mid, _ = nca.rollout(nca.init_state(img, params), params, 3, rng_a)
    end_split, _ = nca.rollout(mid, params, 2, rng_a)
    end_whole, _ = nca.rollout(nca.init_state(img, params), params, 5,
                               np.random.default_rng(5))
    assert np.array_equal(end_split.s, end_whole.s)
    assert end_split.step_count == 5


def test_rollout_is_bitwise_deterministic():
    params = make_params(trained=True)
    img = random_image(10)
    runs = [nca.rollout(nca.init_state(img, params), params, 7,
                        np.random.default_rng(123))[0].s for _ in range(2)]
    assert np.array_equal(runs[0], runs[1])


def test_rollout_rejects_negative_steps():
    params = make_params()
    state = nca.init_state(random_image(11), params)
    with pytest.raises(ValueError):
        nca.rollout(state, params, -1, np.random.default_rng(0))


def test_rollout_trajectory_recording():
    params = make_params(trained=True)
    state = nca.init_state(random_image(12), params)
    policy = TrajectoryPolicy(probs_last=3, masks_last=2, mask_steps=(1, 4))
    out, traj = nca.rollout(state, params, 6, np.random.default_rng(1), record=policy)
    assert [t for t, _ in traj.probs] == [4, 5, 6]
    assert [t for t, _ in traj.masks] == [5, 6]
    assert sorted(traj.masks_at) == [1, 4]
    final = nca.readout(out)
    assert np.array_equal(traj.probs[-1][1], final.prob)


# ---------------------------------------------------------------------------
# readout
# ---------------------------------------------------------------------------

def test_readout_equal_logits_prob_half_mask_background():
    params = make_params()
    state = nca.init_state(random_image(13), params)
    pred = nca.readout(state)  # logit channels are both zero
    assert np.allclose(pred.prob, 0.5)
    assert not pred.mask.any()  # strict > 0.5: ties go to background


def test_readout_saturated_logits():
    params = make_params()
    state = nca.init_state(random_image(14), params)
    state.s[:, :, -1] = 10.0
    state.s[:, :, -2] = -10.0
    pred = nca.readout(state)
    assert pred.prob.min() > 0.999
    assert pred.mask.all()


def test_readout_matches_scalar_softmax_oracle():
    params = make_params()
    state = nca.init_state(random_image(15), params)
    rng = np.random.default_rng(16)
    state.s[:, :, -2:] = rng.normal(0, 3, (8, 8, 2)).astype(np.float32)
    pred = nca.readout(state)
    for i in range(8):
        for j in range(8):
            b, f = float(state.s[i, j, -2]), float(state.s[i, j, -1])
            m = max(b, f)
            p = np.exp(f - m) / (np.exp(b - m) + np.exp(f - m))
            assert abs(pred.prob[i, j] - p) < 1e-6
            assert pred.mask[i, j] == (p > 0.5)
    assert np.abs(pred.prob + (1 - pred.prob) - 1.0).max() < 1e-6


def test_untrained_model_predicts_all_background():
    params = make_params()
    _, pred = nca.predict(params, random_image(17), 12, np.random.default_rng(3))
    assert not pred.mask.any()


# ---------------------------------------------------------------------------
# traced path agrees with the plain path
# ---------------------------------------------------------------------------

def test_traced_and_plain_rollouts_are_bit_identical():
    params = make_params(trained=True)
    img = random_image(18)
    state, _ = nca.rollout(nca.init_state(img, params), params, 6,
                           np.random.default_rng(77))
    latent = nca.traced_rollout(img, params, 6, np.random.default_rng(77))
    assert np.array_equal(state.s[:, :, 3:], latent.data)


def test_full_rollout_gradient_vs_float64_finite_differences():
    # end-to-end: 4 steps on an 8x8 image, all parameters; nonzero b1/w2
    # keep pre-activations away from the ReLU kink
    params = make_params(seed=3)
    params.w2.data[:] = np.random.default_rng(4).normal(
        0, 0.4, params.w2.data.shape).astype(np.float32)
    params.b1.data[:] = np.random.default_rng(5).normal(
        0, 0.5, params.b1.data.shape).astype(np.float32)
    img = random_image(19)
    target = np.random.default_rng(20).random((8, 8)) > 0.5

    latent = nca.traced_rollout(img, params, 4, np.random.default_rng(55))
    loss = ad.cross_entropy_loss(
        ad.softmax_channels(nca.traced_logits(latent, params)), target)
    ad.backward(loss)

    arrays = {name: t.data for name, t in params.tensors().items()}
    h = 1e-3
    checked = 0
    for name, tensor in params.tensors().items():
        flat = arrays[name].reshape(-1)
        grad = tensor.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, sp = oracles.rollout_loss_f64(arrays, nca.PERCEPTION_KERNELS, img,
                                              target, 4, params.fire_rate, 55)
            flat[i] = orig - h
            lm, sm = oracles.rollout_loss_f64(arrays, nca.PERCEPTION_KERNELS, img,
                                              target, 4, params.fire_rate, 55)
            flat[i] = orig
            if not np.array_equal(sp, sm):
                continue  # finite difference straddles a ReLU kink
            fd = (lp - lm) / (2 * h)
            assert oracles.relative_error(grad[i], fd).max() < 1e-2, (name, i)
            checked += 1
    assert checked >= 200  # nearly all of the 240 parameters were comparable


# ---------------------------------------------------------------------------
# property sweep over random configurations
# ---------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dynamics_invariants_random_configs(seed):
    rng = np.random.default_rng(seed)
    channels = int(rng.integers(6, 13))
    hidden = int(rng.integers(4, 17))
    h, w = (int(v) for v in rng.integers(4, 11, 2))
    img = rng.random((h, w, 3)).astype(np.float32)

    frozen = NcaParams.init(rng, channels, hidden, fire_rate=0.0)
    frozen.w2.data[:] = rng.normal(0, 0.2, frozen.w2.data.shape).astype(np.float32)
    state = nca.init_state(img, frozen)
    out, _ = nca.rollout(state, frozen, 5, np.random.default_rng(seed))
    assert np.array_equal(out.s, state.s)  # fire_rate 0 is a fixed point

    live = NcaParams.init(rng, channels, hidden, fire_rate=float(rng.uniform(0.2, 1.0)))
    live.w2.data[:] = rng.normal(0, 0.2, live.w2.data.shape).astype(np.float32)
    a, _ = nca.rollout(nca.init_state(img, live), live, 6, np.random.default_rng(seed + 1))
    b, _ = nca.rollout(nca.init_state(img, live), live, 6, np.random.default_rng(seed + 1))
    assert np.array_equal(a.s, b.s)                    # determinism
    assert np.array_equal(a.s[:, :, :3], img)          # image clamp
    pred = nca.readout(a)
    assert pred.prob.min() >= 0.0 and pred.prob.max() <= 1.0
