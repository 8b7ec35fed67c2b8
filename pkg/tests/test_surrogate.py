import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import class_slices, make_state, random_patches
from _oracles import central_difference, dense_posterior, eig_nll, naive_embed, rbf
from novscope.dataset import Patch
from novscope.surrogate import (
    Architecture,
    ExtractorParams,
    FactorizationError,
    KernelHyperparams,
    PatchBatch,
    SurrogateState,
    TrainReport,
    TrainSchedule,
    _cholesky_with_jitter,
    embed,
    embed_batch,
    gaussian_nll,
    init_extractor,
    kernel_eval,
    nll,
    nll_and_grad,
    posterior,
    train,
)


# ---------------------------------------------------------------------------
# extractor


def test_zero_weights_give_zero_latent(rng):
    arch = Architecture(12)
    ext = ExtractorParams(arch, np.zeros(arch.n_weights))
    assert np.array_equal(embed_batch(ext, random_patches(rng, 5, 12)), np.zeros((5, 2)))


def test_identical_patches_identical_latents(rng):
    arch = Architecture(16)
    ext = init_extractor(arch, 3)
    p = random_patches(rng, 1, 16)[0]
    z = embed_batch(ext, np.stack([p, p, p]))
    assert np.array_equal(z[0], z[1]) and np.array_equal(z[1], z[2])
    # a different batch size may take a different BLAS path
    np.testing.assert_allclose(embed(ext, Patch(p, (8, 8), True)), z[0], rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("p,padding", [(10, "valid"), (13, "valid"), (16, "valid"), (4, "same"), (7, "same")])
def test_embed_matches_nested_loop_convolution(rng, p, padding):
    arch = Architecture(p, c1=3, c2=5, latent_dim=2, padding=padding)
    ext = ExtractorParams(arch, rng.normal(scale=0.5, size=arch.n_weights))
    patches = random_patches(rng, 3, p)
    got = embed_batch(ext, patches)
    for i in range(3):
        want = naive_embed(arch, ext, patches[i])
        assert np.all(np.isfinite(got[i]))
        np.testing.assert_allclose(got[i], want, rtol=1e-12, atol=1e-12)


def test_embed_rejects_shape_mismatch_and_unstandardized(rng):
    arch = Architecture(12)
    ext = init_extractor(arch, 0)
    with pytest.raises(ValueError):
        embed_batch(ext, rng.normal(size=(2, 10, 10)))
    with pytest.raises(ValueError):
        embed(ext, Patch(rng.normal(size=(12, 12)), (6, 6), False))


def test_architecture_too_small_for_valid_padding():
    with pytest.raises(ValueError):
        Architecture(8, padding="valid")
    assert Architecture(4, padding="same").q2 == 1


def test_glorot_init_bounds_and_zero_biases():
    arch = Architecture(16)
    w = init_extractor(arch, 1).unpack()
    assert np.all(np.abs(w["conv1_w"]) <= math.sqrt(6 / (9 + 72)))
    assert np.all(np.abs(w["dense_w"]) <= math.sqrt(6 / (arch.n_features + 2)))
    for name in ("conv1_b", "conv2_b", "dense_b"):
        assert not w[name].any()
    assert np.array_equal(init_extractor(arch, 1).weights, init_extractor(arch, 1).weights)


# ---------------------------------------------------------------------------
# kernel


def test_kernel_analytic_points():
    theta = KernelHyperparams(math.log(1.7), math.log(0.6), -4.0)
    s2 = 1.7**2
    z = np.array([0.3, -1.0])
    assert kernel_eval(theta, z, z) == pytest.approx(s2, abs=1e-15)
    z2 = z + np.array([0.6 * math.sqrt(2), 0.0])
    assert kernel_eval(theta, z, z2) == pytest.approx(s2 * math.exp(-1), rel=1e-12)


def test_kernel_random_pairs_vs_formula(rng):
    for _ in range(50):
        lo, ll = rng.normal(size=2)
        theta = KernelHyperparams(lo, ll, -2.0)
        a, b = rng.normal(size=(2, 3))
        want = math.exp(2 * lo) * math.exp(-sum((a - b) ** 2) / (2 * math.exp(2 * ll)))
        assert kernel_eval(theta, a, b) == pytest.approx(want, rel=1e-12, abs=1e-300)
        assert kernel_eval(theta, a, b) == kernel_eval(theta, b, a)


def test_kernel_dims_must_match():
    with pytest.raises(ValueError):
        kernel_eval(KernelHyperparams(), np.zeros(2), np.zeros(3))


# ---------------------------------------------------------------------------
# marginal likelihood


def test_nll_single_point_closed_form():
    assert gaussian_nll(np.array([[1.0]]), np.array([0.0])) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    assert 0.5 * math.log(2 * math.pi) == pytest.approx(0.918939, abs=1e-6)


def test_nll_matches_eigen_oracle(rng):
    for _ in range(10):
        state = make_state(rng, n=4, p=10, hyper=tuple(rng.normal(scale=0.5, size=3) - [0, 0, 2]))
        y, _, _ = state.normalized_targets()
        assert nll(state) == pytest.approx(eig_nll(state.kernel_matrix(), y), abs=1e-8)


def test_duplicate_training_point_is_finite(rng):
    state = make_state(rng, n=5)
    p = state.inputs.patches
    dup = SurrogateState.create(state.arch, np.concatenate([p, p[:1]]), np.append(state.targets, 0.3), kernel=state.kernel)
    assert np.isfinite(nll(dup))
    assert nll(dup) != nll(state)


def test_cache_reconstructs_kernel(rng):
    state = make_state(rng, n=7)
    fit = state.fit()
    np.testing.assert_allclose(fit.L @ fit.L.T, state.kernel_matrix(), atol=1e-8)
    y, _, _ = state.normalized_targets()
    np.testing.assert_allclose(state.kernel_matrix() @ fit.alpha, y, atol=1e-8)


def test_jitter_escalation_then_failure():
    # smallest eigenvalue -5e-6: 1e-6 relative jitter fails, 1e-5 succeeds
    base = np.array([[1.0, 1.0 + 5e-6], [1.0 + 5e-6, 1.0]])
    L, rel = _cholesky_with_jitter(base, 0.0, 1.0)
    assert rel == pytest.approx(1e-5) and np.all(np.isfinite(L))
    with pytest.raises(FactorizationError, match="not positive definite"):
        _cholesky_with_jitter(np.array([[0.0, 1.0], [1.0, 0.0]]), 0.0, 1.0)


def gradient_errors(state):
    theta = state.params()
    _, g = nll_and_grad(state)
    num = central_difference(lambda t: nll(state.with_params(t)), theta)
    out = {}
    for name, idx in class_slices(state.arch).items():
        denom = max(np.linalg.norm(num[idx]), np.linalg.norm(g[idx]), 1e-6)
        out[name] = np.linalg.norm(num[idx] - g[idx]) / denom
    return out


@pytest.mark.parametrize("padding,p", [("valid", 10), ("same", 6)])
def test_gradient_check_every_class(rng, padding, p):
    state = make_state(rng, n=6, p=p, padding=padding, hyper=(0.2, -0.3, -2.5))
    errs = gradient_errors(state)
    assert max(errs.values()) < 1e-3, errs


# ---------------------------------------------------------------------------
# training


def test_zero_iterations_is_identity(rng):
    state = make_state(rng)
    assert train(state, TrainSchedule(iterations=0)) is state


def test_training_needs_two_points(rng):
    state = make_state(rng, n=1)
    with pytest.raises(ValueError):
        train(state, TrainSchedule(iterations=3))


def test_training_decreases_nll_and_trace_running_min(rng):
    state = make_state(rng, n=12)
    report = TrainReport()
    out = train(state, TrainSchedule(iterations=200), report)
    assert nll(out) <= nll(state) + 1e-6
    assert len(report.trace) == 201
    running = np.minimum.accumulate(report.trace)
    assert np.all(np.diff(running) <= 0)
    assert nll(out) == pytest.approx(running[-1], abs=1e-12)


def test_training_deterministic(rng):
    state = make_state(rng, n=8)
    a = train(state, TrainSchedule(iterations=30))
    b = train(state, TrainSchedule(iterations=30))
    assert a.params().tobytes() == b.params().tobytes()


def test_frozen_extractor_hypers_match_grid_search():
    rng = np.random.default_rng(21)
    arch = Architecture(10, c1=3, c2=4, latent_dim=1)
    n = 40
    patches = random_patches(rng, n, 10)
    ext = ExtractorParams(arch, rng.normal(scale=0.8, size=arch.n_weights))
    # rescale the dense layer so latents have unit spread
    scale = 1.0 / embed_batch(ext, patches).std()
    w_flat = ext.weights.copy()
    sl = arch.slices()
    w_flat[sl["dense_w"]] *= scale
    w_flat[sl["dense_b"]] *= scale
    ext = ExtractorParams(arch, w_flat)
    z = embed_batch(ext, patches)[:, 0]
    y = np.sin(1.5 * z) + 0.15 * rng.normal(size=n)
    state = SurrogateState(ext, KernelHyperparams(0.0, 0.0, -2.0), PatchBatch(patches, arch), y)
    out = train(state, TrainSchedule(iterations=3000, step_size=0.02, freeze_extractor=True))
    assert np.array_equal(out.extractor.weights, ext.weights)

    yn, _, _ = state.normalized_targets()
    D = (z[:, None] - z[None, :]) ** 2

    def grid_nll(lo, ll, ln):
        s2 = math.exp(2 * lo)
        K = s2 * np.exp(-D / (2 * math.exp(2 * ll))) + (math.exp(ln) + 1e-6 * s2) * np.eye(n)
        return gaussian_nll(K, yn)

    center, width = np.array([0.0, 0.0, -2.0]), np.array([2.0, 2.0, 3.0])
    for _ in range(3):
        axes = [np.linspace(c - w, c + w, 21) for c, w in zip(center, width)]
        best = min((grid_nll(a, b, c), (a, b, c)) for a in axes[0] for b in axes[1] for c in axes[2])
        center = np.array(best[1])
        width = width / 5
    learned = out.kernel
    assert learned.lengthscale == pytest.approx(math.exp(center[1]), rel=0.10)
    assert learned.noise == pytest.approx(math.exp(center[2]), rel=0.10)


# ---------------------------------------------------------------------------
# posterior


def latents(state, patches):
    return embed_batch(state.extractor, patches)


def test_posterior_matches_dense_inverse_oracle(rng):
    for _ in range(10):
        state = make_state(rng, n=5, hyper=tuple(rng.normal(scale=0.4, size=3) - [0, 0, 2]))
        q = random_patches(rng, 7, 10)
        post = posterior(state, q)
        mu, var = dense_posterior(latents(state, state.inputs.patches), state.targets, latents(state, q), state.kernel.as_array())
        np.testing.assert_allclose(post.mean, mu, atol=1e-8)
        np.testing.assert_allclose(post.variance, var, atol=1e-8)
        assert len(post) == 7


def well_separated_state(rng, n=6):
    """State whose lengthscale is small against the latent spread, noise negligible."""
    state = make_state(rng, n=n)
    z = latents(state, state.inputs.patches)
    d = np.sqrt(((z[:, None] - z[None]) ** 2).sum(-1))[np.triu_indices(n, 1)]
    return SurrogateState(state.extractor, KernelHyperparams(0.0, math.log(d.min() / 3), -40.0), state.inputs, state.targets)


def test_posterior_interpolates_training_points_without_noise(rng):
    state = well_separated_state(rng)
    post = posterior(state, state.inputs.patches)
    std = state.targets.std()
    assert np.max(np.abs(post.mean - state.targets)) < 1e-4 * std
    assert np.max(post.variance) < 1e-6 * state.kernel.amplitude * std**2


def test_posterior_reverts_to_prior_far_away(rng):
    state = make_state(rng, n=6, hyper=(0.3, -25.0, -3.0))
    q = random_patches(rng, 4, 10)
    post = posterior(state, q)
    np.testing.assert_allclose(post.mean, state.targets.mean(), atol=1e-12)
    np.testing.assert_allclose(post.variance, state.kernel.amplitude * state.targets.var(), rtol=1e-12)


def test_posterior_accepts_patch_objects(rng):
    state = make_state(rng)
    q = random_patches(rng, 3, 10)
    a = posterior(state, q)
    b = posterior(state, [Patch(v, (5, 5), True) for v in q])
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.variance, b.variance)


def test_posterior_exchangeable(rng):
    state = make_state(rng, n=7)
    perm = rng.permutation(7)
    swapped = SurrogateState(state.extractor, state.kernel, state.inputs.take(perm), state.targets[perm])
    q = random_patches(rng, 9, 10)
    a, b = posterior(state, q), posterior(swapped, q)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
    np.testing.assert_allclose(a.variance, b.variance, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adding_point_never_increases_variance(seed):
    rng = np.random.default_rng(seed)
    state = make_state(rng, n=5)
    extra = random_patches(rng, 1, 10)
    bigger = SurrogateState(
        state.extractor,
        state.kernel,
        PatchBatch(np.concatenate([state.inputs.patches, extra]), state.arch),
        np.append(state.targets, rng.normal()),
    )
    q = random_patches(rng, 6, 10)
    # compare in normalized units: target z-scoring changes with the data
    va = posterior(state, q).variance / state.targets.var()
    vb = posterior(bigger, q).variance / bigger.targets.var()
    assert np.all(vb <= va + 1e-8)


def test_clamp_magnitude_bounded(rng):
    state = make_state(rng, n=8, hyper=(0.0, 1.0, -30.0))
    post = posterior(state, np.concatenate([state.inputs.patches, random_patches(rng, 20, 10)]))
    assert np.all(post.variance >= 0)
    assert post.clamp_max <= 1e-8 * state.kernel.amplitude


def test_z_score_round_trip(rng):
    state = well_separated_state(rng)
    y_scaled = 1000.0 + 250.0 * state.targets
    st2 = SurrogateState(state.extractor, state.kernel, state.inputs, y_scaled)
    yn, mean, std = st2.normalized_targets()
    np.testing.assert_allclose(yn * std + mean, y_scaled, atol=1e-9)


def test_constant_targets_use_unit_scale(rng):
    state = make_state(rng, n=4)
    flat = SurrogateState(state.extractor, state.kernel, state.inputs, np.full(4, 2.5))
    yn, mean, std = flat.normalized_targets()
    assert std == 1.0 and mean == 2.5 and not yn.any()
    assert np.isfinite(nll(flat))
