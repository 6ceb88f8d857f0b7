"""Analytic covariance recursion and tangent-kernel properties.

The key oracles here: the single-hidden-layer closed form must agree with the
layer-by-layer recursion entry for entry; the forward covariance of a vanilla
stack is exact in expectation at any width, so a seeded Monte-Carlo average
over random networks pins it down; translation equivariance and input-scale
invariance follow from the operator structure and are checked directly.
"""

import numpy as np
import pytest

from ntkfilter import (
    ConfigError,
    ImageTensor,
    NoiseModel,
    UnsupportedArchitectureError,
    add_gaussian_noise,
    a_map,
    backward_covariance,
    closed_form_vanilla_kernel,
    deep_vanilla_arch,
    forward_covariance,
    kernel_columns,
    ntk_recursion,
    v_map_relu,
    vanilla_arch,
    vprime_map_relu,
)
from ntkfilter.ntk import extract_patches, patch_index_grid
from ntkfilter.simulator import forward, init_state


def noisy(image, sigma=25.0, seed=0):
    return add_gaussian_noise(image, NoiseModel(sigma=sigma, seed=seed))


# ----------------------------------------------------------------- patch index


def test_patch_index_grid_matches_direct_loop():
    h, w, r = 4, 5, 3
    idx = patch_index_grid(h, w, r)
    p = r // 2
    for pix in range(h * w):
        y, x = divmod(pix, w)
        flat = []
        for dy in range(-p, p + 1):
            for dx in range(-p, p + 1):
                flat.append(((y + dy) % h) * w + (x + dx) % w)
        np.testing.assert_array_equal(idx[pix], flat)


def test_patch_reversal_is_offset_negation():
    # tap a of the reversed row reads p - delta_a, the adjoint gather
    h, w, r = 4, 4, 3
    idx = patch_index_grid(h, w, r)
    p = r // 2
    for pix in (0, 5, 15):
        y, x = divmod(pix, w)
        for a, (dy, dx) in enumerate(
            (dy, dx) for dy in range(-p, p + 1) for dx in range(-p, p + 1)
        ):
            want = ((y - dy) % h) * w + (x - dx) % w
            assert idx[pix, ::-1][a] == want


def test_extract_patches_shape(house8):
    patches = extract_patches(house8, 3)
    assert patches.shape == (64, 9)
    idx = patch_index_grid(8, 8, 3)
    np.testing.assert_array_equal(patches, house8.data[0][idx])


# ------------------------------------------------------------------ arc cosine


def test_closed_form_kernel_special_values():
    e = np.array([1.0, 0.0])
    assert closed_form_vanilla_kernel(e, e) == pytest.approx(1.0)
    assert closed_form_vanilla_kernel(e, np.array([0.0, 1.0])) == pytest.approx(1.0 / np.pi)
    assert closed_form_vanilla_kernel(e, -e) == pytest.approx(0.0, abs=1e-15)
    assert closed_form_vanilla_kernel(e, np.zeros(2)) == 0.0


def test_closed_form_kernel_scales_with_norms(rng):
    a = rng.standard_normal(9)
    b = rng.standard_normal(9)
    base = closed_form_vanilla_kernel(a, b)
    assert closed_form_vanilla_kernel(3.0 * a, 0.5 * b) == pytest.approx(1.5 * base)
    with pytest.raises(ConfigError):
        closed_form_vanilla_kernel(a, b[:5])


def test_kernel_columns_match_recursion(house8):
    img = noisy(house8)
    arch = vanilla_arch(8, 8, kernel_size=3)
    cols = kernel_columns(arch, img)
    result = ntk_recursion(arch, img)
    np.testing.assert_allclose(cols * result.scale_applied, result.theta.entries, atol=1e-12)


def test_kernel_columns_subset(house8):
    img = noisy(house8)
    arch = vanilla_arch(8, 8, kernel_size=5)
    full = kernel_columns(arch, img)
    picks = np.array([3, 17, 40])
    np.testing.assert_array_equal(kernel_columns(arch, img, picks), full[:, picks])
    with pytest.raises(ConfigError):
        kernel_columns(arch, img, np.array([64]))
    with pytest.raises(UnsupportedArchitectureError):
        kernel_columns(deep_vanilla_arch(8, 8, num_convs=3), img)


# ------------------------------------------------------------------- recursion


def test_theta_is_normalized_symmetric_psd(house8):
    result = ntk_recursion(vanilla_arch(8, 8, kernel_size=3), noisy(house8))
    theta = result.theta
    assert theta.symmetry_error() < 1e-12
    vals = np.linalg.eigvalsh(theta.entries)
    assert vals[-1] == pytest.approx(1.0, abs=1e-6)
    assert vals[0] > -1e-10
    assert result.scale_applied > 0


def test_recursion_requires_hidden_layer(house8):
    single = deep_vanilla_arch(8, 8, num_convs=2)
    ntk_recursion(single, house8)  # two convs is the minimum
    from ntkfilter.arch import ArchSpec, Conv

    lone = ArchSpec(layers=(Conv(3),), height=8, width=8)
    with pytest.raises(UnsupportedArchitectureError):
        ntk_recursion(lone, house8)


def test_recursion_shape_checks(house8, house16):
    arch = vanilla_arch(8, 8)
    with pytest.raises(ConfigError):
        ntk_recursion(arch, house16)


def test_theta_translation_equivariance(house8):
    arch = vanilla_arch(8, 8, kernel_size=3)
    img = noisy(house8)
    shifted_planes = np.roll(img.planes(), (2, 3), axis=(1, 2))
    shifted = ImageTensor(8, 8, shifted_planes.reshape(1, 64))
    theta = ntk_recursion(arch, img).theta.entries
    theta_s = ntk_recursion(arch, shifted).theta.entries
    # perm[i] is the source pixel that lands on shifted pixel i
    perm = np.roll(np.arange(64).reshape(8, 8), (2, 3), axis=(0, 1)).ravel()
    np.testing.assert_allclose(theta_s, theta[np.ix_(perm, perm)], atol=1e-9)


def test_theta_is_input_scale_invariant(house8):
    # relu is positively homogeneous, so rescaling the input only rescales
    # the kernel; the normalized filter is unchanged
    arch = vanilla_arch(8, 8, kernel_size=3)
    img = noisy(house8)
    doubled = ImageTensor(8, 8, 2.0 * img.data)
    a = ntk_recursion(arch, img)
    b = ntk_recursion(arch, doubled)
    np.testing.assert_allclose(a.theta.entries, b.theta.entries, atol=1e-9)
    assert b.scale_applied == pytest.approx(a.scale_applied / 4.0, rel=1e-6)


# ---------------------------------------------------------- forward covariance


def test_forward_covariance_layer_count(house16):
    img = noisy(house16)
    from ntkfilter.arch import autoencoder_arch

    sigmas = forward_covariance(autoencoder_arch(16, 16), img)
    assert len(sigmas) == 9
    dims = [s.dim for s in sigmas]
    # geometry shrinks to the bottleneck and climbs back out
    assert dims == [256, 64, 16, 4, 4, 16, 64, 256, 256]


def test_forward_covariance_first_layer_formula(house8):
    img = noisy(house8)
    arch = vanilla_arch(8, 8, kernel_size=3)
    sigmas = forward_covariance(arch, img)
    s0 = img.data.T @ img.data / img.channels
    want = arch.sigma_w_sq * a_map(s0, 3, (8, 8))
    np.testing.assert_allclose(sigmas[0].entries, want, atol=1e-12)
    # second conv: gain * patch average of the relu covariance
    want2 = arch.sigma_w_sq * a_map(v_map_relu(want, 1.0), 1, (8, 8))
    np.testing.assert_allclose(sigmas[1].entries, want2, atol=1e-12)


def test_forward_covariance_agrees_with_recursion_outputs(house8):
    img = noisy(house8)
    arch = deep_vanilla_arch(8, 8, num_convs=3)
    sigmas = forward_covariance(arch, img)
    result = ntk_recursion(arch, img)
    np.testing.assert_allclose(sigmas[-1].entries, result.sigma_output.entries, atol=1e-12)
    np.testing.assert_allclose(sigmas[-2].entries, result.sigma_a_last.entries, atol=1e-12)


def test_output_covariance_matches_sampled_networks(house8):
    # the vanilla stack's first preactivation is exactly Gaussian, so the
    # analytic output covariance is the exact expectation over random draws
    img = noisy(house8)
    arch = vanilla_arch(8, 8, kernel_size=3, output_channels=8)
    want = forward_covariance(arch, img)[-1].entries
    acc = np.zeros_like(want)
    n = 200
    for seed in range(n):
        state = init_state(arch, channels=128, seed=seed)
        z = forward(state, img)
        acc += z.T @ z  # output channels are iid draws of the same field
    mc = acc / (n * 8)
    rel = np.linalg.norm(mc - want) / np.linalg.norm(want)
    assert rel < 0.1


# --------------------------------------------------------- backward covariance


def test_backward_covariance_vanilla_hand_trace(house8, rng):
    img = noisy(house8)
    arch = vanilla_arch(8, 8, kernel_size=3)
    sigmas = [s.entries for s in forward_covariance(arch, img)]
    residual = rng.standard_normal((1, 64))
    channels = 32
    out = backward_covariance(arch, sigmas, residual, channels)
    assert len(out) == 1
    # walk the two layers above the hidden conv by hand: the 1x1 conv
    # contributes its gain over the width, the relu its derivative moment
    want = (arch.sigma_w_sq / channels) * vprime_map_relu(sigmas[0], 1.0) * (residual.T @ residual)
    np.testing.assert_allclose(out[0], want, atol=1e-12)


def test_backward_covariance_deep_stack_shapes(house16):
    img = noisy(house16)
    from ntkfilter.arch import autoencoder_arch

    arch = autoencoder_arch(16, 16)
    sigmas = [s.entries for s in forward_covariance(arch, img)]
    out = backward_covariance(arch, sigmas, img.data, channels=64)
    assert len(out) == 8  # every conv except the final 1x1 head
    dims = [m.shape[0] for m in out]
    assert dims == [256, 64, 16, 4, 4, 16, 64, 256]
    for m in out:
        assert np.all(np.isfinite(m))


def test_backward_covariance_validation(house8):
    arch = vanilla_arch(8, 8)
    sigmas = [s.entries for s in forward_covariance(arch, noisy(house8))]
    with pytest.raises(ConfigError):
        backward_covariance(arch, sigmas, np.zeros((1, 64)), channels=0)
    with pytest.raises(ConfigError):
        backward_covariance(arch, sigmas[:1], np.zeros((1, 64)), channels=4)
    with pytest.raises(ConfigError):
        backward_covariance(arch, sigmas, np.zeros((1, 32)), channels=4)
