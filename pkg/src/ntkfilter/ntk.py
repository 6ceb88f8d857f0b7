"""Infinite-width covariance and tangent-kernel recursions for conv stacks.

Walking the layer list once propagates two matrices side by side:

* the signal covariance S, which a conv maps to sigma_w_sq * A(S), a relu maps
  through the Gaussian relu moment E[relu(h) relu(h)^T], and a resample layer
  conjugates by its dense matrix;
* the tangent kernel T of the network output with respect to all weights so
  far (in the wide limit, already scaled by the 1/width learning-rate
  convention). Every conv adds its own-weight term, which equals the fresh
  preactivation covariance, on top of the backpropagated term
  sigma_w_sq * A(E[relu'(h) relu'(h)^T] o T).

The first conv is the one exception: its weight count stays proportional to
the fixed input channel count while every other layer grows with width, so
its own-weight term vanishes in the limit and T starts at zero there. For a
single hidden layer this leaves exactly the arc-cosine kernel of the input
patches, which ``kernel_columns`` evaluates directly without materializing
any d x d intermediates.

The returned kernel is scaled so its top eigenvalue is 1, which is the
natural normalization for using it as a smoothing filter; the applied factor
is kept so unscaled entries remain recoverable.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .arch import ArchSpec, Conv, Down, Relu, Up
from .errors import ConfigError, UnsupportedArchitectureError
from .images import ImageTensor
from .kernels import (
    KernelMatrix,
    ResampleOperator,
    a_map,
    resample_conjugate,
    v_map_relu,
    vprime_map_relu,
)


@dataclasses.dataclass(frozen=True)
class NtkResult:
    """Normalized tangent kernel plus the covariances needed by downstream analyses.

    theta has top eigenvalue 1 (within 1e-6); theta.entries / scale_applied
    recovers the unscaled recursion output. sigma_a_last is the preactivation
    covariance of the last hidden conv, sigma_output the covariance of the
    network output at initialization.
    """

    theta: KernelMatrix
    sigma_a_last: KernelMatrix
    sigma_output: KernelMatrix
    scale_applied: float


def _input_gram(arch: ArchSpec, image: ImageTensor) -> np.ndarray:
    if (image.height, image.width) != (arch.height, arch.width):
        raise ConfigError(
            f"image {image.height}x{image.width} does not match architecture "
            f"{arch.height}x{arch.width}"
        )
    if image.channels != arch.input_channels:
        raise ConfigError(
            f"image has {image.channels} channels, architecture expects {arch.input_channels}"
        )
    x = image.data
    return (x.T @ x) / float(image.channels)


def _walk_covariances(arch: ArchSpec, image: ImageTensor, with_tangent: bool):
    """Shared recursion core: returns (per-conv sigmas, final tangent or None)."""
    trace = arch.geometry_trace()
    sw2 = arch.sigma_w_sq
    s = _input_gram(arch, image)
    t = None
    first_conv_seen = False
    sigmas: list[np.ndarray] = []

    for layer, geom in zip(arch.layers, trace):
        if isinstance(layer, Conv):
            s_new = sw2 * a_map(s, layer.kernel_size, geom)
            if with_tangent:
                if not first_conv_seen:
                    t = np.zeros_like(s_new)
                else:
                    t = s_new + sw2 * a_map(t, layer.kernel_size, geom)
            first_conv_seen = True
            s = s_new
            sigmas.append(s)
        elif isinstance(layer, Relu):
            if with_tangent:
                t = vprime_map_relu(s, 1.0) * t
            s = v_map_relu(s, 1.0)
        elif isinstance(layer, (Down, Up)):
            direction = "down" if isinstance(layer, Down) else "up"
            op = ResampleOperator(direction=direction, kind=layer.mode, in_shape=geom)
            s = resample_conjugate(s, op)
            if with_tangent and t is not None:
                t = resample_conjugate(t, op)
        else:  # pragma: no cover - ArchSpec validation precludes this
            raise ConfigError(f"unknown layer {layer!r}")

    return sigmas, t


def forward_covariance(arch: ArchSpec, image: ImageTensor) -> list[KernelMatrix]:
    """Preactivation covariance of every conv layer, in layer order.

    The last entry is the covariance of the network output at initialization.
    """
    sigmas, _ = _walk_covariances(arch, image, with_tangent=False)
    return [KernelMatrix(0.5 * (s + s.T)) for s in sigmas]


def ntk_recursion(arch: ArchSpec, image: ImageTensor) -> NtkResult:
    """Wide-limit tangent kernel of the stack, scaled to top eigenvalue 1."""
    if arch.num_convs < 2:
        raise UnsupportedArchitectureError(
            "tangent-kernel recursion needs at least one hidden layer"
        )
    sigmas, t = _walk_covariances(arch, image, with_tangent=True)
    t = 0.5 * (t + t.T)  # kill accumulation round-off before the eigen solve
    top = float(np.linalg.eigvalsh(t)[-1])
    if top <= 0:
        raise ConfigError("tangent kernel has no positive eigenvalue")
    scale = 1.0 / top
    return NtkResult(
        theta=KernelMatrix(t * scale),
        sigma_a_last=KernelMatrix(0.5 * (sigmas[-2] + sigmas[-2].T)),
        sigma_output=KernelMatrix(0.5 * (sigmas[-1] + sigmas[-1].T)),
        scale_applied=scale,
    )


def patch_index_grid(height: int, width: int, kernel_size: int) -> np.ndarray:
    """Flat gather indices (pixels, r*r) of the periodic r x r patch around each pixel."""
    r = kernel_size
    p = r // 2
    ys = np.arange(height)[:, None, None, None]
    xs = np.arange(width)[None, :, None, None]
    dy = np.arange(-p, p + 1)[None, None, :, None]
    dx = np.arange(-p, p + 1)[None, None, None, :]
    idx = ((ys + dy) % height) * width + (xs + dx) % width
    return idx.reshape(height * width, r * r)


def extract_patches(image: ImageTensor, kernel_size: int) -> np.ndarray:
    """Raw periodic patches, shape (pixels, channels * r * r)."""
    idx = patch_index_grid(image.height, image.width, kernel_size)
    cols = image.data[:, idx]  # (channels, pixels, r*r)
    return np.moveaxis(cols, 0, 1).reshape(image.pixels, -1)


def closed_form_vanilla_kernel(a: np.ndarray, b: np.ndarray) -> float:
    """Arc-cosine affinity of two patch vectors.

    k(a, b) = ||a|| ||b|| / pi * (sin p + (pi - p) cos p) with p the angle
    between a and b. Identical unit-norm patches give 1, orthogonal ones give
    1/pi, opposite ones give 0.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigError(f"patch length mismatch: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    rho = float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    phi = np.arccos(rho)
    return na * nb / np.pi * (np.sin(phi) + (np.pi - phi) * rho)


def kernel_columns(
    arch: ArchSpec, image: ImageTensor, column_indices: np.ndarray | None = None
) -> np.ndarray:
    """Selected columns of the unscaled single-hidden-layer kernel, shape (d, m).

    Evaluates the arc-cosine closed form on periodic image patches with the
    exact constant that makes a full column set agree entry for entry with
    ``ntk_recursion`` before its eigenvalue normalization. Only the plain
    conv-relu-conv stack has this shortcut.
    """
    if not arch.is_single_hidden_conv():
        raise UnsupportedArchitectureError(
            "closed-form kernel columns require the conv-relu-conv stack"
        )
    if (image.height, image.width) != (arch.height, arch.width):
        raise ConfigError("image geometry does not match the architecture")
    if image.channels != arch.input_channels:
        raise ConfigError("image channels do not match the architecture")

    r = arch.layers[0].kernel_size
    d = image.pixels
    if column_indices is None:
        cols = np.arange(d)
    else:
        cols = np.asarray(column_indices, dtype=np.int64).ravel()
        if cols.size == 0 or cols.min() < 0 or cols.max() >= d:
            raise ConfigError("column indices out of range")

    patches = extract_patches(image, r)
    norms = np.linalg.norm(patches, axis=1)
    dots = patches @ patches[cols].T
    norm_prod = np.outer(norms, norms[cols])
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(norm_prod > 0, dots / norm_prod, 0.0)
    rho = np.clip(rho, -1.0, 1.0)
    phi = np.arccos(rho)
    plain = norm_prod / np.pi * (np.sin(phi) + (np.pi - phi) * rho)

    sw2 = arch.sigma_w_sq
    scale = sw2 * sw2 / (2.0 * r * r * image.channels)
    return scale * plain


def backward_covariance(
    arch: ArchSpec,
    sigmas: list[np.ndarray],
    residual: np.ndarray | ImageTensor,
    channels: int,
) -> list[np.ndarray]:
    """Gradient covariance at each hidden conv's preactivations, width-c scaling included.

    Starting from the squared-loss gradient at the output, whose covariance
    across channels is the residual Gram matrix, the walk back down applies
    sigma_w_sq * A per conv crossing (divided by the hidden width at the last
    conv, whose output fan is O(1) rather than O(c)), the relu derivative
    moment as a Hadamard factor, and transposed resampling congruences.

    Returns one matrix per hidden conv, in layer order (first conv first).
    """
    if channels < 1:
        raise ConfigError("channel count must be positive")
    if arch.num_convs < 2:
        raise UnsupportedArchitectureError("need at least one hidden layer")
    if len(sigmas) != arch.num_convs:
        raise ConfigError(f"expected {arch.num_convs} covariances, got {len(sigmas)}")

    if isinstance(residual, ImageTensor):
        res = residual.data
    else:
        res = np.atleast_2d(np.asarray(residual, dtype=np.float64))
    if res.shape[1] != arch.height * arch.width:
        raise ConfigError("residual does not match the output geometry")

    trace = arch.geometry_trace()
    sw2 = arch.sigma_w_sq
    d_cov = res.T @ res  # summed over output channels
    conv_positions = [i for i, l in enumerate(arch.layers) if isinstance(l, Conv)]
    last_conv = conv_positions[-1]

    out: list[np.ndarray] = []
    conv_idx = arch.num_convs - 1
    for pos in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[pos]
        geom = trace[pos]
        if isinstance(layer, Conv):
            conv_idx -= 1
            if pos == conv_positions[0]:
                break  # gradients below the first conv hit the fixed input, not weights
            d_cov = sw2 * a_map(d_cov, layer.kernel_size, geom)
            if pos == last_conv:
                d_cov = d_cov / float(channels)
        elif isinstance(layer, Relu):
            below = sigmas[conv_idx]
            d_cov = vprime_map_relu(below, 1.0) * d_cov
        elif isinstance(layer, (Down, Up)):
            direction = "down" if isinstance(layer, Down) else "up"
            op = ResampleOperator(direction=direction, kind=layer.mode, in_shape=geom)
            d_cov = op.apply_adjoint(op.apply_adjoint(d_cov).T)
        # capture the covariance once the walk reaches each hidden conv's output
        if conv_idx >= 0 and pos == conv_positions[conv_idx] + 1:
            out.append(0.5 * (d_cov + d_cov.T))

    out.reverse()
    return out
