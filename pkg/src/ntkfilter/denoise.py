"""Iterative filtering on top of a fixed kernel: twicing in matrix and
spectral form, the bias/variance MSE predictor, a GP posterior-mean denoiser,
and a non-local-means baseline filter.

Twicing runs z_{t+1} = z_t + W(y - z_t) from z_0 = 0, trading bias for
variance as t grows; the spectral form evaluates the same iterates in closed
form from an eigensystem, so large t costs nothing.  All filters act
per-channel with the same matrix.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

from .errors import ConfigError, DivergenceError
from .images import ImageTensor, psnr
from .kernels import KernelMatrix
from .ntk import patch_index_grid
from .nystrom import NystromFactors

TWICING_PATIENCE = 50


@dataclasses.dataclass
class TwicingTrace:
    """Iteration history of a twicing run, with the best iterate kept."""

    iterations: list[int]
    psnrs: list[float]
    residuals: list[float]
    best_iteration: int
    best_output: ImageTensor

    def best_psnr(self) -> float:
        return max(self.psnrs)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,psnr_db,residual_l2\n")
            for t, p, r in zip(self.iterations, self.psnrs, self.residuals):
                fh.write(f"{t},{p:.6f},{r:.8e}\n")


def _check_pair(y: ImageTensor, oracle: ImageTensor) -> None:
    if (y.height, y.width, y.channels) != (oracle.height, oracle.width, oracle.channels):
        raise ConfigError("noisy image and oracle disagree in shape")


def _spectral_radius(w: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    """Dominant eigenvalue magnitude by power iteration (W need not be symmetric)."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(w.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        wv = w @ v
        norm = float(np.linalg.norm(wv))
        if norm == 0.0:
            return 0.0
        lam = float(v @ wv)
        v = wv / norm
    return abs(lam)


def twicing_matrix(
    w: KernelMatrix,
    y: ImageTensor,
    oracle: ImageTensor,
    max_iters: int = 500,
    patience: int = TWICING_PATIENCE,
) -> TwicingTrace:
    """Run the matrix-form iteration, early-stopped on oracle PSNR.

    Stops once the best PSNR has not improved for `patience` iterations.
    Filters with spectral radius above 2 make the iteration diverge and are
    rejected up front.
    """
    _check_pair(y, oracle)
    if w.dim != y.pixels:
        raise ConfigError(f"filter dimension {w.dim} does not match image pixels {y.pixels}")
    radius = _spectral_radius(w.entries)
    if radius > 2.0 - 1e-6:
        raise DivergenceError(f"filter spectral radius {radius:.6f} exceeds the stability bound 2")
    z = np.zeros_like(y.data)
    iterations, psnrs, residuals = [], [], []
    best_t, best_psnr, best_z = 0, -np.inf, z.copy()
    for t in range(1, max_iters + 1):
        z = z + (y.data - z) @ w.entries.T
        est = ImageTensor(height=y.height, width=y.width, data=z)
        p = psnr(est, oracle)
        iterations.append(t)
        psnrs.append(p)
        residuals.append(float(np.linalg.norm(y.data - z)))
        if p > best_psnr:
            best_t, best_psnr, best_z = t, p, z.copy()
        if t - best_t >= patience:
            break
    return TwicingTrace(
        iterations=iterations,
        psnrs=psnrs,
        residuals=residuals,
        best_iteration=best_t,
        best_output=ImageTensor(height=y.height, width=y.width, data=best_z),
    )


def _spectral_output(factors: NystromFactors, proj: np.ndarray, t: int) -> np.ndarray:
    gain = 1.0 - (1.0 - factors.eigenvalues) ** t
    return (factors.eigenimages * gain) @ proj


def twicing_spectral(
    factors: NystromFactors,
    y: ImageTensor,
    oracle: ImageTensor,
    max_iters: int = 4096,
) -> TwicingTrace:
    """Evaluate twicing iterates in closed form on a geometric t grid.

    Scans t in {1, 2, 4, ...} up to max_iters, then refines linearly around
    the best coarse t.  Each evaluation is O(d * rank), so the grid is scanned
    exhaustively instead of early-stopping.
    """
    _check_pair(y, oracle)
    if factors.dim != y.pixels:
        raise ConfigError(f"factor dimension {factors.dim} does not match image pixels {y.pixels}")
    proj = factors.eigenimages.T @ y.data.T  # (rank, channels)
    coarse: list[int] = []
    t = 1
    while t < max_iters:
        coarse.append(t)
        t *= 2
    coarse.append(max_iters)

    seen: dict[int, tuple[float, float]] = {}

    def evaluate(step: int) -> float:
        if step in seen:
            return seen[step][0]
        z = _spectral_output(factors, proj, step).T
        est = ImageTensor(height=y.height, width=y.width, data=z)
        p = psnr(est, oracle)
        seen[step] = (p, float(np.linalg.norm(y.data - z)))
        return p

    for step in coarse:
        evaluate(step)
    best_t = max(seen, key=lambda s: seen[s][0])
    lo = max(1, best_t // 2)
    hi = min(max_iters, best_t * 2)
    stride = max(1, (hi - lo) // 256)
    for step in range(lo, hi + 1, stride):
        evaluate(step)
    best_t = max(seen, key=lambda s: seen[s][0])
    order = sorted(seen)
    best_z = _spectral_output(factors, proj, best_t).T
    return TwicingTrace(
        iterations=order,
        psnrs=[seen[s][0] for s in order],
        residuals=[seen[s][1] for s in order],
        best_iteration=best_t,
        best_output=ImageTensor(height=y.height, width=y.width, data=best_z),
    )


def predict_mse(eigvals: np.ndarray, eigvecs: np.ndarray, clean: ImageTensor, sigma: float, t: int) -> float:
    """Closed-form expected MSE of the twicing iterate z_t on noisy input.

    Sums squared bias (unfitted part of the clean image) and accumulated
    noise variance over eigencomponents, averaged per pixel and channel.
    sigma is in 8-bit units, like NoiseModel.
    """
    lam = np.asarray(eigvals, dtype=np.float64)
    v = np.asarray(eigvecs, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != clean.pixels or v.shape[1] != lam.size:
        raise ConfigError("eigensystem shape does not match the image")
    decay = (1.0 - lam) ** t
    gain = 1.0 - decay
    sigma_unit = sigma / 255.0
    total = 0.0
    for plane in clean.data:
        coeffs = v.T @ plane
        total += float(np.sum(decay * decay * coeffs * coeffs))
        total += float(np.sum(gain * gain)) * sigma_unit * sigma_unit
    return total / (clean.pixels * clean.channels)


def gp_posterior(
    sigma_z: KernelMatrix,
    y: ImageTensor,
    sigma_noise: float,
    with_variance: bool = False,
):
    """Posterior mean under a Gaussian-process prior with covariance sigma_z.

    Solves (sigma_z + sigma_n^2 I) s = y per channel and returns sigma_z s,
    the stable form of the usual posterior mean.  sigma_noise is in 8-bit
    units.  A singular system gets a 1e-8 ridge with a warning.
    """
    if sigma_z.dim != y.pixels:
        raise ConfigError(f"prior dimension {sigma_z.dim} does not match image pixels {y.pixels}")
    if sigma_noise < 0:
        raise ConfigError(f"noise level must be non-negative, got {sigma_noise}")
    sn2 = (sigma_noise / 255.0) ** 2
    system = sigma_z.entries + sn2 * np.eye(sigma_z.dim)
    try:
        solved = np.linalg.solve(system, y.data.T)
    except np.linalg.LinAlgError:
        warnings.warn("singular posterior system; adding 1e-8 ridge", RuntimeWarning)
        system = system + 1e-8 * np.eye(sigma_z.dim)
        solved = np.linalg.solve(system, y.data.T)
    mean = (sigma_z.entries @ solved).T
    image = ImageTensor(height=y.height, width=y.width, data=mean)
    if not with_variance:
        return image
    inv_cols = np.linalg.solve(system, sigma_z.entries)
    variance = np.diag(sigma_z.entries) - np.einsum("ij,ji->i", sigma_z.entries, inv_cols)
    return image, variance


@dataclasses.dataclass(frozen=True)
class NlmParams:
    """Non-local-means settings: global search, row-stochastic normalization."""

    bandwidth: float
    patch_radius: int = 3
    search: str = "global"
    normalization: str = "row_stochastic"

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.patch_radius < 0:
            raise ConfigError(f"patch radius must be non-negative, got {self.patch_radius}")
        if self.search != "global":
            raise ConfigError("only global search is implemented")
        if self.normalization != "row_stochastic":
            raise ConfigError("only row-stochastic normalization is implemented")


def nlm_filter(y: ImageTensor, params: NlmParams) -> KernelMatrix:
    """Global NLM affinity matrix with row-stochastic normalization.

    Affinities are Gaussian in the squared patch distance.  For color images
    the distances are computed on luminance; the resulting filter is applied
    to each channel.  Note the returned matrix is not symmetric (each row is
    scaled by its own sum).
    """
    if y.channels == 3:
        lum = 0.299 * y.data[0] + 0.587 * y.data[1] + 0.114 * y.data[2]
    else:
        lum = y.data[0]
    r = 2 * params.patch_radius + 1
    idx = patch_index_grid(y.height, y.width, r)
    patches = lum[idx]  # (pixels, r*r)
    sq = np.sum(patches * patches, axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * (patches @ patches.T)
    np.maximum(dist, 0.0, out=dist)
    w = np.exp(-dist / params.bandwidth)
    w /= w.sum(axis=1, keepdims=True)
    return KernelMatrix(w)
