"""Low-rank spectral approximation of a kernel filter from sampled columns.

The m sampled pixels are spread over the image with a stratified jittered
grid (each quadrant gets its quota, each sample sits in its own grid cell),
which in practice keeps the extended eigenvectors well conditioned compared
to plain uniform sampling.  Factorization follows the standard column
extension: eigendecompose the m x m block, then push the eigenvectors
through the d x m columns with a 1/lambda rescale.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .errors import ConfigError
from .kernels import load_rect_matrix, save_rect_matrix

EIGENVALUE_FLOOR_REL = 1e-10


@dataclasses.dataclass(frozen=True)
class NystromFactors:
    """Approximate eigensystem of a d x d kernel built from m columns.

    eigenvalues are sorted descending and rescaled so the largest is 1;
    eigenvalue_scale is the factor that was applied (raw = value / scale).
    eigenimages holds one length-d column per retained component; they are
    near-orthonormal but not exactly so (no re-orthogonalization is done).
    clipped counts m-block eigenvalues that came out negative and were set
    to zero before extension.
    """

    sample_indices: np.ndarray
    eigenvalues: np.ndarray
    eigenimages: np.ndarray
    eigenvalue_scale: float
    clipped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sample_indices", np.asarray(self.sample_indices, dtype=np.int64))
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=np.float64))
        object.__setattr__(self, "eigenimages", np.asarray(self.eigenimages, dtype=np.float64))
        if self.eigenimages.ndim != 2:
            raise ConfigError("eigenimages must be a (pixels, components) matrix")
        if self.eigenvalues.shape != (self.eigenimages.shape[1],):
            raise ConfigError("eigenvalue count does not match eigenimage columns")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ConfigError("eigenvalues must be sorted descending")

    @property
    def dim(self) -> int:
        return self.eigenimages.shape[0]

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    def reconstruct(self) -> np.ndarray:
        """Dense d x d filter V diag(lambda) V^T (diagnostic; O(d^2 m))."""
        return (self.eigenimages * self.eigenvalues) @ self.eigenimages.T

    def save(self, prefix: str) -> None:
        save_rect_matrix(self.eigenimages, f"{prefix}.eigenimages.bin")
        meta = {
            "sample_indices": self.sample_indices.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenvalue_scale": self.eigenvalue_scale,
            "clipped": self.clipped,
        }
        with open(f"{prefix}.meta.json", "w") as fh:
            json.dump(meta, fh)

    @classmethod
    def load(cls, prefix: str) -> "NystromFactors":
        images = load_rect_matrix(f"{prefix}.eigenimages.bin")
        with open(f"{prefix}.meta.json") as fh:
            meta = json.load(fh)
        return cls(
            sample_indices=np.asarray(meta["sample_indices"], dtype=np.int64),
            eigenvalues=np.asarray(meta["eigenvalues"], dtype=np.float64),
            eigenimages=images,
            eigenvalue_scale=float(meta["eigenvalue_scale"]),
            clipped=int(meta["clipped"]),
        )


def _jittered_pick(rng: np.random.Generator, ys, xs, count: int) -> list[tuple[int, int]]:
    """Pick `count` cells of a near-square grid over ys x xs, one point each."""
    if count <= 0:
        return []
    gy = max(1, int(np.round(np.sqrt(count * len(ys) / max(len(xs), 1)))))
    gx = int(np.ceil(count / gy))
    while gy * gx < count:
        gx += 1
    y_edges = np.linspace(0, len(ys), gy + 1).astype(int)
    x_edges = np.linspace(0, len(xs), gx + 1).astype(int)
    cells = [(iy, ix) for iy in range(gy) for ix in range(gx)]
    chosen = rng.permutation(len(cells))[:count]
    points = []
    for ci in chosen:
        iy, ix = cells[ci]
        y_lo, y_hi = y_edges[iy], max(y_edges[iy + 1], y_edges[iy] + 1)
        x_lo, x_hi = x_edges[ix], max(x_edges[ix + 1], x_edges[ix] + 1)
        y = ys[min(int(rng.integers(y_lo, y_hi)), len(ys) - 1)]
        x = xs[min(int(rng.integers(x_lo, x_hi)), len(xs) - 1)]
        points.append((y, x))
    return points


def sample_columns(d: int, geometry: tuple[int, int], fraction: float, seed: int = 0) -> np.ndarray:
    """m = max(1, round(fraction*d)) distinct pixel indices, spatially stratified.

    The image is split into quadrants; each quadrant receives floor(m/4)
    samples (the remainder goes to seed-chosen quadrants) placed on a
    jittered grid, so any 4-quadrant holds at least floor(m/4) samples.
    """
    h, w = geometry
    if h * w != d:
        raise ConfigError(f"geometry {h}x{w} does not match d={d}")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    m = max(1, int(round(fraction * d)))
    if m >= d:
        return np.arange(d, dtype=np.int64)
    rng = np.random.default_rng(seed)
    half_y, half_x = h // 2, w // 2
    quadrants = [
        (np.arange(0, half_y), np.arange(0, half_x)),
        (np.arange(0, half_y), np.arange(half_x, w)),
        (np.arange(half_y, h), np.arange(0, half_x)),
        (np.arange(half_y, h), np.arange(half_x, w)),
    ]
    quotas = [m // 4] * 4
    for qi in rng.permutation(4)[: m % 4]:
        quotas[qi] += 1
    seen: set[int] = set()
    for (ys, xs), quota in zip(quadrants, quotas):
        want = quota
        attempts = 0
        while want > 0 and attempts < 20:
            for y, x in _jittered_pick(rng, ys, xs, want):
                flat = int(y) * w + int(x)
                if flat not in seen:
                    seen.add(flat)
                    want -= 1
            attempts += 1
        if want > 0:
            pool = [int(y) * w + int(x) for y in ys for x in xs if int(y) * w + int(x) not in seen]
            for flat in rng.choice(len(pool), size=want, replace=False):
                seen.add(pool[int(flat)])
    return np.asarray(sorted(seen), dtype=np.int64)


def nystrom_factorize(theta_dm: np.ndarray, sample_indices) -> NystromFactors:
    """Extend the eigensystem of the sampled m x m block to all d pixels.

    Eigenvalues of the block are clipped at zero if slightly negative (count
    reported in the result), components below a 1e-10 relative floor are
    dropped, eigenimages are extended as sqrt(m/d) / lam_block * Theta_dm v,
    and the final eigenvalues are rescaled so the largest equals 1.
    """
    theta_dm = np.asarray(theta_dm, dtype=np.float64)
    idx = np.asarray(sample_indices, dtype=np.int64)
    if theta_dm.ndim != 2:
        raise ConfigError("theta_dm must be a (d, m) matrix")
    d, m = theta_dm.shape
    if idx.shape != (m,):
        raise ConfigError(f"expected {m} sample indices, got {idx.shape}")
    if idx.min() < 0 or idx.max() >= d:
        raise ConfigError("sample indices out of range")
    block = theta_dm[idx, :]
    block = 0.5 * (block + block.T)
    vals, vecs = np.linalg.eigh(block)
    vals = vals[::-1]
    vecs = vecs[:, ::-1]
    clipped = int(np.sum(vals < 0))
    vals = np.maximum(vals, 0.0)
    if vals[0] <= 0:
        raise ConfigError("sampled kernel block has no positive eigenvalue")
    keep = vals > EIGENVALUE_FLOOR_REL * vals[0]
    vals = vals[keep]
    vecs = vecs[:, keep]
    images = np.sqrt(m / d) * (theta_dm @ (vecs / vals))
    lam = (d / m) * vals
    scale = 1.0 / lam[0]
    return NystromFactors(
        sample_indices=idx,
        eigenvalues=lam * scale,
        eigenimages=images,
        eigenvalue_scale=scale,
        clipped=clipped,
    )
