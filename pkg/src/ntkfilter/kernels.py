"""Covariance maps for wide convolutional networks on the pixel torus.

All operators act on d x d covariance matrices whose rows/columns index the
pixels of an h x w image (row-major), with periodic boundary handling
throughout so every map commutes with cyclic translations.

The three building blocks:

* ``a_map``: the action of a random convolution layer on a covariance.
  For weights w with iid entries of variance s/r^2, E[(Wx)(Wx)^T] averages
  the input covariance over matched patch offsets:

      [A(S)]_{ij} = (1/r^2) * sum_{u in window} S[i + u, j + u]

  where the window is the r x r offset grid and indices wrap. Constant
  matrices are fixed points and the identity maps to itself.

* ``v_map_relu`` / ``vprime_map_relu``: the Gaussian expectations of
  relu(h) relu(h)^T and relu'(h) relu'(h)^T under h ~ N(0, S), scaled by the
  weight variance gain sigma_w_sq. With the default sigma_w_sq = 2 the relu
  closed forms reduce to

      V(S)_{mn}  = sqrt(S_mm S_nn) / pi * (sin p + (pi - p) cos p)
      V'(S)_{mn} = 1 - p / pi,       p = arccos(S_mn / sqrt(S_mm S_nn))

  which preserve a unit diagonal layer to layer.

* ``ResampleOperator``: dense factor-2 down/up sampling matrices (nearest or
  bilinear, periodic), applied to covariances by congruence M S M^T.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np

from .errors import ConfigError

_HEADER = struct.Struct("<Q")  # matrix dimension, little-endian uint64

# arccos arguments are clipped to [-1, 1]; anything further out than this
# is treated as a real inconsistency rather than round-off.
RHO_CLIP_TOL = 1e-12


@dataclasses.dataclass(frozen=True)
class KernelMatrix:
    """A symmetric d x d kernel/covariance matrix with serialization helpers."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ConfigError(f"kernel matrix must be square, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ConfigError("kernel matrix contains non-finite entries")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def symmetry_error(self) -> float:
        """Largest absolute asymmetry, relative to the largest entry."""
        scale = max(float(np.max(np.abs(self.entries))), 1e-300)
        return float(np.max(np.abs(self.entries - self.entries.T))) / scale

    def check_symmetric(self, tol: float = 1e-10) -> None:
        err = self.symmetry_error()
        if err > tol:
            raise ConfigError(f"matrix is not symmetric (relative error {err:.3e})")

    def min_eigenvalue(self) -> float:
        sym = 0.5 * (self.entries + self.entries.T)
        return float(np.linalg.eigvalsh(sym)[0])

    def save(self, path) -> None:
        """Binary layout: 8-byte little-endian dimension, then float64 entries row-major."""
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(self.dim))
            fh.write(np.ascontiguousarray(self.entries, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "KernelMatrix":
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            if len(head) != _HEADER.size:
                raise ConfigError(f"{path}: truncated header")
            (dim,) = _HEADER.unpack(head)
            body = fh.read()
        expect = dim * dim * 8
        if len(body) != expect:
            raise ConfigError(f"{path}: expected {expect} payload bytes, found {len(body)}")
        entries = np.frombuffer(body, dtype="<f8").reshape(dim, dim)
        return cls(entries=entries)

    def to_csv(self, path) -> None:
        """Plain CSV export, intended for small matrices only."""
        np.savetxt(path, self.entries, delimiter=",", fmt="%.17g")


def save_rect_matrix(array: np.ndarray, path) -> None:
    """Rectangular companion format: two uint64 (rows, cols), then float64 row-major."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"expected a 2-d array, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_rect_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16:
            raise ConfigError(f"{path}: truncated header")
        rows, cols = struct.unpack("<QQ", head)
        body = fh.read()
    if len(body) != rows * cols * 8:
        raise ConfigError(f"{path}: payload size does not match {rows}x{cols}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()


def _as_array(sigma) -> np.ndarray:
    if isinstance(sigma, KernelMatrix):
        return sigma.entries
    arr = np.asarray(sigma, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ConfigError(f"expected a square matrix, got shape {arr.shape}")
    return arr


def _check_geometry(dim: int, geometry: tuple[int, int]) -> tuple[int, int]:
    h, w = int(geometry[0]), int(geometry[1])
    if h <= 0 or w <= 0 or h * w != dim:
        raise ConfigError(f"geometry {h}x{w} does not match matrix dimension {dim}")
    return h, w


def strided_indices(geometry: tuple[int, int]) -> np.ndarray:
    """Flat pixel indices of the stride-2 output grid (even rows and columns)."""
    h, w = geometry
    ys = np.arange(0, h, 2)
    xs = np.arange(0, w, 2)
    return (ys[:, None] * w + xs[None, :]).ravel()


def a_map(sigma, kernel_size: int, geometry: tuple[int, int], stride: int = 1) -> np.ndarray:
    """Patch-average a covariance over matched r x r offsets, wrapping at borders.

    With stride 2 the same sums are evaluated only at pixels of the even
    subgrid, so the result is (d/4) x (d/4) for even image sides.
    """
    arr = _as_array(sigma)
    h, w = _check_geometry(arr.shape[0], geometry)
    r = int(kernel_size)
    if r < 1 or r % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {r}")
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")

    if r == 1:
        out = arr.copy()
    else:
        p = r // 2
        four = arr.reshape(h, w, h, w)
        acc = np.zeros_like(four)
        for dy in range(-p, p + 1):
            for dx in range(-p, p + 1):
                acc += np.roll(four, (-dy, -dx, -dy, -dx), axis=(0, 1, 2, 3))
        out = acc.reshape(h * w, h * w) / float(r * r)

    if stride == 2:
        if h % 2 or w % 2:
            raise ConfigError(f"stride-2 output needs even image sides, got {h}x{w}")
        keep = strided_indices((h, w))
        out = out[np.ix_(keep, keep)]
    return out


def _correlation(sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a covariance into (scale_ij, rho_ij, alive mask) with degenerate rows zeroed."""
    diag = np.diag(sigma).copy()
    tol = RHO_CLIP_TOL * max(float(np.max(np.abs(diag))), 1.0)
    if np.any(diag < -tol):
        raise ConfigError("covariance has a negative diagonal entry")
    alive = diag > tol
    safe = np.where(alive, diag, 1.0)
    scale = np.sqrt(np.outer(safe, safe))
    rho = np.clip(sigma / scale, -1.0, 1.0)
    mask = np.outer(alive, alive)
    scale = np.where(mask, np.sqrt(np.outer(np.where(alive, diag, 0.0), np.where(alive, diag, 0.0))), 0.0)
    rho = np.where(mask, rho, 0.0)
    return scale, rho, alive


def v_map_relu(sigma, sigma_w_sq: float = 2.0) -> np.ndarray:
    """Covariance of sqrt(sigma_w_sq) * relu(h) for h ~ N(0, sigma), entrywise closed form.

    Rows and columns with zero variance map to zero (relu of an a.s. zero
    variable). sigma_w_sq = 2 keeps a unit diagonal fixed.
    """
    arr = _as_array(sigma)
    scale, rho, _ = _correlation(arr)
    phi = np.arccos(rho)
    out = (sigma_w_sq / 2.0) * (scale / np.pi) * (np.sin(phi) + (np.pi - phi) * np.cos(phi))
    return out


def vprime_map_relu(sigma, sigma_w_sq: float = 2.0) -> np.ndarray:
    """Second moment of sqrt(sigma_w_sq) * relu'(h), i.e. scaled orthant probabilities.

    Entry (m, n) is sigma_w_sq * P(h_m > 0, h_n > 0); with sigma_w_sq = 2 this
    is 1 - arccos(rho)/pi. Degenerate rows map to zero.
    """
    arr = _as_array(sigma)
    _, rho, alive = _correlation(arr)
    phi = np.arccos(rho)
    out = (sigma_w_sq / 2.0) * (1.0 - phi / np.pi)
    mask = np.outer(alive, alive)
    return np.where(mask, out, 0.0)


def _down_1d(n: int, kind: str) -> np.ndarray:
    if n % 2:
        raise ConfigError(f"factor-2 downsampling needs an even side, got {n}")
    m = np.zeros((n // 2, n))
    rows = np.arange(n // 2)
    if kind == "nearest":
        m[rows, 2 * rows] = 1.0
    else:  # bilinear: sample midway between pixel centers = pairwise average
        m[rows, 2 * rows] = 0.5
        m[rows, (2 * rows + 1) % n] = 0.5
    return m


def _up_1d(n: int, kind: str) -> np.ndarray:
    m = np.zeros((2 * n, n))
    rows = np.arange(n)
    if kind == "nearest":
        m[2 * rows, rows] = 1.0
        m[2 * rows + 1, rows] = 1.0
    else:  # bilinear with wrap: output samples sit a quarter pixel off-center
        m[2 * rows, rows] = 0.75
        m[2 * rows, (rows - 1) % n] = 0.25
        m[2 * rows + 1, rows] = 0.75
        m[2 * rows + 1, (rows + 1) % n] = 0.25
    return m


def _down_axis(arr: np.ndarray, axis: int, kind: str) -> np.ndarray:
    """Apply the 1-d factor-2 downsampling stencil along one axis."""
    if arr.shape[axis] % 2:
        raise ConfigError(f"factor-2 downsampling needs an even side, got {arr.shape[axis]}")
    moved = np.moveaxis(arr, axis, -1)
    if kind == "nearest":
        out = moved[..., ::2].copy()
    else:
        out = 0.5 * (moved[..., ::2] + moved[..., 1::2])
    return np.moveaxis(out, -1, axis)


def _up_axis(arr: np.ndarray, axis: int, kind: str) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    n = moved.shape[-1]
    out = np.empty(moved.shape[:-1] + (2 * n,), dtype=arr.dtype)
    if kind == "nearest":
        out[..., ::2] = moved
        out[..., 1::2] = moved
    else:
        out[..., ::2] = 0.75 * moved + 0.25 * np.roll(moved, 1, axis=-1)
        out[..., 1::2] = 0.75 * moved + 0.25 * np.roll(moved, -1, axis=-1)
    return np.moveaxis(out, -1, axis)


def _down_axis_adjoint(arr: np.ndarray, axis: int, kind: str) -> np.ndarray:
    """Transpose of _down_axis: scatter back to the fine grid."""
    moved = np.moveaxis(arr, axis, -1)
    n = moved.shape[-1]
    out = np.zeros(moved.shape[:-1] + (2 * n,), dtype=arr.dtype)
    if kind == "nearest":
        out[..., ::2] = moved
    else:
        out[..., ::2] = 0.5 * moved
        out[..., 1::2] = 0.5 * moved
    return np.moveaxis(out, -1, axis)


def _up_axis_adjoint(arr: np.ndarray, axis: int, kind: str) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    even = moved[..., ::2]
    odd = moved[..., 1::2]
    if kind == "nearest":
        out = even + odd
    else:
        out = 0.75 * (even + odd) + 0.25 * (np.roll(even, -1, axis=-1) + np.roll(odd, 1, axis=-1))
    return np.moveaxis(out, -1, axis)


@dataclasses.dataclass(frozen=True)
class ResampleOperator:
    """Factor-2 resampling on the pixel torus.

    direction 'down' halves both sides (pixel count / 4), 'up' doubles them.
    Both kinds have rows summing to 1, so constants are preserved exactly.
    ``matrix`` materializes the dense form; ``apply``/``apply_adjoint`` use the
    equivalent separable stencils, which is what the heavy code paths call.
    """

    direction: str
    kind: str
    in_shape: tuple[int, int]

    def __post_init__(self):
        if self.direction not in ("down", "up"):
            raise ConfigError(f"direction must be 'down' or 'up', got {self.direction!r}")
        if self.kind not in ("nearest", "bilinear"):
            raise ConfigError(f"kind must be 'nearest' or 'bilinear', got {self.kind!r}")
        h, w = self.in_shape
        if self.direction == "down" and (h % 2 or w % 2):
            raise ConfigError(f"downsampling needs even sides, got {h}x{w}")

    @property
    def out_shape(self) -> tuple[int, int]:
        h, w = self.in_shape
        if self.direction == "down":
            return (h // 2, w // 2)
        return (2 * h, 2 * w)

    @property
    def in_dim(self) -> int:
        return self.in_shape[0] * self.in_shape[1]

    @property
    def out_dim(self) -> int:
        oh, ow = self.out_shape
        return oh * ow

    def matrix(self) -> np.ndarray:
        h, w = self.in_shape
        if self.direction == "down":
            my, mx = _down_1d(h, self.kind), _down_1d(w, self.kind)
        else:
            my, mx = _up_1d(h, self.kind), _up_1d(w, self.kind)
        return np.kron(my, mx)

    def apply(self, signal: np.ndarray) -> np.ndarray:
        """Resample signals of shape (..., in_dim); returns (..., out_dim)."""
        h, w = self.in_shape
        lead = signal.shape[:-1]
        if signal.shape[-1] != self.in_dim:
            raise ConfigError(f"signal length {signal.shape[-1]} does not match {h}x{w}")
        planes = signal.reshape(lead + (h, w))
        step = _down_axis if self.direction == "down" else _up_axis
        planes = step(planes, -2, self.kind)
        planes = step(planes, -1, self.kind)
        return planes.reshape(lead + (self.out_dim,))

    def apply_adjoint(self, signal: np.ndarray) -> np.ndarray:
        """Transpose action, mapping (..., out_dim) back to (..., in_dim)."""
        oh, ow = self.out_shape
        lead = signal.shape[:-1]
        if signal.shape[-1] != self.out_dim:
            raise ConfigError(f"signal length {signal.shape[-1]} does not match {oh}x{ow}")
        planes = signal.reshape(lead + (oh, ow))
        step = _down_axis_adjoint if self.direction == "down" else _up_axis_adjoint
        planes = step(planes, -2, self.kind)
        planes = step(planes, -1, self.kind)
        return planes.reshape(lead + (self.in_dim,))


def resample_conjugate(sigma, op: ResampleOperator) -> np.ndarray:
    """Push a covariance through a resampling layer: M sigma M^T."""
    arr = _as_array(sigma)
    if arr.shape[0] != op.in_dim:
        raise ConfigError(f"matrix dimension {arr.shape[0]} does not match operator input {op.in_dim}")
    return op.apply(op.apply(arr).T)
