"""Finite-width CNN simulator with plain numpy autodiff.

Implements the same layer vocabulary as the analytic engine: periodic
convolutions, relu, and factor-2 resampling, all acting on flat (channels,
pixels) signals.  Convolutions use im2col gathers so the inner loops are
single BLAS calls.  Backprop is hand-written per layer, which keeps the
dependency footprint at numpy and makes the batched-cotangent path (used for
empirical kernels) a small extension of the training path.

Initialization draws iid Gaussian weights with variance sigma_w_sq divided by
the fan-in (kernel taps times input channels), and gradient descent uses a
learning rate proportional to 1/channels, so wide networks approach the
analytic kernel regime computed in :mod:`ntkfilter.ntk`.
"""

from __future__ import annotations

import dataclasses
from functools import lru_cache

import numpy as np

from .arch import ArchSpec, Conv, Down, Relu, Up
from .errors import ConfigError, DivergenceError
from .images import ImageTensor, psnr
from .kernels import KernelMatrix, ResampleOperator, a_map
from .ntk import patch_index_grid

EMPIRICAL_NTK_MAX_PIXELS = 256


@lru_cache(maxsize=64)
def _conv_indices(height: int, width: int, kernel_size: int) -> np.ndarray:
    idx = patch_index_grid(height, width, kernel_size)
    idx.setflags(write=False)
    return idx


def _resample_op(layer: Down | Up, geom: tuple[int, int]) -> ResampleOperator:
    direction = "down" if isinstance(layer, Down) else "up"
    return ResampleOperator(direction=direction, kind=layer.mode, in_shape=geom)


def _conv_forward(signal: np.ndarray, weight: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Periodic convolution of a (c_in, d) signal; returns (out, gathered cols).

    weight has shape (c_out, c_in, taps) with taps in the row-major order of
    the centered offset grid, matching patch_index_grid.
    """
    c_in, d = signal.shape
    c_out = weight.shape[0]
    taps = weight.shape[2]
    cols = signal[:, idx]  # (c_in, d, taps)
    flat = cols.transpose(1, 0, 2).reshape(d, c_in * taps)
    out = flat @ weight.reshape(c_out, c_in * taps).T
    return out.T.copy(), cols


def _conv_weight_grad(grad_out: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """d(loss)/d(weight) given the output cotangent and cached input columns."""
    c_in, d, taps = cols.shape
    flat = cols.transpose(1, 0, 2).reshape(d, c_in * taps)
    return (grad_out @ flat).reshape(grad_out.shape[0], c_in, taps)


def _conv_input_grad(grad_out: np.ndarray, weight: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Propagate a (c_out, d) cotangent through the convolution.

    The adjoint of gathering pixel p + delta is gathering p - delta; for the
    centered tap grid that is the tap order reversed.
    """
    c_out, c_in, taps = weight.shape
    d = grad_out.shape[1]
    gathered = grad_out[:, idx[:, ::-1]]  # (c_out, d, taps), tap a reads p - delta_a
    flat = gathered.transpose(1, 0, 2).reshape(d, c_out * taps)
    w_flat = weight.transpose(1, 0, 2).reshape(c_in, c_out * taps)
    return (flat @ w_flat.T).T.copy()


def _conv_input_grad_batched(grad_out: np.ndarray, weight: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Same as _conv_input_grad for a (batch, c_out, d) stack of cotangents.

    Loops over taps to keep the gathered temporaries at one tap's footprint.
    """
    batch, c_out, d = grad_out.shape
    c_in = weight.shape[1]
    taps = weight.shape[2]
    out = np.zeros((batch, c_in, d))
    for a in range(taps):
        gathered = grad_out[:, :, idx[:, taps - 1 - a]]  # (batch, c_out, d)
        out += np.tensordot(weight[:, :, a], gathered, axes=([0], [1])).transpose(1, 0, 2)
    return out


@dataclasses.dataclass
class FiniteCnnState:
    """Weights, the fixed training input, and metadata for one sampled network."""

    arch: ArchSpec
    channels: int
    weights: list[np.ndarray]
    seed: int
    input: np.ndarray | None = None
    skip_connections: bool = False

    def copy(self) -> "FiniteCnnState":
        return FiniteCnnState(
            arch=self.arch,
            channels=self.channels,
            weights=[w.copy() for w in self.weights],
            seed=self.seed,
            input=None if self.input is None else self.input.copy(),
            skip_connections=self.skip_connections,
        )

    def weight_norms(self) -> list[float]:
        return [float(np.linalg.norm(w)) for w in self.weights]


def channel_plan(arch: ArchSpec, channels: int) -> list[tuple[int, int]]:
    """(c_in, c_out) per convolution, reading geometry from the arch."""
    convs = arch.conv_layers()
    plan = []
    for i in range(len(convs)):
        c_in = arch.input_channels if i == 0 else channels
        c_out = arch.output_channels if i == len(convs) - 1 else channels
        plan.append((c_in, c_out))
    return plan


def init_state(
    arch: ArchSpec,
    channels: int,
    seed: int = 0,
    x=None,
    skip_connections: bool = False,
) -> FiniteCnnState:
    """Sample iid Gaussian weights with variance sigma_w_sq / fan_in.

    x, when given, is stored on the state as the network's fixed input and
    becomes the default for forward/train/empirical_ntk.
    """
    if channels < 1:
        raise ConfigError(f"channels must be positive, got {channels}")
    if skip_connections and not any(isinstance(l, Down) for l in arch.layers):
        raise ConfigError("skip connections need matching down/up pairs")
    rng = np.random.default_rng(seed)
    weights = []
    convs = arch.conv_layers()
    for (c_in, c_out), conv in zip(channel_plan(arch, channels), convs):
        taps = conv.kernel_size * conv.kernel_size
        std = np.sqrt(arch.sigma_w_sq / (taps * c_in))
        weights.append(std * rng.standard_normal((c_out, c_in, taps)))
    stored = None if x is None else _signal_from_input(arch, x)
    return FiniteCnnState(
        arch=arch,
        channels=channels,
        weights=weights,
        seed=seed,
        input=stored,
        skip_connections=skip_connections,
    )


def _resolve_input(state: FiniteCnnState, x) -> np.ndarray:
    if x is None:
        if state.input is None:
            raise ConfigError("no input given and the state stores none")
        return state.input
    return _signal_from_input(state.arch, x)


def _signal_from_input(arch: ArchSpec, x) -> np.ndarray:
    if isinstance(x, ImageTensor):
        if (x.height, x.width) != (arch.height, arch.width):
            raise ConfigError(
                f"input geometry {x.height}x{x.width} does not match arch {arch.height}x{arch.width}"
            )
        if x.channels != arch.input_channels:
            raise ConfigError(f"input has {x.channels} channels, arch expects {arch.input_channels}")
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape != (arch.input_channels, arch.height * arch.width):
        raise ConfigError(
            f"expected input shape ({arch.input_channels}, {arch.height * arch.width}), got {arr.shape}"
        )
    return arr


def forward(state: FiniteCnnState, x=None, want_cache: bool = False):
    """Run the network; returns the (c_out, d) output, plus caches if asked.

    x defaults to the state's stored input.  The cache holds per-layer input
    signals, conv im2col columns, relu masks, and the skip stack bookkeeping
    needed by backward().
    """
    arch = state.arch
    signal = _resolve_input(state, x)
    trace = arch.geometry_trace()
    cache = {"inputs": [], "cols": {}, "masks": {}, "skips": {}}
    skip_stack: list[tuple[int, np.ndarray]] = []
    conv_i = 0
    for pos, (layer, geom) in enumerate(zip(arch.layers, trace)):
        cache["inputs"].append(signal if want_cache else None)
        if isinstance(layer, Conv):
            idx = _conv_indices(geom[0], geom[1], layer.kernel_size)
            signal, cols = _conv_forward(signal, state.weights[conv_i], idx)
            if want_cache:
                cache["cols"][pos] = cols
            conv_i += 1
        elif isinstance(layer, Relu):
            mask = signal > 0.0
            if want_cache:
                cache["masks"][pos] = mask
            signal = np.where(mask, signal, 0.0)
        elif isinstance(layer, Down):
            if state.skip_connections:
                skip_stack.append((pos, signal))
            signal = _resample_op(layer, geom).apply(signal)
        elif isinstance(layer, Up):
            signal = _resample_op(layer, geom).apply(signal)
            if state.skip_connections:
                src_pos, skip = skip_stack.pop()
                if skip.shape != signal.shape:
                    raise ConfigError("skip connection shape mismatch; down/up pairs are unbalanced")
                signal = signal + skip
                cache["skips"][pos] = src_pos
    if want_cache:
        return signal, cache
    return signal


def backward(state: FiniteCnnState, cache: dict, grad_out: np.ndarray) -> list[np.ndarray]:
    """Weight gradients for a scalar loss with d(loss)/d(output) = grad_out."""
    arch = state.arch
    trace = arch.geometry_trace()
    grads: list[np.ndarray | None] = [None] * len(state.weights)
    conv_i = len(state.weights)
    skip_grads: dict[int, np.ndarray] = {}
    g = grad_out
    for pos in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[pos]
        geom = trace[pos]
        if isinstance(layer, Conv):
            conv_i -= 1
            idx = _conv_indices(geom[0], geom[1], layer.kernel_size)
            grads[conv_i] = _conv_weight_grad(g, cache["cols"][pos])
            if conv_i > 0:
                g = _conv_input_grad(g, state.weights[conv_i], idx)
            else:
                break
        elif isinstance(layer, Relu):
            g = np.where(cache["masks"][pos], g, 0.0)
        elif isinstance(layer, (Down, Up)):
            if isinstance(layer, Up) and pos in cache["skips"]:
                skip_grads[cache["skips"][pos]] = g
            g = _resample_op(layer, geom).apply_adjoint(g)
            if isinstance(layer, Down) and pos in skip_grads:
                g = g + skip_grads.pop(pos)
    return [np.asarray(gr) for gr in grads]


def _forward_tangent(state: FiniteCnnState, cache: dict, tangents: list[np.ndarray], x) -> np.ndarray:
    """Jacobian-vector product: directional derivative of the output in weight space."""
    arch = state.arch
    trace = arch.geometry_trace()
    signal = _resolve_input(state, x)
    d_signal = np.zeros_like(signal)
    skip_stack: list[np.ndarray] = []
    conv_i = 0
    for pos, (layer, geom) in enumerate(zip(arch.layers, trace)):
        if isinstance(layer, Conv):
            idx = _conv_indices(geom[0], geom[1], layer.kernel_size)
            out, _ = _conv_forward(signal, state.weights[conv_i], idx)
            d_out, _ = _conv_forward(d_signal, state.weights[conv_i], idx)
            d_by_w, _ = _conv_forward(signal, tangents[conv_i], idx)
            signal, d_signal = out, d_out + d_by_w
            conv_i += 1
        elif isinstance(layer, Relu):
            mask = cache["masks"][pos]
            signal = np.where(mask, signal, 0.0)
            d_signal = np.where(mask, d_signal, 0.0)
        elif isinstance(layer, Down):
            if state.skip_connections:
                skip_stack.append(d_signal)
            op = _resample_op(layer, geom)
            signal = op.apply(signal)
            d_signal = op.apply(d_signal)
        elif isinstance(layer, Up):
            op = _resample_op(layer, geom)
            signal = op.apply(signal)
            d_signal = op.apply(d_signal)
            if state.skip_connections:
                d_signal = d_signal + skip_stack.pop()
    return d_signal


def ntk_top_eigenvalue(state: FiniteCnnState, x=None, iters: int = 40, seed: int = 0) -> float:
    """Top eigenvalue of the empirical tangent kernel J J^T by power iteration.

    Each iteration is one backward (J^T u) and one forward tangent (J v), so
    the cost matches a couple of training steps regardless of image size.
    """
    _, cache = forward(state, x, want_cache=True)
    rng = np.random.default_rng(seed)
    out_shape = (state.arch.output_channels, state.arch.height * state.arch.width)
    u = rng.standard_normal(out_shape)
    u /= np.linalg.norm(u)
    lam = 0.0
    for _ in range(iters):
        tangents = backward(state, cache, u)
        ju = _forward_tangent(state, cache, tangents, x)
        lam = float(np.sum(u * ju))
        norm = np.linalg.norm(ju)
        if norm == 0.0:
            return 0.0
        u = ju / norm
    return lam


def empirical_ntk(state: FiniteCnnState, x=None, normalize: bool = True):
    """Exact empirical tangent kernel J J^T for a single-channel output.

    Works pixel-batched: cotangents for all output pixels are pushed down
    together, and each convolution contributes its Gram block through the
    patch-sum operator instead of materializing Jacobians.  Guarded to small
    images because the batch is one cotangent per output pixel.

    normalize=True rescales so the top eigenvalue is 1, mirroring the
    analytic kernel's convention, and returns a KernelMatrix; with
    normalize=False the raw matrix comes back as a plain array.
    """
    arch = state.arch
    d = arch.height * arch.width
    if d > EMPIRICAL_NTK_MAX_PIXELS:
        raise ConfigError(
            f"empirical kernel is limited to {EMPIRICAL_NTK_MAX_PIXELS} pixels, got {d}"
        )
    if arch.output_channels != 1:
        raise ConfigError("empirical kernel expects a single output channel")
    out, cache = forward(state, x, want_cache=True)
    trace = arch.geometry_trace()
    g = np.zeros((d, 1, d))
    g[np.arange(d), 0, np.arange(d)] = 1.0
    theta = np.zeros((d, d))
    skip_grads: dict[int, np.ndarray] = {}
    conv_i = len(state.weights)
    for pos in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[pos]
        geom = trace[pos]
        if isinstance(layer, Conv):
            conv_i -= 1
            idx = _conv_indices(geom[0], geom[1], layer.kernel_size)
            phi = cache["inputs"][pos]
            gram = phi.T @ phi
            taps = layer.kernel_size * layer.kernel_size
            m = taps * a_map(gram, layer.kernel_size, geom)
            for o in range(g.shape[1]):
                theta += (g[:, o, :] @ m) @ g[:, o, :].T
            if conv_i > 0:
                g = _conv_input_grad_batched(g, state.weights[conv_i], idx)
            else:
                break
        elif isinstance(layer, Relu):
            g = g * cache["masks"][pos][None, :, :]
        elif isinstance(layer, (Down, Up)):
            if isinstance(layer, Up) and pos in cache["skips"]:
                skip_grads[cache["skips"][pos]] = g
            g = _resample_op(layer, geom).apply_adjoint(g)
            if isinstance(layer, Down) and pos in skip_grads:
                g = g + skip_grads.pop(pos)
    theta = 0.5 * (theta + theta.T)
    if not normalize:
        return theta
    top = float(np.linalg.eigvalsh(theta)[-1])
    if top <= 0:
        raise DivergenceError("empirical tangent kernel has no positive eigenvalue")
    return KernelMatrix(theta / top)


def preactivation_eigenvectors(state: FiniteCnnState, x=None, top_k: int = 4):
    """Eigen-decomposition of the channel-averaged covariance of the last
    hidden convolution's output.

    Returns (eigenvalues, eigenvectors) with columns sorted by decreasing
    eigenvalue; eigenvectors are pixel-space images of unit norm.
    """
    arch = state.arch
    conv_positions = [i for i, l in enumerate(arch.layers) if isinstance(l, Conv)]
    if len(conv_positions) < 2:
        raise ConfigError("need at least two convolutions to have a hidden layer")
    target = conv_positions[-2]  # last hidden conv; its output is the preactivation
    trace = arch.geometry_trace()
    signal = _resolve_input(state, x)
    skip_stack: list[np.ndarray] = []
    conv_i = 0
    for pos, (layer, geom) in enumerate(zip(arch.layers, trace)):
        if isinstance(layer, Conv):
            idx = _conv_indices(geom[0], geom[1], layer.kernel_size)
            signal, _ = _conv_forward(signal, state.weights[conv_i], idx)
            conv_i += 1
        elif isinstance(layer, Relu):
            signal = np.maximum(signal, 0.0)
        elif isinstance(layer, Down):
            if state.skip_connections:
                skip_stack.append(signal)
            signal = _resample_op(layer, geom).apply(signal)
        elif isinstance(layer, Up):
            signal = _resample_op(layer, geom).apply(signal)
            if state.skip_connections:
                signal = signal + skip_stack.pop()
        if pos == target:
            break
    cov = signal.T @ signal / float(signal.shape[0])
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:top_k]
    return vals[order], vecs[:, order]


@dataclasses.dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def apply(self, weights: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.step += 1
        if self.kind == "gd":
            for w, g in zip(weights, grads):
                w -= self.learning_rate * g
            return
        if self.m is None:
            self.m = [np.zeros_like(w) for w in weights]
            self.v = [np.zeros_like(w) for w in weights]
        b1, b2 = self.beta1, self.beta2
        for w, g, m, v in zip(weights, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.step)
            v_hat = v / (1 - b2 ** self.step)
            w -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, learning_rate: float, beta1: float = 0.9, beta2: float = 0.99) -> OptimizerState:
    if kind not in ("gd", "adam"):
        raise ConfigError(f"optimizer must be 'gd' or 'adam', got {kind!r}")
    if learning_rate <= 0:
        raise ConfigError(f"learning rate must be positive, got {learning_rate}")
    return OptimizerState(kind=kind, learning_rate=learning_rate, beta1=beta1, beta2=beta2)


def tune_gd_learning_rate(state: FiniteCnnState, x=None, safety: float = 0.9, iters: int = 40) -> float:
    """Largest-safe GD step: safety / lambda_max of the empirical kernel."""
    lam = ntk_top_eigenvalue(state, x, iters=iters)
    if lam <= 0:
        raise DivergenceError("tangent kernel has no positive curvature; cannot tune a step size")
    return safety / lam


@dataclasses.dataclass
class WeightChangeReport:
    """Running-max weight excursions, split by layer role.

    per_layer_max[i] is max over iterations and weights of |w - w0| for conv
    i; hidden_max aggregates everything but the last conv, intermediate_mean
    averages the convs that are neither first nor last (empty -> hidden_max).
    """

    per_layer_max: list[float]
    per_layer_l2: list[float]
    global_l2: float

    @property
    def hidden_max(self) -> float:
        if len(self.per_layer_max) < 2:
            return 0.0
        return max(self.per_layer_max[:-1])

    @property
    def last_max(self) -> float:
        return self.per_layer_max[-1]

    @property
    def intermediate_mean(self) -> float:
        inner = self.per_layer_max[1:-1]
        if not inner:
            return self.hidden_max
        return float(np.mean(inner))


@dataclasses.dataclass
class TrainResult:
    iterations: list[int]
    losses: list[float]
    psnrs: list[float]
    change_trace: list[list[float]]
    outputs: dict[int, np.ndarray]
    final_output: np.ndarray
    initial_output: np.ndarray
    report: WeightChangeReport
    state: FiniteCnnState

    def best_psnr(self) -> tuple[int, float]:
        vals = np.asarray(self.psnrs)
        if vals.size == 0 or np.all(np.isnan(vals)):
            return (0, float("nan"))
        i = int(np.nanargmax(vals))
        return (self.iterations[i], float(vals[i]))


def train(
    state: FiniteCnnState,
    target,
    iters: int,
    optimizer: OptimizerState,
    x=None,
    translate: bool = True,
    reference: ImageTensor | None = None,
    record_every: int = 0,
    record_outputs: tuple[int, ...] = (),
    loss_limit: float = 1e12,
) -> TrainResult:
    """Fit the network output to ``target`` with full-batch steps.

    translate=True subtracts the frozen initial output, so the reported
    output starts at exactly zero; this is the variant used when the input is
    the image itself.  record_every > 0 stores loss/psnr telemetry on that
    grid; record_outputs lists iteration counts whose (translated) outputs
    should be kept.  Weight excursions are tracked as running maxima, once
    per iteration.
    """
    arch = state.arch
    y = np.asarray(target, dtype=np.float64)
    d = arch.height * arch.width
    if y.shape != (arch.output_channels, d):
        raise ConfigError(f"target shape {y.shape} does not match ({arch.output_channels}, {d})")
    z0 = forward(state, x)
    offset = z0 if translate else np.zeros_like(z0)
    initial = z0 - offset
    w0 = [w.copy() for w in state.weights]
    run_max = [0.0] * len(w0)

    def current_psnr(z: np.ndarray) -> float:
        if reference is None:
            return float("nan")
        est = ImageTensor(height=arch.height, width=arch.width, data=z)
        return psnr(est, reference)

    iterations, losses, psnrs = [], [], []
    change_trace: list[list[float]] = []
    outputs: dict[int, np.ndarray] = {}
    wanted = set(record_outputs)

    def record(t: int, z: np.ndarray, loss: float) -> None:
        iterations.append(t)
        losses.append(loss)
        psnrs.append(current_psnr(z))
        change_trace.append(list(run_max))

    z = initial
    loss = 0.5 * float(np.sum((z - y) ** 2))
    if record_every > 0:
        record(0, z, loss)
    if 0 in wanted:
        outputs[0] = z.copy()
    for t in range(1, iters + 1):
        raw, cache = forward(state, x, want_cache=True)
        z = raw - offset
        residual = z - y
        loss = 0.5 * float(np.sum(residual * residual))
        if not np.isfinite(loss) or loss > loss_limit:
            raise DivergenceError(f"training diverged at iteration {t} (loss={loss:.3e})")
        grads = backward(state, cache, residual)
        optimizer.apply(state.weights, grads)
        for i, (w, w_init) in enumerate(zip(state.weights, w0)):
            run_max[i] = max(run_max[i], float(np.max(np.abs(w - w_init))))
        if (record_every > 0 and t % record_every == 0) or t == iters:
            z_now = forward(state, x) - offset
            final_loss = 0.5 * float(np.sum((z_now - y) ** 2))
            record(t, z_now, final_loss)
            z = z_now
            loss = final_loss
        if t in wanted:
            outputs[t] = (forward(state, x) - offset).copy()

    change_l2 = [float(np.linalg.norm(w - w_init)) for w, w_init in zip(state.weights, w0)]
    report = WeightChangeReport(
        per_layer_max=run_max,
        per_layer_l2=change_l2,
        global_l2=float(np.sqrt(sum(c * c for c in change_l2))),
    )
    return TrainResult(
        iterations=iterations,
        losses=losses,
        psnrs=psnrs,
        change_trace=change_trace,
        outputs=outputs,
        final_output=z,
        initial_output=initial,
        report=report,
        state=state,
    )
