"""Command-line entry point.

Subcommands: denoise (kernel twicing, full or Nystrom), simulate (finite
network training), kernel (export the analytic filter), nlm (non-local-means
baseline), gp (posterior-mean denoiser).  Heavy imports happen inside the
command handlers so --threads / NTK_THREADS can cap the BLAS pool before
numpy loads.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 unsupported architecture.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_UNSUPPORTED = 4

_PRESETS = ("vanilla", "autoencoder", "unet")


def _apply_thread_cap(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("NTK_THREADS", "").strip()
        if not env:
            return
        try:
            threads = int(env)
        except ValueError:
            raise SystemExit(f"NTK_THREADS must be an integer, got {env!r}")
    if threads < 1:
        raise SystemExit(f"--threads must be positive, got {threads}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def _config_hash(args: argparse.Namespace) -> str:
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _write_summary(out_dir: str, command: str, args, psnr_best, t_best, wall_ms: float) -> None:
    summary = {
        "command": command,
        "config_hash": _config_hash(args),
        "psnr_best": None if psnr_best is None else round(float(psnr_best), 4),
        "t_best": t_best,
        "wall_ms": round(wall_ms, 1),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")


def _prepare_out(path: str) -> str:
    from .errors import ConfigError

    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}")
    return path


def _load_image(path: str):
    from .errors import ConfigError
    from .images import load_png

    if not os.path.isfile(path):
        raise ConfigError(f"input file not found: {path}")
    try:
        return load_png(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}")


def _resolve_arch(name: str, image, kernel_size: int | None):
    """Preset name or JSON path -> (ArchSpec, skip_connections flag)."""
    from .arch import ArchSpec, autoencoder_arch, deep_vanilla_arch, vanilla_arch
    from .errors import ConfigError

    h, w, c = image.height, image.width, image.channels
    if name == "vanilla":
        return vanilla_arch(h, w, kernel_size=kernel_size or 11, input_channels=c, output_channels=c), False
    if name == "autoencoder":
        return autoencoder_arch(h, w, kernel_size=kernel_size or 3, input_channels=c, output_channels=c), False
    if name == "unet":
        return autoencoder_arch(h, w, kernel_size=kernel_size or 3, input_channels=c, output_channels=c), True
    if name.startswith("deep:"):
        depth = int(name.split(":", 1)[1])
        return deep_vanilla_arch(h, w, num_convs=depth, kernel_size=kernel_size or 3,
                                 input_channels=c, output_channels=c), False
    if not os.path.isfile(name):
        raise ConfigError(f"--arch must be one of {_PRESETS}, deep:<n>, or a JSON file; got {name!r}")
    with open(name) as fh:
        arch = ArchSpec.from_json(fh.read())
    if (arch.height, arch.width) != (h, w):
        raise ConfigError(
            f"architecture geometry {arch.height}x{arch.width} does not match image {h}x{w}"
        )
    if arch.input_channels != c:
        raise ConfigError(f"architecture expects {arch.input_channels} channels, image has {c}")
    return arch, False


def _noisy_pair(args):
    """(clean oracle, noisy input) per the --input/--clean/--sigma flags."""
    from .images import NoiseModel, add_gaussian_noise

    source = _load_image(args.input)
    oracle = _load_image(args.clean) if args.clean else source
    noisy = add_gaussian_noise(source, NoiseModel(sigma=args.sigma, seed=args.seed))
    return oracle, noisy


def _save_eigenimage(vector, height: int, width: int, path: str) -> None:
    import numpy as np

    from .images import from_unit, save_png

    arr = np.asarray(vector, dtype=float).reshape(height, width)
    span = arr.max() - arr.min()
    unit = (arr - arr.min()) / span if span > 0 else np.full_like(arr, 0.5)
    save_png(from_unit(unit), path)


def cmd_denoise(args) -> int:
    from .denoise import twicing_matrix, twicing_spectral
    from .errors import UnsupportedArchitectureError
    from .images import save_png
    from .nystrom import nystrom_factorize, sample_columns

    started = time.perf_counter()
    oracle, noisy = _noisy_pair(args)
    arch, skips = _resolve_arch(args.arch, noisy, args.kernel_size)
    if skips:
        raise UnsupportedArchitectureError("skip connections are simulator-only; no analytic kernel")
    out_dir = _prepare_out(args.out)
    d = noisy.pixels
    if args.mode == "nystrom":
        from .ntk import kernel_columns

        indices = sample_columns(d, (noisy.height, noisy.width), args.fraction, seed=args.seed)
        columns = kernel_columns(arch, noisy, indices)
        factors = nystrom_factorize(columns, indices)
        trace = twicing_spectral(factors, noisy, oracle, max_iters=args.max_iters)
    else:
        from .ntk import ntk_recursion

        result = ntk_recursion(arch, noisy)
        trace = twicing_matrix(result.theta, noisy, oracle, max_iters=args.max_iters)
    save_png(trace.best_output, os.path.join(out_dir, "denoised.png"))
    trace.to_csv(args.metrics or os.path.join(out_dir, "trace.csv"))
    wall = (time.perf_counter() - started) * 1000
    _write_summary(out_dir, "denoise", args, trace.best_psnr(), trace.best_iteration, wall)
    return EXIT_OK


def cmd_simulate(args) -> int:
    import numpy as np

    from .images import save_png
    from .simulator import (
        init_state,
        make_optimizer,
        preactivation_eigenvectors,
        train,
        tune_gd_learning_rate,
    )

    started = time.perf_counter()
    oracle, noisy = _noisy_pair(args)
    arch, skips = _resolve_arch(args.arch, noisy, args.kernel_size)
    out_dir = _prepare_out(args.out)
    if args.input_mode == "image":
        x = noisy
        translate = args.translate != "off"
    else:
        rng = np.random.default_rng(args.seed)
        x = rng.standard_normal((arch.input_channels, noisy.pixels))
        translate = args.translate == "on"
    state = init_state(arch, channels=args.channels, seed=args.seed, x=x, skip_connections=skips)
    if args.optimizer == "gd":
        lr = args.lr if args.lr is not None else tune_gd_learning_rate(state)
    else:
        lr = args.lr if args.lr is not None else 1e-3
    optimizer = make_optimizer(args.optimizer, lr, beta1=args.beta1, beta2=args.beta2)
    every = max(1, args.telemetry_every)
    result = train(
        state,
        noisy.data,
        iters=args.iters,
        optimizer=optimizer,
        translate=translate,
        reference=oracle,
        record_every=every,
    )
    with open(os.path.join(out_dir, "telemetry.csv"), "w") as fh:
        layer_cols = ",".join(f"max_change_conv{i}" for i in range(len(state.weights)))
        fh.write(f"iteration,loss,psnr_db,{layer_cols}\n")
        for t, loss, p, changes in zip(result.iterations, result.losses, result.psnrs, result.change_trace):
            row = ",".join(f"{c:.8e}" for c in changes)
            fh.write(f"{t},{loss:.8e},{p:.4f},{row}\n")
    report = result.report
    with open(os.path.join(out_dir, "weight_change.json"), "w") as fh:
        json.dump(
            {
                "per_layer_max": report.per_layer_max,
                "per_layer_l2": report.per_layer_l2,
                "hidden_max": report.hidden_max,
                "last_max": report.last_max,
                "global_l2": report.global_l2,
                "learning_rate": lr,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    vals, vecs = preactivation_eigenvectors(state, top_k=min(4, noisy.pixels))
    for k in range(vecs.shape[1]):
        _save_eigenimage(vecs[:, k], arch.height, arch.width, os.path.join(out_dir, f"eigenimage_{k + 1}.png"))
    t_best, psnr_best = result.best_psnr()
    wall = (time.perf_counter() - started) * 1000
    _write_summary(out_dir, "simulate", args, psnr_best, t_best, wall)
    return EXIT_OK


def cmd_kernel(args) -> int:
    import numpy as np

    from .errors import UnsupportedArchitectureError
    from .ntk import ntk_recursion

    started = time.perf_counter()
    oracle, noisy = _noisy_pair(args)
    arch, skips = _resolve_arch(args.arch, noisy, args.kernel_size)
    if skips:
        raise UnsupportedArchitectureError("skip connections are simulator-only; no analytic kernel")
    out_dir = _prepare_out(args.out)
    result = ntk_recursion(arch, noisy)
    result.theta.save(os.path.join(out_dir, "theta.bin"))
    vals, vecs = np.linalg.eigh(result.theta.entries)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    with open(os.path.join(out_dir, "eigenvalues.csv"), "w") as fh:
        fh.write("index,eigenvalue\n")
        for i, v in enumerate(vals):
            fh.write(f"{i},{v:.12e}\n")
    for k in range(min(4, vecs.shape[1])):
        _save_eigenimage(vecs[:, k], noisy.height, noisy.width, os.path.join(out_dir, f"eigenimage_{k + 1}.png"))
    wall = (time.perf_counter() - started) * 1000
    _write_summary(out_dir, "kernel", args, None, None, wall)
    return EXIT_OK


def cmd_nlm(args) -> int:
    from .denoise import NlmParams, nlm_filter, twicing_matrix
    from .images import save_png

    started = time.perf_counter()
    oracle, noisy = _noisy_pair(args)
    out_dir = _prepare_out(args.out)
    params = NlmParams(bandwidth=args.bandwidth, patch_radius=args.patch_radius)
    w = nlm_filter(noisy, params)
    trace = twicing_matrix(w, noisy, oracle, max_iters=args.max_iters)
    save_png(trace.best_output, os.path.join(out_dir, "denoised.png"))
    trace.to_csv(args.metrics or os.path.join(out_dir, "trace.csv"))
    wall = (time.perf_counter() - started) * 1000
    _write_summary(out_dir, "nlm", args, trace.best_psnr(), trace.best_iteration, wall)
    return EXIT_OK


def cmd_gp(args) -> int:
    from .denoise import gp_posterior
    from .errors import UnsupportedArchitectureError
    from .images import psnr, save_png
    from .ntk import forward_covariance

    started = time.perf_counter()
    oracle, noisy = _noisy_pair(args)
    arch, skips = _resolve_arch(args.arch, noisy, args.kernel_size)
    if skips:
        raise UnsupportedArchitectureError("skip connections are simulator-only; no analytic prior")
    out_dir = _prepare_out(args.out)
    sigma_z = forward_covariance(arch, noisy)[-1]
    posterior = gp_posterior(sigma_z, noisy, sigma_noise=args.sigma)
    save_png(posterior, os.path.join(out_dir, "posterior.png"))
    wall = (time.perf_counter() - started) * 1000
    _write_summary(out_dir, "gp", args, psnr(posterior, oracle), None, wall)
    return EXIT_OK


def _add_common_io(p: argparse.ArgumentParser, with_arch: bool = True) -> None:
    p.add_argument("--input", required=True, help="source PNG (clean unless --clean is given)")
    p.add_argument("--clean", default=None, help="oracle PNG; defaults to --input")
    p.add_argument("--sigma", type=float, default=25.0, help="noise level in 8-bit units")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    if with_arch:
        p.add_argument("--arch", default="vanilla",
                       help=f"preset ({', '.join(_PRESETS)}, deep:<n>) or arch JSON path")
        p.add_argument("--kernel-size", type=int, default=None, help="override preset kernel size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntkfilter", description="Kernel-filter image denoising toolkit")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (or set NTK_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("denoise", help="twicing denoiser driven by the analytic kernel")
    _add_common_io(d)
    d.add_argument("--mode", choices=("full", "nystrom"), default="nystrom")
    d.add_argument("--fraction", type=float, default=0.02, help="sampled column fraction m/d")
    d.add_argument("--max-iters", type=int, default=4096)
    d.add_argument("--metrics", default=None, help="trace CSV path (default <out>/trace.csv)")
    d.set_defaults(func=cmd_denoise)

    s = sub.add_parser("simulate", help="train a finite-width network on one image")
    _add_common_io(s)
    s.add_argument("--optimizer", choices=("gd", "adam"), default="gd")
    s.add_argument("--input-mode", choices=("image", "noise"), default="image")
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--telemetry-every", type=int, default=10)
    s.add_argument("--lr", type=float, default=None, help="default: auto-tuned for gd, 1e-3 for adam")
    s.add_argument("--beta1", type=float, default=0.9)
    s.add_argument("--beta2", type=float, default=0.99)
    s.add_argument("--translate", choices=("auto", "on", "off"), default="auto",
                   help="subtract the frozen init output (auto: image mode only)")
    s.set_defaults(func=cmd_simulate)

    k = sub.add_parser("kernel", help="export the analytic tangent-kernel filter")
    _add_common_io(k)
    k.set_defaults(func=cmd_kernel)

    n = sub.add_parser("nlm", help="non-local-means baseline")
    _add_common_io(n, with_arch=False)
    n.add_argument("--bandwidth", type=float, default=0.5, help="squared-distance scale of the affinity")
    n.add_argument("--patch-radius", type=int, default=3)
    n.add_argument("--max-iters", type=int, default=200)
    n.add_argument("--metrics", default=None)
    n.set_defaults(func=cmd_nlm)

    g = sub.add_parser("gp", help="Gaussian-process posterior-mean denoiser")
    _add_common_io(g)
    g.set_defaults(func=cmd_gp)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_thread_cap(args.threads)

    from .errors import ConfigError, DivergenceError, UnsupportedArchitectureError

    try:
        return args.func(args)
    except UnsupportedArchitectureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
