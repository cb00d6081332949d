"""Batch command-line front end.

Every probe and solver runs as a subcommand with file-based inputs and
outputs and a JSON manifest recording the resolved configuration, seeds,
input hashes, and timing, sufficient to reproduce the run bit for bit.
Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 solver divergence (outputs written where possible).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shlex
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .external import ExternalPrior, TransportError, external_denoiser
from .flow import StiffnessError, log_prior
from .grids import (
    ImageGrid,
    Kernel,
    NumericBreakdownError,
    SingularOperatorError,
    find_tikhonov_lambda,
)
from .io import load_image, load_igrid, save_igrid, save_image, save_kernel
from .kernels import FamilyConfig, KernelSpec, ONED_FAMILIES, family_from_spec, make_kernel
from .landscape import (
    DivergenceError,
    assemble_hessian,
    blur_potential_profile,
    descend_to_critical_point,
    posterior_profile_noiseless,
    posterior_profile_noisy,
    spectrum_and_dimension,
)
from .priors import DiffusionSchedule, GmmPrior, SpectralQuadraticPrior
from .solver import SolverConfig, solve_alternating, solve_douglas_rachford
from .verify import check_conditions, posterior_hessian, stability_sweep

NUMERIC_ERRORS = (SingularOperatorError, NumericBreakdownError, StiffnessError, TransportError)


class ConfigError(Exception):
    pass


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, subcommand, config, seeds, inputs, outputs, elapsed):
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seeds": seeds,
        "input_hashes": {str(p): _sha256(p) for p in inputs if Path(p).exists()},
        "outputs": [str(p) for p in outputs],
        "wall_clock_sec": elapsed,
        "version": __version__,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_schedule(section) -> DiffusionSchedule:
    if not section:
        return DiffusionSchedule()
    return DiffusionSchedule(
        sigma_min=float(section.get("sigma_min", 0.01)),
        sigma_max=float(section.get("sigma_max", 50.0)),
        horizon=float(section.get("horizon", 1.0)),
        t_eps=float(section.get("t_eps", 1e-3)),
    )


def _load_mean(entry, base: Path):
    if isinstance(entry, str):
        return load_image(base / entry if not Path(entry).is_absolute() else entry)
    return ImageGrid(np.asarray(entry, dtype=np.float64))


def load_prior(path):
    """Build a prior from a YAML config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"prior config {path} does not exist")
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict) or "type" not in cfg:
        raise ConfigError(f"prior config {path} must be a mapping with a 'type' key")
    sched = load_schedule(cfg.get("schedule"))
    kind = cfg["type"]
    if kind == "gmm":
        means = [_load_mean(m, path.parent) for m in cfg["means"]]
        return GmmPrior(means, np.asarray(cfg["weights"], dtype=np.float64),
                        float(cfg["base_variance"]), sched)
    if kind == "spectral":
        mult = cfg["multipliers"]
        if isinstance(mult, str):
            grid = load_igrid(path.parent / mult if not Path(mult).is_absolute() else mult)
            arr = grid.data[0] if grid.shape[0] == 1 else grid.data
        else:
            arr = np.asarray(mult, dtype=np.float64)
        return SpectralQuadraticPrior(arr, cfg.get("image_shape"), sched)
    if kind == "external":
        return ExternalPrior(list(cfg["command"]), sched)
    raise ConfigError(f"unknown prior type {kind!r}")


def load_family_config(path) -> FamilyConfig:
    if path is None:
        return FamilyConfig()
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    try:
        return FamilyConfig.from_mapping(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def make_spec(args, config: FamilyConfig) -> KernelSpec:
    radius = (args.support - 1) // 2 if args.support else 15
    if args.support and args.support % 2 == 0:
        raise ConfigError("--support must be odd")
    theta = None
    if getattr(args, "theta", None):
        theta = np.array([float(v) for v in args.theta.split(",")])
    family = args.family
    if family in ONED_FAMILIES:
        theta = theta if theta is not None else np.zeros(1)
    elif family == "zernike":
        theta = theta if theta is not None else np.zeros(len(config.noll_indices))
    elif family == "simplex":
        side = 2 * radius + 1
        theta = theta if theta is not None else np.full(side * side, 1.0 / (side * side))
    else:
        raise ConfigError(f"unknown family {family!r}")
    try:
        return KernelSpec(family, theta, support_radius=radius,
                          angle=getattr(args, "angle", 0.0), config=config)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def write_profile_csv(path, profile):
    with open(path, "w") as fh:
        fh.write("theta,value,flag\n")
        flags = profile.flags if profile.flags is not None else np.ones(len(profile.thetas), dtype=bool)
        for theta, value, ok in zip(profile.thetas, profile.values, flags):
            fh.write(f"{theta!r},{value!r},{int(ok)}\n")


def write_profile_sidecar(path, profile, extra):
    record = {
        "mode": profile.mode,
        "sigma_y": profile.sigma_y,
        "metadata": {k: (v if isinstance(v, (int, float, str, bool)) else str(v))
                     for k, v in profile.metadata.items()},
    }
    record.update(extra)
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_profile(args) -> int:
    start = time.time()
    prior = load_prior(args.prior)
    image = load_image(args.image)
    config = load_family_config(args.families_config)
    spec = make_spec(args, config)
    grid = np.linspace(0.0, args.theta_max, args.points)
    lam = args.tikhonov
    if args.mode == "prior":
        profile = blur_potential_profile(prior, image, spec, n_points=args.points,
                                         theta_max=args.theta_max, seed=args.seed,
                                         threads=args.threads)
    else:
        if spec.family not in ONED_FAMILIES:
            raise ConfigError(f"posterior profiles need a one-parameter family, got {spec.family!r}")
        fam = family_from_spec(spec)
        if lam is None:
            kernels = [fam.kernel(np.array([t])) for t in grid]
            lam = find_tikhonov_lambda(kernels, image.shape, seed=args.seed)
        if args.mode == "noiseless":
            profile = posterior_profile_noiseless(prior, image, spec, lam, grid,
                                                  args.theta_bar, seed=args.seed)
        else:
            profile = posterior_profile_noisy(prior, image, spec, args.sigma_y, grid,
                                              args.theta_bar, seed=args.seed, lam=lam)
    out = Path(args.out)
    write_profile_csv(out, profile)
    sidecar = out.with_suffix(out.suffix + ".meta.json")
    write_profile_sidecar(sidecar, profile, {"lambda": lam, "seed": args.seed})
    write_manifest(args.manifest or out.with_suffix(out.suffix + ".manifest.json"),
                   "profile", _public_args(args), [args.seed],
                   [args.prior, args.image], [out, sidecar], time.time() - start)
    return 0


def _parse_init(value):
    if value in ("uniform", "uniform_largest"):
        return "uniform_largest", {}
    if value in ("gaussian-small", "gaussian_small"):
        return "gaussian_small", {}
    if value.startswith("zernike-offset="):
        return "zernike_offset", {"epsilon": float(value.split("=", 1)[1])}
    if value.startswith("theta="):
        theta = np.array([float(v) for v in value.split("=", 1)[1].split(",")])
        return "explicit", {"theta": theta}
    raise ConfigError(f"unknown init strategy {value!r}")


def _spectral_prox_denoiser(prior, weight):
    if not isinstance(prior, SpectralQuadraticPrior):
        raise ConfigError("prox denoiser requires a spectral prior config")
    return lambda x: prior.prox(x, weight)


def cmd_deblur(args) -> int:
    start = time.time()
    y = load_image(args.y)
    config = load_family_config(args.families_config)
    spec = make_spec(args, config)
    strategy, init_kw = _parse_init(args.init)
    hint = np.array([float(v) for v in args.theta_hint.split(",")]) if args.theta_hint else None
    cfg = SolverConfig(
        K=args.K, K_x=args.Kx, gamma_x=args.gamma_x, gamma_theta=args.gamma_theta,
        reinit_period=args.reinit, sigma_y=args.sigma_y,
        init_strategy=strategy, init_epsilon=init_kw.get("epsilon", 0.15),
        theta_hint=hint, explicit_theta=init_kw.get("theta"),
        algorithm="dr" if args.algo == "dr" else "alternating",
        kernel_snapshot_every=args.snapshot_every,
    )
    outputs = [Path(args.out_x), Path(args.out_kernel), Path(args.trace)]
    closer = None
    try:
        if args.algo == "alt":
            prior = load_prior(args.prior)
            x_hat, spec_hat, trace = solve_alternating(y, prior, spec, cfg)
        else:
            if args.denoiser.startswith("external:"):
                denoiser = external_denoiser(shlex.split(args.denoiser.split(":", 1)[1]))
                closer = denoiser.close
                prior = None
            elif args.denoiser.startswith("spectral-prox:"):
                prior = load_prior(args.denoiser.split(":", 1)[1])
                denoiser = _spectral_prox_denoiser(prior, cfg.gamma_x * cfg.prior_weight)
            else:
                raise ConfigError(f"unknown denoiser {args.denoiser!r}")
            x_hat, spec_hat, trace = solve_douglas_rachford(y, denoiser, spec, cfg, prior=prior)
    except DivergenceError as exc:
        _write_trace(args.trace, exc.trace)
        print(f"deblur diverged: {exc}", file=sys.stderr)
        return 4
    finally:
        if closer is not None:
            closer()

    save_image(args.out_x, x_hat)
    save_kernel(args.out_kernel, make_kernel(spec_hat))
    _write_trace(args.trace, trace)
    if args.kernel_evolution and trace.kernel_snapshots:
        strip = np.concatenate([k.weights / max(k.weights.max(), 1e-30)
                                for _, k in trace.kernel_snapshots], axis=1)
        save_image(args.kernel_evolution, ImageGrid(strip[np.newaxis]))
        outputs.append(Path(args.kernel_evolution))
    write_manifest(args.manifest or Path(args.out_x).with_suffix(".manifest.json"),
                   "deblur", _public_args(args), [args.seed], [args.y],
                   outputs, time.time() - start)
    return 0


def _write_trace(path, trace):
    if trace is None:
        return
    with open(path, "w") as fh:
        fh.write("iteration,theta_norm,theta_first,data_fidelity,objective,potential\n")
        for k, theta in enumerate(trace.thetas):
            obj = trace.objective[k] if k < len(trace.objective) else ""
            pot = trace.potential[k] if k < len(trace.potential) else ""
            fh.write(f"{k},{float(np.linalg.norm(theta))!r},{float(theta.ravel()[0])!r},"
                     f"{trace.data_fidelity[k]!r},{obj!r},{pot!r}\n")


def cmd_crit(args) -> int:
    start = time.time()
    prior = load_prior(args.prior)
    x0 = load_image(args.image)
    try:
        end, trace = descend_to_critical_point(prior, x0, step=args.step, iters=args.iters)
    except DivergenceError as exc:
        print(f"descent diverged: {exc}", file=sys.stderr)
        return 4
    save_image(args.out, end)
    record = {
        "final_gradient_norm": trace.final_gradient_norm,
        "iterations": trace.iterations,
        "relative_distance": trace.relative_distance,
        "potentials": trace.potentials,
    }
    report_path = Path(args.out).with_suffix(".descent.json")
    with open(report_path, "w") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")
    write_manifest(args.manifest or Path(args.out).with_suffix(".manifest.json"),
                   "crit", _public_args(args), [args.seed], [args.prior, args.image],
                   [args.out, report_path], time.time() - start)
    return 0


def cmd_spectrum(args) -> int:
    start = time.time()
    prior = load_prior(args.prior)
    x = load_image(args.image)
    hess = assemble_hessian(prior, x, cap=args.cap)
    eigs, dim = spectrum_and_dimension(hess.matrix, threshold=args.threshold)
    with open(args.out, "w") as fh:
        fh.write("index,eigenvalue\n")
        for i, val in enumerate(eigs):
            fh.write(f"{i},{val!r}\n")
    print(f"intrinsic_dimension {dim}")
    print(f"hessian_asymmetry {hess.asymmetry!r}")
    write_manifest(args.manifest or Path(args.out).with_suffix(".manifest.json"),
                   "spectrum", _public_args(args), [args.seed],
                   [args.prior, args.image], [args.out], time.time() - start)
    return 0


def cmd_verify(args) -> int:
    start = time.time()
    prior = load_prior(args.prior)
    x = load_image(args.image)
    config = load_family_config(args.families_config)
    spec = make_spec(args, config).with_theta([args.theta_bar])
    report = check_conditions(prior, x, spec, rank_tol=args.rank_tol,
                              tikhonov_lambda=args.tikhonov or 0.0)
    hessian = posterior_hessian(prior, x, spec, args.theta_bar,
                                tikhonov_lambda=args.tikhonov or 0.0)
    record = {
        "conditions": {
            "x": {"passed": report.cond_x.passed, "margin": report.cond_x.margin},
            "theta": {"passed": report.cond_theta.passed, "margin": report.cond_theta.margin},
            "joint": {"passed": report.cond_joint.passed, "margin": report.cond_joint.margin},
        },
        "all_passed": report.all_passed,
        "is_critical_point": report.is_critical_point,
        "score_norm": report.score_norm,
        "min_prior_hessian_eig": report.min_hessian_eig,
        "posterior_hessian_min_eig": float(np.linalg.eigvalsh(hessian)[0]),
        "rank_tol": args.rank_tol,
    }
    outputs = [Path(args.out)]
    if args.sweep:
        norms = [float(v) for v in args.noise_norms.split(",")]
        seeds = list(range(args.seed, args.seed + args.sweep_seeds))
        sweep = stability_sweep(prior, x, spec, args.theta_bar, norms, seeds)
        record["sweep"] = {"slope_x": sweep.slope_x, "slope_theta": sweep.slope_theta,
                          "excluded": sweep.excluded}
        sweep_path = Path(args.out).with_suffix(".sweep.csv")
        with open(sweep_path, "w") as fh:
            fh.write("noise_norm,seed,x_err,theta_err,escaped\n")
            for row in sweep.rows():
                fh.write(",".join(repr(v) for v in row) + "\n")
        outputs.append(sweep_path)
    with open(args.out, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(args.manifest or Path(args.out).with_suffix(".manifest.json"),
                   "verify", _public_args(args), [args.seed],
                   [args.prior, args.image], outputs, time.time() - start)
    return 0


def cmd_logprior(args) -> int:
    start = time.time()
    prior = load_prior(args.prior)
    x = load_image(args.image)
    value, report = log_prior(prior, prior.sched, x, probes=args.probes,
                              atol=args.atol, rtol=args.rtol, seed=args.seed,
                              divergence=args.divergence,
                              fresh_probes=args.fresh_probes)
    record = {
        "potential": value,
        "logdet_integral": report.logdet_integral,
        "n_evals": report.n_evals,
        "accepted": report.accepted,
        "rejected": report.rejected,
        "probe_count": report.probe_count,
        "divergence_mode": report.divergence_mode,
        "atol": report.atol,
        "rtol": report.rtol,
        "seed": args.seed,
    }
    text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    write_manifest(args.manifest or (Path(args.out).with_suffix(".manifest.json")
                                     if args.out else Path("logprior.manifest.json")),
                   "logprior", _public_args(args), [args.seed],
                   [args.prior, args.image], [args.out] if args.out else [],
                   time.time() - start)
    return 0


def cmd_mkkernel(args) -> int:
    start = time.time()
    config = load_family_config(args.families_config)
    spec = make_spec(args, config)
    kernel = make_kernel(spec)
    save_kernel(args.out, kernel)
    outputs = [Path(args.out)]
    if args.png:
        preview = kernel.weights / max(kernel.weights.max(), 1e-30)
        save_image(args.png, ImageGrid(preview[np.newaxis]))
        outputs.append(Path(args.png))
    write_manifest(args.manifest or Path(args.out).with_suffix(".manifest.json"),
                   "mkkernel", _public_args(args), [args.seed], [], outputs,
                   time.time() - start)
    return 0


def _public_args(args) -> dict:
    return {k: (v if isinstance(v, (int, float, str, bool, type(None))) else str(v))
            for k, v in vars(args).items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blindscape",
        description="Blind deconvolution MAP estimation and posterior-landscape probes.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="random seed logged in the manifest")
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("BLINDSCAPE_THREADS", "1")),
                       help="worker threads for parallel probes")
        p.add_argument("--manifest", default=None, help="manifest path (default: next to the output)")
        p.add_argument("--families-config", default=None, help="YAML file of kernel-family scales")

    p = sub.add_parser("profile", help="potential or posterior profile over a kernel grid")
    common(p)
    p.add_argument("--prior", required=True, help="prior config file")
    p.add_argument("--image", required=True, help="input image (IGRID/PNG/PGM)")
    p.add_argument("--family", required=True, help="kernel family name")
    p.add_argument("--support", type=int, default=31, help="kernel side length (odd)")
    p.add_argument("--angle", type=float, default=0.0, help="motion blur angle (radians)")
    p.add_argument("--mode", choices=["prior", "noiseless", "noisy"], default="prior")
    p.add_argument("--theta-bar", type=float, default=2.0, help="synthesis parameter for posterior modes")
    p.add_argument("--sigma-y", type=float, default=0.01, help="noise level for --mode noisy")
    p.add_argument("--points", type=int, default=11)
    p.add_argument("--theta-max", type=float, default=5.0)
    p.add_argument("--tikhonov", type=float, default=None,
                   help="inversion lambda (default: grid-searched)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("deblur", help="blind deconvolution solve")
    common(p)
    p.add_argument("--y", required=True, help="blurry observation")
    p.add_argument("--prior", default=None, help="prior config (alternating algorithm)")
    p.add_argument("--denoiser", default=None,
                   help="dr denoiser: external:CMD or spectral-prox:CONFIG")
    p.add_argument("--family", required=True)
    p.add_argument("--support", type=int, default=31)
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--theta", default=None, help="family parameters (comma separated)")
    p.add_argument("--init", default="uniform", help="uniform | gaussian-small | zernike-offset=E | theta=...")
    p.add_argument("--theta-hint", default=None, help="hint vector for zernike-offset")
    p.add_argument("--algo", choices=["alt", "dr"], default="alt")
    p.add_argument("--K", type=int, default=400)
    p.add_argument("--Kx", type=int, default=100)
    p.add_argument("--gamma-x", type=float, default=0.01)
    p.add_argument("--gamma-theta", type=float, default=0.001)
    p.add_argument("--sigma-y", type=float, default=0.01)
    p.add_argument("--reinit", type=int, default=100)
    p.add_argument("--snapshot-every", type=int, default=0)
    p.add_argument("--out-x", required=True)
    p.add_argument("--out-kernel", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--kernel-evolution", default=None, help="PNG strip of kernel snapshots")
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("crit", help="gradient descent to a critical point of the prior")
    common(p)
    p.add_argument("--prior", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crit)

    p = sub.add_parser("spectrum", help="prior Hessian spectrum and intrinsic dimension")
    common(p)
    p.add_argument("--prior", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.add_argument("--cap", type=int, default=4096)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("verify", help="recovery conditions, block Hessian, stability sweep")
    common(p)
    p.add_argument("--prior", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--family", required=True)
    p.add_argument("--support", type=int, default=31)
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--theta-bar", type=float, default=2.0)
    p.add_argument("--rank-tol", type=float, default=1e-8)
    p.add_argument("--tikhonov", type=float, default=None)
    p.add_argument("--sweep", action="store_true", help="also run the stability sweep")
    p.add_argument("--noise-norms", default="1e-4,3e-4,1e-3,3e-3,1e-2")
    p.add_argument("--sweep-seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("logprior", help="exact potential via the probability-flow ODE")
    common(p)
    p.add_argument("--prior", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--atol", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--divergence", choices=["auto", "exact", "probes", "exhaustive"],
                   default="auto")
    p.add_argument("--fresh-probes", action="store_true",
                   help="resample probes at every velocity evaluation")
    p.add_argument("--out", default=None, help="write the JSON record here instead of stdout")
    p.set_defaults(func=cmd_logprior)

    p = sub.add_parser("mkkernel", help="render a kernel to IGRID (and optional PNG)")
    common(p)
    p.add_argument("--family", required=True)
    p.add_argument("--support", type=int, default=31)
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--theta", default=None, help="family parameters (comma separated)")
    p.add_argument("--out", required=True)
    p.add_argument("--png", default=None)
    p.set_defaults(func=cmd_mkkernel)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand == "deblur":
        if args.algo == "alt" and not args.prior:
            print("deblur --algo alt requires --prior", file=sys.stderr)
            return 2
        if args.algo == "dr" and not args.denoiser:
            print("deblur --algo dr requires --denoiser", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
