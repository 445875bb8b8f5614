"""Command-line entry point: ``sbd <command> [options]``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
Every command that writes a directory also writes ``manifest.json``;
``sbd replay manifest.json`` reruns the recorded command.
"""

import argparse
import json
import os
import sys
import time
import warnings

import numpy as np

from . import io
from .experiments import (
    DESK_SWEEP_OPTIONS,
    Bernoulli,
    BernoulliGaussian,
    LowpassBump,
    RandomUnitGaussian,
    SynthSpec,
    kernel_error,
    landscape_sample,
    match_kernels,
    noise_sweep,
    phase_sweep,
    synth,
    theorem_oracle_lemma31,
    theorem_oracle_lemma61,
    theorem_oracle_thm21,
)
from .extensions import DEBLUR_LADDER, cdl_solve, deblur_solve
from .solver import SolverConfig, SolverError, solve

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """``argparse`` parser that exits 1 on usage errors (argparse's default is 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, "%s: error: %s\n" % (self.prog, message))


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers, got %r" % text) from None


def _shape(text):
    try:
        vals = [int(v) for v in text.replace("x", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer or AxB, got %r" % text) from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive: %r" % text)
    return vals[0] if len(vals) == 1 else tuple(vals)


def _snr(text):
    return float("inf") if text.strip().lower() in ("inf", "clean") else float(text)


def _solver_flags(p, with_k=True):
    if with_k:
        p.add_argument("--k", type=_shape, required=True, help="kernel size (INT, or AxB for images)")
    p.add_argument("--k-prime", type=_shape, default=None, help="lifted kernel size for Stage II (default 3k)")
    p.add_argument("--lambda0", type=float, default=None, help="Stage I penalty (default: half the flat-region bound)")
    p.add_argument("--lambda-min", type=float, default=1e-4, help="smallest Stage II penalty (default 1e-4)")
    p.add_argument("--beta", type=float, default=2.0, help="ladder ratio, > 1 (default 2)")
    p.add_argument("--mu", type=float, default=None, help="Huber width for Stage I (default lambda_min/10)")
    p.add_argument("--x-scale", type=float, default=None, help="known activation magnitude; caps the automatic lambda0")
    p.add_argument("--grad-tol", type=float, default=1e-6, help="Riemannian gradient tolerance (default 1e-6)")
    p.add_argument("--max-iters", type=int, default=2000, help="outer iterations per level (default 2000)")
    p.add_argument("--max-inner-iters", type=int, default=20000,
                   help="inner solver iterations per evaluation (default 20000)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")


def _solver_config(args, k):
    return SolverConfig(k=k, k_prime=args.k_prime, lambda0=args.lambda0, lambda_min=args.lambda_min,
                        beta=args.beta, mu=args.mu, x_scale=args.x_scale, grad_tol=args.grad_tol,
                        max_outer_iters=args.max_iters, max_inner_iters=args.max_inner_iters, seed=args.seed)


def _solver_options(args):
    return {"lambda_min": args.lambda_min, "beta": args.beta, "x_scale": args.x_scale,
            "grad_tol": args.grad_tol, "max_outer_iters": args.max_iters,
            "max_inner_iters": args.max_inner_iters}


def build_parser():
    parser = _Parser(prog="sbd", description="Sparse blind deconvolution on the sphere.")
    parser.add_argument("--version", action="version", version="%(prog)s " + _version())
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="draw a synthetic instance y = a0 (*) x0 + noise")
    p.add_argument("--m", type=_shape, required=True, help="signal size (INT, or AxB)")
    p.add_argument("--k", type=_shape, required=True, help="kernel size (INT, or AxB)")
    p.add_argument("--theta", type=float, default=0.1, help="activation density (default 0.1)")
    p.add_argument("--activation", choices=["bernoulli", "bernoulli-gaussian"], default="bernoulli-gaussian",
                   help="activation model (default bernoulli-gaussian)")
    p.add_argument("--kernel", choices=["gaussian", "lowpass"], default="gaussian",
                   help="random unit Gaussian kernel or smooth bump (default gaussian)")
    p.add_argument("--width", type=float, default=2.0, help="bump width for --kernel lowpass (default 2)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--noise-sigma", type=float, default=0.0, help="additive Gaussian noise level (default 0)")
    g.add_argument("--snr", type=_snr, default=None, help="noise level set by SNR in dB instead")
    p.add_argument("--seed", type=int, default=0, help="instance seed (default 0)")
    p.add_argument("--format", choices=["sbd", "csv"], default="sbd", help="output format (default sbd)")
    p.add_argument("--out", required=True, help="output directory (y, a0, x0, manifest.json)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("solve", help="two-stage recovery of a kernel from one observation")
    p.add_argument("--input", required=True, help="observation y (.sbd or .csv)")
    _solver_flags(p)
    p.add_argument("--truth", default=None, help="ground-truth kernel; prints the shift-invariant error")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="phase-transition or noise sweep (CSV out)")
    p.add_argument("kind", choices=["phase", "noise"], help="sweep type")
    p.add_argument("--m", type=int, default=512, help="signal length (default 512)")
    p.add_argument("--trials", type=int, default=20, help="trials per cell (default 20)")
    p.add_argument("--thetas", type=_floats, default=[0.005, 0.05, 0.3], help="phase: comma-separated densities")
    p.add_argument("--ratios", type=_floats, default=[0.02, 0.1, 0.3], help="phase: comma-separated k/m values")
    p.add_argument("--snrs", type=lambda s: [_snr(v) for v in s.split(",")], default=[float("inf"), 40.0, 20.0, 10.0],
                   help="noise: comma-separated SNRs in dB, 'inf' for noise-free")
    p.add_argument("--theta", type=float, default=0.05, help="noise: density (default 0.05)")
    p.add_argument("--ratio", type=float, default=0.14, help="noise: k/m (default 0.14)")
    p.add_argument("--lambda-min", type=float, default=DESK_SWEEP_OPTIONS["lambda_min"],
                   help="smallest Stage II penalty (default %g)" % DESK_SWEEP_OPTIONS["lambda_min"])
    p.add_argument("--beta", type=float, default=2.0, help="ladder ratio (default 2)")
    p.add_argument("--x-scale", type=float, default=DESK_SWEEP_OPTIONS["x_scale"],
                   help="activation magnitude hint (default 1)")
    p.add_argument("--grad-tol", type=float, default=1e-6, help="Riemannian gradient tolerance (default 1e-6)")
    p.add_argument("--max-iters", type=int, default=DESK_SWEEP_OPTIONS["max_outer_iters"],
                   help="outer iterations per level; trials over budget count as failures (default %d)"
                   % DESK_SWEEP_OPTIONS["max_outer_iters"])
    p.add_argument("--max-inner-iters", type=int, default=DESK_SWEEP_OPTIONS["max_inner_iters"],
                   help="inner solver iterations per evaluation (default %d)" % DESK_SWEEP_OPTIONS["max_inner_iters"])
    p.add_argument("--threads", type=int, default=None, help="worker processes (default SBD_THREADS or cores)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("landscape", help="objective on an icosphere grid plus polished local minima")
    p.add_argument("--a0", type=_floats, default=[1.0, 8.0, 2.0], help="length-3 kernel (default 1,8,2)")
    p.add_argument("--theta", type=float, default=0.1, help="Bernoulli-Gaussian density of x0 (default 0.1)")
    p.add_argument("--m", type=int, default=256, help="signal length (default 256)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1, help="penalty (default 0.1)")
    p.add_argument("--refinements", type=int, default=4, help="icosphere subdivisions (default 4)")
    p.add_argument("--objective", choices=["phi", "phi_hat"], default="phi", help="objective (default phi)")
    p.add_argument("--seed", type=int, default=0, help="seed for x0 (default 0)")
    p.add_argument("--out", default=None, help="grid CSV path (default stdout)")
    p.add_argument("--minima", default=None, help="optional JSON path for the local-minimum report")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("oracle", help="computational checks of the landscape results (JSON out)")
    p.add_argument("which", choices=["thm21", "lemma31", "lemma61"], help="which check suite")
    p.add_argument("--a0", type=_floats, required=True, help="comma-separated kernel")
    p.add_argument("--m", type=int, default=None, help="signal length (thm21 default 8; lemma61 default 4k)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="penalty (thm21 default 0.8; lemma61 default 0.1)")
    p.add_argument("--lambda-rel", type=float, default=0.99, help="lemma31: relative penalty (default 0.99)")
    p.add_argument("--starts", type=int, default=50, help="lemma31: random starts (default 50)")
    p.add_argument("--p", type=float, default=4.0, help="lemma61: loss exponent (default 4)")
    p.add_argument("--q", type=float, default=4.0, help="lemma61: sphere exponent (default 4)")
    p.add_argument("--seed", type=int, default=0, help="seed (default 0)")
    p.add_argument("--out", default=None, help="JSON path (default stdout)")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("cdl", help="convolutional dictionary learning with N kernels")
    p.add_argument("--input", required=True, help="observation y (.sbd or .csv)")
    p.add_argument("--n-kernels", type=int, required=True, help="number of kernels N")
    _solver_flags(p)
    p.add_argument("--truth", default=None, help="ground-truth bank (N x k .sbd); prints matched errors")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_cdl)

    p = sub.add_parser("deblur", help="nonnegative blur-kernel estimation from a PGM image")
    p.add_argument("--input", required=True, help="blurred image (binary PGM)")
    p.add_argument("--k1", type=int, required=True, help="kernel rows")
    p.add_argument("--k2", type=int, required=True, help="kernel columns")
    p.add_argument("--lambdas", type=_floats, default=list(DEBLUR_LADDER),
                   help="Stage II ladder (default 0.1,0.01,0.001,0.001)")
    p.add_argument("--grad-tol", type=float, default=1e-6, help="Riemannian gradient tolerance (default 1e-6)")
    p.add_argument("--max-iters", type=int, default=2000, help="outer iterations per level (default 2000)")
    p.add_argument("--seed", type=int, default=0, help="seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("manifest", help="manifest.json written by an earlier run")
    p.add_argument("--out", default=None, help="replace the recorded output path")
    p.set_defaults(func=cmd_replay)
    return parser


def _version():
    from . import __version__

    return __version__


def _config_echo(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _write_manifest(out_dir, args, argv, started, name="manifest.json"):
    manifest = io.make_manifest(args.command, _config_echo(args), getattr(args, "seed", None),
                                time.time() - started, argv)
    io.write_json(os.path.join(out_dir, name), manifest)


def _write_file_manifest(out_path, args, argv, started):
    """Manifest next to a single-file output: ``<stem>.manifest.json``."""
    if out_path:
        _write_manifest(os.path.dirname(out_path) or ".", args, argv, started,
                        os.path.splitext(os.path.basename(out_path))[0] + ".manifest.json")


def _read_input(path):
    try:
        return io.read_signal(path)
    except OSError as exc:
        raise UsageError("cannot read %s: %s" % (path, exc.strerror or exc)) from None


def _run_solver(fn):
    """Call ``fn`` and print any lambda0 clamp warning as a plain stdout line."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            return fn()
        finally:
            for w in caught:
                msg = str(w.message)
                if msg.startswith("lambda0 clamped"):
                    print(msg)
                else:
                    print("warning: %s" % msg, file=sys.stderr)


def cmd_synth(args, argv):
    started = time.time()
    if args.activation == "bernoulli":
        act = Bernoulli(args.theta)
    else:
        act = BernoulliGaussian(args.theta)
    kern = RandomUnitGaussian() if args.kernel == "gaussian" else LowpassBump(args.width)
    spec = SynthSpec(args.m, args.k, act, kern, args.noise_sigma, args.seed)
    if args.snr is not None:
        from .experiments import noise_sigma_for_snr

        spec.noise_sigma = noise_sigma_for_snr(synth(spec).clean, args.snr)
    inst = synth(spec)
    os.makedirs(args.out, exist_ok=True)
    write = io.write_sbd if args.format == "sbd" else io.write_csv_signal
    for name, arr in (("y", inst.y), ("a0", inst.a0), ("x0", inst.x0)):
        write(os.path.join(args.out, "%s.%s" % (name, args.format)), arr)
    _write_manifest(args.out, args, argv, started)
    print("wrote %s (noise_sigma %.6g)" % (args.out, spec.noise_sigma))
    return EXIT_OK


def cmd_solve(args, argv):
    started = time.time()
    y = _read_input(args.input)
    truth = _read_input(args.truth) if args.truth else None
    cfg = _solver_config(args, args.k)
    os.makedirs(args.out, exist_ok=True)
    code = EXIT_OK
    try:
        res = _run_solver(lambda: solve(y, cfg))
        a_hat, x_hat, trace = res.a_hat, res.x_hat, res.trace
    except SolverError as exc:
        print("solver failed: %s" % exc, file=sys.stderr)
        if exc.best is None:
            _write_manifest(args.out, args, argv, started)
            return EXIT_NUMERIC
        a_hat, x_hat, trace = exc.best.kernels[0], exc.best.x[0, 0], exc.best.trace
        code = EXIT_NUMERIC
    io.write_sbd(os.path.join(args.out, "a_hat.sbd"), a_hat)
    io.write_sbd(os.path.join(args.out, "x_hat.sbd"), x_hat)
    trace.to_csv(os.path.join(args.out, "trace.csv"))
    _write_manifest(args.out, args, argv, started)
    if truth is not None:
        print("kernel_error %.6e" % kernel_error(a_hat, truth))
    return code


def cmd_sweep(args, argv):
    started = time.time()
    opts = _solver_options(args)
    if args.kind == "phase":
        diag = phase_sweep(args.thetas, args.ratios, m=args.m, trials=args.trials, seed=args.seed,
                           solver_options=opts, threads=args.threads)
    else:
        diag = noise_sweep(args.snrs, args.theta, args.ratio, m=args.m, trials=args.trials, seed=args.seed,
                           solver_options=opts, threads=args.threads)
    diag.to_csv(args.out)
    _write_file_manifest(args.out, args, argv, started)
    for row in diag.rows():
        print("%s=%g %s=%g mean_error=%.6e success_rate=%.3f" % (diag.axis_names[0], row[0], diag.axis_names[1],
                                                                 row[1], row[3], row[4]))
    return EXIT_OK


def cmd_landscape(args, argv):
    started = time.time()
    if len(args.a0) != 3:
        raise UsageError("--a0 needs exactly three entries")
    a0 = np.asarray(args.a0, dtype=float)
    x0 = None
    m = None
    if args.objective == "phi":
        x0 = synth(SynthSpec(args.m, 3, BernoulliGaussian(args.theta), RandomUnitGaussian(), 0.0, args.seed)).x0
    else:
        m = args.m
    sample = landscape_sample(a0, x0, args.lam, refinements=args.refinements, objective=args.objective, m=m)
    if args.out:
        sample.to_csv(args.out)
        _write_file_manifest(args.out, args, argv, started)
    else:
        sample.to_csv("/dev/stdout")
    if args.minima:
        io.write_json(args.minima, {"minima": [{"a": p.a, "value": p.value, "grad_norm": p.grad_norm,
                                                "min_hess_eig": p.min_hess_eig, "tau": p.nearest_tau,
                                                "sign": p.nearest_sign, "angle": p.angle}
                                               for p in sample.report.points]})
    print("local minima %d, max angle to a signed shift truncation %.3e rad"
          % (len(sample.report), sample.report.max_angle), file=sys.stderr)
    return EXIT_OK


def cmd_oracle(args, argv):
    started = time.time()
    a0 = np.asarray(args.a0, dtype=float)
    if args.which == "thm21":
        rep = theorem_oracle_thm21(a0, args.m or 8, 0.8 if args.lam is None else args.lam, seed=args.seed)
    elif args.which == "lemma31":
        rep = theorem_oracle_lemma31(a0, args.lambda_rel, n_starts=args.starts, seed=args.seed)
    else:
        rep = theorem_oracle_lemma61(a0, args.p, args.q, 0.1 if args.lam is None else args.lam, m=args.m,
                                     seed=args.seed)
    text = json.dumps(rep, indent=2, sort_keys=True, default=io._json_default)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        _write_file_manifest(args.out, args, argv, started)
    else:
        print(text)
    return EXIT_OK


def cmd_cdl(args, argv):
    started = time.time()
    y = _read_input(args.input)
    truth = _read_input(args.truth) if args.truth else None
    cfg = _solver_config(args, args.k)
    os.makedirs(args.out, exist_ok=True)
    try:
        res = _run_solver(lambda: cdl_solve(y, args.n_kernels, cfg))
    except SolverError as exc:
        print("solver failed: %s" % exc, file=sys.stderr)
        if exc.best is not None:
            io.write_sbd(os.path.join(args.out, "kernels.sbd"), exc.best.kernels.reshape(args.n_kernels, -1))
        _write_manifest(args.out, args, argv, started)
        return EXIT_NUMERIC
    io.write_sbd(os.path.join(args.out, "kernels.sbd"), res.bank.kernels.reshape(len(res.bank), -1))
    io.write_sbd(os.path.join(args.out, "kernels_aligned.sbd"), res.aligned.kernels.reshape(len(res.aligned), -1))
    io.write_sbd(os.path.join(args.out, "activations.sbd"), res.activations.reshape(len(res.bank), -1))
    res.trace.to_csv(os.path.join(args.out, "trace.csv"))
    _write_manifest(args.out, args, argv, started)
    if truth is not None:
        perm, errs = match_kernels(res.bank.kernels, np.atleast_2d(truth))
        for i, (j, e) in enumerate(zip(perm, errs)):
            print("kernel %d -> truth %d error %.6e" % (i, j, e))
    return EXIT_OK


def cmd_deblur(args, argv):
    started = time.time()
    try:
        img = io.read_pgm(args.input)
    except OSError as exc:
        raise UsageError("cannot read %s: %s" % (args.input, exc.strerror or exc)) from None
    cfg = SolverConfig(k=(args.k1, args.k2), lambdas=tuple(args.lambdas), grad_tol=args.grad_tol,
                       max_outer_iters=args.max_iters, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    try:
        res = _run_solver(lambda: deblur_solve(img, args.k1, args.k2, cfg))
    except SolverError as exc:
        print("solver failed: %s" % exc, file=sys.stderr)
        _write_manifest(args.out, args, argv, started)
        return EXIT_NUMERIC
    io.write_sbd(os.path.join(args.out, "kernel.sbd"), res.kernel)
    peak = float(res.kernel.max())
    io.write_pgm(os.path.join(args.out, "kernel.pgm"), res.kernel / peak if peak > 0 else res.kernel)
    io.write_sbd(os.path.join(args.out, "grad_x.sbd"), res.latent_gradients.gx)
    io.write_sbd(os.path.join(args.out, "grad_y.sbd"), res.latent_gradients.gy)
    res.trace.to_csv(os.path.join(args.out, "trace.csv"))
    _write_manifest(args.out, args, argv, started)
    return EXIT_OK


def cmd_replay(args, argv):
    try:
        with open(args.manifest, encoding="utf-8") as fh:
            recorded = json.load(fh)["argv"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError("unreadable manifest %s: %s" % (args.manifest, exc)) from None
    if not recorded or recorded[0] == "replay":
        raise UsageError("manifest has no replayable command")
    if args.out is not None:
        recorded = list(recorded)
        i = recorded.index("--out") if "--out" in recorded else -1
        if i >= 0:
            recorded[i + 1] = args.out
        else:
            recorded += ["--out", args.out]
    return main(recorded)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (UsageError, io.FormatError) as exc:
        print("sbd %s: error: %s" % (args.command, exc), file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print("sbd %s: error: %s" % (args.command, exc), file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print("sbd %s: solver failed: %s" % (args.command, exc), file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print("sbd %s: numerical failure: %s" % (args.command, exc), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
