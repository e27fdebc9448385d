"""Command-line interface: ``lipkern <command> [options]``.

Exit codes: 0 success, 1 a check failed, 2 usage error.
Every command accepts ``--config FILE`` (a JSON object of option values);
explicit flags take precedence. The resolved configuration is logged to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import hodgkin
from .estimator import Dataset, UncertifiedKernelError, assemble_gram, dumps, fit, tune_gamma
from .kernels import Kernel, audit_nonexpansive, audit_psd, kernel_from_dict, parse_kernel, uniform_box
from .monotone import MonotoneModel, PicardConfig, PicardNonConvergence, fit_monotone, scatter, simulate

log = logging.getLogger("lipkern")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _kernel(value) -> Kernel:
    if isinstance(value, Kernel):
        return value
    if isinstance(value, dict):
        return kernel_from_dict(value)
    try:
        return parse_kernel(str(value))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _opt(cfg: dict, key: str, default):
    val = cfg.get(key)
    return default if val is None else val


def _floats(text: str) -> list[float]:
    out = []
    for tok in str(text).split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(float(tok))
        except ValueError:
            raise UsageError(f"malformed number {tok!r}") from None
    return out


def _vector(value) -> np.ndarray:
    """A comma list, a JSON list, or a path to a JSON file holding a list."""
    if isinstance(value, (list, tuple)):
        return np.asarray(value, dtype=float)
    text = str(value)
    if Path(text).is_file():
        return np.asarray(json.loads(Path(text).read_text()), dtype=float)
    if text.lstrip().startswith("["):
        return np.asarray(json.loads(text), dtype=float)
    return np.asarray(_floats(text), dtype=float)


def _emit(obj) -> None:
    sys.stdout.write(dumps(obj) + "\n")
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# commands

def cmd_gen_hh(cfg: dict) -> int:
    voltages = _floats(cfg["voltages"]) if cfg.get("voltages") is not None else list(hodgkin.DEFAULT_VOLTAGES)
    if not voltages:
        raise UsageError("voltage list is empty")
    params = hodgkin.HHParams(voltages=tuple(voltages))
    raw = hodgkin.generate_dataset(params)
    data, su, sy = hodgkin.normalize(raw, cfg.get("scaling") or "unit")
    if not cfg.get("out"):
        raise UsageError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    data.save(out / "dataset.json")
    raw.save(out / "dataset_raw.json")
    hodgkin.write_dataset_csv(raw, out / "dataset.csv", params)
    _emit({"n": data.n, "d": data.d, "m": data.m, "input_scale": su, "output_scale": sy,
           "files": sorted(p.name for p in out.iterdir() if p.name.startswith("dataset"))})
    return EXIT_OK


def _load_data(cfg: dict) -> Dataset:
    if not cfg.get("data"):
        raise UsageError("--data is required")
    return Dataset.load(cfg["data"])


def cmd_fit(cfg: dict) -> int:
    gamma, ell = cfg.get("gamma"), cfg.get("ell")
    if (gamma is None) == (ell is None):
        raise UsageError("give exactly one of --gamma and --ell")
    kernel = _kernel(cfg.get("kernel") or "scaled_laplacian")
    data = _load_data(cfg)
    if cfg.get("scatter"):
        data = scatter(data).as_dataset()
    if ell is not None:
        ell = float(ell)
        if not ell > 0:
            raise UsageError("--ell must be positive")
        if not kernel.claims_nonexpansive():
            raise UncertifiedKernelError(
                f"kernel {kernel.to_dict()} is not certified nonexpansive: its RKHS norm does not bound the "
                "Lipschitz constant, so a budget cannot be enforced through gamma")
        gamma = tune_gamma(assemble_gram(kernel, data.inputs, data.m), data.outputs, ell).gamma
    gamma = float(gamma)
    if not gamma > 0:
        raise UsageError("--gamma must be positive")
    model = fit(kernel, data, gamma)
    if cfg.get("out"):
        model.save(cfg["out"])
    _emit({"gamma": model.gamma, "rkhs_norm": model.rkhs_norm, "lipschitz_certified": model.lipschitz_certified,
           "ybar_norm": float(np.linalg.norm(data.outputs)), "n": model.n, "d": model.d, "m": model.m})
    return EXIT_OK


def cmd_check_kernel(cfg: dict) -> int:
    kernel = _kernel(cfg.get("kernel") or "scaled_laplacian")
    dim = int(_opt(cfg, "dim", 2))
    trials = int(_opt(cfg, "trials", 10_000))
    seed = int(_opt(cfg, "seed", 0))
    if trials < 1 or dim < 1:
        raise UsageError("--trials and --dim must be positive")
    sampler = uniform_box(-5.0, 5.0, dim)
    audit = audit_nonexpansive(kernel, sampler, trials, seed)
    m = kernel.output_dim or 1
    psd = audit_psd(kernel, sampler(np.random.default_rng(seed + 1), 20), m)
    report = {"kernel": kernel.to_dict(), "claims_nonexpansive": kernel.claims_nonexpansive(),
              "nonexpansive_audit": audit.to_dict(), "psd_audit": psd.to_dict(),
              "pass": audit.passed and psd.passed}
    _emit(report)
    return EXIT_OK if report["pass"] else EXIT_CHECK


def _picard(cfg: dict) -> PicardConfig:
    return PicardConfig(float(_opt(cfg, "tol", 1e-10)), int(_opt(cfg, "max_iter", 100_000)))


def cmd_fit_monotone(cfg: dict) -> int:
    ell = cfg.get("ell")
    ell = 0.99 if ell is None else float(ell)
    if not 0 < ell < 1:
        raise UsageError(f"--ell must lie in (0, 1), got {ell}")
    kernel = _kernel(cfg.get("kernel") or "scaled_laplacian")
    data = _load_data(cfg)
    gamma = cfg.get("gamma")
    model = fit_monotone(kernel, data, ell, None if gamma is None else float(gamma), _picard(cfg))
    if cfg.get("out"):
        model.save(cfg["out"])
    _emit({"gamma": model.s_model.gamma, "rkhs_norm": model.s_model.rkhs_norm, "ell": model.ell})
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    if not cfg.get("model") or cfg.get("input") is None:
        raise UsageError("--model and --input are required")
    model = MonotoneModel.load(cfg["model"])
    if cfg.get("tol") is not None or cfg.get("max_iter") is not None:
        model.picard = PicardConfig(float(_opt(cfg, "tol", model.picard.tol)),
                                    int(_opt(cfg, "max_iter", model.picard.max_iter)))
    u = _vector(cfg["input"]).reshape(-1)
    y0 = None if cfg.get("y0") is None else _vector(cfg["y0"]).reshape(-1)
    for name, vec in (("--input", u), ("--y0", y0)):
        if vec is not None and vec.size != model.s_model.m:
            raise UsageError(f"{name} has {vec.size} entries, the model acts on R^{model.s_model.m}")
    try:
        res = simulate(model, u, y0)
    except PicardNonConvergence as exc:
        _emit({"converged": False, "iters": exc.iters, "residual": exc.residual})
        return EXIT_CHECK
    _emit({"converged": True, "y": res.y.tolist(), "iters": res.iters, "residual": res.residual})
    return EXIT_OK


def cmd_reproduce(cfg: dict) -> int:
    out = Path(cfg.get("out_dir") or "reproduction")
    voltages = _floats(cfg["voltages"]) if cfg.get("voltages") is not None else list(hodgkin.DEFAULT_VOLTAGES)
    gamma = cfg.get("gamma")
    rep = hodgkin.reproduce_paper(hodgkin.HHParams(voltages=tuple(voltages)),
                                  gamma=hodgkin.REFERENCE_GAMMA if gamma is None else float(gamma),
                                  monotonicity_trials=int(_opt(cfg, "trials", 1000)),
                                  seed=int(_opt(cfg, "seed", 0)))
    rep.write(out)
    _emit({"rkhs_norm": rep.rkhs_norm, "gamma": rep.gamma, "fit_rmse": rep.fit_rmse,
           "monotonicity_pass": rep.monotonicity.passed, "checks": rep.checks, "out_dir": str(out)})
    return EXIT_OK if rep.passed else EXIT_CHECK


COMMANDS = {
    "gen-hh": cmd_gen_hh,
    "fit": cmd_fit,
    "check-kernel": cmd_check_kernel,
    "fit-monotone": cmd_fit_monotone,
    "simulate": cmd_simulate,
    "reproduce": cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipkern", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON file with option values")
        return sp

    sp = add("gen-hh", "generate potassium-channel step-response data")
    sp.add_argument("--voltages", help="comma-separated voltage levels in mV")
    sp.add_argument("--scaling", choices=["unit", "none"], help="normalization of dataset.json (default unit)")
    sp.add_argument("--out", help="output directory")

    sp = add("fit", "regularized least-squares fit")
    sp.add_argument("--data", help="dataset JSON")
    sp.add_argument("--kernel", help="kernel as name:key=val,...")
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--ell", type=float, help="Lipschitz budget; gamma is tuned to meet it")
    sp.add_argument("--scatter", action="store_true", help="fit the scattered data (u+y, u-y)")
    sp.add_argument("--out", help="model JSON to write")

    sp = add("check-kernel", "audit a kernel for nonexpansiveness and positive semidefiniteness")
    sp.add_argument("--kernel")
    sp.add_argument("--dim", type=int)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("fit-monotone", "identify a monotone operator via the scattering transform")
    sp.add_argument("--data")
    sp.add_argument("--kernel")
    sp.add_argument("--ell", type=float)
    sp.add_argument("--gamma", type=float, help="fixed gamma instead of tuning to --ell")
    sp.add_argument("--tol", type=float)
    sp.add_argument("--max-iter", dest="max_iter", type=int)
    sp.add_argument("--out")

    sp = add("simulate", "evaluate a monotone model by Picard iteration")
    sp.add_argument("--model")
    sp.add_argument("--input", help="comma list, JSON list, or JSON file")
    sp.add_argument("--y0")
    sp.add_argument("--tol", type=float)
    sp.add_argument("--max-iter", dest="max_iter", type=int)

    sp = add("reproduce", "run the potassium-channel reproduction")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--voltages")
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--trials", type=int, help="monotonicity check pairs")
    sp.add_argument("--seed", type=int)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = {}
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    if getattr(args, "config", None):
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    cfg.update(flags)
    cfg.setdefault("seed", 0)
    return cfg


def _thread_limit():
    n = os.environ.get("LIPKERN_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # own handler: basicConfig is a no-op when the root logger is already configured
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.propagate = False
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = resolve_config(args)
        log.info("config %s %s", args.command, json.dumps(cfg, sort_keys=True, default=str))
        with _thread_limit():
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"lipkern {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UncertifiedKernelError as exc:
        print(f"lipkern {args.command}: refused: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"lipkern {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
