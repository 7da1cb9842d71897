"""Command-line pipeline: simulate, calibrate, estimate, analyze, bootstrap.

Exit codes: 0 success, 2 input validation, 3 I/O failure, 4 domain error
(for example an unphysical state where a physical one is required).
Every option may also come from a ``--config`` JSON file; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__
from .calibration import (
    SIGNAL_FREQUENCY,
    ThermalCalibration,
    fit_thermal,
    input_sigma,
    input_temperature,
    normalize_and_calibrate,
)
from .errors import DomainError, FitError, SchemaError, UnphysicalStateError
from .estimator import (
    JOINT_CONVENTIONS,
    analysis_quantities,
    bin_variances,
    estimate_state,
    parametric_bootstrap,
)
from .formats import (
    SCHEMA_BOOTSTRAP,
    SCHEMA_CALIBRATION,
    SCHEMA_PARAMS,
    SCHEMA_REPORT,
    SCHEMA_REPRODUCTION,
    SCHEMA_STATE,
    dumps_json,
    format_variances_csv,
    read_dataset,
    read_json,
    read_sweep_csv,
    sha256_file,
    sha256_text,
    write_dataset,
)
from .gaussian import (
    GaussianState,
    check_physicality,
    entanglement_witness,
    minimum_variances,
    negativity,
)
from .squeezer import PUBLISHED_PARAMS, PUBLISHED_T, SqueezerParams, fit_model, predict_covariance
from .synth import AcquisitionConfig, QuadratureDataset, generate_dataset

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_DOMAIN = 4

SCHEMA_FIT = "twomode/model-fit/1"

GLOSSARY = {
    "e_w": "entanglement witness; negative values certify entanglement",
    "a_star": "mode weighting that minimizes the witness",
    "phase_star": "combined measurement phase theta1 + theta2 at the witness minimum",
    "delta_epr": "EPR variance at a = 1; values below 1 indicate entanglement",
    "negativity": "negativity from the smallest partial-transpose symplectic eigenvalue",
    "physical": "covariance satisfies the uncertainty principle",
    "general_gaussian_model": (
        "The experiment also reports E_W = -0.297 and N = 0.0921 from an "
        "unconstrained Gaussian fit to measured data. That gap comes from "
        "experimental systematics absent from simulated data, where the "
        "unconstrained estimate agrees with the single-squeezer covariance. "
        "Those two figures are therefore not reproduced here."
    ),
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


# option name -> (argparse kwargs, default)
_ACQ_OPTIONS = {
    "records": ({"type": int, "help": "number of records"}, 1000),
    "samples_per_record": ({"type": int, "help": "samples per record"}, 10000),
    "sample_interval": ({"type": float, "help": "sampling interval in seconds"}, 1e-7),
    "detune1": ({"type": float, "help": "channel 1 phase detuning in Hz"}, 1e3),
    "detune2": ({"type": float, "help": "channel 2 phase detuning in Hz"}, 5e4),
}
_SEED = {"seed": ({"type": int, "help": "64-bit RNG seed (required)"}, None)}
_WORKERS = {"workers": ({"type": int, "help": "worker threads"}, 1)}
_OUT = {"out": ({"help": "output path (stdout when omitted)"}, None)}

COMMANDS = {
    "simulate": {
        "help": "synthesize a quadrature dataset from model parameters or a state",
        "inputs": [],
        "options": {
            "params": ({"help": "squeezer parameter JSON"}, None),
            "state": ({"help": "Gaussian state JSON (instead of --params)"}, None),
            "t": ({"type": float, "help": "hybrid transmissivity"}, PUBLISHED_T),
            **_ACQ_OPTIONS,
            **_SEED,
            **_WORKERS,
            "out": ({"help": "dataset output path"}, None),
            "format": ({"choices": ("csv", "binary"), "help": "dataset container"}, "csv"),
        },
    },
    "estimate": {
        "help": "estimate the Gaussian state from a dataset",
        "inputs": ["dataset"],
        "options": {**_OUT},
    },
    "analyze": {
        "help": "witness, negativity and optional bootstrap for a state",
        "inputs": ["state"],
        "options": {
            "bootstrap": ({"type": int, "help": "bootstrap replicates (0 disables)"}, 0),
            **_SEED,
            **_ACQ_OPTIONS,
            **_WORKERS,
            **_OUT,
        },
    },
    "fit-model": {
        "help": "fit the single-squeezer model to binned variances of a dataset",
        "inputs": ["dataset"],
        "options": {
            "no_diff": ({"action": "store_const", "const": True, "help": "omit Var(U1-U2) from the fit"}, False),
            **_OUT,
        },
    },
    "calibrate-thermal": {
        "help": "fit chain gain, added noise and T_e to a thermal sweep CSV",
        "inputs": ["sweep"],
        "options": {
            "f_s": ({"type": float, "help": "signal frequency in Hz"}, SIGNAL_FREQUENCY),
            **_OUT,
        },
    },
    "calibrate-apply": {
        "help": "convert raw SQ-on samples to vacuum units",
        "inputs": [],
        "options": {
            "on": ({"help": "raw dataset with the squeezer on"}, None),
            "off": ({"help": "raw dataset with the squeezer bypassed"}, None),
            "gains": ({"type": float, "nargs": 2, "metavar": ("G1", "G2"), "help": "gain ratios"}, None),
            "params": ({"help": "model fit JSON supplying g1, g2"}, None),
            "calibration": ({"help": "thermal calibration JSON"}, None),
            "t_fridge": ({"type": float, "help": "fridge temperature in kelvin"}, 0.025),
            "sigma_in": ({"type": float, "help": "calibration-state variance override"}, None),
            "exact_sigma": ({"action": "store_const", "const": True, "help": "use the exact thermal variance"}, False),
            "out": ({"help": "calibrated dataset output path"}, None),
            "format": ({"choices": ("csv", "binary"), "help": "dataset container"}, "csv"),
        },
    },
    "variances": {
        "help": "per-phase-pair variances across records as CSV",
        "inputs": ["dataset"],
        "options": {
            "joint": ({"choices": JOINT_CONVENTIONS, "help": "joint column convention"}, "half"),
            **_OUT,
        },
    },
    "bootstrap": {
        "help": "parametric bootstrap of witness and negativity from a state",
        "inputs": ["state"],
        "options": {
            "replicates": ({"type": int, "help": "number of replicates"}, 20),
            **_SEED,
            **_ACQ_OPTIONS,
            **_WORKERS,
            **_OUT,
        },
    },
    "reproduce-paper": {
        "help": "run the full pipeline at the published parameters and compare",
        "inputs": [],
        "options": {
            **_SEED,
            **_ACQ_OPTIONS,
            "replicates": ({"type": int, "help": "bootstrap replicates"}, 20),
            **_WORKERS,
            "out": ({"help": "write the comparison as JSON"}, None),
        },
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twomode", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=spec["help"], description=spec["help"])
        for inp in spec["inputs"]:
            p.add_argument(inp, help=f"input {inp} path")
        p.add_argument("--config", help="JSON file of option defaults (flags win)")
        for opt, (kwargs, default) in spec["options"].items():
            extra = dict(kwargs)
            if default is not None and "help" in extra:
                extra["help"] += f" (default {default})"
            p.add_argument("--" + opt.replace("_", "-"), dest=opt, default=None, **extra)
    return parser


def _merge_options(command: str, args: argparse.Namespace, inherited: dict | None = None) -> dict:
    spec = COMMANDS[command]["options"]
    opts = {k: default for k, (_, default) in spec.items()}
    if inherited:
        opts.update({k: v for k, v in inherited.items() if k in spec})
    if args.config:
        config = _load_config(args.config)
        unknown = sorted(set(config) - set(spec))
        if unknown:
            raise CliError(f"{args.config}: unknown option(s) for {command}: {', '.join(unknown)}")
        opts.update(config)
    opts.update({k: v for k, v in vars(args).items() if k in spec and v is not None})
    return opts


def _load_config(path) -> dict:
    doc = read_json(path)
    doc.pop("schema", None)
    return {k.replace("-", "_"): v for k, v in doc.items()}


def _require(opts: dict, *names: str) -> None:
    for name in names:
        if opts.get(name) in (None, ""):
            raise CliError(f"--{name.replace('_', '-')} is required")


def _acquisition(opts: dict) -> AcquisitionConfig:
    seed = opts.get("seed")
    return AcquisitionConfig(
        sample_interval=float(opts["sample_interval"]),
        detune1=float(opts["detune1"]),
        detune2=float(opts["detune2"]),
        samples_per_record=int(opts["samples_per_record"]),
        n_records=int(opts["records"]),
        seed=0 if seed is None else int(seed),
    )


def _acq_options(config: AcquisitionConfig) -> dict:
    return {
        "records": config.n_records,
        "samples_per_record": config.samples_per_record,
        "sample_interval": config.sample_interval,
        "detune1": config.detune1,
        "detune2": config.detune2,
    }


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def load_state(path) -> tuple[GaussianState, dict]:
    """A state from a state document, an analysis report or a hand-written ``{mu, sigma, convention}``."""
    doc = read_json(path, (SCHEMA_STATE, SCHEMA_REPORT), required=False)
    body = doc["state"] if doc.get("schema") == SCHEMA_REPORT else doc
    if "sigma" not in body:
        raise SchemaError(f"{path}: no covariance found")
    return GaussianState.from_dict(body), doc


def load_params(path) -> SqueezerParams:
    doc = read_json(path, (SCHEMA_PARAMS, SCHEMA_FIT), required=False)
    body = doc["params"] if doc.get("schema") == SCHEMA_FIT else doc
    return SqueezerParams.from_dict(body)


def state_hash(state: GaussianState) -> str:
    return sha256_text(dumps_json(state.to_dict()))


def analysis_report(state: GaussianState, bootstrap=None, seed=None, acquisition=None) -> dict:
    physical, nu_min = check_physicality(state)
    w = entanglement_witness(state)
    try:
        n = negativity(state)
        neg = {"negativity": n.negativity, "nu": list(n.nu), "nu_tilde": list(n.nu_tilde)}
    except DomainError:
        neg = None
    return {
        "schema": SCHEMA_REPORT,
        "state": state.to_dict(),
        "physical": physical,
        "nu_min": nu_min,
        "entangled": w.entangled,
        "witness": {
            "e_w": w.e_w,
            "a_star": w.a_star,
            "phase_star": w.phase_star,
            "delta_epr": w.delta_epr,
            "fallback": w.fallback,
        },
        "negativity": neg,
        "bootstrap": bootstrap.to_dict() if bootstrap is not None else None,
        "provenance": {
            "input_sha256": state_hash(state),
            "seed": seed,
            "acquisition": _acq_options(acquisition) if acquisition is not None else None,
            "replicates": bootstrap.replicates if bootstrap is not None else 0,
            "tool_version": __version__,
        },
        "glossary": GLOSSARY,
    }


def _bootstrap(state, opts, replicates):
    physical, nu_min = check_physicality(state)
    if not physical:
        raise UnphysicalStateError(
            f"state is unphysical (smallest symplectic eigenvalue {nu_min:.6g} < 0.5); "
            "a parametric bootstrap needs a physical covariance to resample from. "
            "Bootstrap from a model-predicted state instead."
        )
    config = _acquisition(opts)
    return config, parametric_bootstrap(
        state, config, replicates=replicates, seed=int(opts["seed"]), workers=int(opts["workers"])
    )


def cmd_simulate(args) -> int:
    opts = _merge_options("simulate", args)
    _require(opts, "seed", "out")
    if (opts["params"] is None) == (opts["state"] is None):
        raise CliError("exactly one of --params or --state is required")
    if opts["params"] is not None:
        state = predict_covariance(load_params(opts["params"]), t=float(opts["t"]))
    else:
        state, _ = load_state(opts["state"])
    physical, nu_min = check_physicality(state)
    if not physical:
        raise UnphysicalStateError(f"cannot sample an unphysical state (nu_min = {nu_min:.6g})")
    data = generate_dataset(state, _acquisition(opts), workers=int(opts["workers"]))
    write_dataset(data, opts["out"], opts["format"])
    return EXIT_OK


def cmd_estimate(args) -> int:
    opts = _merge_options("estimate", args)
    est = estimate_state(read_dataset(args.dataset))
    doc = {
        "schema": SCHEMA_STATE,
        **est.state.to_dict(),
        "physical": est.physical,
        "nu_min": est.nu_min,
        "n_samples": est.n,
        "phase_nonuniformity": est.nonuniformity,
        "input_sha256": sha256_file(args.dataset),
        "tool_version": __version__,
    }
    _emit(dumps_json(doc), opts["out"])
    return EXIT_OK


def cmd_analyze(args) -> int:
    state, doc = load_state(args.state)
    inherited = None
    if doc.get("schema") == SCHEMA_REPORT:
        prov = doc.get("provenance") or {}
        inherited = {"bootstrap": prov.get("replicates", 0), "seed": prov.get("seed")}
        inherited.update(prov.get("acquisition") or {})
    opts = _merge_options("analyze", args, inherited)
    replicates = int(opts["bootstrap"] or 0)
    report = None
    config = None
    if replicates:
        _require(opts, "seed")
        config, report = _bootstrap(state, opts, replicates)
    seed = int(opts["seed"]) if replicates else None
    _emit(dumps_json(analysis_report(state, report, seed, config)), opts["out"])
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    state, _ = load_state(args.state)
    opts = _merge_options("bootstrap", args)
    _require(opts, "seed")
    config, report = _bootstrap(state, opts, int(opts["replicates"]))
    doc = {
        "schema": SCHEMA_BOOTSTRAP,
        **report.to_dict(),
        "provenance": {
            "input_sha256": state_hash(state),
            "seed": int(opts["seed"]),
            "acquisition": _acq_options(config),
            "tool_version": __version__,
        },
    }
    _emit(dumps_json(doc), opts["out"])
    return EXIT_OK


def _fit_dataset(data: QuadratureDataset, include_diff: bool = True):
    return fit_model(bin_variances(data).to_traces(), include_diff=include_diff)


def cmd_fit_model(args) -> int:
    opts = _merge_options("fit-model", args)
    fit = _fit_dataset(read_dataset(args.dataset), include_diff=not opts["no_diff"])
    doc = {
        "schema": SCHEMA_FIT,
        "params": fit.params.to_dict(),
        **fit.to_dict(),
        "input_sha256": sha256_file(args.dataset),
        "tool_version": __version__,
    }
    _emit(dumps_json(doc), opts["out"])
    return EXIT_OK


def cmd_calibrate_thermal(args) -> int:
    opts = _merge_options("calibrate-thermal", args)
    fit = fit_thermal(read_sweep_csv(args.sweep), f_s=float(opts["f_s"]))
    doc = {
        "schema": SCHEMA_CALIBRATION,
        **fit.calibration.to_dict(),
        "rss": fit.rss,
        "dof": fit.dof,
        "input_sha256": sha256_file(args.sweep),
        "tool_version": __version__,
    }
    _emit(dumps_json(doc), opts["out"])
    return EXIT_OK


def cmd_calibrate_apply(args) -> int:
    opts = _merge_options("calibrate-apply", args)
    _require(opts, "on", "off", "out")
    if opts["gains"] is not None and opts["params"] is not None:
        raise CliError("give either --gains or --params, not both")
    if opts["params"] is not None:
        p = load_params(opts["params"])
        gains = (p.g1, p.g2)
    else:
        gains = tuple(opts["gains"]) if opts["gains"] is not None else (1.0, 1.0)
    if opts["sigma_in"] is not None:
        sigma_in = float(opts["sigma_in"])
    elif opts["calibration"] is not None:
        calib = ThermalCalibration.from_dict(read_json(opts["calibration"], SCHEMA_CALIBRATION, required=False))
        t_in = float(input_temperature(float(opts["t_fridge"]), calib.t_e))
        sigma_in = input_sigma(t_in, calib.f_s, exact=bool(opts["exact_sigma"]))
    else:
        sigma_in = 0.5
    on, off = read_dataset(opts["on"]), read_dataset(opts["off"])
    cal = normalize_and_calibrate(on.w1, on.w2, off.w1, off.w2, gains=gains, sigma_in=sigma_in)
    out = QuadratureDataset(theta1=on.theta1, w1=cal.w1, theta2=on.theta2, w2=cal.w2, config=on.config)
    write_dataset(out, opts["out"], opts["format"])
    return EXIT_OK


def cmd_variances(args) -> int:
    opts = _merge_options("variances", args)
    binned = bin_variances(read_dataset(args.dataset), joint=opts["joint"])
    _emit(format_variances_csv(binned), opts["out"])
    return EXIT_OK


PUBLISHED_VALUES = {
    "e_w": -0.263,
    "a_star": 1.11,
    "negativity": 0.0824,
    "squeezing_w1_percent": 15.0,
    "squeezing_w2_percent": 15.0,
    "squeezing_joint_percent": 25.0,
    "s": 5.41,
    "alpha": 0.1304,
    "beta": 0.202,
    "std_e_w": 0.001,
    "std_negativity": 0.0004,
}


def _squeezing_percent(sigma) -> dict:
    m1, m2, mj = minimum_variances(sigma)
    return {
        "squeezing_w1_percent": 100.0 * (0.5 - m1) / 0.5,
        "squeezing_w2_percent": 100.0 * (0.5 - m2) / 0.5,
        "squeezing_joint_percent": 100.0 * (0.5 - mj) / 0.5,
    }


def reproduce(opts: dict) -> dict:
    """Model, simulated and bootstrap values at the published parameters."""
    config = _acquisition(opts)
    model_state = predict_covariance(PUBLISHED_PARAMS)
    w = entanglement_witness(model_state)
    model = {
        "e_w": w.e_w,
        "a_star": w.a_star,
        "negativity": negativity(model_state).negativity,
        "delta_epr": w.delta_epr,
        **_squeezing_percent(model_state.sigma),
        "s": PUBLISHED_PARAMS.s,
        "alpha": PUBLISHED_PARAMS.alpha,
        "beta": PUBLISHED_PARAMS.beta,
    }
    data = generate_dataset(model_state, config, workers=int(opts["workers"]))
    est = estimate_state(data)
    sw = entanglement_witness(est.state)
    fit = _fit_dataset(data)
    simulated = {
        "e_w": sw.e_w,
        "a_star": sw.a_star,
        "negativity": analysis_quantities(est.state)[1],
        "delta_epr": sw.delta_epr,
        **_squeezing_percent(est.state.sigma),
        "s": fit.params.s,
        "alpha": fit.params.alpha,
        "beta": fit.params.beta,
    }
    boot = None
    if int(opts["replicates"]) >= 2:
        boot = parametric_bootstrap(
            model_state, config, replicates=int(opts["replicates"]), workers=int(opts["workers"])
        )
        simulated["std_e_w"] = boot.std_e_w
        simulated["std_negativity"] = boot.std_negativity
    return {
        "schema": SCHEMA_REPRODUCTION,
        "published": PUBLISHED_VALUES,
        "model": model,
        "simulated": simulated,
        "fit_stderr": fit.stderr,
        "estimate_physical": est.physical,
        "bootstrap": boot.to_dict() if boot is not None else None,
        "provenance": {
            "seed": config.seed,
            "acquisition": _acq_options(config),
            "replicates": int(opts["replicates"]),
            "tool_version": __version__,
        },
        "glossary": GLOSSARY,
    }


def format_table(result: dict) -> str:
    rows = [
        ("E_W", "e_w"),
        ("a*", "a_star"),
        ("N", "negativity"),
        ("Delta_EPR", "delta_epr"),
        ("W1 squeezing %", "squeezing_w1_percent"),
        ("W2 squeezing %", "squeezing_w2_percent"),
        ("joint squeezing %", "squeezing_joint_percent"),
        ("s", "s"),
        ("alpha", "alpha"),
        ("beta", "beta"),
        ("sigma(E_W)", "std_e_w"),
        ("sigma(N)", "std_negativity"),
    ]

    def cell(value):
        if value is None:
            return "-"
        return f"{value:.4g}"

    published = dict(result["published"], delta_epr=None)
    lines = [f"{'quantity':<20}{'published':>12}{'model':>12}{'simulated':>12}"]
    for label, key in rows:
        lines.append(
            f"{label:<20}{cell(published.get(key)):>12}"
            f"{cell(result['model'].get(key)):>12}{cell(result['simulated'].get(key)):>12}"
        )
    lines.append("")
    lines.append("published Delta_EPR is reported only as < 1")
    lines.append(result["glossary"]["general_gaussian_model"])
    return "\n".join(lines) + "\n"


def cmd_reproduce_paper(args) -> int:
    opts = _merge_options("reproduce-paper", args)
    _require(opts, "seed")
    start = time.perf_counter()
    result = reproduce(opts)
    sys.stdout.write(format_table(result))
    sys.stdout.write(f"elapsed {time.perf_counter() - start:.1f} s\n")
    if opts["out"]:
        Path(opts["out"]).write_text(dumps_json(result), encoding="utf-8")
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "analyze": cmd_analyze,
    "fit-model": cmd_fit_model,
    "calibrate-thermal": cmd_calibrate_thermal,
    "calibrate-apply": cmd_calibrate_apply,
    "variances": cmd_variances,
    "bootstrap": cmd_bootstrap,
    "reproduce-paper": cmd_reproduce_paper,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return HANDLERS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (UnphysicalStateError, FitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (DomainError, SchemaError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
