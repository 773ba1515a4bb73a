"""Batch command line front end.

Every subcommand writes its outputs plus ``manifest.json`` into ``--out``
(a directory).  Numbers in CSV outputs carry 6 significant digits so reruns
with the same seed are byte-identical; the manifest's ``created`` field is
the only thing that changes between runs.

Exit codes: 0 success, 1 invalid input or usage, 2 convergence gate failed
(``fit`` without ``--force``).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import platform
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, calibrate, check, ingest, simulate, spline, standardize
from .mcmc import ConvergenceError, PosteriorDraws, SamplerConfig, run
from .models import MODEL_NAMES, load_config, make_spec, prepare_data, spec_from_config

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2

_SAMPLER_FLAGS = {"chains": "chains", "iters": "iterations", "burn_in": "burn_in", "thin": "thin",
                  "seed": "seed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for the convergence gate
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "NA"
    return format(v, ".6g")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(c if isinstance(c, str) else fmt(c) for c in row) + "\n")


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _round6(obj):
    """Floats to 6 significant digits so JSON outputs are as stable as the CSVs."""
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if not math.isfinite(v) else float(format(v, ".6g"))
    return obj


def versions() -> dict:
    import numba
    import scipy
    import statsmodels

    return {"dendrorecon": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__,
            "statsmodels": statsmodels.__version__}


def write_manifest(out: Path, command: str, settings: dict, seed=None, outputs=()) -> None:
    canon = json.dumps(settings, sort_keys=True, default=_json_default)
    write_json(out / "manifest.json", {
        "command": command,
        "seed": seed,
        "settings": settings,
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "versions": versions(),
        "outputs": sorted(outputs),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    })


# -- shared option groups -------------------------------------------------------

def _add_out(p):
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (created if absent)")


def _add_rings(p, required=True):
    p.add_argument("--rings", type=Path, required=required, help="ring-width file")
    p.add_argument("--format", choices=("csv_long", "tucson"), default="csv_long",
                   help="ring-width file format")


def _add_sampler(p):
    p.add_argument("--config", type=Path, help="JSON config; its keys override flags")
    p.add_argument("--chains", type=int, default=SamplerConfig.chains)
    p.add_argument("--iters", type=int, default=SamplerConfig.iterations)
    p.add_argument("--burn-in", type=int, default=SamplerConfig.burn_in)
    p.add_argument("--thin", type=int, default=SamplerConfig.thin)
    p.add_argument("--seed", type=int, default=SamplerConfig.seed)


def _model_choice(name: str) -> str:
    low = name.lower()
    for m in MODEL_NAMES:
        if m.lower() == low:
            return m
    if low in check.MULTISTEP_METHODS:
        return low
    raise argparse.ArgumentTypeError(f"unknown model {name!r}")


def _settings(args, config: dict) -> tuple[dict, dict, SamplerConfig]:
    """Merge flags with the config file; returns (model options, effective settings, sampler)."""
    cfg = dict(config)
    sampler_over = cfg.pop("sampler", {}) or {}
    if not isinstance(sampler_over, dict):
        raise ValueError("'sampler' in the config must be an object")
    sampler = {dest: getattr(args, flag) for flag, dest in _SAMPLER_FLAGS.items()}
    known = {f.name for f in fields(SamplerConfig)}
    bad = set(sampler_over) - known
    if bad:
        raise ValueError(f"unknown sampler settings {sorted(bad)}")
    sampler.update(sampler_over)
    model = cfg.pop("model", args.model)
    model_opts = {"model": model, **cfg}
    sc = SamplerConfig(**sampler)
    return model_opts, {"model": model_opts, "sampler": asdict(sc)}, sc


def _load_inputs(args):
    dataset = ingest.parse_ring_widths(args.rings, args.format)
    climate = ingest.align_climate(ingest.parse_climate(args.climate), dataset)
    return dataset, climate


# -- subcommands -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    scen = simulate.scenario(args.scenario)
    sim = simulate.simulate_dataset(scen, args.seed)
    out = args.out
    ingest.write_ring_widths_csv(sim.dataset, out / "rings.csv")
    ingest.write_climate_csv(sim.climate, out / "climate.csv")
    write_csv(out / "truth.csv", ["year", "temperature_c", "path"],
              zip(map(str, sim.climate.years), sim.truth["x"], sim.truth["path"]))
    write_manifest(out, "simulate", {"scenario": asdict(scen)}, args.seed,
                   ["rings.csv", "climate.csv", "truth.csv"])
    return EXIT_OK


def cmd_standardize(args) -> int:
    dataset = ingest.parse_ring_widths(args.rings, args.format)
    chron = standardize.standardize(dataset, args.method, args.bin_width, args.mean)
    write_csv(args.out / "chronology.csv", ["year", "z", "sample_depth"],
              ((str(y), z, str(int(d))) for y, z, d in zip(chron.years, chron.z, chron.sample_depth)))
    write_manifest(args.out, "standardize",
                   {"method": args.method, "bin_width": args.bin_width, "mean": args.mean}, None,
                   ["chronology.csv"])
    return EXIT_OK


def _read_chronology(path: Path) -> tuple[np.ndarray, np.ndarray]:
    years, z = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["year", "z"]:
            raise ingest.ParseError("chronology header must start with year,z", path=str(path))
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cells = line.strip().split(",")
            try:
                years.append(int(cells[0]))
                z.append(float("nan") if cells[1] in ("", "NA") else float(cells[1]))
            except (ValueError, IndexError):
                raise ingest.ParseError("malformed chronology row", line=line_no, path=str(path)) from None
    return np.array(years, dtype=np.int64), np.array(z)


def cmd_calibrate(args) -> int:
    years, z = _read_chronology(args.chronology)
    climate = ingest.parse_climate(args.climate)
    x = np.full(years.size, np.nan)
    pos = np.searchsorted(years, climate.years)
    inside = (pos < years.size) & (years[np.minimum(pos, years.size - 1)] == climate.years)
    if not inside.all():
        raise ingest.ValidationError("climate years fall outside the chronology")
    x[pos] = climate.values
    rec = calibrate.reconstruct(z, x, args.method, levels=(0.95,))
    lo, hi = rec["intervals"][0.95]
    write_csv(args.out / "predictions.csv", ["year", "xhat", "lo95", "hi95"],
              ((str(years[i]), a, b, c) for i, a, b, c in zip(rec["index"], rec["xhat"], lo, hi)))
    cal = rec["fit"]
    write_json(args.out / "calibration.json", _round6({
        "method": cal.method, "intercept": cal.intercept, "slope": cal.slope, "r2": cal.r2,
        "residual_sd": cal.residual_sd, "n_calibration": cal.n_cal}))
    write_manifest(args.out, "calibrate", {"method": args.method}, None,
                   ["predictions.csv", "calibration.json"])
    return EXIT_OK


def _write_draws(draws: PosteriorDraws, out: Path, fmt_: str) -> str:
    if fmt_ == "npz":
        draws.save(out / "draws.npz")
        return "draws.npz"
    draws.write_csv(out / "draws.csv")
    return "draws.csv"


def _write_diagnostics(draws: PosteriorDraws, out: Path) -> None:
    diag = draws.diagnostics()
    write_csv(out / "diagnostics.csv", ["quantity", "rhat", "ess"],
              ((k, v["rhat"], v["ess"]) for k, v in diag.items()))


def cmd_fit(args) -> int:
    config = load_config(args.config) if args.config else {}
    model_opts, settings, sc = _settings(args, config)
    spec = spec_from_config(model_opts)
    dataset, climate = _load_inputs(args)
    data = prepare_data(spec, dataset, climate)
    draws = run(spec, data, sc)
    out = args.out
    outputs = [_write_draws(draws, out, args.draws_format), "diagnostics.csv"]
    _write_diagnostics(draws, out)
    status = EXIT_OK
    try:
        s = draws.reconstruction_summary(force=args.force)
    except ConvergenceError as exc:
        print(f"dendrorecon fit: {exc}", file=sys.stderr)
        status = EXIT_NOT_CONVERGED
    else:
        write_csv(out / "summary.csv", ["year", "median", "lo50", "hi50", "lo95", "hi95"],
                  zip(map(str, s["year"]), s["median"], s["lo50"], s["hi50"], s["lo95"], s["hi95"]))
        outputs.append("summary.csv")
    settings["converged"] = draws.converged
    write_manifest(out, "fit", settings, sc.seed, outputs)
    return status


def cmd_check(args) -> int:
    config = load_config(args.config) if args.config else {}
    model_opts, settings, sc = _settings(args, config)
    dataset, climate = _load_inputs(args)
    plan = check.make_plan(climate.observed, args.holdout)
    name = model_opts["model"]
    if name.lower() in check.MULTISTEP_METHODS:
        if len(model_opts) > 1:
            raise ValueError("model options do not apply to multi-step methods")
        method = name.lower()
        settings.pop("sampler")
    else:
        method = spec_from_config(model_opts)
    res = check.holdout_run(method, dataset, climate, plan, sc, bin_width=args.bin_width)
    lo50, hi50 = res.intervals[0.5]
    lo95, hi95 = res.intervals[0.95]
    write_csv(args.out / "holdout.csv", ["year", "truth", "prediction", "lo50", "hi50", "lo95", "hi95"],
              zip(map(str, res.years), res.truth, res.point, lo50, hi50, lo95, hi95))
    summary = res.summary()
    summary["x_bar"] = res.x_bar
    write_json(args.out / "holdout.json", _round6(summary))
    write_manifest(args.out, "check", {**settings, "holdout": plan.which}, sc.seed,
                   ["holdout.csv", "holdout.json"])
    return EXIT_OK


def cmd_residuals(args) -> int:
    draws = PosteriorDraws.load(args.fit)
    if draws.spec is None:
        raise ValueError("draws file carries no model description")
    dataset, climate = _load_inputs(args)
    data = prepare_data(draws.spec, dataset, climate)
    if data.n != draws.years.size or not np.array_equal(data.years, draws.years):
        raise ingest.ValidationError("inputs do not match the calendar of the fitted draws")
    res = check.averaged_residuals(draws, data, draws.spec, frac=args.span)
    write_csv(args.out / "residuals.csv", ["year", "residual", "count", "observed", "smooth"],
              ((str(y), r, str(c), "1" if o else "0", s) for y, r, c, o, s in res.rows()))
    sigma_y = float(np.median(draws.pooled("sigma_y")))
    summary = {"model": draws.model, "sigma_y": sigma_y,
               "longest_exceedance_years": check.longest_exceedance(res, sigma_y),
               "mean_abs_residual": float(np.nanmean(np.abs(res.residual)))}
    write_json(args.out / "residuals.json", _round6(summary))
    # the draws are identified by content so reruns elsewhere give the same manifest
    fit_digest = hashlib.sha256(Path(args.fit).read_bytes()).hexdigest()
    write_manifest(args.out, "residuals", {"fit": Path(args.fit).name, "fit_sha256": fit_digest,
                                           "span": args.span}, None,
                   ["residuals.csv", "residuals.json"])
    return EXIT_OK


def cmd_summary(args) -> int:
    outputs = []
    settings = {}
    if args.rings is not None:
        dataset = ingest.parse_ring_widths(args.rings, args.format)
        climate = ingest.align_climate(ingest.parse_climate(args.climate), dataset) if args.climate else None
        write_json(args.out / "dataset.json", _round6(dataset.summary(climate)))
        outputs.append("dataset.json")
        n = dataset.n
    else:
        n = args.n
    if args.dump_basis:
        if n is None:
            raise ValueError("--dump-basis needs --rings or --n")
        basis = spline.build_basis(n, args.knot_spacing)
        write_csv(args.out / "basis.csv", ["t", *[f"B{h + 1}" for h in range(basis.H)]],
                  ([str(t + 1), *row] for t, row in enumerate(basis.matrix)))
        outputs.append("basis.csv")
        settings.update(knot_spacing=args.knot_spacing, n=n)
    if not outputs:
        raise ValueError("nothing to summarise: give --rings and/or --dump-basis")
    write_manifest(args.out, "summary", settings, None, outputs)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dendrorecon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dendrorecon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--scenario", choices=sorted(simulate.SCENARIOS), default="flat")
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("standardize", help="build a TS or RCS chronology")
    _add_rings(p)
    p.add_argument("--method", choices=("ts", "rcs"), default="ts")
    p.add_argument("--bin-width", type=int, default=10)
    p.add_argument("--mean", choices=("arithmetic", "biweight"), default="arithmetic")
    _add_out(p)
    p.set_defaults(func=cmd_standardize)

    p = sub.add_parser("calibrate", help="calibrate a chronology against climate")
    p.add_argument("--method", choices=("classical", "inverse"), default="inverse")
    p.add_argument("--chronology", type=Path, required=True)
    p.add_argument("--climate", type=Path, required=True)
    _add_out(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fit", help="fit a joint Bayesian model")
    _add_rings(p)
    p.add_argument("--climate", type=Path, required=True)
    p.add_argument("--model", type=_model_choice, default="M_TS_const",
                   help="one of " + ", ".join(m.lower() for m in MODEL_NAMES))
    _add_sampler(p)
    p.add_argument("--draws-format", choices=("npz", "csv"), default="npz")
    p.add_argument("--force", action="store_true", help="write the summary even if R-hat fails")
    _add_out(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("check", help="two-block hold-out refit")
    _add_rings(p)
    p.add_argument("--climate", type=Path, required=True)
    p.add_argument("--holdout", choices=("first", "second"), required=True)
    p.add_argument("--model", type=_model_choice, default="M_TS_const",
                   help="a joint model or one of " + ", ".join(check.MULTISTEP_METHODS))
    p.add_argument("--bin-width", type=int, default=10, help="RCS bin width for multi-step methods")
    _add_sampler(p)
    _add_out(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("residuals", help="per-year averaged residuals of a fit")
    p.add_argument("--fit", type=Path, required=True, help="draws.npz written by fit")
    _add_rings(p)
    p.add_argument("--climate", type=Path, required=True)
    p.add_argument("--span", type=float, default=0.3, help="loess span")
    _add_out(p)
    p.set_defaults(func=cmd_residuals)

    p = sub.add_parser("summary", help="dataset summary and spline basis dump")
    _add_rings(p, required=False)
    p.add_argument("--climate", type=Path)
    p.add_argument("--dump-basis", action="store_true")
    p.add_argument("--knot-spacing", type=int, default=25)
    p.add_argument("--n", type=int, help="series length for --dump-basis without --rings")
    _add_out(p)
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        # ParseError, ValidationError and CalibrationError are ValueErrors
        print(f"dendrorecon {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
