"""Command-line interface.

Usage:
    haarstab norm --vector z.json --space s11:L1:L1
    haarstab lambda-mu --multiplier capon.json --lo 2 --hi 9
    haarstab variation --multiplier d.json
    haarstab stabilize --multiplier d.json --depth 2 --eta 0.25 --delta 0.2
    haarstab probe-capon --family l1-row --space s00:L1:L2 --n 1..6
    haarstab check-factor --multiplier d.json --space s11:L1:L1
    haarstab selftest

Every command prints JSON on stdout.  Exit codes: 0 pass, 1 check failure, 2 usage or
malformed input.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from pathlib import Path
from typing import Callable, Sequence

import click

from . import __version__
from .multipliers import LevelOverflow, lambda_mu, multiplier_from_json, t2_variation
from .probes import FAMILIES, check_factorization, probe_capon
from .rng import seed_from_env
from .selftest import run_selftest
from .spaces import HaarCoefficients2D, ZSpaceSpec, z_norm
from .stabilizer import EtaSchedule, StabilizationError, StabilizeConfig, stabilize_full

__all__ = ["main", "cli", "load_json", "parse_range", "parse_eta"]

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class InputError(click.UsageError):
    """Malformed input; click maps UsageError to exit code 2."""


def load_json(path: str, loader: Callable[[dict], object], what: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: cannot read {what}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise InputError(f"{path}: top-level {what} must be a JSON object")
    try:
        return loader(data)
    except (KeyError, TypeError, ValueError) as exc:
        detail = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
        raise InputError(f"{path}: invalid {what}: {detail}") from exc


def parse_range(text: str) -> list[int]:
    """'1..6' (inclusive), '3', or '1,2,5'."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ValueError
            return list(range(lo_i, hi_i + 1))
        return [int(part) for part in text.split(",")]
    except ValueError:
        raise click.BadParameter(f"expected a range like 1..6 or a list like 1,2,5, got {text!r}") from None


def parse_eta(text: str) -> EtaSchedule:
    """'0.25' (flat) or 'geometric:<base>:<ratio>'."""
    try:
        if text.startswith("geometric:"):
            _, base, ratio = text.split(":")
            return EtaSchedule.geometric(float(base), float(ratio))
        return EtaSchedule.flat(float(text))
    except ValueError as exc:
        raise click.BadParameter(f"invalid eta {text!r}: {exc}") from None


def _space(text: str) -> ZSpaceSpec:
    try:
        return ZSpaceSpec.parse(text)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2, allow_nan=True))


def _write_csv(path: str | None, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    if path is None:
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


csv_option = click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Also write a CSV report here.")
seed_option = click.option("--seed", type=int, default=0, show_default=True, help="Seed (HAARSTAB_SEED overrides).")


@click.group()
@click.version_option(version=__version__)
def cli() -> None:
    """Bi-parameter Haar multipliers: norms, stabilization and Capon probes."""


@cli.command()
@click.option("--vector", "vector_path", required=True, type=click.Path(), help="Vector JSON file.")
@click.option("--space", "space", required=True, help="Space spec such as s11:L1:L2.")
@click.option("--samples", type=click.IntRange(min=1), default=2000, show_default=True)
@click.option("--method", type=click.Choice(["auto", "exact", "monte-carlo"]), default="auto", show_default=True)
@click.option("--grid-depth", type=int, default=None)
@seed_option
@csv_option
def norm(vector_path, space, samples, method, grid_depth, seed, csv_path) -> None:
    """Estimate ||z|| in Z^X(Y) for a coefficient vector."""
    z = load_json(vector_path, HaarCoefficients2D.from_json, "vector")
    try:
        est = z_norm(z, _space(space), grid_depth, method, samples, seed_from_env(seed))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    _emit(est.to_json())
    _write_csv(csv_path, ["value", "stdError", "method", "samples"], [[est.value, est.std_error, est.method, est.samples]])


@cli.command("lambda-mu")
@click.option("--multiplier", "multiplier_path", required=True, type=click.Path())
@click.option("--lo", type=int, required=True)
@click.option("--hi", type=int, required=True)
@click.option("--window", type=int, default=None)
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--verbose", is_flag=True, help="Include the convergence table.")
@csv_option
def lambda_mu_cmd(multiplier_path, lo, hi, window, tol, verbose, csv_path) -> None:
    """Limits lambda and mu of the level averages; exit 1 when they have not settled."""
    D = load_json(multiplier_path, multiplier_from_json, "multiplier")
    try:
        lm = lambda_mu(D, lo, hi, window, tol)
    except (ValueError, LevelOverflow) as exc:
        raise InputError(str(exc)) from exc
    _emit(lm.to_json() if verbose else {"lambda": lm.lambda_, "mu": lm.mu, "converged": lm.converged})
    _write_csv(csv_path, ["lambda", "mu", "converged"], [[lm.lambda_, lm.mu, lm.converged]])
    sys.exit(EXIT_PASS if lm.converged else EXIT_FAIL)


@cli.command()
@click.option("--multiplier", "multiplier_path", required=True, type=click.Path())
@click.option("--truncation", type=int, default=None, help="Highest level k entering the sums.")
@csv_option
def variation(multiplier_path, truncation, csv_path) -> None:
    """Truncated T^2 variation norm of a multiplier."""
    D = load_json(multiplier_path, multiplier_from_json, "multiplier")
    try:
        rep = t2_variation(D, truncation)
    except (ValueError, LevelOverflow) as exc:
        raise InputError(str(exc)) from exc
    _emit(rep.to_json())
    _write_csv(
        csv_path,
        ["t2sSemiNorm", "t2Norm", "truncationLevel"],
        [[rep.t2s_semi_norm, rep.t2_norm, rep.truncation_level]],
    )


def _config(depth, delta, budget, seed, retry_limit) -> StabilizeConfig:
    try:
        return StabilizeConfig(depth, delta, budget, seed_from_env(seed), retry_limit)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


stabilize_options = [
    click.option("--multiplier", "multiplier_path", required=True, type=click.Path()),
    click.option("--depth", type=click.IntRange(min=1), default=2, show_default=True, help="Output depth K."),
    click.option("--eta", "eta_text", default="0.25", show_default=True, help="Flat value or geometric:<base>:<ratio>."),
    click.option("--delta", type=float, default=0.2, show_default=True, help="Balancing tolerance."),
    click.option("--budget", type=int, default=16, show_default=True, help="Frequency budget."),
    click.option("--retry-limit", type=click.IntRange(min=1), default=32, show_default=True),
    seed_option,
]


def _with(options):
    def wrap(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn

    return wrap


@cli.command()
@_with(stabilize_options)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Write H.json, K.json and Dtilde.json.")
@csv_option
def stabilize(multiplier_path, depth, eta_text, delta, budget, retry_limit, seed, out_dir, csv_path) -> None:
    """Find faithful systems making D semi-stable; exit 1 when no admissible choice exists."""
    D = load_json(multiplier_path, multiplier_from_json, "multiplier")
    cfg = _config(depth, delta, budget, seed, retry_limit)
    try:
        res = stabilize_full(D, parse_eta(eta_text), cfg)
    except StabilizationError as exc:
        _emit({"pass": False, "error": str(exc), "stage": exc.stage})
        sys.exit(EXIT_FAIL)
    payload = res.to_json()
    payload["pass"] = bool(res.report.passed)
    _emit(payload)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, obj in (("H", res.H), ("K", res.K), ("Dtilde", res.D_tilde)):
            (out / f"{name}.json").write_text(json.dumps(obj.to_json()) + "\n", encoding="utf-8")
    rep = res.report
    _write_csv(
        csv_path,
        ["lower", "upper", "diagonal", "superdiagonal", "balancing", "pass", "retriesUsed"],
        [[rep.lower, rep.upper, rep.diagonal, rep.superdiagonal, rep.balancing, rep.passed, res.retries_used]],
    )
    sys.exit(EXIT_PASS if rep.passed else EXIT_FAIL)


def _probe_verdict(report, family: str, expect: str | None) -> bool:
    if expect is None:
        return True
    rows = report.rows
    if expect == "bounded":
        return all(r.ratio <= 1 + 3 * r.ratio_std_error for r in rows)
    if family == "l1-row":
        ok = all(r.ratio >= math.sqrt(r.n + 1) / 4 - 3 * r.ratio_std_error for r in rows)
    else:
        ok = all(
            r.norm.value <= 2 * (1 + 3 * r.norm.std_error / max(r.norm.value, 1e-300))
            and r.capon_norm.value
            >= math.sqrt(r.n / 2) * (1 - 3 * r.capon_norm.std_error / max(r.capon_norm.value, 1e-300))
            for r in rows
        )
    return ok and (len(rows) < 2 or rows[-1].ratio > rows[0].ratio)


@cli.command("probe-capon")
@click.option("--family", type=click.Choice(FAMILIES), required=True)
@click.option("--space", "space", required=True)
@click.option("--n", "n_text", default="1..6", show_default=True, help="Range like 1..6 or list like 1,3,5.")
@click.option("--coefficients", default=None, help="Comma-separated a_0,...,a_n (l1-row).")
@click.option("--samples", type=click.IntRange(min=1), default=2000, show_default=True)
@click.option("--method", type=click.Choice(["auto", "exact", "monte-carlo"]), default="auto", show_default=True)
@click.option("--grid-depth", type=int, default=None)
@click.option("--swap", is_flag=True, help="Exchange the two coordinates of the probe.")
@click.option("--expect", type=click.Choice(["growth", "bounded"]), default=None, help="Check the ratios; exit 1 on failure.")
@seed_option
@csv_option
def probe_capon_cmd(family, space, n_text, coefficients, samples, method, grid_depth, swap, expect, seed, csv_path):
    """Ratios ||C z|| / ||z|| for the probe vectors."""
    ns = parse_range(n_text)
    coeffs = None
    if coefficients is not None:
        try:
            coeffs = [float(c) for c in coefficients.split(",")]
        except ValueError:
            raise click.BadParameter(f"coefficients must be numbers, got {coefficients!r}") from None
    try:
        rep = probe_capon(family, _space(space), ns, coeffs, samples, seed_from_env(seed), method, swap, grid_depth)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    passed = _probe_verdict(rep, family, expect)
    payload = rep.to_json()
    payload["pass"] = passed
    _emit(payload)
    _write_csv(csv_path, *rep.csv_rows())
    sys.exit(EXIT_PASS if passed else EXIT_FAIL)


@cli.command("check-factor")
@_with(stabilize_options)
@click.option("--space", "space", default="s11:L1:L1", show_default=True)
@click.option("--trials", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--samples", type=click.IntRange(min=1), default=500, show_default=True)
@csv_option
def check_factor(multiplier_path, depth, eta_text, delta, budget, retry_limit, seed, space, trials, samples, csv_path):
    """Stabilize D and measure the residual against the proximity bound."""
    D = load_json(multiplier_path, multiplier_from_json, "multiplier")
    cfg = _config(depth, delta, budget, seed, retry_limit)
    try:
        rep = check_factorization(D, parse_eta(eta_text), cfg, _space(space), trials, samples)
    except StabilizationError as exc:
        _emit({"pass": False, "error": str(exc), "stage": exc.stage})
        sys.exit(EXIT_FAIL)
    _emit(rep.to_json())
    _write_csv(
        csv_path,
        ["trial", "ratio"],
        [[t, r] for t, r in enumerate(rep.empirical_ratios)],
    )
    sys.exit(EXIT_PASS if rep.passed else EXIT_FAIL)


@cli.command()
@seed_option
@csv_option
def selftest(seed, csv_path) -> None:
    """Run the built-in oracle checks."""
    results = run_selftest(seed_from_env(seed))
    ok = all(r.passed for r in results)
    _emit({"pass": ok, "checks": [r.to_json() for r in results]})
    _write_csv(csv_path, ["name", "pass", "detail"], [[r.name, r.passed, r.detail] for r in results])
    sys.exit(EXIT_PASS if ok else EXIT_FAIL)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
