"""Command-line interface for bivariate linear mixed models."""

import logging
import sys
import traceback
from pathlib import Path

import click
from tqdm import tqdm

from bivariate_lmm import __version__
from bivariate_lmm.config import (
    EXIT_INPUT_ERROR,
    EXIT_INTERNAL_ERROR,
    EXIT_NOT_CONVERGED,
    EXIT_RECOVERY_FAILED,
    EXIT_SUCCESS,
)
from bivariate_lmm.data import (
    baseline_difference,
    describe_changes,
    read_long_csv,
    read_wide_csv,
    write_long_csv,
    write_wide_csv,
)
from bivariate_lmm.errors import InputError
from bivariate_lmm.estimation import fit
from bivariate_lmm.inference import compare_models, load_summaries, summarize_fit
from bivariate_lmm.models import Method
from bivariate_lmm.report import (
    comparison_to_dict,
    fit_to_dict,
    format_changes_table,
    format_comparison_table,
    format_fit_report,
    format_recovery,
    recovery_to_dict,
    to_json,
)
from bivariate_lmm.runconfig import load_run_config, load_truth_config
from bivariate_lmm.simulate import apply_mar_missingness, recovery, simulate, truth_to_dict

METHOD_CHOICE = click.Choice([m.value for m in Method], case_sensitive=False)


def _configure_logging(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _fail(message, code, verbose=False):
    click.echo(f"\n❌ {message}", err=True)
    if verbose and code == EXIT_INTERNAL_ERROR:
        traceback.print_exc()
    sys.exit(code)


def _run(verbose, action):
    """Run a command body, mapping failures to exit codes."""
    try:
        return action()
    except KeyboardInterrupt:
        click.echo("\n\n⚠️  Interrupted by user", err=True)
        sys.exit(130)
    except FileNotFoundError as e:
        _fail(f"Error: {e}", EXIT_INPUT_ERROR)
    except InputError as e:
        _fail(f"Input error: {e}", EXIT_INPUT_ERROR)
    except Exception as e:
        _fail(f"Unexpected error: {e}", EXIT_INTERNAL_ERROR, verbose)


def _with_method(spec, method):
    return spec if method is None else spec._replace(method=Method(method.upper()))


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _read_dataset(config):
    if config.layout == "wide":
        dataset = read_wide_csv(
            config.input, config.occasion_spacing, config.subject_column, config.time_column,
            config.marker_columns, config.time_origin, config.marker_names,
        )
    else:
        dataset = read_long_csv(
            config.input, config.occasion_spacing, time_origin=config.time_origin,
            marker_names=config.marker_names,
        )
    if config.baseline_difference:
        dataset = baseline_difference(dataset)
    return dataset


@click.group()
@click.version_option(version=__version__, prog_name="bivariate-lmm")
def main():
    """
    Fit and compare bivariate linear mixed models for two longitudinal markers.

    Examples:

        Fit the models listed in a config:
        $ python -m bivariate_lmm fit config.json

        Compare saved fits with a likelihood ratio test:
        $ python -m bivariate_lmm compare fits.json --nested univariate bivariate

        Check parameter recovery on simulated data:
        $ python -m bivariate_lmm recover truth.json --replicates 20
    """


@main.command("fit")
@click.argument("config_path", type=click.Path())
@click.option("--method", type=METHOD_CHOICE, default=None, help="Override every model's method")
@click.option("--output", "-o", type=click.Path(), default=None,
              help="Report path (default: config 'output', else stdout); JSON sidecar next to it")
@click.option("--seed", type=int, default=None, help="Seed recorded with the run (default: config 'seed')")
@click.option("--verbose", "-v", is_flag=True, help="Verbose output")
def fit_command(config_path, method, output, seed, verbose):
    """Fit every model listed in CONFIG_PATH and write a comparison report."""
    _configure_logging(verbose)

    def action():
        config = load_run_config(config_path)
        click.echo(f"📂 Reading {config.input}...")
        dataset = _read_dataset(config)
        if not dataset.records:
            raise InputError(f"No observations in {config.input}")
        click.echo(f"✓ {len(dataset.subject_ids)} subject(s), {len(dataset)} observation(s)\n")

        fits = []
        for entry in config.models:
            spec = _with_method(entry.spec, method)
            click.echo(f"🔧 Fitting {entry.name} ({spec.method.value})...")
            result = fit(dataset, spec)
            mark = "✓" if result.converged else "✗"
            click.echo(f"{mark} {entry.name}: logL {result.log_likelihood:.6g}, "
                       f"AIC {result.aic:.6g}{'' if result.converged else ' (did not converge)'}")
            fits.append((entry.name, result))

        summaries = [summarize_fit(result, name) for name, result in fits]
        pairs = [(entry.name, entry.nested_in) for entry in config.models if entry.nested_in]
        comparison = compare_models(summaries, pairs)

        text = format_fit_report(fits, comparison)
        text += "\nChanges by occasion\n" + format_changes_table(describe_changes(dataset)) + "\n"
        sidecar = {
            "models": [fit_to_dict(name, result) for name, result in fits],
            "comparison": comparison_to_dict(comparison),
            "seed": config.seed if seed is None else seed,
        }

        target = output or config.output
        if target:
            target = Path(target)
            _write(target, text)
            _write(target.with_suffix(".json"), to_json(sidecar))
            click.echo(f"\n✓ Report written to {target} (+ {target.with_suffix('.json').name})")
        else:
            click.echo("\n" + text)

        if not all(result.converged for _, result in fits):
            click.echo("\nSome models did not converge. Use -v for optimizer details.", err=True)
            sys.exit(EXIT_NOT_CONVERGED)
        sys.exit(EXIT_SUCCESS)

    _run(verbose, action)


@main.command("compare")
@click.argument("summary_paths", nargs=-1, required=True, type=click.Path())
@click.option("--nested", nargs=2, multiple=True, metavar="NULL ALT",
              help="Likelihood ratio test of NULL nested in ALT (repeatable)")
@click.option("--output", "-o", type=click.Path(), default=None, help="JSON output path")
@click.option("--verbose", "-v", is_flag=True, help="Verbose output")
def compare_command(summary_paths, nested, output, verbose):
    """Compare saved model summaries (fit JSON sidecars or summary files)."""
    _configure_logging(verbose)

    def action():
        summaries = []
        for path in summary_paths:
            summaries.extend(load_summaries(path))
        comparison = compare_models(summaries, nested)
        click.echo(format_comparison_table(comparison))
        if output:
            _write(output, to_json(comparison_to_dict(comparison)))
            click.echo(f"\n✓ Comparison written to {output}")
        sys.exit(EXIT_SUCCESS)

    _run(verbose, action)


def _truth_config(config_path, subjects, seed):
    config = load_truth_config(config_path)
    truth = config.truth
    if subjects is not None:
        truth = truth._replace(n_subjects=subjects)
    if seed is not None:
        truth = truth._replace(seed=seed)
    return config._replace(truth=truth)


@main.command("recover")
@click.argument("truth_path", required=False, type=click.Path())
@click.option("--replicates", "-r", type=int, default=None, help="Number of simulated datasets")
@click.option("--subjects", "-n", type=int, default=None, help="Subjects per dataset")
@click.option("--seed", type=int, default=None, help="Master seed")
@click.option("--method", type=METHOD_CHOICE, default=None, help="Override the model's method")
@click.option("--output", "-o", type=click.Path(), default=None,
              help="Report path; JSON sidecar next to it")
@click.option("--verbose", "-v", is_flag=True, help="Verbose output")
def recover_command(truth_path, replicates, subjects, seed, method, output, verbose):
    """Simulate from a known truth, refit, and check every parameter is recovered."""
    _configure_logging(verbose)

    def action():
        config = _truth_config(truth_path, subjects, seed)
        count = replicates or config.replicates
        spec = _with_method(config.model.spec, method)
        click.echo(f"🎲 Recovering {config.model.name}: {count} replicate(s) of "
                   f"{config.truth.n_subjects} subjects (seed {config.truth.seed})")

        progress_bar = tqdm(
            total=count,
            unit="fit",
            desc="Replicates",
            bar_format="{l_bar}{bar}| {n_fmt}/{total_fmt} [{elapsed}<{remaining}]",
        )
        finished = [0]

        def on_progress(done):
            progress_bar.update(done - finished[0])
            finished[0] = done

        try:
            report = recovery(config.truth, spec, count, config.missingness, callback=on_progress)
        finally:
            progress_bar.close()

        text = format_recovery(report)
        target = output or config.output
        if target:
            target = Path(target)
            _write(target, text)
            _write(target.with_suffix(".json"),
                   to_json(recovery_to_dict(report, truth_to_dict(config.truth))))
            click.echo(f"✓ Report written to {target}")
        else:
            click.echo("\n" + text)
        sys.exit(EXIT_SUCCESS if report.passed else EXIT_RECOVERY_FAILED)

    _run(verbose, action)


@main.command("simulate")
@click.argument("truth_path", required=False, type=click.Path())
@click.option("--output", "-o", type=click.Path(), default=None, help="CSV output path")
@click.option("--subjects", "-n", type=int, default=None, help="Number of subjects")
@click.option("--seed", type=int, default=None, help="Seed")
@click.option("--layout", type=click.Choice(["wide", "long"]), default=None, help="CSV layout")
@click.option("--verbose", "-v", is_flag=True, help="Verbose output")
def simulate_command(truth_path, output, subjects, seed, layout, verbose):
    """Write a simulated dataset and its truth (JSON sidecar)."""
    _configure_logging(verbose)

    def action():
        config = _truth_config(truth_path, subjects, seed)
        target = output or config.output
        if not target:
            raise InputError("No output path: pass --output or set 'output' in the truth config")
        target = Path(target)

        dataset = simulate(config.truth, config.design)
        if config.missingness is not None:
            dataset = apply_mar_missingness(dataset, config.missingness, config.truth.seed + 1)

        target.parent.mkdir(parents=True, exist_ok=True)
        if (layout or config.layout) == "wide":
            write_wide_csv(dataset, target)
        else:
            write_long_csv(dataset, target)
        _write(target.with_suffix(".truth.json"), to_json(truth_to_dict(config.truth)))
        click.echo(f"✓ Wrote {len(dataset)} observation(s) for {len(dataset.subject_ids)} "
                   f"subject(s) to {target}")
        sys.exit(EXIT_SUCCESS)

    _run(verbose, action)


if __name__ == "__main__":
    main()
