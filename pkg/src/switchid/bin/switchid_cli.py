import json
import logging
from pathlib import Path

import click
import numpy as np
import pandas as pd

from switchid.bin.click_exception import (
    EXIT_DEGRADED,
    catch_all_exceptions,
    report_click_exception,
)
from switchid.config import DEFAULT_MODEL_FILENAME, RunConfig
from switchid.dataset import dataset_to_csv, frame_to_csv, read_dataset
from switchid.em import run_restarts
from switchid.files import write_json
from switchid.metrics import (
    UndefinedMetricError,
    bfr,
    decode_modes,
    evaluate,
    mse,
    one_step_predictions,
    rollout_predictions,
)
from switchid.model_format import load_model, save_model
from switchid.modes import WindowConfig
from switchid.simulate import (
    BENCHMARK_ALIASES,
    BENCHMARK_NAME,
    INPUT_LAWS,
    BenchmarkSpec,
    benchmark_trajectories,
    simulate_benchmark,
    simulate_model,
    spawn_seeds,
)

REPORT_FILENAME = "report.json"
MODES_FILENAME = "modes.csv"
EVALUATION_FILENAME = "evaluation.json"
PLOT_OUTPUTS_FILENAME = "plot_outputs.csv"
PLOT_ERRORS_FILENAME = "plot_squared_error.csv"
PLOT_MODES_FILENAME = "plot_modes.csv"
SUMMARY_FILENAME = "summary.csv"
DEFAULT_NOISE_LEVELS = "1e-3,1e-2,1e-1,2e-1"


class IntList(click.ParamType):
    """Comma separated integers or a ``start:stop[:step]`` range (stop excluded)"""

    name = "int-list"

    def convert(self, value, param, ctx):
        if isinstance(value, (list, tuple)):
            return list(value)
        text = str(value).strip()
        try:
            if ":" in text:
                parts = [int(part) for part in text.split(":")]
                if len(parts) not in (2, 3):
                    raise ValueError
                values = list(range(*parts))
            else:
                values = [int(part) for part in text.split(",") if part.strip()]
        except ValueError:
            self.fail(
                f"'{value}' is not a list like '1,2,3' or a range like '0:10'.",
                param,
                ctx,
            )
        if not values:
            self.fail(f"'{value}' is empty.", param, ctx)
        return values


class FloatList(click.ParamType):
    """Comma separated floats"""

    name = "float-list"

    def convert(self, value, param, ctx):
        if isinstance(value, (list, tuple)):
            return list(value)
        try:
            values = [float(part) for part in str(value).split(",") if part.strip()]
        except ValueError:
            self.fail(f"'{value}' is not a comma separated list of numbers.", param, ctx)
        if not values:
            self.fail(f"'{value}' is empty.", param, ctx)
        return values


def _echo_progress(record):
    click.echo(json.dumps(record))


def _load_config(config_path, **overrides) -> RunConfig:
    config = RunConfig.from_file(config_path) if config_path else RunConfig()
    return config.merged(**overrides).validate()


def _modes_frame(modes) -> pd.DataFrame:
    return pd.DataFrame({"t": np.arange(1, len(modes) + 1), "mode": modes.labels})


def _aggregate(df: pd.DataFrame, by=None) -> pd.DataFrame:
    metrics = [column for column in ("mse", "bfr", "mode_match") if column in df.columns]
    grouped = df.groupby(by)[metrics] if by else df[metrics]
    summary = grouped.agg(["mean", "median", "var"])
    if by:
        summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
        return summary.reset_index()
    return summary


@click.group(cls=catch_all_exceptions(click.Group, handler=report_click_exception))
@click.version_option(package_name="switchid")
@click.option(
    "--log-level",
    "log_level",
    default="WARNING",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    help="Level of the library log messages written to stderr.",
)
def cli(log_level):
    """Identify switching nonlinear state-space systems from input/output data

    Datasets are CSV files with the header ``t,u1..,y1..[,mode][,x1..]``;
    models are versioned JSON documents. Outputs go to ``--output-dir`` or,
    when not given, to the directory named by the ``SWITCHID_OUTPUT_DIR``
    environment variable (a ``.env`` file is read), ``./switchid-output`` by
    default.

    \b
    Exit codes:
    - 0: success
    - 1: usage error
    - 2: input/output error
    - 3: degraded result (the filter diverged, best model so far written)
    - 4: validation error (malformed dataset, model or configuration)
    """
    logging.basicConfig(level=getattr(logging, log_level.upper()))


@cli.command()
@click.option(
    "--benchmark",
    "benchmark",
    type=click.Choice([BENCHMARK_NAME, *BENCHMARK_ALIASES]),
    default=None,
    help="Simulate the built-in two-mode benchmark system (eq27 is an alias).",
)
@click.option(
    "--model",
    "model_path",
    type=str,
    default=None,
    help="Simulate a saved model instead of the benchmark.",
)
@click.option("--t", "t_samples", default=1000, type=click.IntRange(min=1), help="Samples.")
@click.option(
    "--noise",
    "noise_var",
    default=1e-3,
    type=click.FloatRange(min=0.0),
    help="Benchmark process and measurement noise variance.",
)
@click.option("--noise-free", "noise_free", is_flag=True, help="Simulate without noise.")
@click.option("--seed", "seed", default=0, type=int, help="Simulation seed.")
@click.option(
    "--input-law",
    "input_law",
    default="uniform",
    type=click.Choice(sorted(INPUT_LAWS)),
    help="Distribution of the random inputs.",
)
@click.option(
    "--output",
    "output",
    type=str,
    default=None,
    help="Dataset CSV file, <output dir>/dataset.csv by default.",
)
def simulate(
    benchmark, model_path, t_samples, noise_var, noise_free, seed, input_law, output
):
    """Simulate a dataset from the benchmark system or from a saved model

    Writes the dataset CSV (with the true modes and states) and a sidecar
    ``<stem>.meta.json`` record of the generator settings. The same flags
    always produce byte-identical files.
    """
    if (benchmark is None) == (model_path is None):
        raise click.UsageError("Use exactly one of --benchmark or --model.")
    output = Path(output) if output else RunConfig().resolved_output_dir() / "dataset.csv"
    if benchmark:
        noise = 0.0 if noise_free else noise_var
        spec = BenchmarkSpec(t_samples, noise, seed, input_law=input_law)
        dataset = simulate_benchmark(spec)
        metadata = {"generator": BENCHMARK_NAME, "parameters": spec.to_dict()}
    else:
        model = load_model(model_path)
        dataset = simulate_model(model, t_samples, seed, input_law, noise=not noise_free)
        metadata = {
            "generator": "model",
            "parameters": {
                "model": str(model_path),
                "T": t_samples,
                "seed": seed,
                "input_law": input_law,
                "noise": not noise_free,
            },
        }
    dataset_to_csv(dataset, output, metadata)
    click.echo(f"Wrote {len(dataset)} samples to {output}.")


@cli.command()
@click.option("--dataset", "dataset", type=str, default=None, help="Dataset CSV file.")
@click.option("--config", "config_path", type=str, default=None, help="JSON config file.")
@click.option(
    "--model",
    "model_path",
    type=str,
    default=None,
    help="Model JSON file to write, <output dir>/model.json by default.",
)
@click.option("--k", "k", type=click.IntRange(min=1), default=None, help="Number of modes.")
@click.option("--tw", "t_w", type=click.IntRange(min=1), default=None, help="Window length.")
@click.option(
    "--epochs", "epochs", type=click.IntRange(min=1), default=None, help="EKF epochs."
)
@click.option(
    "--iters",
    "max_iterations",
    type=click.IntRange(min=1),
    default=None,
    help="EM iterations.",
)
@click.option("--seed", "seed", type=int, default=None, help="Initialization seed.")
@click.option("--restarts", "restarts", type=click.IntRange(min=1), default=None)
@click.option("--workers", "workers", type=click.IntRange(min=1), default=None)
@click.option("--output-dir", "output_dir", type=str, default=None)
@click.pass_context
def identify(ctx, dataset, config_path, model_path, k, t_w, epochs, max_iterations, seed,
             restarts, workers, output_dir):
    """Identify a switching model from a dataset with the EM algorithm

    Settings come from the defaults, then the ``--config`` file, then the
    flags. Writes ``report.json`` and ``modes.csv`` (decoded modes, 1-based)
    to the output directory and the model to ``--model`` (``model.json`` in the
    output directory by default) and echoes one JSON progress
    record per iteration. With several restarts the run with the lowest final
    cost is kept. A run where the filter diverged still writes the best model
    so far and exits with code 3.
    """
    config = _load_config(
        config_path,
        dataset=dataset,
        model=model_path,
        k=k,
        t_w=t_w,
        epochs=epochs,
        max_iterations=max_iterations,
        seed=seed,
        restarts=restarts,
        workers=workers,
        output_dir=output_dir,
    )
    if not config.dataset:
        raise click.UsageError("No dataset given, use --dataset or a config file.")
    data = read_dataset(config.dataset)
    output_dir = config.resolved_output_dir()
    click.echo(
        f"Identify a {config.k}-mode model from {config.dataset} ({len(data)} samples, "
        f"{config.restarts} restart(s))."
    )
    model, modes, report, reports = run_restarts(
        data,
        config.k,
        config.em_config(),
        config.template(),
        restarts=config.restarts,
        workers=config.workers,
        progress=_echo_progress,
    )
    save_model(model, config.resolved_model_path())
    write_json(
        output_dir / REPORT_FILENAME,
        {
            **report.to_dict(),
            "config": config.to_dict(),
            "restarts": [
                {"seed": r.seed, "final_cost": r.final_cost, "status": r.status}
                for r in reports
            ],
        },
    )
    frame_to_csv(_modes_frame(modes), output_dir / MODES_FILENAME)
    click.echo(
        f"Stopped on '{report.stop_reason}' with J = {report.final_cost:.10g}; "
        f"artifacts written to {output_dir}."
    )
    if report.degraded:
        click.echo(f"[WARNING] - Degraded result: {report.message}")
        ctx.exit(EXIT_DEGRADED)


@cli.command(name="evaluate")
@click.option("--model", "model_path", type=str, required=True, help="Model JSON file.")
@click.option("--dataset", "dataset", type=str, required=True, help="Dataset CSV file.")
@click.option("--tw", "t_w", type=click.IntRange(min=1), default=3, help="Window length.")
@click.option("--rollout", "rollout", is_flag=True, help="Also score free-run predictions.")
@click.option("--output-dir", "output_dir", type=str, default=None)
def evaluate_command(model_path, dataset, t_w, rollout, output_dir):
    """Score a model on a dataset and write plot data

    Writes ``evaluation.json`` (MSE, BFR, mode match with its label
    permutation) and three plot data files: ``plot_outputs.csv``
    (t, y_true, y_pred), ``plot_squared_error.csv`` (t, squared_error) and
    ``plot_modes.csv`` (t, s_true, s_est), with the estimated modes mapped
    onto the true labels. Without true modes in the dataset the mode match is
    omitted and ``plot_modes.csv`` holds (t, s_est).
    """
    model = load_model(model_path)
    data = read_dataset(dataset)
    result = evaluate(model, data, WindowConfig(t_w), rollout=rollout)
    output_dir = Path(output_dir) if output_dir else RunConfig().resolved_output_dir()
    write_json(output_dir / EVALUATION_FILENAME, result.to_dict())

    t = np.arange(1, len(data) + 1)
    outputs = {"t": t}
    for i in range(data.n_y):
        suffix = "" if data.n_y == 1 else str(i + 1)
        outputs[f"y_true{suffix}"] = data.y[:, i]
        outputs[f"y_pred{suffix}"] = result.y_pred[:, i]
    frame_to_csv(pd.DataFrame(outputs), output_dir / PLOT_OUTPUTS_FILENAME)
    frame_to_csv(
        pd.DataFrame({"t": t, "squared_error": result.errors}),
        output_dir / PLOT_ERRORS_FILENAME,
    )
    modes = {"t": t}
    if data.true_modes is not None:
        modes["s_true"] = data.true_modes + 1
    modes["s_est"] = result.aligned_modes() + 1
    frame_to_csv(pd.DataFrame(modes), output_dir / PLOT_MODES_FILENAME)

    message = f"MSE = {result.mse:.6g}"
    message += ", BFR undefined" if result.bfr is None else f", BFR = {result.bfr:.2f}%"
    if result.mode_match is not None:
        message += f", mode match = {result.mode_match:.2f}%"
    click.echo(message + f"; report written to {output_dir}.")


def _prediction_frame(model, data, t_w, rollout) -> pd.DataFrame:
    modes = decode_modes(model, data, WindowConfig(t_w))
    if rollout:
        y_pred = rollout_predictions(model, data, modes)
    else:
        y_pred = one_step_predictions(model, data, modes)
    columns = {"t": np.arange(1, len(data) + 1), "mode": modes.labels}
    for i in range(model.n_y):
        if data.has_outputs:
            columns[f"y{i + 1}"] = data.y[:, i]
        columns[f"y_pred{i + 1}"] = y_pred[:, i]
    return pd.DataFrame(columns)


@cli.command()
@click.option("--model", "model_path", type=str, required=True, help="Model JSON file.")
@click.option(
    "--dataset",
    "dataset",
    type=str,
    default=None,
    help="Dataset CSV file; output columns may be missing or empty.",
)
@click.option(
    "--seeds",
    "seeds",
    type=IntList(),
    default=None,
    help="Predict benchmark trajectories for these seeds instead, e.g. '0:100'.",
)
@click.option("--t", "t_samples", default=200, type=click.IntRange(min=1), help="Samples.")
@click.option("--noise", "noise_var", default=1e-3, type=click.FloatRange(min=0.0))
@click.option("--tw", "t_w", type=click.IntRange(min=1), default=3, help="Window length.")
@click.option("--rollout", "rollout", is_flag=True, help="Free-run instead of one-step.")
@click.option(
    "--output",
    "output",
    type=str,
    default=None,
    help="Prediction CSV file, or directory for --seeds.",
)
def predict(model_path, dataset, seeds, t_samples, noise_var, t_w, rollout, output):
    """Predict outputs of a model, one step ahead or free-run (``--rollout``)

    With ``--dataset`` writes one CSV (t, mode, [y1..], y_pred1..). With
    ``--seeds`` simulates a benchmark trajectory from a random initial state
    per seed, writes one prediction file per seed and a ``summary.csv`` with
    the MSE and BFR of every trajectory.
    """
    if (dataset is None) == (seeds is None):
        raise click.UsageError("Use exactly one of --dataset or --seeds.")
    model = load_model(model_path)
    default_dir = RunConfig().resolved_output_dir()

    if dataset is not None:
        data = read_dataset(dataset, require_outputs=False, n_y=model.n_y)
        data.check_model(model)
        output = Path(output) if output else default_dir / "predictions.csv"
        frame_to_csv(_prediction_frame(model, data, t_w, rollout), output)
        click.echo(f"Wrote {len(data)} predictions to {output}.")
        return

    output = Path(output) if output else default_dir / "predictions"
    rows = []
    for seed, data in benchmark_trajectories(seeds, t_samples, noise_var):
        data.check_model(model)
        frame = _prediction_frame(model, data, t_w, rollout)
        frame_to_csv(frame, output / f"predictions_seed{seed}.csv")
        y_pred = frame[[f"y_pred{i + 1}" for i in range(model.n_y)]].to_numpy()
        rows.append({"seed": seed, **_scores(data.y, y_pred)})
    summary = pd.DataFrame(rows)
    frame_to_csv(summary, output / SUMMARY_FILENAME)
    aggregate = _aggregate(summary)
    click.echo(
        f"Wrote {len(rows)} prediction files to {output}; median MSE = "
        f"{aggregate.loc['median', 'mse']:.6g}, "
        f"median BFR = {aggregate.loc['median', 'bfr']:.2f}%."
    )


def _scores(y_true, y_pred) -> dict:
    try:
        fit = bfr(y_true, y_pred)
    except UndefinedMetricError:
        fit = np.nan
    return {"mse": mse(y_true, y_pred), "bfr": fit}


@cli.command()
@click.option(
    "--noise-levels",
    "noise_levels",
    type=FloatList(),
    default=DEFAULT_NOISE_LEVELS,
    help="Noise variances of the benchmark to identify and evaluate.",
)
@click.option(
    "--t", "t_samples", default=1000, type=click.IntRange(min=2), help="Training samples."
)
@click.option(
    "--eval-t",
    "eval_t",
    default=200,
    type=click.IntRange(min=2),
    help="Evaluation samples.",
)
@click.option(
    "--n-eval",
    "n_eval",
    default=10,
    type=click.IntRange(min=1),
    help="Evaluation trajectories.",
)
@click.option("--config", "config_path", type=str, default=None, help="JSON config file.")
@click.option("--k", "k", type=click.IntRange(min=1), default=None, help="Number of modes.")
@click.option("--tw", "t_w", type=click.IntRange(min=1), default=None, help="Window length.")
@click.option(
    "--epochs", "epochs", type=click.IntRange(min=1), default=None, help="EKF epochs."
)
@click.option(
    "--iters",
    "max_iterations",
    type=click.IntRange(min=1),
    default=None,
    help="EM iterations.",
)
@click.option(
    "--seed", "seed", type=int, default=None, help="Simulation and initialization seed."
)
@click.option("--restarts", "restarts", type=click.IntRange(min=1), default=None)
@click.option("--workers", "workers", type=click.IntRange(min=1), default=None)
@click.option("--output-dir", "output_dir", type=str, default=None)
@click.pass_context
def sweep(ctx, noise_levels, t_samples, eval_t, n_eval, config_path, k, t_w, epochs,
          max_iterations, seed, restarts, workers, output_dir):
    """Identify and evaluate the benchmark over a grid of noise levels

    For every noise level a training dataset is simulated (the same modes and
    inputs at every level), a model is identified and scored one step ahead on
    ``--n-eval`` trajectories from random initial states. Writes per level a
    ``noise_<level>/`` directory with the model and its report,
    ``trajectories.csv`` with the score of every trajectory and
    ``summary.csv`` with the mean, median and variance per noise level.
    """
    config = _load_config(
        config_path,
        k=k,
        t_w=t_w,
        epochs=epochs,
        max_iterations=max_iterations,
        seed=seed,
        restarts=restarts,
        workers=workers,
        output_dir=output_dir,
    )
    output_dir = config.resolved_output_dir()
    model_filename = Path(config.model).name if config.model else DEFAULT_MODEL_FILENAME
    eval_seeds = spawn_seeds([config.seed, 1], n_eval)
    window = config.window_config()
    rows = []
    degraded = False
    for noise in noise_levels:
        train_data = simulate_benchmark(BenchmarkSpec(t_samples, noise, config.seed))
        model, modes, report, _ = run_restarts(
            train_data,
            config.k,
            config.em_config(),
            config.template(),
            restarts=config.restarts,
            workers=config.workers,
        )
        level_dir = output_dir / f"noise_{noise:g}"
        save_model(model, level_dir / model_filename)
        write_json(level_dir / REPORT_FILENAME, report.to_dict())
        frame_to_csv(_modes_frame(modes), level_dir / MODES_FILENAME)
        if report.degraded:
            degraded = True
            click.echo(
                f"[WARNING] - Degraded identification at noise {noise:g}: "
                f"{report.message}"
            )
        for eval_seed, data in benchmark_trajectories(eval_seeds, eval_t, noise):
            result = evaluate(model, data, window)
            rows.append(
                {
                    "noise": noise,
                    "seed": eval_seed,
                    "mse": result.mse,
                    "bfr": np.nan if result.bfr is None else result.bfr,
                    "mode_match": result.mode_match,
                }
            )
        level = pd.DataFrame([row for row in rows if row["noise"] == noise])
        click.echo(
            f"Noise {noise:g}: median MSE = {level['mse'].median():.6g}, "
            f"median BFR = {level['bfr'].median():.2f}%."
        )
    trajectories = pd.DataFrame(rows)
    frame_to_csv(trajectories, output_dir / "trajectories.csv")
    frame_to_csv(_aggregate(trajectories, by="noise"), output_dir / SUMMARY_FILENAME)
    click.echo(f"Sweep results written to {output_dir}.")
    if degraded:
        ctx.exit(EXIT_DEGRADED)
