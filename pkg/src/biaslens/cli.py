"""Command-line interface.

Every subcommand prints a JSON summary on success. Failures print a
machine-readable JSON error object to stderr and exit with status 1.
Options resolve as: explicit flags, then the --config file (JSON keyed by
subcommand name), then built-in defaults. Reruns with identical inputs
rewrite identical artifact bytes (timestamps live only in the quarantined
provenance block of JSON artifacts).
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import __version__, pipeline
from .types import BiasLensError, GroundingConfig

DEFAULT_TAU = 0.7
DEFAULT_TAU_GRID = [round(0.5 + 0.05 * i, 2) for i in range(9)]


def _fail(error: Exception, unexpected: bool = False) -> None:
    payload = {
        "error": type(error).__name__,
        "message": str(error),
        "unexpected": unexpected,
    }
    click.echo(json.dumps(payload, sort_keys=True), err=True)
    sys.exit(1)


def pipeline_command(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            result = fn(*args, **kwargs)
        except BiasLensError as e:
            _fail(e)
        except click.ClickException:
            raise
        except OSError as e:
            _fail(e)
        except Exception as e:  # noqa: BLE001 - surfaced as machine-readable JSON
            _fail(e, unexpected=True)
        else:
            click.echo(json.dumps(result, sort_keys=True, default=str))

    return wrapper


def _load_config(ctx, param, value):
    if not value:
        return None
    try:
        config = json.loads(Path(value).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        _fail(e)
    if not isinstance(config, dict):
        _fail(ValueError("config file must contain a JSON object keyed by subcommand"))
    ctx.default_map = {k: dict(v) for k, v in config.items() if isinstance(v, dict)}
    return value


@click.group()
@click.version_option(version=__version__)
@click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    callback=_load_config,
    is_eager=True,
    expose_value=False,
    help="JSON file of per-subcommand option defaults (flags still win).",
)
def main():
    """Bias audit pipeline: discover, describe, and mitigate model biases."""


def grounding_options(fn):
    fn = click.option("--tau", type=float, default=DEFAULT_TAU, show_default=True,
                      help="Heatmap threshold for grounding.")(fn)
    fn = click.option("--cam-method", type=click.Choice(["gradcam", "scorecam", "gradcam++", "fullgrad"]),
                      default="gradcam", show_default=True)(fn)
    fn = click.option("--grounding/--no-grounding", "grounding_enabled", default=True,
                      show_default=True, help="Apply explanation grounding to stage inputs.")(fn)
    fn = click.option("--fill", type=click.Choice(["zero", "mean"]), default="zero", show_default=True)(fn)
    return fn


def train_param_options(fn):
    fn = click.option("--grid", type=int, default=4, show_default=True)(fn)
    fn = click.option("--learning-rate", type=float, default=0.5, show_default=True)(fn)
    fn = click.option("--steps", type=int, default=400, show_default=True)(fn)
    fn = click.option("--weight-decay", type=float, default=1e-3, show_default=True)(fn)
    fn = click.option("--seed", type=int, default=0, show_default=True)(fn)
    return fn


def _train_params(grid, learning_rate, steps, weight_decay, seed) -> dict:
    return {
        "grid": grid,
        "learning_rate": learning_rate,
        "steps": steps,
        "weight_decay": weight_decay,
        "random_state": seed,
    }


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-train", type=int, default=400, show_default=True)
@click.option("--n-val", type=int, default=120, show_default=True)
@click.option("--n-test", type=int, default=240, show_default=True)
@click.option("--classes", default="striped,checker", show_default=True,
              help="Comma-separated texture names.")
@click.option("--attributes", default="crimson,teal", show_default=True,
              help="Comma-separated background color names.")
@click.option("--correlation", type=float, default=0.95, show_default=True,
              help="Training probability of the class's paired color.")
@click.option("--image-size", type=int, default=32, show_default=True)
@click.option("--noise-level", type=float, default=0.05, show_default=True)
@click.option("--core-contrast", type=float, default=0.25, show_default=True)
@click.option("--distractor-level", type=float, default=0.0, show_default=True)
@click.option("--color-jitter", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@pipeline_command
def synth(out, n_train, n_val, n_test, classes, attributes, correlation, image_size,
          noise_level, core_contrast, distractor_level, color_jitter, seed):
    """Generate the synthetic spurious-correlation benchmark."""
    return pipeline.run_synth(
        out,
        n_train=n_train,
        n_val=n_val,
        n_test=n_test,
        classes=tuple(c.strip() for c in classes.split(",") if c.strip()),
        attributes=tuple(a.strip() for a in attributes.split(",") if a.strip()),
        correlation=correlation,
        image_size=image_size,
        noise_level=noise_level,
        core_contrast=core_contrast,
        distractor_level=distractor_level,
        color_jitter=color_jitter,
        seed=seed,
    )


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@train_param_options
@pipeline_command
def train(dataset, out, grid, learning_rate, steps, weight_decay, seed):
    """Train the baseline task model and write model + predictions."""
    return pipeline.run_train(dataset, out, _train_params(grid, learning_rate, steps, weight_decay, seed))


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--model", type=click.Path(exists=True), help="Trained model bundle.")
@click.option("--heatmaps", "heatmap_store", type=click.Path(exists=True),
              help="External heatmap store to ground with.")
@click.option("--planted", type=click.Choice(["core", "spurious"]),
              help="Use planted heatmaps on an annotated region instead of a model.")
@click.option("--sharpness", type=float, default=8.0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--target", default="predicted", show_default=True,
              help="Heatmap target class: 'predicted', 'true', or a class index.")
@click.option("--splits", default=None, help="Comma-separated splits (default: all).")
@click.option("--jobs", type=int, default=1, show_default=True)
@grounding_options
@pipeline_command
def ground(dataset, model, heatmap_store, planted, sharpness, out, target, splits, jobs,
           tau, cam_method, grounding_enabled, fill):
    """Produce explanation heatmaps and grounded images for a dataset."""
    config = GroundingConfig(tau=tau, cam_method=cam_method, enabled=grounding_enabled, fill=fill)
    target_value = target if target in ("predicted", "true") else int(target)
    return pipeline.run_ground(
        dataset,
        model,
        out,
        config,
        heatmap_store=heatmap_store,
        planted=planted,
        sharpness=sharpness,
        target=target_value,
        splits=None if not splits else tuple(s.strip() for s in splits.split(",")),
        jobs=jobs,
    )


@main.command("audit-overlap")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--heatmaps", "heatmap_store", type=click.Path(exists=True))
@click.option("--planted", type=click.Choice(["core", "spurious"]))
@click.option("--sharpness", type=float, default=8.0, show_default=True)
@click.option("--model", type=click.Path(exists=True))
@click.option("--tau", type=float, default=DEFAULT_TAU, show_default=True)
@click.option("--split", default="val", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@pipeline_command
def audit_overlap(dataset, heatmap_store, planted, sharpness, model, tau, split, out):
    """Audit heatmap placement against annotated core/spurious region masks."""
    return pipeline.run_audit_overlap(
        dataset,
        out,
        heatmap_store=heatmap_store,
        planted=planted,
        sharpness=sharpness,
        model=model,
        tau=tau,
        split=split,
    )


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--method", type=click.Choice(["domino", "facts"]), default="domino", show_default=True)
@click.option("--split", default="val", show_default=True)
@click.option("--n-slices", type=int, default=None, help="Default: twice the group count.")
@click.option("--gamma-y", type=float, default=10.0, show_default=True)
@click.option("--gamma-yhat", type=float, default=10.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--top-k", type=int, default=10, show_default=True)
@click.option("--amplified-weight-decay", type=float, default=None,
              help="facts only; default is 100x the baseline decay.")
@click.option("--pca-components", type=int, default=16, show_default=True,
              help="Embedding reduction before the mixture; 0 disables it.")
@grounding_options
@pipeline_command
def discover(dataset, model, out, method, split, n_slices, gamma_y, gamma_yhat, seed, top_k,
             amplified_weight_decay, pca_components, tau, cam_method, grounding_enabled, fill):
    """Discover underperforming slices with the error-aware mixture."""
    config = GroundingConfig(tau=tau, cam_method=cam_method, enabled=grounding_enabled, fill=fill)
    return pipeline.run_discover(
        dataset,
        model,
        out,
        method=method,
        grounding=config,
        split=split,
        n_slices=n_slices,
        gamma_y=gamma_y,
        gamma_yhat=gamma_yhat,
        seed=seed,
        top_k=top_k,
        amplified_weight_decay=amplified_weight_decay,
        pca_components=pca_components or None,
    )


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--split", default="val", show_default=True)
@click.option("--top-n", type=int, default=20, show_default=True)
@click.option("--min-frequency", type=float, default=2, show_default=True,
              help="Caption count (or fraction below 1) a keyword needs.")
@grounding_options
@pipeline_command
def keywords(dataset, model, out, split, top_n, min_frequency, tau, cam_method,
             grounding_enabled, fill):
    """Mine and rank bias keywords from error-set captions."""
    config = GroundingConfig(tau=tau, cam_method=cam_method, enabled=grounding_enabled, fill=fill)
    return pipeline.run_keywords(
        dataset,
        model,
        out,
        grounding=config,
        split=split,
        top_n=top_n,
        min_frequency=min_frequency,
    )


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--method", type=click.Choice(["erm", "jtt", "groupdro", "zeroshot"]),
              default="erm", show_default=True)
@click.option("--groups", "groups_source", type=click.Choice(["annotated", "inferred"]),
              default="annotated", show_default=True)
@click.option("--keywords", "keywords_artifact", type=click.Path(exists=True),
              help="keywords.json for inferred groups / keyword prompts.")
@click.option("--keywords-per-class", type=int, default=1, show_default=True)
@click.option("--strategy", type=click.Choice(["base", "group-informed", "keyword-augmented"]),
              default="base", show_default=True, help="zeroshot only.")
@click.option("--zeroshot-provider", type=click.Choice(["statistics", "oracle", "noisy-oracle"]),
              default="statistics", show_default=True)
@click.option("--eta", type=float, default=0.01, show_default=True, help="groupdro step size.")
@click.option("--lambda-up", type=float, default=20.0, show_default=True, help="jtt upweight.")
@train_param_options
@pipeline_command
def mitigate(dataset, out, method, groups_source, keywords_artifact, keywords_per_class,
             strategy, zeroshot_provider, eta, lambda_up, grid, learning_rate, steps,
             weight_decay, seed):
    """Train a mitigation model or evaluate a zero-shot prompt strategy."""
    return pipeline.run_mitigate(
        dataset,
        out,
        method=method,
        params=_train_params(grid, learning_rate, steps, weight_decay, seed),
        groups_source=groups_source,
        keywords_artifact=keywords_artifact,
        keywords_per_class=keywords_per_class,
        zeroshot_kind=zeroshot_provider,
        strategy=strategy,
        eta=eta,
        lambda_up=lambda_up,
        seed=seed,
    )


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--split", default="test", show_default=True)
@click.option("--name", default="model", show_default=True, help="Label used in report tables.")
@pipeline_command
def evaluate(dataset, model, out, split, name):
    """Grouped accuracy metrics of a trained model on one split."""
    return pipeline.run_evaluate(dataset, model, out, split=split, name=name)


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--overlap", type=click.Path(exists=True))
@click.option("--slices", type=click.Path(exists=True))
@click.option("--keywords", type=click.Path(exists=True))
@click.option("--metrics", multiple=True, type=click.Path(exists=True))
@pipeline_command
def report(out, overlap, slices, keywords, metrics):
    """Assemble stage artifacts into report.json and report.md."""
    return pipeline.run_report(
        out, overlap=overlap, slices=slices, keywords=keywords, metrics=list(metrics)
    )


@main.command("ablate-tau")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--taus", default=None,
              help=f"Comma-separated thresholds (default {DEFAULT_TAU_GRID[0]}..{DEFAULT_TAU_GRID[-1]} step 0.05).")
@click.option("--method", type=click.Choice(["domino", "facts"]), default="domino", show_default=True)
@click.option("--split", default="val", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--top-k", type=int, default=10, show_default=True)
@click.option("--pca-components", type=int, default=16, show_default=True,
              help="Embedding reduction before the mixture; 0 disables it.")
@pipeline_command
def ablate_tau(dataset, model, out, taus, method, split, seed, top_k, pca_components):
    """Sweep the grounding threshold and record discovery precision."""
    grid = None if taus is None else [float(t) for t in taus.split(",") if t.strip()]
    return pipeline.run_ablate_tau(
        dataset, model, out, taus=grid, method=method, split=split, seed=seed, top_k=top_k,
        pca_components=pca_components or None,
    )


if __name__ == "__main__":
    main()
