"""
Command line for PlaneBA.

    python -m src.cli gen --preset small --out data/datasets/small
    python -m src.cli run --dataset data/datasets/small --variant VIP
    python -m src.cli ablate --preset full --reps 5 --format csv --format markdown
    python -m src.cli sweep --preset full --out results/sweep
    python -m src.cli report results/ablation/report.json --format markdown

The exit code is 1 when any pipeline run recorded an error.
"""

import os
import sys
from dataclasses import replace
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables before the configuration classes read them
root_dir = Path(__file__).resolve().parent.parent
load_dotenv(root_dir / '.env')

import click  # noqa: E402

from src.assembly import VARIANTS  # noqa: E402
from src.bench import emit_report, run_ablation, run_pipeline, run_sweep, summarize  # noqa: E402
from src.config import load_settings  # noqa: E402
from src.errors import PlaneBAError  # noqa: E402
from src.logging_config import configure_logging, get_logger  # noqa: E402
from src.simworld import PRESETS, WorldSpec, generate  # noqa: E402
from src.storage import (  # noqa: E402
    dataset_digest, get_storage, load_config_document, load_dataset, load_results, load_world_spec,
    save_dataset,
)

log = get_logger(__name__)

variant_option = click.option('--variant', 'variants', multiple=True, type=click.Choice(VARIANTS),
                              help='Variant to run; repeat for several.')
format_option = click.option('--format', 'formats', multiple=True, default=('csv',),
                             type=click.Choice(['csv', 'json', 'markdown']), show_default=True)


def _world_spec(preset, spec_path, seed, keyframes):
    spec = load_world_spec(spec_path) if spec_path else WorldSpec.preset(preset)
    if seed is not None:
        spec = replace(spec, seed=seed)
    if keyframes:
        spec = spec.scaled(keyframes)
    return spec


def _source(dataset_path, preset, spec_path, seed):
    if dataset_path:
        return load_dataset(dataset_path)
    return _world_spec(preset, spec_path, seed, None)


def _out_dir(out, name):
    return Path(out) if out else get_storage().results_path(name)


@click.group()
@click.option('--env', default=lambda: os.environ.get('PLANEBA_ENV', 'default'), show_default='default',
              help='Configuration environment: default, development, benchmark or testing.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
              help='YAML key-value document overriding settings, e.g. max_iterations: 10')
@click.option('--log-level', default=None, help='Override the configured log level.')
@click.pass_context
def cli(ctx, env, config_path, log_level):
    """Plane-aware visual-inertial bundle adjustment benchmarks."""
    try:
        document = load_config_document(config_path) if config_path else None
        settings = load_settings(env, document)
    except PlaneBAError as exc:
        raise click.UsageError(str(exc))
    if log_level:
        settings['LOG_LEVEL'] = log_level
    configure_logging(debug=settings['DEBUG'], log_level=settings['LOG_LEVEL'], log_dir=settings['LOG_DIR'])
    ctx.obj = settings


@cli.command()
@click.option('--preset', default='full', type=click.Choice(sorted(PRESETS)), show_default=True)
@click.option('--spec', 'spec_path', type=click.Path(exists=True, dir_okay=False),
              help='YAML world spec (may name a preset and override fields).')
@click.option('--seed', type=int, default=None)
@click.option('--keyframes', type=int, default=None, help='Scale the scene to this many keyframes.')
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.option('--storage-format', type=click.Choice(['text', 'npz']), default=None)
@click.pass_obj
def gen(settings, preset, spec_path, seed, keyframes, out, storage_format):
    """Generate a synthetic dataset directory."""
    try:
        spec = _world_spec(preset, spec_path, seed, keyframes)
        dataset = generate(spec)
        path = Path(out) if out else get_storage().dataset_path(dataset.name)
        save_dataset(dataset, path, storage_format or settings['STORAGE_FORMAT'])
    except PlaneBAError as exc:
        raise click.ClickException(str(exc))
    click.echo(f'{dataset.name}: {len(dataset.keyframes)} keyframes, {dataset.planar_count} planar + '
               f'{dataset.nonplanar_count} non-planar points, {len(dataset.planes)} planes, '
               f'{len(dataset.loops)} loop pairs')
    click.echo(f'sha256 {dataset_digest(dataset)} -> {path}')


@cli.command()
@click.option('--dataset', 'dataset_path', type=click.Path(exists=True, file_okay=False), default=None)
@click.option('--preset', default='small', type=click.Choice(sorted(PRESETS)), show_default=True)
@click.option('--spec', 'spec_path', type=click.Path(exists=True, dir_okay=False))
@variant_option
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--no-loop', is_flag=True, help='Skip the pose-plane graph stage.')
@click.option('--lba-window', type=int, default=None, help='Finish with a local BA over this many keyframes.')
@click.option('--out', type=click.Path(file_okay=False), default=None)
@format_option
@click.pass_obj
def run(settings, dataset_path, preset, spec_path, variants, seed, no_loop, lba_window, out, formats):
    """Run the pipeline once per variant on one dataset."""
    try:
        source = _source(dataset_path, preset, spec_path, None)
        dataset = generate(source) if isinstance(source, WorldSpec) else source
    except PlaneBAError as exc:
        raise click.ClickException(str(exc))
    results = [
        run_pipeline(dataset, variant, settings, seed=seed, use_loops=not no_loop, lba_window=lba_window)
        for variant in (variants or (settings['VARIANT'],))
    ]
    for result in results:
        click.echo(f'{result.variant}: iters={result.iters} sum={result.sum_ms:.1f} ms '
                   f'rmse={result.rmse_m} m {result.error}'.rstrip())
    if out:
        emit_report(results, _out_dir(out, 'run'), formats)
    sys.exit(1 if any(r.failed for r in results) else 0)


@cli.command()
@click.option('--dataset', 'dataset_paths', multiple=True, type=click.Path(exists=True, file_okay=False))
@click.option('--preset', default='full', type=click.Choice(sorted(PRESETS)), show_default=True)
@click.option('--spec', 'spec_path', type=click.Path(exists=True, dir_okay=False))
@variant_option
@click.option('--reps', type=int, default=3, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--no-loop', is_flag=True)
@click.option('--parallel', is_flag=True, help='Run in worker processes (accuracy only; timings degrade).')
@click.option('--out', type=click.Path(file_okay=False), default=None)
@format_option
@click.pass_obj
def ablate(settings, dataset_paths, preset, spec_path, variants, reps, seed, no_loop, parallel, out, formats):
    """Variant ablation with per-variant means and speedups over VI."""
    try:
        sources = [load_dataset(p) for p in dataset_paths] or [_world_spec(preset, spec_path, None, None)]
        ablation = run_ablation(sources, variants or VARIANTS, settings, repetitions=reps, seed=seed,
                                use_loops=not no_loop, parallel=parallel or None)
        paths = emit_report(ablation.rows, _out_dir(out, 'ablation'), formats)
    except PlaneBAError as exc:
        raise click.ClickException(str(exc))
    for variant, speedup in ablation.summary.get('speedups', {}).items():
        if variant != 'VI' and speedup is not None:
            click.echo(f'speedup VI / {variant}: {speedup:.2f}x')
    for path in paths:
        click.echo(str(path))
    sys.exit(1 if ablation.failed else 0)


@cli.command()
@click.option('--preset', default='full', type=click.Choice(sorted(PRESETS)), show_default=True)
@click.option('--spec', 'spec_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--keyframes', 'keyframe_counts', multiple=True, type=int,
              help='Keyframe counts; defaults to SWEEP_KEYFRAMES.')
@variant_option
@click.option('--reps', type=int, default=3, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@format_option
@click.pass_obj
def sweep(settings, preset, spec_path, keyframe_counts, variants, reps, seed, out, formats):
    """GBA time against keyframe count."""
    try:
        spec = _world_spec(preset, spec_path, None, None)
        ablation, rows = run_sweep(spec, settings, keyframe_counts or None, variants or ('VI', 'VIP'),
                                   repetitions=reps, seed=seed)
        paths = emit_report(ablation.rows, _out_dir(out, 'sweep'), formats, sweep=rows)
    except PlaneBAError as exc:
        raise click.ClickException(str(exc))
    for path in paths:
        click.echo(str(path))
    sys.exit(1 if ablation.failed else 0)


@cli.command()
@click.argument('results_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.option('--name', default='report', show_default=True)
@format_option
def report(results_path, out, name, formats):
    """Re-render saved results (JSON or CSV) in other formats."""
    try:
        rows = load_results(results_path)
        out_dir = Path(out) if out else Path(results_path).parent
        paths = emit_report(rows, out_dir, formats, name=name)
    except PlaneBAError as exc:
        raise click.ClickException(str(exc))
    summary = summarize(rows)
    for path in paths:
        click.echo(str(path))
    sys.exit(1 if summary['failed'] else 0)


def main():
    cli()


if __name__ == '__main__':
    main()
