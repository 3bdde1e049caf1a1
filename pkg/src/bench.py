"""
Benchmark runner: pipeline runs, variant ablations, keyframe sweeps and
report files.

A pipeline run perturbs the ground truth into an initial map, builds planes
(from labels or by detection), optionally absorbs loop drift with the
pose-plane graph and finishes with global bundle adjustment. Every run is
captured as a BenchResult; errors are recorded on the row rather than
aborting the batch.
"""

import csv
import json
import multiprocessing
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from src.assembly import VARIANTS, assemble_gba, assemble_lba, check_variant
from src.errors import EmptyReport, InvalidVariant, IoFailure, PlaneBAError
from src.logging_config import get_logger
from src.models import KeyframeState, Landmark, SlamMap
from src.planemap import PlaneParams, detect_and_associate, planes_from_labels
from src.posegraph import optimize_pose_plane_graph
from src.preintegration import ImuNoise, preintegrate
from src.simworld import WorldSpec, ate_rmse, generate, perturb
from src.solver import solve_lm
from src.state import StateVector
from src.storage import save_results

log = get_logger(__name__)

REPORT_FIELDS = ('variant', 'seq', 'iters', 'residual_ms', 'jacobians_ms', 'linear_ms', 'pre_ms', 'post_ms',
                 'sum_ms', 'rmse_m')
TIMING_FIELDS = ('residual_ms', 'jacobians_ms', 'linear_ms', 'pre_ms', 'post_ms', 'sum_ms')
SWEEP_FIELDS = ('keyframes', 'variant', 'gba_ms', 'rmse_m')
REPORT_FORMATS = {'csv': '.csv', 'json': '.json', 'markdown': '.md'}


@dataclass
class BenchResult:
    """One pipeline run: timings of the GBA solve, accuracy and problem size."""
    variant: str
    dataset: str
    seq: int = 0
    repetition: int = 0
    iters: int = 0
    residual_ms: float = 0.0
    jacobians_ms: float = 0.0
    linear_ms: float = 0.0
    pre_ms: float = 0.0
    post_ms: float = 0.0
    sum_ms: float = 0.0
    rmse_m: Optional[float] = None
    ate_initial_m: Optional[float] = None
    ate_graph_m: Optional[float] = None
    keyframes: int = 0
    planar_points: int = 0
    nonplanar_points: int = 0
    planes: int = 0
    state_dim: int = 0
    initial_cost: Optional[float] = None
    final_cost: Optional[float] = None
    termination: str = ''
    error: str = ''

    @property
    def failed(self):
        return bool(self.error)

    def to_row(self):
        return asdict(self)

    @classmethod
    def from_row(cls, row):
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in row.items() if k in known}
        values['error'] = values.get('error') or ''
        values['termination'] = values.get('termination') or ''
        return cls(**values)

    def __repr__(self):
        return f'<BenchResult {self.variant} seq={self.seq} sum={self.sum_ms:.1f}ms rmse={self.rmse_m}>'


@dataclass
class AblationResult:
    rows: list
    summary: dict

    @property
    def failed(self):
        return any(r.failed for r in self.rows)


# --- pipeline ---

def ground_truth_states(dataset):
    return StateVector.from_blocks(dataset.keyframes, body_to_camera=dataset.rig.body_to_camera)


def build_initial_map(dataset, settings, seed=0):
    """
    Initial map from a dataset: drifted keyframe states, landmarks
    back-projected from their first observation and IMU factors
    preintegrated at the drifted biases.
    """
    states = perturb(ground_truth_states(dataset), settings['PERTURB_ROT_DEG'], settings['PERTURB_TRANS'],
                     seed=seed)
    keyframes = {}
    for row, kf in enumerate(sorted(dataset.keyframes, key=lambda k: k.id)):
        keyframes[kf.id] = KeyframeState(
            id=kf.id,
            timestamp=kf.timestamp,
            pose=states.pose(kf.id),
            velocity=states.velocities[row].copy(),
            gyro_bias=states.gyro_biases[row].copy(),
            accel_bias=states.accel_biases[row].copy(),
            imu_index=kf.imu_index,
        )
    observations = dataset.observations
    first_rows = {landmark_id: rows[0] for landmark_id, rows in observations.by_landmark().items()}
    landmarks = {}
    for truth in dataset.landmarks:
        row = first_rows.get(truth.id)
        if row is None:
            continue
        camera = keyframes[int(observations.keyframe_ids[row])].camera_pose(dataset.rig)
        position = camera.act(observations.local_points([row])[0])
        landmarks[truth.id] = Landmark(truth.id, position, truth.normal.copy(), None)

    noise = ImuNoise.from_settings(settings)
    ordered = [keyframes[k] for k in sorted(keyframes)]
    preintegrations = [
        preintegrate(dataset.imu.window(a.imu_index, b.imu_index), a.gyro_bias, a.accel_bias, noise,
                     dataset.gravity, a.id, b.id)
        for a, b in zip(ordered[:-1], ordered[1:])
    ]
    return SlamMap(
        rig=dataset.rig,
        gravity=np.asarray(dataset.gravity, dtype=float),
        keyframes=keyframes,
        landmarks=landmarks,
        observations=observations,
        preintegrations=preintegrations,
        loop_pairs=list(dataset.loops),
    )


def _positions(slam_map):
    return {k: kf.pose.translation for k, kf in slam_map.keyframes.items()}


def build_planes(slam_map, dataset, settings):
    """Plane membership from ground-truth labels or by detection, per ``PLANE_SOURCE``."""
    if settings['PLANE_SOURCE'] == 'labels':
        labels = {lm.id: lm.plane_id for lm in dataset.landmarks}
        kinds = {plane.id: plane.kind for plane in dataset.planes}
        planes_from_labels(slam_map, labels, kinds)
    else:
        detect_and_associate(slam_map, PlaneParams.from_settings(settings))
    return sorted(slam_map.planes)


def run_pipeline(dataset, variant, settings, seed=0, use_loops=True, lba_window=None, seq=0, repetition=0):
    """
    Run perturb -> planes -> pose-plane graph -> GBA on one dataset.

    Args:
        dataset: Dataset with ground truth
        variant: 'VI', 'VI_P', 'VI_CP' or 'VIP'
        settings: dict from ``load_settings``
        use_loops: run the pose-plane graph when the dataset declares loops
        lba_window: finish with a local pass over the newest keyframes

    Returns:
        BenchResult; module errors are recorded in ``error`` and not raised
    """
    result = BenchResult(variant=variant, dataset=dataset.name, seq=seq, repetition=repetition,
                         keyframes=len(dataset.keyframes))
    ground_truth = {kf.id: kf.pose.translation for kf in dataset.keyframes}
    try:
        check_variant(variant)
        slam_map = build_initial_map(dataset, settings, seed=seed)
        result.ate_initial_m = ate_rmse(_positions(slam_map), ground_truth)

        if variant != 'VI':
            build_planes(slam_map, dataset, settings)
        if use_loops and slam_map.loop_pairs:
            optimize_pose_plane_graph(slam_map, slam_map.loop_pairs, settings)
            result.ate_graph_m = ate_rmse(_positions(slam_map), ground_truth)

        problem = assemble_gba(slam_map, settings, variant)
        states, report = solve_lm(problem)
        slam_map.update_from(states)

        if lba_window:
            local, _ = solve_lm(assemble_lba(slam_map, settings, window=lba_window, variant=variant))
            slam_map.update_from(local)

        result.rmse_m = ate_rmse(_positions(slam_map), ground_truth)
        result.iters = report.iterations
        for name, value in report.phases().items():
            setattr(result, name, value)
        result.sum_ms = report.sum_ms
        result.state_dim = report.state_dimension
        result.initial_cost = report.initial_cost
        result.final_cost = report.final_cost
        result.termination = report.termination
        result.planes = len(slam_map.planes)
        result.planar_points = len(slam_map.planar_landmark_ids())
        result.nonplanar_points = len(slam_map.nonplanar_landmark_ids())
    except (PlaneBAError, np.linalg.LinAlgError) as exc:
        result.error = f'{type(exc).__name__}: {exc}'
        result.termination = 'error'
        log.error("pipeline_failed", variant=variant, dataset=dataset.name, error=result.error)
        return result

    log.info("pipeline_finished", variant=variant, dataset=dataset.name, iterations=result.iters,
             sum_ms=round(result.sum_ms, 3), rmse_m=result.rmse_m, ate_initial_m=result.ate_initial_m)
    return result


# --- ablation and sweep ---

def _dataset(source):
    return generate(source) if isinstance(source, WorldSpec) else source


def _run_job(job):
    dataset, variant, settings, seed, use_loops, seq, repetition = job
    return run_pipeline(dataset, variant, settings, seed=seed, use_loops=use_loops, seq=seq,
                        repetition=repetition)


def check_variants(variants):
    variants = list(variants)
    if not variants:
        raise InvalidVariant("at least one variant is required")
    return [check_variant(v) for v in variants]


def run_ablation(sources, variants, settings, repetitions=3, seed=0, use_loops=True, parallel=None):
    """
    Run every variant on every dataset ``repetitions`` times.

    Args:
        sources: WorldSpec or Dataset objects (specs are generated first)
        variants: non-empty list of variant names
        parallel: worker processes for accuracy-only batches; defaults to
            ``BENCH_PARALLEL`` (sequential keeps timings comparable)

    Returns:
        AblationResult with rows ordered by (seq, repetition, variant) and a summary

    Raises:
        InvalidVariant: empty or unknown variant list
    """
    variants = check_variants(variants)
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    parallel = settings['BENCH_PARALLEL'] if parallel is None else parallel
    datasets = [_dataset(s) for s in sources]

    jobs = [
        (dataset, variant, settings, seed + repetition, use_loops, seq, repetition)
        for seq, dataset in enumerate(datasets)
        for repetition in range(repetitions)
        for variant in variants
    ]
    if settings['BENCH_WARMUP']:
        # one untimed run per variant on the first dataset
        for job in jobs[:len(variants)]:
            _run_job(job)

    if parallel and len(jobs) > 1:
        processes = None if parallel is True else int(parallel)
        with multiprocessing.Pool(processes=processes) as pool:
            rows = pool.map(_run_job, jobs)
    else:
        rows = [_run_job(job) for job in jobs]

    summary = summarize([r.to_row() for r in rows])
    log.info("ablation_finished", runs=len(rows), failed=sum(r.failed for r in rows),
             speedups=summary.get('speedups'))
    return AblationResult(rows=rows, summary=summary)


def run_sweep(spec, settings, keyframe_counts=None, variants=('VI', 'VIP'), repetitions=3, seed=0,
              use_loops=False):
    """
    GBA time against keyframe count with proportionally scaled landmarks.

    Returns:
        (AblationResult over all counts, sweep rows sorted by keyframe count)
    """
    counts = sorted(int(k) for k in (keyframe_counts or settings['SWEEP_KEYFRAMES']))
    variants = check_variants(variants)
    sources = [spec.scaled(k) for k in counts]
    ablation = run_ablation(sources, variants, settings, repetitions=repetitions, seed=seed,
                            use_loops=use_loops)
    return ablation, sweep_rows([r.to_row() for r in ablation.rows])


def sweep_rows(rows):
    """Median GBA time and mean ATE per (keyframes, variant), ordered by keyframe count."""
    groups = {}
    for row in rows:
        if row.get('error'):
            continue
        groups.setdefault((int(row['keyframes']), row['variant']), []).append(row)
    out = []
    for (keyframes, variant) in sorted(groups, key=lambda key: (key[0], _variant_order(key[1]))):
        group = groups[(keyframes, variant)]
        out.append({
            'keyframes': keyframes,
            'variant': variant,
            'gba_ms': float(np.median([r['sum_ms'] for r in group])),
            'rmse_m': float(np.mean([r['rmse_m'] for r in group])),
        })
    return out


def _variant_order(variant):
    return VARIANTS.index(variant) if variant in VARIANTS else len(VARIANTS)


def summarize(rows):
    """
    Per-variant means and medians plus speedups, computed only from ``rows``.

    ``speedups[X]`` is mean VI time over mean X time for every variant X that
    ran alongside VI; ``speedup_vi_over_vip`` repeats the VIP entry. Failed
    rows are excluded, so unequal run counts do not skew the ratios.
    """
    by_variant = {}
    for row in rows:
        if not row.get('error'):
            by_variant.setdefault(row['variant'], []).append(row)
    variants = {}
    for variant in sorted(by_variant, key=_variant_order):
        group = by_variant[variant]
        entry = {'runs': len(group)}
        for name in TIMING_FIELDS + ('iters', 'rmse_m'):
            values = [r[name] for r in group if r.get(name) is not None]
            entry[f'mean_{name}'] = float(np.mean(values)) if values else None
        entry['median_sum_ms'] = float(np.median([r['sum_ms'] for r in group]))
        variants[variant] = entry
    summary = {'variants': variants, 'failed': sum(1 for r in rows if r.get('error'))}
    if 'VI' in variants:
        vi = variants['VI']['mean_sum_ms']
        summary['speedups'] = {
            variant: (vi / entry['mean_sum_ms'] if entry['mean_sum_ms'] > 0 else None)
            for variant, entry in variants.items()
        }
        if 'VIP' in variants:
            summary['speedup_vi_over_vip'] = summary['speedups']['VIP']
    return summary


# --- reports ---

def _rows(results):
    return [r.to_row() if isinstance(r, BenchResult) else dict(r) for r in results]


def _csv_value(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_columns(rows):
    extra = sorted({key for row in rows for key in row} - set(REPORT_FIELDS))
    return list(REPORT_FIELDS) + extra


def _write_csv(path, columns, rows):
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_value(row.get(c)) for c in columns])


def _markdown_number(value, digits):
    if value is None:
        return ''
    if isinstance(value, float):
        return f'{value:.{digits}f}'
    return str(value)


def render_markdown(rows, summary):
    lines = ['| ' + ' | '.join(REPORT_FIELDS) + ' |', '|' + '---|' * len(REPORT_FIELDS)]
    for row in rows:
        cells = [_markdown_number(row.get(name), 4 if name == 'rmse_m' else 1) for name in REPORT_FIELDS]
        lines.append('| ' + ' | '.join(cells) + ' |')
    lines.append('')
    for variant, entry in summary['variants'].items():
        lines.append(f"- {variant}: mean sum {_markdown_number(entry['mean_sum_ms'], 1)} ms, "
                     f"median sum {_markdown_number(entry['median_sum_ms'], 1)} ms, "
                     f"mean ATE {_markdown_number(entry['mean_rmse_m'], 4)} m over {entry['runs']} runs")
    for variant, speedup in summary.get('speedups', {}).items():
        if variant != 'VI' and speedup is not None:
            lines.append(f"- speedup VI / {variant}: {speedup:.2f}x")
    if summary.get('failed'):
        lines.append(f"- failed runs: {summary['failed']}")
    return '\n'.join(lines) + '\n'


def emit_report(results, out_dir, formats=('csv',), name='report', sweep=None):
    """
    Write result rows in each requested format, plus ``<name>_sweep.csv`` when sweep rows are given.

    Args:
        results: BenchResult objects or row dicts
        formats: any of 'csv', 'json', 'markdown'

    Returns:
        list of written paths

    Raises:
        EmptyReport: no results
        IoFailure: a file cannot be written
    """
    rows = _rows(results)
    if not rows:
        raise EmptyReport("no results to report")
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    summary = summarize(rows)
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for fmt in formats:
            path = out / f'{name}{REPORT_FORMATS[fmt]}'
            if fmt == 'csv':
                _write_csv(path, report_columns(rows), rows)
            elif fmt == 'json':
                save_results(rows, path)
                summary_path = out / f'{name}_summary.json'
                summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + '\n', encoding='utf-8')
                written.append(summary_path)
            else:
                path.write_text(render_markdown(rows, summary), encoding='utf-8')
            written.append(path)
        if sweep:
            path = out / f'{name}_sweep.csv'
            _write_csv(path, list(SWEEP_FIELDS), sweep)
            written.append(path)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}")
    log.info("report_written", files=[str(p) for p in written], rows=len(rows))
    return written
