"""
Tests for the benchmark runner, report files and the command line.
"""
import json

import pytest
from click.testing import CliRunner

from src.assembly import VARIANTS
from src.bench import (REPORT_FIELDS, BenchResult, emit_report, render_markdown, run_ablation, run_pipeline,
                       run_sweep, summarize, sweep_rows)
from src.cli import cli
from src.config import load_settings
from src.errors import EmptyReport, InvalidVariant
from src.simworld import WorldSpec, generate
from src.storage import dataset_digest, load_dataset, load_results, save_dataset, save_results


def exact_settings(**overrides):
    return load_settings('testing', {'perturb_rot_deg': 0.0, 'perturb_trans': 0.0, **overrides})


def timed(variant, sum_ms, rmse_m=0.01, seq=0, **values):
    return BenchResult(variant=variant, dataset='room-small-42', seq=seq, sum_ms=sum_ms, rmse_m=rmse_m,
                       iters=10, residual_ms=sum_ms / 4.0, **values)


@pytest.mark.unit
class TestBenchResult:
    """Test result rows."""

    def test_failed_follows_error(self):
        """Test that a row is failed exactly when it carries an error message."""
        assert not timed('VI', 1.0).failed
        assert timed('VI', 1.0, error='RankDeficient: plane fit').failed

    def test_from_row_ignores_unknown_columns(self):
        """Test that extra columns in a loaded row are dropped."""
        row = dict(timed('VIP', 2.5).to_row(), comment='rerun')

        assert BenchResult.from_row(row) == timed('VIP', 2.5)

    def test_from_row_restores_empty_text(self):
        """Test that a missing error or termination becomes an empty string."""
        row = timed('VIP', 2.5).to_row()
        row['error'] = None
        row['termination'] = None

        result = BenchResult.from_row(row)

        assert result.error == ''
        assert result.termination == ''


@pytest.mark.unit
class TestSummaries:
    """Test per-variant summaries computed from rows."""

    def test_means_and_medians(self):
        """Test that the summary mean and median match hand-computed values over three repetitions."""
        rows = [timed('VIP', ms, rmse_m=err).to_row() for ms, err in [(10.0, 0.010), (14.0, 0.012), (30.0, 0.020)]]

        entry = summarize(rows)['variants']['VIP']

        assert entry['runs'] == 3
        assert entry['mean_sum_ms'] == pytest.approx(18.0)
        assert entry['median_sum_ms'] == pytest.approx(14.0)
        assert entry['mean_rmse_m'] == pytest.approx(0.014)
        assert entry['mean_residual_ms'] == pytest.approx(4.5)

    def test_speedup_from_rows(self):
        """Test that the VI over VIP speedup is the ratio of mean GBA times."""
        rows = [timed('VI', 30.0).to_row(), timed('VI', 50.0).to_row(),
                timed('VIP', 10.0).to_row(), timed('VIP', 30.0).to_row()]

        assert summarize(rows)['speedup_vi_over_vip'] == pytest.approx(2.0)

    def test_no_speedup_without_both_variants(self):
        """Test that the speedup is absent when VI or VIP did not run."""
        assert 'speedup_vi_over_vip' not in summarize([timed('VI_CP', 5.0).to_row()])

    def test_speedup_uses_means_when_run_counts_differ(self):
        """Test that a failed VIP run does not inflate the speedup when VI has more successful runs."""
        rows = [timed('VI', 100.0).to_row() for _ in range(3)]
        rows += [timed('VIP', 100.0).to_row() for _ in range(2)]
        rows.append(timed('VIP', 0.0, error='LinAlgError: singular').to_row())

        summary = summarize(rows)

        assert summary['variants']['VI']['runs'] == 3
        assert summary['variants']['VIP']['runs'] == 2
        assert summary['speedup_vi_over_vip'] == pytest.approx(1.0)

    def test_speedups_for_every_variant(self):
        """Test that each variant gets a speedup relative to VI, with VI itself at 1."""
        rows = [timed(v, ms).to_row() for v, ms in [('VI', 40.0), ('VI_P', 80.0), ('VI_CP', 50.0),
                                                    ('VIP', 20.0), ('VIP', 10.0)]]

        speedups = summarize(rows)['speedups']

        assert list(speedups) == list(VARIANTS)
        assert speedups['VI'] == pytest.approx(1.0)
        assert speedups['VI_P'] == pytest.approx(0.5)
        assert speedups['VI_CP'] == pytest.approx(0.8)
        assert speedups['VIP'] == pytest.approx(40.0 / 15.0)

    def test_no_speedups_without_vi(self):
        """Test that no ratios are reported when the VI baseline did not run."""
        summary = summarize([timed('VIP', 5.0).to_row(), timed('VI_P', 9.0).to_row()])

        assert 'speedups' not in summary
        assert 'speedup_vi_over_vip' not in summary

    def test_failed_rows_are_counted_not_averaged(self):
        """Test that failed runs are excluded from means and reported as failures."""
        rows = [timed('VI', 10.0).to_row(), timed('VI', 0.0, error='InvalidProblem: empty').to_row()]

        summary = summarize(rows)

        assert summary['failed'] == 1
        assert summary['variants']['VI']['runs'] == 1
        assert summary['variants']['VI']['mean_sum_ms'] == pytest.approx(10.0)

    def test_variants_follow_canonical_order(self):
        """Test that summary variants are ordered VI, VI_P, VI_CP, VIP."""
        rows = [timed(v, 1.0).to_row() for v in reversed(VARIANTS)]

        assert list(summarize(rows)['variants']) == list(VARIANTS)

    def test_sweep_rows_are_sorted_by_keyframes(self):
        """Test that sweep rows come out ordered by keyframe count with median time per group."""
        rows = [timed('VIP', ms, keyframes=k).to_row() for k, ms in [(100, 9.0), (25, 2.0), (100, 7.0),
                                                                     (25, 4.0), (100, 8.0)]]

        out = sweep_rows(rows)

        assert [r['keyframes'] for r in out] == [25, 100]
        assert [r['gba_ms'] for r in out] == [pytest.approx(3.0), pytest.approx(8.0)]


@pytest.mark.unit
class TestEmitReport:
    """Test report files."""

    def test_csv_has_header_and_rows(self, tmp_path):
        """Test that one result gives a CSV of one header and one record."""
        paths = emit_report([timed('VIP', 12.25)], tmp_path)

        lines = paths[0].read_text().splitlines()
        assert len(lines) == 2
        assert lines[0].split(',')[:len(REPORT_FIELDS)] == list(REPORT_FIELDS)

    def test_csv_round_trip_is_bit_equal(self, tmp_path):
        """Test that floats written to the CSV report load back bit for bit."""
        results = [timed('VI', 0.1 + 0.2, rmse_m=1.0 / 3.0), timed('VIP', 1e-17, rmse_m=None, seq=1)]

        paths = emit_report(results, tmp_path)

        assert load_results(paths[0]) == [r.to_row() for r in results]

    def test_json_report_with_summary(self, tmp_path):
        """Test that the JSON format writes the rows and a summary document."""
        results = [timed('VI', 20.0), timed('VIP', 10.0)]

        emit_report(results, tmp_path, formats=('json',))

        assert load_results(tmp_path / 'report.json') == [r.to_row() for r in results]
        summary = json.loads((tmp_path / 'report_summary.json').read_text())
        assert summary['speedup_vi_over_vip'] == pytest.approx(2.0)

    def test_markdown_report(self, tmp_path):
        """Test that the markdown table lists each run and the speedup line."""
        emit_report([timed('VI', 20.0), timed('VIP', 10.0)], tmp_path, formats=('markdown',), name='table')

        text = (tmp_path / 'table.md').read_text()
        assert text.startswith('| ' + ' | '.join(REPORT_FIELDS) + ' |')
        assert '| VIP | 0 | 10 |' in text
        assert 'speedup VI / VIP: 2.00x' in text

    def test_markdown_lists_speedup_of_each_variant(self, tmp_path):
        """Test that the markdown summary gives one speedup line per variant other than VI."""
        results = [timed('VI', 30.0), timed('VI_P', 60.0), timed('VI_CP', 40.0), timed('VIP', 10.0)]

        emit_report(results, tmp_path, formats=('markdown',))

        text = (tmp_path / 'report.md').read_text()
        assert 'speedup VI / VI_P: 0.50x' in text
        assert 'speedup VI / VI_CP: 0.75x' in text
        assert 'speedup VI / VIP: 3.00x' in text
        assert 'speedup VI / VI:' not in text

    def test_sweep_file(self, tmp_path):
        """Test that sweep rows are written beside the report."""
        rows = [timed('VIP', 5.0, keyframes=25).to_row()]

        emit_report(rows, tmp_path, sweep=sweep_rows(rows))

        assert (tmp_path / 'report_sweep.csv').read_text().splitlines()[0] == 'keyframes,variant,gba_ms,rmse_m'

    def test_empty_report_raises(self, tmp_path):
        """Test that reporting nothing raises EmptyReport."""
        with pytest.raises(EmptyReport):
            emit_report([], tmp_path)

    def test_unknown_format_raises(self, tmp_path):
        """Test that an unknown report format is rejected."""
        with pytest.raises(ValueError):
            emit_report([timed('VI', 1.0)], tmp_path, formats=('xlsx',))

    def test_markdown_renders_missing_values_blank(self):
        """Test that a run without accuracy renders an empty cell."""
        row = timed('VI', 1.0, rmse_m=None).to_row()

        text = render_markdown([row], summarize([row]))

        assert text.splitlines()[2].endswith('| 1.0 |  |')


@pytest.mark.integration
class TestRunPipeline:
    """Test single pipeline runs."""

    @pytest.mark.parametrize('variant', VARIANTS)
    def test_zero_noise_recovers_ground_truth(self, clean_world, variant):
        """Test that an unperturbed noise-free run ends within a micrometre of ground truth."""
        result = run_pipeline(clean_world, variant, exact_settings())

        assert not result.failed, result.error
        assert result.rmse_m < 1e-6
        assert result.keyframes == len(clean_world.keyframes)

    def test_vi_run_has_no_planes(self, clean_world):
        """Test that the plain visual-inertial variant does not build planes."""
        result = run_pipeline(clean_world, 'VI', exact_settings(), use_loops=False)

        assert result.planes == 0
        assert result.planar_points == 0

    def test_plane_counts_are_reported(self, clean_world):
        """Test that a plane-aware run reports the labelled planes and planar points."""
        result = run_pipeline(clean_world, 'VIP', exact_settings(), use_loops=False)

        assert result.planes == len(clean_world.planes)
        assert result.planar_points > 0
        assert result.sum_ms > 0.0
        assert result.termination

    def test_local_window_pass(self, clean_world):
        """Test that a trailing local pass keeps a noise-free run at ground truth."""
        result = run_pipeline(clean_world, 'VIP', exact_settings(), use_loops=False, lba_window=10)

        assert result.rmse_m < 1e-6

    def test_error_is_recorded_not_raised(self, clean_world):
        """Test that a failing run returns a row carrying the error."""
        result = run_pipeline(clean_world, 'VI_X', exact_settings())

        assert result.failed
        assert result.error.startswith('InvalidVariant')
        assert result.termination == 'error'
        assert result.rmse_m is None


@pytest.mark.integration
class TestAblation:
    """Test variant ablations and sweeps."""

    def test_warmup_runs_each_variant_once(self, monkeypatch):
        """Test that warm-up makes one extra run per variant before the timed runs."""
        calls = []

        def record(job):
            _, variant, _, _, _, seq, repetition = job
            calls.append(variant)
            return timed(variant, 1.0, seq=seq, repetition=repetition)

        monkeypatch.setattr('src.bench._run_job', record)
        settings = load_settings('testing', {'bench_warmup': True})

        ablation = run_ablation([object()], ['VI', 'VI_CP', 'VIP'], settings, repetitions=2)

        assert calls[:3] == ['VI', 'VI_CP', 'VIP']
        assert len(calls) == 3 + 6
        assert len(ablation.rows) == 6

    def test_empty_variant_list_raises(self, clean_world):
        """Test that an ablation without variants raises InvalidVariant."""
        with pytest.raises(InvalidVariant):
            run_ablation([clean_world], [], exact_settings())

    def test_unknown_variant_raises(self, clean_world):
        """Test that an unknown variant name is rejected before any run."""
        with pytest.raises(InvalidVariant):
            run_ablation([clean_world], ['VI', 'PLANAR'], exact_settings())

    @pytest.mark.slow
    def test_rows_and_summary(self, clean_world):
        """Test that three repetitions of two variants give six rows whose means make up the summary."""
        ablation = run_ablation([clean_world], ['VI', 'VIP'], exact_settings(), repetitions=3)

        assert [(r.repetition, r.variant) for r in ablation.rows] == [
            (rep, v) for rep in range(3) for v in ('VI', 'VIP')
        ]
        assert not ablation.failed
        vip = [r.sum_ms for r in ablation.rows if r.variant == 'VIP']
        assert ablation.summary['variants']['VIP']['mean_sum_ms'] == pytest.approx(sum(vip) / 3)
        vi = [r.sum_ms for r in ablation.rows if r.variant == 'VI']
        assert ablation.summary['speedups']['VIP'] == pytest.approx(sum(vi) / sum(vip))

    @pytest.mark.slow
    def test_sweep_is_ordered_by_keyframes(self):
        """Test that the sweep returns one row per variant and keyframe count, ascending."""
        settings = load_settings('testing', {'max_iterations': 5})

        _, rows = run_sweep(WorldSpec.preset('small'), settings, keyframe_counts=[20, 10], variants=['VIP'],
                            repetitions=1)

        assert [r['keyframes'] for r in rows] == [10, 20]
        assert all(r['variant'] == 'VIP' for r in rows)


@pytest.mark.integration
class TestCommandLine:
    """Test the click command group."""

    def test_gen_writes_reproducible_dataset(self, tmp_path):
        """Test that gen writes a dataset directory that matches a fresh generation."""
        result = CliRunner().invoke(cli, ['--env', 'testing', 'gen', '--preset', 'small', '--seed', '5',
                                          '--out', str(tmp_path / 'room')])

        assert result.exit_code == 0, result.output
        assert 'sha256' in result.output
        expected = dataset_digest(generate(WorldSpec.preset('small', seed=5)))
        assert dataset_digest(load_dataset(tmp_path / 'room')) == expected

    def test_run_writes_report(self, clean_world, tmp_path):
        """Test that run on a saved dataset exits cleanly and writes the requested report."""
        save_dataset(clean_world, tmp_path / 'room')

        result = CliRunner().invoke(cli, ['--env', 'testing', 'run', '--dataset', str(tmp_path / 'room'),
                                          '--variant', 'VIP', '--no-loop', '--out', str(tmp_path / 'out')])

        assert result.exit_code == 0, result.output
        assert 'VIP: iters=' in result.output
        assert len((tmp_path / 'out' / 'report.csv').read_text().splitlines()) == 2

    def test_report_renders_saved_results(self, tmp_path):
        """Test that report re-renders saved rows as markdown."""
        path = save_results([timed('VI', 20.0).to_row(), timed('VIP', 10.0).to_row()], tmp_path / 'results.json')

        result = CliRunner().invoke(cli, ['--env', 'testing', 'report', str(path), '--format', 'markdown'])

        assert result.exit_code == 0, result.output
        assert 'speedup VI / VIP: 2.00x' in (tmp_path / 'report.md').read_text()

    def test_report_exit_code_flags_failed_runs(self, tmp_path):
        """Test that the exit code is 1 when any saved run carries an error."""
        rows = [timed('VI', 20.0).to_row(), timed('VIP', 0.0, error='InvalidProblem: empty').to_row()]
        path = save_results(rows, tmp_path / 'results.json')

        result = CliRunner().invoke(cli, ['--env', 'testing', 'report', str(path),
                                          '--out', str(tmp_path / 'again')])

        assert result.exit_code == 1

    def test_unknown_environment_is_a_usage_error(self):
        """Test that an unknown --env value exits with a usage error."""
        result = CliRunner().invoke(cli, ['--env', 'staging', 'report', '--help'])

        assert result.exit_code == 2
        assert 'staging' in result.output

    def test_config_document_with_unknown_key(self, tmp_path):
        """Test that a settings document with an unknown key exits with a usage error."""
        path = tmp_path / 'settings.yaml'
        path.write_text('max_iterations: 10\nflux_capacitor: on\n')

        result = CliRunner().invoke(cli, ['--env', 'testing', '--config', str(path), 'run', '--help'])

        assert result.exit_code == 2
        assert 'flux_capacitor' in result.output
