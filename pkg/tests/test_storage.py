"""
Tests for dataset, map snapshot, result and configuration storage.
"""
import json

import numpy as np
import pytest

from src.assembly import factor_inventory
from src.errors import ConfigError, CorruptRecord, VersionMismatch
from src.simworld import generate
from src.storage import (MapSnapshot, StorageManager, dataset_digest, load_config_document, load_dataset,
                         load_map, load_report_csv, load_results, load_world_spec, parse_table, save_dataset,
                         save_map, save_results, table_text)


def directory_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.mark.unit
class TestRecordTables:
    """Test the line-delimited record format."""

    FIELDS = [('id', 'i'), ('value', 'f'), ('kind', 's')]

    def test_floats_survive_exactly(self):
        """Test that 17 significant digits reproduce every float bit for bit."""
        values = [0.1, 1.0 / 3.0, np.pi * 1e-300, -2.5e17, np.nextafter(1.0, 2.0)]
        text = table_text('demo', self.FIELDS, {'id': list(range(5)), 'value': values, 'kind': ['a'] * 5})

        columns = parse_table('demo.txt', 'demo', self.FIELDS, text)

        assert columns['value'].tolist() == values
        assert columns['id'].tolist() == [0, 1, 2, 3, 4]

    def test_truncated_table_names_missing_record(self):
        """Test that a table missing its last record raises CorruptRecord naming that record."""
        text = table_text('demo', self.FIELDS, {'id': [0, 1, 2], 'value': [0.0, 1.0, 2.0], 'kind': list('abc')})
        truncated = '\n'.join(text.splitlines()[:-1]) + '\n'

        with pytest.raises(CorruptRecord) as excinfo:
            parse_table('demo.txt', 'demo', self.FIELDS, truncated)

        assert excinfo.value.source == 'demo.txt'
        assert excinfo.value.index == 2

    def test_malformed_record(self):
        """Test that a record with a missing value is reported with its index."""
        text = table_text('demo', self.FIELDS, {'id': [0, 1], 'value': [0.0, 1.0], 'kind': ['a', 'b']})
        broken = text.replace('\n1 1 b\n', '\n1 b\n')

        with pytest.raises(CorruptRecord) as excinfo:
            parse_table('demo.txt', 'demo', self.FIELDS, broken)

        assert excinfo.value.index == 1

    def test_unknown_major_version(self):
        """Test that a newer major version is refused."""
        text = table_text('demo', self.FIELDS, {'id': [], 'value': [], 'kind': []})

        with pytest.raises(VersionMismatch):
            parse_table('demo.txt', 'demo', self.FIELDS, text.replace('planeba-demo 1.', 'planeba-demo 2.'))

    def test_newer_minor_version_is_read(self):
        """Test that a newer minor version of the same major is accepted."""
        text = table_text('demo', self.FIELDS, {'id': [4], 'value': [0.5], 'kind': ['x']})

        columns = parse_table('demo.txt', 'demo', self.FIELDS, text.replace('planeba-demo 1.0', 'planeba-demo 1.7'))

        assert columns['id'].tolist() == [4]


@pytest.mark.integration
class TestDatasetStorage:
    """Test dataset directories."""

    def test_text_round_trip(self, noisy_world, tmp_path):
        """Test that a saved and loaded dataset has the same digest."""
        save_dataset(noisy_world, tmp_path / 'room')

        loaded = load_dataset(tmp_path / 'room')

        assert dataset_digest(loaded) == dataset_digest(noisy_world)
        assert loaded.spec == noisy_world.spec

    def test_npz_round_trip(self, noisy_world, tmp_path):
        """Test that the binary format round-trips to the same digest."""
        save_dataset(noisy_world, tmp_path / 'room', fmt='npz')

        assert (tmp_path / 'room' / 'tables.npz').exists()
        assert dataset_digest(load_dataset(tmp_path / 'room')) == dataset_digest(noisy_world)

    def test_regenerated_from_echoed_spec(self, noisy_world, tmp_path):
        """Test that the world spec stored with a dataset regenerates the same dataset."""
        save_dataset(noisy_world, tmp_path / 'room')
        loaded = load_dataset(tmp_path / 'room')

        assert dataset_digest(generate(loaded.spec)) == dataset_digest(loaded)

    def test_missing_imu_file(self, noisy_world, tmp_path):
        """Test that a dataset without its IMU table raises CorruptRecord naming the file."""
        root = save_dataset(noisy_world, tmp_path / 'room')
        (root / 'imu.txt').unlink()

        with pytest.raises(CorruptRecord) as excinfo:
            load_dataset(root)

        assert excinfo.value.source == 'imu.txt'

    def test_truncated_observations(self, noisy_world, tmp_path):
        """Test that a truncated observation table is reported as corrupt."""
        root = save_dataset(noisy_world, tmp_path / 'room')
        path = root / 'observations.txt'
        lines = path.read_text().splitlines()
        path.write_text('\n'.join(lines[:-5]) + '\n')

        with pytest.raises(CorruptRecord) as excinfo:
            load_dataset(root)

        assert excinfo.value.source == 'observations.txt'

    def test_major_version_mismatch(self, noisy_world, tmp_path):
        """Test that a metadata document from another major version is refused."""
        root = save_dataset(noisy_world, tmp_path / 'room')
        metadata = json.loads((root / 'metadata.json').read_text())
        metadata['version'] = '2.0'
        (root / 'metadata.json').write_text(json.dumps(metadata))

        with pytest.raises(VersionMismatch):
            load_dataset(root)

    def test_dangling_observation_reference(self, noisy_world, tmp_path):
        """Test that an observation of an unknown landmark is rejected."""
        root = save_dataset(noisy_world, tmp_path / 'room')
        path = root / 'observations.txt'
        lines = path.read_text().splitlines()
        fields = lines[3].split()
        fields[1] = '999999'
        lines[3] = ' '.join(fields)
        path.write_text('\n'.join(lines) + '\n')

        with pytest.raises(CorruptRecord) as excinfo:
            load_dataset(root)

        assert excinfo.value.index == 0


@pytest.mark.integration
class TestMapStorage:
    """Test map snapshots."""

    def test_save_load_save_is_byte_identical(self, clean_map, tmp_path):
        """Test that saving a loaded snapshot reproduces the same files."""
        inventory = factor_inventory(clean_map, 'VIP')
        save_map(MapSnapshot.from_map(clean_map, inventory), tmp_path / 'a')

        save_map(load_map(tmp_path / 'a'), tmp_path / 'b')

        assert directory_bytes(tmp_path / 'a') == directory_bytes(tmp_path / 'b')

    def test_npz_save_load_save_is_identical(self, clean_map, tmp_path):
        """Test that the binary snapshot format is stable across a reload."""
        save_map(clean_map, tmp_path / 'a', fmt='npz')
        snapshot = load_map(tmp_path / 'a')
        save_map(snapshot, tmp_path / 'b', fmt='npz')

        again = load_map(tmp_path / 'b')
        for table, columns in snapshot.tables().items():
            for name, values in columns.items():
                assert np.asarray(again.tables()[table][name]).tolist() == np.asarray(values).tolist(), name

    def test_snapshot_restores_map(self, clean_map, tmp_path):
        """Test that a reloaded snapshot restores poses, landmarks and plane membership."""
        save_map(clean_map, tmp_path / 'map')

        restored = load_map(tmp_path / 'map').to_map()

        assert sorted(restored.planes) == sorted(clean_map.planes)
        for plane_id, plane in clean_map.planes.items():
            assert restored.planes[plane_id].members == plane.members
            assert restored.planes[plane_id].plane.same_as(plane.plane, atol=0.0)
        for k, kf in clean_map.keyframes.items():
            assert restored.keyframes[k].pose.translation.tolist() == kf.pose.translation.tolist()
        for i, lm in clean_map.landmarks.items():
            assert restored.landmarks[i].position.tolist() == lm.position.tolist()
            assert restored.landmarks[i].plane_id == lm.plane_id

    def test_inventory_is_stored(self, clean_map, tmp_path):
        """Test that the factor inventory comes back with the snapshot."""
        inventory = factor_inventory(clean_map, 'VI_CP')
        save_map(MapSnapshot.from_map(clean_map, inventory), tmp_path / 'map')

        assert load_map(tmp_path / 'map').factor_counts() == inventory

    def test_truncated_member_table(self, clean_map, tmp_path):
        """Test that a truncated membership table raises CorruptRecord naming the record."""
        root = save_map(clean_map, tmp_path / 'map')
        path = root / 'plane_members.txt'
        lines = path.read_text().splitlines()
        count = len(lines) - 3
        path.write_text('\n'.join(lines[:-1]) + '\n')

        with pytest.raises(CorruptRecord) as excinfo:
            load_map(root)

        assert excinfo.value.source == 'plane_members.txt'
        assert excinfo.value.index == count - 1

    def test_dangling_member_reference(self, clean_map, tmp_path):
        """Test that a member naming an unknown plane fails validation."""
        root = save_map(clean_map, tmp_path / 'map')
        path = root / 'plane_members.txt'
        lines = path.read_text().splitlines()
        lines[3] = '999 ' + lines[3].split()[1]
        path.write_text('\n'.join(lines) + '\n')

        with pytest.raises(CorruptRecord):
            load_map(root)


@pytest.mark.unit
class TestResultsAndDocuments:
    """Test result documents and configuration files."""

    def test_results_round_trip(self, tmp_path):
        """Test that saved result rows load back unchanged."""
        rows = [{'variant': 'VIP', 'sum_ms': 12.5, 'rmse_m': None}]

        path = save_results(rows, tmp_path / 'out' / 'results.json')

        assert load_results(path) == rows

    def test_results_kind_is_checked(self, tmp_path):
        """Test that a JSON file that is not a results document is rejected."""
        path = tmp_path / 'other.json'
        path.write_text(json.dumps({'kind': 'something'}))

        with pytest.raises(CorruptRecord):
            load_results(path)

    def test_report_csv_with_short_row(self, tmp_path):
        """Test that a CSV row with missing values is reported with its index."""
        path = tmp_path / 'report.csv'
        path.write_text('variant,seq,sum_ms\nVI,0,1.5\nVIP,0\n')

        with pytest.raises(CorruptRecord) as excinfo:
            load_report_csv(path)

        assert excinfo.value.index == 1

    def test_config_document(self, tmp_path):
        """Test that a YAML document is read as a mapping."""
        path = tmp_path / 'settings.yaml'
        path.write_text('max_iterations: 10\nvariant: VI_CP\n')

        assert load_config_document(path) == {'max_iterations': 10, 'variant': 'VI_CP'}

    def test_config_document_must_be_a_mapping(self, tmp_path):
        """Test that a YAML list is rejected."""
        path = tmp_path / 'settings.yaml'
        path.write_text('- 1\n- 2\n')

        with pytest.raises(ConfigError):
            load_config_document(path)

    def test_world_spec_document(self, tmp_path):
        """Test that a world spec document names a preset and overrides fields."""
        path = tmp_path / 'world.yaml'
        path.write_text('preset: small\nseed: 7\nkeyframes: 12\n')

        spec = load_world_spec(path)

        assert (spec.name, spec.seed, spec.keyframes) == ('room-small', 7, 12)


@pytest.mark.unit
class TestStorageManager:
    """Test storage locations."""

    def test_creates_directories(self, tmp_path):
        """Test that the manager creates its dataset, result and map directories."""
        storage = StorageManager(tmp_path / 'data')

        assert storage.ensure_storage_ready()
        assert storage.dataset_path('room').parent.is_dir()
        assert storage.get_storage_info()['results_dir'] == str(tmp_path / 'data' / 'results')

    def test_reads_data_dir_from_environment(self, tmp_path, monkeypatch):
        """Test that PLANEBA_DATA_DIR sets the default root."""
        monkeypatch.setenv('PLANEBA_DATA_DIR', str(tmp_path / 'env'))

        assert StorageManager().map_path('m') == tmp_path / 'env' / 'maps' / 'm'
