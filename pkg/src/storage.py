"""
Storage for PlaneBA: datasets, map snapshots, benchmark results and
key-value configuration documents.

Datasets and maps are directories holding a ``metadata.json`` document and
one record table per entity. Tables are line-delimited text by default
(floats written with 17 significant digits, so values survive a round trip
bit for bit) or a single ``tables.npz`` archive when the binary format is
chosen. Layouts are documented in docs/formats/FORMATS.md.

Usage:
    from src.storage import get_storage, save_dataset, load_dataset

    storage = get_storage()
    path = storage.dataset_path('room-42')
    save_dataset(dataset, path)
    dataset = load_dataset(path)
"""

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from src.errors import ConfigError, CorruptRecord, IoFailure, VersionMismatch
from src.geometry import Plane, Pose, Rotation
from src.models import (
    CameraRig, Dataset, ImuStream, KeyframeState, Landmark, LoopPair, MapPlane, ObservationTable,
    SlamMap, WorldPlane,
)

logger = logging.getLogger(__name__)

FORMAT_MAJOR = 1
FORMAT_MINOR = 0
FORMATS = ('text', 'npz')
METADATA_FILE = 'metadata.json'
ARCHIVE_FILE = 'tables.npz'

QUATERNION = ('qw', 'qx', 'qy', 'qz')
TRANSLATION = ('tx', 'ty', 'tz')

# table name -> ordered (field, type); types: i integer, f float, s word
DATASET_TABLES = {
    'keyframes': [('id', 'i'), ('timestamp', 'f'), ('imu_index', 'i')]
                 + [(n, 'f') for n in QUATERNION + TRANSLATION]
                 + [(n, 'f') for n in ('vx', 'vy', 'vz', 'bgx', 'bgy', 'bgz', 'bax', 'bay', 'baz')],
    'landmarks': [('id', 'i'), ('x', 'f'), ('y', 'f'), ('z', 'f'),
                  ('nx', 'f'), ('ny', 'f'), ('nz', 'f'), ('plane_id', 'i')],
    'planes': [('id', 'i'), ('kind', 's'), ('nx', 'f'), ('ny', 'f'), ('nz', 'f'), ('d', 'f'),
               ('cx', 'f'), ('cy', 'f'), ('cz', 'f'), ('ux', 'f'), ('uy', 'f'), ('uz', 'f'),
               ('half_u', 'f'), ('half_v', 'f')],
    'observations': [('keyframe_id', 'i'), ('landmark_id', 'i'), ('x', 'f'), ('y', 'f'), ('depth', 'f')],
    'imu': [('t', 'f'), ('gx', 'f'), ('gy', 'f'), ('gz', 'f'), ('ax', 'f'), ('ay', 'f'), ('az', 'f')],
    'loops': [('frame_m', 'i'), ('frame_n', 'i')] + [(n, 'f') for n in QUATERNION + TRANSLATION],
}

MAP_TABLES = {
    'keyframes': DATASET_TABLES['keyframes'],
    'landmarks': DATASET_TABLES['landmarks'],
    'planes': [('id', 'i'), ('kind', 's'), ('nx', 'f'), ('ny', 'f'), ('nz', 'f'), ('d', 'f'),
               ('anchor_keyframe', 'i')],
    'plane_members': [('plane_id', 'i'), ('landmark_id', 'i')],
    'plane_boundary': [('plane_id', 'i'), ('x', 'f'), ('y', 'f'), ('z', 'f')],
    'inventory': [('factor', 's'), ('count', 'i')],
}

NO_ID = -1


# --- record tables ---

def _format_value(value, kind):
    if kind == 'f':
        return '%.17g' % float(value)
    if kind == 'i':
        return '%d' % int(value)
    return str(value)


def table_text(kind, fields, columns):
    """Render one record table: version header, field line, record count, records."""
    names = [name for name, _ in fields]
    count = len(columns[names[0]]) if names else 0
    out = io.StringIO()
    out.write(f'# planeba-{kind} {FORMAT_MAJOR}.{FORMAT_MINOR}\n')
    out.write('# fields: ' + ' '.join(names) + '\n')
    out.write(f'# records: {count}\n')
    for row in range(count):
        out.write(' '.join(_format_value(columns[name][row], t) for name, t in fields) + '\n')
    return out.getvalue()


def _check_version(source, text):
    try:
        major, minor = (int(part) for part in text.split('.'))
    except ValueError:
        raise CorruptRecord(source, 0, f"unreadable version {text!r}")
    if major != FORMAT_MAJOR:
        raise VersionMismatch(f"{source}: format version {major}.{minor}, expected {FORMAT_MAJOR}.x")
    return major, minor


def parse_table(source, kind, fields, text):
    """
    Parse a record table written by ``table_text``.

    Raises:
        VersionMismatch: unknown major version
        CorruptRecord: bad header, wrong field list, malformed or missing record
    """
    lines = text.splitlines()
    if len(lines) < 3:
        raise CorruptRecord(source, 0, "truncated header")
    head = lines[0].split()
    if len(head) != 3 or head[0] != '#' or head[1] != f'planeba-{kind}':
        raise CorruptRecord(source, 0, f"expected a planeba-{kind} header")
    _check_version(source, head[2])
    names = [name for name, _ in fields]
    if lines[1].split()[2:] != names or not lines[1].startswith('# fields:'):
        raise CorruptRecord(source, 0, "field list does not match")
    try:
        count = int(lines[2].split(':', 1)[1])
    except (IndexError, ValueError):
        raise CorruptRecord(source, 0, "missing record count")

    records = lines[3:]
    columns = {name: [] for name in names}
    for index, line in enumerate(records):
        values = line.split()
        if len(values) != len(fields):
            raise CorruptRecord(source, index, f"expected {len(fields)} values, got {len(values)}")
        try:
            for (name, t), value in zip(fields, values):
                columns[name].append(int(value) if t == 'i' else float(value) if t == 'f' else value)
        except ValueError as exc:
            raise CorruptRecord(source, index, str(exc))
    if len(records) != count:
        raise CorruptRecord(source, min(len(records), count), f"expected {count} records, found {len(records)}")

    return {
        name: np.array(columns[name], dtype=np.int64 if t == 'i' else float if t == 'f' else object)
        for name, t in fields
    }


def _read_text(path):
    try:
        return Path(path).read_text(encoding='utf-8')
    except FileNotFoundError:
        raise CorruptRecord(Path(path).name, 0, "file is missing")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}")


def _write_text(path, text):
    try:
        Path(path).write_text(text, encoding='utf-8')
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}")


def _write_tables(root, kind, schema, tables, fmt):
    if fmt == 'npz':
        arrays = {'__version__': np.array([FORMAT_MAJOR, FORMAT_MINOR])}
        for table, fields in schema.items():
            for name, t in fields:
                values = tables[table][name]
                arrays[f'{table}/{name}'] = (np.asarray(values, dtype=str) if t == 's'
                                             else np.asarray(values, dtype=np.int64 if t == 'i' else float))
        try:
            with open(root / ARCHIVE_FILE, 'wb') as handle:
                np.savez(handle, **arrays)
        except OSError as exc:
            raise IoFailure(f"cannot write {root / ARCHIVE_FILE}: {exc}")
        return
    for table, fields in schema.items():
        _write_text(root / f'{table}.txt', table_text(f'{kind}-{table}', fields, tables[table]))


def _read_tables(root, kind, schema, fmt):
    if fmt == 'npz':
        path = root / ARCHIVE_FILE
        if not path.exists():
            raise CorruptRecord(ARCHIVE_FILE, 0, "file is missing")
        try:
            with np.load(path, allow_pickle=False) as archive:
                major, minor = archive['__version__'].tolist()
                _check_version(ARCHIVE_FILE, f'{major}.{minor}')
                tables = {}
                for table, fields in schema.items():
                    tables[table] = {}
                    for name, t in fields:
                        key = f'{table}/{name}'
                        if key not in archive:
                            raise CorruptRecord(ARCHIVE_FILE, 0, f"missing column {key}")
                        values = archive[key]
                        tables[table][name] = values.astype(object) if t == 's' else values
        except (OSError, ValueError) as exc:
            raise CorruptRecord(ARCHIVE_FILE, 0, str(exc))
        return tables
    return {
        table: parse_table(f'{table}.txt', f'{kind}-{table}', fields, _read_text(root / f'{table}.txt'))
        for table, fields in schema.items()
    }


def _metadata_text(metadata):
    return json.dumps(metadata, indent=2, sort_keys=True) + '\n'


def _read_metadata(root, kind):
    text = _read_text(root / METADATA_FILE)
    try:
        metadata = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptRecord(METADATA_FILE, 0, f"invalid JSON: {exc.msg}")
    if metadata.get('kind') != kind:
        raise CorruptRecord(METADATA_FILE, 0, f"expected a {kind} directory, found {metadata.get('kind')!r}")
    if 'version' not in metadata:
        raise CorruptRecord(METADATA_FILE, 0, "version is missing")
    _check_version(METADATA_FILE, metadata['version'])
    return metadata


def _prepare_directory(path):
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {root}: {exc}")
    return root


# --- shared record conversions ---

def _rig_document(rig):
    return {
        'fx': rig.fx, 'fy': rig.fy, 'cx': rig.cx, 'cy': rig.cy,
        'width': rig.width, 'height': rig.height,
        'body_to_camera': {
            'quaternion': rig.body_to_camera.rotation.quaternion.tolist(),
            'translation': rig.body_to_camera.translation.tolist(),
        },
    }


def _rig_from_document(doc):
    extrinsics = doc['body_to_camera']
    return CameraRig(
        fx=doc['fx'], fy=doc['fy'], cx=doc['cx'], cy=doc['cy'],
        width=doc['width'], height=doc['height'],
        body_to_camera=Pose(Rotation(extrinsics['quaternion']), extrinsics['translation']),
    )


def _keyframe_columns(keyframes):
    keyframes = sorted(keyframes, key=lambda kf: kf.id)
    q = np.array([kf.pose.rotation.quaternion for kf in keyframes]).reshape(-1, 4)
    t = np.array([kf.pose.translation for kf in keyframes]).reshape(-1, 3)
    motion = np.array([np.concatenate([kf.velocity, kf.gyro_bias, kf.accel_bias])
                       for kf in keyframes]).reshape(-1, 9)
    columns = {
        'id': [kf.id for kf in keyframes],
        'timestamp': [kf.timestamp for kf in keyframes],
        'imu_index': [kf.imu_index for kf in keyframes],
    }
    columns.update({name: q[:, i] for i, name in enumerate(QUATERNION)})
    columns.update({name: t[:, i] for i, name in enumerate(TRANSLATION)})
    for i, name in enumerate(('vx', 'vy', 'vz', 'bgx', 'bgy', 'bgz', 'bax', 'bay', 'baz')):
        columns[name] = motion[:, i]
    return columns


def _stack(columns, names):
    return np.column_stack([np.asarray(columns[n], dtype=float) for n in names]) if len(columns[names[0]]) \
        else np.zeros((0, len(names)))


def _keyframes_from_columns(columns):
    q = _stack(columns, QUATERNION)
    t = _stack(columns, TRANSLATION)
    v = _stack(columns, ('vx', 'vy', 'vz'))
    bg = _stack(columns, ('bgx', 'bgy', 'bgz'))
    ba = _stack(columns, ('bax', 'bay', 'baz'))
    return [
        KeyframeState(
            id=int(columns['id'][i]),
            timestamp=float(columns['timestamp'][i]),
            pose=Pose(Rotation(q[i]), t[i]),
            velocity=v[i].copy(),
            gyro_bias=bg[i].copy(),
            accel_bias=ba[i].copy(),
            imu_index=int(columns['imu_index'][i]),
        )
        for i in range(len(columns['id']))
    ]


def _landmark_columns(landmarks):
    landmarks = sorted(landmarks, key=lambda lm: lm.id)
    p = np.array([lm.position for lm in landmarks]).reshape(-1, 3)
    n = np.array([lm.normal for lm in landmarks]).reshape(-1, 3)
    return {
        'id': [lm.id for lm in landmarks],
        'x': p[:, 0], 'y': p[:, 1], 'z': p[:, 2],
        'nx': n[:, 0], 'ny': n[:, 1], 'nz': n[:, 2],
        'plane_id': [NO_ID if lm.plane_id is None else lm.plane_id for lm in landmarks],
    }


def _landmarks_from_columns(columns):
    p = _stack(columns, ('x', 'y', 'z'))
    n = _stack(columns, ('nx', 'ny', 'nz'))
    return [
        Landmark(int(lm_id), p[i].copy(), n[i].copy(),
                 None if int(columns['plane_id'][i]) == NO_ID else int(columns['plane_id'][i]))
        for i, lm_id in enumerate(columns['id'])
    ]


def _pose_columns(poses):
    q = np.array([pose.rotation.quaternion for pose in poses]).reshape(-1, 4)
    t = np.array([pose.translation for pose in poses]).reshape(-1, 3)
    columns = {name: q[:, i] for i, name in enumerate(QUATERNION)}
    columns.update({name: t[:, i] for i, name in enumerate(TRANSLATION)})
    return columns


def _poses_from_columns(columns):
    q = _stack(columns, QUATERNION)
    t = _stack(columns, TRANSLATION)
    return [Pose(Rotation(q[i]), t[i]) for i in range(len(q))]


# --- datasets ---

def _dataset_tables(dataset):
    planes = sorted(dataset.planes, key=lambda p: p.id)
    loops = list(dataset.loops)
    obs = dataset.observations
    imu = dataset.imu
    tables = {
        'keyframes': _keyframe_columns(dataset.keyframes),
        'landmarks': _landmark_columns(dataset.landmarks),
        'planes': {
            'id': [p.id for p in planes],
            'kind': [p.kind for p in planes],
            'nx': [p.plane.normal[0] for p in planes],
            'ny': [p.plane.normal[1] for p in planes],
            'nz': [p.plane.normal[2] for p in planes],
            'd': [p.plane.distance for p in planes],
            'cx': [p.center[0] for p in planes],
            'cy': [p.center[1] for p in planes],
            'cz': [p.center[2] for p in planes],
            'ux': [p.axis_u[0] for p in planes],
            'uy': [p.axis_u[1] for p in planes],
            'uz': [p.axis_u[2] for p in planes],
            'half_u': [p.half_extents[0] for p in planes],
            'half_v': [p.half_extents[1] for p in planes],
        },
        'observations': {
            'keyframe_id': obs.keyframe_ids, 'landmark_id': obs.landmark_ids,
            'x': obs.points[:, 0], 'y': obs.points[:, 1], 'depth': obs.depths,
        },
        'imu': {
            't': imu.timestamps,
            'gx': imu.gyro[:, 0], 'gy': imu.gyro[:, 1], 'gz': imu.gyro[:, 2],
            'ax': imu.accel[:, 0], 'ay': imu.accel[:, 1], 'az': imu.accel[:, 2],
        },
        'loops': {'frame_m': [p.frame_m for p in loops], 'frame_n': [p.frame_n for p in loops]},
    }
    tables['loops'].update(_pose_columns([p.measured for p in loops]))
    return tables


def _dataset_metadata(dataset, fmt):
    spec = dataset.spec
    return {
        'kind': 'dataset',
        'version': f'{FORMAT_MAJOR}.{FORMAT_MINOR}',
        'format': fmt,
        'name': dataset.name,
        'rig': _rig_document(dataset.rig),
        'gravity': np.asarray(dataset.gravity, dtype=float).tolist(),
        'spec': spec.to_document() if spec is not None else None,
    }


def dataset_digest(dataset):
    """SHA-256 of the dataset's text serialisation; equal digests mean identical bytes on disk."""
    digest = hashlib.sha256()
    digest.update(_metadata_text(_dataset_metadata(dataset, 'text')).encode('utf-8'))
    tables = _dataset_tables(dataset)
    for table, fields in DATASET_TABLES.items():
        digest.update(table_text(f'dataset-{table}', fields, tables[table]).encode('utf-8'))
    return digest.hexdigest()


def save_dataset(dataset, path, fmt='text'):
    """
    Write a dataset directory.

    Args:
        dataset: Dataset
        path: Target directory (created if needed)
        fmt: 'text' or 'npz'

    Raises:
        IoFailure: the directory or a file cannot be written
    """
    if fmt not in FORMATS:
        raise ConfigError(f"storage format must be one of {FORMATS}, got {fmt!r}")
    root = _prepare_directory(path)
    _write_text(root / METADATA_FILE, _metadata_text(_dataset_metadata(dataset, fmt)))
    _write_tables(root, 'dataset', DATASET_TABLES, _dataset_tables(dataset), fmt)
    logger.info(f"Dataset saved: {dataset.name} -> {root} ({fmt})")
    return root


def load_dataset(path):
    """
    Read a dataset directory written by ``save_dataset``.

    Raises:
        VersionMismatch: unsupported major version
        CorruptRecord: missing file or malformed record (names file and record index)
    """
    from src.simworld import WorldSpec

    root = Path(path)
    metadata = _read_metadata(root, 'dataset')
    tables = _read_tables(root, 'dataset', DATASET_TABLES, metadata.get('format', 'text'))

    p = tables['planes']
    planes = [
        WorldPlane(
            id=int(p['id'][i]),
            plane=Plane([p['nx'][i], p['ny'][i], p['nz'][i]], p['d'][i]),
            kind=str(p['kind'][i]),
            center=np.array([p['cx'][i], p['cy'][i], p['cz'][i]]),
            axis_u=np.array([p['ux'][i], p['uy'][i], p['uz'][i]]),
            half_extents=(float(p['half_u'][i]), float(p['half_v'][i])),
        )
        for i in range(len(p['id']))
    ]
    landmarks = _landmarks_from_columns(tables['landmarks'])
    keyframes = _keyframes_from_columns(tables['keyframes'])

    o = tables['observations']
    _check_references('observations.txt', o['keyframe_id'], {kf.id for kf in keyframes})
    _check_references('observations.txt', o['landmark_id'], {lm.id for lm in landmarks})
    observations = ObservationTable(o['keyframe_id'], o['landmark_id'],
                                    _stack(o, ('x', 'y')), o['depth'])
    m = tables['imu']
    try:
        imu = ImuStream(m['t'], _stack(m, ('gx', 'gy', 'gz')), _stack(m, ('ax', 'ay', 'az')))
    except ValueError as exc:
        raise CorruptRecord('imu.txt', 0, str(exc))
    loop_table = tables['loops']
    loops = [
        LoopPair(int(loop_table['frame_m'][i]), int(loop_table['frame_n'][i]), pose)
        for i, pose in enumerate(_poses_from_columns(loop_table))
    ]

    spec = WorldSpec.from_document(metadata['spec']) if metadata.get('spec') else None
    dataset = Dataset(
        name=metadata['name'],
        spec=spec,
        rig=_rig_from_document(metadata['rig']),
        gravity=np.array(metadata['gravity'], dtype=float),
        keyframes=keyframes,
        planes=planes,
        landmarks=landmarks,
        observations=observations,
        imu=imu,
        loops=loops,
    )
    logger.info(f"Dataset loaded: {dataset.name} from {root}")
    return dataset


def _check_references(source, ids, known):
    for index, value in enumerate(np.asarray(ids).tolist()):
        if value not in known:
            raise CorruptRecord(source, index, f"unknown id {value}")


# --- map snapshots ---

@dataclass
class MapSnapshot:
    """
    Column records of a map: keyframe states, landmarks with plane
    membership, plane records and the factor inventory of the problem the
    map would produce. Values are kept exactly as stored so that loading
    and saving again reproduces the same bytes.
    """
    version: str
    keyframes: dict
    landmarks: dict
    planes: dict
    plane_members: dict
    plane_boundary: dict
    inventory: dict = field(default_factory=dict)
    rig: Optional[dict] = None
    gravity: Optional[list] = None

    @classmethod
    def from_map(cls, slam_map, inventory=None):
        planes = [slam_map.planes[k] for k in sorted(slam_map.planes)]
        members = [(p.id, lm) for p in planes for lm in sorted(p.members)]
        boundary = [(p.id, point) for p in planes for point in np.asarray(p.boundary).reshape(-1, 3)]
        inventory = dict(sorted((inventory or {}).items()))
        return cls(
            version=f'{FORMAT_MAJOR}.{FORMAT_MINOR}',
            keyframes=_keyframe_columns(slam_map.keyframes.values()),
            landmarks=_landmark_columns(slam_map.landmarks.values()),
            planes={
                'id': [p.id for p in planes],
                'kind': [p.kind for p in planes],
                'nx': [p.plane.normal[0] for p in planes],
                'ny': [p.plane.normal[1] for p in planes],
                'nz': [p.plane.normal[2] for p in planes],
                'd': [p.plane.distance for p in planes],
                'anchor_keyframe': [NO_ID if p.anchor_keyframe is None else p.anchor_keyframe for p in planes],
            },
            plane_members={'plane_id': [m[0] for m in members], 'landmark_id': [m[1] for m in members]},
            plane_boundary={
                'plane_id': [b[0] for b in boundary],
                'x': [b[1][0] for b in boundary],
                'y': [b[1][1] for b in boundary],
                'z': [b[1][2] for b in boundary],
            },
            inventory={'factor': list(inventory), 'count': list(inventory.values())},
            rig=_rig_document(slam_map.rig),
            gravity=np.asarray(slam_map.gravity, dtype=float).tolist(),
        )

    def tables(self):
        return {
            'keyframes': self.keyframes,
            'landmarks': self.landmarks,
            'planes': self.planes,
            'plane_members': self.plane_members,
            'plane_boundary': self.plane_boundary,
            'inventory': self.inventory,
        }

    def factor_counts(self):
        return {str(k): int(v) for k, v in zip(self.inventory['factor'], self.inventory['count'])}

    def validate(self):
        """
        Check referential integrity.

        Raises:
            CorruptRecord: a member, boundary or landmark record names an unknown id
        """
        landmark_ids = set(np.asarray(self.landmarks['id']).tolist())
        plane_ids = set(np.asarray(self.planes['id']).tolist())
        _check_references('plane_members.txt', self.plane_members['plane_id'], plane_ids)
        _check_references('plane_members.txt', self.plane_members['landmark_id'], landmark_ids)
        _check_references('plane_boundary.txt', self.plane_boundary['plane_id'], plane_ids)
        _check_references('landmarks.txt', [p for p in np.asarray(self.landmarks['plane_id']).tolist()
                                            if p != NO_ID], plane_ids)
        keyframe_ids = set(np.asarray(self.keyframes['id']).tolist())
        _check_references('planes.txt', [a for a in np.asarray(self.planes['anchor_keyframe']).tolist()
                                         if a != NO_ID], keyframe_ids)

    def to_map(self):
        """Rebuild a SlamMap without observations; plane point sets are refilled once observations are attached."""
        rig = _rig_from_document(self.rig) if self.rig else CameraRig()
        slam_map = SlamMap(
            rig=rig,
            gravity=np.array(self.gravity if self.gravity is not None else [0.0, 0.0, -9.81]),
            keyframes={kf.id: kf for kf in _keyframes_from_columns(self.keyframes)},
            landmarks={lm.id: lm for lm in _landmarks_from_columns(self.landmarks)},
            observations=ObservationTable.empty(),
        )
        members = {}
        for plane_id, landmark_id in zip(self.plane_members['plane_id'], self.plane_members['landmark_id']):
            members.setdefault(int(plane_id), set()).add(int(landmark_id))
        boundary_ids = np.asarray(self.plane_boundary['plane_id'], dtype=np.int64)
        boundary = _stack(self.plane_boundary, ('x', 'y', 'z'))
        p = self.planes
        for i, plane_id in enumerate(np.asarray(p['id']).tolist()):
            anchor = int(p['anchor_keyframe'][i])
            slam_map.planes[plane_id] = MapPlane(
                id=plane_id,
                plane=Plane([p['nx'][i], p['ny'][i], p['nz'][i]], p['d'][i]),
                kind=str(p['kind'][i]),
                members=members.get(plane_id, set()),
                boundary=boundary[boundary_ids == plane_id],
                anchor_keyframe=None if anchor == NO_ID else anchor,
            )
        slam_map.next_plane_id = max(slam_map.planes, default=-1) + 1
        return slam_map


def save_map(snapshot, path, fmt='text'):
    """
    Write a map snapshot directory. ``snapshot`` may be a MapSnapshot or a SlamMap.

    Raises:
        IoFailure: the directory or a file cannot be written
    """
    if isinstance(snapshot, SlamMap):
        snapshot = MapSnapshot.from_map(snapshot)
    if fmt not in FORMATS:
        raise ConfigError(f"storage format must be one of {FORMATS}, got {fmt!r}")
    root = _prepare_directory(path)
    metadata = {
        'kind': 'map',
        'version': snapshot.version,
        'format': fmt,
        'rig': snapshot.rig,
        'gravity': snapshot.gravity,
    }
    _write_text(root / METADATA_FILE, _metadata_text(metadata))
    _write_tables(root, 'map', MAP_TABLES, snapshot.tables(), fmt)
    logger.info(f"Map snapshot saved: {root} ({fmt})")
    return root


def load_map(path):
    """
    Read a map snapshot directory.

    Raises:
        VersionMismatch: unsupported major version
        CorruptRecord: missing file, malformed record or dangling reference
    """
    root = Path(path)
    metadata = _read_metadata(root, 'map')
    tables = _read_tables(root, 'map', MAP_TABLES, metadata.get('format', 'text'))
    snapshot = MapSnapshot(
        version=metadata['version'],
        rig=metadata.get('rig'),
        gravity=metadata.get('gravity'),
        **tables,
    )
    snapshot.validate()
    return snapshot


# --- results and documents ---

def save_results(rows, path):
    """Write benchmark result rows (list of dicts) as a versioned JSON document."""
    document = {'kind': 'results', 'version': f'{FORMAT_MAJOR}.{FORMAT_MINOR}', 'rows': list(rows)}
    path = Path(path)
    _prepare_directory(path.parent)
    _write_text(path, json.dumps(document, indent=2, sort_keys=True) + '\n')
    return path


def load_results(path):
    """
    Read result rows from a ``save_results`` JSON document or a report CSV.

    Raises:
        VersionMismatch, CorruptRecord
    """
    path = Path(path)
    if path.suffix == '.csv':
        return load_report_csv(path)
    text = _read_text(path)
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptRecord(path.name, 0, f"invalid JSON: {exc.msg}")
    if not isinstance(document, dict) or document.get('kind') != 'results':
        raise CorruptRecord(path.name, 0, "not a results document")
    _check_version(path.name, document.get('version', ''))
    return document['rows']


REPORT_INTEGER_FIELDS = ('seq', 'iters', 'keyframes', 'planar_points', 'nonplanar_points', 'planes',
                         'state_dim', 'repetition')
REPORT_TEXT_FIELDS = ('variant', 'dataset', 'termination', 'error')


def load_report_csv(path):
    """
    Parse a report CSV back into rows. Floats are read with ``float`` so
    values written with 17 significant digits come back bit-equal.

    Raises:
        CorruptRecord: a row with the wrong number of values or an unparsable number
    """
    text = _read_text(path)
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for index, raw in enumerate(reader):
        if None in raw or any(value is None for value in raw.values()):
            raise CorruptRecord(Path(path).name, index, "wrong number of values")
        row = {}
        try:
            for key, value in raw.items():
                if key in REPORT_TEXT_FIELDS:
                    row[key] = value
                elif value == '':
                    row[key] = None
                elif key in REPORT_INTEGER_FIELDS:
                    row[key] = int(value)
                else:
                    row[key] = float(value)
        except ValueError as exc:
            raise CorruptRecord(Path(path).name, index, str(exc))
        rows.append(row)
    return rows


def load_config_document(path):
    """
    Read a YAML (or JSON) key-value document.

    Raises:
        IoFailure: file cannot be read
        ConfigError: not a mapping or not valid YAML
    """
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}")
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}")
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: expected a key-value document")
    return document


def load_world_spec(path):
    """WorldSpec from a YAML document, e.g. ``{preset: small, seed: 7}``."""
    from src.simworld import WorldSpec

    return WorldSpec.from_document(load_config_document(path))


# --- storage locations ---

class StorageManager:
    """
    Locations for generated datasets and benchmark results.

    Environment variables used:
        PLANEBA_DATA_DIR: root directory (default: ./data)
    """

    def __init__(self, data_dir=None):
        self.data_dir = Path(data_dir or os.environ.get('PLANEBA_DATA_DIR', 'data'))
        self.datasets_dir = self.data_dir / 'datasets'
        self.results_dir = self.data_dir / 'results'
        self.maps_dir = self.data_dir / 'maps'

    def _ensure_directories_exist(self):
        for path in (self.datasets_dir, self.results_dir, self.maps_dir):
            try:
                path.mkdir(parents=True, exist_ok=True)
                logger.debug(f"Ensured directory exists: {path}")
            except OSError as e:
                logger.warning(f"Could not create directory {path}: {e}")

    def dataset_path(self, name):
        return self.datasets_dir / name

    def results_path(self, name):
        return self.results_dir / name

    def map_path(self, name):
        return self.maps_dir / name

    def ensure_storage_ready(self) -> bool:
        """Create the directory tree; True if every directory is usable."""
        self._ensure_directories_exist()
        for path in (self.datasets_dir, self.results_dir, self.maps_dir):
            if not path.is_dir() or not os.access(path, os.W_OK):
                logger.error(f"Storage path is not a writable directory: {path}")
                return False
        return True

    def get_storage_info(self) -> dict:
        return {
            'data_dir': str(self.data_dir),
            'datasets_dir': str(self.datasets_dir),
            'results_dir': str(self.results_dir),
            'maps_dir': str(self.maps_dir),
        }


# Singleton instance
_storage_instance: Optional[StorageManager] = None


def get_storage() -> StorageManager:
    """Get the global StorageManager instance."""
    global _storage_instance
    if _storage_instance is None:
        _storage_instance = StorageManager()
    return _storage_instance


def init_storage(data_dir=None) -> StorageManager:
    """Initialize or reinitialize the global storage manager."""
    global _storage_instance
    _storage_instance = StorageManager(data_dir)
    return _storage_instance
