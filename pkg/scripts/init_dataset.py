#!/usr/bin/env python3
"""
PlaneBA Dataset Initialization Script
Generates the standard benchmark datasets into the storage directory
"""
import sys
import os
from pathlib import Path

# Add parent directory to path so we can import from src
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from dotenv import load_dotenv

load_dotenv(Path(__file__).resolve().parent.parent / '.env')

from src.config import load_settings
from src.errors import PlaneBAError
from src.simworld import WorldSpec, generate
from src.storage import dataset_digest, init_storage, load_dataset, save_dataset

PRESET_NAMES = ('full', 'fast', 'small')


def init_datasets(presets=PRESET_NAMES, seed=42):
    """Generate each preset once; existing datasets are verified instead of rebuilt."""

    print("=" * 60)
    print("PlaneBA Dataset Initialization")
    print("=" * 60)

    settings = load_settings()
    storage = init_storage(settings['DATA_DIR'])

    print("\n[1/3] Preparing storage...")
    if not storage.ensure_storage_ready():
        print(f"✗ Storage directory is not writable: {storage.data_dir}")
        return False
    print(f"✓ Storage ready at {storage.data_dir}")

    print("\n[2/3] Generating datasets...")
    paths = {}
    for preset in presets:
        spec = WorldSpec.preset(preset, seed=seed)
        path = storage.dataset_path(f'{spec.name}-{seed}')
        paths[preset] = path
        if (path / 'metadata.json').exists():
            print(f"✓ {path.name} already exists")
            continue
        dataset = generate(spec)
        save_dataset(dataset, path, settings['STORAGE_FORMAT'])
        print(f"✓ {dataset.name}: {len(dataset.keyframes)} keyframes, "
              f"{dataset.planar_count} planar + {dataset.nonplanar_count} non-planar points")

    print("\n[3/3] Verifying datasets...")
    for preset, path in paths.items():
        dataset = load_dataset(path)
        expected = dataset_digest(generate(dataset.spec))
        if dataset_digest(dataset) != expected:
            print(f"✗ {path.name} does not match its spec; delete it and rerun")
            return False
        print(f"✓ {path.name} verified")

    print("\n" + "=" * 60)
    print("Dataset initialization complete!")
    print("=" * 60)
    print("\nRun the ablation with: python -m src.cli ablate --dataset " + str(paths.get('full', '')))
    print("")
    return True


if __name__ == '__main__':
    try:
        success = init_datasets()
        sys.exit(0 if success else 1)
    except PlaneBAError as e:
        print(f"\n✗ Error: {e}")
        sys.exit(1)
