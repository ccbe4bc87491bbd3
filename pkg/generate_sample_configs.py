"""
Generate the sample JSON configs.

Writes geometry.json, scene.json, solver.json, network.json, train.json and
eval.json holding the toolkit defaults, plus a desk-scale scene: an oblique
ground plane with a two-scatterer facade and an isolated point.
"""

import sys
from pathlib import Path

import config
from evaluation import EvalConfig
from file_formats import write_json
from geometry import GeometryConfig, SceneSpec
from network import NetworkConfig
from solvers import SolverConfig
from training import TrainConfig

SAMPLE_SCENE = SceneSpec(
    azimuth_count=config.SLICE_WIDTH,
    range_count=8,
    components=(
        {'type': 'oblique_plane', 'elevation': -20.0, 'azimuth_slope': 0.2,
         'range_slope': 1.0, 'amplitude': 1.0},
        {'type': 'two_point', 'azimuth': 30, 'range': 2, 'elevations': [20.0, 35.0],
         'amplitudes': [0.8, 0.6]},
        {'type': 'point', 'azimuth': 70, 'range': 5, 'elevation': 40.0, 'amplitude': 0.9},
    ),
)


def write_sample_configs(directory) -> list:
    """Write every sample config into `directory`; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    documents = {
        'geometry.json': GeometryConfig().to_dict(),
        'scene.json': SAMPLE_SCENE.to_dict(),
        'solver.json': SolverConfig().to_dict(),
        'network.json': NetworkConfig().to_dict(),
        'train.json': TrainConfig().to_dict(),
        'eval.json': EvalConfig().to_dict(),
    }
    return [write_json(directory / name, document) for name, document in documents.items()]


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else config.DEFAULT_CONFIG_DIR
    print("Generating sample configs...")
    written = write_sample_configs(target)
    for path in written:
        print(f"  ✓ {path}")
    print(f"\nNow simulate a scene with:")
    print(f"  python tomo_engine.py simulate --out runs/sim")
