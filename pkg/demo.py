"""
AETomo Demo Script

Runs the toolkit end to end on a desk-scale scene: simulation, classical
sparse inversion, network training and reconstruction, and the
comparison table.
"""

from datetime import datetime
from pathlib import Path

import config
from evaluation import EvalConfig
from generate_sample_configs import write_sample_configs
from geometry import GeometryConfig, SceneSpec
from network import NetworkConfig
from solvers import SolverConfig
from tomo_engine import TomoEngine, print_summary
from training import TrainConfig

DEMO_SCENE = SceneSpec(
    azimuth_count=24,
    range_count=4,
    components=(
        {'type': 'oblique_plane', 'elevation': -15.0, 'azimuth_slope': 0.5,
         'range_slope': 2.0, 'amplitude': 1.0},
        {'type': 'point', 'azimuth': 12, 'range': 1, 'elevation': 30.0, 'amplitude': 0.8},
    ),
)
DEMO_GEOMETRY = GeometryConfig(elevation_bins=64)
DEMO_NETWORK = NetworkConfig(base_channels=4, pre_blocks=4, final_blocks=4)
DEMO_TRAINING = TrainConfig(epochs=5, learning_rate=1e-3, holdout_fraction=0.25, checkpoint_interval=0)


def print_welcome_banner():
    """Display welcome banner."""
    banner = """
    ╔════════════════════════════════════════════════════════════╗
    ║                                                            ║
    ║                     AETOMO DEMO                            ║
    ║        TomoSAR Elevation Reconstruction Toolkit            ║
    ║                                                            ║
    ║     ISTA / FISTA  +  LISTA  +  AETomo-Net (U-Net fusion)   ║
    ║                                                            ║
    ╚════════════════════════════════════════════════════════════╝

    A synthetic multi-baseline X-band acquisition is simulated, then
    reconstructed by per-cell sparse inversion and by the unrolled
    network, and both are scored against the ground truth.

    """
    print(banner)


def run_dir() -> Path:
    return Path('runs') / f"demo_{datetime.now().strftime('%Y%m%d_%H%M%S')}"


def run_classical_demo(engine: TomoEngine, root: Path) -> Path:
    """Simulate the demo scene, solve it with ISTA and FISTA and score both."""
    print("\n" + "="*60)
    print("CLASSICAL SPARSE INVERSION")
    print("="*60)

    sim = root / 'sim'
    print_summary('SIMULATION', engine.simulate(DEMO_GEOMETRY, DEMO_SCENE, 0.05, 0, sim))
    metrics = root / 'metrics.csv'
    for method in ('ista', 'fista'):
        print_summary(method.upper(), engine.solve(sim, SolverConfig(max_iters=500), method, root / method))
        engine.evaluate(root / method, sim, EvalConfig(), metrics)
    return sim


def run_network_demo(engine: TomoEngine, root: Path):
    """Train a tiny AETomo-Net on the demo scene and add it to the table."""
    sim = root / 'sim'
    if not (sim / 'volumes.atsr').exists():
        sim = run_classical_demo(engine, root)

    print("\n" + "="*60)
    print("AETOMO-NET TRAINING")
    print("="*60)
    print_summary('TRAINING', engine.train(sim, DEMO_TRAINING, DEMO_NETWORK, root / 'model'))
    print_summary('RECONSTRUCTION', engine.reconstruct(sim, root / 'model' / 'params.atsr', root / 'aetomo'))
    summary = engine.evaluate(root / 'aetomo', sim, EvalConfig(), root / 'metrics.csv')
    print_summary('COMPARISON TABLE', summary)


def main():
    """Main demo entry point."""
    print_welcome_banner()
    engine = TomoEngine(threads=config.DEFAULT_THREADS)
    root = run_dir()

    while True:
        print("\nSELECT DEMO MODE:")
        print("  1. Classical pipeline (simulate + ISTA/FISTA)")
        print("  2. Network pipeline (train + reconstruct + compare)")
        print("  3. Write sample configs to ./configs")
        print("  4. Exit")

        choice = input("\nEnter choice (1-4): ").strip()

        try:
            if choice == '1':
                run_classical_demo(engine, root)
            elif choice == '2':
                run_network_demo(engine, root)
            elif choice == '3':
                for path in write_sample_configs(config.DEFAULT_CONFIG_DIR):
                    print(f"  ✓ {path}")
            elif choice == '4':
                print("\nThank you for using AETomo!")
                break
            else:
                print("Invalid choice. Please enter 1-4.")
        except Exception as e:
            print(f"\nDemo error: {e}")


if __name__ == "__main__":
    main()
