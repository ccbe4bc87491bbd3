"""
AETomo Engine - Command-Line Pipeline

Ties the toolkit together:

    simulate -> solve (ISTA/FISTA) ----------------> evaluate -> export
             -> train -> reconstruct (AETomo-Net) ->

Every command writes its outputs plus a manifest.json that is enough to
re-run it (`rerun`). Failures print one line `error: <category>: <message>`
and exit with the category's code.
"""

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import Dict, Optional

import numpy as np

import config
import file_formats as ff
from errors import ArchiveError, InvalidParameterError, MissingInputError, ShapeError, TomoError
from evaluation import EvalConfig, evaluate, extract_point_cloud, truth_point_cloud
from exporters import (
    append_metrics_csv,
    azimuth_slice,
    read_ply,
    view_projection,
    with_height,
    write_cloud_csv,
    write_heatmap,
    write_history_csv,
    write_ply,
    write_xyz,
)
from geometry import (
    GeometryConfig,
    GroundTruthVolume,
    ObservationVolume,
    SceneSpec,
    generate_scene,
    synthesize_observation,
)
from network import NetworkConfig, init_params, reconstruct_volume
from solvers import SOLVER_METHODS, SolverConfig, solve_volume
from training import TrainConfig, make_slices, split_holdout, train

logger = logging.getLogger(__name__)

VOLUMES_ARCHIVE = 'volumes.atsr'
RECON_ARCHIVE = 'recon.atsr'
PARAMS_ARCHIVE = 'params.atsr'
HISTORY_CSV = 'history.csv'
CHECKPOINT_DIR = 'checkpoints'
EXPORT_FORMATS = ('xyz', 'ply', 'pgm-heatmap', 'csv')

CONFIG_TYPES = {
    'geometry': GeometryConfig,
    'scene': SceneSpec,
    'solver': SolverConfig,
    'train': TrainConfig,
    'network': NetworkConfig,
    'eval': EvalConfig,
}


def _prepare_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tensor(tensors: Dict[str, np.ndarray], name: str, source) -> np.ndarray:
    if name not in tensors:
        raise ArchiveError(f"{source}: archive lacks tensor {name!r} (has {sorted(tensors)})")
    return tensors[name]


def _dir_geometry(directory) -> GeometryConfig:
    """Geometry recorded in a directory's manifest."""
    manifest = ff.read_manifest(directory)
    document = manifest.get('geometry', manifest['configs'].get('geometry'))
    if document is None:
        raise ArchiveError(f"{directory}: manifest records no geometry")
    return GeometryConfig.from_dict(document)


def _load_observations(obs_dir) -> np.ndarray:
    path = Path(obs_dir) / VOLUMES_ARCHIVE
    return _tensor(ff.read_archive(path), 'obs', path)


class TomoEngine:
    """
    Runs the toolkit commands with a fixed thread count and progress setting.

    Each command takes resolved config objects, writes its artifacts and
    manifest under `out`, and returns a summary dict for printing.
    """

    def __init__(self, threads: int = config.DEFAULT_THREADS, progress: bool = config.SHOW_PROGRESS):
        if threads < 1:
            raise InvalidParameterError(f"threads must be >= 1, got {threads}")
        self.threads = threads
        self.progress = progress

    def simulate(self, geometry: GeometryConfig, scene: SceneSpec, noise_sigma: float,
                 seed: int, out) -> Dict:
        out = _prepare_out(out)
        R = geometry.measurement_matrix()
        truth = generate_scene(scene, geometry.grid())
        obs = synthesize_observation(R, truth, noise_sigma, seed, self.threads)
        ff.write_archive(out / VOLUMES_ARCHIVE, {'truth': truth.reflectivity, 'obs': obs.data})
        ff.write_manifest(out, ff.build_manifest(
            'simulate',
            inputs={'noise_sigma': noise_sigma, 'seed': seed},
            configs={'geometry': geometry.to_dict(), 'scene': scene.to_dict()},
            seeds={'noise': seed},
            outputs={'volumes': VOLUMES_ARCHIVE},
            geometry=geometry.to_dict(),
        ))
        return {
            'Truth volume': truth.reflectivity.shape,
            'Observation volume': obs.data.shape,
            'Scatterers': int(np.count_nonzero(truth.reflectivity)),
            'Noise sigma': noise_sigma,
            'Output': out / VOLUMES_ARCHIVE,
        }

    def solve(self, obs_dir, solver: SolverConfig, method: str, out) -> Dict:
        out = _prepare_out(out)
        geometry = _dir_geometry(obs_dir)
        R = geometry.measurement_matrix()
        data = _load_observations(obs_dir)

        start = time.perf_counter()
        volume = solve_volume(R, ObservationVolume(data, 0.0, 0), solver, method,
                              self.threads, self.progress)
        elapsed = time.perf_counter() - start

        ff.write_archive(out / RECON_ARCHIVE, {'recon': volume})
        ff.write_manifest(out, ff.build_manifest(
            'solve',
            inputs={'obs_dir': str(obs_dir), 'method': method},
            configs={'solver': solver.to_dict()},
            seeds={},
            outputs={'recon': RECON_ARCHIVE},
            geometry=geometry.to_dict(),
            method=method,
            timing={'wall_time_seconds': elapsed},
        ))
        return {'Method': method.upper(), 'Volume': volume.shape,
                'Wall time': f"{elapsed:.2f} s", 'Output': out / RECON_ARCHIVE}

    def train(self, dataset_dir, train_cfg: TrainConfig, network: NetworkConfig, out,
              resume: Optional[str] = None) -> Dict:
        out = _prepare_out(out)
        geometry = _dir_geometry(dataset_dir)
        R = geometry.measurement_matrix()
        path = Path(dataset_dir) / VOLUMES_ARCHIVE
        volumes = ff.read_archive(path)
        truth = _truth_volume(_tensor(volumes, 'truth', path), geometry)
        obs = ObservationVolume(_tensor(volumes, 'obs', path), 0.0, 0)
        dataset = make_slices(truth, obs, {'dataset_dir': str(dataset_dir)})
        train_set, holdout = split_holdout(dataset, train_cfg.holdout_fraction, train_cfg.seed)

        if resume is not None:
            params, start_epoch, optimizer_state = ff.load_checkpoint(resume)
            if (params.n_baselines, params.n_bins) != R.shape:
                raise ShapeError(
                    f"checkpoint built for {params.n_baselines} x {params.n_bins}, dataset geometry is {R.shape}"
                )
            network = params.network
        else:
            params = init_params(R, network.base_channels, network.pre_blocks, network.final_blocks,
                                 network.seed, network.theta_init, network.variant)
            start_epoch, optimizer_state = 0, None

        checkpoint_dir = out / CHECKPOINT_DIR
        latest = {'epoch': start_epoch, 'optim': optimizer_state}

        def on_checkpoint(epoch, current, optimizer):
            latest['epoch'], latest['optim'] = epoch, optimizer.state_dict()
            checkpoint_dir.mkdir(exist_ok=True)
            ff.save_checkpoint(checkpoint_dir / f"epoch_{epoch:04d}.atsr", current, epoch, latest['optim'])

        trained, history = train(train_set, params, train_cfg, holdout, start_epoch,
                                 optimizer_state, on_checkpoint, self.progress)
        ff.save_checkpoint(out / PARAMS_ARCHIVE, trained, latest['epoch'], latest['optim'])
        write_history_csv(history, out / HISTORY_CSV, append=resume is not None)

        ff.write_manifest(out, ff.build_manifest(
            'train',
            inputs={'dataset_dir': str(dataset_dir), 'resume': resume},
            configs={'train': train_cfg.to_dict(), 'network': network.to_dict()},
            seeds={'network': network.seed, 'train': train_cfg.seed},
            outputs={'params': PARAMS_ARCHIVE, 'history': HISTORY_CSV},
            geometry=geometry.to_dict(),
            dims={'M': R.shape[0], 'N': R.shape[1], 'N_s': truth.azimuth_count,
                  'C0': network.base_channels, 'N1': network.pre_blocks, 'N2': network.final_blocks},
            parameter_count=trained.parameter_count(),
        ))
        summary = {
            'Variant': network.variant,
            'Parameters': f"{trained.parameter_count():,}",
            'Slices (train / holdout)': f"{len(train_set)} / {len(holdout)}",
            'Epochs': f"{start_epoch} -> {train_cfg.epochs}",
            'Output': out / PARAMS_ARCHIVE,
        }
        if history:
            summary['Final loss'] = f"{history[-1]['total']:.6g}"
        return summary

    def reconstruct(self, obs_dir, checkpoint, out) -> Dict:
        out = _prepare_out(out)
        geometry = _dir_geometry(obs_dir)
        params, epoch, _ = ff.load_checkpoint(checkpoint)
        data = _load_observations(obs_dir)

        start = time.perf_counter()
        volume = reconstruct_volume(params, data, self.threads, self.progress)
        elapsed = time.perf_counter() - start

        ff.write_archive(out / RECON_ARCHIVE, {'recon': volume})
        ff.write_manifest(out, ff.build_manifest(
            'reconstruct',
            inputs={'obs_dir': str(obs_dir), 'checkpoint': str(checkpoint)},
            configs={},
            seeds={},
            outputs={'recon': RECON_ARCHIVE},
            geometry=geometry.to_dict(),
            method=params.variant,
            checkpoint_epoch=epoch,
            timing={'wall_time_seconds': elapsed},
        ))
        return {'Model': f"{params.variant} (epoch {epoch})", 'Volume': volume.shape,
                'Wall time': f"{elapsed:.2f} s", 'Output': out / RECON_ARCHIVE}

    def evaluate(self, recon_dir, truth_dir, eval_cfg: EvalConfig, out,
                 method: Optional[str] = None) -> Dict:
        truth_path = Path(truth_dir) / VOLUMES_ARCHIVE
        recon_path = Path(recon_dir) / RECON_ARCHIVE
        for path in (truth_path, recon_path):
            if not path.exists():
                raise MissingInputError(f"{path}: no such file")
        geometry = _dir_geometry(truth_dir)
        recon_manifest = ff.read_manifest(recon_dir)
        label = method or recon_manifest.get('method', Path(recon_dir).name)
        wall_time = recon_manifest.get('timing', {}).get('wall_time_seconds', 0.0)

        metrics = evaluate(
            _tensor(ff.read_archive(recon_path), 'recon', recon_path),
            _tensor(ff.read_archive(truth_path), 'truth', truth_path),
            geometry.grid(), eval_cfg, wall_time, label,
        )
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        table = append_metrics_csv(metrics, out)
        ff.write_json(out.with_name(out.stem + '.manifest.json'), ff.build_manifest(
            'evaluate',
            inputs={'recon_dir': str(recon_dir), 'truth_dir': str(truth_dir), 'method': method},
            configs={'eval': eval_cfg.to_dict()},
            seeds={},
            outputs={'metrics': out.name},
            geometry=geometry.to_dict(),
        ))
        return {'table': table, 'Output': out}

    def export(self, source, fmt: str, out, tensor: Optional[str] = None, range_index: int = 0,
               view: Optional[str] = None, height: bool = False, eval_cfg: EvalConfig = EvalConfig(),
               geometry: Optional[GeometryConfig] = None) -> Dict:
        if fmt not in EXPORT_FORMATS:
            raise InvalidParameterError(f"unknown format {fmt!r}; expected one of {EXPORT_FORMATS}")
        source = Path(source)
        if not source.exists():
            raise MissingInputError(f"{source}: no such file or directory")
        out = _prepare_out(out)

        if source.suffix == '.ply':
            if fmt == 'pgm-heatmap':
                raise InvalidParameterError("heatmaps need a volume, not a point cloud")
            cloud, stem, geometry = read_ply(source), source.stem, geometry or GeometryConfig()
            written = self._write_cloud(cloud, fmt, out / stem, height, geometry)
        else:
            archive = source if source.is_file() else source / (
                RECON_ARCHIVE if (source / RECON_ARCHIVE).exists() else VOLUMES_ARCHIVE)
            manifest_dir = archive.parent
            if geometry is None:
                geometry = (_dir_geometry(manifest_dir) if (manifest_dir / ff.MANIFEST_NAME).exists()
                            else GeometryConfig())
            tensors = ff.read_archive(archive)
            name = tensor or ('recon' if 'recon' in tensors else 'truth')
            volume = _tensor(tensors, name, archive)
            grid = geometry.grid()
            if volume.ndim != 3 or volume.shape[0] != grid.n_bins:
                raise ShapeError(f"tensor {name!r} of shape {volume.shape} is not an elevation volume")

            if fmt == 'pgm-heatmap':
                if view is not None:
                    image, stem = view_projection(volume, view), f"{name}_{view}"
                else:
                    image, stem = azimuth_slice(volume, range_index), f"{name}_range{range_index}"
                written = write_heatmap(image, out / stem)
            else:
                if name == 'truth':
                    cloud = truth_point_cloud(volume, grid, eval_cfg.azimuth_spacing, eval_cfg.range_spacing)
                else:
                    cloud = extract_point_cloud(volume, grid, eval_cfg.threshold_rel,
                                                eval_cfg.azimuth_spacing, eval_cfg.range_spacing)
                written = self._write_cloud(cloud, fmt, out / name, height, geometry)

        ff.write_manifest(out, ff.build_manifest(
            'export',
            inputs={'source': str(source), 'fmt': fmt, 'tensor': tensor, 'range_index': range_index,
                    'view': view, 'height': height},
            configs={'eval': eval_cfg.to_dict(), 'geometry': geometry.to_dict()},
            seeds={},
            outputs={'files': [p.name for p in written]},
        ))
        return {'Format': fmt, 'Files': ', '.join(p.name for p in written), 'Output': out}

    @staticmethod
    def _write_cloud(cloud, fmt: str, stem: Path, height: bool, geometry: GeometryConfig):
        if height:
            cloud = with_height(cloud, geometry.incidence_deg)
        writer = {'xyz': write_xyz, 'ply': write_ply, 'csv': write_cloud_csv}[fmt]
        return [writer(cloud, stem.with_suffix(f'.{fmt}'))]

    def rerun(self, manifest_path, out) -> Dict:
        """Re-execute the command recorded in a manifest with its recorded inputs."""
        manifest = ff.read_manifest(manifest_path)
        command = manifest['command']
        if command not in RERUNNABLE:
            raise InvalidParameterError(f"manifest command {command!r} cannot be re-run")
        kwargs = dict(manifest['inputs'])
        for key, document in manifest['configs'].items():
            kwargs[CONFIG_ARGUMENTS.get(key, key)] = CONFIG_TYPES[key].from_dict(document)
        logger.info("Re-running %s from %s", command, manifest_path)
        return getattr(self, command)(out=out, **kwargs)


RERUNNABLE = ('simulate', 'solve', 'train', 'reconstruct', 'evaluate', 'export')
CONFIG_ARGUMENTS = {'train': 'train_cfg', 'eval': 'eval_cfg'}


def _truth_volume(reflectivity: np.ndarray, geometry: GeometryConfig) -> GroundTruthVolume:
    """Wrap a stored reflectivity volume, re-checking it against the geometry."""
    return GroundTruthVolume(reflectivity, geometry.grid(), reflectivity.shape[0])


def print_summary(title: str, summary: Dict):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    table = summary.pop('table', None)
    if table is not None:
        print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        print()
    for key, value in summary.items():
        print(f"{key}: {value}")
    print("=" * 60)


def _configs(args, *names) -> Dict:
    """Resolve each named JSON section from its flag or the config directory."""
    resolved = {}
    for name in names:
        resolved[name] = CONFIG_TYPES[name].from_dict(
            ff.load_section(getattr(args, name, None), f"{name}.json")
        )
    return resolved


def cmd_simulate(args, engine: TomoEngine) -> Dict:
    configs = _configs(args, 'geometry', 'scene')
    return engine.simulate(configs['geometry'], configs['scene'], args.noise_sigma, args.seed, args.out)


def cmd_solve(args, engine: TomoEngine) -> Dict:
    solver = _configs(args, 'solver')['solver']
    overrides = {}
    if args.reg_lambda is not None:
        overrides['reg_lambda'] = args.reg_lambda
    if args.iters is not None:
        overrides['max_iters'] = args.iters
    solver = dataclasses.replace(solver, **overrides)
    return engine.solve(args.obs_dir, solver, args.method, args.out)


def cmd_train(args, engine: TomoEngine) -> Dict:
    configs = _configs(args, 'train', 'network')
    train_cfg = configs['train']
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    return engine.train(args.dataset_dir, train_cfg, configs['network'], args.out, args.resume)


def cmd_reconstruct(args, engine: TomoEngine) -> Dict:
    return engine.reconstruct(args.obs_dir, args.checkpoint, args.out)


def cmd_evaluate(args, engine: TomoEngine) -> Dict:
    eval_cfg = _configs(args, 'eval')['eval']
    return engine.evaluate(args.recon_dir, args.truth_dir, eval_cfg, args.out, args.method)


def cmd_export(args, engine: TomoEngine) -> Dict:
    eval_cfg = _configs(args, 'eval')['eval']
    geometry = GeometryConfig.from_dict(ff.load_json(args.geometry)) if args.geometry else None
    return engine.export(args.source, args.format, args.out, args.tensor, args.range_index,
                         args.view, args.height, eval_cfg, geometry)


def cmd_rerun(args, engine: TomoEngine) -> Dict:
    return engine.rerun(args.manifest, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='AETomo toolkit - TomoSAR simulation, sparse inversion and AETomo-Net reconstruction'
    )
    parser.add_argument('--threads', type=int, default=config.DEFAULT_THREADS,
                        help='Worker threads for per-cell and per-slice loops (default: 1)')
    parser.add_argument('--no-progress', action='store_true', help='Disable progress bars')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    verbosity.add_argument('--quiet', '-q', action='store_true', help='Warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', help='Generate a synthetic scene and its observations')
    p.add_argument('--scene', help='Scene JSON (default: <config dir>/scene.json)')
    p.add_argument('--geometry', help='Geometry JSON (default: <config dir>/geometry.json)')
    p.add_argument('--noise-sigma', type=float, default=config.NOISE_SIGMA,
                   help='Per-component complex noise std (default: 0)')
    p.add_argument('--seed', type=int, default=0, help='Noise seed (default: 0)')
    p.add_argument('--out', required=True, help='Output directory')
    p.set_defaults(handler=cmd_simulate, title='SIMULATION SUMMARY')

    p = sub.add_parser('solve', help='Per-cell ISTA/FISTA reconstruction')
    p.add_argument('obs_dir', help='Directory written by simulate')
    p.add_argument('--method', choices=SOLVER_METHODS, default='ista')
    p.add_argument('--lambda', dest='reg_lambda', type=float, help='l1 weight (default: auto)')
    p.add_argument('--iters', type=int, help='Iteration cap')
    p.add_argument('--solver', help='Solver JSON (default: <config dir>/solver.json)')
    p.add_argument('--out', required=True, help='Output directory')
    p.set_defaults(handler=cmd_solve, title='SPARSE INVERSION SUMMARY')

    p = sub.add_parser('train', help='Train AETomo-Net on simulated slices')
    p.add_argument('dataset_dir', help='Directory written by simulate')
    p.add_argument('--train', help='Training JSON (default: <config dir>/train.json)')
    p.add_argument('--network', help='Network JSON (default: <config dir>/network.json)')
    p.add_argument('--epochs', type=int, help='Override the total epoch count')
    p.add_argument('--resume', help='Checkpoint to continue from')
    p.add_argument('--out', required=True, help='Output directory')
    p.set_defaults(handler=cmd_train, title='TRAINING SUMMARY')

    p = sub.add_parser('reconstruct', help='Network reconstruction of an observation volume')
    p.add_argument('obs_dir', help='Directory written by simulate')
    p.add_argument('--checkpoint', required=True, help='params.atsr or a checkpoint archive')
    p.add_argument('--out', required=True, help='Output directory')
    p.set_defaults(handler=cmd_reconstruct, title='RECONSTRUCTION SUMMARY')

    p = sub.add_parser('evaluate', help='Point-cloud metrics against the ground truth')
    p.add_argument('recon_dir', help='Directory written by solve or reconstruct')
    p.add_argument('truth_dir', help='Directory written by simulate')
    p.add_argument('--eval', help='Evaluation JSON (default: <config dir>/eval.json)')
    p.add_argument('--method', help='Row label (default: recorded method)')
    p.add_argument('--out', default='metrics.csv', help='Metrics CSV to append to (default: metrics.csv)')
    p.set_defaults(handler=cmd_evaluate, title='EVALUATION SUMMARY')

    p = sub.add_parser('export', help='Write point clouds or heatmaps')
    p.add_argument('source', help='Result directory, .atsr archive or .ply cloud')
    p.add_argument('--format', choices=EXPORT_FORMATS, required=True)
    p.add_argument('--tensor', help="Archive tensor (default: 'recon', else 'truth')")
    p.add_argument('--range-index', type=int, default=0, help='Slice for heatmaps (default: 0)')
    p.add_argument('--view', choices=('front', 'left'), help='Projection heatmap instead of one slice')
    p.add_argument('--height', action='store_true', help='Convert elevation to height in clouds')
    p.add_argument('--eval', help='Evaluation JSON for extraction settings')
    p.add_argument('--geometry', help='Geometry JSON when the source has no manifest')
    p.add_argument('--out', required=True, help='Output directory')
    p.set_defaults(handler=cmd_export, title='EXPORT SUMMARY')

    p = sub.add_parser('rerun', help='Re-execute a recorded command')
    p.add_argument('manifest', help='manifest.json or the directory holding it')
    p.add_argument('--out', required=True, help='Output location for the re-run')
    p.set_defaults(handler=cmd_rerun, title='RERUN SUMMARY')
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def main(argv=None) -> int:
    """CLI entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    try:
        engine = TomoEngine(threads=args.threads, progress=not (args.no_progress or args.quiet))
        summary = args.handler(args, engine)
    except TomoError as exc:
        print(f"error: {exc.category}: {' '.join(str(exc).split())}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("error: internal: interrupted by user", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("Unhandled failure", exc_info=True)
        print(f"error: internal: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1

    if not args.quiet:
        print_summary(args.title, summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
