"""Command-line entry point: synthetic data, calibration, training, evaluation.

Every command reads one JSON run config (``--config``), applies flag
overrides, writes ``resolved_config.json`` into the output directory and
keeps all artifacts there under stable names.

Usage:
    python petalface_cli.py gen-data --out runs/demo
    python petalface_cli.py pretrain --out runs/demo
    python petalface_cli.py calibrate --out runs/demo
    python petalface_cli.py finetune --out runs/demo --mode petalface
    python petalface_cli.py evaluate --out runs/demo --checkpoint runs/demo/adapters.ckpt
"""
import argparse
import json
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from tabulate import tabulate

from adapter_checkpoint import load_adapters, read_checkpoint, write_checkpoint
from backbone import ToyBackbone, build_backbone, load_backbone, save_backbone
from benchmark_data import (MANIFEST_NAME, PRETRAIN_MANIFEST_NAME, QUALITY_REPORT_NAME, DatasetManifest,
                            ManifestImages, generate_benchmark, generate_pretraining_set)
from errors import EXIT_OK, ConfigurationError, PetalError, exit_code_for
from finetune import MODES, finetune, grad_probe, prepare_model, pretrain
from logging_utils import get_logger
from lora_adapters import count_trainable
from margin_losses import build_head
from model_surgery import PRESETS, InjectionConfig, inject
from quality_gate import QualityGate, get_estimator, read_calibration, write_calibration
from recognition_metrics import evaluate
from run_config import DEFAULT_CONFIG_PATH, RESOLVED_CONFIG_NAME, RunConfig, apply_overrides, load_run_config, \
    write_resolved_config

logger = get_logger('cli')

CALIBRATION_NAME = 'calibration.txt'
CHECKPOINT_NAME = 'adapters.ckpt'
TRAIN_REPORT_NAME = 'train_report.json'
PRETRAIN_REPORT_NAME = 'pretrain_report.json'
BACKBONE_NAME = 'backbone.pt'
FINETUNED_BACKBONE_NAME = 'backbone_finetuned.pt'
GRAD_PROBE_NAME = 'grad_probe.json'
PARAM_COUNT_NAME = 'param_count.json'

# Files and folders gen-data owns; --force removes exactly these.
GENERATED_ARTIFACTS = (
    MANIFEST_NAME, PRETRAIN_MANIFEST_NAME, QUALITY_REPORT_NAME, 'pretrain_manifest_quality.json',
    'images', 'pretrain_manifest_images', RESOLVED_CONFIG_NAME, CALIBRATION_NAME, CHECKPOINT_NAME,
    TRAIN_REPORT_NAME, PRETRAIN_REPORT_NAME, BACKBONE_NAME, FINETUNED_BACKBONE_NAME, GRAD_PROBE_NAME,
    PARAM_COUNT_NAME, 'eval_report.json', 'eval_report.txt',
)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems as ConfigurationError."""

    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _comma_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(',') if item.strip()]


def _comma_ints(value: str) -> List[int]:
    try:
        return [int(item) for item in _comma_list(value)]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'") from e


def _parse_set(items: Optional[Sequence[str]]) -> Dict:
    overrides = {}
    for item in items or ():
        key, sep, raw = item.partition('=')
        if not sep or not key:
            raise ConfigurationError(f"--set expects KEY=VALUE, got '{item}'")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument('--config', default=str(DEFAULT_CONFIG_PATH), help='Path to the JSON run config')
    common.add_argument('--seed', type=int, help='Global seed (overrides config "seed")')
    common.add_argument('--out', help='Output directory (overrides config "output_dir")')
    common.add_argument('--force', action='store_true', help='Overwrite existing generated artifacts')
    common.add_argument('--set', action='append', metavar='KEY=VALUE', dest='overrides',
                        help='Override a dotted config key, e.g. --set train.batch_size=16')

    parser = CliParser(description='Quality-gated twin-adapter fine-tuning toolkit')
    commands = parser.add_subparsers(dest='command', required=True)

    commands.add_parser('gen-data', parents=[common], help='Render the synthetic benchmark')
    commands.add_parser('pretrain', parents=[common], help='Train the backbone on clean identities')
    commands.add_parser('calibrate', parents=[common], help='Calibrate the quality gate threshold')

    train = commands.add_parser('finetune', parents=[common], help='Fine-tune on the benchmark training split')
    train.add_argument('--mode', choices=MODES, help='Training mode (overrides train.mode)')
    train.add_argument('--epochs', type=int, help='Number of epochs (overrides train.epochs)')

    evaluation = commands.add_parser('evaluate', parents=[common], help='Compute recognition metrics')
    evaluation.add_argument('--checkpoint', help='Adapter checkpoint; omit to evaluate the plain backbone')
    evaluation.add_argument('--backbone', help=f'Backbone file; defaults to <out>/{BACKBONE_NAME} when present')

    probe = commands.add_parser('grad-probe', parents=[common], help='Compare first-step gradient magnitudes')
    probe.add_argument('--modes', type=_comma_list, default=['full_ft', 'petalface'],
                       help='Comma-separated training modes')

    params = commands.add_parser('param-count', parents=[common], help='Tabulate total/trainable parameters')
    params.add_argument('--ranks', type=_comma_ints, help='Comma-separated adapter ranks')
    params.add_argument('--presets', type=_comma_list, help='Comma-separated injection presets')
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config)
    overrides = _parse_set(args.overrides)
    overrides.update({'seed': args.seed, 'output_dir': args.out})
    if args.command == 'finetune':
        overrides.update({'train.mode': args.mode, 'train.epochs': args.epochs})
    elif args.command == 'param-count':
        overrides.update({'param_count.ranks': args.ranks, 'param_count.presets': args.presets})
    return apply_overrides(config, overrides)


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + '\n', encoding='utf-8')
    return path


def _read_manifest(out_dir: Path, name: str = MANIFEST_NAME) -> DatasetManifest:
    return DatasetManifest.read(out_dir / name)


def _backbone(config: RunConfig, out_dir: Path, path: Optional[str] = None) -> ToyBackbone:
    """Explicit backbone file, else ``<out>/backbone.pt``, else seed-initialised weights."""
    if path is not None:
        return load_backbone(path)
    pretrained = out_dir / BACKBONE_NAME
    if pretrained.exists():
        backbone = load_backbone(pretrained)
        if backbone.config != config.backbone:
            logger.warning("Pre-trained backbone config differs from the run config; using the file's",
                           path=str(pretrained))
        return backbone
    logger.warning("No pre-trained backbone found; using seed-initialised weights", out_dir=str(out_dir))
    return build_backbone(config.backbone, seed=config.seed)


def _calibrated_gate(config: RunConfig, manifest: DatasetManifest, out_dir: Path) -> QualityGate:
    """Gate from ``<out>/calibration.txt``, calibrating and writing it first when absent."""
    estimator = get_estimator(config.gate.estimator)
    path = out_dir / CALIBRATION_NAME
    if path.exists():
        return QualityGate(estimator, read_calibration(path))
    gate = QualityGate(estimator).calibrated(ManifestImages(manifest, config.gate.split),
                                             config.gate.samples, config.seed)
    write_calibration(path, gate.calibration)
    return gate


def cmd_gen_data(config: RunConfig, out_dir: Path, force: bool) -> int:
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise ConfigurationError(f"output directory {out_dir} is not empty; pass --force to overwrite")
        for name in GENERATED_ARTIFACTS:
            target = out_dir / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out_dir)

    data, bb = config.data, config.backbone
    manifest = generate_benchmark(
        out_dir, data.n_identities, per_identity_counts=data.per_identity_counts,
        degradation_grid=data.grid(), seed=config.seed, image_size=bb.image_size, channels=bb.channels,
        identity_spread=data.identity_spread, n_unknown_identities=data.n_unknown_identities,
        train_degraded_fraction=data.train_degraded_fraction, n_jobs=data.n_jobs,
        estimator=get_estimator(config.gate.estimator),
    )
    if data.pretrain_identities > 0:
        generate_pretraining_set(out_dir, data.pretrain_identities, data.pretrain_per_identity,
                                 seed=config.seed, image_size=bb.image_size, channels=bb.channels,
                                 identity_spread=data.identity_spread, n_jobs=data.n_jobs)

    means = {split: summary['mean'] for split, summary in manifest.quality_report['splits'].items()}
    print(f"manifest={out_dir / MANIFEST_NAME}")
    line = ' '.join(f"{split}_mean={means[split]:.6f}" for split in ('gallery', 'probe') if split in means)
    if 'gallery' in means and 'probe' in means:
        line += f" gap={means['gallery'] - means['probe']:.6f}"
    if line:
        print(f"quality {line}")
    return EXIT_OK


def cmd_pretrain(config: RunConfig, out_dir: Path, force: bool) -> int:
    target = out_dir / BACKBONE_NAME
    if target.exists() and not force:
        raise ConfigurationError(f"{target} already exists; pass --force to retrain")
    manifest = _read_manifest(out_dir, PRETRAIN_MANIFEST_NAME)
    backbone = build_backbone(config.backbone, seed=config.seed)
    head = build_head(len(manifest.identities('train')), config.backbone.embedding_dim, config.loss,
                      seed=config.seed)
    report = pretrain(backbone, manifest, head, config.pretrain_train_config(), stream=sys.stdout)
    save_backbone(target, backbone)
    _write_json(out_dir / PRETRAIN_REPORT_NAME, report.to_dict())
    print(f"backbone={target}")
    return EXIT_OK


def cmd_calibrate(config: RunConfig, out_dir: Path) -> int:
    manifest = _read_manifest(out_dir)
    gate = QualityGate(get_estimator(config.gate.estimator)).calibrated(
        ManifestImages(manifest, config.gate.split), config.gate.samples, config.seed)
    calib = gate.calibration
    path = write_calibration(out_dir / CALIBRATION_NAME, calib)
    print(f"mu={calib.mu!r} sigma={calib.sigma!r} threshold={calib.threshold!r} l={calib.sample_count}")
    print(f"calibration={path}")
    return EXIT_OK


def cmd_finetune(config: RunConfig, out_dir: Path) -> int:
    mode = config.train.mode
    manifest = _read_manifest(out_dir)
    backbone = _backbone(config, out_dir)
    gate = _calibrated_gate(config, manifest, out_dir) if mode == 'petalface' else None
    model = prepare_model(backbone, mode, config.injection_config(mode), gate, seed=config.seed)
    head = build_head(len(manifest.identities('train')), config.backbone.embedding_dim, config.loss,
                      seed=config.seed)
    report = finetune(model, manifest, gate, head, config.train, stream=sys.stdout,
                      calibration_samples=config.gate.samples)

    write_checkpoint(out_dir / CHECKPOINT_NAME, report.checkpoint)
    _write_json(out_dir / TRAIN_REPORT_NAME, report.to_dict())
    if mode == 'full_ft':
        save_backbone(out_dir / FINETUNED_BACKBONE_NAME, model)
    if report.max_grads:
        print(f"step=0 max_grad={report.initial_max_grad:.6g} "
              f"backbone_max_grad={report.initial_backbone_max_grad:.6g}")
    print(f"checkpoint={out_dir / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_evaluate(config: RunConfig, out_dir: Path, checkpoint: Optional[str], backbone_path: Optional[str]) -> int:
    manifest = _read_manifest(out_dir)
    model = _backbone(config, out_dir, backbone_path)
    gate = None
    if checkpoint is not None:
        ckpt = read_checkpoint(checkpoint)
        injection = ckpt.injection_config
        if injection.mode != 'none':
            if injection.mode == 'twin':
                calib = ckpt.calibration or read_calibration(out_dir / CALIBRATION_NAME)
                gate = QualityGate(get_estimator(calib.estimator_name), calib)
            model = load_adapters(inject(model, injection, gate=gate, seed=config.seed), ckpt)
    report = evaluate(model, manifest, gate, config.eval)
    report.write(out_dir)
    print(report.to_table(), end='')
    return EXIT_OK


def cmd_grad_probe(config: RunConfig, out_dir: Path, modes: Sequence[str]) -> int:
    unknown = sorted(set(modes) - set(MODES))
    if unknown:
        raise ConfigurationError(f"unknown training mode(s) {unknown}; available: {list(MODES)}")
    manifest = _read_manifest(out_dir)
    backbone = _backbone(config, out_dir)
    gate = _calibrated_gate(config, manifest, out_dir) if 'petalface' in modes else None
    head = build_head(len(manifest.identities('train')), config.backbone.embedding_dim, config.loss,
                      seed=config.seed)
    stats = grad_probe(backbone, manifest, gate, head, config.train, config.injection_config('petalface'),
                       modes=modes, calibration_samples=config.gate.samples)
    _write_json(out_dir / GRAD_PROBE_NAME, {mode: s.to_dict() for mode, s in stats.items()})
    for mode, s in stats.items():
        print(f"mode={mode} max_grad={s.max_abs:.6g} p99={s.p99:.6g} mean_abs={s.mean_abs:.6g} count={s.count}")
    return EXIT_OK


def param_count_rows(config: RunConfig) -> List[Dict]:
    """Total and trainable backbone parameters per method, preset and rank."""
    backbone = build_backbone(config.backbone, seed=config.seed)
    total, _ = count_trainable(backbone)
    rows = [
        {'method': 'Pretrained', 'preset': '-', 'rank': None, 'total': total, 'trainable': 0},
        {'method': 'Full-FT', 'preset': '-', 'rank': None, 'total': total, 'trainable': total},
    ]
    presets = config.param_count.presets or [name for name in PRESETS if name != 'paper-best']
    for method, mode in (('LoRA', 'single'), ('PETALface', 'twin')):
        for preset in presets:
            if preset not in PRESETS:
                raise ConfigurationError(f"unknown injection preset '{preset}'; available: {sorted(PRESETS)}")
            for rank in config.param_count.ranks:
                injection = InjectionConfig(sites=PRESETS[preset], rank=rank, scale=config.injection.scale,
                                            dropout_rate=config.injection.dropout_rate, mode=mode)
                model = inject(build_backbone(config.backbone, seed=config.seed), injection, seed=config.seed)
                model_total, trainable = count_trainable(model)
                rows.append({'method': method, 'preset': preset, 'rank': rank,
                             'total': model_total, 'trainable': trainable})
    for row in rows:
        row['trainable_pct'] = 100.0 * row['trainable'] / row['total']
    return rows


def cmd_param_count(config: RunConfig, out_dir: Path) -> int:
    rows = param_count_rows(config)
    _write_json(out_dir / PARAM_COUNT_NAME, rows)
    print(tabulate(rows, headers='keys', floatfmt='.3f', missingval='-'))
    return EXIT_OK


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out_dir = Path(config.output_dir)
    if args.command == 'gen-data':
        return cmd_gen_data(config, out_dir, args.force)
    write_resolved_config(config, out_dir)
    if args.command == 'pretrain':
        return cmd_pretrain(config, out_dir, args.force)
    if args.command == 'calibrate':
        return cmd_calibrate(config, out_dir)
    if args.command == 'finetune':
        return cmd_finetune(config, out_dir)
    if args.command == 'evaluate':
        return cmd_evaluate(config, out_dir, args.checkpoint, args.backbone)
    if args.command == 'grad-probe':
        return cmd_grad_probe(config, out_dir, args.modes)
    return cmd_param_count(config, out_dir)


def main(argv: Optional[Sequence[str]] = None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        return run(args)
    except (PetalError, FileNotFoundError, ArithmeticError) as e:
        logger.error("Command failed", exception=e, command=command)
        print(f"error: {str(e)}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())
