"""Desk-scale transfer study across training modes and seeds.

For each seed: render the benchmark and a clean pre-training identity set,
pre-train the backbone, then fine-tune a copy per mode on the benchmark
training split and evaluate it. Results are aggregated with pandas into
per-mode medians of probe rank-1 and of the clean-split verification drop
relative to the pre-trained (frozen) backbone.
"""
import argparse
import copy
import io
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import pandas as pd
from tabulate import tabulate

from backbone import build_backbone
from benchmark_data import ManifestImages, generate_benchmark, generate_pretraining_set
from errors import EXIT_OK, ConfigurationError, PetalError, exit_code_for
from finetune import MODES, finetune, prepare_model, pretrain
from logging_utils import get_logger
from margin_losses import build_head
from quality_gate import QualityGate, get_estimator
from recognition_metrics import evaluate
from run_config import DEFAULT_CONFIG_PATH, RunConfig, apply_overrides, load_run_config, write_resolved_config

logger = get_logger('transfer_study')

STUDY_MODES = ('frozen', 'full_ft', 'single_lora', 'petalface')
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
RESULTS_NAME = 'transfer_results.csv'
SUMMARY_NAME = 'transfer_summary.csv'


def run_seed(config: RunConfig, work_dir: Path, modes: Sequence[str] = STUDY_MODES,
             stream: Optional[TextIO] = None) -> List[Dict]:
    """One seed of the study; ``config.seed`` drives data, pre-training and adapters."""
    seed = config.seed
    data, bb = config.data, config.backbone
    run_log = logger.bind(seed=seed)
    estimator = get_estimator(config.gate.estimator)
    manifest = generate_benchmark(
        work_dir, data.n_identities, per_identity_counts=data.per_identity_counts,
        degradation_grid=data.grid(), seed=seed, image_size=bb.image_size, channels=bb.channels,
        identity_spread=data.identity_spread, n_unknown_identities=data.n_unknown_identities,
        train_degraded_fraction=data.train_degraded_fraction, n_jobs=data.n_jobs, estimator=estimator,
    )
    pretrain_manifest = generate_pretraining_set(
        work_dir, data.pretrain_identities, data.pretrain_per_identity, seed=seed,
        image_size=bb.image_size, channels=bb.channels, identity_spread=data.identity_spread,
        n_jobs=data.n_jobs,
    )

    backbone = build_backbone(bb, seed=seed)
    pretrain_head = build_head(len(pretrain_manifest.identities('train')), bb.embedding_dim, config.loss, seed=seed)
    pretrain(backbone, pretrain_manifest, pretrain_head, config.pretrain_train_config(), stream=stream)

    gate = QualityGate(estimator).calibrated(ManifestImages(manifest, config.gate.split),
                                             config.gate.samples, seed)
    n_classes = len(manifest.identities('train'))
    rows = []
    for mode in modes:
        model = prepare_model(copy.deepcopy(backbone), mode, config.injection_config(mode),
                              gate if mode == 'petalface' else None, seed=seed)
        # head-only training leaves the embeddings untouched
        if mode != 'frozen':
            head = build_head(n_classes, bb.embedding_dim, config.loss, seed=seed)
            finetune(model, manifest, gate if mode == 'petalface' else None, head,
                     replace(config.train, mode=mode),
                     stream=stream, calibration_samples=config.gate.samples)
        report = evaluate(model, manifest, gate if mode == 'petalface' else None, config.eval)
        row = {
            'seed': seed,
            'mode': mode,
            'rank1': report.rank.get(1),
            'verification_accuracy': report.verification_accuracy,
            'clean_verification_accuracy': report.clean_verification_accuracy,
        }
        row.update({f"tar@{far:g}": value for far, value in report.tar_at_far.items()})
        row.update({f"tpir@{fpir:g}": value for fpir, value in report.tpir_at_fpir.items()})
        rows.append(row)
        run_log.info("Transfer study mode finished", mode=mode, rank1=row['rank1'],
                     clean_verification_accuracy=row['clean_verification_accuracy'])
    return rows


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Per-mode medians; ``clean_drop`` is frozen minus mode clean accuracy, seed by seed."""
    frozen = results[results['mode'] == 'frozen'].set_index('seed')
    results = results.copy()
    results['clean_drop'] = (results['seed'].map(frozen['clean_verification_accuracy'])
                             - results['clean_verification_accuracy'])
    results['rank1_gain'] = results['rank1'] - results['seed'].map(frozen['rank1'])
    columns = ['rank1', 'rank1_gain', 'verification_accuracy', 'clean_verification_accuracy', 'clean_drop']
    summary = results.groupby('mode', sort=False)[columns].median()
    summary['seeds'] = results.groupby('mode', sort=False)['seed'].nunique()
    return summary


def run_study(config: RunConfig, out_dir: Path, seeds: Sequence[int] = DEFAULT_SEEDS,
              modes: Sequence[str] = STUDY_MODES, stream: Optional[TextIO] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Run every seed and write the per-run results and per-mode summary as CSV.

    Raises:
        ConfigurationError: If a mode is unknown or ``frozen`` is missing from ``modes``
    """
    unknown = sorted(set(modes) - set(MODES))
    if unknown:
        raise ConfigurationError(f"unknown training mode(s) {unknown}; available: {list(MODES)}")
    if 'frozen' not in modes:
        raise ConfigurationError("the transfer study needs the 'frozen' mode as its reference")
    if not seeds:
        raise ConfigurationError("the transfer study needs at least one seed")
    out_dir = Path(out_dir)
    rows = []
    for seed in seeds:
        seed_config = apply_overrides(config, {'seed': seed})
        work_dir = out_dir / f"seed_{seed}"
        work_dir.mkdir(parents=True, exist_ok=True)
        write_resolved_config(seed_config, work_dir)
        logger.info("Transfer study seed", seed=seed, work_dir=str(work_dir))
        rows.extend(run_seed(seed_config, work_dir, modes, stream=stream))

    results = pd.DataFrame(rows)
    summary = summarize(results)
    results.to_csv(out_dir / RESULTS_NAME, index=False)
    summary.to_csv(out_dir / SUMMARY_NAME)
    logger.info("Transfer study finished", seeds=list(seeds), modes=list(modes))
    return results, summary


def _parse_seeds(value: str) -> List[int]:
    try:
        return [int(s) for s in value.split(',') if s.strip()]
    except ValueError as e:
        raise ConfigurationError(f"--seeds expects comma-separated integers, got '{value}'") from e


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description='Run the transfer study across modes and seeds')
    parser.add_argument('--config', default=str(DEFAULT_CONFIG_PATH), help='Path to the JSON run config')
    parser.add_argument('--out', default='runs/transfer_study', help='Output directory')
    parser.add_argument('--seeds', default=','.join(str(s) for s in DEFAULT_SEEDS),
                        help='Comma-separated seeds')
    parser.add_argument('--epochs', type=int, help='Fine-tuning epochs (overrides train.epochs)')
    parser.add_argument('--verbose', action='store_true', help='Stream per-epoch progress lines')
    args = parser.parse_args(argv)

    try:
        seeds = _parse_seeds(args.seeds)
        config = apply_overrides(load_run_config(args.config), {'train.epochs': args.epochs})
        stream = sys.stdout if args.verbose else io.StringIO()
        _, summary = run_study(config, Path(args.out), seeds, stream=stream)
    except (PetalError, FileNotFoundError, ArithmeticError) as e:
        logger.error("Transfer study failed", exception=e)
        print(f"error: {str(e)}", file=sys.stderr)
        return exit_code_for(e)
    print(tabulate(summary.reset_index(), headers='keys', floatfmt='.4f', showindex=False))
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
