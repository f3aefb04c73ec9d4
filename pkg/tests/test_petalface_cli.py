import json

import pytest

from benchmark_data import MANIFEST_NAME, QUALITY_REPORT_NAME
from errors import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, NumericError, ProtocolError, exit_code_for
from petalface_cli import (BACKBONE_NAME, CALIBRATION_NAME, CHECKPOINT_NAME, PARAM_COUNT_NAME, TRAIN_REPORT_NAME,
                           main)
from run_config import RESOLVED_CONFIG_NAME

TINY_CONFIG = {
    'data': {'n_identities': 4, 'per_identity_counts': {'train': 4, 'gallery': 2, 'probe': 4},
             'n_unknown_identities': 2, 'pretrain_identities': 2, 'pretrain_per_identity': 2},
    'backbone': {'image_size': 32, 'patch_size': 8, 'embed_dim': 16, 'attention_dim': 8, 'num_heads': 2,
                 'depth': 2, 'embedding_dim': 12},
    'gate': {'samples': 16},
    'injection': {'rank': 2},
    'train': {'epochs': 1, 'warmup_epochs': 0, 'batch_size': 8},
    'pretrain': {'epochs': 1, 'warmup_epochs': 0, 'batch_size': 4},
    'eval': {'ks': [1, 2]},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(TINY_CONFIG))
    return path


@pytest.fixture
def run_dir(tmp_path, config_path):
    out = tmp_path / 'run'
    assert main(['gen-data', '--config', str(config_path), '--out', str(out)]) == EXIT_OK
    return out


def _cli(command, config_path, out, *extra):
    return main([command, '--config', str(config_path), '--out', str(out), *extra])


def test_gen_data_writes_benchmark(run_dir, capsys):
    assert (run_dir / MANIFEST_NAME).exists()
    assert (run_dir / RESOLVED_CONFIG_NAME).exists()
    splits = json.loads((run_dir / QUALITY_REPORT_NAME).read_text())['splits']
    assert splits['gallery']['mean'] > splits['probe']['mean']


def test_gen_data_without_probe_images(tmp_path, capsys):
    config = json.loads(json.dumps(TINY_CONFIG))
    config['data'].update(per_identity_counts={'train': 2, 'gallery': 2, 'probe': 0}, n_unknown_identities=0)
    path = tmp_path / 'no_probe.json'
    path.write_text(json.dumps(config))
    assert _cli('gen-data', path, tmp_path / 'run') == EXIT_OK
    quality = [line for line in capsys.readouterr().out.splitlines() if line.startswith('quality ')]
    assert len(quality) == 1
    assert 'gallery_mean=' in quality[0]
    assert 'probe_mean' not in quality[0]
    assert 'gap' not in quality[0]


def test_gen_data_refuses_non_empty_directory(run_dir, config_path, capsys):
    before = (run_dir / MANIFEST_NAME).read_bytes()
    assert _cli('gen-data', config_path, run_dir) == EXIT_CONFIG
    assert '--force' in capsys.readouterr().err
    assert _cli('gen-data', config_path, run_dir, '--force') == EXIT_OK
    assert (run_dir / MANIFEST_NAME).read_bytes() == before


def test_malformed_config_names_the_key(tmp_path, capsys):
    bad = tmp_path / 'bad.json'
    bad.write_text(json.dumps({'train': {'epohcs': 2}}))
    assert _cli('gen-data', bad, tmp_path / 'run') == EXIT_CONFIG
    assert 'train.epohcs' in capsys.readouterr().err
    assert not (tmp_path / 'run').exists()


def test_bad_override_and_usage_are_configuration_errors(run_dir, config_path):
    assert _cli('calibrate', config_path, run_dir, '--set', 'gate.nope=1') == EXIT_CONFIG
    assert _cli('calibrate', config_path, run_dir, '--set', 'novalue') == EXIT_CONFIG
    assert main(['train-everything']) == EXIT_CONFIG


def test_calibrate_is_reproducible(run_dir, config_path, capsys):
    assert _cli('calibrate', config_path, run_dir) == EXIT_OK
    first = (run_dir / CALIBRATION_NAME).read_bytes()
    out = capsys.readouterr().out
    assert 'mu=' in out and 'threshold=' in out and 'l=16' in out
    assert _cli('calibrate', config_path, run_dir) == EXIT_OK
    assert (run_dir / CALIBRATION_NAME).read_bytes() == first


def test_calibrate_without_manifest_is_a_data_error(tmp_path, config_path, capsys):
    assert _cli('calibrate', config_path, tmp_path / 'empty') == EXIT_DATA
    assert 'error:' in capsys.readouterr().err


def test_frozen_finetune_with_no_epochs(run_dir, config_path):
    assert _cli('finetune', config_path, run_dir, '--mode', 'frozen', '--epochs', '0') == EXIT_OK
    assert (run_dir / CHECKPOINT_NAME).exists()
    report = json.loads((run_dir / TRAIN_REPORT_NAME).read_text())
    assert report['mode'] == 'frozen'
    assert report['losses'] == []


def test_fresh_adapters_evaluate_like_the_plain_backbone(run_dir, config_path):
    assert _cli('evaluate', config_path, run_dir) == EXIT_OK
    plain = json.loads((run_dir / 'eval_report.json').read_text())
    assert _cli('finetune', config_path, run_dir, '--mode', 'petalface', '--epochs', '0') == EXIT_OK
    assert (run_dir / CALIBRATION_NAME).exists()
    assert _cli('evaluate', config_path, run_dir, '--checkpoint', str(run_dir / CHECKPOINT_NAME)) == EXIT_OK
    adapted = json.loads((run_dir / 'eval_report.json').read_text())
    assert adapted['rank'] == plain['rank']
    assert adapted['verification_accuracy'] == plain['verification_accuracy']
    assert adapted['tar_at_far'] == plain['tar_at_far']


def test_gallery_as_probe_split(run_dir, config_path, capsys):
    assert _cli('evaluate', config_path, run_dir, '--set', 'eval.probe_split="gallery"') == EXIT_OK
    report = json.loads((run_dir / 'eval_report.json').read_text())
    assert report['rank']['1'] == 1.0
    assert 'Rank-1' in capsys.readouterr().out


def test_pretrain_then_petalface_finetune(run_dir, config_path, capsys):
    assert _cli('pretrain', config_path, run_dir) == EXIT_OK
    assert (run_dir / BACKBONE_NAME).exists()
    assert _cli('pretrain', config_path, run_dir) == EXIT_CONFIG
    capsys.readouterr()
    assert _cli('finetune', config_path, run_dir) == EXIT_OK
    out = capsys.readouterr().out
    assert 'epoch=1' in out
    assert 'step=0 max_grad=' in out
    assert _cli('evaluate', config_path, run_dir, '--checkpoint', str(run_dir / CHECKPOINT_NAME)) == EXIT_OK


def test_grad_probe_command(run_dir, config_path):
    assert _cli('grad-probe', config_path, run_dir, '--modes', 'full_ft,single_lora') == EXIT_OK
    stats = json.loads((run_dir / 'grad_probe.json').read_text())
    assert set(stats) == {'full_ft', 'single_lora'}
    assert _cli('grad-probe', config_path, run_dir, '--modes', 'adapters') == EXIT_CONFIG


def test_param_count_scales_with_rank(tmp_path, config_path, capsys):
    out = tmp_path / 'params'
    assert _cli('param-count', config_path, out, '--ranks', '2,4,8', '--presets', 'attention') == EXIT_OK
    rows = json.loads((out / PARAM_COUNT_NAME).read_text())
    assert [r['method'] for r in rows[:2]] == ['Pretrained', 'Full-FT']
    lora = [r['trainable'] for r in rows if r['method'] == 'LoRA']
    twin = [r['trainable'] for r in rows if r['method'] == 'PETALface']
    assert lora[1] == 2 * lora[0] and lora[2] == 4 * lora[0]
    assert twin == [2 * t for t in lora]
    assert rows[1]['trainable_pct'] == 100.0
    assert 'PETALface' in capsys.readouterr().out


def test_exit_codes():
    assert exit_code_for(NumericError('nan')) == EXIT_NUMERIC
    assert exit_code_for(ProtocolError('gallery')) == EXIT_DATA
    assert exit_code_for(FileNotFoundError('x')) == EXIT_DATA
    assert exit_code_for(ZeroDivisionError()) == EXIT_NUMERIC
