import json

import numpy as np
import pytest
from PIL import Image

from benchmark_data import (IDENTITY_DEGRADATION, JPEG_LEVELS, MANIFEST_NAME, QUALITY_REPORT_NAME, DatasetManifest,
                            DegradationSpec, IdentitySpec, ManifestDataset, ManifestImages, clean_source, degrade,
                            generate_benchmark, generate_pretraining_set, ingest_folder, load_image)
from errors import ConfigurationError, InputError, ManifestError
from quality_gate import builtin_sharpness_estimator


def test_identity_render_is_deterministic():
    a = IdentitySpec(identity_id=2, seed=7).render('gallery', 1)
    b = IdentitySpec(identity_id=2, seed=7).render('gallery', 1)
    assert np.array_equal(a, b)
    assert a.shape == (64, 64) and a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert IdentitySpec(identity_id=2, seed=7).render('gallery', 1, channels=3).shape == (64, 64, 3)


def test_identities_differ():
    a = IdentitySpec(identity_id=1, seed=0).render('train', 0)
    b = IdentitySpec(identity_id=2, seed=0).render('train', 0)
    assert not np.array_equal(a, b)


def test_identity_degradation_is_bit_identical():
    image = IdentitySpec(identity_id=0, seed=0).render('probe', 0)
    assert np.array_equal(degrade(image, IDENTITY_DEGRADATION), image)


def test_jpeg_like_compression_lowers_sharpness():
    estimator = builtin_sharpness_estimator()
    image = IdentitySpec(identity_id=4, seed=0).render('probe', 0)
    scores = [estimator.score(degrade(image, DegradationSpec(jpeg_like_quality=q))) for q in JPEG_LEVELS]
    assert scores[0] > scores[1]
    assert scores[0] > scores[2]


def test_noise_is_seeded():
    image = IdentitySpec(identity_id=0, seed=0).render('probe', 0)
    spec = DegradationSpec(noise_sigma=0.05, occlusion_fraction=0.1)
    a = degrade(image, spec, np.random.default_rng(3), np.random.default_rng(4))
    b = degrade(image, spec, np.random.default_rng(3), np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_downscale_keeps_shape_and_rejects_indivisible_sizes():
    image = IdentitySpec(identity_id=0, seed=0).render('probe', 0)
    assert degrade(image, DegradationSpec(downscale_factor=4)).shape == image.shape
    with pytest.raises(ConfigurationError):
        degrade(image[:30, :30], DegradationSpec(downscale_factor=4))


def test_degradation_spec_validation():
    with pytest.raises(ConfigurationError):
        DegradationSpec(blur_sigma=-1.0)
    with pytest.raises(ConfigurationError):
        DegradationSpec(jpeg_like_quality=0)
    with pytest.raises(ConfigurationError):
        DegradationSpec.from_dict({'blur': 1.0})


def test_benchmark_layout(tiny_benchmark):
    counts = tiny_benchmark.counts()
    assert counts == {'train': 16, 'gallery': 8, 'probe': 16 + 2 * 4}
    assert tiny_benchmark.protocol == 'open-set'
    unknown = [r for r in tiny_benchmark.records if not r.enrolled]
    assert {r.split for r in unknown} == {'probe'}
    assert all(r.degradation is None for r in tiny_benchmark.split('gallery'))
    assert all(r.degradation is not None for r in tiny_benchmark.split('probe'))
    assert any(r.degradation is not None for r in tiny_benchmark.split('train'))
    for record in tiny_benchmark.records[:5]:
        assert tiny_benchmark.resolve(record).exists()


def test_gallery_quality_exceeds_probe_quality(tiny_benchmark):
    splits = tiny_benchmark.quality_report['splits']
    assert splits['gallery']['mean'] > splits['probe']['mean']
    assert sum(splits['gallery']['histogram']) == splits['gallery']['count']
    report = json.loads((tiny_benchmark.root / QUALITY_REPORT_NAME).read_text())
    assert report['estimator'] == 'laplacian-sharpness'


def test_manifest_round_trip(tiny_benchmark):
    manifest = DatasetManifest.read(tiny_benchmark.root / MANIFEST_NAME)
    assert manifest.records == tiny_benchmark.records
    assert manifest.protocol == tiny_benchmark.protocol
    assert manifest.header['seed'] == 0
    assert manifest.header['image_size'] == 32


def test_generation_is_reproducible_across_workers(tmp_path):
    kwargs = dict(n_identities=2, per_identity_counts={'train': 1, 'gallery': 1, 'probe': 2}, seed=5, image_size=32)
    a = generate_benchmark(tmp_path / 'a', n_jobs=1, **kwargs)
    b = generate_benchmark(tmp_path / 'b', n_jobs=2, **kwargs)
    for record in a.records:
        assert (a.resolve(record)).read_bytes() == (b.root / record.path).read_bytes()


def test_generated_probe_derives_from_clean_source(tiny_benchmark):
    record = tiny_benchmark.split('gallery')[0]
    stored = load_image(tiny_benchmark.resolve(record))
    expected = np.round(clean_source(tiny_benchmark, record) * 255.0) / 255.0
    assert np.allclose(stored, expected, atol=1e-6)


def test_generation_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        generate_benchmark(tmp_path, n_identities=1)
    with pytest.raises(ConfigurationError):
        generate_benchmark(tmp_path, n_identities=2, degradation_grid=[])
    with pytest.raises(ConfigurationError):
        generate_benchmark(tmp_path, n_identities=2, per_identity_counts={'holdout': 1})


def test_pretraining_set_is_clean_and_disjoint(tmp_path, tiny_benchmark):
    pretraining = generate_pretraining_set(tmp_path, n_identities=3, per_identity=2, seed=0, image_size=32)
    assert pretraining.counts() == {'train': 6, 'gallery': 0, 'probe': 0}
    assert all(r.degradation is None for r in pretraining.records)
    assert not set(pretraining.identities()) & set(tiny_benchmark.identities())


def test_manifest_read_errors(tmp_path):
    with pytest.raises(ManifestError):
        DatasetManifest.read(tmp_path / 'missing.jsonl')
    bad = tmp_path / 'bad.jsonl'
    bad.write_text('{"format": "other"}\n')
    with pytest.raises(ManifestError):
        DatasetManifest.read(bad)


def _write_png(path, value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((16, 16), value, dtype=np.uint8)).save(path)


def test_ingest_folder(tmp_path):
    for split, names in (('gallery', ['alice', 'bob']), ('probe', ['alice', 'bob']), ('train', ['alice'])):
        for name in names:
            _write_png(tmp_path / split / name / '0.png')
    (tmp_path / 'probe' / 'bob' / 'broken.png').write_bytes(b'nope')
    (tmp_path / 'extras').mkdir()

    manifest = ingest_folder(tmp_path)
    assert manifest.protocol == 'closed-set'
    assert manifest.identities() == [0, 1]
    assert manifest.counts() == {'train': 1, 'gallery': 2, 'probe': 2}
    assert {e['path'] for e in manifest.errors} == {'extras', 'probe/bob/broken.png'}


def test_ingest_folder_protocol_violation(tmp_path):
    _write_png(tmp_path / 'gallery' / '1' / '0.png')
    _write_png(tmp_path / 'probe' / '2' / '0.png')
    with pytest.raises(ManifestError):
        ingest_folder(tmp_path, naming_rule='numeric')
    manifest = ingest_folder(tmp_path, naming_rule='numeric', closed_set=False)
    assert manifest.protocol == 'open-set'
    assert manifest.identities('probe') == [2]


def test_ingest_empty_folder(tmp_path):
    with pytest.raises(ManifestError):
        ingest_folder(tmp_path)


def test_dataset_views(tiny_benchmark):
    dataset = ManifestDataset(tiny_benchmark, 'train')
    image, label = dataset[0]
    assert image.shape == (1, 32, 32)
    assert set(dataset.label_map.values()) == {0, 1, 2, 3}
    images = ManifestImages(tiny_benchmark, 'gallery')
    assert len(images) == 8
    assert images[0].shape == (32, 32)


def test_unreadable_image_is_an_input_error(tmp_path):
    path = tmp_path / 'x.png'
    path.write_bytes(b'garbage')
    with pytest.raises(InputError):
        load_image(path)
