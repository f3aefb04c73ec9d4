"""Synthetic cross-resolution benchmark and manifest handling.

Identities are procedural face-like images built from flat-shaded primitives.
Gallery images stay clean while probes cycle through a degradation grid of
blur, down-then-up resampling, block-DCT quantization, noise and occlusion.
Every image is seeded from ``(seed, identity, split, index)`` so output does
not depend on the number of workers.
"""
import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from joblib import Parallel, delayed
from PIL import Image, UnidentifiedImageError
from scipy import ndimage
from scipy.fft import dctn, idctn
from torch.utils.data import Dataset

from errors import ConfigurationError, InputError, ManifestError
from logging_utils import get_logger
from quality_gate import QualityEstimator, builtin_sharpness_estimator

logger = get_logger('benchmark_data')

MANIFEST_FORMAT = 'petal-manifest/1'
MANIFEST_NAME = 'manifest.jsonl'
PRETRAIN_MANIFEST_NAME = 'pretrain_manifest.jsonl'
QUALITY_REPORT_NAME = 'quality_report.json'
SPLITS = ('train', 'gallery', 'probe')
SPLIT_CODES = {'train': 0, 'gallery': 1, 'probe': 2}
IMAGE_SUFFIXES = {'.png', '.jpg', '.jpeg', '.bmp', '.pgm', '.tif', '.tiff'}

# libjpeg base luminance quantization table
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

_JITTER, _NOISE, _OCCLUSION = 0, 1, 2


@dataclass(frozen=True)
class DegradationSpec:
    blur_sigma: float = 0.0
    downscale_factor: int = 1
    noise_sigma: float = 0.0
    jpeg_like_quality: int = 100
    occlusion_fraction: float = 0.0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigurationError("blur_sigma and noise_sigma must be nonnegative")
        if not isinstance(self.downscale_factor, int) or self.downscale_factor < 1:
            raise ConfigurationError(f"downscale_factor must be an integer >= 1, got {self.downscale_factor}")
        if not isinstance(self.jpeg_like_quality, int) or not 1 <= self.jpeg_like_quality <= 100:
            raise ConfigurationError(f"jpeg_like_quality must be an integer in [1, 100], got {self.jpeg_like_quality}")
        if not 0.0 <= self.occlusion_fraction <= 1.0:
            raise ConfigurationError(f"occlusion_fraction must lie in [0, 1], got {self.occlusion_fraction}")

    @property
    def is_identity(self) -> bool:
        return self == IDENTITY_DEGRADATION

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'DegradationSpec':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown degradation key(s) {sorted(unknown)}")
        return cls(**data)


IDENTITY_DEGRADATION = DegradationSpec()

# per-axis levels used for the monotonicity checks and the quality report
BLUR_LEVELS = (0.0, 1.0, 2.0, 3.0)
NOISE_LEVELS = (0.0, 0.02, 0.05)
JPEG_LEVELS = (100, 50, 25)

DEFAULT_GRID: Tuple[DegradationSpec, ...] = (
    DegradationSpec(blur_sigma=1.0, downscale_factor=2),
    DegradationSpec(blur_sigma=1.5, downscale_factor=4, noise_sigma=0.02),
    DegradationSpec(blur_sigma=2.0, jpeg_like_quality=25),
    DegradationSpec(blur_sigma=1.0, noise_sigma=0.05, occlusion_fraction=0.15),
)


def image_rng(seed: int, identity: int, split: str, index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, identity, SPLIT_CODES[split], index, purpose]))


@dataclass(frozen=True)
class IdentitySpec:
    """Procedural identity: the same ``(identity_id, seed)`` always renders the same base images."""

    identity_id: int
    seed: int
    spread: float = 1.0
    samples_per_split: Dict[str, int] = field(default_factory=dict)

    def pattern_params(self) -> Dict[str, float]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.identity_id, 0xFACE]))

        def draw(low, high):
            mid = (low + high) / 2.0
            return float(mid + self.spread * (rng.random() - 0.5) * (high - low))

        return {
            'background': draw(0.15, 0.30),
            'face_cx': draw(0.46, 0.54),
            'face_cy': draw(0.48, 0.56),
            'face_a': draw(0.26, 0.36),
            'face_b': draw(0.32, 0.42),
            'face': draw(0.45, 0.75),
            'hair_height': draw(0.05, 0.20),
            'hair': draw(0.15, 0.85),
            'eye_y': draw(0.38, 0.46),
            'eye_sep': draw(0.12, 0.20),
            'eye_r': draw(0.035, 0.07),
            'eye': draw(0.15, 0.35),
            'nose_h': draw(0.08, 0.16),
            'nose_w': draw(0.03, 0.07),
            'nose': draw(-0.12, 0.12),
            'mouth_y': draw(0.62, 0.72),
            'mouth_w': draw(0.08, 0.17),
            'mouth_h': draw(0.02, 0.05),
            'mouth': draw(0.20, 0.40),
            'mark_x': draw(0.30, 0.70),
            'mark_y': draw(0.50, 0.65),
            'mark_r': draw(0.02, 0.05),
            'mark': draw(0.20, 0.80),
        }

    def render(self, split: str, index: int, image_size: int = 64, channels: int = 1) -> np.ndarray:
        """Clean float32 image in [0, 1]; shape ``(H, W)`` or ``(H, W, C)``."""
        p = self.pattern_params()
        rng = image_rng(self.seed, self.identity_id, split, index, _JITTER)
        dx, dy = rng.uniform(-0.03, 0.03, size=2)
        zoom = rng.uniform(0.97, 1.03)
        gain = rng.uniform(0.95, 1.05)

        coords = (np.arange(image_size) + 0.5) / image_size
        yy, xx = np.meshgrid(coords, coords, indexing='ij')
        cx, cy = p['face_cx'] + dx, p['face_cy'] + dy
        # sample coordinates relative to the face centre, scaled by the per-image zoom
        u = (xx - cx) / zoom
        v = (yy - cy) / zoom

        img = np.full((image_size, image_size), p['background'])
        face = (u / p['face_a']) ** 2 + (v / p['face_b']) ** 2 <= 1.0
        img[face] = p['face']
        hair = face & (v < -p['face_b'] + p['hair_height'])
        img[hair] = p['hair']
        eye_v = p['eye_y'] - p['face_cy']
        for side in (-1.0, 1.0):
            eye = (u - side * p['eye_sep']) ** 2 + (v - eye_v) ** 2 <= p['eye_r'] ** 2
            img[eye] = p['eye']
        nose = (np.abs(u) <= p['nose_w'] / 2) & (v >= eye_v) & (v <= eye_v + p['nose_h'])
        img[nose] = p['face'] + p['nose']
        mouth_v = p['mouth_y'] - p['face_cy']
        mouth = (np.abs(u) <= p['mouth_w']) & (np.abs(v - mouth_v) <= p['mouth_h'])
        img[mouth] = p['mouth']
        mark = (u - (p['mark_x'] - p['face_cx'])) ** 2 + (v - (p['mark_y'] - p['face_cy'])) ** 2 <= p['mark_r'] ** 2
        img[mark & face] = p['mark']

        img = np.clip(img * gain, 0.0, 1.0).astype(np.float32)
        if channels > 1:
            img = np.repeat(img[:, :, None], channels, axis=2)
        return img


def _spatial(image: np.ndarray, value) -> tuple:
    return (value, value) if image.ndim == 2 else (value, value, 0)


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image, sigma=_spatial(image, sigma), mode='reflect')


def _down_up(image: np.ndarray, factor: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise ConfigurationError(f"image size {h}x{w} is not divisible by downscale_factor {factor}")
    shape = (h // factor, factor, w // factor, factor) + image.shape[2:]
    small = image.reshape(shape).mean(axis=(1, 3))
    return ndimage.zoom(small, (factor, factor) + (1,) * (image.ndim - 2), order=1, mode='nearest')


def jpeg_quant_table(quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0), 1.0, 255.0)


def jpeg_like(image: np.ndarray, quality: int) -> np.ndarray:
    """Quantize 8x8 orthonormal DCT blocks with the scaled luminance table."""
    if quality >= 100:
        return image
    table = jpeg_quant_table(quality)
    planes = image[:, :, None] if image.ndim == 2 else image
    h, w = planes.shape[:2]
    ph, pw = -h % 8, -w % 8
    out = np.empty_like(planes, dtype=np.float64)
    for c in range(planes.shape[2]):
        plane = np.pad(planes[:, :, c].astype(np.float64), ((0, ph), (0, pw)), mode='edge') * 255.0 - 128.0
        H, W = plane.shape
        blocks = plane.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
        coeffs = dctn(blocks, axes=(-2, -1), norm='ortho')
        coeffs = np.round(coeffs / table) * table
        restored = idctn(coeffs, axes=(-2, -1), norm='ortho').transpose(0, 2, 1, 3).reshape(H, W)
        out[:, :, c] = ((restored + 128.0) / 255.0)[:h, :w]
    out = np.clip(out, 0.0, 1.0)
    return out[:, :, 0] if image.ndim == 2 else out


def degrade(image: np.ndarray, spec: DegradationSpec, rng_noise: Optional[np.random.Generator] = None,
            rng_occlusion: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Apply blur, down-then-up resampling, DCT quantization, noise and occlusion in that order.

    The identity spec returns a bit-identical copy. Noise uses a unit field
    drawn from ``rng_noise`` and scaled by ``noise_sigma``, so the same
    generator seed gives the same noise pattern at every level.
    """
    out = np.array(image, dtype=np.float32, copy=True)
    if spec.is_identity:
        return out
    work = out.astype(np.float64)
    if spec.blur_sigma > 0:
        work = _blur(work, spec.blur_sigma)
    if spec.downscale_factor > 1:
        work = _down_up(work, spec.downscale_factor)
    if spec.jpeg_like_quality < 100:
        work = jpeg_like(work, spec.jpeg_like_quality)
    if spec.noise_sigma > 0:
        rng_noise = rng_noise or np.random.default_rng(0)
        work = work + spec.noise_sigma * rng_noise.standard_normal(work.shape)
    work = np.clip(work, 0.0, 1.0)
    if spec.occlusion_fraction > 0:
        rng_occlusion = rng_occlusion or np.random.default_rng(1)
        h, w = work.shape[:2]
        side_h = min(h, int(round(math.sqrt(spec.occlusion_fraction) * h)))
        side_w = min(w, int(round(math.sqrt(spec.occlusion_fraction) * w)))
        top = int(rng_occlusion.integers(0, h - side_h + 1))
        left = int(rng_occlusion.integers(0, w - side_w + 1))
        work[top:top + side_h, left:left + side_w] = 0.5
    return work.astype(np.float32)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    identity: int
    split: str
    index: int = 0
    degradation: Optional[Dict] = None
    enrolled: bool = True

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class DatasetManifest:
    root: Path
    records: List[ManifestRecord]
    protocol: str = 'closed-set'
    header: Dict = field(default_factory=dict)
    errors: List[Dict] = field(default_factory=list)
    quality_report: Optional[Dict] = None

    def split(self, name: str) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def identities(self, split: Optional[str] = None) -> List[int]:
        records = self.records if split is None else self.split(split)
        return sorted({r.identity for r in records})

    def resolve(self, record: ManifestRecord) -> Path:
        path = Path(record.path)
        return path if path.is_absolute() else self.root / path

    def counts(self) -> Dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        header = {'format': MANIFEST_FORMAT, 'protocol': self.protocol, **self.header}
        lines = [json.dumps(header, sort_keys=True)]
        lines.extend(json.dumps(r.to_dict(), sort_keys=True) for r in self.records)
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> 'DatasetManifest':
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest not found: {path}")
        lines = [line for line in path.read_text(encoding='utf-8').splitlines() if line.strip()]
        if not lines:
            raise ManifestError(f"manifest is empty: {path}")
        try:
            header = json.loads(lines[0])
            if header.get('format') != MANIFEST_FORMAT:
                raise ManifestError(f"unsupported manifest format {header.get('format')!r} in {path}")
            records = [ManifestRecord(**json.loads(line)) for line in lines[1:]]
        except (json.JSONDecodeError, TypeError) as e:
            raise ManifestError(f"malformed manifest {path}: {str(e)}") from e
        protocol = header.pop('protocol', 'closed-set')
        header.pop('format', None)
        return cls(root=path.parent, records=records, protocol=protocol, header=header)


def load_image(path: Union[str, Path], channels: int = 1) -> np.ndarray:
    """Read an image as float32 in [0, 1]; ``(H, W)`` for one channel, ``(H, W, C)`` otherwise."""
    try:
        with Image.open(path) as img:
            img = img.convert('L' if channels == 1 else 'RGB')
            array = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise InputError(f"cannot read image {path}: {str(e)}") from e
    return array


def save_image(path: Union[str, Path], image: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format='PNG')


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    array = image[None] if image.ndim == 2 else image.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))


def _render_task(seed: int, identity: int, split: str, index: int, spread: float,
                 image_size: int, channels: int, degradation: Optional[Dict]) -> np.ndarray:
    spec = IdentitySpec(identity_id=identity, seed=seed, spread=spread)
    image = spec.render(split, index, image_size=image_size, channels=channels)
    if degradation is not None:
        image = degrade(image, DegradationSpec.from_dict(degradation),
                        rng_noise=image_rng(seed, identity, split, index, _NOISE),
                        rng_occlusion=image_rng(seed, identity, split, index, _OCCLUSION))
    return to_uint8(image)


def quality_summary(scores: Sequence[float], bins: int = 10) -> Dict:
    scores = np.asarray(scores, dtype=np.float64)
    counts, edges = np.histogram(scores, bins=bins, range=(0.0, 1.0))
    return {
        'count': int(scores.size),
        'mean': float(scores.mean()) if scores.size else None,
        'histogram': counts.tolist(),
        'bin_edges': edges.tolist(),
    }


def generate_benchmark(out_dir: Union[str, Path], n_identities: int,
                       per_identity_counts: Optional[Dict[str, int]] = None,
                       degradation_grid: Optional[Sequence[DegradationSpec]] = None,
                       seed: int = 0, image_size: int = 64, channels: int = 1,
                       identity_spread: float = 1.0, n_unknown_identities: int = 0,
                       train_degraded_fraction: float = 0.0, identity_offset: int = 0,
                       manifest_name: str = MANIFEST_NAME, n_jobs: int = 1,
                       estimator: Optional[QualityEstimator] = None) -> DatasetManifest:
    """
    Render a gallery/probe benchmark under ``out_dir`` and write its manifest.

    Gallery images are always clean. Probe ``i`` of each identity uses
    ``degradation_grid[i % len(grid)]``. A share of training images
    (``train_degraded_fraction``) cycles through the grid too; the default
    keeps the training split clean. Unknown identities contribute probes only
    and make the manifest an open-set protocol.

    Args:
        out_dir: Output directory; images go under ``images/<split>/<identity>/``
        n_identities: Number of enrolled identities (>= 2)
        per_identity_counts: Images per identity for each split
        degradation_grid: Probe degradations; defaults to DEFAULT_GRID
        seed: Global seed
        image_size: Square image side
        channels: 1 (grayscale) or 3
        identity_spread: Scales how far identity parameters stray from the mean face
        n_unknown_identities: Probe-only identities absent from the gallery
        train_degraded_fraction: Fraction of training images that are degraded
        identity_offset: First identity id
        manifest_name: Manifest file name inside ``out_dir``
        n_jobs: joblib workers for rendering
        estimator: Quality estimator for the report; the built-in one by default

    Returns:
        DatasetManifest with ``quality_report`` attached

    Raises:
        ConfigurationError: On fewer than two identities or an empty grid
    """
    if n_identities < 2:
        raise ConfigurationError(f"a benchmark needs at least 2 identities, got {n_identities}")
    grid = tuple(DEFAULT_GRID if degradation_grid is None else degradation_grid)
    if not grid:
        raise ConfigurationError("degradation grid is empty")
    counts = {'train': 4, 'gallery': 2, 'probe': 4, **(per_identity_counts or {})}
    unknown = set(counts) - set(SPLITS)
    if unknown:
        raise ConfigurationError(f"unknown split(s) in per_identity_counts: {sorted(unknown)}")
    if channels not in (1, 3):
        raise ConfigurationError(f"channels must be 1 or 3, got {channels}")
    if not 0.0 <= train_degraded_fraction <= 1.0:
        raise ConfigurationError("train_degraded_fraction must lie in [0, 1]")

    out_dir = Path(out_dir)
    image_dir = 'images' if manifest_name == MANIFEST_NAME else Path(manifest_name).stem + '_images'

    tasks = []
    enrolled = range(identity_offset, identity_offset + n_identities)
    unenrolled = range(identity_offset + n_identities, identity_offset + n_identities + n_unknown_identities)
    degraded_every = None
    if train_degraded_fraction > 0:
        degraded_every = max(1, int(round(1.0 / train_degraded_fraction)))
    for identity in list(enrolled) + list(unenrolled):
        is_enrolled = identity in enrolled
        for split in SPLITS:
            if not is_enrolled and split != 'probe':
                continue
            for index in range(counts[split]):
                degradation = None
                if split == 'probe':
                    degradation = grid[index % len(grid)]
                elif split == 'train' and degraded_every and index % degraded_every == degraded_every - 1:
                    degradation = grid[(index // degraded_every) % len(grid)]
                rel = f"{image_dir}/{split}/{identity:05d}/{index:03d}.png"
                tasks.append(ManifestRecord(path=rel, identity=identity, split=split, index=index,
                                            degradation=None if degradation is None else degradation.to_dict(),
                                            enrolled=is_enrolled))

    logger.info("Rendering benchmark", images=len(tasks), identities=n_identities,
                unknown_identities=n_unknown_identities, seed=seed, n_jobs=n_jobs)
    arrays = Parallel(n_jobs=n_jobs)(
        delayed(_render_task)(seed, r.identity, r.split, r.index, identity_spread,
                              image_size, channels, r.degradation)
        for r in tasks
    )

    estimator = estimator or builtin_sharpness_estimator()
    scores: Dict[str, List[float]] = {split: [] for split in SPLITS}
    for record, array in zip(tasks, arrays):
        path = out_dir / record.path
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(array).save(path, format='PNG')
        scores[record.split].append(estimator.score(array.astype(np.float32) / 255.0))

    protocol = 'open-set' if n_unknown_identities else 'closed-set'
    header = {'seed': seed, 'image_size': image_size, 'channels': channels,
              'identity_offset': identity_offset, 'n_identities': n_identities,
              'n_unknown_identities': n_unknown_identities}
    manifest = DatasetManifest(root=out_dir, records=tasks, protocol=protocol, header=header)
    manifest.write(out_dir / manifest_name)

    report = {'estimator': estimator.name,
              'splits': {split: quality_summary(values) for split, values in scores.items() if values}}
    report_name = QUALITY_REPORT_NAME if manifest_name == MANIFEST_NAME else Path(manifest_name).stem + '_quality.json'
    (out_dir / report_name).write_text(json.dumps(report, indent=2, sort_keys=True), encoding='utf-8')
    manifest.quality_report = report
    logger.info("Wrote benchmark", manifest=str(out_dir / manifest_name), counts=manifest.counts(),
                quality_means={k: v['mean'] for k, v in report['splits'].items()})
    return manifest


def generate_pretraining_set(out_dir: Union[str, Path], n_identities: int, per_identity: int,
                             seed: int = 0, image_size: int = 64, channels: int = 1,
                             identity_spread: float = 1.0, identity_offset: int = 10000,
                             n_jobs: int = 1) -> DatasetManifest:
    """Clean, train-only identities disjoint from the benchmark ids."""
    return generate_benchmark(out_dir, n_identities,
                              per_identity_counts={'train': per_identity, 'gallery': 0, 'probe': 0},
                              degradation_grid=(IDENTITY_DEGRADATION,), seed=seed,
                              image_size=image_size, channels=channels,
                              identity_spread=identity_spread, identity_offset=identity_offset,
                              manifest_name=PRETRAIN_MANIFEST_NAME, n_jobs=n_jobs)


def clean_source(manifest: DatasetManifest, record: ManifestRecord, spread: float = 1.0) -> np.ndarray:
    """Re-render the clean image a generated record was derived from."""
    header = manifest.header
    spec = IdentitySpec(identity_id=record.identity, seed=int(header['seed']), spread=spread)
    return spec.render(record.split, record.index, image_size=int(header['image_size']),
                       channels=int(header['channels']))


def ingest_folder(root: Union[str, Path], naming_rule: str = 'sorted', closed_set: bool = True) -> DatasetManifest:
    """
    Build a manifest from a ``<split>/<identity>/<image>`` folder.

    ``naming_rule`` maps identity folder names to integer ids: ``numeric``
    parses the folder name, ``sorted`` enumerates the sorted names across all
    splits. Unreadable files and unknown split folders become error entries.

    Raises:
        ManifestError: If nothing usable is found, or a probe identity is not
            enrolled while ``closed_set`` is set
    """
    root = Path(root)
    if naming_rule not in ('sorted', 'numeric'):
        raise ConfigurationError(f"naming_rule must be 'sorted' or 'numeric', got '{naming_rule}'")
    if not root.is_dir():
        raise ManifestError(f"dataset folder not found: {root}")

    errors: List[Dict] = []
    found: List[Tuple[str, str, Path]] = []
    for split_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if split_dir.name not in SPLITS:
            errors.append({'path': str(split_dir.relative_to(root)), 'error': f"unknown split '{split_dir.name}'"})
            continue
        for identity_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            for image_path in sorted(p for p in identity_dir.iterdir() if p.is_file()):
                if image_path.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                found.append((split_dir.name, identity_dir.name, image_path))

    names = sorted({name for _, name, _ in found})
    if naming_rule == 'numeric':
        ids = {}
        for name in names:
            try:
                ids[name] = int(name)
            except ValueError:
                errors.append({'path': name, 'error': 'identity folder name is not numeric'})
    else:
        ids = {name: i for i, name in enumerate(names)}

    gallery_names = {name for split, name, _ in found if split == 'gallery'}
    records: List[ManifestRecord] = []
    index_counter: Dict[Tuple[str, str], int] = {}
    for split, name, image_path in found:
        if name not in ids:
            continue
        rel = str(image_path.relative_to(root))
        try:
            with Image.open(image_path) as img:
                img.verify()
        except Exception as e:
            errors.append({'path': rel, 'error': f"unreadable image: {str(e)}"})
            logger.warning("Skipping unreadable image", path=rel, error=str(e))
            continue
        key = (split, name)
        index = index_counter.get(key, 0)
        index_counter[key] = index + 1
        records.append(ManifestRecord(path=rel, identity=ids[name], split=split, index=index,
                                      enrolled=name in gallery_names))

    if not records:
        raise ManifestError(f"no readable images under {root}")
    missing = sorted({r.identity for r in records if r.split == 'probe' and not r.enrolled})
    if missing and closed_set:
        raise ManifestError(f"probe identities absent from gallery under closed-set protocol: {missing}")

    manifest = DatasetManifest(root=root, records=records,
                               protocol='open-set' if missing else 'closed-set',
                               header={'source': 'ingest', 'naming_rule': naming_rule}, errors=errors)
    logger.info("Ingested folder", root=str(root), counts=manifest.counts(), errors=len(errors))
    return manifest


def label_map_for(manifest: DatasetManifest, split: str = 'train') -> Dict[int, int]:
    return {identity: label for label, identity in enumerate(manifest.identities(split))}


class ManifestDataset(Dataset):
    """``(image tensor, class label)`` pairs for one split."""

    def __init__(self, manifest: DatasetManifest, split: str = 'train',
                 label_map: Optional[Dict[int, int]] = None, channels: Optional[int] = None):
        self.manifest = manifest
        self.records = manifest.split(split)
        self.label_map = label_map if label_map is not None else label_map_for(manifest, split)
        self.channels = channels or int(manifest.header.get('channels', 1))

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int):
        record = self.records[idx]
        image = load_image(self.manifest.resolve(record), channels=self.channels)
        return to_tensor(image), self.label_map[record.identity]


class ManifestImages(Sequence):
    """Lazy image sequence over manifest records, used for gate calibration."""

    def __init__(self, manifest: DatasetManifest, split: Optional[str] = 'train', channels: Optional[int] = None):
        self.manifest = manifest
        self.records = manifest.records if split is None else manifest.split(split)
        self.channels = channels or int(manifest.header.get('channels', 1))

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx):
        return load_image(self.manifest.resolve(self.records[idx]), channels=self.channels)
