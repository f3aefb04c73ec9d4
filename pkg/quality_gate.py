"""No-reference quality estimation, gate calibration and the alpha transform.

Quality scores are normalized to [0, 1]. A calibrated gate holds the mean and
population standard deviation of scores over ``l`` sampled images and sets
the threshold ``t = mu + sigma``. A score ``q`` becomes a blend weight

    alpha = clip(0.5 + (q - t), 0, 1)

which is 0.5 at the threshold and grows with quality.
"""
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import ndimage

from errors import ConfigurationError, GatingError, InputError
from logging_utils import get_logger

logger = get_logger('quality_gate')

# Donoho's MAD-to-sigma factor for Gaussian noise
MAD_TO_SIGMA = 0.6745


def to_grayscale(image) -> np.ndarray:
    """Reduce an image array or tensor to a 2-D float64 grayscale array."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    array = np.asarray(image, dtype=np.float64)
    if array.size == 0:
        raise InputError("empty image")
    if array.ndim == 3:
        # channel-first tensors (C, H, W) or channel-last arrays (H, W, C)
        if array.shape[0] in (1, 3) and array.shape[0] < array.shape[-1]:
            array = array.mean(axis=0)
        else:
            array = array.mean(axis=-1)
    if array.ndim != 2:
        raise InputError(f"expected a 2-D or 3-D image, got shape {array.shape}")
    if min(array.shape) < 3:
        raise InputError(f"image too small for quality estimation: {array.shape}")
    return array


def estimate_noise_sigma(gray: np.ndarray) -> float:
    """Robust noise level from the median of the diagonal Haar detail band."""
    h, w = (gray.shape[0] // 2) * 2, (gray.shape[1] // 2) * 2
    x = gray[:h, :w]
    detail = (x[0::2, 0::2] - x[0::2, 1::2] - x[1::2, 0::2] + x[1::2, 1::2]) / 2.0
    return float(np.median(np.abs(detail)) / MAD_TO_SIGMA)


class QualityEstimator(ABC):
    """Maps an image to a quality score in [0, 1].

    Subclasses implement ``raw_score``; ``score`` applies the affine map from
    ``nominal_range`` to [0, 1] and clips.
    """

    name: str = 'abstract'
    nominal_range: Tuple[float, float] = (0.0, 1.0)

    @abstractmethod
    def raw_score(self, image) -> float:
        """Score in the estimator's native range."""

    def score(self, image) -> float:
        raw = float(self.raw_score(image))
        if not math.isfinite(raw):
            raise GatingError(f"estimator {self.name} produced a non-finite score")
        low, high = self.nominal_range
        normalized = (raw - low) / (high - low)
        return float(min(1.0, max(0.0, normalized)))

    def score_batch(self, images) -> np.ndarray:
        return np.array([self.score(image) for image in images], dtype=np.float64)


class SharpnessEstimator(QualityEstimator):
    """Laplacian-variance sharpness with a noise penalty.

    ``sharp = 1 - exp(-var(laplace(x)) / sharpness_scale)`` rises with edge
    content and is 0 for a constant image. The result is multiplied by
    ``exp(-sigma_noise / noise_scale)`` so additive noise, which also raises
    the Laplacian variance, lowers the score.
    """

    name = 'laplacian-sharpness'
    nominal_range = (0.0, 1.0)

    def __init__(self, sharpness_scale: float = 0.01, noise_scale: float = 0.01):
        if sharpness_scale <= 0 or noise_scale <= 0:
            raise ConfigurationError("sharpness_scale and noise_scale must be positive")
        self.sharpness_scale = sharpness_scale
        self.noise_scale = noise_scale

    def raw_score(self, image) -> float:
        gray = to_grayscale(image)
        response = ndimage.laplace(gray, mode='reflect')
        sharp = 1.0 - math.exp(-float(response.var()) / self.sharpness_scale)
        penalty = math.exp(-estimate_noise_sigma(gray) / self.noise_scale)
        return sharp * penalty


class GradientEnergyEstimator(QualityEstimator):
    """Variance of the Sobel gradient magnitude, squashed to [0, 1]."""

    name = 'gradient-energy'
    nominal_range = (0.0, 1.0)

    def __init__(self, energy_scale: float = 0.05):
        self.energy_scale = energy_scale

    def raw_score(self, image) -> float:
        gray = to_grayscale(image)
        magnitude = np.hypot(ndimage.sobel(gray, axis=0), ndimage.sobel(gray, axis=1))
        return 1.0 - math.exp(-float(magnitude.var()) / self.energy_scale)


class CallableEstimator(QualityEstimator):
    """Wraps any ``image -> float`` function with a declared native range."""

    def __init__(self, name: str, score_fn: Callable, nominal_range: Tuple[float, float] = (0.0, 1.0)):
        low, high = nominal_range
        if not high > low:
            raise ConfigurationError(f"nominal_range must be increasing, got {nominal_range}")
        self.name = name
        self.score_fn = score_fn
        self.nominal_range = (float(low), float(high))

    def raw_score(self, image) -> float:
        if isinstance(image, np.ndarray) and image.size == 0:
            raise InputError("empty image")
        return self.score_fn(image)


ESTIMATORS: Dict[str, Callable[[], QualityEstimator]] = {
    SharpnessEstimator.name: SharpnessEstimator,
    GradientEnergyEstimator.name: GradientEnergyEstimator,
}


def builtin_sharpness_estimator() -> QualityEstimator:
    return SharpnessEstimator()


def get_estimator(name: str) -> QualityEstimator:
    try:
        return ESTIMATORS[name]()
    except KeyError:
        raise ConfigurationError(
            f"unknown quality estimator '{name}'; available: {sorted(ESTIMATORS)}"
        ) from None


@dataclass(frozen=True)
class GateCalibration:
    mu: float
    sigma: float
    threshold: float
    sample_count: int
    estimator_name: str
    seed: int

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigurationError(f"sigma must be nonnegative, got {self.sigma}")
        if self.threshold != self.mu + self.sigma:
            raise ConfigurationError("threshold must equal mu + sigma")
        if self.sample_count < 1:
            raise ConfigurationError("sample_count must be positive")

    @classmethod
    def from_stats(cls, mu: float, sigma: float, sample_count: int,
                   estimator_name: str, seed: int) -> 'GateCalibration':
        mu, sigma = float(mu), float(sigma)
        return cls(mu=mu, sigma=sigma, threshold=mu + sigma, sample_count=int(sample_count),
                   estimator_name=estimator_name, seed=int(seed))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'GateCalibration':
        return cls(mu=float(data['mu']), sigma=float(data['sigma']),
                   threshold=float(data['threshold']), sample_count=int(data['sample_count']),
                   estimator_name=str(data['estimator_name']), seed=int(data['seed']))

    def to_text(self) -> str:
        lines = [
            f"mu={self.mu!r}",
            f"sigma={self.sigma!r}",
            f"threshold={self.threshold!r}",
            f"l={self.sample_count}",
            f"estimator={self.estimator_name}",
            f"seed={self.seed}",
        ]
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'GateCalibration':
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            key, sep, value = line.partition('=')
            if not sep:
                raise InputError(f"malformed calibration line: {line!r}")
            fields[key.strip()] = value.strip()
        try:
            return cls(mu=float(fields['mu']), sigma=float(fields['sigma']),
                       threshold=float(fields['threshold']), sample_count=int(fields['l']),
                       estimator_name=fields['estimator'], seed=int(fields['seed']))
        except KeyError as e:
            raise InputError(f"calibration record is missing field {e}") from e
        except ValueError as e:
            raise InputError(f"invalid calibration record: {str(e)}") from e


def write_calibration(path: Union[str, Path], calibration: GateCalibration) -> Path:
    path = Path(path)
    path.write_text(calibration.to_text(), encoding='utf-8')
    return path


def read_calibration(path: Union[str, Path]) -> GateCalibration:
    path = Path(path)
    if not path.exists():
        raise InputError(f"calibration file not found: {path}")
    return GateCalibration.from_text(path.read_text(encoding='utf-8'))


def calibrate_gate(estimator: QualityEstimator, dataset: Sequence, l: int, seed: int) -> GateCalibration:
    """
    Estimate mu, sigma and the threshold from ``l`` sampled images.

    Sampling is uniform without replacement when ``l`` does not exceed the
    dataset size and with replacement otherwise. sigma uses the population
    (1/l) form.

    Args:
        estimator: Quality estimator
        dataset: Indexable image source
        l: Number of samples
        seed: Sampling seed

    Returns:
        GateCalibration

    Raises:
        InputError: If the dataset is empty
        ConfigurationError: If l < 1
    """
    size = len(dataset)
    if size == 0:
        raise InputError("cannot calibrate the quality gate on an empty dataset")
    if l < 1:
        raise ConfigurationError(f"calibration sample count must be positive, got {l}")
    rng = np.random.default_rng(seed)
    indices = rng.choice(size, size=l, replace=l > size)

    cache: Dict[int, float] = {}
    scores = np.empty(l, dtype=np.float64)
    for k, idx in enumerate(indices):
        idx = int(idx)
        if idx not in cache:
            cache[idx] = estimator.score(dataset[idx])
        scores[k] = cache[idx]

    mu = float(np.mean(scores))
    sigma = float(np.sqrt(np.mean((scores - mu) ** 2)))
    calibration = GateCalibration.from_stats(mu, sigma, l, estimator.name, seed)
    logger.info("Calibrated quality gate", mu=mu, sigma=sigma,
                threshold=calibration.threshold, l=l, dataset_size=size,
                estimator=estimator.name, seed=seed)
    return calibration


def alpha_from_quality(q, calib: GateCalibration, clamp: bool = True) -> np.ndarray:
    """Blend weights ``0.5 + (q - t)``, clamped to [0, 1] unless ``clamp`` is off."""
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise GatingError("quality scores must be finite")
    alpha = 0.5 + (q - calib.threshold)
    if clamp:
        alpha = np.clip(alpha, 0.0, 1.0)
    return alpha


class QualityGate:
    """Estimator plus calibration; turns an image batch into per-sample alpha."""

    def __init__(self, estimator: QualityEstimator, calibration: Optional[GateCalibration] = None):
        if calibration is not None and calibration.estimator_name != estimator.name:
            raise ConfigurationError(
                f"calibration was computed with '{calibration.estimator_name}', "
                f"gate uses '{estimator.name}'"
            )
        self.estimator = estimator
        self.calibration = calibration

    @property
    def is_calibrated(self) -> bool:
        return self.calibration is not None

    def calibrated(self, dataset: Sequence, l: int, seed: int) -> 'QualityGate':
        return QualityGate(self.estimator, calibrate_gate(self.estimator, dataset, l, seed))

    def scores(self, images) -> np.ndarray:
        return self.estimator.score_batch(images)

    def alpha_for_images(self, images: torch.Tensor) -> torch.Tensor:
        """Per-sample alpha for a ``(B, C, H, W)`` batch in pixel space."""
        if self.calibration is None:
            raise GatingError("quality gate is not calibrated")
        alpha = alpha_from_quality(self.scores(images), self.calibration)
        return torch.as_tensor(alpha, dtype=images.dtype, device=images.device)
