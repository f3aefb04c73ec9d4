"""Recognition evaluation: embedding extraction and closed/open-set metrics.

Conventions:
    * identity score = max cosine similarity over that identity's gallery
      images; ties are broken by gallery insertion order
    * a verification pair is accepted when ``score >= threshold``
    * TAR@FAR is the largest TAR over ROC points whose FAR does not exceed the
      target
    * an open-set probe is accepted when its top similarity is strictly above
      the threshold; the threshold is the smallest unknown-probe top score
      (or +inf) meeting the FPIR target
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.metrics import roc_curve
from sklearn.model_selection import KFold
from sklearn.preprocessing import normalize
from tabulate import tabulate
from torch import nn

from benchmark_data import DatasetManifest, ManifestRecord, load_image, to_tensor
from errors import ConfigurationError, InputError, NumericError, ProtocolError, ROCError
from logging_utils import get_logger
from model_surgery import AdaptedModel
from quality_gate import QualityGate

logger = get_logger('recognition_metrics')

UNIT_NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EvalConfig:
    ks: Tuple[int, ...] = (1, 5, 10, 20)
    fars: Tuple[float, ...] = (1e-4, 1e-3, 1e-2)
    fpirs: Tuple[float, ...] = (1e-2, 1e-1)
    batch_size: int = 32
    template_mode: str = 'max'
    verification_folds: int = 0
    probe_split: str = 'probe'

    def __post_init__(self):
        if self.template_mode not in ('max', 'mean'):
            raise ConfigurationError(f"template_mode must be 'max' or 'mean', got '{self.template_mode}'")
        if self.probe_split not in ('probe', 'gallery'):
            raise ConfigurationError(f"probe_split must be 'probe' or 'gallery', got '{self.probe_split}'")
        if self.verification_folds == 1 or self.verification_folds < 0:
            raise ConfigurationError("verification_folds must be 0 (off) or at least 2")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray
    labels: np.ndarray
    splits: List[str] = field(default_factory=list)
    paths: List[str] = field(default_factory=list)
    enrolled: Optional[np.ndarray] = None
    errors: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            self.embeddings = self.embeddings.reshape(len(self.labels), -1) if self.embeddings.size else np.zeros((0, 0))
        if self.embeddings.shape[0] != len(self.labels):
            raise InputError(f"{self.embeddings.shape[0]} embeddings for {len(self.labels)} labels")
        if self.enrolled is None:
            self.enrolled = np.ones(len(self.labels), dtype=bool)
        norms = np.linalg.norm(self.embeddings, axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOLERANCE:
            raise NumericError("embedding rows must have unit L2 norm")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask) -> 'EmbeddingSet':
        mask = np.asarray(mask, dtype=bool)
        pick = lambda items: [item for item, keep in zip(items, mask) if keep]
        return EmbeddingSet(self.embeddings[mask], self.labels[mask], pick(self.splits),
                            pick(self.paths), self.enrolled[mask])


def _batched(records: Sequence[ManifestRecord], size: int):
    for start in range(0, len(records), size):
        yield records[start:start + size]


def extract(model: nn.Module, manifest: DatasetManifest, gate: Optional[QualityGate] = None,
            batch_size: int = 32, split: Optional[str] = None) -> EmbeddingSet:
    """
    Embed the manifest's images (one split, or all) in evaluation mode.

    Unreadable images are recorded in ``errors`` and left out.
    """
    records = manifest.records if split is None else manifest.split(split)
    channels = int(manifest.header.get('channels', 1))
    was_training = model.training
    model.eval()
    rows, kept, errors = [], [], []
    with torch.no_grad():
        for chunk in _batched(records, batch_size):
            images = []
            for record in chunk:
                try:
                    images.append(to_tensor(load_image(manifest.resolve(record), channels=channels)))
                    kept.append(record)
                except InputError as e:
                    errors.append({'path': record.path, 'error': str(e)})
                    logger.warning("Skipping unreadable image", path=record.path, error=str(e))
            if not images:
                continue
            batch = torch.stack(images)
            if isinstance(model, AdaptedModel) and model.is_twin and gate is not None:
                out = model(batch, gate.alpha_for_images(batch))
            else:
                out = model(batch)
            rows.append(out.double().cpu().numpy())
    model.train(was_training)
    dim = rows[0].shape[1] if rows else 0
    embeddings = normalize(np.concatenate(rows)) if rows else np.zeros((0, dim))
    return EmbeddingSet(embeddings=embeddings,
                        labels=np.array([r.identity for r in kept], dtype=np.int64),
                        splits=[r.split for r in kept], paths=[r.path for r in kept],
                        enrolled=np.array([r.enrolled for r in kept], dtype=bool), errors=errors)


def pool_templates(embeddings: EmbeddingSet) -> EmbeddingSet:
    """One mean-then-renormalized template per identity, in order of first appearance."""
    _, first = np.unique(embeddings.labels, return_index=True)
    identities = embeddings.labels[np.sort(first)]
    means = np.stack([embeddings.embeddings[embeddings.labels == i].mean(axis=0) for i in identities])
    return EmbeddingSet(normalize(means), identities,
                        enrolled=np.array([embeddings.enrolled[embeddings.labels == i].any() for i in identities]))


def identity_scores(gallery: EmbeddingSet, probe: EmbeddingSet) -> Tuple[np.ndarray, np.ndarray]:
    """Template-max similarity of each probe to each gallery identity.

    Returns ``(identities, scores)`` with identities in gallery insertion order.
    """
    _, first = np.unique(gallery.labels, return_index=True)
    identities = gallery.labels[np.sort(first)]
    sims = probe.embeddings @ gallery.embeddings.T
    scores = np.full((len(probe), len(identities)), -np.inf)
    for j, identity in enumerate(identities):
        scores[:, j] = sims[:, gallery.labels == identity].max(axis=1)
    return identities, scores


def rank_retrieval(gallery: EmbeddingSet, probe: EmbeddingSet,
                   ks: Sequence[int] = (1, 5, 10, 20)) -> Dict[int, float]:
    """Fraction of probes whose identity is among the top-k gallery identities."""
    if len(probe) == 0:
        raise ProtocolError("no probes to rank")
    missing = sorted(set(probe.labels.tolist()) - set(gallery.labels.tolist()))
    if missing:
        raise ProtocolError(f"probe identities absent from gallery: {missing}")
    identities, scores = identity_scores(gallery, probe)
    order = np.argsort(-scores, axis=1, kind='stable')
    ranks = np.array([int(np.nonzero(identities[order[i]] == label)[0][0])
                      for i, label in enumerate(probe.labels)])
    return {int(k): float(np.mean(ranks < k)) for k in ks}


def pair_scores(a: EmbeddingSet, b: EmbeddingSet, exclude_self: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Cosine scores and same-identity labels for all pairs between two sets."""
    sims = a.embeddings @ b.embeddings.T
    same = a.labels[:, None] == b.labels[None, :]
    if exclude_self:
        rows, cols = np.triu_indices(len(a), k=1)
        return sims[rows, cols], same[rows, cols].astype(np.int64)
    return sims.ravel(), same.ravel().astype(np.int64)


def verification_accuracy(scores, labels) -> Tuple[float, float]:
    """
    Best accuracy over thresholds at -inf, every midpoint between consecutive
    distinct scores, and +inf. Returns ``(accuracy, threshold)``; ties keep the
    lowest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n = scores.size
    if n == 0:
        raise InputError("no verification pairs")
    order = np.argsort(scores, kind='stable')
    s, y = scores[order], labels[order]
    pos_below = np.concatenate([[0], np.cumsum(y)])
    neg_below = np.concatenate([[0], np.cumsum(~y)])
    cuts = np.concatenate([[0], np.nonzero(s[1:] > s[:-1])[0] + 1, [n]])
    correct = neg_below[cuts] + (pos_below[-1] - pos_below[cuts])
    best = int(np.argmax(correct))
    cut = cuts[best]
    if cut == 0:
        threshold = -np.inf
    elif cut == n:
        threshold = np.inf
    else:
        threshold = (s[cut - 1] + s[cut]) / 2.0
    return float(correct[best] / n), float(threshold)


def verification(pairs: Sequence[Tuple[np.ndarray, np.ndarray, bool]]) -> Tuple[float, float]:
    """Accuracy at the best threshold over explicit ``(emb_a, emb_b, same)`` pairs."""
    scores = [float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))) for a, b, _ in pairs]
    return verification_accuracy(scores, [bool(same) for _, _, same in pairs])


def verification_accuracy_kfold(scores, labels, folds: int = 10, seed: int = 0) -> float:
    """Mean held-out accuracy with the threshold picked on the remaining folds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    accuracies = []
    for train_idx, test_idx in KFold(n_splits=folds, shuffle=True, random_state=seed).split(scores):
        _, threshold = verification_accuracy(scores[train_idx], labels[train_idx])
        accuracies.append(np.mean((scores[test_idx] >= threshold) == labels[test_idx]))
    return float(np.mean(accuracies))


def roc_points(scores, labels) -> List[Tuple[float, float, float]]:
    """Empirical ROC as ``(far, tar, threshold)`` points; a pair is accepted when ``score >= threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if labels.size == 0 or labels.min() == labels.max():
        raise ROCError("ROC needs at least one positive and one negative pair")
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    return list(zip(fpr.tolist(), tpr.tolist(), thresholds.tolist()))


def tar_at_far(scores, labels, fars: Sequence[float] = (1e-4, 1e-3, 1e-2)) -> Dict[float, float]:
    """TAR at each target FAR on the empirical ROC (step function, FAR <= target)."""
    points = np.array(roc_points(scores, labels))
    return {float(far): float(points[points[:, 0] <= far, 1].max()) for far in fars}


def open_set_identification(gallery: EmbeddingSet, probe_known: EmbeddingSet, probe_unknown: EmbeddingSet,
                            fpirs: Sequence[float] = (1e-2, 1e-1)) -> Dict[float, float]:
    """
    TPIR at each target FPIR.

    The threshold is the k-th highest unknown-probe top score, k = floor(FPIR * N),
    or just above the highest one when k = 0. A known probe counts when its rank-1
    match is correct and scores at least the threshold.
    """
    if len(probe_unknown) == 0:
        raise ProtocolError("open-set identification needs at least one unknown probe")
    enrolled = set(gallery.labels.tolist())
    leaked = sorted(set(probe_unknown.labels.tolist()) & enrolled)
    if leaked:
        raise ProtocolError(f"unknown probe identities present in gallery: {leaked}")

    unknown_top = (probe_unknown.embeddings @ gallery.embeddings.T).max(axis=1)
    if len(probe_known):
        identities, scores = identity_scores(gallery, probe_known)
        best = np.argsort(-scores, axis=1, kind='stable')[:, 0]
        known_top = scores[np.arange(len(probe_known)), best]
        correct = identities[best] == probe_known.labels
    else:
        known_top = np.zeros(0)
        correct = np.zeros(0, dtype=bool)

    unknown_desc = np.sort(unknown_top)[::-1]
    n_unknown = len(unknown_desc)
    results = {}
    for fpir in fpirs:
        allowed = int(np.floor(fpir * n_unknown + 1e-9))
        tau = unknown_desc[allowed - 1] if allowed > 0 else np.nextafter(unknown_desc[0], np.inf)
        results[float(fpir)] = float(np.mean(correct & (known_top >= tau))) if len(probe_known) else 0.0
    return results


@dataclass
class EvalReport:
    rank: Dict[int, float] = field(default_factory=dict)
    verification_accuracy: Optional[float] = None
    verification_threshold: Optional[float] = None
    verification_kfold_accuracy: Optional[float] = None
    tar_at_far: Dict[float, float] = field(default_factory=dict)
    tpir_at_fpir: Dict[float, float] = field(default_factory=dict)
    clean_verification_accuracy: Optional[float] = None
    counts: Dict[str, int] = field(default_factory=dict)
    errors: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['rank'] = {str(k): v for k, v in self.rank.items()}
        data['tar_at_far'] = {repr(k): v for k, v in self.tar_at_far.items()}
        data['tpir_at_fpir'] = {repr(k): v for k, v in self.tpir_at_fpir.items()}
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        headers, row = [], []
        for k, value in self.rank.items():
            headers.append(f"Rank-{k}")
            row.append(value)
        headers.append('Verif.Acc')
        row.append(self.verification_accuracy)
        for far, value in self.tar_at_far.items():
            headers.append(f"TAR@FAR={far:g}")
            row.append(value)
        for fpir, value in self.tpir_at_fpir.items():
            headers.append(f"TPIR@FPIR={fpir:g}")
            row.append(value)
        headers.append('Clean Verif.Acc')
        row.append(self.clean_verification_accuracy)
        body = tabulate([row], headers=headers, floatfmt='.4f', missingval='-')
        counts = ', '.join(f"{k}={v}" for k, v in sorted(self.counts.items()))
        return f"{body}\n\ncounts: {counts}\n"

    def write(self, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        json_path = out_dir / 'eval_report.json'
        text_path = out_dir / 'eval_report.txt'
        json_path.write_text(self.to_json(), encoding='utf-8')
        text_path.write_text(self.to_table(), encoding='utf-8')
        return json_path, text_path


def evaluate(model: nn.Module, manifest: DatasetManifest, gate: Optional[QualityGate] = None,
             config: Optional[EvalConfig] = None) -> EvalReport:
    """
    Run every metric family on a manifest.

    Probes are the ``probe_split`` images of enrolled identities; probe images
    of unenrolled identities feed the open-set metrics. Verification scores are
    all probe/gallery pairs; clean verification uses gallery/gallery pairs.
    """
    config = config or EvalConfig()
    gallery = extract(model, manifest, gate, config.batch_size, split='gallery')
    if len(gallery) == 0:
        raise ProtocolError("manifest has no gallery images")
    if config.probe_split == 'gallery':
        probes = gallery
    else:
        probes = extract(model, manifest, gate, config.batch_size, split='probe')
    known = probes.subset(probes.enrolled)
    unknown = probes.subset(~probes.enrolled)
    templates = pool_templates(gallery) if config.template_mode == 'mean' else gallery

    report = EvalReport(errors=gallery.errors + (probes.errors if probes is not gallery else []))
    report.counts = {'gallery_images': len(gallery), 'gallery_identities': len(set(gallery.labels.tolist())),
                     'known_probes': len(known), 'unknown_probes': len(unknown),
                     'skipped_images': len(report.errors)}
    report.rank = rank_retrieval(templates, known, config.ks)

    scores, labels = pair_scores(known, gallery)
    report.verification_accuracy, report.verification_threshold = verification_accuracy(scores, labels)
    if config.verification_folds:
        report.verification_kfold_accuracy = verification_accuracy_kfold(scores, labels, config.verification_folds)
    try:
        report.tar_at_far = tar_at_far(scores, labels, config.fars)
    except ROCError as e:
        report.errors.append({'metric': 'tar_at_far', 'error': str(e)})

    clean_scores, clean_labels = pair_scores(gallery, gallery, exclude_self=True)
    if clean_labels.size and clean_labels.min() != clean_labels.max():
        report.clean_verification_accuracy, _ = verification_accuracy(clean_scores, clean_labels)

    if len(unknown):
        report.tpir_at_fpir = open_set_identification(templates, known, unknown, config.fpirs)
    logger.info("Evaluated", rank=report.rank, verification_accuracy=report.verification_accuracy,
                clean_verification_accuracy=report.clean_verification_accuracy, counts=report.counts)
    return report
