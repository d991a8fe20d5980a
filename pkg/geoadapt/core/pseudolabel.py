"""
Génération de pseudo-labels sur le domaine cible.

Pour chaque scan cible : recherche des K candidats les plus proches par
descripteur global, proposition de correspondances locales, score du
classifieur de cohérence géométrique, puis décision par seuils :

- Positive si β ≥ α_pos ;
- Negative si β ≤ α_neg ;
- Neither sinon.

Un scan sans au moins un positif et un négatif n'est pas retenu comme ancre.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from geoadapt.core.base_extractor import BaseExtractor
from geoadapt.core.correspondence import CorrespondenceConfig, propose_correspondences
from geoadapt.core.datasets import DatasetManifest
from geoadapt.core.errors import ParseError, StarvationError, ValidationError
from geoadapt.core.gcc import (
    ConsistencyConfig,
    PairDiagnostic,
    PairScore,
    inlier_confidence,
    pair_diagnostic,
    score_pair,
)
from geoadapt.core.geometry import SpatialIndex, pairwise_pose_distances
from geoadapt.core.labels import Association, LabelingConfig, label_from_distance
from geoadapt.core.tinynet import MLP

logger = logging.getLogger(__name__)


@dataclass
class PseudoLabelConfig:
    """
    Attributes:
        alpha_pos: Seuil de score pour un positif
        alpha_neg: Seuil de score pour un négatif
        k: Nombre de candidats considérés par ancre
        temporal_exclusion_window: Scans voisins du même parcours exclus des candidats
    """

    alpha_pos: float = 0.95
    alpha_neg: float = 0.2
    k: int = 50
    temporal_exclusion_window: int = 50

    def __post_init__(self):
        if not 0.0 <= self.alpha_neg < self.alpha_pos <= 1.0:
            raise ValidationError(
                f"Seuils invalides : 0 ≤ alpha_neg ({self.alpha_neg}) < alpha_pos ({self.alpha_pos}) ≤ 1 requis"
            )
        if self.k < 1:
            raise ValidationError("pseudolabel.k doit être au moins 1")
        if self.temporal_exclusion_window < 0:
            raise ValidationError("pseudolabel.temporal_exclusion_window doit être positif ou nul")


@dataclass(frozen=True)
class Candidate:
    index: int
    distance: float


@dataclass
class PseudoLabel:
    anchor_id: str
    candidate_id: str
    decision: Association
    beta: float
    l2_distance: float = 0.0


@dataclass
class TrainingTuple:
    """Une ancre, ses positifs et ses négatifs (non vides, disjoints, sans l'ancre)."""

    anchor_id: str
    positive_ids: List[str]
    negative_ids: List[str]

    def __post_init__(self):
        if not self.positive_ids or not self.negative_ids:
            raise ValidationError(f"Tuple {self.anchor_id} sans positif ou sans négatif")
        if set(self.positive_ids) & set(self.negative_ids):
            raise ValidationError(f"Tuple {self.anchor_id} : positifs et négatifs non disjoints")
        if self.anchor_id in self.positive_ids or self.anchor_id in self.negative_ids:
            raise ValidationError(f"Tuple {self.anchor_id} : l'ancre figure parmi ses exemples")


def _eligible_mask(
    n: int, anchor_index: Optional[int], traversals: Optional[Sequence[str]], window: int
) -> np.ndarray:
    eligible = np.ones(n, dtype=bool)
    if anchor_index is None:
        return eligible
    lo, hi = max(0, anchor_index - window), min(n, anchor_index + window + 1)
    nearby = np.arange(lo, hi)
    if traversals is not None:
        nearby = nearby[[traversals[j] == traversals[anchor_index] for j in nearby]]
    eligible[nearby] = False
    eligible[anchor_index] = False
    return eligible


def retrieve_candidates(
    anchor,
    database: Union[np.ndarray, SpatialIndex],
    cfg: PseudoLabelConfig,
    anchor_index: Optional[int] = None,
    traversals: Optional[Sequence[str]] = None,
) -> List[Candidate]:
    """
    Les K candidats les plus proches de l'ancre par distance L2 des descripteurs globaux.

    L'ancre elle-même et les scans du même parcours à moins de
    `temporal_exclusion_window` positions sont exclus.

    Args:
        anchor: Descripteur global de l'ancre
        database: Descripteurs globaux (n, d) ou index déjà construit
        cfg: Configuration (K, fenêtre d'exclusion)
        anchor_index: Position de l'ancre dans la base, si elle en fait partie
        traversals: Parcours de chaque entrée de la base

    Returns:
        Exactement K candidats, par distance croissante puis indice croissant

    Raises:
        ValidationError: Si la base ne contient pas K candidats éligibles
    """
    index = database if isinstance(database, SpatialIndex) else SpatialIndex(database)
    n = len(index)
    window = cfg.temporal_exclusion_window
    eligible = _eligible_mask(n, anchor_index, traversals, window)
    if int(eligible.sum()) < cfg.k:
        raise ValidationError(
            f"Base trop petite : {int(eligible.sum())} candidats éligibles pour K = {cfg.k}"
        )
    reach = cfg.k + (2 * window + 1 if anchor_index is not None else 0)
    candidates = [(i, d) for i, d in index.knn(anchor, reach) if eligible[i]]
    return [Candidate(i, d) for i, d in candidates[: cfg.k]]


def label_pair(beta: Union[float, PairScore], cfg: PseudoLabelConfig) -> Association:
    """Décision d'un pseudo-label à partir du score de la paire."""
    value = beta.beta if isinstance(beta, PairScore) else float(beta)
    if value >= cfg.alpha_pos:
        return Association.POSITIVE
    if value <= cfg.alpha_neg:
        return Association.NEGATIVE
    return Association.NEITHER


def build_tuples(labels: Sequence[PseudoLabel]) -> List[TrainingTuple]:
    """
    Regroupe les pseudo-labels par ancre en tuples d'entraînement.

    Les labels Neither sont ignorés ; une ancre sans positif ou sans négatif
    est écartée.

    Raises:
        StarvationError: Si aucun tuple ne peut être construit
    """
    grouped: "OrderedDict[str, Tuple[List[str], List[str]]]" = OrderedDict()
    for label in labels:
        positives, negatives = grouped.setdefault(label.anchor_id, ([], []))
        if label.candidate_id == label.anchor_id:
            continue
        if label.decision == Association.POSITIVE and label.candidate_id not in positives:
            positives.append(label.candidate_id)
        elif label.decision == Association.NEGATIVE and label.candidate_id not in negatives:
            negatives.append(label.candidate_id)
    tuples = [
        TrainingTuple(anchor, positives, negatives)
        for anchor, (positives, negatives) in grouped.items()
        if positives and negatives
    ]
    if not tuples:
        n_pos = sum(label.decision == Association.POSITIVE for label in labels)
        n_neg = sum(label.decision == Association.NEGATIVE for label in labels)
        raise StarvationError(
            f"Aucun tuple d'entraînement : {len(grouped)} ancres, {n_pos} positifs, {n_neg} négatifs"
        )
    logger.info("%d tuples retenus sur %d ancres", len(tuples), len(grouped))
    return tuples


@dataclass
class PseudoLabelResult:
    labels: List[PseudoLabel]
    diagnostics: List[PairDiagnostic] = field(default_factory=list)
    tuples: List[TrainingTuple] = field(default_factory=list)


def extract_all(
    extractor: BaseExtractor, manifest: DatasetManifest, threads: int = 1
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Descripteurs globaux (n, d) et locaux de tous les scans d'un manifeste."""
    clouds = manifest.clouds()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        outputs = list(pool.map(extractor.extract, clouds))
    return np.stack([g for g, _ in outputs]), [local for _, local in outputs]


def pseudo_label_dataset(
    extractor: BaseExtractor,
    scorer: MLP,
    target: DatasetManifest,
    cfg: PseudoLabelConfig,
    consistency: Optional[ConsistencyConfig] = None,
    correspondence: Optional[CorrespondenceConfig] = None,
    threads: int = 1,
    audit_path: Optional[Union[str, Path]] = None,
    header: Optional[str] = None,
) -> PseudoLabelResult:
    """
    Pseudo-labels et tuples d'entraînement d'un jeu cible, sans ses poses.

    Le fichier d'audit, s'il est demandé, est écrit avant la construction des
    tuples, de sorte qu'il existe même en cas de famine.

    Raises:
        StarvationError: Si aucun tuple ne peut être construit
    """
    consistency = consistency or ConsistencyConfig()
    correspondence = correspondence or CorrespondenceConfig()
    target = target.without_poses()
    clouds = target.clouds()
    ids = target.scan_ids
    global_desc, local_desc = extract_all(extractor, target, threads)
    index = SpatialIndex(global_desc)
    traversals = target.traversals

    def label_anchor(i: int) -> Tuple[List[PseudoLabel], List[PairDiagnostic]]:
        labels, diagnostics = [], []
        for candidate in retrieve_candidates(global_desc[i], index, cfg, i, traversals):
            j = candidate.index
            corr = propose_correspondences(
                local_desc[i],
                local_desc[j],
                (clouds[i], clouds[j]),
                correspondence.max_correspondences,
                correspondence.mutual,
            )
            confidence = inlier_confidence(corr, (clouds[i], clouds[j]), consistency)
            score = score_pair(scorer, confidence)
            labels.append(PseudoLabel(ids[i], ids[j], label_pair(score, cfg), score.beta, candidate.distance))
            diagnostics.append(pair_diagnostic(ids[i], ids[j], score, confidence))
        return labels, diagnostics

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_anchor = list(pool.map(label_anchor, range(len(target))))
    labels = [label for anchor_labels, _ in per_anchor for label in anchor_labels]
    diagnostics = [record for _, records in per_anchor for record in records]
    if audit_path is not None:
        write_audit(audit_path, labels, header)
    return PseudoLabelResult(labels, diagnostics, build_tuples(labels))


def labels_from_poses(
    manifest: DatasetManifest,
    labeling: LabelingConfig,
    cfg: PseudoLabelConfig,
    global_desc: Optional[np.ndarray] = None,
) -> List[PseudoLabel]:
    """
    Labels de vérité terrain, par distance entre poses.

    Avec des descripteurs globaux, seuls les K candidats retrouvés sont
    labellisés (même structure que les pseudo-labels) ; sinon tous les scans
    éligibles le sont.
    """
    poses = manifest.poses()
    distances = pairwise_pose_distances(poses)
    ids = manifest.scan_ids
    traversals = manifest.traversals
    index = SpatialIndex(global_desc) if global_desc is not None else None
    labels = []
    for i in range(len(manifest)):
        if index is not None:
            candidates = [
                (c.index, c.distance) for c in retrieve_candidates(global_desc[i], index, cfg, i, traversals)
            ]
        else:
            eligible = _eligible_mask(len(manifest), i, traversals, cfg.temporal_exclusion_window)
            candidates = [(int(j), 0.0) for j in np.flatnonzero(eligible)]
        for j, l2 in candidates:
            decision = label_from_distance(float(distances[i, j]), labeling)
            beta = {Association.POSITIVE: 1.0, Association.NEGATIVE: 0.0}.get(decision, 0.5)
            labels.append(PseudoLabel(ids[i], ids[j], decision, beta, l2))
    return labels


def tuples_from_poses(
    manifest: DatasetManifest,
    labeling: LabelingConfig,
    cfg: PseudoLabelConfig,
    global_desc: Optional[np.ndarray] = None,
) -> List[TrainingTuple]:
    """Tuples de vérité terrain, labellisés par distance entre poses."""
    return build_tuples(labels_from_poses(manifest, labeling, cfg, global_desc))


def write_audit(
    path: Union[str, Path], labels: Sequence[PseudoLabel], header: Optional[str] = None
) -> Path:
    """Écrit le fichier d'audit : `anchor_id, candidate_id, l2_distance, beta, decision`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        if header:
            handle.write(f"# {header}\n")
        for label in labels:
            handle.write(
                f"{label.anchor_id}, {label.candidate_id}, {label.l2_distance:.9g}, "
                f"{label.beta:.9g}, {label.decision.value}\n"
            )
    return path


def read_audit(path: Union[str, Path]) -> List[PseudoLabel]:
    labels = []
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = [f.strip() for f in text.split(",")]
            try:
                anchor, candidate, l2, beta, decision = fields
                labels.append(PseudoLabel(anchor, candidate, Association(decision), float(beta), float(l2)))
            except ValueError:
                raise ParseError("Ligne d'audit mal formée", path=str(path), line=number)
    return labels


def write_tuples(
    path: Union[str, Path], tuples: Sequence[TrainingTuple], header: Optional[str] = None
) -> Path:
    """Écrit les tuples : `anchor_id | positifs... | négatifs...`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        if header:
            handle.write(f"# {header}\n")
        for item in tuples:
            handle.write(
                f"{item.anchor_id} | {' '.join(item.positive_ids)} | {' '.join(item.negative_ids)}\n"
            )
    return path


def read_tuples(path: Union[str, Path]) -> List[TrainingTuple]:
    tuples = []
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = [part.strip() for part in text.split("|")]
            if len(parts) != 3:
                raise ParseError("3 sections attendues : ancre | positifs | négatifs", path=str(path), line=number)
            try:
                tuples.append(TrainingTuple(parts[0], parts[1].split(), parts[2].split()))
            except ValidationError as error:
                raise ParseError(str(error), path=str(path), line=number)
    return tuples
