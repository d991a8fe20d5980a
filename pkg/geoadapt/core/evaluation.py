"""
Évaluation de la reconnaissance de lieux.

Métriques de recherche (Recall@N, courbe précision-rappel), diagnostics de
séparabilité des descripteurs globaux, histogramme des distances des paires
positives et AUC ROC du classifieur. Toutes les métriques sont des fonctions
pures des descripteurs et des poses.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from dataclasses_json import dataclass_json
from scipy.integrate import trapezoid
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from geoadapt.core.base_extractor import BaseExtractor
from geoadapt.core.datasets import DATABASE, QUERY, DatasetManifest
from geoadapt.core.errors import DataError, ValidationError
from geoadapt.core.geometry import Pose, pairwise_pose_distances, pose_distance
from geoadapt.core.labels import LabelingConfig
from geoadapt.core.pseudolabel import extract_all

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    """
    Attributes:
        revisit_threshold: Distance de revisite en mètres (3 m ; 5 m pour les jeux de type ALITA)
        recall_ns: Valeurs de N ; "1%" désigne ceil(0,01 × taille de la base)
        histogram_bins: Nombre de classes des histogrammes
    """

    revisit_threshold: float = 3.0
    recall_ns: Tuple[str, ...] = ("1", "5", "1%")
    histogram_bins: int = 50

    def __post_init__(self):
        self.recall_ns = tuple(str(n) for n in self.recall_ns)
        if self.revisit_threshold <= 0:
            raise ValidationError("eval.revisit_threshold doit être strictement positif")
        if self.histogram_bins < 1:
            raise ValidationError("eval.histogram_bins doit être au moins 1")
        for n in self.recall_ns:
            resolve_n(n, 100)


def resolve_n(n: Union[str, int], database_size: int) -> int:
    """Convertit une valeur de N (entier ou pourcentage) en nombre de résultats."""
    text = str(n).strip()
    try:
        if text.endswith("%"):
            value = math.ceil(float(text[:-1]) / 100.0 * database_size)
        else:
            value = int(text)
    except ValueError:
        raise ValidationError(f"Valeur de N invalide : {n}")
    if value < 1:
        raise ValidationError(f"N doit désigner au moins un résultat : {n}")
    return value


@dataclass
class DescriptorSet:
    """Descripteurs globaux d'un ensemble de scans, avec leurs poses éventuelles."""

    ids: List[str]
    descriptors: np.ndarray
    poses: Optional[List[Pose]] = None

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != len(self.ids):
            raise ValidationError("Un descripteur global par identifiant est attendu")
        if self.poses is not None and len(self.poses) != len(self.ids):
            raise ValidationError("Une pose par identifiant est attendue")

    def __len__(self) -> int:
        return len(self.ids)

    def require_poses(self) -> List[Pose]:
        if self.poses is None:
            raise DataError("L'évaluation nécessite les poses")
        return self.poses

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        matrices = np.stack([p.as_matrix() for p in self.poses]) if self.poses else np.zeros((0, 4, 4))
        with open(path, "wb") as handle:
            np.savez(handle, ids=np.array(self.ids), descriptors=self.descriptors, poses=matrices)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DescriptorSet":
        with np.load(path) as data:
            poses = [Pose.from_matrix(m) for m in data["poses"]] or None
            return cls([str(i) for i in data["ids"]], data["descriptors"], poses)

    @classmethod
    def concat(cls, *sets: "DescriptorSet") -> "DescriptorSet":
        """Réunit plusieurs ensembles ; les poses ne sont gardées que si tous en ont."""
        ids = [scan_id for s in sets for scan_id in s.ids]
        descriptors = np.concatenate([s.descriptors for s in sets])
        poses = [p for s in sets for p in s.poses] if all(s.poses is not None for s in sets) else None
        return cls(ids, descriptors, poses)


def describe(extractor: BaseExtractor, manifest: DatasetManifest, threads: int = 1) -> DescriptorSet:
    """Calcule les descripteurs globaux de tous les scans d'un manifeste."""
    global_desc, _ = extract_all(extractor, manifest, threads)
    poses = manifest.poses() if manifest.has_poses() else None
    return DescriptorSet(manifest.scan_ids, global_desc, poses)


def rank_database(
    queries: np.ndarray, database: np.ndarray, top: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Classement exhaustif de la base pour chaque requête.

    Returns:
        (indices, distances) de forme (q, top), distances croissantes et
        indice le plus petit en cas d'égalité
    """
    distances = cdist(np.asarray(queries, dtype=np.float64), np.asarray(database, dtype=np.float64))
    order = np.argsort(distances, axis=1, kind="stable")
    if top is not None:
        order = order[:, :top]
    return order, np.take_along_axis(distances, order, axis=1)


@dataclass
class RetrievalResult:
    query_id: str
    ranked_ids: List[str]
    distances: np.ndarray
    success_rank: Optional[int] = None


@dataclass_json
@dataclass
class RecallReport:
    """Recall@N en pourcentage, avec le nombre de requêtes évaluées et exclues."""

    recalls: Dict[str, float]
    n_queries: int
    n_excluded: int
    database_size: int


def _revisit_matrix(queries: DescriptorSet, database: DescriptorSet, threshold: float) -> np.ndarray:
    q = np.stack([p.translation for p in queries.require_poses()])
    d = np.stack([p.translation for p in database.require_poses()])
    return cdist(q, d) <= threshold


def retrieve(
    queries: DescriptorSet, database: DescriptorSet, cfg: EvalConfig, top: int
) -> List[RetrievalResult]:
    """Résultats de recherche des `top` premiers scans pour chaque requête."""
    order, distances = rank_database(queries.descriptors, database.descriptors, top)
    revisit = _revisit_matrix(queries, database, cfg.revisit_threshold)
    results = []
    for qi, query_id in enumerate(queries.ids):
        hits = np.flatnonzero(revisit[qi, order[qi]])
        results.append(
            RetrievalResult(
                query_id,
                [database.ids[j] for j in order[qi]],
                distances[qi],
                int(hits[0]) + 1 if hits.size else None,
            )
        )
    return results


def recall_at_n(queries: DescriptorSet, database: DescriptorSet, cfg: Optional[EvalConfig] = None) -> RecallReport:
    """
    Recall@N moyen, en pourcentage.

    Une requête réussit à N si l'un de ses N premiers résultats est à moins de
    `revisit_threshold` de sa pose. Les requêtes sans aucune revisite dans la
    base sont exclues du dénominateur et comptées.
    """
    cfg = cfg or EvalConfig()
    n_db = len(database)
    if n_db == 0:
        raise ValidationError("Base de données vide")
    ns = {key: min(resolve_n(key, n_db), n_db) for key in cfg.recall_ns}
    revisit = _revisit_matrix(queries, database, cfg.revisit_threshold)
    valid = revisit.any(axis=1)
    n_excluded = int((~valid).sum())
    if n_excluded:
        logger.warning("%d requêtes sans revisite exclues du calcul du rappel", n_excluded)

    order, _ = rank_database(queries.descriptors, database.descriptors, max(ns.values()))
    hits = np.take_along_axis(revisit, order, axis=1)[valid]
    n_valid = int(valid.sum())
    recalls = {}
    for key, n in ns.items():
        recalls[key] = 100.0 * float(hits[:, :n].any(axis=1).sum()) / n_valid if n_valid else 0.0
    return RecallReport(recalls, n_valid, n_excluded, n_db)


@dataclass_json
@dataclass
class PRCurve:
    """Points (seuil, précision, rappel) et aire sous la courbe."""

    thresholds: List[float] = field(default_factory=list)
    precision: List[float] = field(default_factory=list)
    recall: List[float] = field(default_factory=list)
    auc: float = 0.0


def pr_curve(queries: DescriptorSet, database: DescriptorSet, cfg: Optional[EvalConfig] = None) -> PRCurve:
    """
    Courbe précision-rappel par balayage d'un seuil sur la distance du premier résultat.

    À chaque seuil, une requête est acceptée si la distance de son premier
    résultat est inférieure ou égale au seuil. Vrai positif : acceptée et
    correcte ; faux positif : acceptée et incorrecte. Le rappel est rapporté
    au nombre de requêtes ayant une revisite, si bien qu'au seuil le plus
    lâche il vaut le Recall@1.
    """
    cfg = cfg or EvalConfig()
    order, distances = rank_database(queries.descriptors, database.descriptors, 1)
    revisit = _revisit_matrix(queries, database, cfg.revisit_threshold)
    correct = revisit[np.arange(len(queries)), order[:, 0]]
    has_revisit = revisit.any(axis=1)
    n_revisit = int(has_revisit.sum())
    top1 = distances[:, 0]

    curve = PRCurve()
    if n_revisit == 0:
        logger.warning("Aucune requête avec revisite : courbe précision-rappel vide")
        return curve
    for threshold in np.unique(top1):
        accepted = top1 <= threshold
        tp = int((accepted & correct).sum())
        fp = int((accepted & ~correct).sum())
        curve.thresholds.append(float(threshold))
        curve.precision.append(tp / (tp + fp) if tp + fp else 1.0)
        curve.recall.append(tp / n_revisit)
    curve.auc = float(trapezoid([1.0] + curve.precision, [0.0] + curve.recall))
    return curve


@dataclass_json
@dataclass
class SeparabilityHistogram:
    """Histogrammes normalisés des distances L2 positives et négatives."""

    edges: List[float]
    positive: List[float]
    negative: List[float]
    overlap: float


def overlap_histogram(
    positive_distances: Sequence[float], negative_distances: Sequence[float], bins: int = 50
) -> SeparabilityHistogram:
    """
    Histogrammes à `bins` classes sur [0, distance maximale] et coefficient de recouvrement.

    Le coefficient est la somme des minima classe à classe des deux
    histogrammes normalisés : 1 pour des distributions identiques, 0 pour des
    supports disjoints.
    """
    positive = np.asarray(positive_distances, dtype=np.float64)
    negative = np.asarray(negative_distances, dtype=np.float64)
    top = float(max(positive.max(initial=0.0), negative.max(initial=0.0)))
    edges = np.linspace(0.0, top, bins + 1) if top > 0 else np.linspace(0.0, 1.0, bins + 1)

    def normalized(values: np.ndarray) -> np.ndarray:
        counts, _ = np.histogram(values, bins=edges)
        return counts / counts.sum() if counts.sum() else counts.astype(np.float64)

    p, n = normalized(positive), normalized(negative)
    if not positive.size or not negative.size:
        logger.warning("Histogramme de séparabilité sans paire positive ou négative")
    return SeparabilityHistogram(edges.tolist(), p.tolist(), n.tolist(), float(np.minimum(p, n).sum()))


def pair_distances(
    descriptors: DescriptorSet, labeling: LabelingConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Distances L2 des paires positives et négatives, labellisées par les poses."""
    poses = descriptors.require_poses()
    rows, cols = np.triu_indices(len(descriptors), 1)
    embedding = cdist(descriptors.descriptors, descriptors.descriptors)[rows, cols]
    world = pairwise_pose_distances(poses)[rows, cols]
    # même partition que label_from_distance : ≤ t_pos positif, ≥ t_neg négatif
    return embedding[world <= labeling.t_pos], embedding[world >= labeling.t_neg]


def separability_histogram(
    descriptors: DescriptorSet, labeling: LabelingConfig, bins: int = 50
) -> SeparabilityHistogram:
    """Séparabilité des descripteurs globaux entre paires positives et négatives."""
    positive, negative = pair_distances(descriptors, labeling)
    return overlap_histogram(positive, negative, bins)


@dataclass_json
@dataclass
class PositiveDistanceHistogram:
    edges: List[float]
    counts: List[int]
    fraction_beyond: float
    n_pairs: int


def positive_distance_histogram(
    tuples: Sequence, poses: Mapping[str, Pose], t_pos: float = 3.0, bins: int = 50
) -> PositiveDistanceHistogram:
    """
    Histogramme des distances entre les poses des ancres et de leurs positifs.

    Rapporte la fraction des paires positives au-delà de `t_pos`.
    """
    distances = np.array(
        [pose_distance(poses[t.anchor_id], poses[p]) for t in tuples for p in t.positive_ids]
    )
    if distances.size == 0:
        return PositiveDistanceHistogram([], [], 0.0, 0)
    top = float(distances.max()) if distances.max() > 0 else 1.0
    counts, edges = np.histogram(distances, bins=bins, range=(0.0, top))
    beyond = float((distances > t_pos).mean())
    return PositiveDistanceHistogram(edges.tolist(), counts.tolist(), beyond, int(distances.size))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Aire sous la courbe ROC, par la statistique de Mann-Whitney (rangs moyens en cas d'égalité).

    Raises:
        ValidationError: Si une seule classe est présente
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("L'AUC nécessite des exemples des deux classes")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def write_table(
    path: Union[str, Path], rows: Sequence[Mapping[str, object]], header: Optional[str] = None
) -> Path:
    """Écrit des lignes de résultats en CSV, précédées d'un commentaire d'en-tête."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: List[str] = []
    for row in rows:
        columns.extend(key for key in row if key not in columns)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        if header:
            handle.write(f"# {header}\n")
        writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format_cell(v) for k, v in row.items()})
    return path


def read_table(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _format_cell(value: object) -> object:
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


def write_pr_curve(path: Union[str, Path], curve: PRCurve, header: Optional[str] = None) -> Path:
    rows = [
        {"threshold": t, "precision": p, "recall": r}
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall)
    ]
    return write_table(path, rows, header)


def write_histogram(
    path: Union[str, Path], edges: Sequence[float], columns: Mapping[str, Sequence[float]], header: Optional[str] = None
) -> Path:
    """Écrit un histogramme, une ligne par classe : bornes puis une colonne par série."""
    rows = []
    for b in range(max(0, len(edges) - 1)):
        row: Dict[str, object] = {"bin_start": float(edges[b]), "bin_end": float(edges[b + 1])}
        for name, values in columns.items():
            row[name] = values[b]
        rows.append(row)
    return write_table(path, rows, header)


@dataclass
class Evaluation:
    recall: RecallReport
    curve: PRCurve
    queries: DescriptorSet
    database: DescriptorSet

    def all_scans(self) -> DescriptorSet:
        """Requêtes et base réunies, pour labelliser les paires par les poses."""
        return DescriptorSet.concat(self.queries, self.database)


def evaluate_extractor(
    extractor: BaseExtractor,
    manifest: DatasetManifest,
    cfg: Optional[EvalConfig] = None,
    threads: int = 1,
    database: Optional[DatasetManifest] = None,
) -> Evaluation:
    """
    Recall@N et courbe précision-rappel d'un extracteur.

    Args:
        extractor: L'extracteur évalué
        manifest: Manifeste des requêtes, ou manifeste complet si `database` est absent
        cfg: Configuration de l'évaluation
        threads: Nombre de fils pour l'extraction
        database: Manifeste de la base, s'il est séparé

    Raises:
        DataError: Poses absentes ou split vide
    """
    cfg = cfg or EvalConfig()
    if database is None:
        database = manifest.split(DATABASE)
        manifest = manifest.split(QUERY)
    if not len(manifest) or not len(database):
        raise DataError("L'évaluation nécessite des requêtes et une base non vides")
    queries = describe(extractor, manifest, threads)
    db = describe(extractor, database, threads)
    return Evaluation(recall_at_n(queries, db, cfg), pr_curve(queries, db, cfg), queries, db)
