"""
Correspondances entre deux nuages de points.

Deux sources de correspondances :

- vérité terrain : les deux nuages sont ramenés dans le repère monde par leurs
  poses, puis appariés par plus proches voisins mutuels à distance bornée ;
- propositions : plus proches voisins mutuels dans l'espace des descripteurs
  locaux, triés par distance et limités en nombre.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from geoadapt.core.errors import ValidationError
from geoadapt.core.geometry import PointCloud, Pose, SpatialIndex, apply_pose

logger = logging.getLogger(__name__)

GROUND_TRUTH = "ground_truth"
PROPOSED = "proposed"
MIN_CORRESPONDENCES = 3


@dataclass(frozen=True)
class Correspondence:
    index_a: int
    index_b: int
    feature_distance: float


@dataclass(eq=False)
class CorrespondenceSet:
    """
    Ensemble ordonné de correspondances.

    Attributes:
        index_a: Indices des points dans le nuage a
        index_b: Indices des points dans le nuage b
        feature_distance: Distance associée à chaque correspondance (≥ 0)
        source: GROUND_TRUTH ou PROPOSED
    """

    index_a: np.ndarray
    index_b: np.ndarray
    feature_distance: np.ndarray
    source: str = PROPOSED

    def __post_init__(self):
        self.index_a = np.asarray(self.index_a, dtype=np.int64).reshape(-1)
        self.index_b = np.asarray(self.index_b, dtype=np.int64).reshape(-1)
        self.feature_distance = np.asarray(self.feature_distance, dtype=np.float64).reshape(-1)
        if not (self.index_a.shape == self.index_b.shape == self.feature_distance.shape):
            raise ValidationError("Les champs d'un ensemble de correspondances doivent avoir la même longueur")
        if self.source not in (GROUND_TRUTH, PROPOSED):
            raise ValidationError(f"Source de correspondances inconnue : {self.source}")
        if np.any(self.feature_distance < 0):
            raise ValidationError("Les distances de correspondance doivent être positives")
        if len(self) > 1:
            pairs = np.stack([self.index_a, self.index_b], axis=1)
            if np.unique(pairs, axis=0).shape[0] != len(self):
                raise ValidationError("Correspondances dupliquées")
            if self.source == PROPOSED and np.any(np.diff(self.feature_distance) < 0):
                raise ValidationError("Les correspondances proposées doivent être triées par distance")

    @classmethod
    def empty(cls, source: str = PROPOSED) -> "CorrespondenceSet":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), source)

    def __len__(self) -> int:
        return int(self.index_a.shape[0])

    def __iter__(self) -> Iterator[Correspondence]:
        for a, b, d in zip(self.index_a, self.index_b, self.feature_distance):
            yield Correspondence(int(a), int(b), float(d))

    def is_degenerate(self) -> bool:
        return len(self) < MIN_CORRESPONDENCES

    def pairs(self) -> set:
        return set(zip(self.index_a.tolist(), self.index_b.tolist()))

    def swapped(self) -> "CorrespondenceSet":
        """Le même ensemble avec les rôles des deux nuages échangés."""
        if self.source == PROPOSED:
            order = np.lexsort((self.index_b, self.feature_distance))
        else:
            order = np.argsort(self.index_b, kind="stable")
        return CorrespondenceSet(
            self.index_b[order], self.index_a[order], self.feature_distance[order], self.source
        )

    def check_bounds(self, n_a: int, n_b: int) -> None:
        if not len(self):
            return
        if self.index_a.min() < 0 or self.index_a.max() >= n_a:
            raise ValidationError("Indice de correspondance hors du nuage a")
        if self.index_b.min() < 0 or self.index_b.max() >= n_b:
            raise ValidationError("Indice de correspondance hors du nuage b")


@dataclass
class CorrespondenceConfig:
    """
    Attributes:
        max_correspondences: Nombre maximal de correspondances proposées (N_c)
        mutual: Filtrage par plus proches voisins mutuels
        gt_max_dist: Distance maximale des correspondances de vérité terrain (mètres)
    """

    max_correspondences: int = 256
    mutual: bool = True
    gt_max_dist: float = 0.3

    def __post_init__(self):
        if self.max_correspondences < 1:
            raise ValidationError("max_correspondences doit être au moins 1")
        if self.gt_max_dist < 0:
            raise ValidationError("gt_max_dist doit être positif ou nul")


def _mutual_nearest(
    a: np.ndarray, b: np.ndarray, mutual: bool
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    nn_ab, d_ab = SpatialIndex(b).nearest_many(a)
    index_a = np.arange(a.shape[0])
    if mutual:
        nn_ba, _ = SpatialIndex(a).nearest_many(b)
        keep = nn_ba[nn_ab] == index_a
        return index_a[keep], nn_ab[keep], d_ab[keep]
    return index_a, nn_ab, d_ab


def gt_correspondences(
    cloud_a: PointCloud,
    cloud_b: PointCloud,
    pose_a: Pose,
    pose_b: Pose,
    max_dist: float,
) -> CorrespondenceSet:
    """
    Correspondances de vérité terrain par alignement des poses.

    Args:
        cloud_a: Premier nuage (repère capteur)
        cloud_b: Second nuage (repère capteur)
        pose_a: Pose de a dans le monde
        pose_b: Pose de b dans le monde
        max_dist: Distance maximale en mètres dans le repère monde

    Returns:
        Ensemble trié par index_a ; vide si les nuages ne se recouvrent pas.
        `feature_distance` contient la distance spatiale.
    """
    if cloud_a.is_empty() or cloud_b.is_empty():
        raise ValidationError("Correspondances impossibles avec un nuage vide")
    world_a = apply_pose(pose_a, cloud_a).points.astype(np.float64)
    world_b = apply_pose(pose_b, cloud_b).points.astype(np.float64)
    index_a, index_b, dist = _mutual_nearest(world_a, world_b, mutual=True)
    keep = dist <= max_dist
    result = CorrespondenceSet(index_a[keep], index_b[keep], dist[keep], GROUND_TRUTH)
    if not len(result):
        logger.debug("Aucune correspondance de vérité terrain : paire sans recouvrement")
    return result


def propose_correspondences(
    l_a: np.ndarray,
    l_b: np.ndarray,
    clouds: Optional[Tuple[PointCloud, PointCloud]] = None,
    cap: int = 256,
    mutual: bool = True,
) -> CorrespondenceSet:
    """
    Propose des correspondances par plus proches voisins dans l'espace des descripteurs locaux.

    Args:
        l_a: Descripteurs locaux du nuage a, (n_a, d)
        l_b: Descripteurs locaux du nuage b, (n_b, d)
        clouds: Les nuages correspondants, pour vérifier l'alignement des indices
        cap: Nombre maximal de correspondances conservées (les plus proches)
        mutual: Ne garder que les voisins mutuels

    Returns:
        Ensemble trié par distance croissante puis index_a ; moins de 3
        éléments signale une paire dégénérée.
    """
    l_a = np.asarray(l_a, dtype=np.float64)
    l_b = np.asarray(l_b, dtype=np.float64)
    if clouds is not None and (len(clouds[0]) != l_a.shape[0] or len(clouds[1]) != l_b.shape[0]):
        raise ValidationError("Les descripteurs locaux doivent être alignés sur les nuages")
    if l_a.shape[0] == 0 or l_b.shape[0] == 0:
        return CorrespondenceSet.empty(PROPOSED)
    index_a, index_b, dist = _mutual_nearest(l_a, l_b, mutual)
    order = np.lexsort((index_a, dist))[:cap]
    return CorrespondenceSet(index_a[order], index_b[order], dist[order], PROPOSED)
