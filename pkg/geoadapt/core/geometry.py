"""
Primitives géométriques de GeoAdapt.

Ce module fournit les nuages de points, les poses rigides, leur application,
la distance entre poses, le sous-échantillonnage par voxels et un index spatial
exact (k plus proches voisins et requêtes par rayon) utilisé par tous les autres
modules, aussi bien en 3D que dans les espaces de descripteurs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from geoadapt.core.errors import ValidationError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-6

# Une réponse de requête de voisinage : (indice, distance)
Neighbor = Tuple[int, float]


@dataclass(eq=False)
class PointCloud:
    """
    Un nuage de points dans le repère du capteur.

    L'ordre des points est stable : l'indice i désigne toujours le même point.

    Attributes:
        points: Tableau (n, 3) de coordonnées en mètres (réels 32 bits)
        intensity: Intensité optionnelle par point, dans [0, 1]
    """

    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float32)
        if points.size == 0:
            points = points.reshape(0, 3)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValidationError(
                f"Un nuage de points doit être de forme (n, 3), reçu {points.shape}"
            )
        if not np.all(np.isfinite(points)):
            raise ValidationError("Le nuage de points contient des coordonnées non finies")
        self.points = points

        if self.intensity is not None:
            intensity = np.asarray(self.intensity, dtype=np.float32).reshape(-1)
            if intensity.shape[0] != points.shape[0]:
                raise ValidationError(
                    "L'intensité doit avoir une valeur par point "
                    f"({intensity.shape[0]} != {points.shape[0]})"
                )
            if not np.all(np.isfinite(intensity)):
                raise ValidationError("L'intensité contient des valeurs non finies")
            self.intensity = np.clip(intensity, 0.0, 1.0)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def is_empty(self) -> bool:
        return len(self) == 0

    def subset(self, indices: np.ndarray) -> "PointCloud":
        """Retourne le sous-nuage des indices donnés, dans leur ordre."""
        indices = np.asarray(indices, dtype=np.int64)
        intensity = None if self.intensity is None else self.intensity[indices]
        return PointCloud(self.points[indices], intensity)


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Une transformation rigide : rotation orthonormale (det = +1) et translation.

    Attributes:
        rotation: Matrice 3×3
        translation: Vecteur de 3 composantes en mètres
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValidationError("La pose contient des valeurs non finies")
        if np.max(np.abs(rotation @ rotation.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValidationError("La rotation de la pose n'est pas orthonormale")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ValidationError("La rotation de la pose doit avoir un déterminant de +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float]) -> "Pose":
        """Construit une pose tournée de `yaw` radians autour de l'axe z."""
        c, s = np.cos(yaw), np.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rotation, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        """Construit une pose depuis une matrice 3×4 ou 4×4."""
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        """Retourne la matrice homogène 4×4."""
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def inverse(self) -> "Pose":
        rotation_t = self.rotation.T
        return Pose(rotation_t, -rotation_t @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Retourne self ∘ other (other est appliquée en premier)."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def apply_pose(pose: Pose, cloud: PointCloud) -> PointCloud:
    """
    Applique une pose à un nuage : chaque point devient R·x + t.

    L'intensité et l'ordre des points sont conservés.

    Args:
        pose: La pose à appliquer
        cloud: Le nuage à transformer

    Returns:
        Le nuage transformé
    """
    if not isinstance(pose, Pose):
        raise ValidationError("apply_pose attend une Pose")
    points = cloud.points.astype(np.float64) @ pose.rotation.T + pose.translation
    intensity = None if cloud.intensity is None else cloud.intensity.copy()
    return PointCloud(points, intensity)


def pose_distance(a: Pose, b: Pose) -> float:
    """Distance euclidienne entre les translations de deux poses (la rotation est ignorée)."""
    return float(np.linalg.norm(a.translation - b.translation))


def pairwise_pose_distances(poses: Sequence[Pose]) -> np.ndarray:
    """Matrice des distances entre toutes les paires de poses."""
    if not poses:
        return np.zeros((0, 0))
    translations = np.stack([pose.translation for pose in poses])
    return cdist(translations, translations)


class SpatialIndex:
    """
    Index spatial immuable sur un ensemble fixe de points de dimension d.

    Les requêtes renvoient exactement les résultats d'un parcours linéaire
    exhaustif : distances euclidiennes exactes, égalités départagées par le plus
    petit indice. Le k-d tree ne sert qu'à réduire l'ensemble des candidats.
    """

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        if points.ndim != 2 or points.shape[0] == 0:
            raise ValidationError("Un index spatial nécessite au moins un point")
        if not np.all(np.isfinite(points)):
            raise ValidationError("Un index spatial ne peut pas contenir de valeurs non finies")
        self._points = points
        self._points.setflags(write=False)
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return int(self._points.shape[0])

    @property
    def dim(self) -> int:
        return int(self._points.shape[1])

    @property
    def points(self) -> np.ndarray:
        return self._points

    def _as_query(self, query) -> np.ndarray:
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        if query.shape[0] != self.dim:
            raise ValidationError(
                f"Dimension de requête {query.shape[0]} incompatible avec l'index ({self.dim})"
            )
        return query

    def _rank(self, candidates: np.ndarray, query: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        # Distances recalculées exactement puis triées par (distance, indice)
        candidates = np.asarray(candidates, dtype=np.int64)
        distances = np.linalg.norm(self._points[candidates] - query, axis=1)
        order = np.lexsort((candidates, distances))
        return candidates[order], distances[order]

    def knn(self, query, k: int) -> List[Neighbor]:
        """
        Les k plus proches voisins de la requête, triés par distance croissante.

        Args:
            query: Vecteur de dimension d
            k: Nombre de voisins (tous les points si k dépasse la taille de l'index)

        Returns:
            Liste de couples (indice, distance)
        """
        if k < 1:
            raise ValidationError("k doit être au moins 1")
        query = self._as_query(query)
        k = min(int(k), len(self))
        distances, _ = self._tree.query(query, k=k)
        kth = float(np.atleast_1d(distances)[-1])
        # Tous les points à égalité avec le k-ième sont candidats
        radius = kth * (1.0 + 1e-9) + 1e-12
        candidates = np.asarray(self._tree.query_ball_point(query, r=radius), dtype=np.int64)
        indices, dists = self._rank(candidates, query)
        return [(int(i), float(d)) for i, d in zip(indices[:k], dists[:k])]

    def radius_query(self, query, r: float) -> List[Neighbor]:
        """Tous les points à distance ≤ r de la requête, triés par distance puis indice."""
        if r < 0:
            raise ValidationError("Le rayon doit être positif ou nul")
        query = self._as_query(query)
        candidates = np.asarray(
            self._tree.query_ball_point(query, r=r * (1.0 + 1e-9) + 1e-12), dtype=np.int64
        )
        if candidates.size == 0:
            return []
        indices, dists = self._rank(candidates, query)
        keep = dists <= r
        return [(int(i), float(d)) for i, d in zip(indices[keep], dists[keep])]

    def nearest_many(self, queries: np.ndarray, chunk: int = 2048) -> Tuple[np.ndarray, np.ndarray]:
        """
        Plus proche voisin de chaque requête d'un lot, par balayage exhaustif.

        Returns:
            (indices, distances), deux tableaux de la longueur du lot
        """
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim == 1:
            queries = queries.reshape(-1, self.dim)
        indices = np.empty(queries.shape[0], dtype=np.int64)
        distances = np.empty(queries.shape[0], dtype=np.float64)
        for start in range(0, queries.shape[0], chunk):
            block = cdist(queries[start : start + chunk], self._points)
            # argmin renvoie le premier minimum, donc le plus petit indice
            best = np.argmin(block, axis=1)
            indices[start : start + chunk] = best
            distances[start : start + chunk] = block[np.arange(block.shape[0]), best]
        return indices, distances


def build_index(points) -> SpatialIndex:
    """Construit un index spatial sur une liste de vecteurs de dimension d."""
    return SpatialIndex(np.asarray(points, dtype=np.float64))


def knn(idx: SpatialIndex, query, k: int) -> List[Neighbor]:
    """Raccourci fonctionnel pour SpatialIndex.knn."""
    return idx.knn(query, k)


def radius_query(idx: SpatialIndex, query, r: float) -> List[Neighbor]:
    """Raccourci fonctionnel pour SpatialIndex.radius_query."""
    return idx.radius_query(query, r)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """
    Sous-échantillonne un nuage en gardant le centroïde de chaque voxel occupé.

    Les voxels sont émis dans l'ordre de leur première occurrence dans le nuage,
    de sorte qu'un nuage déjà clairsemé est renvoyé inchangé.

    Args:
        cloud: Le nuage d'entrée
        voxel: Taille du voxel en mètres (> 0)

    Returns:
        Le nuage sous-échantillonné, de taille inférieure ou égale
    """
    if voxel <= 0:
        raise ValidationError("La taille de voxel doit être strictement positive")
    if cloud.is_empty():
        return PointCloud(cloud.points.copy(), None if cloud.intensity is None else cloud.intensity.copy())

    points = cloud.points.astype(np.float64)
    keys = np.floor(points / voxel).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # Renumérotation des voxels par ordre de première apparition
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.shape[0])
    cell = rank[inverse]

    n_cells = order.shape[0]
    counts = np.bincount(cell, minlength=n_cells).astype(np.float64)
    sums = np.zeros((n_cells, 3))
    np.add.at(sums, cell, points)
    centroids = sums / counts[:, None]

    # Une cellule d'un seul point renvoie ce point exact
    singles = counts == 1
    centroids[singles] = points[first[order][singles]]

    intensity = None
    if cloud.intensity is not None:
        totals = np.bincount(cell, weights=cloud.intensity.astype(np.float64), minlength=n_cells)
        intensity = totals / counts
    return PointCloud(centroids, intensity)
