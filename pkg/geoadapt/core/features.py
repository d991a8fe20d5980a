"""
Descripteurs locaux et globaux des nuages de points.

Chaque point reçoit un descripteur brut de 12 valeurs calculé sur son
voisinage (rapports des valeurs propres de la covariance, linéarité, planéité,
sphéricité, statistiques de hauteur, densité, portée, verticalité, intensité).
Un encodeur partagé transforme ces descripteurs, puis deux têtes apprenables
produisent :

- les descripteurs locaux (16 valeurs par point, norme bornée à 10) ;
- le descripteur global (redresseur, pooling GeM puis application affine
  vers 256 valeurs).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from geoadapt.core.base_extractor import BaseExtractor
from geoadapt.core.errors import ValidationError
from geoadapt.core.geometry import PointCloud
from geoadapt.core.tinynet import MLP, ForwardCache, ParamTensor, gem_pool, gem_pool_backward

logger = logging.getLogger(__name__)

DESCRIPTOR_FIELDS = (
    "eigen_ratio_1",
    "eigen_ratio_2",
    "eigen_ratio_3",
    "linearity",
    "planarity",
    "sphericity",
    "relative_height",
    "height_std",
    "density",
    "normalized_range",
    "verticality",
    "intensity_mean",
)
RAW_DIM = len(DESCRIPTOR_FIELDS)
DENSITY = DESCRIPTOR_FIELDS.index("density")

# Constantes de normalisation fixes : (valeur - centre) / échelle
DESCRIPTOR_CENTER = np.array([0.6, 0.3, 0.1, 0.5, 0.4, 0.1, 0.0, 0.25, 0.5, 0.5, 0.5, 0.3])
DESCRIPTOR_SCALE = np.array([0.2, 0.15, 0.1, 0.3, 0.3, 0.15, 0.5, 0.2, 0.3, 0.3, 0.3, 0.3])
DESCRIPTOR_CLIP = 3.0

EIGEN_EPS = 1e-12


@dataclass
class FeatureConfig:
    """
    Paramètres de l'extracteur.

    Attributes:
        neighborhood_radius: Rayon du voisinage des descripteurs bruts (mètres)
        max_neighbors: Nombre maximal de voisins considérés par point
        range_scale: Portée de normalisation (mètres)
        hidden_dim: Largeur de la couche cachée de l'encodeur
        local_dim: Dimension des descripteurs locaux
        global_dim: Dimension du descripteur global
        gem_p: Exposant du pooling GeM
        local_norm_cap: Norme maximale d'un descripteur local
    """

    neighborhood_radius: float = 1.0
    max_neighbors: int = 64
    range_scale: float = 30.0
    hidden_dim: int = 32
    local_dim: int = 16
    global_dim: int = 256
    gem_p: float = 3.0
    local_norm_cap: float = 10.0

    def __post_init__(self):
        if self.neighborhood_radius <= 0:
            raise ValidationError("Le rayon de voisinage doit être strictement positif")
        if self.max_neighbors < 3:
            raise ValidationError("max_neighbors doit être au moins 3")
        if self.range_scale <= 0:
            raise ValidationError("range_scale doit être strictement positif")
        if self.gem_p < 1:
            raise ValidationError("L'exposant GeM doit être au moins 1")
        if min(self.hidden_dim, self.local_dim, self.global_dim) < 1:
            raise ValidationError("Les dimensions des réseaux doivent être strictement positives")
        if self.local_norm_cap <= 0:
            raise ValidationError("local_norm_cap doit être strictement positif")


def raw_descriptors(
    cloud: PointCloud,
    neighborhood_radius: float,
    max_neighbors: int = 64,
    range_scale: float = 30.0,
    normalize: bool = True,
) -> np.ndarray:
    """
    Calcule le descripteur brut de chaque point à partir de son voisinage.

    Le voisinage d'un point est l'ensemble des points (lui compris) à distance
    inférieure ou égale au rayon, limité aux `max_neighbors` plus proches. Les
    voisins sont parcourus dans un ordre canonique (distance puis coordonnées),
    de sorte que le résultat ne dépend pas de l'ordre des points du nuage. Un
    point ayant moins de 3 voisins reçoit un descripteur nul, densité exceptée.

    Args:
        cloud: Le nuage de points (non vide)
        neighborhood_radius: Rayon du voisinage en mètres
        max_neighbors: Nombre maximal de voisins
        range_scale: Portée de normalisation en mètres
        normalize: Appliquer les constantes de normalisation fixes

    Returns:
        Tableau (n, 12)
    """
    if cloud.is_empty():
        raise ValidationError("Impossible de calculer des descripteurs sur un nuage vide")
    if neighborhood_radius <= 0:
        raise ValidationError("Le rayon de voisinage doit être strictement positif")

    points = cloud.points.astype(np.float64)
    n = points.shape[0]
    k = min(max_neighbors, n)
    _, idx = cKDTree(points).query(points, k=k)
    idx = np.asarray(idx).reshape(n, k)

    neighbors = points[idx]
    offsets = neighbors - points[:, None, :]
    dist = np.sqrt(np.einsum("nkj,nkj->nk", offsets, offsets))
    order = np.lexsort(
        (neighbors[..., 2], neighbors[..., 1], neighbors[..., 0], dist), axis=-1
    )
    rows = np.arange(n)[:, None]
    idx, neighbors, dist = idx[rows, order], neighbors[rows, order], dist[rows, order]
    mask = (dist <= neighborhood_radius).astype(np.float64)
    count = mask.sum(axis=1)

    mean = np.einsum("nk,nkj->nj", mask, neighbors) / count[:, None]
    centered = (neighbors - mean[:, None, :]) * mask[..., None]
    cov = np.einsum("nki,nkj->nij", centered, centered) / count[:, None, None]
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.clip(eigvals[:, ::-1], 0.0, None)
    l1, l2, l3 = eigvals[:, 0], eigvals[:, 1], eigvals[:, 2]
    total = l1 + l2 + l3 + EIGEN_EPS
    safe_l1 = np.where(l1 > EIGEN_EPS, l1, 1.0)
    has_spread = l1 > EIGEN_EPS
    normal = eigvecs[:, :, 0]

    height_offsets = (neighbors[..., 2] - mean[:, None, 2]) * mask
    height_std = np.sqrt(np.einsum("nk,nk->n", height_offsets, height_offsets) / count)

    if cloud.intensity is not None:
        intensity = cloud.intensity.astype(np.float64)[idx]
        intensity_mean = np.einsum("nk,nk->n", mask, intensity) / count
    else:
        intensity_mean = np.zeros(n)

    raw = np.stack(
        [
            l1 / total,
            l2 / total,
            l3 / total,
            np.where(has_spread, (l1 - l2) / safe_l1, 0.0),
            np.where(has_spread, (l2 - l3) / safe_l1, 0.0),
            np.where(has_spread, l3 / safe_l1, 0.0),
            (points[:, 2] - mean[:, 2]) / neighborhood_radius,
            height_std / neighborhood_radius,
            count / max_neighbors,
            np.linalg.norm(points, axis=1) / range_scale,
            1.0 - np.abs(normal[:, 2]),
            intensity_mean,
        ],
        axis=1,
    )
    if normalize:
        raw = np.clip((raw - DESCRIPTOR_CENTER) / DESCRIPTOR_SCALE, -DESCRIPTOR_CLIP, DESCRIPTOR_CLIP)

    isolated = count < 3
    if np.any(isolated):
        density = raw[isolated, DENSITY]
        raw[isolated] = 0.0
        raw[isolated, DENSITY] = density
    return raw


def clamp_norm(vectors: np.ndarray, cap: float) -> np.ndarray:
    """Ramène chaque ligne de norme supérieure à `cap` sur la sphère de rayon `cap`."""
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    factor = np.where(norms > cap, cap / np.maximum(norms, EIGEN_EPS), 1.0)
    return vectors * factor


def clamp_norm_backward(vectors: np.ndarray, cap: float, upstream: np.ndarray) -> np.ndarray:
    """Gradient de `clamp_norm` par rapport aux vecteurs d'entrée."""
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    clamped = norms[:, 0] > cap
    grad = upstream.copy()
    if np.any(clamped):
        v = vectors[clamped]
        g = upstream[clamped]
        nv = norms[clamped]
        radial = np.einsum("ij,ij->i", v, g)[:, None] / nv**2
        grad[clamped] = cap / nv * (g - v * radial)
    return grad


@dataclass
class ExtractionCache:
    """Valeurs intermédiaires d'une extraction, pour la rétropropagation."""

    raw: np.ndarray
    encoder: ForwardCache
    encoded: np.ndarray
    rectified: np.ndarray
    pooled: np.ndarray
    local_head: ForwardCache
    local_unclamped: np.ndarray
    global_head: ForwardCache


class FeatureExtractor(BaseExtractor):
    """
    Extracteur à descripteurs bruts et têtes apprenables.

    Sections de checkpoint : "encoder" (12 → hidden → 16, partagé),
    "local_head" (affine 16 → 16) et "global_head" (affine 16 → 256, après
    redresseur et pooling GeM de la sortie de l'encodeur).
    """

    def __init__(
        self,
        encoder: MLP,
        local_head: MLP,
        global_head: MLP,
        config: Optional[FeatureConfig] = None,
    ):
        self.config = config or FeatureConfig()
        if encoder.input_dim != RAW_DIM:
            raise ValidationError(f"L'encodeur doit prendre {RAW_DIM} entrées")
        if local_head.input_dim != encoder.output_dim or global_head.input_dim != encoder.output_dim:
            raise ValidationError("Les têtes doivent prendre la sortie de l'encodeur en entrée")
        self.encoder = encoder
        self.local_head = local_head
        self.global_head = global_head

    @classmethod
    def build(cls, config: Optional[FeatureConfig] = None, seed: int = 0) -> "FeatureExtractor":
        """Construit un extracteur initialisé de façon déterministe."""
        config = config or FeatureConfig()
        encoder = MLP.build(
            [RAW_DIM, config.hidden_dim, config.local_dim], seed=seed, name="encoder"
        )
        local_head = MLP.build([config.local_dim, config.local_dim], seed=seed + 1, name="local_head")
        global_head = MLP.build(
            [config.local_dim, config.global_dim], seed=seed + 2, name="global_head"
        )
        return cls(encoder, local_head, global_head, config)

    @classmethod
    def from_sections(
        cls, sections: Dict[str, MLP], config: Optional[FeatureConfig] = None
    ) -> "FeatureExtractor":
        """Reconstruit un extracteur à partir des sections d'un checkpoint."""
        missing = [name for name in ("encoder", "local_head", "global_head") if name not in sections]
        if missing:
            raise ValidationError(f"Sections manquantes dans le checkpoint : {', '.join(missing)}")
        return cls(sections["encoder"], sections["local_head"], sections["global_head"], config)

    def sections(self) -> Dict[str, MLP]:
        return {
            "encoder": self.encoder,
            "local_head": self.local_head,
            "global_head": self.global_head,
        }

    def copy(self) -> "FeatureExtractor":
        return FeatureExtractor(
            self.encoder.copy(), self.local_head.copy(), self.global_head.copy(), self.config
        )

    def parameters(self, train_local: bool = True) -> List[ParamTensor]:
        """Paramètres entraînables ; la tête locale est exclue si `train_local` est faux."""
        params = self.encoder.parameters() + self.global_head.parameters()
        if train_local:
            params += self.local_head.parameters()
        return params

    def zero_grad(self) -> None:
        for net in self.sections().values():
            net.zero_grad()

    def descriptors(self, cloud: PointCloud) -> np.ndarray:
        cfg = self.config
        return raw_descriptors(cloud, cfg.neighborhood_radius, cfg.max_neighbors, cfg.range_scale)

    def forward_train(self, cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray, ExtractionCache]:
        """
        Extraction conservant les valeurs intermédiaires.

        Returns:
            (descripteur global, descripteurs locaux, cache)
        """
        raw = self.descriptors(cloud)
        encoded, encoder_cache = self.encoder.forward_train(raw)
        local_unclamped, local_cache = self.local_head.forward_train(encoded)
        local = clamp_norm(local_unclamped, self.config.local_norm_cap)
        rectified = np.maximum(encoded, 0.0)
        pooled = gem_pool(rectified, self.config.gem_p)
        global_desc, global_cache = self.global_head.forward_train(pooled)
        cache = ExtractionCache(
            raw, encoder_cache, encoded, rectified, pooled, local_cache, local_unclamped, global_cache
        )
        return global_desc, local, cache

    def extract(self, cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
        global_desc, local, _ = self.forward_train(cloud)
        return global_desc, local

    def backward(
        self,
        cache: ExtractionCache,
        grad_global: Optional[np.ndarray] = None,
        grad_local: Optional[np.ndarray] = None,
    ) -> None:
        """
        Rétropropage les gradients des descripteurs vers les paramètres.

        Args:
            cache: Cache renvoyé par `forward_train`
            grad_global: Gradient par rapport au descripteur global
            grad_local: Gradient par rapport aux descripteurs locaux (n, 16)
        """
        grad_encoded = np.zeros_like(cache.encoded)
        if grad_global is not None:
            grad_pooled = self.global_head.backward(grad_global, cache.global_head)
            grad_rectified = gem_pool_backward(cache.rectified, self.config.gem_p, grad_pooled)
            grad_encoded += grad_rectified * (cache.encoded > 0.0)
        if grad_local is not None:
            grad_unclamped = clamp_norm_backward(
                cache.local_unclamped, self.config.local_norm_cap, np.asarray(grad_local)
            )
            grad_encoded += self.local_head.backward(grad_unclamped, cache.local_head)
        self.encoder.backward(grad_encoded, cache.encoder)


def extract(extractor: BaseExtractor, cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    """Descripteur global et descripteurs locaux d'un nuage."""
    if cloud.is_empty():
        raise ValidationError("Impossible d'extraire les descripteurs d'un nuage vide")
    return extractor.extract(cloud)
