"""
Simulateur procédural de monde LiDAR.

Un monde est un ensemble de points de surface (poteaux, murs, boîtes, arbres
et sol clairsemé) autour d'une boucle fermée. Le véhicule parcourt la boucle
deux fois : le premier tour alimente la base de données, le second, décalé
latéralement, fournit les requêtes qui revisitent les mêmes lieux.

Un scan est une fonction pure de la configuration et de la pose : le
générateur aléatoire du bruit, des pertes et du fouillis est initialisé à
partir de la pose elle-même.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from geoadapt.core.datasets import DATABASE, QUERY, DatasetManifest, ScanEntry
from geoadapt.core.errors import ValidationError
from geoadapt.core.geometry import PointCloud, Pose, apply_pose

logger = logging.getLogger(__name__)

SHAPES = ("pole", "wall", "box", "tree")
SHAPE_INTENSITY = {"pole": 0.8, "wall": 0.55, "box": 0.4, "tree": 0.25, "ground": 0.1}
MIN_RANGE = 0.5


@dataclass
class SimWorldConfig:
    """
    Paramètres d'un monde simulé.

    Attributes:
        seed: Graine du monde
        area: Surface du monde en m² (carré)
        landmark_count: Nombre d'objets
        shape_mix: Proportions de poteaux, murs, boîtes et arbres
        surface_spacing: Espacement des points de surface (mètres)
        ground_spacing: Espacement des points du sol (mètres)
        scans_per_lap: Nombre de scans du premier tour (base de données)
        revisit_count: Nombre de scans du second tour (requêtes)
        lateral_offset: Décalage latéral maximal du second tour (mètres)
        sensor_height: Hauteur du capteur (mètres)
        sensor_range: Portée du capteur (mètres)
        points_per_scan: Nombre maximal de points par scan
        noise_sigma: Écart-type du bruit par coordonnée (mètres)
        dropout: Fraction de points perdus
        range_scale: Facteur de portée (décalage de domaine)
        density_scale: Facteur de densité (décalage de domaine)
        noise_scale: Facteur de bruit (décalage de domaine)
        clutter_rate: Fraction de points parasites ajoutés
        name: Préfixe des identifiants de scan
    """

    seed: int = 0
    area: float = 14400.0
    landmark_count: int = 120
    shape_mix: Tuple[float, float, float, float] = (0.3, 0.3, 0.25, 0.15)
    surface_spacing: float = 0.35
    ground_spacing: float = 2.0
    scans_per_lap: int = 60
    revisit_count: int = 60
    lateral_offset: float = 1.0
    sensor_height: float = 1.8
    sensor_range: float = 30.0
    points_per_scan: int = 1024
    noise_sigma: float = 0.02
    dropout: float = 0.05
    range_scale: float = 1.0
    density_scale: float = 1.0
    noise_scale: float = 1.0
    clutter_rate: float = 0.005
    name: str = "sim"

    def __post_init__(self):
        self.shape_mix = tuple(float(w) for w in self.shape_mix)
        positive = {
            "area": self.area,
            "surface_spacing": self.surface_spacing,
            "ground_spacing": self.ground_spacing,
            "sensor_range": self.sensor_range,
            "range_scale": self.range_scale,
            "density_scale": self.density_scale,
            "noise_scale": self.noise_scale,
        }
        for key, value in positive.items():
            if value <= 0:
                raise ValidationError(f"simulation.{key} doit être strictement positif")
        if self.noise_sigma < 0 or self.clutter_rate < 0 or self.lateral_offset < 0:
            raise ValidationError("Bruit, fouillis et décalage latéral doivent être positifs ou nuls")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("simulation.dropout doit être dans [0, 1)")
        if len(self.shape_mix) != len(SHAPES) or min(self.shape_mix) < 0 or sum(self.shape_mix) <= 0:
            raise ValidationError("simulation.shape_mix doit contenir 4 poids positifs")
        if self.scans_per_lap < 2 or self.points_per_scan < 1 or self.landmark_count < 0:
            raise ValidationError("Nombre de scans, de points ou d'objets invalide")
        if not 0 <= self.revisit_count <= self.scans_per_lap:
            raise ValidationError("simulation.revisit_count doit être compris entre 0 et scans_per_lap")

    @property
    def side(self) -> float:
        return math.sqrt(self.area)


@dataclass
class ShiftKnobs:
    """Écart de domaine appliqué à une configuration source."""

    new_world: bool = False
    range_scale: float = 1.0
    density_scale: float = 1.0
    noise_scale: float = 1.0
    clutter_scale: float = 1.0
    shape_mix: Optional[Tuple[float, float, float, float]] = None


SHIFT_PRESETS: Dict[str, ShiftKnobs] = {
    "none": ShiftKnobs(),
    "moderate": ShiftKnobs(new_world=True, range_scale=0.75, noise_scale=1.5),
    "severe": ShiftKnobs(
        new_world=True,
        range_scale=0.75,
        noise_scale=1.5,
        density_scale=0.5,
        clutter_scale=3.0,
        shape_mix=(0.1, 0.1, 0.1, 0.7),
    ),
}


def shift_domain(cfg: SimWorldConfig, knobs: Union[str, ShiftKnobs]) -> SimWorldConfig:
    """
    Configuration cible obtenue en décalant une configuration source.

    Args:
        cfg: Configuration source
        knobs: Nom d'un préréglage ("none", "moderate", "severe") ou réglages explicites

    Returns:
        La configuration cible
    """
    if isinstance(knobs, str):
        if knobs not in SHIFT_PRESETS:
            raise ValidationError(
                f"Décalage inconnu : {knobs} (choix : {', '.join(SHIFT_PRESETS)})"
            )
        knobs = SHIFT_PRESETS[knobs]
    return replace(
        cfg,
        seed=cfg.seed + 1 if knobs.new_world else cfg.seed,
        range_scale=cfg.range_scale * knobs.range_scale,
        density_scale=cfg.density_scale * knobs.density_scale,
        noise_scale=cfg.noise_scale * knobs.noise_scale,
        clutter_rate=cfg.clutter_rate * knobs.clutter_scale,
        shape_mix=knobs.shape_mix or cfg.shape_mix,
    )


@dataclass
class World:
    points: np.ndarray
    intensity: np.ndarray
    priority: np.ndarray
    kinds: np.ndarray


def _loop_positions(cfg: SimWorldConfig, theta: np.ndarray, phase: float) -> np.ndarray:
    center = cfg.side / 2.0
    radius = 0.32 * cfg.side * (1.0 + 0.12 * np.sin(3.0 * theta + phase))
    return np.stack([center + radius * np.cos(theta), center + radius * np.sin(theta)], axis=1)


def _loop_phase(cfg: SimWorldConfig) -> float:
    return float(np.random.default_rng([cfg.seed, 2]).uniform(0.0, 2.0 * math.pi))


def _grid(extent: float, spacing: float) -> np.ndarray:
    return np.arange(0.0, extent + 1e-9, spacing) if extent > 0 else np.zeros(1)


def _vertical_rectangle(origin, direction, length, height, spacing) -> np.ndarray:
    u, v = np.meshgrid(_grid(length, spacing), _grid(height, spacing), indexing="ij")
    u, v = u.reshape(-1), v.reshape(-1)
    xy = origin[None, :2] + u[:, None] * direction[None, :]
    return np.column_stack([xy, origin[2] + v])


def _cylinder(center, radius, height, spacing) -> np.ndarray:
    n_ring = max(6, int(math.ceil(2 * math.pi * radius / spacing)))
    angles = np.linspace(0.0, 2 * math.pi, n_ring, endpoint=False)
    a, z = np.meshgrid(angles, _grid(height, spacing), indexing="ij")
    a, z = a.reshape(-1), z.reshape(-1)
    return np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), z])


def _sphere(center, radius, spacing) -> np.ndarray:
    count = max(12, int(4 * math.pi * radius**2 / spacing**2))
    k = np.arange(count) + 0.5
    polar = np.arccos(1.0 - 2.0 * k / count)
    azimuth = math.pi * (1.0 + math.sqrt(5.0)) * k
    unit = np.column_stack(
        [np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)]
    )
    return np.asarray(center)[None, :] + radius * unit


def _landmark(kind: str, center: np.ndarray, rng: np.random.Generator, spacing: float) -> np.ndarray:
    if kind == "pole":
        return _cylinder(center, rng.uniform(0.15, 0.3), rng.uniform(3.0, 6.0), spacing)
    if kind == "wall":
        yaw = rng.uniform(0.0, math.pi)
        direction = np.array([math.cos(yaw), math.sin(yaw)])
        length = rng.uniform(4.0, 12.0)
        origin = np.array([*(center - 0.5 * length * direction), 0.0])
        return _vertical_rectangle(origin, direction, length, rng.uniform(2.0, 4.0), spacing)
    if kind == "box":
        w, d, h = rng.uniform(1.5, 4.0), rng.uniform(1.5, 4.0), rng.uniform(1.0, 3.0)
        corner = np.array([center[0] - w / 2, center[1] - d / 2, 0.0])
        faces = [
            _vertical_rectangle(corner, np.array([1.0, 0.0]), w, h, spacing),
            _vertical_rectangle(corner + [0.0, d, 0.0], np.array([1.0, 0.0]), w, h, spacing),
            _vertical_rectangle(corner, np.array([0.0, 1.0]), d, h, spacing),
            _vertical_rectangle(corner + [w, 0.0, 0.0], np.array([0.0, 1.0]), d, h, spacing),
        ]
        gx, gy = np.meshgrid(_grid(w, spacing), _grid(d, spacing), indexing="ij")
        faces.append(np.column_stack([corner[0] + gx.reshape(-1), corner[1] + gy.reshape(-1), np.full(gx.size, h)]))
        return np.concatenate(faces)
    trunk_height = rng.uniform(1.5, 2.5)
    canopy = rng.uniform(1.2, 2.5)
    trunk = _cylinder(center, 0.2, trunk_height, spacing)
    crown = _sphere([center[0], center[1], trunk_height + 0.8 * canopy], canopy, spacing)
    crown = crown + rng.normal(0.0, 0.1, size=crown.shape)
    return np.concatenate([trunk, crown])


def generate_world(cfg: SimWorldConfig) -> World:
    """Génère les points de surface du monde, de façon déterministe selon la graine."""
    rng = np.random.default_rng([cfg.seed, 0])
    side = cfg.side
    road = _loop_positions(cfg, np.linspace(0.0, 2 * math.pi, 720, endpoint=False), _loop_phase(cfg))
    clearance = cfg.lateral_offset + 2.5
    weights = np.asarray(cfg.shape_mix) / sum(cfg.shape_mix)

    parts: List[np.ndarray] = []
    kinds: List[str] = []
    placed, attempts = 0, 0
    while placed < cfg.landmark_count and attempts < 50 * max(1, cfg.landmark_count):
        attempts += 1
        center = rng.uniform(0.0, side, size=2)
        if np.min(np.linalg.norm(road - center, axis=1)) < clearance:
            continue
        kind = SHAPES[int(rng.choice(len(SHAPES), p=weights))]
        points = _landmark(kind, center, rng, cfg.surface_spacing)
        parts.append(points)
        kinds.extend([kind] * points.shape[0])
        placed += 1

    gx, gy = np.meshgrid(_grid(side, cfg.ground_spacing), _grid(side, cfg.ground_spacing), indexing="ij")
    ground = np.column_stack([gx.reshape(-1), gy.reshape(-1), np.zeros(gx.size)])
    ground[:, :2] += rng.uniform(-0.3, 0.3, size=(ground.shape[0], 2)) * cfg.ground_spacing
    ground[:, 2] = rng.normal(0.0, 0.02, size=ground.shape[0])
    parts.append(ground)
    kinds.extend(["ground"] * ground.shape[0])

    points = np.concatenate(parts)
    kinds_array = np.array(kinds)
    base = np.array([SHAPE_INTENSITY[k] for k in kinds])
    intensity = np.clip(base + rng.normal(0.0, 0.05, size=base.shape), 0.0, 1.0)
    priority = rng.random(points.shape[0])
    logger.debug("Monde %d : %d objets, %d points", cfg.seed, placed, points.shape[0])
    return World(points, intensity, priority, kinds_array)


def _yaw_along(cfg: SimWorldConfig, theta: np.ndarray, phase: float) -> np.ndarray:
    ahead = _loop_positions(cfg, theta + 1e-3, phase)
    behind = _loop_positions(cfg, theta - 1e-3, phase)
    delta = ahead - behind
    return np.arctan2(delta[:, 1], delta[:, 0])


def trajectory(cfg: SimWorldConfig) -> Tuple[List[Pose], List[Pose]]:
    """
    Poses des deux tours : base de données puis requêtes.

    Les requêtes reprennent les `revisit_count` premières poses du premier tour
    avec un décalage latéral d'au plus `lateral_offset` et longitudinal d'au
    plus 0,5 m, donc à moins de 3 m de leur lieu d'origine.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    phase = _loop_phase(cfg)
    theta = np.linspace(0.0, 2 * math.pi, cfg.scans_per_lap, endpoint=False)
    xy = _loop_positions(cfg, theta, phase)
    yaw = _yaw_along(cfg, theta, phase)
    database = [
        Pose.from_yaw(float(yaw[k]), [xy[k, 0], xy[k, 1], cfg.sensor_height])
        for k in range(cfg.scans_per_lap)
    ]
    queries = []
    for k in range(cfg.revisit_count):
        heading = np.array([math.cos(yaw[k]), math.sin(yaw[k])])
        normal = np.array([-heading[1], heading[0]])
        offset = rng.uniform(-0.5, 0.5) * heading + rng.uniform(-cfg.lateral_offset, cfg.lateral_offset) * normal
        position = xy[k] + offset
        queries.append(
            Pose.from_yaw(float(yaw[k] + rng.uniform(-0.2, 0.2)), [position[0], position[1], cfg.sensor_height])
        )
    return database, queries


def _pose_rng(cfg: SimWorldConfig, pose: Pose) -> np.random.Generator:
    words = np.frombuffer(pose.as_matrix()[:3].astype("<f8").tobytes(), dtype="<u4")
    return np.random.default_rng([cfg.seed, 3, *words.tolist()])


def render_scan(world: World, cfg: SimWorldConfig, pose: Pose) -> PointCloud:
    """
    Scan vu depuis une pose, exprimé dans le repère du capteur.

    Sélection des points du monde à portée (distance horizontale), réduction
    de densité cohérente d'un scan à l'autre (priorité fixe par point), pertes
    aléatoires, bruit gaussien puis points parasites.
    """
    rng = _pose_rng(cfg, pose)
    reach = cfg.sensor_range * cfg.range_scale
    horizontal = np.linalg.norm(world.points[:, :2] - pose.translation[None, :2], axis=1)
    visible = (horizontal <= reach) & (horizontal >= MIN_RANGE) & (world.priority < cfg.density_scale)
    index = np.flatnonzero(visible)
    cap = max(1, int(round(cfg.points_per_scan * min(1.0, cfg.density_scale))))
    if index.size > cap:
        index = np.sort(index[np.argsort(world.priority[index], kind="stable")[:cap]])
    if cfg.dropout > 0:
        index = index[rng.random(index.size) >= cfg.dropout]

    sigma = cfg.noise_sigma * cfg.noise_scale
    points = world.points[index] + (rng.normal(0.0, sigma, size=(index.size, 3)) if sigma > 0 else 0.0)
    intensity = world.intensity[index]

    n_clutter = int(round(cfg.clutter_rate * index.size))
    if n_clutter:
        radius = reach * np.sqrt(rng.random(n_clutter))
        angle = rng.uniform(0.0, 2 * math.pi, n_clutter)
        clutter = np.column_stack(
            [
                pose.translation[0] + radius * np.cos(angle),
                pose.translation[1] + radius * np.sin(angle),
                rng.uniform(0.0, 3.0, n_clutter),
            ]
        )
        points = np.concatenate([points, clutter])
        intensity = np.concatenate([intensity, rng.random(n_clutter)])

    world_cloud = PointCloud(points.astype(np.float32), intensity.astype(np.float32))
    return apply_pose(pose.inverse(), world_cloud)


def simulate_world(cfg: SimWorldConfig) -> DatasetManifest:
    """
    Génère un jeu de données complet avec poses.

    Le premier tour (parcours "0") forme le split database, le second
    (parcours "1") le split query.
    """
    world = generate_world(cfg)
    database, queries = trajectory(cfg)
    entries = []
    for traversal, split, poses in (("0", DATABASE, database), ("1", QUERY, queries)):
        for k, pose in enumerate(poses):
            entries.append(
                ScanEntry(
                    scan_id=f"{cfg.name}-{traversal}-{k:04d}",
                    cloud=render_scan(world, cfg, pose),
                    pose=pose,
                    traversal=traversal,
                    split=split,
                )
            )
    logger.info(
        "Monde simulé (graine %d) : %d scans de base, %d requêtes",
        cfg.seed,
        len(database),
        len(queries),
    )
    return DatasetManifest(entries)
