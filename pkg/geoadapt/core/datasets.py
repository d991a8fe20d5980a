"""
Jeux de données de GeoAdapt : manifestes, scans binaires et tables de poses.

Formats sur disque :

- scan : suite d'enregistrements de 16 octets, quatre réels 32 bits
  petit-boutistes (x, y, z, intensité) ;
- poses : une ligne par scan, `scan_id` suivi des 12 réels de la transformation
  rigide 3×4 en ordre ligne ;
- manifeste : une ligne par scan, `scan_id, chemin_relatif, parcours, split`.

Les lignes commençant par `#` sont des commentaires (en-têtes de configuration).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Set, Union

import numpy as np
from scipy.linalg import polar

from geoadapt.core.errors import DataError, ParseError, ValidationError
from geoadapt.core.geometry import PointCloud, Pose

logger = logging.getLogger(__name__)

TRAIN = "train"
QUERY = "query"
DATABASE = "database"
SPLITS = (TRAIN, QUERY, DATABASE)

MANIFEST_FILE = "manifest.txt"
POSES_FILE = "poses.txt"
SCANS_DIR = "scans"

RECORD_BYTES = 16
POSE_SILENT_REPAIR = 1e-4
POSE_REJECT = 1e-2

_FIELD_SEPARATOR = re.compile(r"[,\s]+")


@dataclass(eq=False)
class ScanEntry:
    """
    Une entrée de manifeste.

    Attributes:
        scan_id: Identifiant unique du scan
        path: Fichier du scan, relatif à la racine du manifeste
        cloud: Nuage en mémoire (prioritaire sur le fichier)
        pose: Pose dans le monde, optionnelle
        traversal: Étiquette du parcours
        split: train, query ou database
    """

    scan_id: str
    path: Optional[str] = None
    cloud: Optional[PointCloud] = None
    pose: Optional[Pose] = None
    traversal: str = "0"
    split: str = TRAIN

    def __post_init__(self):
        if not self.scan_id or _FIELD_SEPARATOR.search(self.scan_id):
            raise ValidationError(f"Identifiant de scan invalide : '{self.scan_id}'")
        if self.split not in SPLITS:
            raise ValidationError(f"Split inconnu pour {self.scan_id} : {self.split}")
        if self.path is None and self.cloud is None:
            raise ValidationError(f"Le scan {self.scan_id} n'a ni fichier ni nuage en mémoire")


class DatasetManifest:
    """
    Séquence indexée de scans avec poses optionnelles.

    Invariants : identifiants uniques ; dans chaque split, poses toutes
    présentes ou toutes absentes ; parcours des splits query et database
    disjoints.
    """

    def __init__(self, entries: Sequence[ScanEntry], root: Optional[Union[str, Path]] = None):
        self.entries: List[ScanEntry] = list(entries)
        self.root = Path(root) if root is not None else None
        self._index = {entry.scan_id: i for i, entry in enumerate(self.entries)}
        self._clouds: Dict[str, PointCloud] = {}
        if len(self._index) != len(self.entries):
            raise ValidationError("Identifiants de scan dupliqués dans le manifeste")
        for split in SPLITS:
            flags = {entry.pose is not None for entry in self.entries if entry.split == split}
            if len(flags) > 1:
                raise ValidationError(f"Poses partiellement présentes dans le split '{split}'")
        query_tags = {e.traversal for e in self.entries if e.split == QUERY}
        database_tags = {e.traversal for e in self.entries if e.split == DATABASE}
        if query_tags & database_tags:
            raise ValidationError("Les parcours des splits query et database doivent être disjoints")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ScanEntry]:
        return iter(self.entries)

    def __getitem__(self, i: int) -> ScanEntry:
        return self.entries[i]

    @property
    def scan_ids(self) -> List[str]:
        return [entry.scan_id for entry in self.entries]

    @property
    def traversals(self) -> List[str]:
        return [entry.traversal for entry in self.entries]

    def index_of(self, scan_id: str) -> int:
        try:
            return self._index[scan_id]
        except KeyError:
            raise DataError(f"Scan inconnu dans le manifeste : {scan_id}")

    def entry(self, scan_id: str) -> ScanEntry:
        return self.entries[self.index_of(scan_id)]

    def has_poses(self) -> bool:
        return bool(self.entries) and all(entry.pose is not None for entry in self.entries)

    def poses(self) -> List[Pose]:
        if not self.has_poses():
            raise DataError("Ce manifeste ne contient pas de poses")
        return [entry.pose for entry in self.entries]

    def split(self, name: str) -> "DatasetManifest":
        """Sous-manifeste restreint à un split."""
        if name not in SPLITS:
            raise ValidationError(f"Split inconnu : {name}")
        subset = DatasetManifest([e for e in self.entries if e.split == name], self.root)
        subset._clouds = self._clouds
        return subset

    def without_poses(self) -> "DatasetManifest":
        """Copie du manifeste sans aucune pose (adaptation sans vérité terrain)."""
        stripped = DatasetManifest([replace(e, pose=None) for e in self.entries], self.root)
        stripped._clouds = self._clouds
        return stripped

    def cloud(self, i: int) -> PointCloud:
        """Nuage du i-ème scan, lu depuis le disque au premier accès."""
        entry = self.entries[i]
        if entry.cloud is not None:
            return entry.cloud
        cloud = self._clouds.get(entry.scan_id)
        if cloud is None:
            path = Path(entry.path)
            if self.root is not None and not path.is_absolute():
                path = self.root / path
            cloud = read_scan_bin(path)
            self._clouds[entry.scan_id] = cloud
        return cloud

    def clouds(self) -> List[PointCloud]:
        return [self.cloud(i) for i in range(len(self))]


def read_scan_bin(path: Union[str, Path]) -> PointCloud:
    """
    Lit un scan binaire de quadruplets (x, y, z, intensité) en réels 32 bits.

    Raises:
        DataError: Si le fichier n'existe pas
        ParseError: Si la taille n'est pas un multiple de 16 octets ou si une
            valeur n'est pas finie
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Fichier de scan introuvable : {path}")
    size = path.stat().st_size
    if size % RECORD_BYTES:
        raise ParseError(
            f"Taille de scan non multiple de {RECORD_BYTES} octets",
            path=str(path),
            offset=size - size % RECORD_BYTES,
        )
    if size == 0:
        logger.warning("Scan vide : %s", path)
        return PointCloud(np.zeros((0, 3), dtype=np.float32), np.zeros(0, dtype=np.float32))
    records = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    bad = np.flatnonzero(~np.all(np.isfinite(records), axis=1))
    if bad.size:
        raise ParseError("Valeur non finie dans le scan", path=str(path), offset=int(bad[0]) * RECORD_BYTES)
    return PointCloud(records[:, :3].astype(np.float32), np.clip(records[:, 3], 0.0, 1.0))


def write_scan_bin(path: Union[str, Path], cloud: PointCloud) -> Path:
    """Écrit un nuage au format binaire (intensité nulle si absente)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = np.zeros((len(cloud), 4), dtype="<f4")
    records[:, :3] = cloud.points
    if cloud.intensity is not None:
        records[:, 3] = cloud.intensity
    records.tofile(path)
    return path


class PoseTable(dict):
    """
    Table scan_id -> Pose lue depuis un fichier.

    Attributes:
        repaired: Identifiants dont la rotation a été re-orthonormalisée au-delà de 1e-4
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.repaired: Set[str] = set()


def _rotation_from_row(values: np.ndarray, where: str, line: int):
    matrix = values.reshape(3, 4)
    rotation, translation = matrix[:, :3], matrix[:, 3]
    if np.linalg.det(rotation) <= 0:
        raise ParseError("Rotation de déterminant négatif (réflexion)", path=where, line=line)
    drift = float(np.max(np.abs(rotation @ rotation.T - np.eye(3))))
    if drift > POSE_REJECT:
        raise ParseError(f"Rotation non rigide (écart {drift:.2e})", path=where, line=line)
    if drift > 0.0:
        rotation, _ = polar(rotation)
    return rotation, translation, drift > POSE_SILENT_REPAIR


def read_poses(path: Union[str, Path]) -> PoseTable:
    """
    Lit une table de poses : `scan_id` puis 12 réels par ligne.

    Les rotations dont l'écart à l'orthonormalité dépasse 1e-4 sont projetées
    sur la rotation la plus proche (décomposition polaire) et signalées ;
    au-delà de 1e-2, ou en cas de réflexion, la ligne est rejetée.

    Raises:
        DataError: Si le fichier n'existe pas
        ParseError: Ligne mal formée, avec son numéro
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Fichier de poses introuvable : {path}")
    table = PoseTable()
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = _FIELD_SEPARATOR.split(text)
            if len(fields) != 13:
                raise ParseError(
                    f"13 champs attendus (identifiant et 12 réels), {len(fields)} trouvés",
                    path=str(path),
                    line=number,
                )
            scan_id = fields[0]
            if scan_id in table:
                raise ParseError(f"Pose dupliquée pour {scan_id}", path=str(path), line=number)
            try:
                values = np.array([float(v) for v in fields[1:]])
            except ValueError:
                raise ParseError("Valeur numérique invalide", path=str(path), line=number)
            if not np.all(np.isfinite(values)):
                raise ParseError("Valeur non finie", path=str(path), line=number)
            rotation, translation, flagged = _rotation_from_row(values, str(path), number)
            table[scan_id] = Pose(rotation, translation)
            if flagged:
                table.repaired.add(scan_id)
                logger.warning("Pose %s re-orthonormalisée (ligne %d)", scan_id, number)
    return table


def write_poses(
    path: Union[str, Path], poses: Mapping[str, Pose], header: Optional[str] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        if header:
            handle.write(f"# {header}\n")
        for scan_id, pose in poses.items():
            values = np.concatenate([pose.rotation, pose.translation[:, None]], axis=1).reshape(-1)
            handle.write(scan_id + " " + " ".join(f"{v:.17g}" for v in values) + "\n")
    return path


def write_manifest(
    manifest: DatasetManifest, directory: Union[str, Path], header: Optional[str] = None
) -> Path:
    """
    Écrit un manifeste et ses données dans un répertoire.

    Les nuages en mémoire sont écrits sous `scans/`, les poses dans
    `poses.txt` et l'index dans `manifest.txt`.

    Returns:
        Le chemin du fichier d'index
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, entry in enumerate(manifest):
        relative = entry.path
        if entry.cloud is not None or relative is None:
            relative = f"{SCANS_DIR}/{entry.scan_id}.bin"
            write_scan_bin(directory / relative, manifest.cloud(i))
        lines.append(f"{entry.scan_id}, {relative}, {entry.traversal}, {entry.split}")
    poses = {entry.scan_id: entry.pose for entry in manifest if entry.pose is not None}
    if poses:
        write_poses(directory / POSES_FILE, poses, header)
    index = directory / MANIFEST_FILE
    with open(index, "w", encoding="utf-8") as handle:
        if header:
            handle.write(f"# {header}\n")
        handle.write("\n".join(lines) + ("\n" if lines else ""))
    return index


def read_manifest(path: Union[str, Path], with_poses: bool = True) -> DatasetManifest:
    """
    Lit un manifeste (répertoire ou fichier d'index).

    Les poses sont lues dans `poses.txt` à côté de l'index s'il existe.

    Raises:
        DataError: Index introuvable ou pose manquante pour une partie d'un split
        ParseError: Ligne d'index mal formée
    """
    path = Path(path)
    index = path / MANIFEST_FILE if path.is_dir() else path
    if not index.is_file():
        raise DataError(f"Manifeste introuvable : {index}")
    root = index.parent
    poses_path = root / POSES_FILE
    poses = read_poses(poses_path) if with_poses and poses_path.is_file() else PoseTable()

    entries = []
    with open(index, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = [field.strip() for field in text.split(",")]
            if len(fields) != 4:
                raise ParseError(
                    "4 champs attendus : scan_id, chemin, parcours, split", path=str(index), line=number
                )
            scan_id, relative, traversal, split = fields
            try:
                entries.append(ScanEntry(scan_id, relative, None, poses.get(scan_id), traversal, split))
            except ValidationError as error:
                raise ParseError(str(error), path=str(index), line=number)
    try:
        return DatasetManifest(entries, root)
    except ValidationError as error:
        raise DataError(f"Manifeste incohérent ({index}) : {error}")
