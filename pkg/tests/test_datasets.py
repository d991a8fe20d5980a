"""
Tests pour les manifestes, les scans binaires et les tables de poses.
"""

import numpy as np
import pytest

from geoadapt.core.datasets import (
    DATABASE,
    QUERY,
    DatasetManifest,
    ScanEntry,
    read_manifest,
    read_poses,
    read_scan_bin,
    write_manifest,
    write_poses,
    write_scan_bin,
)
from geoadapt.core.errors import DataError, ParseError, ValidationError
from geoadapt.core.geometry import PointCloud, Pose


def small_manifest(with_poses: bool = True) -> DatasetManifest:
    rng = np.random.default_rng(0)
    entries = []
    for i in range(6):
        split = DATABASE if i < 3 else QUERY
        entries.append(
            ScanEntry(
                f"scan{i}",
                cloud=PointCloud(rng.normal(size=(20, 3)), rng.uniform(size=20)),
                pose=Pose.from_yaw(0.1 * i, [float(i), 0.0, 1.8]) if with_poses else None,
                traversal="0" if split == DATABASE else "1",
                split=split,
            )
        )
    return DatasetManifest(entries)


class TestScanFiles:
    """Tests pour les scans binaires."""

    def test_round_trip(self, tmp_path):
        """Un scan écrit puis relu est identique."""
        cloud = PointCloud(np.random.default_rng(1).normal(size=(15, 3)), np.linspace(0, 1, 15))
        loaded = read_scan_bin(write_scan_bin(tmp_path / "a.bin", cloud))
        np.testing.assert_array_equal(loaded.points, cloud.points)
        np.testing.assert_allclose(loaded.intensity, cloud.intensity, atol=1e-7)

    def test_bad_size(self, tmp_path):
        """Une taille non multiple de 16 octets est refusée avec sa position."""
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(40))
        with pytest.raises(ParseError) as info:
            read_scan_bin(path)
        assert info.value.offset == 32

    def test_non_finite(self, tmp_path):
        """Une valeur non finie est refusée avec la position de son enregistrement."""
        records = np.zeros((3, 4), dtype="<f4")
        records[2, 1] = np.inf
        path = tmp_path / "nan.bin"
        records.tofile(path)
        with pytest.raises(ParseError) as info:
            read_scan_bin(path)
        assert info.value.offset == 32

    def test_empty_file(self, tmp_path):
        """Un fichier vide donne un nuage vide."""
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        assert read_scan_bin(path).is_empty()

    def test_missing(self, tmp_path):
        """Un fichier absent est une erreur de données."""
        with pytest.raises(DataError):
            read_scan_bin(tmp_path / "absent.bin")


class TestPoseFiles:
    """Tests pour les tables de poses."""

    def test_round_trip(self, tmp_path):
        """Les poses écrites sont relues exactement."""
        poses = {"a": Pose.from_yaw(0.3, [1.0, 2.0, 3.0]), "b": Pose.identity()}
        table = read_poses(write_poses(tmp_path / "poses.txt", poses, header="h"))
        assert list(table) == ["a", "b"]
        np.testing.assert_allclose(table["a"].rotation, poses["a"].rotation, atol=1e-12)
        assert not table.repaired

    def test_small_drift_is_repaired(self, tmp_path):
        """Une rotation légèrement non orthonormale est corrigée et signalée."""
        rotation = np.eye(3)
        rotation[0, 1] = 1e-3
        row = np.concatenate([rotation, np.zeros((3, 1))], axis=1).reshape(-1)
        path = tmp_path / "poses.txt"
        path.write_text("a " + " ".join(str(v) for v in row) + "\n")
        table = read_poses(path)
        assert "a" in table.repaired
        np.testing.assert_allclose(table["a"].rotation @ table["a"].rotation.T, np.eye(3), atol=1e-9)

    def test_reflection_rejected(self, tmp_path):
        """Une réflexion est refusée avec son numéro de ligne."""
        row = np.concatenate([np.diag([1.0, 1.0, -1.0]), np.zeros((3, 1))], axis=1).reshape(-1)
        path = tmp_path / "poses.txt"
        path.write_text("# en-tête\na " + " ".join(str(v) for v in row) + "\n")
        with pytest.raises(ParseError) as info:
            read_poses(path)
        assert info.value.line == 2

    def test_wrong_field_count(self, tmp_path):
        """Une ligne sans 13 champs est refusée."""
        path = tmp_path / "poses.txt"
        path.write_text("a 1 0 0 0\n")
        with pytest.raises(ParseError):
            read_poses(path)


class TestManifest:
    """Tests pour DatasetManifest et ses fichiers."""

    def test_write_then_read(self, tmp_path):
        """Un manifeste écrit est relu avec ses nuages, ses poses et ses splits."""
        manifest = small_manifest()
        write_manifest(manifest, tmp_path / "set", header="geoadapt test")
        loaded = read_manifest(tmp_path / "set")
        assert loaded.scan_ids == manifest.scan_ids
        assert loaded.has_poses()
        assert len(loaded.split(QUERY)) == 3
        np.testing.assert_array_equal(loaded.cloud(4).points, manifest.cloud(4).points)
        np.testing.assert_allclose(loaded.poses()[5].translation, manifest.poses()[5].translation)

    def test_read_without_poses(self, tmp_path):
        """Les poses peuvent ne pas être lues."""
        write_manifest(small_manifest(), tmp_path / "set")
        loaded = read_manifest(tmp_path / "set", with_poses=False)
        assert not loaded.has_poses()
        with pytest.raises(DataError):
            loaded.poses()

    def test_without_poses(self):
        """La copie sans poses garde les nuages et les identifiants."""
        manifest = small_manifest()
        stripped = manifest.without_poses()
        assert not stripped.has_poses()
        assert manifest.has_poses()
        assert stripped.scan_ids == manifest.scan_ids
        np.testing.assert_array_equal(stripped.cloud(0).points, manifest.cloud(0).points)

    def test_duplicate_ids(self):
        """Les identifiants dupliqués sont refusés."""
        cloud = PointCloud(np.zeros((1, 3)))
        with pytest.raises(ValidationError):
            DatasetManifest([ScanEntry("a", cloud=cloud), ScanEntry("a", cloud=cloud)])

    def test_partial_poses(self):
        """Un split ne peut pas avoir des poses pour une partie de ses scans."""
        cloud = PointCloud(np.zeros((1, 3)))
        with pytest.raises(ValidationError):
            DatasetManifest([ScanEntry("a", cloud=cloud, pose=Pose.identity()), ScanEntry("b", cloud=cloud)])

    def test_query_database_traversals_disjoint(self):
        """Les splits query et database ne partagent aucun parcours."""
        cloud = PointCloud(np.zeros((1, 3)))
        with pytest.raises(ValidationError):
            DatasetManifest(
                [ScanEntry("a", cloud=cloud, split=QUERY), ScanEntry("b", cloud=cloud, split=DATABASE)]
            )

    def test_invalid_scan_id(self):
        """Un identifiant contenant un séparateur est refusé."""
        with pytest.raises(ValidationError):
            ScanEntry("a b", cloud=PointCloud(np.zeros((1, 3))))

    def test_unknown_scan(self):
        """Chercher un scan inconnu est une erreur de données."""
        with pytest.raises(DataError):
            small_manifest().index_of("absent")

    def test_missing_manifest(self, tmp_path):
        """Un manifeste absent est une erreur de données."""
        with pytest.raises(DataError):
            read_manifest(tmp_path / "absent")

    def test_malformed_index_line(self, tmp_path):
        """Une ligne d'index mal formée est refusée avec son numéro."""
        (tmp_path / "manifest.txt").write_text("# h\na, scans/a.bin, 0\n")
        with pytest.raises(ParseError) as info:
            read_manifest(tmp_path)
        assert info.value.line == 2
