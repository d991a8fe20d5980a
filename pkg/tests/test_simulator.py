"""
Tests pour le simulateur de mondes et de décalages de domaine.
"""

import numpy as np
import pytest

from geoadapt.core.datasets import DATABASE, QUERY
from geoadapt.core.errors import ValidationError
from geoadapt.core.geometry import pose_distance
from geoadapt.core.simulator import (
    SHIFT_PRESETS,
    SimWorldConfig,
    generate_world,
    render_scan,
    shift_domain,
    simulate_world,
    trajectory,
)

TINY = SimWorldConfig(
    seed=3,
    area=2500.0,
    landmark_count=25,
    scans_per_lap=8,
    revisit_count=6,
    points_per_scan=200,
)


@pytest.fixture(scope="module")
def manifest():
    return simulate_world(TINY)


class TestSimulateWorld:
    """Tests pour la génération d'un jeu simulé."""

    def test_splits_and_traversals(self, manifest):
        """Le premier tour forme la base, le second les requêtes."""
        assert len(manifest.split(DATABASE)) == 8
        assert len(manifest.split(QUERY)) == 6
        assert set(manifest.split(DATABASE).traversals) == {"0"}
        assert set(manifest.split(QUERY).traversals) == {"1"}
        assert manifest.has_poses()

    def test_deterministic(self, manifest):
        """La même configuration donne exactement les mêmes scans."""
        again = simulate_world(TINY)
        assert again.scan_ids == manifest.scan_ids
        for i in range(len(manifest)):
            np.testing.assert_array_equal(again.cloud(i).points, manifest.cloud(i).points)

    def test_queries_revisit_database(self, manifest):
        """Chaque requête est à moins de 3 m de son lieu d'origine."""
        database, queries = trajectory(TINY)
        for k, query in enumerate(queries):
            assert pose_distance(query, database[k]) < 3.0

    def test_scans_within_range(self, manifest):
        """Les scans sont non vides, plafonnés et à portée du capteur."""
        for cloud in manifest.clouds():
            assert 0 < len(cloud) <= TINY.points_per_scan * 1.1
            horizontal = np.linalg.norm(cloud.points[:, :2], axis=1)
            assert horizontal.max() <= TINY.sensor_range + 0.5

    def test_scan_depends_only_on_pose(self):
        """Rendre deux fois la même pose donne le même scan."""
        world = generate_world(TINY)
        pose = trajectory(TINY)[0][2]
        np.testing.assert_array_equal(render_scan(world, TINY, pose).points, render_scan(world, TINY, pose).points)

    def test_invalid_config(self):
        """Les valeurs invalides sont refusées."""
        with pytest.raises(ValidationError):
            SimWorldConfig(dropout=1.0)
        with pytest.raises(ValidationError):
            SimWorldConfig(scans_per_lap=4, revisit_count=5)


class TestShiftDomain:
    """Tests pour les décalages de domaine."""

    def test_none_keeps_world(self):
        """Le préréglage « none » ne change rien."""
        assert shift_domain(TINY, "none") == TINY

    def test_severe(self):
        """Le préréglage « severe » change de monde et dégrade le capteur."""
        shifted = shift_domain(TINY, "severe")
        assert shifted.seed != TINY.seed
        assert shifted.density_scale == pytest.approx(0.5)
        assert shifted.range_scale == pytest.approx(0.75)
        assert shifted.shape_mix == SHIFT_PRESETS["severe"].shape_mix

    def test_severe_scans_are_sparser(self):
        """Les scans du domaine décalé sont moins denses."""
        source = simulate_world(TINY)
        target = simulate_world(shift_domain(TINY, "severe"))
        mean_source = np.mean([len(c) for c in source.clouds()])
        mean_target = np.mean([len(c) for c in target.clouds()])
        assert mean_target < mean_source

    def test_unknown_preset(self):
        """Un préréglage inconnu est refusé."""
        with pytest.raises(ValidationError):
            shift_domain(TINY, "extreme")
