"""
Tests pour les correspondances et les labels d'association.
"""

import numpy as np
import pytest

from geoadapt.core.correspondence import (
    GROUND_TRUTH,
    PROPOSED,
    CorrespondenceSet,
    gt_correspondences,
    propose_correspondences,
)
from geoadapt.core.errors import ValidationError
from geoadapt.core.geometry import PointCloud, Pose, apply_pose
from geoadapt.core.labels import Association, LabelingConfig, label_from_distance, source_label


@pytest.fixture
def scene():
    rng = np.random.default_rng(0)
    return PointCloud(rng.uniform(-10, 10, size=(80, 3)))


class TestGroundTruthCorrespondences:
    """Tests pour les correspondances de vérité terrain."""

    def test_same_scene_gives_identity(self, scene):
        """Deux vues d'une même scène s'apparient point à point."""
        pose_a = Pose.identity()
        pose_b = Pose.from_yaw(0.8, [2.0, -1.0, 0.0])
        view_b = apply_pose(pose_b.inverse(), scene)
        result = gt_correspondences(scene, view_b, pose_a, pose_b, max_dist=0.3)
        assert result.source == GROUND_TRUTH
        np.testing.assert_array_equal(result.index_a, np.arange(len(scene)))
        np.testing.assert_array_equal(result.index_b, np.arange(len(scene)))
        assert np.all(result.feature_distance < 1e-4)

    def test_disjoint_scenes_give_empty_set(self, scene):
        """Deux nuages sans recouvrement ne donnent aucune correspondance."""
        far = Pose.from_yaw(0.0, [1000.0, 0.0, 0.0])
        result = gt_correspondences(scene, scene, Pose.identity(), far, max_dist=0.3)
        assert len(result) == 0
        assert result.is_degenerate()

    def test_empty_cloud(self, scene):
        """Un nuage vide est refusé."""
        with pytest.raises(ValidationError):
            gt_correspondences(PointCloud(np.zeros((0, 3))), scene, Pose.identity(), Pose.identity(), 0.3)


class TestProposedCorrespondences:
    """Tests pour les correspondances proposées par les descripteurs locaux."""

    def test_permuted_descriptors(self):
        """Des descripteurs permutés sont retrouvés exactement."""
        rng = np.random.default_rng(1)
        l_a = rng.normal(size=(30, 4))
        perm = rng.permutation(30)
        l_b = l_a[perm]
        result = propose_correspondences(l_a, l_b, cap=30)
        assert result.source == PROPOSED
        np.testing.assert_array_equal(result.index_a, np.arange(30))
        np.testing.assert_array_equal(l_b[result.index_b], l_a[result.index_a])

    def test_cap_and_order(self):
        """Au plus `cap` correspondances, triées par distance croissante."""
        rng = np.random.default_rng(2)
        result = propose_correspondences(rng.normal(size=(60, 3)), rng.normal(size=(50, 3)), cap=10)
        assert len(result) <= 10
        assert np.all(np.diff(result.feature_distance) >= 0)

    def test_mutual_filter_keeps_subset(self):
        """Le filtrage mutuel ne garde que des appariements du cas non mutuel."""
        rng = np.random.default_rng(3)
        l_a, l_b = rng.normal(size=(40, 3)), rng.normal(size=(25, 3))
        mutual = propose_correspondences(l_a, l_b, cap=100, mutual=True)
        loose = propose_correspondences(l_a, l_b, cap=100, mutual=False)
        assert mutual.pairs() <= loose.pairs()
        assert len(loose) == 40

    def test_empty_descriptors(self):
        """Des descripteurs vides donnent un ensemble vide."""
        assert len(propose_correspondences(np.zeros((0, 3)), np.ones((4, 3)))) == 0

    def test_misaligned_clouds(self, scene):
        """Des descripteurs non alignés sur les nuages sont refusés."""
        with pytest.raises(ValidationError):
            propose_correspondences(np.zeros((5, 3)), np.zeros((80, 3)), clouds=(scene, scene))


class TestCorrespondenceSet:
    """Tests pour CorrespondenceSet."""

    def test_rejects_duplicates(self):
        """Les paires dupliquées sont refusées."""
        with pytest.raises(ValidationError):
            CorrespondenceSet([0, 0], [1, 1], [0.1, 0.2])

    def test_rejects_unsorted_proposals(self):
        """Des propositions non triées par distance sont refusées."""
        with pytest.raises(ValidationError):
            CorrespondenceSet([0, 1], [0, 1], [0.5, 0.1], PROPOSED)

    def test_swapped(self):
        """Échanger les rôles conserve les paires inversées."""
        corr = CorrespondenceSet([0, 1, 2], [5, 3, 4], [0.1, 0.2, 0.3])
        assert corr.swapped().pairs() == {(5, 0), (3, 1), (4, 2)}

    def test_check_bounds(self):
        """Un indice hors du nuage est refusé."""
        with pytest.raises(ValidationError):
            CorrespondenceSet([0, 9], [0, 1], [0.0, 0.1]).check_bounds(5, 5)


class TestLabels:
    """Tests pour les labels d'association."""

    def test_thresholds_are_inclusive(self):
        """Les seuils sont inclusifs des deux côtés."""
        cfg = LabelingConfig(t_pos=3.0, t_neg=20.0)
        assert label_from_distance(3.0, cfg) is Association.POSITIVE
        assert label_from_distance(20.0, cfg) is Association.NEGATIVE
        assert label_from_distance(10.0, cfg) is Association.NEITHER

    def test_source_label_uses_translation(self):
        """Le label d'une paire source vient de la distance entre les poses."""
        cfg = LabelingConfig()
        a = Pose.from_yaw(0.0, [0.0, 0.0, 0.0])
        b = Pose.from_yaw(3.0, [25.0, 0.0, 0.0])
        assert source_label(a, b, cfg) is Association.NEGATIVE

    def test_invalid_thresholds(self):
        """t_pos doit être strictement inférieur à t_neg."""
        with pytest.raises(ValidationError):
            LabelingConfig(t_pos=5.0, t_neg=5.0)
