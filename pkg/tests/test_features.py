"""
Tests pour l'extracteur de descripteurs.
"""

import numpy as np
import pytest

from geoadapt.core.errors import ValidationError
from geoadapt.core.features import (
    RAW_DIM,
    FeatureConfig,
    FeatureExtractor,
    clamp_norm,
    clamp_norm_backward,
    extract,
    raw_descriptors,
)
from geoadapt.core.geometry import PointCloud, Pose, apply_pose

SMALL = FeatureConfig(hidden_dim=8, local_dim=4, global_dim=6, max_neighbors=64, local_norm_cap=1.0)


@pytest.fixture
def cloud():
    rng = np.random.default_rng(0)
    points = rng.normal(size=(40, 3)) * np.array([1.0, 1.0, 0.4])
    return PointCloud(points, intensity=rng.uniform(size=40))


class TestRawDescriptors:
    """Tests pour les descripteurs bruts."""

    def test_shape(self, cloud):
        """Un descripteur de 12 valeurs par point."""
        assert raw_descriptors(cloud, 1.0).shape == (len(cloud), RAW_DIM)

    def test_point_order_does_not_matter(self, cloud):
        """Permuter les points permute les descripteurs de la même façon."""
        perm = np.random.default_rng(1).permutation(len(cloud))
        shuffled = PointCloud(cloud.points[perm], cloud.intensity[perm])
        np.testing.assert_allclose(
            raw_descriptors(shuffled, 1.0), raw_descriptors(cloud, 1.0)[perm], atol=1e-9
        )

    def test_isolated_point_is_zero_except_density(self):
        """Un point sans voisin reçoit un descripteur nul, densité exceptée."""
        far = PointCloud(np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]]))
        raw = raw_descriptors(far, 1.0)
        density = raw[:, 8].copy()
        raw[:, 8] = 0.0
        assert not np.any(raw)
        assert np.all(density != 0.0)

    def test_empty_cloud(self):
        """Un nuage vide est refusé."""
        with pytest.raises(ValidationError):
            raw_descriptors(PointCloud(np.zeros((0, 3))), 1.0)


class TestClampNorm:
    """Tests pour la borne de norme des descripteurs locaux."""

    def test_caps_long_vectors(self):
        """Les vecteurs trop longs sont ramenés sur la sphère."""
        out = clamp_norm(np.array([[3.0, 4.0], [0.3, 0.4]]), 1.0)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), [1.0, 0.5])

    def test_backward_matches_finite_differences(self):
        """Le gradient coïncide avec les différences finies."""
        v = np.array([[3.0, 4.0], [0.3, 0.1]])
        upstream = np.array([[1.0, -2.0], [0.5, 0.5]])
        analytic = clamp_norm_backward(v, 2.0, upstream)
        numeric = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            plus, minus = v.copy(), v.copy()
            plus[idx] += 1e-6
            minus[idx] -= 1e-6
            numeric[idx] = (np.sum(clamp_norm(plus, 2.0) * upstream) - np.sum(clamp_norm(minus, 2.0) * upstream)) / 2e-6
        np.testing.assert_allclose(analytic, numeric, atol=1e-5)


class TestFeatureExtractor:
    """Tests pour FeatureExtractor."""

    def test_output_shapes(self, cloud):
        """Descripteur global de dimension fixe et un descripteur local par point."""
        extractor = FeatureExtractor.build(SMALL, seed=0)
        global_desc, local = extract(extractor, cloud)
        assert global_desc.shape == (SMALL.global_dim,)
        assert local.shape == (len(cloud), SMALL.local_dim)
        assert np.all(np.linalg.norm(local, axis=1) <= SMALL.local_norm_cap + 1e-9)

    def test_default_dimensions(self, cloud):
        """Par défaut : 256 valeurs globales et 16 valeurs locales."""
        global_desc, local = FeatureExtractor.build(seed=0).extract(cloud)
        assert global_desc.shape == (256,)
        assert local.shape[1] == 16

    def test_global_descriptor_ignores_point_order(self, cloud):
        """Le descripteur global ne dépend pas de l'ordre des points."""
        extractor = FeatureExtractor.build(SMALL, seed=3)
        perm = np.random.default_rng(2).permutation(len(cloud))
        shuffled = PointCloud(cloud.points[perm], cloud.intensity[perm])
        np.testing.assert_allclose(extractor.extract(shuffled)[0], extractor.extract(cloud)[0], atol=1e-9)

    def test_yaw_rotation_invariance(self, cloud):
        """Une rotation autour de l'axe vertical ne change pas le descripteur global."""
        extractor = FeatureExtractor.build(SMALL, seed=4)
        rotated = apply_pose(Pose.from_yaw(1.1, [0.0, 0.0, 0.0]), cloud)
        np.testing.assert_allclose(extractor.extract(rotated)[0], extractor.extract(cloud)[0], atol=1e-4)

    def test_empty_cloud(self):
        """Un nuage vide est refusé."""
        with pytest.raises(ValidationError):
            extract(FeatureExtractor.build(SMALL), PointCloud(np.zeros((0, 3))))

    def test_backward_matches_finite_differences(self, cloud):
        """Les gradients de l'encodeur coïncident avec les différences finies."""
        extractor = FeatureExtractor.build(SMALL, seed=5)
        rng = np.random.default_rng(6)
        w_global = rng.normal(size=SMALL.global_dim)
        w_local = rng.normal(size=(len(cloud), SMALL.local_dim))

        def loss() -> float:
            g, l = extractor.extract(cloud)
            return float(g @ w_global + np.sum(l * w_local))

        extractor.zero_grad()
        _, _, cache = extractor.forward_train(cloud)
        extractor.backward(cache, grad_global=w_global, grad_local=w_local)
        weight = extractor.encoder.layers[0].weight
        analytic = weight.grad.copy()

        numeric = np.zeros_like(weight.value)
        original = weight.value.copy()
        for idx in [(0, 0), (3, 2), (7, 5), (11, 7)]:
            for sign in (1.0, -1.0):
                values = original.copy()
                values[idx] += sign * 1e-6
                weight.value = values
                numeric[idx] += sign * loss() / 2e-6
        weight.value = original
        for idx in [(0, 0), (3, 2), (7, 5), (11, 7)]:
            assert analytic[idx] == pytest.approx(numeric[idx], abs=1e-4)

    def test_parameters_without_local_head(self):
        """La tête locale est exclue des paramètres entraînables si demandé."""
        extractor = FeatureExtractor.build(SMALL)
        local_ids = {id(p) for p in extractor.local_head.parameters()}
        assert not local_ids & {id(p) for p in extractor.parameters(train_local=False)}
        assert local_ids <= {id(p) for p in extractor.parameters(train_local=True)}

    def test_from_sections_requires_all_sections(self):
        """Une section manquante est refusée."""
        sections = FeatureExtractor.build(SMALL).sections()
        del sections["global_head"]
        with pytest.raises(ValidationError):
            FeatureExtractor.from_sections(sections, SMALL)

    def test_copy_is_independent(self, cloud):
        """Une copie donne les mêmes descripteurs mais ses poids sont indépendants."""
        extractor = FeatureExtractor.build(SMALL, seed=1)
        clone = extractor.copy()
        np.testing.assert_array_equal(clone.extract(cloud)[0], extractor.extract(cloud)[0])
        clone.global_head.layers[0].bias.value = clone.global_head.layers[0].bias.value + 1.0
        assert not np.allclose(clone.extract(cloud)[0], extractor.extract(cloud)[0])
