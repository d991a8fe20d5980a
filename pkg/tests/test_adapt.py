"""
Tests pour les étapes de l'adaptation, le pipeline et le balayage d'ablation.
"""

import shutil
from dataclasses import replace

import numpy as np
import pytest

from geoadapt.core.config import RunConfig, apply_overrides
from geoadapt.core.datasets import DatasetManifest, ScanEntry
from geoadapt.core.default.ablation import ablation_sweep, cell_overrides
from geoadapt.core.default.paths import (
    ADAPTED_CHECKPOINT,
    AUDIT_FILE,
    GCC_CHECKPOINT,
    LOGS_REL_PATH,
    PRETRAIN_CHECKPOINT,
    STAGE_REPORTS_FILE,
    TUPLES_FILE,
)
from geoadapt.core.default.pipeline import GeoAdaptPipeline, load_extractor, run_pipeline
from geoadapt.core.default.steps import (
    augment_cloud,
    ground_truth_tuples,
    mine_source_labels,
    pretrain_source,
    pseudolabel_target,
    retrain_target,
    sample_source_pairs,
    stage_rng,
)
from geoadapt.core.errors import ConfigError, StageError, StarvationError
from geoadapt.core.evaluation import describe, separability_histogram
from geoadapt.core.features import FeatureExtractor
from geoadapt.core.gcc import build_scorer
from geoadapt.core.geometry import PointCloud, Pose, apply_pose
from geoadapt.core.labels import LabelingConfig
from geoadapt.core.pseudolabel import PseudoLabelConfig, tuples_from_poses
from geoadapt.core.simulator import shift_domain, simulate_world

TINY = {
    "simulation.seed": 3,
    "simulation.area": 2500.0,
    "simulation.landmark_count": 25,
    "simulation.scans_per_lap": 8,
    "simulation.revisit_count": 6,
    "simulation.points_per_scan": 200,
    "features.hidden_dim": 8,
    "features.local_dim": 4,
    "features.global_dim": 8,
    "consistency.input_length": 16,
    "correspondence.max_correspondences": 32,
    "correspondence.mutual": False,
    "pseudolabel.k": 10,
    "pseudolabel.temporal_exclusion_window": 1,
    "pretrain.epochs": 1,
    "pretrain.batch_size": 4,
    "gcc.epochs": 1,
    "retrain.epochs": 1,
    "retrain.batch_size": 4,
    "training.epoch_scale": 1.0,
    "training.gcc_pairs": 8,
    "training.gcc_holdout": 0.0,
    "training.negatives_per_anchor": 2,
    "training.use_ground_truth_tuples": True,
}


def tiny_config(**changes) -> RunConfig:
    overrides = dict(TINY)
    overrides.update({key.replace("__", "."): value for key, value in changes.items()})
    return apply_overrides(RunConfig(), overrides)


def grid_manifest(spacing: float = 10.0) -> DatasetManifest:
    """Deux parcours de quatre scans aux mêmes positions, espacées de `spacing`."""
    rng = np.random.default_rng(0)
    entries = [
        ScanEntry(
            f"s{i:02d}",
            cloud=PointCloud(rng.uniform(-4, 4, size=(60, 3))),
            pose=Pose.from_yaw(0.0, [spacing * (i % 4), 0.0, 0.0]),
            traversal=str(i // 4),
        )
        for i in range(8)
    ]
    return DatasetManifest(entries)


def same_parameters(a: FeatureExtractor, b: FeatureExtractor) -> bool:
    return all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))


@pytest.fixture(scope="module")
def worlds():
    cfg = tiny_config()
    source = simulate_world(cfg.simulation)
    target = simulate_world(shift_domain(cfg.simulation, "moderate"))
    return source, target


class TestStageHelpers:
    """Tests pour les générateurs d'étape et l'augmentation."""

    def test_stage_rng(self):
        """Même graine et même étape : mêmes tirages ; étapes différentes : tirages différents."""
        a = stage_rng(4, "retrain").uniform(size=5)
        b = stage_rng(4, "retrain").uniform(size=5)
        c = stage_rng(4, "pretrain").uniform(size=5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_augmentation_preserves_world_geometry(self):
        """Sans bruit, le nuage augmenté et sa pose compensée donnent les mêmes points monde."""
        cfg = replace(RunConfig().training, jitter_sigma=0.0)
        cloud = PointCloud(np.random.default_rng(1).normal(size=(30, 3)))
        pose = Pose.from_yaw(0.4, [5.0, 1.0, 0.0])
        augmented, compensated = augment_cloud(cloud, pose, np.random.default_rng(2), cfg)
        assert not np.allclose(augmented.points, cloud.points)
        np.testing.assert_allclose(
            apply_pose(compensated, augmented).points, apply_pose(pose, cloud).points, atol=1e-4
        )

    def test_augmentation_without_pose(self):
        """Un nuage sans pose reste sans pose."""
        cloud = PointCloud(np.ones((4, 3)))
        _, pose = augment_cloud(cloud, None, np.random.default_rng(0), RunConfig().training)
        assert pose is None


class TestSourceLabels:
    """Tests pour la labellisation de la source."""

    def test_positives_and_negatives(self):
        """Le même lieu sur l'autre parcours est positif ; les lieux à 20 m ou plus sont négatifs."""
        labels = mine_source_labels(grid_manifest(), LabelingConfig(t_pos=3.0, t_neg=20.0))
        assert labels.positives[0].tolist() == [4]
        assert labels.negatives[0].tolist() == [2, 3, 6, 7]
        assert labels.anchors.tolist() == list(range(8))

    def test_sample_source_pairs_is_balanced(self):
        """Autant de paires négatives que positives, labels cohérents avec les poses."""
        cfg = tiny_config(training__gcc_pairs=6)
        labels = mine_source_labels(grid_manifest(), cfg.labeling)
        descriptors = np.random.default_rng(0).normal(size=(8, 4))
        pairs = sample_source_pairs(labels, descriptors, cfg, np.random.default_rng(1))
        positives = [p for p in pairs if p[2] == 1]
        negatives = [p for p in pairs if p[2] == 0]
        assert len(positives) == len(negatives) == 3
        for i, j, label in pairs:
            assert i < j
            if label:
                assert labels.distances[i, j] <= cfg.labeling.t_pos
            else:
                assert labels.distances[i, j] >= cfg.labeling.t_neg


class TestPretrain:
    """Tests pour le pré-entraînement."""

    def test_zero_epochs_returns_unchanged_copy(self):
        """Sans époque, l'extracteur rendu a les paramètres initiaux."""
        cfg = tiny_config(pretrain__epochs=0)
        initial = FeatureExtractor.build(cfg.features, seed=0)
        trained, report = pretrain_source(initial, grid_manifest(), cfg)
        assert trained is not initial
        assert same_parameters(trained, initial)
        assert report.epochs == 0 and report.final_loss == 0.0

    def test_training_leaves_input_untouched(self):
        """L'extracteur d'entrée n'est pas modifié par l'entraînement."""
        cfg = tiny_config(pretrain__learning_rate=0.1)
        initial = FeatureExtractor.build(cfg.features, seed=0)
        reference = initial.copy()
        _, report = pretrain_source(initial, grid_manifest(), cfg)
        assert same_parameters(initial, reference)
        assert report.epochs == 1 and np.isfinite(report.final_loss)

    def test_no_possible_triplet(self):
        """Sans positif possible, la configuration est mise en cause."""
        cfg = tiny_config(labeling__t_pos=0.5, labeling__t_neg=1.0)
        manifest = DatasetManifest(
            [
                ScanEntry(f"s{i}", cloud=PointCloud(np.ones((5, 3))), pose=Pose.from_yaw(0.0, [10.0 * i, 0.0, 0.0]))
                for i in range(4)
            ]
        )
        with pytest.raises(ConfigError):
            pretrain_source(FeatureExtractor.build(cfg.features), manifest, cfg)


class TestRetrain:
    """Tests pour le ré-entraînement sur la cible."""

    def test_empty_tuples(self):
        """Sans tuple, le ré-entraînement échoue par famine."""
        cfg = tiny_config()
        with pytest.raises(StarvationError):
            retrain_target(FeatureExtractor.build(cfg.features), [], grid_manifest(), cfg)

    def test_zero_epochs_returns_unchanged_copy(self):
        """Sans époque, l'extracteur rendu est identique à celui d'entrée."""
        cfg = tiny_config(retrain__epochs=0)
        extractor = FeatureExtractor.build(cfg.features, seed=1)
        tuples = tuples_from_poses(grid_manifest(), cfg.labeling, PseudoLabelConfig(k=3, temporal_exclusion_window=0))
        adapted, report = retrain_target(extractor, tuples, grid_manifest(), cfg)
        assert same_parameters(adapted, extractor)
        assert report.extra["steps"] == 0

    def test_local_head_is_frozen(self):
        """Seuls l'encodeur et la tête globale peuvent changer."""
        cfg = tiny_config(retrain__learning_rate=0.5, retrain__epochs=2)
        extractor = FeatureExtractor.build(cfg.features, seed=1)
        manifest = grid_manifest()
        tuples = tuples_from_poses(manifest, cfg.labeling, PseudoLabelConfig(k=3, temporal_exclusion_window=0))
        adapted, report = retrain_target(extractor, tuples, manifest, cfg)
        for p, q in zip(adapted.local_head.parameters(), extractor.local_head.parameters()):
            np.testing.assert_array_equal(p.value, q.value)
        if report.final_loss > 0:
            assert not same_parameters(adapted, extractor)


class TestPseudolabelStage:
    """Tests pour l'étape de pseudo-labels."""

    def test_target_poses_are_ignored(self, tmp_path):
        """Les poses de la cible ne changent pas les pseudo-labels."""
        cfg = tiny_config(pseudolabel__k=3)
        extractor = FeatureExtractor.build(cfg.features, seed=0)
        scorer = build_scorer(cfg.consistency.input_length, seed=5)
        manifest = grid_manifest()

        def audit(target, name):
            path = tmp_path / name
            try:
                pseudolabel_target(extractor, scorer, target, cfg, audit_path=path)
            except StarvationError:
                pass
            return path.read_text()

        assert audit(manifest, "with.txt") == audit(manifest.without_poses(), "without.txt")

    def test_ground_truth_tuples_report(self, tmp_path):
        """Les tuples de vérité terrain ont leur compte rendu, leur audit et leur fichier."""
        cfg = tiny_config(pseudolabel__k=7, pseudolabel__temporal_exclusion_window=0)
        extractor = FeatureExtractor.build(cfg.features, seed=0)
        tuples, report = ground_truth_tuples(
            extractor,
            grid_manifest(),
            cfg,
            audit_path=tmp_path / "audit.txt",
            tuples_path=tmp_path / "tuples.txt",
        )
        assert report.stage == "pseudolabel"
        assert report.extra["tuples"] == len(tuples) == 8
        assert report.extra["starved_anchors"] == 0
        assert report.extra["labels"] == 8 * 7
        assert (tmp_path / "audit.txt").is_file()
        assert (tmp_path / "tuples.txt").is_file()


class TestPipeline:
    """Tests pour l'enchaînement des étapes."""

    def test_run_writes_artifacts(self, worlds, tmp_path):
        """Chaque étape écrit son artefact et son compte rendu."""
        source, target = worlds
        result = run_pipeline(source, target, tiny_config(), tmp_path / "run")
        for name in (PRETRAIN_CHECKPOINT, GCC_CHECKPOINT, TUPLES_FILE, ADAPTED_CHECKPOINT):
            assert (tmp_path / "run" / name).is_file()
        assert [r.stage for r in result.reports] == ["pretrain", "gcc", "pseudolabel", "retrain"]
        assert (tmp_path / "run" / AUDIT_FILE).is_file()
        stage_log = (tmp_path / "run" / LOGS_REL_PATH / STAGE_REPORTS_FILE).read_text()
        assert "pseudolabel" in stage_log
        _, scorer = load_extractor(result.checkpoint, tiny_config())
        assert scorer is not None

    def test_resume_is_deterministic(self, worlds, tmp_path):
        """Reprendre après la perte du checkpoint final le reproduit à l'octet près."""
        source, target = worlds
        cfg = tiny_config()
        first = run_pipeline(source, target, cfg, tmp_path / "a")
        expected = first.checkpoint.read_bytes()
        first.checkpoint.unlink()
        resumed = run_pipeline(None, target, cfg, tmp_path / "a")
        assert [r.stage for r in resumed.reports] == ["retrain"]
        assert resumed.checkpoint.read_bytes() == expected
        fresh = run_pipeline(source, target, cfg, tmp_path / "b")
        assert fresh.checkpoint.read_bytes() == expected

    def test_zero_epochs_keep_initial_extractor(self, worlds, tmp_path):
        """Sans époque de pré-entraînement ni de ré-entraînement, l'extracteur final est l'initial."""
        source, target = worlds
        cfg = tiny_config(pretrain__epochs=0, retrain__epochs=0)
        result = run_pipeline(source, target, cfg, tmp_path / "run")
        adapted, _ = load_extractor(result.checkpoint, cfg)
        assert same_parameters(adapted, FeatureExtractor.build(cfg.features, seed=cfg.seed))

    def test_missing_source(self, worlds, tmp_path):
        """Sans checkpoint ni source, l'étape A échoue avec une erreur de données."""
        _, target = worlds
        with pytest.raises(StageError) as info:
            run_pipeline(None, target, tiny_config(), tmp_path / "run")
        assert info.value.stage == "pretrain"
        assert info.value.category == "data"

    def test_gcc_checkpoint_without_scorer(self, worlds, tmp_path):
        """Un checkpoint de classifieur sans classifieur est refusé."""
        source, target = worlds
        cfg = tiny_config(pretrain__epochs=0)
        pipeline = GeoAdaptPipeline.with_default_config(tmp_path / "run", cfg)
        pipeline.pretrain(source)
        shutil.copy(tmp_path / "run" / PRETRAIN_CHECKPOINT, tmp_path / "run" / GCC_CHECKPOINT)
        with pytest.raises(StageError) as info:
            pipeline.run(None, target)
        assert info.value.stage == "gcc"


class TestAblation:
    """Tests pour le balayage d'ablation."""

    def test_cell_overrides(self):
        """Chaque axe se traduit en clés de configuration."""
        assert cell_overrides("normalization", "sort") == {"consistency.sort": True, "consistency.scale": False}
        assert cell_overrides("scale", "False") == {"consistency.scale": False}
        assert cell_overrides("alpha_pos", "0.9") == {"pseudolabel.alpha_pos": 0.9}

    def test_unknown_axis(self):
        """Un axe inconnu est refusé avec l'axe le plus proche."""
        with pytest.raises(ConfigError) as info:
            cell_overrides("alpha_po", "0.9")
        assert info.value.suggestion == "alpha_pos"

    def test_invalid_values(self):
        """Les valeurs mal typées sont refusées."""
        with pytest.raises(ConfigError):
            cell_overrides("sort", "maybe")
        with pytest.raises(ConfigError):
            cell_overrides("alpha_neg", "low")
        with pytest.raises(ConfigError):
            cell_overrides("normalization", "partial")

    def test_empty_grid(self, worlds, tmp_path):
        """Une grille vide est refusée avant tout entraînement."""
        source, target = worlds
        with pytest.raises(ConfigError):
            ablation_sweep(source, target, tiny_config(), "alpha_pos", [], tmp_path)

    @pytest.mark.slow
    def test_sweep_rows(self, worlds, tmp_path):
        """Une ligne de référence puis une ligne par valeur de la grille."""
        source, target = worlds
        rows = ablation_sweep(source, target, tiny_config(), "alpha_pos", ["0.9", "0.99"], tmp_path)
        assert [row["alpha_pos"] for row in rows] == ["source-only", "0.9", "0.99"]
        assert all(row["status"] == "ok" for row in rows)
        assert all(row["tuples"] > 0 for row in rows[1:])
        assert (tmp_path / "ablation.csv").is_file()


class TestAdaptationEffect:
    """Tests pour l'effet du ré-entraînement sur la cible décalée."""

    @pytest.mark.slow
    def test_adaptation_reduces_separability_overlap(self, worlds):
        """Le recouvrement des distances positives et négatives baisse après ré-entraînement sur la cible."""
        source, target = worlds
        cfg = tiny_config(
            training__rotation_augmentation=0.0,
            training__jitter_sigma=0.0,
            training__negatives_per_anchor=8,
            retrain__epochs=60,
            retrain__learning_rate=0.01,
            retrain__schedule="constant",
        )
        pretrained, _ = pretrain_source(FeatureExtractor.build(cfg.features, seed=cfg.seed), source, cfg)
        tuples = tuples_from_poses(target, cfg.labeling, PseudoLabelConfig(temporal_exclusion_window=0))
        adapted, _ = retrain_target(pretrained, tuples, target, cfg)

        def overlap(extractor):
            return separability_histogram(describe(extractor, target), cfg.labeling).overlap

        before, after = overlap(pretrained), overlap(adapted)
        assert before > 0.0
        assert after < before
