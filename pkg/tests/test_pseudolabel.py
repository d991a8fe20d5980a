"""
Tests pour la génération de pseudo-labels.
"""

import numpy as np
import pytest

from geoadapt.core.datasets import DatasetManifest, ScanEntry
from geoadapt.core.errors import ParseError, StarvationError, ValidationError
from geoadapt.core.features import FeatureConfig, FeatureExtractor
from geoadapt.core.gcc import ConsistencyConfig, build_scorer
from geoadapt.core.geometry import PointCloud, Pose
from geoadapt.core.labels import Association, LabelingConfig
from geoadapt.core.pseudolabel import (
    PseudoLabel,
    PseudoLabelConfig,
    TrainingTuple,
    build_tuples,
    label_pair,
    pseudo_label_dataset,
    read_audit,
    read_tuples,
    retrieve_candidates,
    tuples_from_poses,
    write_audit,
    write_tuples,
)


def line_manifest(n: int = 8, spacing: float = 2.0, seed: int = 0) -> DatasetManifest:
    """Scans aléatoires posés le long d'une ligne, en deux parcours."""
    rng = np.random.default_rng(seed)
    entries = [
        ScanEntry(
            f"s{i:02d}",
            cloud=PointCloud(rng.uniform(-4, 4, size=(60, 3))),
            pose=Pose.from_yaw(0.0, [spacing * (i % (n // 2)), 0.0, 0.0]),
            traversal=str(i // (n // 2)),
        )
        for i in range(n)
    ]
    return DatasetManifest(entries)


class TestRetrieveCandidates:
    """Tests pour la recherche des candidats."""

    def test_excludes_window_and_breaks_ties_by_index(self):
        """L'ancre et ses voisins temporels sont exclus ; égalités au plus petit indice."""
        database = np.arange(10, dtype=float).reshape(-1, 1)
        cfg = PseudoLabelConfig(k=3, temporal_exclusion_window=1)
        result = retrieve_candidates(database[5], database, cfg, anchor_index=5, traversals=["0"] * 10)
        assert [c.index for c in result] == [3, 7, 2]
        assert [c.distance for c in result] == [2.0, 2.0, 3.0]

    def test_window_only_applies_to_same_traversal(self):
        """Un voisin temporel d'un autre parcours reste candidat."""
        database = np.arange(10, dtype=float).reshape(-1, 1)
        traversals = ["0"] * 10
        traversals[4] = "1"
        cfg = PseudoLabelConfig(k=2, temporal_exclusion_window=1)
        result = retrieve_candidates(database[5], database, cfg, anchor_index=5, traversals=traversals)
        assert [c.index for c in result] == [4, 3]

    def test_too_few_candidates(self):
        """Moins de K candidats éligibles est une erreur."""
        database = np.arange(4, dtype=float).reshape(-1, 1)
        with pytest.raises(ValidationError):
            retrieve_candidates(database[0], database, PseudoLabelConfig(k=4, temporal_exclusion_window=0), 0)


class TestDecisions:
    """Tests pour les décisions et les tuples."""

    def test_label_pair_thresholds(self):
        """Les seuils α sont inclusifs."""
        cfg = PseudoLabelConfig(alpha_pos=0.9, alpha_neg=0.2)
        assert label_pair(0.9, cfg) is Association.POSITIVE
        assert label_pair(0.2, cfg) is Association.NEGATIVE
        assert label_pair(0.5, cfg) is Association.NEITHER

    def test_invalid_thresholds(self):
        """alpha_neg doit être strictement inférieur à alpha_pos."""
        with pytest.raises(ValidationError):
            PseudoLabelConfig(alpha_pos=0.3, alpha_neg=0.3)

    def test_build_tuples(self):
        """Les labels sont regroupés par ancre ; Neither est ignoré."""
        labels = [
            PseudoLabel("a", "b", Association.POSITIVE, 0.99),
            PseudoLabel("a", "c", Association.NEGATIVE, 0.01),
            PseudoLabel("a", "d", Association.NEITHER, 0.5),
            PseudoLabel("e", "b", Association.POSITIVE, 0.99),
        ]
        tuples = build_tuples(labels)
        assert len(tuples) == 1
        assert tuples[0] == TrainingTuple("a", ["b"], ["c"])

    def test_starvation(self):
        """Sans ancre complète, la construction des tuples échoue."""
        with pytest.raises(StarvationError):
            build_tuples([PseudoLabel("a", "b", Association.NEITHER, 0.5)])

    def test_tuple_invariants(self):
        """Positifs et négatifs non vides, disjoints et sans l'ancre."""
        with pytest.raises(ValidationError):
            TrainingTuple("a", ["b"], ["b"])
        with pytest.raises(ValidationError):
            TrainingTuple("a", ["a"], ["b"])
        with pytest.raises(ValidationError):
            TrainingTuple("a", [], ["b"])


class TestFiles:
    """Tests pour les fichiers de tuples et d'audit."""

    def test_tuples_file(self, tmp_path):
        """Format `ancre | positifs | négatifs` avec en-tête commenté."""
        tuples = [TrainingTuple("a", ["b", "c"], ["d"]), TrainingTuple("e", ["f"], ["g", "h"])]
        path = write_tuples(tmp_path / "tuples.txt", tuples, header="geoadapt test")
        lines = path.read_text().splitlines()
        assert lines[0] == "# geoadapt test"
        assert lines[1] == "a | b c | d"
        assert read_tuples(path) == tuples

    def test_malformed_tuple_line(self, tmp_path):
        """Une ligne mal formée donne une erreur avec son numéro."""
        path = tmp_path / "tuples.txt"
        path.write_text("a | b | c\na | b\n")
        with pytest.raises(ParseError) as info:
            read_tuples(path)
        assert info.value.line == 2

    def test_audit_file(self, tmp_path):
        """Une ligne par paire avec distance, score et décision."""
        labels = [PseudoLabel("a", "b", Association.POSITIVE, 0.97, 0.5), PseudoLabel("a", "c", Association.NEITHER, 0.4, 1.5)]
        path = write_audit(tmp_path / "audit.txt", labels)
        assert path.read_text().splitlines()[0] == "a, b, 0.5, 0.97, Positive"
        again = read_audit(path)
        assert [(l.candidate_id, l.decision, l.beta) for l in again] == [
            ("b", Association.POSITIVE, 0.97),
            ("c", Association.NEITHER, 0.4),
        ]


class TestTuplesFromPoses:
    """Tests pour les tuples de vérité terrain."""

    def test_labels_from_pose_distance(self):
        """Positifs à moins de t_pos, négatifs au-delà de t_neg."""
        manifest = line_manifest(8, spacing=2.0)
        labeling = LabelingConfig(t_pos=3.0, t_neg=5.0)
        tuples = tuples_from_poses(manifest, labeling, PseudoLabelConfig(k=3, temporal_exclusion_window=0))
        first = next(t for t in tuples if t.anchor_id == "s00")
        # s04 est au même endroit sur l'autre parcours, s01 et s05 à 2 m
        assert set(first.positive_ids) == {"s01", "s04", "s05"}
        assert set(first.negative_ids) == {"s03", "s07"}


class TestPseudoLabelDataset:
    """Tests pour l'étiquetage d'un jeu cible complet."""

    @pytest.fixture
    def setup(self):
        features = FeatureConfig(hidden_dim=8, local_dim=4, global_dim=8)
        extractor = FeatureExtractor.build(features, seed=0)
        scorer = build_scorer(16, hidden=(4, 2), init="zeros")
        return extractor, scorer, ConsistencyConfig(input_length=16), PseudoLabelConfig(k=3, temporal_exclusion_window=1)

    def test_audit_written_before_starvation(self, setup, tmp_path):
        """Un classifieur indécis affame l'étiquetage, mais l'audit est écrit."""
        extractor, scorer, consistency, cfg = setup
        audit = tmp_path / "audit.txt"
        with pytest.raises(StarvationError):
            pseudo_label_dataset(extractor, scorer, line_manifest(), cfg, consistency, audit_path=audit)
        assert len(read_audit(audit)) == 8 * 3

    def test_poses_are_not_used(self, setup):
        """Les mêmes pseudo-labels sont produits avec ou sans poses."""
        extractor, scorer, consistency, cfg = setup
        scorer.layers[-1].bias.value = np.full((1, 1), 3.0)
        manifest = line_manifest()

        def decisions(target):
            try:
                result = pseudo_label_dataset(extractor, scorer, target, cfg, consistency)
                return [(l.anchor_id, l.candidate_id, l.decision, l.beta) for l in result.labels]
            except StarvationError as error:
                return str(error)

        assert decisions(manifest) == decisions(manifest.without_poses())

    def test_threads_do_not_change_labels(self, setup, tmp_path):
        """Le nombre de fils ne change pas le fichier d'audit."""
        extractor, scorer, consistency, cfg = setup
        paths = []
        for threads in (1, 3):
            path = tmp_path / f"audit_{threads}.txt"
            with pytest.raises(StarvationError):
                pseudo_label_dataset(extractor, scorer, line_manifest(), cfg, consistency, threads=threads, audit_path=path)
            paths.append(path)
        assert paths[0].read_text() == paths[1].read_text()
