"""
Tests pour la configuration d'une exécution.
"""

import json

import pytest

from geoadapt.core.config import (
    CONFIG_FILE,
    RunConfig,
    apply_overrides,
    artifact_header,
    checkpoint_metadata,
    config_table_rows,
    load_run_config,
    write_run_config,
)
from geoadapt.core.errors import ConfigError, DataError


class TestDefaults:
    """Tests pour les valeurs par défaut."""

    def test_schedules(self):
        """Planifications par défaut des trois étapes entraînées."""
        cfg = RunConfig()
        assert (cfg.pretrain.epochs, cfg.pretrain.learning_rate, cfg.pretrain.milestones) == (80, 1e-3, (30, 60))
        assert (cfg.gcc.epochs, cfg.gcc.learning_rate, cfg.gcc.schedule) == (5, 0.01, "cosine")
        assert (cfg.retrain.epochs, cfg.retrain.learning_rate, cfg.retrain.milestones) == (40, 1e-4, (25,))
        assert cfg.pretrain.momentum == cfg.gcc.momentum == cfg.retrain.momentum == 0.9

    def test_thresholds(self):
        """Seuils de labellisation et de pseudo-labels par défaut."""
        cfg = RunConfig()
        assert (cfg.labeling.t_pos, cfg.labeling.t_neg) == (3.0, 20.0)
        assert (cfg.pseudolabel.alpha_pos, cfg.pseudolabel.alpha_neg) == (0.95, 0.2)
        assert cfg.pseudolabel.k == 50
        assert cfg.consistency.input_length == 256


class TestScaled:
    """Tests pour la mise à l'échelle des époques."""

    def test_epoch_scale(self):
        """Époques et paliers sont multipliés puis arrondis."""
        cfg = apply_overrides(RunConfig(), {"training.epoch_scale": 0.25})
        pretrain = cfg.scaled("pretrain")
        assert pretrain.epochs == 20
        assert pretrain.milestones == (8, 15)
        assert cfg.scaled("gcc").epochs == 1
        assert cfg.scaled("retrain").epochs == 10

    def test_zero_epochs_stay_zero(self):
        """Un nombre d'époques nul n'est pas relevé au plancher."""
        cfg = apply_overrides(RunConfig(), {"retrain.epochs": 0})
        assert cfg.scaled("retrain").epochs == 0

    def test_floor_of_one(self):
        """Une petite échelle garde au moins une époque."""
        cfg = apply_overrides(RunConfig(), {"training.epoch_scale": 0.001})
        assert cfg.scaled("gcc").epochs == 1


class TestOverrides:
    """Tests pour les valeurs explicites."""

    def test_apply(self):
        """Une valeur explicite remplace la valeur par défaut de sa section."""
        cfg = apply_overrides(RunConfig(), {"pretrain.learning_rate": 0.002, "shift": "moderate"})
        assert cfg.pretrain.learning_rate == 0.002
        assert cfg.pretrain.epochs == 80
        assert cfg.shift == "moderate"

    def test_unknown_key_suggests_nearest(self):
        """Une clé inconnue est refusée avec la clé connue la plus proche."""
        with pytest.raises(ConfigError) as info:
            apply_overrides(RunConfig(), {"pretrain.learning_rat": 0.1})
        assert info.value.key == "pretrain.learning_rat"
        assert info.value.suggestion == "pretrain.learning_rate"

    def test_wrong_type(self):
        """Une valeur du mauvais type est refusée."""
        with pytest.raises(ConfigError) as info:
            apply_overrides(RunConfig(), {"pretrain.epochs": "many"})
        assert info.value.key == "pretrain.epochs"

    def test_invalid_value_names_key(self):
        """Une valeur refusée par sa section nomme la clé fautive."""
        with pytest.raises(ConfigError) as info:
            apply_overrides(RunConfig(), {"labeling.t_pos": 30.0})
        assert info.value.key == "labeling.t_pos"

    def test_unknown_shift(self):
        """Un décalage inconnu est refusé avec le préréglage le plus proche."""
        with pytest.raises(ConfigError) as info:
            apply_overrides(RunConfig(), {"shift": "sever"})
        assert info.value.suggestion == "severe"


class TestFiles:
    """Tests pour la lecture et l'écriture des fichiers de configuration."""

    def test_load_dotted_keys(self, tmp_path):
        """Les clés pointées et les tables sont acceptées."""
        path = tmp_path / "run.toml"
        path.write_text('pretrain.learning_rate = 0.005\n[training]\nseed = 7\n')
        cfg = load_run_config(path)
        assert cfg.pretrain.learning_rate == 0.005
        assert cfg.seed == 7

    def test_overrides_win_over_file(self, tmp_path):
        """Les valeurs de la ligne de commande sont prioritaires."""
        path = tmp_path / "run.toml"
        path.write_text("training.seed = 7\n")
        assert load_run_config(path, {"training.seed": 9}).seed == 9

    def test_missing_file(self, tmp_path):
        """Un fichier absent est une erreur de données."""
        with pytest.raises(DataError):
            load_run_config(tmp_path / "absent.toml")

    def test_syntax_error(self, tmp_path):
        """Une syntaxe invalide est une erreur de configuration."""
        path = tmp_path / "bad.toml"
        path.write_text("pretrain.learning_rate = = 1\n")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_written_config_reloads_identically(self, tmp_path):
        """La configuration résolue écrite se relit à l'identique."""
        cfg = apply_overrides(RunConfig(), {"training.seed": 4, "pseudolabel.k": 5, "consistency.sort": False})
        path = write_run_config(cfg, tmp_path)
        assert path.name == CONFIG_FILE
        assert load_run_config(path) == cfg


class TestProvenance:
    """Tests pour les en-têtes et métadonnées de provenance."""

    def test_header(self):
        """L'en-tête embarque l'étape, la graine et la configuration en JSON."""
        cfg = apply_overrides(RunConfig(), {"training.seed": 3})
        header = artifact_header(cfg, "pretrain")
        assert header.startswith("geoadapt pretrain seed=3 config={")
        config = json.loads(header.split("config=", 1)[1])
        assert config["training"]["seed"] == 3

    def test_checkpoint_metadata_has_no_stage(self):
        """Les métadonnées de checkpoint ne dépendent que de la configuration."""
        metadata = checkpoint_metadata(RunConfig())
        assert set(metadata) == {"seed", "config"}

    def test_table_rows(self):
        """Une ligne par clé pointée."""
        rows = dict(config_table_rows(RunConfig()))
        assert rows["training.seed"] == "0"
        assert rows["shift"] == "'severe'"
