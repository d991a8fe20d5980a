"""
Configuration d'une exécution.

Le fichier de configuration est un texte `clé = valeur` à clés pointées
(`pretrain.learning_rate = 0.001`) lu avec toml. Chaque clé est vérifiée
contre l'ensemble des clés connues, convertie au type de sa valeur par
défaut, puis validée par la dataclass de sa section.
"""

import difflib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import toml
import tomlkit

from geoadapt.core.correspondence import CorrespondenceConfig
from geoadapt.core.errors import ConfigError, DataError, ValidationError
from geoadapt.core.evaluation import EvalConfig
from geoadapt.core.features import FeatureConfig
from geoadapt.core.gcc import ConsistencyConfig
from geoadapt.core.labels import LabelingConfig
from geoadapt.core.pseudolabel import PseudoLabelConfig
from geoadapt.core.simulator import SHIFT_PRESETS, SimWorldConfig
from geoadapt.core.tinynet import ContrastiveConfig, OptimConfig, TripletConfig

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.toml"


@dataclass
class TrainingConfig:
    """
    Réglages communs aux étapes d'entraînement.

    Attributes:
        seed: Graine des générateurs de chaque étape
        epoch_scale: Multiplicateur des nombres d'époques et des paliers
        local_loss_weight: Poids de la perte contrastive locale dans la perte totale
        rotation_augmentation: Amplitude de la rotation aléatoire autour de z (degrés)
        jitter_sigma: Écart-type du bruit ajouté aux points (mètres)
        negatives_per_anchor: Nombre maximal de négatifs par ancre dans un lot
        gcc_pairs: Nombre maximal de paires source pour le classifieur
        gcc_holdout: Fraction des paires réservée à l'évaluation du classifieur
        use_ground_truth_tuples: Tuples de vérité terrain au lieu des pseudo-labels
    """

    seed: int = 0
    epoch_scale: float = 0.25
    local_loss_weight: float = 1.0
    rotation_augmentation: float = 180.0
    jitter_sigma: float = 0.01
    negatives_per_anchor: int = 8
    gcc_pairs: int = 400
    gcc_holdout: float = 0.2
    use_ground_truth_tuples: bool = False

    def __post_init__(self):
        if self.seed < 0:
            raise ValidationError("training.seed doit être positif ou nul")
        if self.epoch_scale <= 0:
            raise ValidationError("training.epoch_scale doit être strictement positif")
        if self.local_loss_weight < 0:
            raise ValidationError("training.local_loss_weight doit être positif ou nul")
        if not 0.0 <= self.rotation_augmentation <= 180.0:
            raise ValidationError("training.rotation_augmentation doit être dans [0, 180]")
        if self.jitter_sigma < 0:
            raise ValidationError("training.jitter_sigma doit être positif ou nul")
        if self.negatives_per_anchor < 1 or self.gcc_pairs < 2:
            raise ValidationError("training.negatives_per_anchor ≥ 1 et training.gcc_pairs ≥ 2 requis")
        if not 0.0 <= self.gcc_holdout < 1.0:
            raise ValidationError("training.gcc_holdout doit être dans [0, 1)")


def _pretrain_defaults() -> OptimConfig:
    return OptimConfig(learning_rate=1e-3, schedule="step", milestones=(30, 60), epochs=80, momentum=0.9)


def _gcc_defaults() -> OptimConfig:
    return OptimConfig(learning_rate=0.01, schedule="cosine", epochs=5, batch_size=16, momentum=0.9)


def _retrain_defaults() -> OptimConfig:
    return OptimConfig(learning_rate=1e-4, schedule="step", milestones=(25,), epochs=40, momentum=0.9)


@dataclass
class RunConfig:
    """Configuration complète d'une exécution, une section par composant."""

    shift: str = "severe"
    simulation: SimWorldConfig = field(default_factory=SimWorldConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    correspondence: CorrespondenceConfig = field(default_factory=CorrespondenceConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    pseudolabel: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    pretrain: OptimConfig = field(default_factory=_pretrain_defaults)
    gcc: OptimConfig = field(default_factory=_gcc_defaults)
    retrain: OptimConfig = field(default_factory=_retrain_defaults)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.shift not in SHIFT_PRESETS:
            raise ConfigError(
                f"Décalage de domaine inconnu : '{self.shift}'",
                key="shift",
                suggestion=_nearest(self.shift, SHIFT_PRESETS),
            )
        if self.consistency.input_length != self.correspondence.max_correspondences:
            logger.debug(
                "Longueur d'entrée du classifieur (%d) différente du plafond de correspondances (%d)",
                self.consistency.input_length,
                self.correspondence.max_correspondences,
            )

    @property
    def seed(self) -> int:
        return self.training.seed

    def scaled(self, stage: str) -> OptimConfig:
        """
        Optimiseur d'une étape, époques et paliers multipliés par `training.epoch_scale`.

        Un nombre d'époques nul reste nul ; sinon il est arrondi avec un plancher de 1.
        """
        base: OptimConfig = getattr(self, stage)
        scale = self.training.epoch_scale
        if base.epochs == 0:
            return replace(base, milestones=())
        epochs = max(1, round(base.epochs * scale))
        milestones = tuple(max(1, round(m * scale)) for m in base.milestones)
        return replace(base, epochs=epochs, milestones=milestones)


def flatten_config(values: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """
    Aplatit un dictionnaire imbriqué en clés pointées.

    Args:
        values: Dictionnaire imbriqué (sections de tables)
        prefix: Préfixe des clés produites

    Returns:
        Un dictionnaire `section.clé -> valeur`
    """
    flat: Dict[str, Any] = {}
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten_config(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def _as_dict(cfg: RunConfig) -> Dict[str, Any]:
    return asdict(cfg)


def known_keys(cfg: Optional[RunConfig] = None) -> Dict[str, Any]:
    """Clés pointées connues et leurs valeurs par défaut."""
    return flatten_config(_as_dict(cfg or RunConfig()))


def _nearest(key: str, candidates) -> Optional[str]:
    matches = difflib.get_close_matches(key, list(candidates), n=1, cutoff=0.0)
    return matches[0] if matches else None


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Convertit une valeur lue au type de la valeur par défaut de sa clé."""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, (str, int, float)) or isinstance(value, bool):
                raise TypeError
            return str(value)
        if isinstance(default, (tuple, list)):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            if default and isinstance(default[0], str):
                return tuple(str(v) for v in value)
            if default and isinstance(default[0], float):
                return tuple(float(v) for v in value)
            return tuple(int(v) if float(v) == int(v) else float(v) for v in value)
        if default is None:
            if isinstance(value, bool):
                raise TypeError
            return int(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(
        f"Valeur invalide pour '{key}' : {value!r} (type attendu : {type(default).__name__})",
        key=key,
    )


def _build(cfg: RunConfig, flat: Mapping[str, Any]) -> RunConfig:
    top: Dict[str, Any] = {}
    sections: Dict[str, Dict[str, Any]] = {}
    for key, value in flat.items():
        if "." in key:
            section, name = key.split(".", 1)
            sections.setdefault(section, {})[name] = value
        else:
            top[key] = value
    updates: Dict[str, Any] = dict(top)
    for section, values in sections.items():
        try:
            updates[section] = replace(getattr(cfg, section), **values)
        except ConfigError:
            raise
        except ValidationError as error:
            key = f"{section}.{next(iter(values))}" if len(values) == 1 else section
            raise ConfigError(str(error), key=key)
    return replace(cfg, **updates)


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """
    Applique des valeurs à clés pointées sur une configuration.

    Raises:
        ConfigError: Clé inconnue (avec la clé connue la plus proche) ou valeur invalide
    """
    defaults = known_keys(cfg)
    coerced = {}
    for key, value in overrides.items():
        if key not in defaults:
            raise ConfigError(
                f"Clé de configuration inconnue : '{key}'", key=key, suggestion=_nearest(key, defaults)
            )
        coerced[key] = _coerce(key, value, defaults[key])
    return _build(cfg, coerced)


def load_run_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """
    Charge une configuration ; les valeurs absentes prennent leur valeur par défaut.

    Args:
        path: Fichier `clé = valeur` (optionnel)
        overrides: Valeurs prioritaires sur le fichier (ex. la graine de la ligne de commande)

    Returns:
        La configuration résolue et validée

    Raises:
        DataError: Fichier introuvable
        ConfigError: Syntaxe invalide, clé inconnue ou valeur invalide
    """
    flat: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"Fichier de configuration introuvable : {path}")
        try:
            flat = flatten_config(toml.load(path))
        except toml.TomlDecodeError as error:
            raise ConfigError(f"Syntaxe invalide dans {path} : {error}")
    flat.update(overrides or {})
    cfg = apply_overrides(RunConfig(), flat)
    logger.debug("Configuration chargée : %d clés explicites", len(flat))
    return cfg


def render_run_config(cfg: RunConfig) -> str:
    """Rend la configuration résolue au format TOML, une table par section."""
    document = tomlkit.document()
    values = _as_dict(cfg)
    for key, value in values.items():
        if not isinstance(value, dict):
            document.add(key, value)
    for key, value in values.items():
        if isinstance(value, dict):
            table = tomlkit.table()
            for name, item in value.items():
                if item is None:
                    continue
                table.add(name, list(item) if isinstance(item, tuple) else item)
            document.add(key, table)
    return tomlkit.dumps(document)


def write_run_config(cfg: RunConfig, directory: Union[str, Path]) -> Path:
    """Écrit `config.toml` dans un répertoire de sortie."""
    path = Path(directory) / CONFIG_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_run_config(cfg), encoding="utf-8")
    return path


def config_json(cfg: RunConfig) -> str:
    """Configuration en JSON compact, clés triées."""
    return json.dumps(_as_dict(cfg), sort_keys=True, separators=(",", ":"))


def artifact_header(cfg: RunConfig, stage: str) -> str:
    """En-tête d'une ligne embarquant la configuration résolue dans un artefact texte."""
    return f"geoadapt {stage} seed={cfg.seed} config={config_json(cfg)}"


def checkpoint_metadata(cfg: RunConfig) -> Dict[str, Any]:
    """Métadonnées de checkpoint : graine et configuration résolue, sans rien de propre à l'étape."""
    return {"seed": cfg.seed, "config": json.loads(config_json(cfg))}


def config_table_rows(cfg: RunConfig) -> Tuple[Tuple[str, str], ...]:
    """Couples (clé pointée, valeur) pour l'affichage de la configuration résolue."""
    return tuple((key, repr(value)) for key, value in known_keys(cfg).items())


__all__ = [
    "CONFIG_FILE",
    "RunConfig",
    "TrainingConfig",
    "apply_overrides",
    "artifact_header",
    "checkpoint_metadata",
    "config_json",
    "config_table_rows",
    "flatten_config",
    "known_keys",
    "load_run_config",
    "render_run_config",
    "write_run_config",
]

