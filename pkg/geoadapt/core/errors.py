"""
Hiérarchie d'exceptions de GeoAdapt.

Chaque exception porte une catégorie (config, data, numeric, starvation, state,
stage) que l'interface en ligne de commande traduit en code de sortie.
"""

from typing import Optional


class GeoAdaptError(Exception):
    """Classe de base de toutes les erreurs levées par GeoAdapt."""

    category = "internal"


class ValidationError(GeoAdaptError, ValueError):
    """Une entrée ne respecte pas les invariants de son type."""

    category = "config"


class ConfigError(ValidationError):
    """
    Erreur de configuration.

    Args:
        message: Description de l'erreur
        key: La clé de configuration fautive, si connue
        suggestion: La clé valide la plus proche, si elle existe
    """

    category = "config"

    def __init__(
        self, message: str, key: Optional[str] = None, suggestion: Optional[str] = None
    ):
        if suggestion:
            message = f"{message} (vouliez-vous dire '{suggestion}' ?)"
        super().__init__(message)
        self.key = key
        self.suggestion = suggestion


class DataError(GeoAdaptError):
    """Données absentes ou illisibles (fichier manquant, manifeste incohérent)."""

    category = "data"


class ParseError(DataError):
    """
    Fichier mal formé.

    Args:
        message: Description de l'erreur
        path: Le fichier en cause
        offset: Position en octets de l'erreur (fichiers binaires)
        line: Numéro de ligne de l'erreur (fichiers texte)
    """

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        offset: Optional[int] = None,
        line: Optional[int] = None,
    ):
        location = []
        if path is not None:
            location.append(str(path))
        if offset is not None:
            location.append(f"octet {offset}")
        if line is not None:
            location.append(f"ligne {line}")
        if location:
            message = f"{message} [{', '.join(location)}]"
        super().__init__(message)
        self.path = path
        self.offset = offset
        self.line = line


class NumericError(GeoAdaptError):
    """Valeur non finie apparue pendant un calcul."""

    category = "numeric"


class StateError(GeoAdaptError, RuntimeError):
    """Appel hors séquence, par exemple une rétropropagation sans passe avant."""

    category = "state"


class TrainingError(GeoAdaptError):
    """L'entraînement ne peut pas démarrer avec les données fournies."""

    category = "data"


class StarvationError(GeoAdaptError):
    """Aucun tuple d'entraînement n'a pu être construit à partir des pseudo-labels."""

    category = "starvation"


class StageError(GeoAdaptError):
    """
    Échec d'une étape du pipeline.

    Args:
        stage: Nom de l'étape en échec
        cause: L'exception d'origine
    """

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"L'étape '{stage}' a échoué : {cause}")
        self.stage = stage
        self.cause = cause
        self.category = getattr(cause, "category", "stage")
