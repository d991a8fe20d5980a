"""
Balayage d'ablation sur un paramètre de l'adaptation.

Le pré-entraînement est fait une seule fois et partagé par toutes les
cellules ; le classifieur l'est aussi quand le paramètre balayé ne le
concerne pas. Chaque cellule exécute la suite du pipeline dans son propre
sous-répertoire puis est évaluée sur la cible.
"""

import difflib
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from geoadapt.core.config import RunConfig, apply_overrides, artifact_header
from geoadapt.core.datasets import DatasetManifest
from geoadapt.core.default.disk_store import DiskStore
from geoadapt.core.default.paths import (
    ABLATION_TABLE,
    ADAPTED_CHECKPOINT,
    GCC_CHECKPOINT,
    PRETRAIN_CHECKPOINT,
)
from geoadapt.core.default.pipeline import GeoAdaptPipeline, load_extractor
from geoadapt.core.errors import ConfigError, GeoAdaptError
from geoadapt.core.evaluation import evaluate_extractor, write_table

logger = logging.getLogger(__name__)

# Variantes de normalisation des confiances : (tri, mise à l'échelle)
NORMALIZATIONS = {
    "full": (True, True),
    "sort": (True, False),
    "scale": (False, True),
    "none": (False, False),
}

AXES = {
    "sort": "consistency.sort",
    "scale": "consistency.scale",
    "normalization": None,
    "alpha_pos": "pseudolabel.alpha_pos",
    "alpha_neg": "pseudolabel.alpha_neg",
}

# Axes dont le classifieur entraîné peut être partagé entre cellules
SHARED_GCC_AXES = ("alpha_pos", "alpha_neg")

SHARED_DIR = "shared"


def cell_overrides(axis: str, value: str) -> Dict[str, object]:
    """
    Valeurs de configuration d'une cellule.

    Raises:
        ConfigError: Axe ou valeur inconnus
    """
    if axis not in AXES:
        raise ConfigError(f"Axe d'ablation inconnu : '{axis}'", key=axis, suggestion=_closest(axis))
    if axis == "normalization":
        if value not in NORMALIZATIONS:
            raise ConfigError(
                f"Normalisation inconnue : '{value}' (choix : {', '.join(NORMALIZATIONS)})", key=axis
            )
        sort, scale = NORMALIZATIONS[value]
        return {"consistency.sort": sort, "consistency.scale": scale}
    if axis in ("sort", "scale"):
        lowered = str(value).strip().lower()
        if lowered not in ("true", "false"):
            raise ConfigError(f"Valeur booléenne attendue pour {axis} : '{value}'", key=axis)
        return {AXES[axis]: lowered == "true"}
    try:
        return {AXES[axis]: float(value)}
    except ValueError:
        raise ConfigError(f"Valeur numérique attendue pour {axis} : '{value}'", key=axis)


def _closest(axis: str) -> Optional[str]:
    matches = difflib.get_close_matches(axis, list(AXES), n=1, cutoff=0.0)
    return matches[0] if matches else None


def _recall_columns(recalls: Dict[str, float]) -> Dict[str, float]:
    return {f"recall@{key}": value for key, value in recalls.items()}


def ablation_sweep(
    source: DatasetManifest,
    target: DatasetManifest,
    config: RunConfig,
    axis: str,
    grid: Sequence[str],
    out: Union[str, Path],
    threads: int = 1,
) -> List[Dict[str, object]]:
    """
    Exécute une cellule par valeur de la grille et écrit la table des résultats.

    Une cellule en échec est consignée avec la catégorie de son erreur au lieu
    d'interrompre le balayage. La première ligne est la référence sans
    adaptation (extracteur pré-entraîné seul).

    Args:
        source: Jeu source avec poses
        target: Jeu cible ; ses poses ne servent qu'à l'évaluation
        config: Configuration de base
        axis: Paramètre balayé (sort, scale, normalization, alpha_pos, alpha_neg)
        grid: Valeurs du paramètre
        out: Répertoire de sortie
        threads: Nombre de fils

    Returns:
        Les lignes de la table, dans l'ordre de la grille
    """
    cells = [(str(value), apply_overrides(config, cell_overrides(axis, str(value)))) for value in grid]
    if not cells:
        raise ConfigError("La grille d'ablation est vide", key=axis)
    out = Path(out)
    shared = GeoAdaptPipeline.with_default_config(out / SHARED_DIR, config, threads)
    extractor = shared.pretrain(source)
    baseline = evaluate_extractor(extractor, target, config.eval, threads)
    rows: List[Dict[str, object]] = [
        {axis: "source-only", "status": "ok", **_recall_columns(baseline.recall.recalls), "pr_auc": baseline.curve.auc}
    ]
    if axis in SHARED_GCC_AXES:
        shared.train_gcc(source, extractor)

    for value, cell_config in cells:
        cell_dir = out / f"{axis}={value}"
        store = DiskStore(cell_dir)
        for key in list(store):
            del store[key]
        store[PRETRAIN_CHECKPOINT] = shared.store[PRETRAIN_CHECKPOINT]
        if axis in SHARED_GCC_AXES:
            store[GCC_CHECKPOINT] = shared.store[GCC_CHECKPOINT]
        pipeline = GeoAdaptPipeline(store, cell_config, threads)
        row: Dict[str, object] = {axis: value}
        try:
            pipeline.run(source, target, resume=True)
            adapted, _ = load_extractor(store.require(ADAPTED_CHECKPOINT), cell_config)
            evaluation = evaluate_extractor(adapted, target, cell_config.eval, threads)
            row.update(status="ok", **_recall_columns(evaluation.recall.recalls), pr_auc=evaluation.curve.auc)
        except GeoAdaptError as error:
            logger.warning("Cellule %s=%s en échec : %s", axis, value, error)
            row.update(status=error.category, error=str(error))
        for report in pipeline.report_log.log():
            if "holdout_auc" in report.extra:
                row["gcc_auc"] = report.extra["holdout_auc"]
            if report.stage == "pseudolabel":
                row["tuples"] = report.extra.get("tuples", 0)
        rows.append(row)

    write_table(out / ABLATION_TABLE, rows, artifact_header(config, f"ablate {axis}"))
    logger.info("Table d'ablation écrite : %s", out / ABLATION_TABLE)
    return rows
