"""
Rendu en PNG des courbes et histogrammes écrits par l'évaluation.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Union

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from geoadapt.core.default.paths import (  # noqa: E402
    POSITIVE_DISTANCE_HISTOGRAM,
    PR_CURVE_FILE,
    SEPARABILITY_HISTOGRAM,
)
from geoadapt.core.errors import DataError  # noqa: E402
from geoadapt.core.evaluation import read_table  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_STYLE = {
    "font.family": "serif",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (4.5, 3.0),
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}
mpl.rcParams.update(PLOT_STYLE)

BIN_COLUMNS = ("bin_start", "bin_end")


def _rows(path: Union[str, Path]) -> List[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Fichier à tracer introuvable : {path}")
    rows = read_table(path)
    if not rows:
        raise DataError(f"Fichier à tracer vide : {path}")
    return rows


def plot_pr_curves(
    paths: Sequence[Union[str, Path]], labels: Sequence[str], out: Union[str, Path]
) -> Path:
    """
    Trace une ou plusieurs courbes précision-rappel sur la même figure.

    Args:
        paths: Fichiers CSV (threshold, precision, recall)
        labels: Légende de chaque courbe
        out: Image PNG produite
    """
    fig, ax = plt.subplots()
    for path, label in zip(paths, labels):
        rows = _rows(path)
        recall = [float(row["recall"]) for row in rows]
        precision = [float(row["precision"]) for row in rows]
        ax.plot(recall, precision, label=label)
    ax.set_xlabel("Rappel")
    ax.set_ylabel("Précision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower left")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_histogram(path: Union[str, Path], out: Union[str, Path], xlabel: str = "Distance") -> Path:
    """Trace un histogramme écrit par `write_histogram`, une série par colonne."""
    rows = _rows(path)
    starts = [float(row["bin_start"]) for row in rows]
    widths = [float(row["bin_end"]) - float(row["bin_start"]) for row in rows]
    series = [key for key in rows[0] if key not in BIN_COLUMNS]
    fig, ax = plt.subplots()
    for name in series:
        ax.bar(starts, [float(row[name]) for row in rows], width=widths, align="edge", alpha=0.5, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("Fréquence")
    if len(series) > 1:
        ax.legend()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    return out


def render_directory(directory: Union[str, Path], out: Union[str, Path]) -> List[Path]:
    """
    Trace toutes les sorties d'évaluation présentes dans un répertoire.

    Returns:
        Les images produites

    Raises:
        DataError: Si le répertoire ne contient aucune sortie traçable
    """
    directory, out = Path(directory), Path(out)
    images = []
    if (directory / PR_CURVE_FILE).is_file():
        images.append(plot_pr_curves([directory / PR_CURVE_FILE], [directory.name], out / "pr_curve.png"))
    if (directory / SEPARABILITY_HISTOGRAM).is_file():
        images.append(
            plot_histogram(directory / SEPARABILITY_HISTOGRAM, out / "separability.png", "Distance L2 des descripteurs")
        )
    if (directory / POSITIVE_DISTANCE_HISTOGRAM).is_file():
        images.append(
            plot_histogram(
                directory / POSITIVE_DISTANCE_HISTOGRAM, out / "positive_distances.png", "Distance des poses (m)"
            )
        )
    if not images:
        raise DataError(f"Aucune sortie d'évaluation à tracer dans {directory}")
    logger.info("%d figures écrites dans %s", len(images), out)
    return images
