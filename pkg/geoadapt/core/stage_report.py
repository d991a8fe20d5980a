"""
Comptes rendus des étapes d'entraînement et journal CSV d'une exécution.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

from dataclasses_json import dataclass_json

from geoadapt.core.errors import NumericError

logger = logging.getLogger(__name__)


@dataclass_json
@dataclass
class StageReport:
    """
    Compte rendu d'une étape du pipeline.

    Attributes:
        stage: Nom de l'étape (pretrain, gcc, pseudolabel, retrain)
        epochs: Nombre d'époques exécutées
        final_loss: Perte moyenne de la dernière époque (0 si aucune époque)
        wall_time: Durée en secondes
        checkpoint: Chemin de l'artefact produit, s'il a été écrit
        epoch_losses: Pertes moyennes par époque
        extra: Mesures propres à l'étape (ex. AUC du classifieur, nombre de tuples)
    """

    stage: str
    epochs: int
    final_loss: float
    wall_time: float
    checkpoint: Optional[str] = None
    epoch_losses: List[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        losses = [self.final_loss, *self.epoch_losses]
        if not all(math.isfinite(loss) for loss in losses):
            raise NumericError(f"Perte non finie dans le compte rendu de l'étape {self.stage}")


class StageReportLog:
    """
    Journal des comptes rendus d'une exécution.
    """

    def __init__(self):
        self._log: List[StageReport] = []

    def update_log(self, report: StageReport) -> None:
        """
        Ajoute le compte rendu d'une étape au journal.

        Args:
            report: Le compte rendu de l'étape terminée
        """
        self._log.append(report)
        logger.info(
            "Étape %s : %d époques, perte finale %.6f, %.2f s",
            report.stage,
            report.epochs,
            report.final_loss,
            report.wall_time,
        )

    def log(self) -> List[StageReport]:
        return self._log

    def format_log(self) -> str:
        """
        Formate le journal comme une chaîne CSV.

        Returns:
            Le journal, une ligne par étape
        """
        result = "stage,epochs,final_loss,wall_time,checkpoint\n"
        for report in self._log:
            result += (
                f"{report.stage},{report.epochs},{report.final_loss:.6f},"
                f"{report.wall_time:.3f},{report.checkpoint or ''}\n"
            )
        return result

    def total_time(self) -> float:
        return sum(report.wall_time for report in self._log)
