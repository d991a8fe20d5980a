"""
Interface des extracteurs de descripteurs de GeoAdapt.
"""

from abc import ABC, abstractmethod
from typing import Dict, Tuple

import numpy as np

from geoadapt.core.geometry import PointCloud
from geoadapt.core.tinynet import MLP


class BaseExtractor(ABC):
    """
    Classe de base abstraite pour un extracteur de descripteurs.

    Un extracteur associe à un nuage de points un descripteur global, comparé
    par distance L2 pour la recherche de lieux, et un descripteur local par
    point, utilisé pour proposer des correspondances. Ses paramètres sont
    organisés en sections nommées, sérialisées au format checkpoint.
    """

    @abstractmethod
    def extract(self, cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
        """
        Calcule les descripteurs d'un nuage.

        Args:
            cloud: Le nuage de points (non vide)

        Returns:
            (descripteur global, descripteurs locaux alignés sur les points)
        """
        pass

    @abstractmethod
    def sections(self) -> Dict[str, MLP]:
        """
        Les réseaux de l'extracteur, par nom de section de checkpoint.

        Returns:
            Dictionnaire ordonné nom -> MLP
        """
        pass
