"""
Type de base du stockage des artefacts d'une exécution.
"""

from pathlib import Path
from typing import MutableMapping, Union

# Mapping entre noms d'artefacts (relatifs au répertoire d'exécution) et contenus binaires
BaseStore = MutableMapping[Union[str, Path], bytes]
